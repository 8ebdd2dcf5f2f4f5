//! Command-line front end. [`run`] maps every failure to an exit code.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, Settings};
use crate::ctc::PhonemeSequence;
use crate::data::{
    generate_corpus, load_corpus, read_boundaries, read_transcripts, split_paired, write_boundaries,
    write_corpus, write_transcripts, FeatureSequence, Utterance,
};
use crate::error::{Error, Result};
use crate::eval::{alignment_summary, boundary_f1, corpus_per, export_codebook_2d, BoundaryScore};
use crate::segmentation;
use crate::training::{
    read_checkpoint, train, write_checkpoint, write_metrics_file, Datasets, Model, Variant,
};

#[derive(Parser, Debug)]
#[command(name = "seqrq", version, about = "Sequential representation quantization autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file of flat key-value settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Setting override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus: manifest.csv, dev.csv, test.csv, boundaries.csv, feats/.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint and per-epoch metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Beam-search recognition into a hypothesis CSV.
    Recognize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resynthesize every utterance into a new feature directory.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feed the decoder its own output instead of the input frames.
        #[arg(long)]
        free_running: bool,
    },
    /// Phoneme error rate of a hypothesis CSV against a reference CSV.
    EvalPer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Segment boundary precision, recall and F1 against ground truth.
    EvalBoundaries {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        boundaries: PathBuf,
        #[arg(long)]
        tolerance: Option<usize>,
    },
    /// 2-D projection of the codebook as unit,x,y.
    ExportCodebook {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average free-running attention alignment as a G×G CSV.
    EvalAlignment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid: Option<usize>,
    },
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code. Reports go to `out`, errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn settings(common: &Common, extra: Vec<(String, toml::Value)>) -> Result<Settings> {
    let mut overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), toml::Value::Integer(seed as i64)));
    }
    overrides.extend(extra);
    Settings::from_file(common.config.as_deref(), overrides)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData { common, out: dir } => gen_data(&settings(&common, Vec::new())?, &dir, out),
        Command::Train {
            common,
            manifest,
            dev,
            checkpoint,
            metrics,
            epochs,
            variant,
        } => {
            let mut extra = Vec::new();
            if let Some(e) = epochs {
                extra.push(("epochs".into(), toml::Value::Integer(e as i64)));
            }
            if let Some(v) = variant {
                extra.push(("variant".into(), toml::Value::String(Variant::parse(&v)?.name().into())));
            }
            let s = settings(&common, extra)?;
            train_command(&s, &manifest, dev.as_deref(), &checkpoint, &metrics, out)
        }
        Command::Recognize {
            common,
            checkpoint,
            manifest,
            beam,
            out: path,
        } => {
            let s = settings(&common, Vec::new())?;
            let width = beam.unwrap_or(s.beam_width);
            if width == 0 {
                return Err(Error::Usage("beam width must be positive".into()));
            }
            let model = load_model(&checkpoint)?;
            let utts = load_checked(&manifest, &model)?;
            let rows = utts
                .iter()
                .map(|u| Ok((u.id().to_string(), model.beam_recognize(&u.features.frames, width)?)))
                .collect::<Result<Vec<_>>>()?;
            match path {
                Some(p) => write_transcripts(BufWriter::new(File::create(p)?), &rows),
                None => write_transcripts(out, &rows),
            }
        }
        Command::Reconstruct {
            common,
            checkpoint,
            manifest,
            out: dir,
            free_running,
        } => {
            settings(&common, Vec::new())?;
            reconstruct_command(&checkpoint, &manifest, &dir, free_running, out)
        }
        Command::EvalPer { reference, hyp } => eval_per(&reference, &hyp, out),
        Command::EvalBoundaries {
            common,
            checkpoint,
            manifest,
            boundaries,
            tolerance,
        } => {
            let s = settings(&common, Vec::new())?;
            let tol = tolerance.unwrap_or(s.boundary_tolerance);
            eval_boundaries(&checkpoint, &manifest, &boundaries, tol, out)
        }
        Command::ExportCodebook { checkpoint, out: path } => {
            let model = load_model(&checkpoint)?;
            let codebook = model.codebook().ok_or_else(|| {
                Error::Usage(format!("{} has no codebook", model.variant().name()))
            })?;
            let labels: Vec<String> = (0..codebook.size())
                .map(|k| {
                    if k == codebook.blank_index {
                        "blank".to_string()
                    } else {
                        k.to_string()
                    }
                })
                .collect();
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["unit", "x", "y"])?;
            for (label, x, y) in export_codebook_2d(&codebook.entries, &labels)? {
                w.write_record([label, format!("{x:.17e}"), format!("{y:.17e}")])?;
            }
            w.flush()?;
            writeln!(out, "wrote {} codewords to {}", codebook.size(), path.display())?;
            Ok(())
        }
        Command::EvalAlignment {
            common,
            checkpoint,
            manifest,
            out: path,
            grid,
        } => {
            let s = settings(&common, Vec::new())?;
            let g = grid.unwrap_or(s.alignment_grid);
            let model = load_model(&checkpoint)?;
            let utts = load_checked(&manifest, &model)?;
            let r = model.config.decoder.reduction;
            let alignments = utts
                .iter()
                .map(|u| {
                    let steps = 2 * u.features.len().div_ceil(r);
                    Ok(model.resynthesize(&u.features.frames, steps)?.1)
                })
                .collect::<Result<Vec<_>>>()?;
            let summary = alignment_summary(&alignments, g)?;
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record((0..g).map(|j| format!("c{j}")))?;
            for row in summary.average.iter_rows() {
                w.write_record(row.iter().map(|v| format!("{v:.17e}")))?;
            }
            w.flush()?;
            writeln!(
                out,
                "diagonal_mass={:.4} alignments={}",
                summary.diagonal_mass, summary.count
            )?;
            Ok(())
        }
    }
}

/// Names the file in I/O and CSV failures; other errors pass through.
fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(_) | Error::Csv(_) => Error::Data(format!("{}: {e}", path.display())),
        other => other,
    })
}

fn load(manifest: &Path) -> Result<Vec<Utterance<f64>>> {
    at_path(manifest, load_corpus(manifest))
}

fn load_model(checkpoint: &Path) -> Result<Model<f64>> {
    at_path(checkpoint, read_checkpoint(checkpoint))
}

/// Loads a manifest and checks its feature width and unit ids against `model`.
fn load_checked(manifest: &Path, model: &Model<f64>) -> Result<Vec<Utterance<f64>>> {
    let utts = load(manifest)?;
    let width = model.config.encoder.input_dim;
    for u in &utts {
        if u.features.width() != width {
            return Err(Error::Data(format!(
                "utterance {} has {} features per frame, model expects {width}",
                u.id(),
                u.features.width()
            )));
        }
        if let Some(units) = &u.units {
            if let Some(&bad) = units.ids().iter().find(|&&id| id >= model.config.units) {
                return Err(Error::Data(format!(
                    "utterance {} uses unit {bad}, model has {} units",
                    u.id(),
                    model.config.units
                )));
            }
        }
    }
    Ok(utts)
}

fn gen_data(s: &Settings, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let spec = s.synthetic_spec();
    let total = s.dev_utterances + s.test_utterances + s.train_utterances;
    let corpus = generate_corpus::<f64>(&spec, total, s.seed)?;
    let mut utts = corpus.utterances;
    let pool = utts.split_off(s.dev_utterances + s.test_utterances);
    let test = utts.split_off(s.dev_utterances);
    let dev = utts;
    let (paired, unpaired) = split_paired(&pool, s.paired_budget()?, s.seed)?;
    fs::create_dir_all(dir)?;
    let train: Vec<Utterance<f64>> = paired.iter().chain(&unpaired).cloned().collect();
    write_corpus(dir, "manifest.csv", &train)?;
    write_corpus(dir, "dev.csv", &dev)?;
    write_corpus(dir, "test.csv", &test)?;
    let all: Vec<Utterance<f64>> = train.iter().chain(&dev).chain(&test).cloned().collect();
    write_boundaries(&dir.join("boundaries.csv"), &all)?;
    writeln!(
        out,
        "paired={} unpaired={} dev={} test={}",
        paired.len(),
        unpaired.len(),
        dev.len(),
        test.len()
    )?;
    Ok(())
}

fn check_width(utts: &[Utterance<f64>]) -> Result<usize> {
    let width = utts
        .first()
        .map(|u| u.features.width())
        .ok_or_else(|| Error::Config("training manifest is empty".into()))?;
    if let Some(u) = utts.iter().find(|u| u.features.width() != width) {
        return Err(Error::Data(format!(
            "utterance {} has {} features per frame, expected {width}",
            u.id(),
            u.features.width()
        )));
    }
    Ok(width)
}

fn train_command(
    s: &Settings,
    manifest: &Path,
    dev: Option<&Path>,
    checkpoint: &Path,
    metrics: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let utts = load(manifest)?;
    let width = check_width(&utts)?;
    let model = Model::<f64>::new(s.model_config(width), s.seed)?;
    let check = |u: &[Utterance<f64>]| -> Result<()> {
        for utt in u {
            if utt.features.width() != width {
                return Err(Error::Data(format!("utterance {} has the wrong width", utt.id())));
            }
            if let Some(bad) = utt.units.as_ref().and_then(|p| p.ids().iter().find(|&&id| id >= s.units)) {
                return Err(Error::Data(format!(
                    "utterance {} uses unit {bad}, settings declare {} units",
                    utt.id(),
                    s.units
                )));
            }
        }
        Ok(())
    };
    check(&utts)?;
    let dev: Vec<Utterance<f64>> = match dev {
        Some(p) => load(p)?,
        None => Vec::new(),
    };
    check(&dev)?;
    let (paired, unpaired): (Vec<_>, Vec<_>) = utts.into_iter().partition(|u| u.units.is_some());
    let outcome = train(
        &s.train_config(),
        model,
        &Datasets {
            unpaired,
            paired,
            dev,
        },
    )?;
    write_checkpoint(checkpoint, &outcome.best)?;
    write_metrics_file(metrics, &outcome.metrics)?;
    let best = outcome
        .metrics
        .iter()
        .find(|m| m.epoch == outcome.best_epoch)
        .map_or(f64::NAN, |m| m.dev_per);
    writeln!(out, "best_epoch={} dev_per={best:.4}", outcome.best_epoch)?;
    Ok(())
}

fn reconstruct_command(
    checkpoint: &Path,
    manifest: &Path,
    dir: &Path,
    free_running: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let utts = load_checked(manifest, &model)?;
    let r = model.config.decoder.reduction;
    let mut rebuilt = Vec::with_capacity(utts.len());
    let mut sq = 0.0;
    let mut count = 0usize;
    for u in &utts {
        let frames = if free_running {
            model.resynthesize(&u.features.frames, 2 * u.features.len().div_ceil(r))?.0
        } else {
            model.reconstruct(&u.features.frames)?
        };
        let n = frames.rows().min(u.features.len());
        for t in 0..n {
            for (a, b) in frames.row_slice(t).iter().zip(u.features.frames.row_slice(t)) {
                sq += (a - b) * (a - b);
                count += 1;
            }
        }
        rebuilt.push(Utterance {
            features: FeatureSequence::new(u.id(), frames, u.features.frame_hop_ms)?,
            units: u.units.clone(),
            spans: Vec::new(),
        });
    }
    fs::create_dir_all(dir)?;
    write_corpus(dir, "manifest.csv", &rebuilt)?;
    writeln!(out, "mse={:.6} utterances={}", sq / count.max(1) as f64, rebuilt.len())?;
    Ok(())
}

fn eval_per(reference: &Path, hyp: &Path, out: &mut dyn Write) -> Result<()> {
    let refs = at_path(reference, read_transcripts(reference))?;
    let hyps: std::collections::HashMap<String, PhonemeSequence> = at_path(hyp, read_transcripts(hyp))?
        .into_iter()
        .map(|(id, u)| (id, u.unwrap_or_default()))
        .collect();
    let mut pairs = Vec::new();
    for (id, r) in refs {
        let Some(r) = r else { continue };
        let h = hyps
            .get(&id)
            .ok_or_else(|| Error::Data(format!("no hypothesis for utterance {id}")))?;
        pairs.push((r, h.clone()));
    }
    let report = corpus_per(pairs.iter().map(|(r, h)| (r, h)))?;
    writeln!(out, "per={:.3}", report.per)?;
    writeln!(
        out,
        "substitutions={} deletions={} insertions={} reference_units={}",
        report.substitutions, report.deletions, report.insertions, report.ref_len
    )?;
    Ok(())
}

fn eval_boundaries(
    checkpoint: &Path,
    manifest: &Path,
    boundaries: &Path,
    tolerance: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let utts = load_checked(manifest, &model)?;
    let truth: std::collections::HashMap<String, Vec<crate::data::UnitSpan>> =
        at_path(boundaries, read_boundaries(boundaries))?.into_iter().collect();
    let scale = model.config.encoder.downsampling();
    let mut total = BoundaryScore::default();
    let mut scored = 0;
    for u in &utts {
        let Some(spans) = truth.get(u.id()) else { continue };
        let reference: Vec<usize> = spans.iter().skip(1).map(|s| s.start).collect();
        let predicted: Vec<usize> = segmentation::boundaries(&model.frame_runs(&u.features.frames)?)
            .into_iter()
            .map(|b| b * scale)
            .collect();
        total.merge(&boundary_f1(&predicted, &reference, tolerance));
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Data("no manifest utterance has ground-truth boundaries".into()));
    }
    writeln!(
        out,
        "precision={:.4} recall={:.4} f1={:.4} utterances={scored}",
        total.precision, total.recall, total.f1
    )?;
    Ok(())
}
