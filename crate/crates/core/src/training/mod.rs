//! Semi-supervised optimization over mixed unpaired and paired steps, the
//! two comparison regimes, checkpoints and the metrics log.

mod checkpoint;
mod model;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use model::{Model, ModelConfig, UtteranceLoss, Variant};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::PhonemeSequence;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::eval::{corpus_per, PerReport};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::optim::{clip_global_norm, Adam};

/// Interleaving never waits longer than this many unpaired steps.
pub const MAX_INTERLEAVE: usize = 16;

/// Scalar values of the objective's terms for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub ctc: f64,
    pub tts: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `recon + λ1·ctc + λ2·tts` evaluated in the same order as the tape.
    pub fn weighted_sum(&self) -> f64 {
        self.recon + self.lambda1 * self.ctc + self.lambda2 * self.tts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Unpaired,
    Paired,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub kind: StepKind,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_unpaired: usize,
    pub batch_paired: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            batch_unpaired: 100,
            batch_paired: 1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 5.0,
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_unpaired == 0 || self.batch_paired == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let positive = [self.learning_rate, self.clip_norm];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment coefficients must lie in [0, 1)".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Training, model-selection and evaluation splits.
#[derive(Clone, Debug, Default)]
pub struct Datasets<S> {
    pub unpaired: Vec<Utterance<S>>,
    pub paired: Vec<Utterance<S>>,
    pub dev: Vec<Utterance<S>>,
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub ctc: f64,
    pub tts: f64,
    pub total: f64,
    pub dev_per: f64,
}

pub struct TrainOutcome<S> {
    /// Parameters from the epoch with the lowest dev PER, the last epoch
    /// without dev transcriptions, or the initialization when no epoch ran.
    pub best: Model<S>,
    /// Parameters after the last epoch.
    pub last: Model<S>,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
}

/// Steps of the more numerous kind between consecutive steps of the other,
/// from the per-epoch batch counts of the two sets.
pub fn interleave_ratio(n_major: usize, n_minor: usize) -> usize {
    if n_minor == 0 {
        return usize::MAX;
    }
    let ratio = (n_major as f64 / n_minor as f64).round() as usize;
    ratio.clamp(1, MAX_INTERLEAVE)
}

fn value<S: Scalar>(v: Option<crate::numerics::Var<'_, S>>) -> f64 {
    v.map_or(0.0, |v| v.item().as_f64())
}

struct Trainer<'a, S: Scalar> {
    config: &'a TrainConfig,
    model: Model<S>,
    adam: Adam<S>,
    lambda1: f64,
    lambda2: f64,
}

impl<S: Scalar> Trainer<'_, S> {
    /// One optimizer update over a batch, with gradients averaged across
    /// its utterances. Infeasible targets are skipped; returns `None` when
    /// nothing in the batch was usable.
    fn step(&mut self, batch: &[&Utterance<S>], paired: bool) -> Result<Option<(LossBreakdown, f64)>> {
        let mut sum: Option<Vec<Tensor<S>>> = None;
        let mut acc = LossBreakdown::default();
        let mut used = 0usize;
        for utt in batch {
            let units = if paired { utt.units.as_ref() } else { None };
            let tape = Tape::new();
            let p = self.model.store.bind(&tape);
            let loss = match self.model.utterance_loss(
                &tape,
                &p,
                &utt.features.frames,
                units,
                S::lit(self.lambda1),
                S::lit(self.lambda2),
            ) {
                Ok(loss) => loss,
                Err(e @ Error::InfeasibleTarget { .. }) => {
                    log::warn!("skipping {}: {e}", utt.id());
                    continue;
                }
                Err(e @ Error::Numeric { .. }) => {
                    log::error!(
                        "{e} on utterance {} ({} frames) after {} updates",
                        utt.id(),
                        utt.features.len(),
                        self.adam.steps()
                    );
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let grads = p.collect(&tape.backward(loss.total)?);
            match &mut sum {
                None => sum = Some(grads),
                Some(s) => {
                    for (a, g) in s.iter_mut().zip(&grads) {
                        a.add_assign(g);
                    }
                }
            }
            acc.recon += value(loss.recon);
            acc.ctc += value(loss.ctc);
            acc.tts += value(loss.tts);
            acc.total += loss.total.item().as_f64();
            used += 1;
        }
        let Some(mut grads) = sum else {
            return Ok(None);
        };
        if used > 1 {
            let inv = S::lit(1.0 / used as f64);
            for g in &mut grads {
                g.scale_in_place(inv);
            }
            let n = used as f64;
            acc.recon /= n;
            acc.ctc /= n;
            acc.tts /= n;
            acc.total /= n;
        }
        acc.lambda1 = self.lambda1;
        acc.lambda2 = self.lambda2;
        let norm = clip_global_norm(&mut grads, S::lit(self.config.clip_norm));
        if !norm.is_finite() {
            return Err(Error::Numeric { op: "gradient" });
        }
        self.adam.update(&mut self.model.store, &grads);
        Ok(Some((acc, norm.as_f64())))
    }
}

/// Greedy-decode PER over utterances that carry transcriptions.
pub fn evaluate_per<S: Scalar>(model: &Model<S>, utterances: &[Utterance<S>]) -> Result<PerReport> {
    let mut pairs: Vec<(PhonemeSequence, PhonemeSequence)> = Vec::new();
    for utt in utterances {
        if let Some(reference) = &utt.units {
            pairs.push((reference.clone(), model.greedy_recognize(&utt.features.frames)?));
        }
    }
    corpus_per(pairs.iter().map(|(r, h)| (r, h)))
}

/// Trains `model` on `data` per its variant, selecting the epoch with the
/// lowest dev PER.
///
/// Reconstructing variants interleave the two step kinds by their batch
/// counts. With more unpaired batches, one paired step follows every
/// [`interleave_ratio`] unpaired steps and the epoch is one pass over the
/// unpaired set, cycling the paired set as needed. With more paired batches
/// the roles swap. The baseline takes paired steps only.
pub fn train<S: Scalar>(
    config: &TrainConfig,
    model: Model<S>,
    data: &Datasets<S>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    let variant = model.variant();
    let unpaired: Vec<&Utterance<S>> = if variant.reconstructs() {
        data.unpaired.iter().collect()
    } else {
        Vec::new()
    };
    let paired: Vec<&Utterance<S>> = data.paired.iter().filter(|u| u.units.is_some()).collect();
    if unpaired.is_empty() && paired.is_empty() {
        return Err(Error::Config(format!(
            "no training data for {}",
            variant.name()
        )));
    }
    if !variant.reconstructs() && paired.is_empty() {
        return Err(Error::Config("baseline ASR needs paired data".into()));
    }
    let (lambda1, lambda2) = if variant.reconstructs() {
        (config.lambda1, config.lambda2)
    } else {
        (1.0, 0.0)
    };
    let adam = Adam::new(
        &model.store,
        S::lit(config.learning_rate),
        S::lit(config.beta1),
        S::lit(config.beta2),
    );
    let mut trainer = Trainer {
        config,
        model,
        adam,
        lambda1,
        lambda2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best = trainer.model.clone();
    let mut best_per = f64::INFINITY;
    let mut best_epoch = 0;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();
    let n_unpaired_batches = unpaired.len().div_ceil(config.batch_unpaired);
    let n_paired_batches = paired.len().div_ceil(config.batch_paired);
    let k = if n_unpaired_batches >= n_paired_batches {
        interleave_ratio(n_unpaired_batches, n_paired_batches)
    } else {
        interleave_ratio(n_paired_batches, n_unpaired_batches)
    };

    for epoch in 1..=config.epochs {
        let mut u_order = unpaired.clone();
        u_order.shuffle(&mut rng);
        let mut p_order = paired.clone();
        p_order.shuffle(&mut rng);
        let mut p_cursor = 0usize;
        let first_step = steps.len();

        let mut paired_step = |trainer: &mut Trainer<'_, S>, steps: &mut Vec<StepRecord>| -> Result<()> {
            let n = config.batch_paired.min(p_order.len());
            let batch: Vec<&Utterance<S>> =
                (0..n).map(|i| p_order[(p_cursor + i) % p_order.len()]).collect();
            p_cursor = (p_cursor + n) % p_order.len();
            if let Some((loss, grad_norm)) = trainer.step(&batch, true)? {
                steps.push(StepRecord {
                    epoch,
                    kind: StepKind::Paired,
                    loss,
                    grad_norm,
                });
            }
            Ok(())
        };
        let unpaired_step = |trainer: &mut Trainer<'_, S>,
                             steps: &mut Vec<StepRecord>,
                             batch: &[&Utterance<S>]|
         -> Result<()> {
            if let Some((loss, grad_norm)) = trainer.step(batch, false)? {
                steps.push(StepRecord {
                    epoch,
                    kind: StepKind::Unpaired,
                    loss,
                    grad_norm,
                });
            }
            Ok(())
        };

        if u_order.is_empty() {
            for _ in 0..n_paired_batches {
                paired_step(&mut trainer, &mut steps)?;
            }
        } else if n_unpaired_batches >= n_paired_batches {
            let mut since_paired = 0usize;
            for batch in u_order.chunks(config.batch_unpaired) {
                unpaired_step(&mut trainer, &mut steps, batch)?;
                since_paired += 1;
                if !p_order.is_empty() && since_paired >= k {
                    paired_step(&mut trainer, &mut steps)?;
                    since_paired = 0;
                }
            }
        } else {
            let mut u_batches = u_order.chunks(config.batch_unpaired).cycle();
            for i in 1..=n_paired_batches {
                paired_step(&mut trainer, &mut steps)?;
                if i % k == 0 {
                    let batch = u_batches.next().expect("non-empty");
                    unpaired_step(&mut trainer, &mut steps, batch)?;
                }
            }
        }

        let epoch_steps = &steps[first_step..];
        let n = epoch_steps.len().max(1) as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| epoch_steps.iter().map(|s| f(&s.loss)).sum::<f64>() / n;
        let dev_per = if data.dev.iter().any(|u| u.units.is_some()) {
            evaluate_per(&trainer.model, &data.dev)?.per
        } else {
            f64::NAN
        };
        let row = EpochMetrics {
            epoch,
            recon: mean(|l| l.recon),
            ctc: mean(|l| l.ctc),
            tts: mean(|l| l.tts),
            total: mean(|l| l.total),
            dev_per,
        };
        log::info!(
            "{} epoch {epoch}: recon {:.4} ctc {:.4} tts {:.4} total {:.4} dev PER {:.4}",
            variant.name(),
            row.recon,
            row.ctc,
            row.tts,
            row.total,
            row.dev_per
        );
        metrics.push(row);
        // without a dev set the latest epoch wins
        if dev_per.is_nan() || dev_per < best_per {
            best_per = dev_per;
            best_epoch = epoch;
            best = trainer.model.clone();
        }
    }
    Ok(TrainOutcome {
        best,
        last: trainer.model,
        best_epoch,
        metrics,
        steps,
    })
}

/// Encoder, projection and CTC on the paired utterances alone.
pub fn train_baseline_asr<S: Scalar>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    paired: &[Utterance<S>],
    dev: &[Utterance<S>],
) -> Result<TrainOutcome<S>> {
    if model_config.variant != Variant::BaselineAsr {
        return Err(Error::Config(format!(
            "train_baseline_asr called with variant {}",
            model_config.variant.name()
        )));
    }
    let model = Model::new(model_config.clone(), config.seed)?;
    let data = Datasets {
        unpaired: Vec::new(),
        paired: paired.to_vec(),
        dev: dev.to_vec(),
    };
    train(config, model, &data)
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.17e}")
    }
}

pub fn write_metrics<W: Write>(out: W, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "recon", "ctc", "tts", "total", "dev_per"])?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            fmt_metric(m.recon),
            fmt_metric(m.ctc),
            fmt_metric(m.tts),
            fmt_metric(m.total),
            fmt_metric(m.dev_per),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_file(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    write_metrics(std::fs::File::create(path)?, metrics)
}
