//! Manifest and ground-truth boundary CSV files.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_features, write_features, UnitSpan, Utterance};
use crate::ctc::PhonemeSequence;
use crate::error::{Error, Result};
use crate::numerics::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub utterance_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    /// `None` for unpaired utterances.
    pub units: Option<PhonemeSequence>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    utterance_id: String,
    path: String,
    units: String,
}

#[derive(Serialize, Deserialize)]
struct TranscriptRow {
    utterance_id: String,
    units: String,
}

#[derive(Serialize, Deserialize)]
struct BoundaryRow {
    utterance_id: String,
    unit_id: usize,
    start_frame: usize,
    end_frame: usize,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(Error::Data(format!("duplicate utterance id {}", r.utterance_id)));
            }
            if matches!(&r.units, Some(u) if u.is_empty()) {
                return Err(Error::Data(format!(
                    "paired record {} has an empty target",
                    r.utterance_id
                )));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        let units = if row.units.trim().is_empty() {
            None
        } else {
            Some(PhonemeSequence::parse_field(&row.units)?)
        };
        records.push(ManifestRecord {
            utterance_id: row.utterance_id,
            path: PathBuf::from(row.path),
            units,
        });
    }
    let manifest = Manifest { records };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    manifest.validate()?;
    let mut writer = csv::Writer::from_path(path)?;
    for r in &manifest.records {
        writer.serialize(ManifestRow {
            utterance_id: r.utterance_id.clone(),
            path: r.path.to_string_lossy().into_owned(),
            units: r.units.as_ref().map(PhonemeSequence::to_field).unwrap_or_default(),
        })?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes `utterance_id,units` rows, e.g. recognition hypotheses.
pub fn write_transcripts<W: std::io::Write>(
    writer: W,
    rows: &[(String, PhonemeSequence)],
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(writer);
    for (id, units) in rows {
        writer.serialize(TranscriptRow {
            utterance_id: id.clone(),
            units: units.to_field(),
        })?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads `utterance_id` and `units` columns from any CSV that has them
/// (hypothesis files and manifests alike). Empty unit fields become `None`.
pub fn read_transcripts(path: &Path) -> Result<Vec<(String, Option<PhonemeSequence>)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: TranscriptRow = row?;
        if !seen.insert(row.utterance_id.clone()) {
            return Err(Error::Data(format!("duplicate utterance id {}", row.utterance_id)));
        }
        let units = if row.units.trim().is_empty() {
            None
        } else {
            Some(PhonemeSequence::parse_field(&row.units)?)
        };
        out.push((row.utterance_id, units));
    }
    Ok(out)
}

pub fn write_boundaries<S: Scalar>(path: &Path, utterances: &[Utterance<S>]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for utt in utterances {
        for span in &utt.spans {
            writer.serialize(BoundaryRow {
                utterance_id: utt.id().to_string(),
                unit_id: span.unit_id,
                start_frame: span.start,
                end_frame: span.end,
            })?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Spans per utterance id, in file order.
pub fn read_boundaries(path: &Path) -> Result<Vec<(String, Vec<UnitSpan>)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out: Vec<(String, Vec<UnitSpan>)> = Vec::new();
    for row in reader.deserialize() {
        let row: BoundaryRow = row?;
        if row.end_frame <= row.start_frame {
            return Err(Error::Data(format!(
                "empty span for {} at frame {}",
                row.utterance_id, row.start_frame
            )));
        }
        let span = UnitSpan {
            unit_id: row.unit_id,
            start: row.start_frame,
            end: row.end_frame,
        };
        match out.last_mut() {
            Some((id, spans)) if *id == row.utterance_id => spans.push(span),
            _ => out.push((row.utterance_id, vec![span])),
        }
    }
    Ok(out)
}

/// Writes `feats/<id>.srqf` files plus `manifest_name` (and `boundaries.csv`
/// when spans are known) into `dir`.
pub fn write_corpus<S: Scalar>(
    dir: &Path,
    manifest_name: &str,
    utterances: &[Utterance<S>],
) -> Result<Manifest> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats)?;
    let mut records = Vec::with_capacity(utterances.len());
    for utt in utterances {
        let rel = PathBuf::from("feats").join(format!("{}.srqf", utt.id()));
        write_features(&dir.join(&rel), &utt.features)?;
        records.push(ManifestRecord {
            utterance_id: utt.id().to_string(),
            path: rel,
            units: utt.units.clone(),
        });
    }
    let manifest = Manifest { records };
    write_manifest(&dir.join(manifest_name), &manifest)?;
    Ok(manifest)
}

/// Reads every utterance listed in a manifest.
pub fn load_corpus<S: Scalar>(manifest_path: &Path) -> Result<Vec<Utterance<S>>> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .records
        .into_iter()
        .map(|r| {
            let features = read_features(&base.join(&r.path), &r.utterance_id)?;
            Ok(Utterance {
                features,
                units: r.units,
                spans: Vec::new(),
            })
        })
        .collect()
}
