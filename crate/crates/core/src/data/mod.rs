//! Feature sequences, synthetic corpora, and the on-disk formats.

mod features;
mod manifest;
mod synth;

pub use features::{decode_features, encode_features, read_features, write_features};
pub use manifest::{
    load_corpus, read_boundaries, read_manifest, read_transcripts, write_boundaries, write_corpus,
    write_manifest, write_transcripts, Manifest, ManifestRecord,
};
pub use synth::{generate_corpus, sample_prototypes, SyntheticCorpus, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::PhonemeSequence;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// T×F frames with hop metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<S> {
    pub frames: Tensor<S>,
    pub frame_hop_ms: f32,
    pub utterance_id: String,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(utterance_id: impl Into<String>, frames: Tensor<S>, frame_hop_ms: f32) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Data("feature sequence needs T ≥ 1 and F ≥ 1".into()));
        }
        if !frames.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            frames,
            frame_hop_ms,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.frames.cols()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 * f64::from(self.frame_hop_ms) / 1000.0
    }
}

/// Ground-truth unit occupying frames `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitSpan {
    pub unit_id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance<S> {
    pub features: FeatureSequence<S>,
    /// Transcription; `None` for unpaired speech.
    pub units: Option<PhonemeSequence>,
    /// Ground-truth segmentation when known.
    pub spans: Vec<UnitSpan>,
}

impl<S: Scalar> Utterance<S> {
    pub fn id(&self) -> &str {
        &self.features.utterance_id
    }

    /// Interior ground-truth boundaries (start frames of every span but the first).
    pub fn boundaries(&self) -> Vec<usize> {
        self.spans.iter().skip(1).map(|s| s.start).collect()
    }

    /// Ground-truth unit for each frame, if spans are known.
    pub fn frame_labels(&self) -> Option<Vec<usize>> {
        if self.spans.is_empty() {
            return None;
        }
        let mut labels = vec![0; self.features.len()];
        for span in &self.spans {
            labels[span.start..span.end].fill(span.unit_id);
        }
        Some(labels)
    }
}

/// How much transcribed data to keep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairedBudget {
    /// Cumulative duration in minutes (T × frame hop).
    Minutes(f64),
    /// A fixed number of utterances.
    Utterances(usize),
}

/// Randomly chooses paired utterances until the budget is first reached;
/// the remainder lose their transcriptions.
pub fn split_paired<S: Scalar>(
    corpus: &[Utterance<S>],
    budget: PairedBudget,
    seed: u64,
) -> Result<(Vec<Utterance<S>>, Vec<Utterance<S>>)> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = match budget {
        PairedBudget::Utterances(n) => {
            if n > corpus.len() {
                return Err(Error::Config(format!(
                    "{n} paired utterances requested from a corpus of {}",
                    corpus.len()
                )));
            }
            n
        }
        PairedBudget::Minutes(minutes) => {
            if !(minutes >= 0.0) {
                return Err(Error::Config("paired budget must be non-negative".into()));
            }
            let budget_s = minutes * 60.0;
            let total: f64 = order.iter().map(|&i| corpus[i].features.duration_seconds()).sum();
            let slack = 1e-9 * total.max(1.0);
            if budget_s > total + slack {
                return Err(Error::Config(format!(
                    "paired budget {minutes} min exceeds corpus duration {:.3} min",
                    total / 60.0
                )));
            }
            let mut acc = 0.0;
            let mut n = 0;
            while acc < budget_s - slack && n < order.len() {
                acc += corpus[order[n]].features.duration_seconds();
                n += 1;
            }
            n
        }
    };
    let mut paired_flags = vec![false; corpus.len()];
    for &i in &order[..take] {
        paired_flags[i] = true;
    }
    let mut paired = Vec::new();
    let mut unpaired = Vec::new();
    for &i in &order {
        let mut utt = corpus[i].clone();
        if paired_flags[i] {
            if utt.units.as_ref().is_none_or(PhonemeSequence::is_empty) {
                return Err(Error::Data(format!(
                    "utterance {} chosen as paired has no transcription",
                    utt.id()
                )));
            }
            paired.push(utt);
        } else {
            utt.units = None;
            unpaired.push(utt);
        }
    }
    Ok((paired, unpaired))
}
