//! Synthetic phoneme-stream corpora with known units and boundaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, UnitSpan, Utterance};
use crate::ctc::PhonemeSequence;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Non-blank unit inventory size U.
    pub units: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_units: usize,
    pub max_units: usize,
    pub frame_hop_ms: f32,
    /// Seed for the unit prototypes, shared by every split of a corpus.
    pub prototype_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            units: 8,
            feature_dim: 8,
            noise_std: 0.1,
            min_duration: 2,
            max_duration: 4,
            min_units: 3,
            max_units: 7,
            frame_hop_ms: 12.5,
            prototype_seed: 1234,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.units < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 units".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if self.min_duration < 2 || self.max_duration < self.min_duration {
            return Err(Error::Config(format!(
                "duration range [{}, {}] invalid (minimum 2)",
                self.min_duration, self.max_duration
            )));
        }
        if self.min_units == 0 || self.max_units < self.min_units {
            return Err(Error::Config("utterance length range invalid".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.frame_hop_ms > 0.0) {
            return Err(Error::Config("noise and frame hop must be non-negative".into()));
        }
        Ok(())
    }
}

/// U prototypes on the unit sphere, redrawn until every pair is at least
/// `4σ` apart.
pub fn sample_prototypes<S: Scalar>(spec: &SyntheticSpec) -> Result<Tensor<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
    let min_dist = 4.0 * spec.noise_std;
    for _ in 0..10_000 {
        let protos: Vec<Vec<f64>> = (0..spec.units)
            .map(|_| {
                let v: Vec<f64> = (0..spec.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let ok = (0..spec.units).all(|a| {
            (a + 1..spec.units).all(|b| {
                let d: f64 = protos[a]
                    .iter()
                    .zip(&protos[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                d.sqrt() >= min_dist
            })
        });
        if ok {
            return Ok(Tensor::from_fn(spec.units, spec.feature_dim, |u, j| {
                S::lit(f64::from(protos[u][j] as f32))
            }));
        }
    }
    Err(Error::Config(
        "could not place prototypes with the required separation".into(),
    ))
}

pub struct SyntheticCorpus<S> {
    pub prototypes: Tensor<S>,
    pub utterances: Vec<Utterance<S>>,
}

/// Random unit sequences (no immediate repeats) held for a random duration
/// each, with a one-frame linear crossfade into every unit after the first
/// and i.i.d. Gaussian noise. Values are rounded to `f32`.
pub fn generate_corpus<S: Scalar>(
    spec: &SyntheticSpec,
    n_utts: usize,
    seed: u64,
) -> Result<SyntheticCorpus<S>> {
    let prototypes = sample_prototypes::<f64>(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut utterances = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let n_units = rng.random_range(spec.min_units..=spec.max_units);
        let mut ids: Vec<usize> = Vec::with_capacity(n_units);
        for _ in 0..n_units {
            let next = match ids.last() {
                None => rng.random_range(0..spec.units),
                Some(&prev) => {
                    let k = rng.random_range(0..spec.units - 1);
                    if k >= prev {
                        k + 1
                    } else {
                        k
                    }
                }
            };
            ids.push(next);
        }
        let mut spans = Vec::with_capacity(n_units);
        let mut rows: Vec<f64> = Vec::new();
        let mut t = 0;
        for (n, &u) in ids.iter().enumerate() {
            let dur = rng.random_range(spec.min_duration..=spec.max_duration);
            for k in 0..dur {
                for j in 0..spec.feature_dim {
                    let clean = if k == 0 && n > 0 {
                        0.5 * (prototypes.get(ids[n - 1], j) + prototypes.get(u, j))
                    } else {
                        prototypes.get(u, j)
                    };
                    let v = if spec.noise_std > 0.0 {
                        clean + noise.sample(&mut rng)
                    } else {
                        clean
                    };
                    rows.push(f64::from(v as f32));
                }
            }
            spans.push(UnitSpan {
                unit_id: u,
                start: t,
                end: t + dur,
            });
            t += dur;
        }
        let frames = Tensor::new(t, spec.feature_dim, rows.into_iter().map(S::lit).collect())?;
        utterances.push(Utterance {
            features: FeatureSequence::new(format!("s{seed}_{i:05}"), frames, spec.frame_hop_ms)?,
            units: Some(PhonemeSequence(ids)),
            spans,
        });
    }
    Ok(SyntheticCorpus {
        prototypes: prototypes.cast(),
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::argmin;

    #[test]
    fn noiseless_single_unit_is_constant() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            min_units: 1,
            max_units: 1,
            min_duration: 5,
            max_duration: 5,
            ..SyntheticSpec::default()
        };
        let corpus = generate_corpus::<f64>(&spec, 3, 0).unwrap();
        for utt in &corpus.utterances {
            let u = utt.units.as_ref().unwrap().ids()[0];
            assert_eq!(utt.features.len(), 5);
            for row in utt.features.frames.iter_rows() {
                assert_eq!(row, corpus.prototypes.row_slice(u));
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticSpec::default();
        let a = generate_corpus::<f64>(&spec, 10, 42).unwrap();
        let b = generate_corpus::<f64>(&spec, 10, 42).unwrap();
        assert_eq!(a.utterances, b.utterances);
        let c = generate_corpus::<f64>(&spec, 10, 43).unwrap();
        assert_ne!(a.utterances[0].features.frames, c.utterances[0].features.frames);
    }

    #[test]
    fn spans_tile_and_units_never_repeat() {
        let spec = SyntheticSpec::default();
        for utt in generate_corpus::<f64>(&spec, 50, 7).unwrap().utterances {
            let ids = utt.units.as_ref().unwrap().ids().to_vec();
            assert!((spec.min_units..=spec.max_units).contains(&ids.len()));
            assert!(ids.windows(2).all(|w| w[0] != w[1]));
            assert!(ids.iter().all(|&u| u < spec.units));
            assert_eq!(utt.spans[0].start, 0);
            for w in utt.spans.windows(2) {
                assert_eq!(w[0].end, w[1].start);
            }
            assert_eq!(utt.spans.last().unwrap().end, utt.features.len());
        }
    }

    #[test]
    fn prototypes_are_separated_unit_vectors() {
        let spec = SyntheticSpec::default();
        let p = sample_prototypes::<f64>(&spec).unwrap();
        for a in 0..spec.units {
            let n: f64 = p.row_slice(a).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            for b in a + 1..spec.units {
                let d: f64 = p
                    .row_slice(a)
                    .iter()
                    .zip(p.row_slice(b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 4.0 * spec.noise_std);
            }
        }
    }

    #[test]
    fn nearest_prototype_classifier_is_near_perfect() {
        let spec = SyntheticSpec {
            units: 8,
            feature_dim: 8,
            noise_std: 0.1,
            ..SyntheticSpec::default()
        };
        let corpus = generate_corpus::<f64>(&spec, 200, 5).unwrap();
        let (mut correct, mut total) = (0usize, 0usize);
        for utt in &corpus.utterances {
            for span in &utt.spans {
                // skip the crossfade frame at the head of every non-initial span
                let first = if span.start == 0 { 0 } else { span.start + 1 };
                for t in first..span.end {
                    let x = utt.features.frames.row_slice(t);
                    let d: Vec<f64> = corpus
                        .prototypes
                        .iter_rows()
                        .map(|p| p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum())
                        .collect();
                    correct += usize::from(argmin(&d) == span.unit_id);
                    total += 1;
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.99, "frame accuracy {acc}");
    }
}
