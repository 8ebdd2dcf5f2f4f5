use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{frame_log_posteriors, init_codebook, quantize, Codebook};
use crate::ctc::{beam_decode, ctc_log_likelihood, greedy_decode, PhonemeSequence};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::optim::{Bound, ParamId, ParamStore};
use crate::segmentation::{segment, segment_soft, Run, SegmentedSequence};
use crate::seqmodel::{project_to_units, Decoder, DecoderConfig, Encoder, EncoderConfig, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Codebook quantization, segmentation and reconstruction.
    #[serde(rename = "seqrq")]
    SeqRq,
    /// Projection head with pseudo one-hot segmentation instead of a codebook.
    NoCodebook,
    /// Projection head trained with CTC on paired data only.
    BaselineAsr,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SeqRq => "seqrq",
            Variant::NoCodebook => "no_codebook",
            Variant::BaselineAsr => "baseline_asr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seqrq" => Ok(Variant::SeqRq),
            "no_codebook" => Ok(Variant::NoCodebook),
            "baseline_asr" => Ok(Variant::BaselineAsr),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected seqrq, no_codebook or baseline_asr)"
            ))),
        }
    }

    /// Whether a decoder is trained to reconstruct the input.
    pub fn reconstructs(self) -> bool {
        self != Variant::BaselineAsr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Non-blank units U; the blank takes index U, so V = U + 1.
    pub units: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Default architecture for `units` units and `feature_dim`-wide frames.
    pub fn new(variant: Variant, units: usize, feature_dim: usize) -> Self {
        let encoder = EncoderConfig {
            input_dim: feature_dim,
            ..EncoderConfig::default()
        };
        let memory_dim = match variant {
            Variant::NoCodebook => units + 1,
            _ => encoder.latent_dim,
        };
        let decoder = DecoderConfig {
            frame_dim: feature_dim,
            memory_dim,
            ..DecoderConfig::default()
        };
        Self {
            variant,
            units,
            encoder,
            decoder,
        }
    }

    pub fn vocab(&self) -> usize {
        self.units + 1
    }

    pub fn blank_index(&self) -> usize {
        self.units
    }

    /// Scalar parameters [`Model::new`] allocates, `None` on overflow.
    pub fn parameter_count(&self) -> Option<usize> {
        let linear = |i: usize, o: usize| i.checked_mul(o)?.checked_add(o);
        let gru = |i: usize, h: usize| {
            let h3 = h.checked_mul(3)?;
            i.checked_add(h)?.checked_mul(h3)?.checked_add(h3)
        };
        let e = &self.encoder;
        let mut total = 0usize;
        let mut width = e.input_dim;
        for _ in &e.strides {
            let weight = e.kernel_width.checked_mul(width)?;
            total = total.checked_add(linear(weight, e.conv_channels)?)?;
            width = e.conv_channels;
        }
        for _ in 0..e.rnn_layers {
            total = total.checked_add(gru(width, e.hidden)?)?;
            width = e.hidden;
        }
        total = total.checked_add(linear(width, e.latent_dim)?)?;
        total = total.checked_add(match self.variant {
            Variant::SeqRq => self.vocab().checked_mul(e.latent_dim)?,
            _ => linear(e.latent_dim, self.vocab())?,
        })?;
        if self.variant.reconstructs() {
            let d = &self.decoder;
            let features = d.hidden.checked_add(d.memory_dim)?;
            total = total
                .checked_add(gru(d.frame_dim.checked_add(d.memory_dim)?, d.hidden)?)?
                .checked_add(d.hidden.checked_mul(d.memory_dim)?)?
                .checked_add(linear(features, d.reduction.checked_mul(d.frame_dim)?)?)?
                .checked_add(linear(features, 1)?)?;
        }
        Some(total)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units < 1 {
            return Err(Error::Config("need at least one non-blank unit".into()));
        }
        self.encoder.validate()?;
        if self.variant.reconstructs() {
            if self.decoder.frame_dim != self.encoder.input_dim {
                return Err(Error::Config(format!(
                    "decoder frame width {} differs from encoder input width {}",
                    self.decoder.frame_dim, self.encoder.input_dim
                )));
            }
            let expected = match self.variant {
                Variant::NoCodebook => self.vocab(),
                _ => self.encoder.latent_dim,
            };
            if self.decoder.memory_dim != expected {
                return Err(Error::Config(format!(
                    "decoder memory width {} must be {expected} for {}",
                    self.decoder.memory_dim,
                    self.variant.name()
                )));
            }
        }
        Ok(())
    }
}

/// Encoder plus the variant-specific heads, with all parameters in one store.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    encoder: Encoder,
    decoder: Option<Decoder>,
    codebook: Option<ParamId>,
    projection: Option<Linear>,
}

/// Differentiable terms of one utterance's objective.
pub struct UtteranceLoss<'t, S: Scalar> {
    pub recon: Option<Var<'t, S>>,
    /// Negative CTC log-likelihood.
    pub ctc: Option<Var<'t, S>>,
    pub tts: Option<Var<'t, S>>,
    pub total: Var<'t, S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let (codebook, projection) = match config.variant {
            Variant::SeqRq => {
                let cb = init_codebook::<S>(
                    config.vocab(),
                    config.encoder.latent_dim,
                    config.blank_index(),
                    rng.random(),
                )?;
                (Some(store.add("codebook", cb.entries)), None)
            }
            _ => {
                let proj = Linear::new(
                    &mut store,
                    "projection",
                    config.encoder.latent_dim,
                    config.vocab(),
                    &mut rng,
                );
                (None, Some(proj))
            }
        };
        let decoder = if config.variant.reconstructs() {
            Some(Decoder::new(config.decoder.clone(), &mut store, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            codebook,
            projection,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn blank_index(&self) -> usize {
        self.config.blank_index()
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        self.decoder.as_ref()
    }

    pub fn codebook_param(&self) -> Option<ParamId> {
        self.codebook
    }

    /// Current codebook table (seqrq only).
    pub fn codebook(&self) -> Option<Codebook<S>> {
        self.codebook
            .map(|id| Codebook::new(self.store.get(id).clone(), self.blank_index()))
            .transpose()
            .ok()
            .flatten()
    }

    pub fn encode<'t>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        self.encoder.encode(p, x)
    }

    /// T×V unit log posteriors for CTC.
    pub fn log_posteriors<'t>(&self, p: &Bound<'t, S>, latent: Var<'t, S>) -> Result<Var<'t, S>> {
        match (self.codebook, &self.projection) {
            (Some(cb), _) => frame_log_posteriors(latent, p.var(cb)),
            (None, Some(proj)) => project_to_units(p, proj, latent)?.log_softmax(),
            (None, None) => unreachable!("every variant has a codebook or a projection"),
        }
    }

    /// Quantized (or pseudo one-hot) segmentation of the latent sequence.
    pub fn segment<'t>(
        &self,
        p: &Bound<'t, S>,
        latent: Var<'t, S>,
    ) -> Result<SegmentedSequence<'t, S>> {
        let blank = self.blank_index();
        match (self.config.variant, self.codebook, &self.projection) {
            (Variant::SeqRq, Some(cb), _) => segment(&quantize(latent, p.var(cb))?, blank),
            (Variant::NoCodebook, _, Some(proj)) => {
                segment_soft(project_to_units(p, proj, latent)?.softmax()?, blank)
            }
            _ => Err(Error::Usage(format!(
                "{} has no segmentation path",
                self.config.variant.name()
            ))),
        }
    }

    /// Memory built from a ground-truth unit sequence: codewords for seqrq,
    /// one-hot rows for the projection variant.
    pub fn target_memory<'t>(
        &self,
        p: &Bound<'t, S>,
        units: &PhonemeSequence,
        tape: &'t Tape<S>,
    ) -> Result<Var<'t, S>> {
        match self.codebook {
            Some(cb) => p.var(cb).gather_rows(units.ids()),
            None => Ok(tape.constant(Tensor::from_fn(units.len(), self.config.vocab(), |s, k| {
                if units.ids()[s] == k {
                    S::one()
                } else {
                    S::zero()
                }
            }))),
        }
    }

    /// Builds the weighted objective for one utterance on `tape`.
    ///
    /// For the reconstructing variants this is `recon + λ1·ctc + λ2·tts`,
    /// with the latter two present only when `units` is given. For the
    /// baseline it is `λ1·ctc`. Infeasible targets surface as
    /// [`Error::InfeasibleTarget`] before anything is recorded.
    pub fn utterance_loss<'t>(
        &self,
        tape: &'t Tape<S>,
        p: &Bound<'t, S>,
        frames: &Tensor<S>,
        units: Option<&PhonemeSequence>,
        lambda1: S,
        lambda2: S,
    ) -> Result<UtteranceLoss<'t, S>> {
        let blank = self.blank_index();
        if let Some(target) = units {
            let available = self.config.encoder.output_len(frames.rows());
            if available < target.min_frames() {
                return Err(Error::InfeasibleTarget {
                    labels: target.len(),
                    repeats: target.adjacent_repeats(),
                    needed: target.min_frames(),
                    frames: available,
                });
            }
        } else if !self.config.variant.reconstructs() {
            return Err(Error::Usage("baseline ASR trains on paired data only".into()));
        }
        let x = tape.constant(frames.clone());
        let latent = self.encode(p, x)?;

        let ctc = match units {
            Some(target) => {
                let logp = self.log_posteriors(p, latent)?;
                Some(ctc_log_likelihood(logp, target, blank)?.log_likelihood.neg()?)
            }
            None => None,
        };

        let (recon, tts) = match &self.decoder {
            Some(decoder) => {
                let memory = self.segment(p, latent)?.memory()?;
                let recon = decoder
                    .decode_teacher_forced(p, memory, x)?
                    .reconstruction_loss(x)?;
                let tts = match units {
                    Some(target) => {
                        let memory = self.target_memory(p, target, tape)?;
                        Some(
                            decoder
                                .decode_teacher_forced(p, Some(memory), x)?
                                .reconstruction_loss(x)?,
                        )
                    }
                    None => None,
                };
                (Some(recon), tts)
            }
            None => (None, None),
        };

        let total = match (recon, ctc, tts) {
            (Some(r), c, t) => {
                let mut total = r;
                if let Some(c) = c {
                    total = total.add(c.scale(lambda1)?)?;
                }
                if let Some(t) = t {
                    total = total.add(t.scale(lambda2)?)?;
                }
                total
            }
            (None, Some(c), _) => c.scale(lambda1)?,
            (None, None, _) => unreachable!("baseline without target rejected above"),
        };
        Ok(UtteranceLoss {
            recon,
            ctc,
            tts,
            total,
        })
    }

    /// Unit log posteriors for one utterance, without gradients.
    pub fn infer_log_posteriors(&self, frames: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let latent = self.encode(&p, tape.constant(frames.clone()))?;
        Ok(self.log_posteriors(&p, latent)?.value())
    }

    pub fn infer_latent(&self, frames: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        Ok(self.encode(&p, tape.constant(frames.clone()))?.value())
    }

    pub fn greedy_recognize(&self, frames: &Tensor<S>) -> Result<PhonemeSequence> {
        Ok(greedy_decode(&self.infer_log_posteriors(frames)?, self.blank_index()))
    }

    pub fn beam_recognize(&self, frames: &Tensor<S>, beam_width: usize) -> Result<PhonemeSequence> {
        beam_decode(&self.infer_log_posteriors(frames)?, self.blank_index(), beam_width)
    }

    /// Encoder-frame tiling before blank removal. For the baseline the
    /// runs come from the per-frame argmax of the unit posteriors.
    pub fn frame_runs(&self, frames: &Tensor<S>) -> Result<Vec<Run>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let latent = self.encode(&p, tape.constant(frames.clone()))?;
        match self.config.variant {
            Variant::BaselineAsr => {
                let logp = self.log_posteriors(&p, latent)?.value();
                let ids: Vec<usize> = logp.iter_rows().map(crate::numerics::argmax).collect();
                Ok(crate::segmentation::runs(&ids))
            }
            _ => Ok(self.segment(&p, latent)?.tiling),
        }
    }

    /// Free-running resynthesis from the model's own segmentation.
    /// Returns the generated frames and the steps×S attention matrix.
    pub fn resynthesize(&self, frames: &Tensor<S>, max_steps: usize) -> Result<(Tensor<S>, Tensor<S>)> {
        let decoder = self.decoder.as_ref().ok_or_else(|| {
            Error::Usage(format!("{} has no decoder", self.config.variant.name()))
        })?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let latent = self.encode(&p, tape.constant(frames.clone()))?;
        let memory = self.segment(&p, latent)?.memory()?;
        let out = decoder.decode_free_running(&p, memory, max_steps, &tape)?;
        Ok((out.frames.value(), out.alignment))
    }

    /// Teacher-forced reconstruction trimmed to the input length.
    pub fn reconstruct(&self, frames: &Tensor<S>) -> Result<Tensor<S>> {
        let decoder = self.decoder.as_ref().ok_or_else(|| {
            Error::Usage(format!("{} has no decoder", self.config.variant.name()))
        })?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let x = tape.constant(frames.clone());
        let latent = self.encode(&p, x)?;
        let memory = self.segment(&p, latent)?.memory()?;
        let out = decoder.decode_teacher_forced(&p, memory, x)?;
        Ok(out.frames.slice_rows(0, frames.rows())?.value())
    }
}
