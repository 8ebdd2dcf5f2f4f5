use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{glorot, GruCell, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, Var};
use crate::optim::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub frame_dim: usize,
    pub memory_dim: usize,
    pub hidden: usize,
    /// Frames emitted per decoder step.
    pub reduction: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            frame_dim: 8,
            memory_dim: 8,
            hidden: 32,
            reduction: 2,
        }
    }
}

/// Autoregressive GRU decoder with dot-product attention over the
/// segment memory, a frame head and a stop head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    cell: GruCell,
    query: ParamId,
    frames: Linear,
    stop: Linear,
}

pub struct DecoderOutput<'t, S: Scalar> {
    /// (steps·r)×F predicted frames.
    pub frames: Var<'t, S>,
    /// steps×1 stop logits.
    pub stop_logits: Var<'t, S>,
    /// steps×S attention weights (zero columns when the memory is empty).
    pub alignment: Tensor<S>,
    pub steps: usize,
}

impl<'t, S: Scalar> DecoderOutput<'t, S> {
    /// Frame MSE against `target` plus stop BCE (1 on the last step only).
    pub fn reconstruction_loss(&self, target: Var<'t, S>) -> Result<Var<'t, S>> {
        let predicted = self.frames.slice_rows(0, target.rows())?;
        let mse = predicted.mse(target)?;
        let stop_targets = Tensor::from_fn(self.steps, 1, |i, _| {
            if i + 1 == self.steps {
                S::one()
            } else {
                S::zero()
            }
        });
        mse.add(self.stop_logits.bce_with_logits(&stop_targets)?)
    }
}

struct StepOutput<'t, S: Scalar> {
    frames: Var<'t, S>,
    stop: Var<'t, S>,
    context: Var<'t, S>,
    hidden: Var<'t, S>,
    attention: Vec<S>,
}

impl Decoder {
    pub fn new<S: Scalar, R: Rng>(
        config: DecoderConfig,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        if [config.frame_dim, config.memory_dim, config.hidden, config.reduction].contains(&0) {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        let (f, d, h, r) = (
            config.frame_dim,
            config.memory_dim,
            config.hidden,
            config.reduction,
        );
        let cell = GruCell::new(store, "decoder.rnn", f + d, h, rng);
        let query = store.add("decoder.query", glorot(h, d, rng));
        let frames = Linear::new(store, "decoder.frames", h + d, r * f, rng);
        let stop = Linear::new(store, "decoder.stop", h + d, 1, rng);
        Ok(Self {
            config,
            cell,
            query,
            frames,
            stop,
        })
    }

    fn check_memory<S: Scalar>(&self, memory: Option<Var<'_, S>>) -> Result<()> {
        match memory {
            Some(m) if m.cols() != self.config.memory_dim => Err(Error::dim(
                "decode",
                format!(
                    "memory width {} but decoder expects {}",
                    m.cols(),
                    self.config.memory_dim
                ),
            )),
            _ => Ok(()),
        }
    }

    fn step<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        memory: Option<(Var<'t, S>, Var<'t, S>)>,
        prev_frame: Var<'t, S>,
        prev_context: Var<'t, S>,
        hidden: Var<'t, S>,
    ) -> Result<StepOutput<'t, S>> {
        let tape = prev_frame.tape();
        let input = tape.concat_cols(&[prev_frame, prev_context])?;
        let x_proj = self.cell.project_input(p, input)?;
        let hidden = self.cell.step(p, x_proj, hidden)?;
        let (context, attention) = match memory {
            Some((mem, mem_t)) => {
                let scale = S::lit(1.0 / (self.config.memory_dim as f64).sqrt());
                let query = hidden.matmul(p.var(self.query))?;
                let weights = query.matmul(mem_t)?.scale(scale)?.softmax()?;
                let attention = weights.value().into_data();
                (weights.matmul(mem)?, attention)
            }
            None => (
                tape.constant(Tensor::zeros(1, self.config.memory_dim)),
                Vec::new(),
            ),
        };
        let features = tape.concat_cols(&[hidden, context])?;
        let frames = self
            .frames
            .forward(p, features)?
            .reshape(self.config.reduction, self.config.frame_dim)?;
        let stop = self.stop.forward(p, features)?;
        Ok(StepOutput {
            frames,
            stop,
            context,
            hidden,
            attention,
        })
    }

    fn run<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        memory: Option<Var<'t, S>>,
        max_steps: usize,
        teacher: Option<&Tensor<S>>,
        tape: &'t crate::numerics::Tape<S>,
    ) -> Result<DecoderOutput<'t, S>> {
        self.check_memory(memory)?;
        let memory = match memory {
            Some(m) => Some((m, m.transpose()?)),
            None => None,
        };
        let slots = memory.map_or(0, |(m, _)| m.rows());
        let (f, r) = (self.config.frame_dim, self.config.reduction);
        let mut prev_frame = tape.constant(Tensor::zeros(1, f));
        let mut context = tape.constant(Tensor::zeros(1, self.config.memory_dim));
        let mut hidden = tape.constant(Tensor::zeros(1, self.config.hidden));
        let mut frames = Vec::new();
        let mut stops = Vec::new();
        let mut alignment = Vec::new();
        for i in 0..max_steps {
            let out = self.step(p, memory, prev_frame, context, hidden)?;
            frames.push(out.frames);
            stops.push(out.stop);
            alignment.extend(out.attention);
            context = out.context;
            hidden = out.hidden;
            match teacher {
                Some(target) => {
                    let t = ((i + 1) * r - 1).min(target.rows() - 1);
                    prev_frame = tape.constant(Tensor::row(target.row_slice(t).to_vec()));
                }
                None => {
                    if out.stop.item() > S::zero() {
                        // sigmoid(logit) > 0.5
                        break;
                    }
                    prev_frame = out.frames.slice_rows(r - 1, 1)?;
                }
            }
        }
        let steps = frames.len();
        Ok(DecoderOutput {
            frames: tape.concat_rows(&frames)?,
            stop_logits: tape.concat_rows(&stops)?,
            alignment: Tensor::new(steps, slots, alignment)?,
            steps,
        })
    }

    /// Emits `ceil(T/r)·r` frames, feeding ground-truth frames back in.
    pub fn decode_teacher_forced<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        memory: Option<Var<'t, S>>,
        target: Var<'t, S>,
    ) -> Result<DecoderOutput<'t, S>> {
        let target_value = target.value();
        if target_value.rows() == 0 {
            return Err(Error::dim("decode", "empty target"));
        }
        if target_value.cols() != self.config.frame_dim {
            return Err(Error::dim(
                "decode",
                format!("target width {}", target_value.cols()),
            ));
        }
        let steps = target_value.rows().div_ceil(self.config.reduction);
        self.run(p, memory, steps, Some(&target_value), target.tape())
    }

    /// Feeds its own output back in until the stop probability exceeds 0.5
    /// or `max_steps` is reached.
    pub fn decode_free_running<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        memory: Option<Var<'t, S>>,
        max_steps: usize,
        tape: &'t crate::numerics::Tape<S>,
    ) -> Result<DecoderOutput<'t, S>> {
        if max_steps == 0 {
            return Err(Error::Usage("max_steps must be at least 1".into()));
        }
        self.run(p, memory, max_steps, None, tape)
    }

    pub fn stop_bias(&self) -> ParamId {
        self.stop.bias
    }
}
