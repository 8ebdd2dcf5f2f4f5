use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{glorot, GruCell, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, Var};
use crate::optim::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub conv_channels: usize,
    pub kernel_width: usize,
    /// One entry per conv layer.
    pub strides: Vec<usize>,
    pub rnn_layers: usize,
    pub hidden: usize,
    pub latent_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            conv_channels: 32,
            kernel_width: 3,
            strides: vec![1, 2],
            rnn_layers: 1,
            hidden: 32,
            latent_dim: 8,
        }
    }
}

impl EncoderConfig {
    pub fn downsampling(&self) -> usize {
        self.strides.iter().product()
    }

    /// Encoder frames produced for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        self.strides
            .iter()
            .fold(frames, |t, &s| if t == 0 { 0 } else { (t - 1) / s + 1 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_width % 2 == 0 {
            return Err(Error::Config("kernel width must be odd".into()));
        }
        if self.strides.contains(&0) || self.rnn_layers == 0 {
            return Err(Error::Config("strides and rnn layers must be positive".into()));
        }
        if [self.input_dim, self.conv_channels, self.hidden, self.latent_dim].contains(&0) {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Conv stack (ReLU) → GRU stack → linear projection to the latent space.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    conv: Vec<ConvLayer>,
    rnn: Vec<GruCell>,
    output: Linear,
}

impl Encoder {
    pub fn new<S: Scalar, R: Rng>(
        config: EncoderConfig,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut conv = Vec::new();
        let mut width = config.input_dim;
        for (i, &stride) in config.strides.iter().enumerate() {
            let fan_in = config.kernel_width * width;
            conv.push(ConvLayer {
                weight: store.add(
                    format!("encoder.conv{i}.weight"),
                    glorot(fan_in, config.conv_channels, rng),
                ),
                bias: store.add(
                    format!("encoder.conv{i}.bias"),
                    Tensor::zeros(1, config.conv_channels),
                ),
                stride,
            });
            width = config.conv_channels;
        }
        let mut rnn = Vec::new();
        for i in 0..config.rnn_layers {
            rnn.push(GruCell::new(store, &format!("encoder.rnn{i}"), width, config.hidden, rng));
            width = config.hidden;
        }
        let output = Linear::new(store, "encoder.out", width, config.latent_dim, rng);
        Ok(Self {
            config,
            conv,
            rnn,
            output,
        })
    }

    /// Frame-synchronized latent sequence H (T×D) for a T_in×F input.
    pub fn encode<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        if x.cols() != self.config.input_dim {
            return Err(Error::dim(
                "encode",
                format!(
                    "feature width {} but encoder expects {}",
                    x.cols(),
                    self.config.input_dim
                ),
            ));
        }
        let mut h = x;
        for layer in &self.conv {
            h = h
                .conv1d(
                    p.var(layer.weight),
                    p.var(layer.bias),
                    self.config.kernel_width,
                    layer.stride,
                )?
                .relu()?;
        }
        for cell in &self.rnn {
            h = cell.run(p, h)?;
        }
        self.output.forward(p, h)
    }
}
