//! Desk-scale encoder and attention decoder.

mod decoder;
mod encoder;
mod layers;

pub use decoder::{Decoder, DecoderConfig, DecoderOutput};
pub use encoder::{Encoder, EncoderConfig};
pub use layers::{GruCell, Linear};

use crate::error::Result;
use crate::numerics::{Scalar, Var};
use crate::optim::Bound;

/// Linear head from latent frames to per-unit logits (T×V).
pub fn project_to_units<'t, S: Scalar>(
    p: &Bound<'t, S>,
    projection: &Linear,
    latent: Var<'t, S>,
) -> Result<Var<'t, S>> {
    projection.forward(p, latent)
}
