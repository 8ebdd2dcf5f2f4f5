//! Codeword table, nearest-neighbour quantization with the straight-through
//! estimator, and distance-based unit posteriors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{argmin, Scalar, Tensor, Var};

/// V×D embedding table with one entry reserved as the CTC blank.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    pub entries: Tensor<S>,
    pub blank_index: usize,
    pub unit_names: Option<Vec<String>>,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(entries: Tensor<S>, blank_index: usize) -> Result<Self> {
        if entries.rows() < 2 {
            return Err(Error::Config(format!(
                "codebook needs at least 2 entries, got {}",
                entries.rows()
            )));
        }
        if blank_index >= entries.rows() {
            return Err(Error::Config(format!(
                "blank index {blank_index} outside codebook of size {}",
                entries.rows()
            )));
        }
        if !entries.is_finite() {
            return Err(Error::Numeric { op: "codebook" });
        }
        Ok(Self {
            entries,
            blank_index,
            unit_names: None,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }
}

/// Random table: entries i.i.d. uniform in [-0.5, 0.5] scaled by `1/sqrt(D)`.
pub fn init_codebook<S: Scalar>(
    size: usize,
    dim: usize,
    blank_index: usize,
    seed: u64,
) -> Result<Codebook<S>> {
    if size < 2 {
        return Err(Error::Config(format!(
            "codebook needs at least 2 entries, got {size}"
        )));
    }
    if dim == 0 {
        return Err(Error::Config("codebook dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let entries = Tensor::from_fn(size, dim, |_, _| {
        S::lit((rng.random::<f64>() - 0.5) * scale)
    });
    Codebook::new(entries, blank_index)
}

/// Per-frame codeword choice plus straight-through vectors.
#[derive(Clone, Debug)]
pub struct QuantizedFrameSequence<'t, S: Scalar> {
    pub indices: Vec<usize>,
    /// T×D; forward value is exactly the selected codewords.
    pub st_vectors: Var<'t, S>,
}

/// Replaces each row of `latent` by its Euclidean-nearest codeword.
///
/// Gradients flow to both the latent rows and the chosen entries.
/// Ties go to the lowest index.
pub fn quantize<'t, S: Scalar>(
    latent: Var<'t, S>,
    entries: Var<'t, S>,
) -> Result<QuantizedFrameSequence<'t, S>> {
    if latent.cols() != entries.cols() {
        return Err(Error::dim(
            "quantize",
            format!(
                "latent width {} vs codebook dimension {}",
                latent.cols(),
                entries.cols()
            ),
        ));
    }
    if latent.rows() == 0 {
        return Err(Error::dim("quantize", "empty latent sequence"));
    }
    let indices = nearest_indices(&latent.value(), &entries.value());
    let selected = entries.gather_rows(&indices)?;
    let st_vectors = latent.straight_through(selected)?;
    Ok(QuantizedFrameSequence {
        indices,
        st_vectors,
    })
}

/// Nearest codeword per row by squared distance, lowest index on ties.
pub fn nearest_indices<S: Scalar>(latent: &Tensor<S>, entries: &Tensor<S>) -> Vec<usize> {
    latent
        .iter_rows()
        .map(|h| {
            let d: Vec<S> = entries
                .iter_rows()
                .map(|e| h.iter().zip(e).map(|(&a, &b)| (a - b) * (a - b)).sum())
                .collect();
            argmin(&d)
        })
        .collect()
}

/// Euclidean (not squared) distance from every latent row to every entry.
pub fn distances<'t, S: Scalar>(latent: Var<'t, S>, entries: Var<'t, S>) -> Result<Var<'t, S>> {
    latent.pairwise_sq_dist(entries)?.sqrt()
}

/// T×V matrix with row t = softmax_k(-‖h_t − e_k‖).
pub fn frame_posteriors<'t, S: Scalar>(
    latent: Var<'t, S>,
    entries: Var<'t, S>,
) -> Result<Var<'t, S>> {
    distances(latent, entries)?.neg()?.softmax()
}

/// Log of [`frame_posteriors`], computed stably.
pub fn frame_log_posteriors<'t, S: Scalar>(
    latent: Var<'t, S>,
    entries: Var<'t, S>,
) -> Result<Var<'t, S>> {
    distances(latent, entries)?.neg()?.log_softmax()
}
