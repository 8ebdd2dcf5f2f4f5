//! Temporal segmentation: runs of identical codeword indices collapse into
//! one averaged vector per run; blank runs are dropped.

use crate::codebook::QuantizedFrameSequence;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Scalar, Tensor, Var};

/// Maximal run of one index in a frame sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Run {
    pub unit_id: usize,
    pub start: usize,
    pub length: usize,
}

impl Run {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// Splits `indices` at every change of value.
pub fn runs(indices: &[usize]) -> Vec<Run> {
    let mut out: Vec<Run> = Vec::new();
    for (t, &id) in indices.iter().enumerate() {
        match out.last_mut() {
            Some(run) if run.unit_id == id => run.length += 1,
            _ => out.push(Run {
                unit_id: id,
                start: t,
                length: 1,
            }),
        }
    }
    out
}

/// Inverse of [`runs`].
pub fn expand(runs: &[Run]) -> Vec<usize> {
    runs.iter()
        .flat_map(|r| std::iter::repeat_n(r.unit_id, r.length))
        .collect()
}

/// Interior boundaries (frame indices where a new run starts, excluding 0).
pub fn boundaries(runs: &[Run]) -> Vec<usize> {
    runs.iter().skip(1).map(|r| r.start).collect()
}

#[derive(Clone, Debug)]
pub struct Segment<'t, S: Scalar> {
    pub unit_id: usize,
    /// 1×D mean of the run's frame vectors.
    pub vector: Var<'t, S>,
    pub start_frame: usize,
    pub length: usize,
}

#[derive(Clone, Debug)]
pub struct SegmentedSequence<'t, S: Scalar> {
    /// Retained (non-blank) segments in time order.
    pub segments: Vec<Segment<'t, S>>,
    /// Every run before blank removal; tiles `[0, source_length)`.
    pub tiling: Vec<Run>,
    pub source_length: usize,
    pub blank_index: usize,
}

impl<'t, S: Scalar> SegmentedSequence<'t, S> {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn unit_ids(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.unit_id).collect()
    }

    /// Segment vectors stacked into S×D, or `None` when every frame was blank.
    pub fn memory(&self) -> Result<Option<Var<'t, S>>> {
        match self.segments.first() {
            None => Ok(None),
            Some(first) => {
                let parts: Vec<_> = self.segments.iter().map(|s| s.vector).collect();
                first.vector.tape().concat_rows(&parts).map(Some)
            }
        }
    }
}

/// Groups consecutive repeated codewords, averaging their straight-through
/// vectors and omitting blank runs.
pub fn segment<'t, S: Scalar>(
    q: &QuantizedFrameSequence<'t, S>,
    blank_index: usize,
) -> Result<SegmentedSequence<'t, S>> {
    if q.indices.is_empty() {
        return Err(Error::dim("segment", "empty frame sequence"));
    }
    let tiling = runs(&q.indices);
    let mut segments = Vec::new();
    for run in tiling.iter().filter(|r| r.unit_id != blank_index) {
        let vector = q
            .st_vectors
            .slice_rows(run.start, run.length)?
            .mean_rows()?;
        segments.push(Segment {
            unit_id: run.unit_id,
            vector,
            start_frame: run.start,
            length: run.length,
        });
    }
    Ok(SegmentedSequence {
        segments,
        tiling,
        source_length: q.indices.len(),
        blank_index,
    })
}

/// Pseudo one-hot straight-through vectors for a T×V distribution matrix:
/// forward value is `one_hot(argmax)`, gradient passes to `probs`.
pub fn pseudo_one_hot<'t, S: Scalar>(probs: Var<'t, S>) -> Result<QuantizedFrameSequence<'t, S>> {
    let value = probs.value();
    let indices: Vec<usize> = value.iter_rows().map(argmax).collect();
    let one_hot = Tensor::from_fn(value.rows(), value.cols(), |t, k| {
        if indices[t] == k {
            S::one()
        } else {
            S::zero()
        }
    });
    let one_hot = probs.tape().constant(one_hot);
    Ok(QuantizedFrameSequence {
        indices,
        st_vectors: probs.straight_through(one_hot)?,
    })
}

/// [`segment`] applied to the pseudo one-hot form of `probs`.
pub fn segment_soft<'t, S: Scalar>(
    probs: Var<'t, S>,
    blank_index: usize,
) -> Result<SegmentedSequence<'t, S>> {
    if probs.rows() == 0 {
        return Err(Error::dim("segment_soft", "empty frame sequence"));
    }
    segment(&pseudo_one_hot(probs)?, blank_index)
}
