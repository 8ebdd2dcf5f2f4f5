use rand::Rng;

use crate::error::Result;
use crate::numerics::{Scalar, Tensor, Var};
use crate::optim::{Bound, ParamId, ParamStore};

/// Glorot-uniform matrix.
pub(crate) fn glorot<S: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| S::lit(rng.random_range(-limit..=limit)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), glorot(input, output, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, output)),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.matmul(p.var(self.weight))?.add_row(p.var(self.bias))
    }
}

/// Gated recurrent cell: update and reset gates around one tanh candidate.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            input_weight: store.add(format!("{name}.w_input"), glorot(input, 3 * hidden, rng)),
            hidden_weight: store.add(format!("{name}.w_hidden"), glorot(hidden, 3 * hidden, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, 3 * hidden)),
            hidden,
        }
    }

    /// Input contribution for every row at once: T×3H.
    pub fn project_input<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        x: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        x.matmul(p.var(self.input_weight))?.add_row(p.var(self.bias))
    }

    /// One step given the projected input row (1×3H) and previous state (1×H).
    pub fn step<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        x_proj: Var<'t, S>,
        h: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let hd = self.hidden;
        let h_proj = h.matmul(p.var(self.hidden_weight))?;
        let gates = x_proj
            .slice_cols(0, 2 * hd)?
            .add(h_proj.slice_cols(0, 2 * hd)?)?
            .sigmoid()?;
        let update = gates.slice_cols(0, hd)?;
        let reset = gates.slice_cols(hd, hd)?;
        let candidate = x_proj
            .slice_cols(2 * hd, hd)?
            .add(reset.mul(h_proj.slice_cols(2 * hd, hd)?)?)?
            .tanh()?;
        // h' = (1 - z) n + z h
        candidate.add(update.mul(h.sub(candidate)?)?)
    }

    /// Runs the cell over every row of `x` from a zero state; returns T×H.
    pub fn run<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let tape = x.tape();
        let proj = self.project_input(p, x)?;
        let mut h = tape.constant(Tensor::zeros(1, self.hidden));
        let mut states = Vec::with_capacity(x.rows());
        for t in 0..x.rows() {
            h = self.step(p, proj.slice_rows(t, 1)?, h)?;
            states.push(h);
        }
        tape.concat_rows(&states)
    }
}
