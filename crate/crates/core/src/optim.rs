//! Named parameter storage and the adaptive-moment optimizer.

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Data(format!(
                "parameter count {} does not match model ({})",
                other.len(),
                self.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            if other.values[j].shape() != self.values[i].shape() {
                return Err(Error::Data(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    other.values[j].shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = other.values[j].clone();
        }
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Uses caller-created variables in store order, e.g. to
    /// differentiate with respect to a perturbed copy of the parameters.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t, S>]) -> Result<Bound<'t, S>> {
        if vars.len() != self.len() {
            return Err(Error::dim(
                "bind_vars",
                format!("{} variables for {} parameters", vars.len(), self.len()),
            ));
        }
        for (i, v) in vars.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::dim(
                    "bind_vars",
                    format!("{} has shape {:?}, got {:?}", self.names[i], self.values[i].shape(), v.shape()),
                ));
            }
        }
        Ok(Bound { vars: vars.to_vec() })
    }

    /// Values in store order.
    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    /// Registers every parameter as a constant (evaluation only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] as variables on one tape.
pub struct Bound<'t, S: Scalar> {
    vars: Vec<Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    pub fn var(&self, id: ParamId) -> Var<'t, S> {
        self.vars[id.0]
    }

    /// Gradient for every parameter, zeros for those the loss did not reach.
    pub fn collect(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: S) -> S {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<S>().sqrt();
    if norm > max_norm && norm > S::zero() {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(factor);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: i32,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: S, beta1: S, beta2: S) -> Self {
        let zeros = || {
            store
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        Self {
            lr,
            beta1,
            beta2,
            eps: S::lit(1e-8),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let one = S::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let (m, v, p) = (&mut self.m[i], &mut self.v[i], &mut store.values[i]);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = vec![Tensor::row(vec![3.0_f64, 0.0]), Tensor::row(vec![0.0, 4.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        let after: f64 = g.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![1.0_f64, -2.0]));
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999);
        for _ in 0..200 {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let loss = b.var(id).mul(b.var(id)).unwrap().sum().unwrap();
            let grads = tape.backward(loss).unwrap();
            adam.update(&mut store, &b.collect(&grads));
        }
        assert!(store.get(id).squared_norm() < 1e-2);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![0.5_f64]));
        let mut adam = Adam::new(&store, 1e-3, 0.9, 0.999);
        adam.update(&mut store, &[Tensor::row(vec![0.2])]);
        assert!((store.get(id).item() - (0.5 - 1e-3)).abs() < 1e-9);
    }
}
