//! Flat named parameter storage and the Adam update rule.

use super::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors. Layouts address entries by
/// the index returned from [`ParamSet::push`], so construction order is the
/// storage format.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor, returning its stable index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Index of the tensor with the given name, if present.
    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Adam with bias correction; first and second moments live beside the
/// parameters so checkpoints can resume mid-run.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Rebuild an optimizer from checkpointed moments.
    pub fn from_state(lr: f64, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t, m, v }
    }

    /// Moments and step count, in parameter order.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.t, &self.m, &self.v)
    }

    /// Apply one update; `grads` must be index-aligned with `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_adam_step_moves_by_lr_regardless_of_gradient_scale() {
        // With bias correction, step one is lr * g / (|g| + eps) elementwise.
        for g in [1e-6, 1.0, 1e6] {
            let mut params = ParamSet::new();
            params.push("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
            let mut opt = Adam::new(0.01);
            opt.step(&mut params, &[Tensor::new(&[2], vec![g, -g]).unwrap()]).unwrap();
            let delta = 0.01 * g / (g + 1e-8);
            let w = params.tensor(0).data();
            assert_relative_eq!(w[0], 1.0 - delta, max_relative = 1e-9);
            assert_relative_eq!(w[1], -2.0 + delta, max_relative = 1e-9);
        }
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut params = ParamSet::new();
        params.push("x", Tensor::new(&[1], vec![5.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = params.tensor(0).data()[0];
            let grad = Tensor::new(&[1], vec![2.0 * (x - 3.0)]).unwrap();
            opt.step(&mut params, &[grad]).unwrap();
        }
        assert!((params.tensor(0).data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn state_round_trips_through_from_state() {
        let mut params = ParamSet::new();
        params.push("x", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut a = Adam::new(0.05);
        a.step(&mut params, &[Tensor::new(&[1], vec![0.5]).unwrap()]).unwrap();
        a.step(&mut params, &[Tensor::new(&[1], vec![-0.25]).unwrap()]).unwrap();

        let (t, m, v) = a.state();
        let mut b = Adam::from_state(0.05, t, m.to_vec(), v.to_vec());
        let mut params_b = params.clone();

        let g = Tensor::new(&[1], vec![0.1]).unwrap();
        a.step(&mut params, &[g.clone()]).unwrap();
        b.step(&mut params_b, &[g]).unwrap();
        assert_eq!(params.tensor(0).data(), params_b.tensor(0).data());
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut params = ParamSet::new();
        params.push("x", Tensor::zeros(&[2]));
        let mut opt = Adam::new(0.1);
        assert!(opt.step(&mut params, &[]).is_err());
        assert!(opt.step(&mut params, &[Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn find_locates_parameters_by_name() {
        let mut params = ParamSet::new();
        params.push("a", Tensor::zeros(&[1]));
        let b = params.push("b", Tensor::zeros(&[1]));
        assert_eq!(params.find("b"), Some(b));
        assert_eq!(params.find("c"), None);
    }
}
