use crate::error::{Error, Result};
use crate::layers::Param;
use crate::model::Model;
use crate::numkernel::{Matrix, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments for each parameter, in visiting order.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(String, Matrix<T>, Matrix<T>)>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// `(name, m, v)` per parameter.
    pub fn moments(&self) -> &[(String, Matrix<T>, Matrix<T>)] {
        &self.moments
    }

    fn apply(&mut self, idx: usize, name: &str, p: &mut Param<T>, lr: f64, l2: f64) -> Result<()> {
        if p.grad.shape() != p.value.shape() {
            return Err(Error::shape("adam gradient", p.grad.shape(), p.value.shape()));
        }
        if idx == self.moments.len() {
            let (r, c) = p.value.shape();
            self.moments.push((name.to_string(), Matrix::zeros(r, c), Matrix::zeros(r, c)));
        }
        let (_, m, v) = &mut self.moments[idx];
        if m.shape() != p.value.shape() {
            return Err(Error::shape("adam moments", m.shape(), p.value.shape()));
        }
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let w = p.value.data_mut();
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for k in 0..w.len() {
            let gk = g[k].f64() + l2 * w[k].f64();
            let mk = b1 * m[k].f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].f64() + (1.0 - b2) * gk * gk;
            m[k] = T::of(mk);
            v[k] = T::of(vk);
            let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
            w[k] = T::of(w[k].f64() - update);
        }
        Ok(())
    }

    /// One step over an explicit parameter list. The list must keep the same
    /// order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64, l2: f64) -> Result<()> {
        self.check_count(params.len())?;
        self.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            self.apply(i, "", p, lr, l2)?;
        }
        Ok(())
    }

    /// One step over every parameter of `model`.
    pub fn step_model(&mut self, model: &mut Model<T>, lr: f64, l2: f64) -> Result<()> {
        let mut count = 0;
        model.visit_params(&mut |_, _| count += 1);
        self.check_count(count)?;
        self.step += 1;
        let mut idx = 0;
        let mut err = None;
        model.visit_params(&mut |name, p| {
            if err.is_none() {
                err = self.apply(idx, name, p, lr, l2).err();
            }
            idx += 1;
        });
        err.map_or(Ok(()), Err)
    }

    fn check_count(&self, n: usize) -> Result<()> {
        if !self.moments.is_empty() && self.moments.len() != n {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters but was given {n}",
                self.moments.len()
            )));
        }
        Ok(())
    }
}
