use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Scalar};

use super::{join, Mode, Param, ParamVisitor, TensorVisitor, TensorVisitorMut};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-feature batch normalisation over the rows of a batch.
#[derive(Debug, Clone)]
pub struct BatchNormLayer<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Matrix<T>,
    pub running_var: Matrix<T>,
    pub momentum: f64,
    pub eps: f64,
    mode: Mode,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    mode: Mode,
    x_hat: Matrix<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(features: usize) -> Self {
        Self::with_momentum(features, DEFAULT_MOMENTUM)
    }

    pub fn with_momentum(features: usize, momentum: f64) -> Self {
        Self {
            gamma: Param::new(Matrix::filled(1, features, T::one())),
            beta: Param::new(Matrix::zeros(1, features)),
            running_mean: Matrix::zeros(1, features),
            running_var: Matrix::filled(1, features, T::one()),
            momentum,
            eps: DEFAULT_EPS,
            mode: Mode::Train,
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.cols()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub(crate) fn check_mode(&self, requested: Mode) -> Result<()> {
        if requested != self.mode {
            return Err(Error::ModeMismatch {
                layer: "batch norm",
                actual: self.mode,
                requested,
            });
        }
        Ok(())
    }

    fn check_cols(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.features() {
            return Err(Error::shape("batch norm", x.shape(), (1, self.features())));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<Matrix<T>> {
        self.check_mode(mode)?;
        self.check_cols(x)?;
        let (x_hat, inv_std) = match mode {
            Mode::Train => self.normalize_batch(x)?,
            Mode::Eval => self.normalize_running(x),
        };
        let y = self.affine(&x_hat);
        self.cache = Some(BnCache {
            mode,
            x_hat,
            inv_std,
        });
        Ok(y)
    }

    /// Eval-mode forward without touching any state.
    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_cols(x)?;
        let (x_hat, _) = self.normalize_running(x);
        Ok(self.affine(&x_hat))
    }

    fn normalize_batch(&mut self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
        let n = x.rows();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let nf = T::of(n as f64);
        let mean: Vec<T> = x.col_sums().into_iter().map(|s| s / nf).collect();
        let mut var = vec![T::zero(); x.cols()];
        for r in 0..n {
            for ((v, &xv), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let d = xv - m;
                *v += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nf);
        let eps = T::of(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = x.clone();
        for r in 0..n {
            for ((v, &m), &s) in x_hat.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }

        let mom = T::of(self.momentum);
        let keep = T::one() - mom;
        let unbias = nf / T::of((n - 1) as f64);
        for (rm, &m) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *rm = keep * *rm + mom * m;
        }
        for (rv, &v) in self.running_var.data_mut().iter_mut().zip(&var) {
            *rv = keep * *rv + mom * v * unbias;
        }
        Ok((x_hat, inv_std))
    }

    fn normalize_running(&self, x: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
        let eps = T::of(self.eps);
        let inv_std: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mean = self.running_mean.data();
        let mut x_hat = x.clone();
        for r in 0..x.rows() {
            for ((v, &m), &s) in x_hat.row_mut(r).iter_mut().zip(mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        (x_hat, inv_std)
    }

    fn affine(&self, x_hat: &Matrix<T>) -> Matrix<T> {
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        let mut y = x_hat.clone();
        for r in 0..y.rows() {
            for ((v, &gv), &bv) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gv + bv;
            }
        }
        y
    }

    pub fn backward(&mut self, upstream: &Matrix<T>) -> Result<Matrix<T>> {
        let cache = self.cache.take().ok_or(Error::MissingCache("batch norm"))?;
        if upstream.shape() != cache.x_hat.shape() {
            return Err(Error::shape("batch norm backward", upstream.shape(), cache.x_hat.shape()));
        }
        let n = upstream.rows();
        let features = self.features();
        let mut sum_dy = vec![T::zero(); features];
        let mut sum_dy_xhat = vec![T::zero(); features];
        for r in 0..n {
            for c in 0..features {
                let dy = upstream.get(r, c);
                sum_dy[c] += dy;
                sum_dy_xhat[c] += dy * cache.x_hat.get(r, c);
            }
        }
        for c in 0..features {
            self.beta.grad.data_mut()[c] += sum_dy[c];
            self.gamma.grad.data_mut()[c] += sum_dy_xhat[c];
        }

        let gamma = self.gamma.value.data();
        let mut dx = Matrix::zeros(n, features);
        match cache.mode {
            Mode::Eval => {
                for r in 0..n {
                    for c in 0..features {
                        dx.set(r, c, upstream.get(r, c) * gamma[c] * cache.inv_std[c]);
                    }
                }
            }
            Mode::Train => {
                let nf = T::of(n as f64);
                for r in 0..n {
                    for c in 0..features {
                        let scale = gamma[c] * cache.inv_std[c] / nf;
                        let v = nf * upstream.get(r, c)
                            - sum_dy[c]
                            - cache.x_hat.get(r, c) * sum_dy_xhat[c];
                        dx.set(r, c, scale * v);
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut TensorVisitor<'_, T>) {
        f(&join(prefix, "gamma"), &self.gamma.value);
        f(&join(prefix, "beta"), &self.beta.value);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    pub fn visit_tensors_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, T>) {
        f(&join(prefix, "gamma"), &mut self.gamma.value);
        f(&join(prefix, "beta"), &mut self.beta.value);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
