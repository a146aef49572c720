use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Rng, Scalar};

use super::Mode;

/// Inverted dropout: in train mode entries are zeroed with probability `p`
/// and survivors scaled by `1/(1-p)`; eval mode is the identity.
///
/// Each instance owns its own random stream so masks are reproducible from
/// the model seed alone.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    p: f64,
    rng: Rng,
    cache: Option<Option<Matrix<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64, rng: Rng) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        Self { p, rng, cache: None }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn set_p(&mut self, p: f64) {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        self.p = p;
    }

    pub fn forward(&mut self, x: Matrix<T>, mode: Mode) -> Matrix<T> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.cache = Some(None);
            return x;
        }
        let keep = T::of(1.0 / (1.0 - self.p));
        let mut mask = Matrix::zeros(x.rows(), x.cols());
        for m in mask.data_mut() {
            if self.rng.uniform() >= self.p {
                *m = keep;
            }
        }
        let y = x.hadamard(&mask).expect("mask built with matching shape");
        self.cache = Some(Some(mask));
        y
    }

    pub fn backward(&mut self, upstream: Matrix<T>) -> Result<Matrix<T>> {
        match self.cache.take().ok_or(Error::MissingCache("dropout"))? {
            None => Ok(upstream),
            Some(mask) => upstream.hadamard(&mask),
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
