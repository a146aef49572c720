use crate::error::{Error, Result};
use crate::numkernel::{matmul, matmul_nt, matmul_tn, xavier_normal_init, Matrix, Rng, Scalar};

use super::{join, Param, ParamVisitor, TensorVisitor, TensorVisitorMut};

/// `y = x Wᵀ + b` with `W` stored out×in.
#[derive(Debug, Clone)]
pub struct LinearLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Matrix<T>>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self::from_parts(
            xavier_normal_init(out_dim, in_dim, rng),
            Matrix::zeros(1, out_dim),
        )
    }

    pub fn from_parts(weight: Matrix<T>, bias: Matrix<T>) -> Self {
        assert_eq!(bias.shape(), (1, weight.rows()), "bias must be 1 x out");
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("linear", x.shape(), self.weight.value.shape()));
        }
        let mut y = matmul_nt(x, &self.weight.value)?;
        let b = self.bias.value.data();
        for r in 0..y.rows() {
            for (v, &bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Matrix<T>) -> Result<Matrix<T>> {
        let x = self.cache.take().ok_or(Error::MissingCache("linear"))?;
        if upstream.shape() != (x.rows(), self.out_dim()) {
            return Err(Error::shape("linear backward", upstream.shape(), (x.rows(), self.out_dim())));
        }
        self.weight.grad.add_assign(&matmul_tn(upstream, &x)?)?;
        let db = upstream.col_sums();
        for (g, d) in self.bias.grad.data_mut().iter_mut().zip(db) {
            *g += d;
        }
        matmul(upstream, &self.weight.value)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut TensorVisitor<'_, T>) {
        f(&join(prefix, "weight"), &self.weight.value);
        f(&join(prefix, "bias"), &self.bias.value);
    }

    pub fn visit_tensors_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight.value);
        f(&join(prefix, "bias"), &mut self.bias.value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_adds_bias_to_projection() {
        let w = Matrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 0.5]]);
        let b = Matrix::from_rows(&[vec![0.1, 0.2, 0.3]]);
        let mut lin = LinearLayer::from_parts(w, b);
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let y = lin.forward(&x).unwrap();
        let expect = [3.1, -0.8, 3.8];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut lin = LinearLayer::<f64>::new(2, 2, &mut Rng::new(0));
        assert!(matches!(
            lin.backward(&Matrix::zeros(1, 2)),
            Err(Error::MissingCache("linear"))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let mut lin = LinearLayer::<f64>::new(4, 3, &mut rng);
        lin.bias.value = rng.normal_matrix(1, 3, 1.0);
        let x = rng.normal_matrix(5, 4, 1.0);
        let w = rng.normal_matrix(5, 3, 1.0);
        lin.forward(&x).unwrap();
        let dx = lin.backward(&w).unwrap();

        let loss = |l: &LinearLayer<f64>, x: &Matrix<f64>| l.infer(x).unwrap().hadamard(&w).unwrap().sum();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let num = (loss(&lin, &p) - loss(&lin, &m)) / (2.0 * h);
            assert!((num - dx.data()[i]).abs() <= 1e-6 * num.abs().max(1.0));
        }
        for i in 0..lin.weight.value.len() {
            let mut l = lin.clone();
            l.weight.value.data_mut()[i] += h;
            let up = loss(&l, &x);
            l.weight.value.data_mut()[i] -= 2.0 * h;
            let num = (up - loss(&l, &x)) / (2.0 * h);
            let ana = lin.weight.grad.data()[i];
            assert!((num - ana).abs() <= 1e-6 * num.abs().max(1.0));
        }
        let bias_grad = w.col_sums();
        assert_eq!(lin.bias.grad.data(), &bias_grad[..]);
    }
}
