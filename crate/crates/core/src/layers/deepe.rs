use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Rng, Scalar};

use super::{
    join, Activation, BatchNormLayer, Dropout, LinearLayer, Mode, ParamVisitor, TensorVisitor,
    TensorVisitorMut,
};

/// Residual block without a final activation:
///
/// `F(x) = S(x) + drop(bn2(fc2(drop(act(bn1(fc1(x)))))))`
///
/// where `S` is the identity, or a learned projection `Ws` when the input and
/// output widths differ, followed by identity dropout in train mode. Either
/// branch can be gated off; gated branches keep their parameters.
#[derive(Debug, Clone)]
pub struct DeepEBlock<T> {
    pub ws: Option<LinearLayer<T>>,
    pub fc1: LinearLayer<T>,
    pub fc2: LinearLayer<T>,
    pub bn1: BatchNormLayer<T>,
    pub bn2: BatchNormLayer<T>,
    pub drop1: Dropout<T>,
    pub drop2: Dropout<T>,
    pub drop_identity: Dropout<T>,
    pub gate_linear: bool,
    pub gate_nonlinear: bool,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
    pre_activation: Option<Matrix<T>>,
    batch: Option<usize>,
}

impl<T: Scalar> DeepEBlock<T> {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        p_fc: f64,
        p_identity: f64,
        bn_momentum: f64,
        rng: &mut Rng,
    ) -> Self {
        let ws = (in_dim != out_dim).then(|| LinearLayer::new(in_dim, out_dim, rng));
        let fc1 = LinearLayer::new(in_dim, out_dim, rng);
        let fc2 = LinearLayer::new(out_dim, out_dim, rng);
        Self {
            ws,
            fc1,
            fc2,
            bn1: BatchNormLayer::with_momentum(out_dim, bn_momentum),
            bn2: BatchNormLayer::with_momentum(out_dim, bn_momentum),
            drop1: Dropout::new(p_fc, rng.split(1)),
            drop2: Dropout::new(p_fc, rng.split(2)),
            drop_identity: Dropout::new(p_identity, rng.split(3)),
            gate_linear: true,
            gate_nonlinear: true,
            activation: Activation::Relu,
            in_dim,
            out_dim,
            pre_activation: None,
            batch: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.bn1.set_mode(mode);
        self.bn2.set_mode(mode);
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.in_dim {
            return Err(Error::shape("deepe block", x.shape(), (x.rows(), self.in_dim)));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<Matrix<T>> {
        self.check_input(x)?;
        self.bn1.check_mode(mode)?;
        self.bn2.check_mode(mode)?;
        let mut out = Matrix::zeros(x.rows(), self.out_dim);
        if self.gate_linear {
            let shortcut = match &mut self.ws {
                Some(ws) => ws.forward(x)?,
                None => x.clone(),
            };
            out.add_assign(&self.drop_identity.forward(shortcut, mode))?;
        }
        if self.gate_nonlinear {
            let h = self.fc1.forward(x)?;
            let h = self.bn1.forward(&h, mode)?;
            let a = self.activation.forward(&h);
            self.pre_activation = Some(h);
            let a = self.drop1.forward(a, mode);
            let h = self.fc2.forward(&a)?;
            let h = self.bn2.forward(&h, mode)?;
            out.add_assign(&self.drop2.forward(h, mode))?;
        }
        self.batch = Some(x.rows());
        Ok(out)
    }

    /// Cache-free eval-mode forward.
    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut out = Matrix::zeros(x.rows(), self.out_dim);
        if self.gate_linear {
            match &self.ws {
                Some(ws) => out.add_assign(&ws.infer(x)?)?,
                None => out.add_assign(x)?,
            }
        }
        if self.gate_nonlinear {
            let h = self.bn1.infer(&self.fc1.infer(x)?)?;
            let a = self.activation.forward(&h);
            let h = self.bn2.infer(&self.fc2.infer(&a)?)?;
            out.add_assign(&h)?;
        }
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Matrix<T>) -> Result<Matrix<T>> {
        let batch = self.batch.take().ok_or(Error::MissingCache("deepe block"))?;
        if upstream.shape() != (batch, self.out_dim) {
            return Err(Error::shape("deepe block backward", upstream.shape(), (batch, self.out_dim)));
        }
        let mut dx = Matrix::zeros(batch, self.in_dim);
        if self.gate_linear {
            let g = self.drop_identity.backward(upstream.clone())?;
            match &mut self.ws {
                Some(ws) => dx.add_assign(&ws.backward(&g)?)?,
                None => dx.add_assign(&g)?,
            }
        }
        if self.gate_nonlinear {
            let pre = self
                .pre_activation
                .take()
                .ok_or(Error::MissingCache("deepe block"))?;
            let g = self.drop2.backward(upstream.clone())?;
            let g = self.bn2.backward(&g)?;
            let g = self.fc2.backward(&g)?;
            let g = self.drop1.backward(g)?;
            let g = self.activation.backward(&pre, g)?;
            let g = self.bn1.backward(&g)?;
            dx.add_assign(&self.fc1.backward(&g)?)?;
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.batch = None;
        self.pre_activation = None;
        if let Some(ws) = &mut self.ws {
            ws.clear_cache();
        }
        self.fc1.clear_cache();
        self.fc2.clear_cache();
        self.bn1.clear_cache();
        self.bn2.clear_cache();
        self.drop1.clear_cache();
        self.drop2.clear_cache();
        self.drop_identity.clear_cache();
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        if let Some(ws) = &mut self.ws {
            ws.visit_params(&join(prefix, "ws"), f);
        }
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut TensorVisitor<'_, T>) {
        if let Some(ws) = &self.ws {
            ws.visit_tensors(&join(prefix, "ws"), f);
        }
        self.fc1.visit_tensors(&join(prefix, "fc1"), f);
        self.bn1.visit_tensors(&join(prefix, "bn1"), f);
        self.fc2.visit_tensors(&join(prefix, "fc2"), f);
        self.bn2.visit_tensors(&join(prefix, "bn2"), f);
    }

    pub fn visit_tensors_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, T>) {
        if let Some(ws) = &mut self.ws {
            ws.visit_tensors_mut(&join(prefix, "ws"), f);
        }
        self.fc1.visit_tensors_mut(&join(prefix, "fc1"), f);
        self.bn1.visit_tensors_mut(&join(prefix, "bn1"), f);
        self.fc2.visit_tensors_mut(&join(prefix, "fc2"), f);
        self.bn2.visit_tensors_mut(&join(prefix, "bn2"), f);
    }
}

/// Probability that a feature of non-linear order `order` is dropped on its
/// way through the identity shortcuts of `n_blocks` stacked blocks, each
/// dropping with probability `alpha`: `1 - (1 - alpha)^(n_blocks - order)`.
pub fn identity_dropout_total_drop_prob(n_blocks: usize, alpha: f64, order: usize) -> Result<f64> {
    if order > n_blocks {
        return Err(Error::Config(format!(
            "order {order} exceeds the number of blocks {n_blocks}"
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("identity dropout {alpha} outside [0, 1)")));
    }
    let passes = (n_blocks - order) as i32;
    Ok(1.0 - (1.0 - alpha).powi(passes))
}
