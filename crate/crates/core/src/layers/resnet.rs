use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Rng, Scalar};

use super::{
    join, Activation, BatchNormLayer, Dropout, LinearLayer, Mode, ParamVisitor, TensorVisitor,
    TensorVisitorMut,
};

/// Classic residual block: `act(S(x) + chain(x))`, where `chain` is
/// `inner` linear layers each followed by batch norm and dropout, with an
/// activation between consecutive layers. Unlike [`super::DeepEBlock`] the
/// sum passes through a final activation.
#[derive(Debug, Clone)]
pub struct ResNetBlock<T> {
    pub ws: Option<LinearLayer<T>>,
    pub linears: Vec<LinearLayer<T>>,
    pub norms: Vec<BatchNormLayer<T>>,
    pub drops: Vec<Dropout<T>>,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
    pre_activations: Vec<Matrix<T>>,
    sum: Option<Matrix<T>>,
}

impl<T: Scalar> ResNetBlock<T> {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        inner: usize,
        p_fc: f64,
        bn_momentum: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(inner >= 1, "a residual block needs at least one inner layer");
        let ws = (in_dim != out_dim).then(|| LinearLayer::new(in_dim, out_dim, rng));
        let linears = (0..inner)
            .map(|i| LinearLayer::new(if i == 0 { in_dim } else { out_dim }, out_dim, rng))
            .collect();
        let norms = (0..inner)
            .map(|_| BatchNormLayer::with_momentum(out_dim, bn_momentum))
            .collect();
        let drops = (0..inner)
            .map(|i| Dropout::new(p_fc, rng.split(i as u64 + 1)))
            .collect();
        Self {
            ws,
            linears,
            norms,
            drops,
            activation: Activation::Relu,
            in_dim,
            out_dim,
            pre_activations: Vec::new(),
            sum: None,
        }
    }

    pub fn inner_layers(&self) -> usize {
        self.linears.len()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.norms.iter_mut().for_each(|n| n.set_mode(mode));
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.in_dim {
            return Err(Error::shape("resnet block", x.shape(), (x.rows(), self.in_dim)));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<Matrix<T>> {
        self.check_input(x)?;
        for n in &self.norms {
            n.check_mode(mode)?;
        }
        let last = self.linears.len() - 1;
        self.pre_activations.clear();
        let mut h = x.clone();
        for i in 0..=last {
            h = self.linears[i].forward(&h)?;
            h = self.norms[i].forward(&h, mode)?;
            if i < last {
                let a = self.activation.forward(&h);
                self.pre_activations.push(h);
                h = a;
            }
            h = self.drops[i].forward(h, mode);
        }
        let shortcut = match &mut self.ws {
            Some(ws) => ws.forward(x)?,
            None => x.clone(),
        };
        let sum = shortcut.add(&h)?;
        let out = self.activation.forward(&sum);
        self.sum = Some(sum);
        Ok(out)
    }

    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let last = self.linears.len() - 1;
        let mut h = x.clone();
        for i in 0..=last {
            h = self.norms[i].infer(&self.linears[i].infer(&h)?)?;
            if i < last {
                h = self.activation.forward(&h);
            }
        }
        let sum = match &self.ws {
            Some(ws) => ws.infer(x)?.add(&h)?,
            None => x.add(&h)?,
        };
        Ok(self.activation.forward(&sum))
    }

    pub fn backward(&mut self, upstream: &Matrix<T>) -> Result<Matrix<T>> {
        let sum = self.sum.take().ok_or(Error::MissingCache("resnet block"))?;
        if upstream.shape() != sum.shape() {
            return Err(Error::shape("resnet block backward", upstream.shape(), sum.shape()));
        }
        let g_sum = self.activation.backward(&sum, upstream.clone())?;
        let mut dx = match &mut self.ws {
            Some(ws) => ws.backward(&g_sum)?,
            None => g_sum.clone(),
        };
        let last = self.linears.len() - 1;
        let mut g = g_sum;
        for i in (0..=last).rev() {
            g = self.drops[i].backward(g)?;
            if i < last {
                let pre = self
                    .pre_activations
                    .pop()
                    .ok_or(Error::MissingCache("resnet block"))?;
                g = self.activation.backward(&pre, g)?;
            }
            g = self.norms[i].backward(&g)?;
            g = self.linears[i].backward(&g)?;
        }
        dx.add_assign(&g)?;
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.sum = None;
        self.pre_activations.clear();
        if let Some(ws) = &mut self.ws {
            ws.clear_cache();
        }
        self.linears.iter_mut().for_each(LinearLayer::clear_cache);
        self.norms.iter_mut().for_each(BatchNormLayer::clear_cache);
        self.drops.iter_mut().for_each(Dropout::clear_cache);
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        if let Some(ws) = &mut self.ws {
            ws.visit_params(&join(prefix, "ws"), f);
        }
        for (i, (l, n)) in self.linears.iter_mut().zip(&mut self.norms).enumerate() {
            l.visit_params(&join(prefix, &format!("inner{i}.linear")), f);
            n.visit_params(&join(prefix, &format!("inner{i}.bn")), f);
        }
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut TensorVisitor<'_, T>) {
        if let Some(ws) = &self.ws {
            ws.visit_tensors(&join(prefix, "ws"), f);
        }
        for (i, (l, n)) in self.linears.iter().zip(&self.norms).enumerate() {
            l.visit_tensors(&join(prefix, &format!("inner{i}.linear")), f);
            n.visit_tensors(&join(prefix, &format!("inner{i}.bn")), f);
        }
    }

    pub fn visit_tensors_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, T>) {
        if let Some(ws) = &mut self.ws {
            ws.visit_tensors_mut(&join(prefix, "ws"), f);
        }
        for (i, (l, n)) in self.linears.iter_mut().zip(&mut self.norms).enumerate() {
            l.visit_tensors_mut(&join(prefix, &format!("inner{i}.linear")), f);
            n.visit_tensors_mut(&join(prefix, &format!("inner{i}.bn")), f);
        }
    }
}
