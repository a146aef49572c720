//! Finite-difference verification of every hand-written backward pass.
//!
//! Each probe wraps a layer (or the whole model) with a fixed input and a
//! fixed random upstream gradient `R`, so the scalar under test is
//! `sum(R ⊙ forward(x))`. Analytic gradients come from one forward/backward
//! pass; numeric ones from the five-point central stencil
//! `(f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h` on a fresh clone per
//! evaluation, so dropout masks replay identically.

use log::warn;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    BatchNormLayer, DeepEBlock, Dropout, LinearLayer, Mode, Param, ParamVisitor, ResNetBlock,
};
use crate::model::{DropoutSpec, Model, ModelConfig};
use crate::numkernel::{relu_backward, relu_forward, Matrix, Precision, Rng, Scalar};
use crate::train::cross_entropy_loss;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub precision: Precision,
    /// Scales every analytic gradient by `1 + 1e-3`; a negative control.
    pub perturb_backward: bool,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            perturb_backward: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub precision: Precision,
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_error < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn tolerance_for(precision: Precision) -> f64 {
    match precision {
        Precision::F64 => 1e-5,
        Precision::F32 => 1e-2,
    }
}

struct Settings {
    step: f64,
    /// Denominator floor so vanishing gradients compare absolutely.
    floor: f64,
    perturb: bool,
}

impl Settings {
    fn for_precision(p: Precision, perturb: bool) -> Self {
        match p {
            Precision::F64 => Self {
                step: 1e-4,
                floor: 1e-4,
                perturb,
            },
            Precision::F32 => Self {
                step: 1e-2,
                floor: 1e-2,
                perturb,
            },
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

trait Probe<T: Scalar>: Clone {
    fn visit(&mut self, f: &mut ParamVisitor<'_, T>);
    fn loss(&mut self) -> Result<f64>;
    /// Forward and backward, accumulating into every visited gradient.
    fn accumulate(&mut self) -> Result<()>;
}

trait Module<T: Scalar>: Clone {
    fn fwd(&mut self, x: &Matrix<T>) -> Result<Matrix<T>>;
    fn bwd(&mut self, g: &Matrix<T>) -> Result<Matrix<T>>;
    fn params(&mut self, _f: &mut ParamVisitor<'_, T>) {}
}

impl<T: Scalar> Module<T> for LinearLayer<T> {
    fn fwd(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward(x)
    }
    fn bwd(&mut self, g: &Matrix<T>) -> Result<Matrix<T>> {
        self.backward(g)
    }
    fn params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.visit_params("", f)
    }
}

#[derive(Clone)]
struct Bn<T>(BatchNormLayer<T>, Mode);

impl<T: Scalar> Module<T> for Bn<T> {
    fn fwd(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.0.forward(x, self.1)
    }
    fn bwd(&mut self, g: &Matrix<T>) -> Result<Matrix<T>> {
        self.0.backward(g)
    }
    fn params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.0.visit_params("", f)
    }
}

#[derive(Clone, Default)]
struct Relu<T>(Option<Matrix<T>>);

impl<T: Scalar> Module<T> for Relu<T> {
    fn fwd(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.0 = Some(x.clone());
        Ok(relu_forward(x))
    }
    fn bwd(&mut self, g: &Matrix<T>) -> Result<Matrix<T>> {
        let x = self.0.take().ok_or(crate::Error::MissingCache("relu"))?;
        relu_backward(&x, g)
    }
}

impl<T: Scalar> Module<T> for Dropout<T> {
    fn fwd(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(x.clone(), Mode::Train))
    }
    fn bwd(&mut self, g: &Matrix<T>) -> Result<Matrix<T>> {
        self.backward(g.clone())
    }
}

impl<T: Scalar> Module<T> for DeepEBlock<T> {
    fn fwd(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward(x, Mode::Train)
    }
    fn bwd(&mut self, g: &Matrix<T>) -> Result<Matrix<T>> {
        self.backward(g)
    }
    fn params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.visit_params("", f)
    }
}

impl<T: Scalar> Module<T> for ResNetBlock<T> {
    fn fwd(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward(x, Mode::Train)
    }
    fn bwd(&mut self, g: &Matrix<T>) -> Result<Matrix<T>> {
        self.backward(g)
    }
    fn params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.visit_params("", f)
    }
}

fn weighted_sum<T: Scalar>(y: &Matrix<T>, r: &Matrix<T>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a.f64() * b.f64()).sum()
}

#[derive(Clone)]
struct LayerProbe<M, T> {
    module: M,
    input: Param<T>,
    upstream: Matrix<T>,
}

impl<T: Scalar, M: Module<T>> Probe<T> for LayerProbe<M, T> {
    fn visit(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.module.params(f);
        f("input", &mut self.input);
    }

    fn loss(&mut self) -> Result<f64> {
        let y = self.module.fwd(&self.input.value)?;
        Ok(weighted_sum(&y, &self.upstream))
    }

    fn accumulate(&mut self) -> Result<()> {
        self.module.fwd(&self.input.value)?;
        let dx = self.module.bwd(&self.upstream)?;
        self.input.grad.add_assign(&dx)
    }
}

#[derive(Clone)]
struct LossProbe<T> {
    scores: Param<T>,
    gold: Vec<usize>,
}

impl<T: Scalar> Probe<T> for LossProbe<T> {
    fn visit(&mut self, f: &mut ParamVisitor<'_, T>) {
        f("scores", &mut self.scores);
    }
    fn loss(&mut self) -> Result<f64> {
        Ok(cross_entropy_loss(&self.scores.value, &self.gold, 0.0)?.0)
    }
    fn accumulate(&mut self) -> Result<()> {
        let (_, g) = cross_entropy_loss(&self.scores.value, &self.gold, 0.0)?;
        self.scores.grad.add_assign(&g)
    }
}

#[derive(Clone)]
struct ModelProbe<T> {
    model: Model<T>,
    heads: Vec<usize>,
    relations: Vec<usize>,
    gold: Vec<usize>,
}

impl<T: Scalar> Probe<T> for ModelProbe<T> {
    fn visit(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.model.visit_params(f)
    }
    fn loss(&mut self) -> Result<f64> {
        let s = self.model.score_all(&self.heads, &self.relations, Mode::Train)?;
        Ok(cross_entropy_loss(&s, &self.gold, 0.0)?.0)
    }
    fn accumulate(&mut self) -> Result<()> {
        let s = self.model.score_all(&self.heads, &self.relations, Mode::Train)?;
        let (_, g) = cross_entropy_loss(&s, &self.gold, 0.0)?;
        self.model.backward(&g)
    }
}

fn check<T: Scalar, P: Probe<T>>(group: &str, probe: &P, s: &Settings) -> Result<Vec<GroupResult>> {
    let mut analytic = probe.clone();
    analytic.visit(&mut |_, p| p.zero_grad());
    analytic.accumulate()?;
    let mut grads: Vec<(String, Matrix<T>)> = Vec::new();
    analytic.visit(&mut |name, p| grads.push((name.to_string(), p.grad.clone())));

    let eval = |name: &str, k: usize, delta: f64| -> Result<f64> {
        let mut p = probe.clone();
        p.visit(&mut |n, param| {
            if n == name {
                let v = &mut param.value.data_mut()[k];
                *v = T::of(v.f64() + delta);
            }
        });
        p.loss()
    };

    let scale = if s.perturb { 1.0 + 1e-3 } else { 1.0 };
    let h = s.step;
    let mut out = Vec::new();
    for (name, grad) in &grads {
        let mut worst: f64 = 0.0;
        for k in 0..grad.len() {
            let numeric = (eval(name, k, -2.0 * h)? - 8.0 * eval(name, k, -h)? + 8.0 * eval(name, k, h)?
                - eval(name, k, 2.0 * h)?)
                / (12.0 * h);
            let err = relative_error(grad.data()[k].f64() * scale, numeric, s.floor);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        out.push(GroupResult {
            group: format!("{group}.{name}"),
            max_rel_error: worst,
            checked: grad.len(),
        });
    }
    Ok(out)
}

/// Keeps inputs away from the ReLU kink so the stencil never straddles it.
fn off_kink<T: Scalar>(m: Matrix<T>, margin: f64) -> Matrix<T> {
    m.map(|v| {
        let x = v.f64();
        T::of(if x.abs() < margin { x.signum() * margin + x } else { x })
    })
}

fn layer<T: Scalar, M: Module<T>>(module: M, x: Matrix<T>, rng: &mut Rng) -> LayerProbe<M, T> {
    let (rows, _) = x.shape();
    let y = module.clone().fwd(&x).expect("probe forward");
    LayerProbe {
        module,
        upstream: rng.normal_matrix(rows, y.cols(), 1.0),
        input: Param::new(x),
    }
}

/// The model used for the whole-network check: d=8, two DeepE blocks, one
/// residual block in the project network, 64-bit capable.
pub fn gradcheck_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        dim: 8,
        n_deepe_blocks: 2,
        n_resnet_blocks: 1,
        resnet_inner_layers: 2,
        dropout: DropoutSpec {
            p_input: 0.1,
            p_fc: 0.2,
            p_identity: 0.1,
            p_resnet_fc: 0.1,
        },
        seed,
        ..ModelConfig::default()
    }
}

fn run_typed<T: Scalar>(opts: &GradcheckOptions) -> Result<Vec<GroupResult>> {
    let s = Settings::for_precision(T::PRECISION, opts.perturb_backward);
    let mut rng = Rng::new(opts.seed);
    let mut out = Vec::new();
    let margin = 50.0 * s.step;

    let x: Matrix<T> = rng.normal_matrix(5, 4, 1.0);
    let mut lin = LinearLayer::new(4, 3, &mut rng);
    lin.bias.value = rng.normal_matrix(1, 3, 0.5);
    out.extend(check("linear", &layer(lin, x.clone(), &mut rng), &s)?);

    let mut bn = BatchNormLayer::new(4);
    bn.gamma.value = rng.normal_matrix(1, 4, 1.0);
    bn.beta.value = rng.normal_matrix(1, 4, 1.0);
    out.extend(check("batchnorm_train", &layer(Bn(bn.clone(), Mode::Train), x.clone(), &mut rng), &s)?);
    bn.running_mean = rng.normal_matrix(1, 4, 0.5);
    bn.running_var = rng.normal_matrix::<T>(1, 4, 0.5).map(|v| v * v + T::of(0.5));
    bn.set_mode(Mode::Eval);
    out.extend(check("batchnorm_eval", &layer(Bn(bn, Mode::Eval), x.clone(), &mut rng), &s)?);

    let xr = off_kink(x.clone(), margin);
    out.extend(check("relu", &layer(Relu::default(), xr, &mut rng), &s)?);

    let drop = Dropout::new(0.3, rng.split(77));
    out.extend(check("dropout", &layer(drop, x.clone(), &mut rng), &s)?);

    // the 2d -> d shape of a first block, with the projection shortcut
    let xb: Matrix<T> = rng.normal_matrix(6, 8, 1.0);
    let block = DeepEBlock::new(8, 4, 0.2, 0.2, 0.1, &mut rng);
    out.extend(check("deepe_block", &layer(block, xb.clone(), &mut rng), &s)?);
    let block = DeepEBlock::new(4, 4, 0.2, 0.0, 0.1, &mut rng);
    out.extend(check("deepe_block_square", &layer(block, x.clone(), &mut rng), &s)?);

    let res = ResNetBlock::new(8, 4, 2, 0.2, 0.1, &mut rng);
    out.extend(check("resnet_block", &layer(res, xb, &mut rng), &s)?);
    let res = ResNetBlock::new(4, 4, 3, 0.0, 0.1, &mut rng);
    out.extend(check("resnet_block_square", &layer(res, x, &mut rng), &s)?);

    let scores = Param::new(rng.normal_matrix::<T>(3, 5, 1.5));
    out.extend(check(
        "cross_entropy",
        &LossProbe {
            scores,
            gold: vec![4, 0, 2],
        },
        &s,
    )?);

    let (ne, nr) = (10, 3);
    let model = Model::<T>::new(gradcheck_model_config(opts.seed), ne, nr)?;
    let heads = vec![0, 3, 5, 7, 9, 2];
    let relations = vec![0, 4, 1, 5, 2, 3];
    let gold = vec![1, 8, 4, 0, 6, 2];
    out.extend(check(
        "model",
        &ModelProbe {
            model,
            heads,
            relations,
            gold,
        },
        &s,
    )?);
    Ok(out)
}

/// Runs every probe and collects the worst relative error per parameter.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let groups = match opts.precision {
        Precision::F64 => run_typed::<f64>(opts)?,
        Precision::F32 => {
            warn!("32-bit finite differences are dominated by rounding; tolerance relaxed to 1e-2");
            run_typed::<f32>(opts)?
        }
    };
    Ok(GradcheckReport {
        precision: opts.precision,
        tolerance: tolerance_for(opts.precision),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-4), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-4) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-6, 1e-4) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn default_suite_passes_at_f64() {
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{:#?}", report.failures());
        assert!(report.groups.iter().any(|g| g.group == "model.entity_emb"));
    }

    #[test]
    fn sabotaged_backward_fails() {
        let report = run_gradcheck(&GradcheckOptions {
            perturb_backward: true,
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert!(!report.passed());
    }
}
