//! The scorer: embeddings, a feature network over `h‖r`, a project network
//! over tail embeddings and a dot-product score against every entity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    Activation, BatchNormLayer, DeepEBlock, Dropout, Mode, Param, ParamVisitor, ResNetBlock,
    TensorVisitor, TensorVisitorMut,
};
use crate::numkernel::{matmul, matmul_nt, matmul_tn, xavier_normal_init, Matrix, Rng, Scalar};

/// Dropout probabilities: input and DeepE FC layers, identity shortcut,
/// and FC layers of the project network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub p_input: f64,
    pub p_fc: f64,
    pub p_identity: f64,
    pub p_resnet_fc: f64,
}

impl DropoutSpec {
    pub const NONE: DropoutSpec = DropoutSpec {
        p_input: 0.0,
        p_fc: 0.0,
        p_identity: 0.0,
        p_resnet_fc: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("drop_input_fc", self.p_input),
            ("drop_fc", self.p_fc),
            ("drop_identity", self.p_identity),
            ("drop_resnet_fc", self.p_resnet_fc),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} must lie in [0, 1)")));
            }
        }
        if self.p_identity >= 0.5 {
            log::warn!(
                "identity dropout {} is large; shortcut signal will be heavily suppressed",
                self.p_identity
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureBlockKind {
    #[default]
    DeepE,
    ResNet,
}

impl std::str::FromStr for FeatureBlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepe" => Ok(Self::DeepE),
            "resnet" => Ok(Self::ResNet),
            other => Err(Error::Config(format!("unknown feature block kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for FeatureBlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DeepE => "deepe",
            Self::ResNet => "resnet",
        })
    }
}

/// Inner layers used when residual blocks stand in for the feature network;
/// matches the two linear layers of a DeepE block.
pub const RESNET_FEATURE_INNER: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_deepe_blocks: usize,
    pub n_resnet_blocks: usize,
    pub resnet_inner_layers: usize,
    pub dropout: DropoutSpec,
    #[serde(default)]
    pub feature_block_kind: FeatureBlockKind,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 200,
            n_deepe_blocks: 1,
            n_resnet_blocks: 1,
            resnet_inner_layers: 2,
            dropout: DropoutSpec {
                p_input: 0.4,
                p_fc: 0.4,
                p_identity: 0.0,
                p_resnet_fc: 0.0,
            },
            feature_block_kind: FeatureBlockKind::DeepE,
            bn_momentum: crate::layers::BN_MOMENTUM,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if self.n_deepe_blocks == 0 {
            return Err(Error::Config(
                "deepe_blocks must be at least 1: the first block projects 2d to d".into(),
            ));
        }
        if self.n_resnet_blocks > 2 {
            return Err(Error::Config(format!(
                "resnet_blocks={} exceeds the supported maximum of 2",
                self.n_resnet_blocks
            )));
        }
        if self.n_resnet_blocks > 0 && self.resnet_inner_layers == 0 {
            return Err(Error::Config("resnet_inner must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum={} outside [0, 1]", self.bn_momentum)));
        }
        self.dropout.validate()
    }
}

#[derive(Debug, Clone)]
pub enum FeatureBlock<T> {
    DeepE(DeepEBlock<T>),
    ResNet(ResNetBlock<T>),
}

impl<T: Scalar> FeatureBlock<T> {
    fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<Matrix<T>> {
        match self {
            Self::DeepE(b) => b.forward(x, mode),
            Self::ResNet(b) => b.forward(x, mode),
        }
    }

    fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Self::DeepE(b) => b.infer(x),
            Self::ResNet(b) => b.infer(x),
        }
    }

    fn backward(&mut self, g: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Self::DeepE(b) => b.backward(g),
            Self::ResNet(b) => b.backward(g),
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        match self {
            Self::DeepE(b) => b.set_mode(mode),
            Self::ResNet(b) => b.set_mode(mode),
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Self::DeepE(b) => b.clear_cache(),
            Self::ResNet(b) => b.clear_cache(),
        }
    }

    fn set_activation(&mut self, act: Activation) {
        match self {
            Self::DeepE(b) => b.activation = act,
            Self::ResNet(b) => b.activation = act,
        }
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        match self {
            Self::DeepE(b) => b.visit_params(prefix, f),
            Self::ResNet(b) => b.visit_params(prefix, f),
        }
    }

    fn visit_tensors(&self, prefix: &str, f: &mut TensorVisitor<'_, T>) {
        match self {
            Self::DeepE(b) => b.visit_tensors(prefix, f),
            Self::ResNet(b) => b.visit_tensors(prefix, f),
        }
    }

    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, T>) {
        match self {
            Self::DeepE(b) => b.visit_tensors_mut(prefix, f),
            Self::ResNet(b) => b.visit_tensors_mut(prefix, f),
        }
    }
}

#[derive(Debug, Clone)]
struct ForwardCache<T> {
    heads: Vec<usize>,
    relations: Vec<usize>,
    features: Matrix<T>,
    projected: Matrix<T>,
}

/// Every learnable tensor plus the batch-norm buffers.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    n_entities: usize,
    n_relations: usize,
    pub entity_emb: Param<T>,
    pub relation_emb: Param<T>,
    pub input_bn: BatchNormLayer<T>,
    pub input_drop: Dropout<T>,
    pub feature_blocks: Vec<FeatureBlock<T>>,
    pub project_blocks: Vec<ResNetBlock<T>>,
    mode: Mode,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> Model<T> {
    /// `n_relations` counts original relations; reverse relations get their
    /// own rows at `id + n_relations`.
    pub fn new(config: ModelConfig, n_entities: usize, n_relations: usize) -> Result<Self> {
        config.validate()?;
        if n_entities == 0 || n_relations == 0 {
            return Err(Error::Config("model needs at least one entity and one relation".into()));
        }
        let d = config.dim;
        let root = Rng::new(config.seed);
        let mut emb_rng = root.split(0);
        let entity_emb = Param::new(xavier_normal_init(n_entities, d, &mut emb_rng));
        let relation_emb = Param::new(xavier_normal_init(2 * n_relations, d, &mut emb_rng));
        let mom = config.bn_momentum;
        let drop = config.dropout;

        let feature_blocks = (0..config.n_deepe_blocks)
            .map(|i| {
                let mut rng = root.split(100 + i as u64);
                let in_dim = if i == 0 { 2 * d } else { d };
                match config.feature_block_kind {
                    FeatureBlockKind::DeepE => FeatureBlock::DeepE(DeepEBlock::new(
                        in_dim,
                        d,
                        drop.p_fc,
                        drop.p_identity,
                        mom,
                        &mut rng,
                    )),
                    FeatureBlockKind::ResNet => FeatureBlock::ResNet(ResNetBlock::new(
                        in_dim,
                        d,
                        RESNET_FEATURE_INNER,
                        drop.p_fc,
                        mom,
                        &mut rng,
                    )),
                }
            })
            .collect();
        let project_blocks = (0..config.n_resnet_blocks)
            .map(|j| {
                let mut rng = root.split(1000 + j as u64);
                ResNetBlock::new(d, d, config.resnet_inner_layers, drop.p_resnet_fc, mom, &mut rng)
            })
            .collect();

        let mut model = Self {
            n_entities,
            n_relations,
            entity_emb,
            relation_emb,
            input_bn: BatchNormLayer::with_momentum(2 * d, mom),
            input_drop: Dropout::new(drop.p_input, root.split(1)),
            feature_blocks,
            project_blocks,
            mode: Mode::Train,
            cache: None,
            config,
        };
        model.set_mode(Mode::Train);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    /// Number of original (non-reverse) relations.
    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.input_bn.set_mode(mode);
        self.feature_blocks.iter_mut().for_each(|b| b.set_mode(mode));
        self.project_blocks.iter_mut().for_each(|b| b.set_mode(mode));
    }

    /// Enables or disables the identity and non-linear branch of every DeepE
    /// feature block.
    pub fn set_gates(&mut self, linear: bool, nonlinear: bool) {
        for b in &mut self.feature_blocks {
            if let FeatureBlock::DeepE(b) = b {
                b.gate_linear = linear;
                b.gate_nonlinear = nonlinear;
            }
        }
    }

    /// `(linear, nonlinear)` gates of the DeepE feature blocks.
    pub fn gates(&self) -> (bool, bool) {
        self.feature_blocks
            .iter()
            .find_map(|b| match b {
                FeatureBlock::DeepE(b) => Some((b.gate_linear, b.gate_nonlinear)),
                FeatureBlock::ResNet(_) => None,
            })
            .unwrap_or((true, true))
    }

    pub fn set_activation(&mut self, act: Activation) {
        self.feature_blocks.iter_mut().for_each(|b| b.set_activation(act));
        self.project_blocks.iter_mut().for_each(|b| b.activation = act);
    }

    /// Replaces the project network with the identity map.
    pub fn drop_project_network(&mut self) {
        self.project_blocks.clear();
        self.config.n_resnet_blocks = 0;
    }

    pub fn set_identity_dropout(&mut self, p: f64) {
        for b in &mut self.feature_blocks {
            if let FeatureBlock::DeepE(b) = b {
                b.drop_identity.set_p(p);
            }
        }
        self.config.dropout.p_identity = p;
    }

    fn check_ids(&self, heads: &[usize], relations: &[usize]) -> Result<()> {
        if heads.len() != relations.len() {
            return Err(Error::shape("query ids", (heads.len(), 1), (relations.len(), 1)));
        }
        if let Some(&id) = heads.iter().find(|&&h| h >= self.n_entities) {
            return Err(Error::IdOutOfRange {
                kind: "entity",
                id,
                bound: self.n_entities,
            });
        }
        let bound = 2 * self.n_relations;
        if let Some(&id) = relations.iter().find(|&&r| r >= bound) {
            return Err(Error::IdOutOfRange {
                kind: "relation",
                id,
                bound,
            });
        }
        Ok(())
    }

    fn input(&self, heads: &[usize], relations: &[usize]) -> Result<Matrix<T>> {
        self.check_ids(heads, relations)?;
        let h = self.entity_emb.value.gather_rows(heads)?;
        let r = self.relation_emb.value.gather_rows(relations)?;
        Matrix::hconcat(&h, &r)
    }

    /// Feature vectors `v` for a batch of `(head, relation)` queries.
    pub fn feature_forward(
        &mut self,
        heads: &[usize],
        relations: &[usize],
        mode: Mode,
    ) -> Result<Matrix<T>> {
        let x = self.input(heads, relations)?;
        let x = self.input_bn.forward(&x, mode)?;
        let mut h = self.input_drop.forward(x, mode);
        for b in &mut self.feature_blocks {
            h = b.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Projected tail representations `t'` for every entity.
    pub fn project_forward(&mut self, mode: Mode) -> Result<Matrix<T>> {
        let mut t = self.entity_emb.value.clone();
        for b in &mut self.project_blocks {
            t = b.forward(&t, mode)?;
        }
        Ok(t)
    }

    /// Scores of every entity as the tail of each query: batch × |E|.
    pub fn score_all(&mut self, heads: &[usize], relations: &[usize], mode: Mode) -> Result<Matrix<T>> {
        let features = self.feature_forward(heads, relations, mode)?;
        let projected = self.project_forward(mode)?;
        let scores = matmul_nt(&features, &projected)?;
        self.cache = Some(ForwardCache {
            heads: heads.to_vec(),
            relations: relations.to_vec(),
            features,
            projected,
        });
        Ok(scores)
    }

    /// Accumulates gradients of every parameter given `dL/dscores` from the
    /// last [`Model::score_all`] call.
    pub fn backward(&mut self, d_scores: &Matrix<T>) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::MissingCache("model"))?;
        let expect = (cache.heads.len(), self.n_entities);
        if d_scores.shape() != expect {
            return Err(Error::shape("model backward", d_scores.shape(), expect));
        }
        let d_features = matmul(d_scores, &cache.projected)?;
        let mut d_projected = matmul_tn(d_scores, &cache.features)?;

        for b in self.project_blocks.iter_mut().rev() {
            d_projected = b.backward(&d_projected)?;
        }
        self.entity_emb.grad.add_assign(&d_projected)?;

        let mut g = d_features;
        for b in self.feature_blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let g = self.input_drop.backward(g)?;
        let g = self.input_bn.backward(&g)?;
        let (d_heads, d_relations) = g.hsplit(self.config.dim)?;
        self.entity_emb.grad.scatter_add_rows(&cache.heads, &d_heads)?;
        self.relation_emb
            .grad
            .scatter_add_rows(&cache.relations, &d_relations)?;
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        self.input_bn.clear_cache();
        self.input_drop.clear_cache();
        self.feature_blocks.iter_mut().for_each(FeatureBlock::clear_cache);
        self.project_blocks.iter_mut().for_each(ResNetBlock::clear_cache);
    }

    /// Eval-mode features without caching; safe to call concurrently.
    pub fn infer_features(&self, heads: &[usize], relations: &[usize]) -> Result<Matrix<T>> {
        let x = self.input(heads, relations)?;
        let mut h = self.input_bn.infer(&x)?;
        for b in &self.feature_blocks {
            h = b.infer(&h)?;
        }
        Ok(h)
    }

    /// Eval-mode `t'` for every entity.
    pub fn infer_projected(&self) -> Result<Matrix<T>> {
        let mut t = self.entity_emb.value.clone();
        for b in &self.project_blocks {
            t = b.infer(&t)?;
        }
        Ok(t)
    }

    /// Eval-mode scores against precomputed `t'`.
    pub fn infer_scores(
        &self,
        projected: &Matrix<T>,
        heads: &[usize],
        relations: &[usize],
    ) -> Result<Matrix<T>> {
        matmul_nt(&self.infer_features(heads, relations)?, projected)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Visits learnable parameters in a fixed order.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        f("entity_emb", &mut self.entity_emb);
        f("relation_emb", &mut self.relation_emb);
        self.input_bn.visit_params("input_bn", f);
        for (i, b) in self.feature_blocks.iter_mut().enumerate() {
            b.visit_params(&format!("feature.{i}"), f);
        }
        for (j, b) in self.project_blocks.iter_mut().enumerate() {
            b.visit_params(&format!("project.{j}"), f);
        }
    }

    /// Visits every persisted tensor (parameters and batch-norm buffers).
    pub fn visit_tensors(&self, f: &mut TensorVisitor<'_, T>) {
        f("entity_emb", &self.entity_emb.value);
        f("relation_emb", &self.relation_emb.value);
        self.input_bn.visit_tensors("input_bn", f);
        for (i, b) in self.feature_blocks.iter().enumerate() {
            b.visit_tensors(&format!("feature.{i}"), f);
        }
        for (j, b) in self.project_blocks.iter().enumerate() {
            b.visit_tensors(&format!("project.{j}"), f);
        }
    }

    pub fn visit_tensors_mut(&mut self, f: &mut TensorVisitorMut<'_, T>) {
        f("entity_emb", &mut self.entity_emb.value);
        f("relation_emb", &mut self.relation_emb.value);
        self.input_bn.visit_tensors_mut("input_bn", f);
        for (i, b) in self.feature_blocks.iter_mut().enumerate() {
            b.visit_tensors_mut(&format!("feature.{i}"), f);
        }
        for (j, b) in self.project_blocks.iter_mut().enumerate() {
            b.visit_tensors_mut(&format!("project.{j}"), f);
        }
    }

    pub fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn parameter_count_audit(&mut self) -> ParameterAudit {
        let mut embedding = 0;
        let mut input_norm = 0;
        let mut feature = 0;
        let mut project = 0;
        self.visit_params(&mut |name, p| {
            let n = p.value.len();
            if name.ends_with("_emb") {
                embedding += n;
            } else if name.starts_with("input_bn") {
                input_norm += n;
            } else if name.starts_with("feature") {
                feature += n;
            } else {
                project += n;
            }
        });
        let closed_form = closed_form_params(&self.config, self.n_entities, self.n_relations);
        ParameterAudit {
            embedding_params: embedding,
            input_norm_params: input_norm,
            feature_params: feature,
            project_params: project,
            total: embedding + input_norm + feature + project,
            closed_form,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParameterAudit {
    pub embedding_params: usize,
    pub input_norm_params: usize,
    pub feature_params: usize,
    pub project_params: usize,
    /// Enumerated count of every learnable scalar.
    pub total: usize,
    pub closed_form: ClosedFormCount,
}

impl ParameterAudit {
    pub fn block_params(&self) -> usize {
        self.feature_params + self.project_params
    }

    pub fn is_consistent(&self) -> bool {
        self.total == self.closed_form.total()
            && self.embedding_params == self.closed_form.embedding
    }
}

/// Parameter count derived from the architecture alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClosedFormCount {
    /// `|E|·d + 2|R|·d`
    pub embedding: usize,
    /// Weight matrices only: `2kd²` plus the first block's extra `2d²`
    /// (its 2d-wide input and `Ws`), plus the project network's matrices.
    pub weight_matrices: usize,
    /// Biases, batch-norm scales and shifts.
    pub vectors: usize,
}

impl ClosedFormCount {
    pub fn total(&self) -> usize {
        self.embedding + self.weight_matrices + self.vectors
    }
}

pub fn closed_form_params(config: &ModelConfig, n_entities: usize, n_relations: usize) -> ClosedFormCount {
    let d = config.dim;
    let k = config.n_deepe_blocks;
    let embedding = n_entities * d + 2 * n_relations * d;
    let (mut weights, mut vectors) = (0, 2 * (2 * d));
    match config.feature_block_kind {
        FeatureBlockKind::DeepE => {
            // first block: Ws (2d→d), fc1 (2d→d), fc2 (d→d)
            weights += 2 * d * d + 2 * d * d + d * d + (k - 1) * 2 * d * d;
            // per block: two biases and two batch norms
            vectors += k * (2 * d + 4 * d) + d;
        }
        FeatureBlockKind::ResNet => {
            let inner = RESNET_FEATURE_INNER;
            weights += 2 * d * d + 2 * d * d + (inner - 1) * d * d + (k - 1) * inner * d * d;
            vectors += k * inner * 3 * d + d;
        }
    }
    let t = config.n_resnet_blocks;
    let inner = config.resnet_inner_layers;
    weights += t * inner * d * d;
    vectors += t * inner * 3 * d;
    ClosedFormCount {
        embedding,
        weight_matrices: weights,
        vectors,
    }
}
