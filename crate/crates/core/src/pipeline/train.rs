//! The toy training loop.
//!
//! A scene's queries are its ground-truth part regions: each query input is
//! the mean feature of one region and its semantic embedding is `W x̄`.
//! Query masks come from a two-parameter head over feature cosine
//! similarity. Hungarian assignment pairs one query with every object;
//! matched queries carry the mask and match losses, unmatched ones feed the
//! spatial graph, and the best query of every class feeds the channel graph.
//!
//! Randomness: one generator seeded with `config.seed` first draws the seed
//! of the channel projection, then one permutation of the training scenes
//! per epoch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{build_assignment_cost, hungarian, MaskCostParams};
use crate::error::{Error, Result};
use crate::graphs::{
    build_channel_visual_graph, build_linguistic_graph, build_spatial_visual_graph,
    derive_supervision_mask, match_class_subgraphs, GraphMode, KnowledgeBase, LinguisticGraph,
    MatchStrategy, MatchedQuery, ModifierKind, NodeMatch, NodeOrigin, ProjectionWeights,
    VisualGraph,
};
use crate::losses::{
    classification_match_loss, dice_loss, focal_loss, graph_matching_loss, total_loss, Reduction,
};
use crate::pipeline::benchmark::ToyScene;
use crate::sinkhorn::SinkhornParams;
use crate::tensor::{
    cosine_similarity, sigmoid, softmax_with_temperature, EmbeddingSet, Matrix, Vector,
};

fn default_k() -> usize {
    3
}
fn default_r() -> usize {
    4
}
fn default_weight() -> f64 {
    2.0
}
fn default_tau() -> f64 {
    0.01
}
fn default_m() -> usize {
    10
}
fn default_epsilon() -> f64 {
    crate::sinkhorn::DEFAULT_EPSILON
}
fn default_max_iter() -> usize {
    crate::sinkhorn::DEFAULT_MAX_ITER
}
fn default_tol() -> f64 {
    crate::sinkhorn::DEFAULT_TOL
}
fn default_lr() -> f64 {
    0.05
}
fn default_steps() -> usize {
    200
}
fn default_true() -> bool {
    true
}
fn default_batch() -> usize {
    8
}
fn default_queries() -> usize {
    100
}
fn default_dim() -> usize {
    256
}

/// Hyperparameters of one training run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Spatial subgraph size per class (the representative plus `k - 1`).
    #[serde(default = "default_k")]
    pub k: usize,
    /// Channel groups per matched query.
    #[serde(rename = "R", default = "default_r")]
    pub r: usize,
    #[serde(default = "default_weight")]
    pub alpha: f64,
    #[serde(default = "default_weight")]
    pub beta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Temperature of the graph similarity `σ(cos/τ)`; `tau` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_tau: Option<f64>,
    /// Modifiers kept per class in the linguistic graphs.
    #[serde(rename = "M", default = "default_m")]
    pub m: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: GraphMode,
    #[serde(default = "default_true")]
    pub enable_sp: bool,
    #[serde(default = "default_true")]
    pub enable_cs: bool,
    #[serde(default = "default_true")]
    pub enable_sinkhorn: bool,
    /// Reduction of the two graph losses.
    #[serde(default)]
    pub reduction: Reduction,
    /// Scenes per gradient step.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Query budget per scene.
    #[serde(default = "default_queries")]
    pub queries: usize,
    /// Expected feature and embedding dimension.
    #[serde(default = "default_dim")]
    pub dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

fn field_error(field: &str, message: impl std::fmt::Display) -> Error {
    Error::Validation(format!("config field `{field}`: {message}"))
}

impl TrainConfig {
    /// Parses a JSON document; unknown or mistyped fields are errors.
    pub fn from_json(text: &str, origin: &std::path::Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(origin, &e))
    }

    pub fn sp_active(&self) -> bool {
        self.enable_sp && self.alpha != 0.0
    }

    pub fn cs_active(&self) -> bool {
        self.enable_cs && self.beta != 0.0
    }

    pub fn graph_temperature(&self) -> f64 {
        self.graph_tau.unwrap_or(self.tau)
    }

    pub fn strategy(&self) -> MatchStrategy {
        if self.enable_sinkhorn {
            MatchStrategy::Sinkhorn(SinkhornParams {
                epsilon: self.epsilon,
                max_iter: self.max_iter,
                tol: self.tol,
            })
        } else {
            MatchStrategy::RawArgmax
        }
    }

    /// Checks the config on its own and against the knowledge base.
    pub fn validate(&self, kb: &KnowledgeBase) -> Result<()> {
        if self.k < 2 {
            return Err(field_error(
                "k",
                format!("must be at least 2, got {}", self.k),
            ));
        }
        if self.dim != kb.dim() {
            return Err(field_error(
                "dim",
                format!(
                    "{} does not match the knowledge-base dimension {}",
                    self.dim,
                    kb.dim()
                ),
            ));
        }
        if self.r == 0 || !self.dim.is_multiple_of(self.r) {
            return Err(field_error(
                "R",
                format!("{} must divide the dimension {}", self.r, self.dim),
            ));
        }
        for kind in [ModifierKind::Part, ModifierKind::State] {
            let n = kb.relation(kind).modifiers.len();
            if self.m == 0 || self.m > n {
                return Err(field_error(
                    "M",
                    format!("{} must lie in 1..={n} ({kind} vocabulary)", self.m),
                ));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(field_error(
                    name,
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        for (name, v) in [
            ("tau", self.tau),
            ("graph_tau", self.graph_temperature()),
            ("epsilon", self.epsilon),
            ("tol", self.tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field_error(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(field_error(
                "learning_rate",
                format!("must be finite and >= 0, got {}", self.learning_rate),
            ));
        }
        if self.max_iter == 0 {
            return Err(field_error("max_iter", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(field_error("batch_size", "must be positive"));
        }
        if self.queries == 0 {
            return Err(field_error("queries", "must be positive"));
        }
        Ok(())
    }
}

/// Trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Semantic projection `W` (`d × d`): query embedding `q = W x̄`.
    pub semantic: Matrix,
    pub projections: ProjectionWeights,
    pub mask_gain: f64,
    pub mask_bias: f64,
}

impl ModelParams {
    /// Identity semantic projection, fresh graph projections, and a mask
    /// head that thresholds feature similarity at 0.5.
    pub fn init(d: usize, groups: usize, projection_seed: u64) -> Result<Self> {
        Ok(ModelParams {
            semantic: Matrix::identity(d),
            projections: ProjectionWeights::init(d, groups, projection_seed)?,
            mask_gain: 4.0,
            mask_bias: -2.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.semantic.rows()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vector> {
        self.semantic.matvec(x)
    }

    fn is_finite(&self) -> bool {
        self.semantic.is_finite()
            && self.projections.spatial.is_finite()
            && self.projections.channel.is_finite()
            && self.mask_gain.is_finite()
            && self.mask_bias.is_finite()
    }
}

/// One training-log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_mask: f64,
    pub l_match: f64,
    pub l_sp: f64,
    pub l_cs: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,l_mask,l_match,l_sp,l_cs,total";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.l_mask, r.l_match, r.l_sp, r.l_cs, r.total
        ));
    }
    out
}

/// Accumulated per-class matching statistics of one graph branch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BranchStats {
    /// Class subgraph matches performed.
    pub class_matches: usize,
    /// Sum over those matches of the number of distinct linguistic nodes hit.
    pub distinct_total: usize,
    pub max_marginal_error: f64,
    pub marginal_error_total: f64,
    pub plans: usize,
    pub unconverged: usize,
}

impl BranchStats {
    fn record(&mut self, m: &crate::graphs::ClassMatch) {
        if m.is_empty() {
            return;
        }
        self.class_matches += 1;
        self.distinct_total += m.distinct_linguistic();
        if let Some(e) = m.marginal_error {
            self.plans += 1;
            self.marginal_error_total += e;
            self.max_marginal_error = self.max_marginal_error.max(e);
            if !m.converged {
                self.unconverged += 1;
            }
        }
    }

    /// Mean distinct linguistic nodes per class match (0 when none).
    pub fn mean_distinct(&self) -> f64 {
        if self.class_matches == 0 {
            0.0
        } else {
            self.distinct_total as f64 / self.class_matches as f64
        }
    }

    pub fn mean_marginal_error(&self) -> Option<f64> {
        (self.plans > 0).then(|| self.marginal_error_total / self.plans as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub spatial: BranchStats,
    pub channel: BranchStats,
    /// Classes present in the part / state linguistic graphs.
    pub part_graph_classes: Vec<usize>,
    pub state_graph_classes: Vec<usize>,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub diagnostics: TrainDiagnostics,
    #[serde(skip)]
    pub log: Vec<LogRow>,
}

/// Per-scene query data shared by training and its reference checks.
pub(crate) struct SceneQueries {
    /// Mean feature of every part region, objects in order.
    pub inputs: Vec<Vector>,
    /// `cos(x_cell, x̄_r)` per query `r`, per cell.
    pub cell_cos: Vec<Vec<f64>>,
    pub gt_classes: Vec<usize>,
    pub gt_masks: Vec<Vec<bool>>,
}

pub(crate) fn scene_queries(scene: &ToyScene) -> Result<SceneQueries> {
    let mut inputs = Vec::new();
    for obj in &scene.objects {
        for (_, cells) in &obj.regions {
            let d = scene.features[cells[0]].len();
            let mut mean = vec![0.0; d];
            for &c in cells {
                for (m, x) in mean.iter_mut().zip(&scene.features[c]) {
                    *m += x;
                }
            }
            let n = cells.len() as f64;
            inputs.push(Vector::new(mean.into_iter().map(|m| m / n).collect())?);
        }
    }
    let cells: Vec<Vector> = scene
        .features
        .iter()
        .map(|f| Vector::new(f.clone()))
        .collect::<Result<_>>()?;
    let cell_cos = inputs
        .iter()
        .map(|q| {
            cells
                .iter()
                .map(|x| cosine_similarity(x, q))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let gt_masks = scene
        .objects
        .iter()
        .map(|o| {
            let mut m = vec![false; scene.cells()];
            for c in o.cells() {
                m[c] = true;
            }
            m
        })
        .collect();
    Ok(SceneQueries {
        inputs,
        cell_cos,
        gt_classes: scene.objects.iter().map(|o| o.class).collect(),
        gt_masks,
    })
}

/// Training class set: "no object" followed by the seen classes.
pub(crate) fn training_classes(kb: &KnowledgeBase) -> EmbeddingSet {
    let t = kb.text_embeddings();
    EmbeddingSet::new(t.as_slice()[..=kb.num_seen()].to_vec()).expect("uniform dimension")
}

/// Gradients of one step.
struct Grads {
    semantic: Matrix,
    spatial: Matrix,
    channel: Matrix,
    gain: f64,
    bias: f64,
}

impl Grads {
    fn zeros(p: &ModelParams) -> Self {
        Grads {
            semantic: Matrix::zeros(p.dim(), p.dim()),
            spatial: Matrix::zeros(p.dim(), p.dim()),
            channel: Matrix::zeros(p.dim(), p.projections.channel.cols()),
            gain: 0.0,
            bias: 0.0,
        }
    }
}

/// Matched and unmatched queries of one scene, with the region features
/// they were projected from.
#[derive(Default)]
pub(crate) struct SceneMatches {
    pub matched: Vec<MatchedQuery>,
    pub matched_inputs: Vec<Vector>,
    pub unmatched: Vec<Vector>,
    pub unmatched_inputs: Vec<Vector>,
}

/// The baseline part of one step: mask and match losses (averaged over
/// matched pairs) plus the per-scene query split for the graph branches.
pub(crate) struct BaseStep {
    pub l_mask: f64,
    pub l_match: f64,
    pub scenes: Vec<SceneMatches>,
}

fn base_step(
    params: &ModelParams,
    scenes: &[&ToyScene],
    classes: &EmbeddingSet,
    config: &TrainConfig,
    grads: &mut Grads,
) -> Result<BaseStep> {
    let mask_params = MaskCostParams::default();
    let mut out = BaseStep {
        l_mask: 0.0,
        l_match: 0.0,
        scenes: Vec::with_capacity(scenes.len()),
    };
    let mut d_semantic = Matrix::zeros(params.dim(), params.dim());
    let (mut d_gain, mut d_bias) = (0.0, 0.0);
    let mut pairs = 0usize;
    for scene in scenes {
        let sq = scene_queries(scene)?;
        if sq.inputs.len() > config.queries {
            return Err(Error::Validation(format!(
                "scene has {} part regions but the query budget is {}",
                sq.inputs.len(),
                config.queries
            )));
        }
        let embeddings: Vec<Vector> = sq
            .inputs
            .iter()
            .map(|x| params.project(x.as_slice()))
            .collect::<Result<_>>()?;
        let mut probs = Matrix::zeros(embeddings.len(), classes.len());
        for (r, q) in embeddings.iter().enumerate() {
            let logits = classes
                .iter()
                .map(|t| cosine_similarity(q, t))
                .collect::<Result<Vec<f64>>>()?;
            let p = softmax_with_temperature(&Vector::new(logits)?, config.tau)?;
            for (c, v) in p.as_slice().iter().enumerate() {
                probs.set(r, c, *v);
            }
        }
        let masks: Vec<Vec<f64>> = sq
            .cell_cos
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| sigmoid(params.mask_gain * c + params.mask_bias))
                    .collect()
            })
            .collect();
        let targets: Vec<usize> = sq.gt_classes.iter().map(|c| c + 1).collect();
        let cost = build_assignment_cost(&probs, &masks, &targets, &sq.gt_masks, &mask_params)?;
        let assignment = hungarian(&cost)?;
        let mut split = SceneMatches::default();

        for &(r, g) in &assignment.pairs {
            pairs += 1;
            let dice = dice_loss(&masks[r], &sq.gt_masks[g], mask_params.dice_smooth)?;
            let focal = focal_loss(
                &masks[r],
                &sq.gt_masks[g],
                mask_params.focal_gamma,
                mask_params.focal_alpha,
            )?;
            out.l_mask += dice.value + focal.value;
            for (i, p) in masks[r].iter().enumerate() {
                let dp = dice.gradients[0].as_slice()[i] + focal.gradients[0].as_slice()[i];
                let dz = dp * p * (1.0 - p);
                d_gain += dz * sq.cell_cos[r][i];
                d_bias += dz;
            }
            let m = classification_match_loss(&embeddings[r], classes, targets[g], config.tau)?;
            out.l_match += m.value;
            d_semantic.add_outer(1.0, m.gradients[0].as_slice(), sq.inputs[r].as_slice())?;
            split.matched.push(MatchedQuery {
                embedding: embeddings[r].clone(),
                class: sq.gt_classes[g],
                score: probs.get(r, targets[g]),
            });
            split.matched_inputs.push(sq.inputs[r].clone());
        }
        for &r in &assignment.unmatched_queries {
            split.unmatched.push(embeddings[r].clone());
            split.unmatched_inputs.push(sq.inputs[r].clone());
        }
        out.scenes.push(split);
    }
    let scale = 1.0 / pairs.max(1) as f64;
    out.l_mask *= scale;
    out.l_match *= scale;
    grads.semantic.add_scaled(scale, &d_semantic)?;
    grads.gain += scale * d_gain;
    grads.bias += scale * d_bias;
    Ok(out)
}

/// Matches every class subgraph, derives supervision, and returns the graph
/// loss with the gradient of every visual node that received supervision.
fn graph_branch(
    vgraph: &VisualGraph,
    lgraph: &LinguisticGraph,
    config: &TrainConfig,
    stats: &mut BranchStats,
) -> Result<(f64, Vec<(usize, Vector)>)> {
    let strategy = config.strategy();
    let mut node_ids = Vec::new();
    let mut node_matches = Vec::new();
    for class in vgraph.classes() {
        let m = match_class_subgraphs(vgraph, lgraph, class, &strategy)?;
        stats.record(&m);
        if m.marginal_error.is_some() && !m.converged {
            log::warn!("transport plan for class {class} did not converge");
        }
        for (&v, &l) in m.visual.iter().zip(&m.linguistic) {
            node_ids.push(v);
            node_matches.push(NodeMatch {
                modifier: lgraph.nodes[l].modifier,
                visual_class: class,
            });
        }
    }
    if node_ids.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let labels = derive_supervision_mask(&node_matches, lgraph);
    let nodes: Vec<Vector> = node_ids
        .iter()
        .map(|&i| vgraph.nodes[i].embedding.clone())
        .collect();
    let loss = graph_matching_loss(
        &nodes,
        &lgraph.embeddings(),
        &labels,
        config.graph_temperature(),
        config.reduction,
    )?;
    Ok((
        loss.value,
        node_ids.into_iter().zip(loss.gradients).collect(),
    ))
}

/// Backpropagates node gradients through the graph projection into the
/// projection and the semantic projection.
fn backprop_nodes(
    vgraph: &VisualGraph,
    node_grads: &[(usize, Vector)],
    projection: &Matrix,
    weight: f64,
    scene: &SceneMatches,
    d_projection: &mut Matrix,
    d_semantic: &mut Matrix,
) -> Result<()> {
    let d = d_semantic.rows();
    for (id, g) in node_grads {
        let node = &vgraph.nodes[*id];
        d_projection.add_outer(weight, g.as_slice(), node.input.as_slice())?;
        let d_input = projection.matvec_transposed(g.as_slice())?;
        match node.origin {
            NodeOrigin::Query(u) => {
                d_semantic.add_outer(
                    weight,
                    d_input.as_slice(),
                    scene.unmatched_inputs[u].as_slice(),
                )?;
            }
            NodeOrigin::ChannelGroup { query, group } => {
                let width = d_input.dim();
                let mut dq = vec![0.0; d];
                dq[group * width..(group + 1) * width].copy_from_slice(d_input.as_slice());
                d_semantic.add_outer(weight, &dq, scene.matched_inputs[query].as_slice())?;
            }
        }
    }
    Ok(())
}

/// Runs `config.steps` gradient-descent steps over the training scenes.
pub fn train(
    config: &TrainConfig,
    scenes: &[ToyScene],
    kb: &KnowledgeBase,
) -> Result<TrainedModel> {
    config.validate(kb)?;
    if scenes.is_empty() {
        return Err(Error::Validation(
            "training needs at least one scene".into(),
        ));
    }
    if let Some(bad) = scenes
        .iter()
        .position(|s| s.features.iter().any(|f| f.len() != config.dim))
    {
        return Err(Error::shape(format!(
            "training scene {bad} has features of a dimension other than {}",
            config.dim
        )));
    }
    if let Some(bad) = scenes
        .iter()
        .position(|s| s.objects.iter().any(|o| !kb.is_seen(o.class)))
    {
        return Err(Error::Validation(format!(
            "training scene {bad} contains an unseen class"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let projection_seed: u64 = rng.random();
    let mut params = ModelParams::init(config.dim, config.r, projection_seed)?;
    let classes = training_classes(kb);
    let part_graph = build_linguistic_graph(kb, ModifierKind::Part, config.m, config.mode)?;
    let state_graph = build_linguistic_graph(kb, ModifierKind::State, config.m, config.mode)?;
    let mut diagnostics = TrainDiagnostics {
        part_graph_classes: part_graph.classes.clone(),
        state_graph_classes: state_graph.classes.clone(),
        ..TrainDiagnostics::default()
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(scenes.len()) {
            if cursor == order.len() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&scenes[order[cursor]]);
            cursor += 1;
        }

        let mut step_body = || -> Result<(LogRow, Grads)> {
            let mut grads = Grads::zeros(&params);
            let base = base_step(&params, &batch, &classes, config, &mut grads)?;
            let (mut l_sp, mut l_cs) = (0.0, 0.0);
            let per_scene = 1.0 / batch.len() as f64;
            for scene in base.scenes.iter().filter(|s| !s.matched.is_empty()) {
                if config.sp_active() {
                    let vgraph = build_spatial_visual_graph(
                        &scene.matched,
                        &scene.unmatched,
                        config.k,
                        &params.projections,
                    )?;
                    let (value, node_grads) =
                        graph_branch(&vgraph, &part_graph, config, &mut diagnostics.spatial)?;
                    l_sp += per_scene * value;
                    backprop_nodes(
                        &vgraph,
                        &node_grads,
                        &params.projections.spatial,
                        config.alpha * per_scene,
                        scene,
                        &mut grads.spatial,
                        &mut grads.semantic,
                    )?;
                }
                if config.cs_active() {
                    let vgraph =
                        build_channel_visual_graph(&scene.matched, config.r, &params.projections)?;
                    let (value, node_grads) =
                        graph_branch(&vgraph, &state_graph, config, &mut diagnostics.channel)?;
                    l_cs += per_scene * value;
                    backprop_nodes(
                        &vgraph,
                        &node_grads,
                        &params.projections.channel,
                        config.beta * per_scene,
                        scene,
                        &mut grads.channel,
                        &mut grads.semantic,
                    )?;
                }
            }
            let total = total_loss(
                base.l_mask,
                base.l_match,
                l_sp,
                l_cs,
                config.alpha,
                config.beta,
            );
            let row = LogRow {
                step,
                l_mask: base.l_mask,
                l_match: base.l_match,
                l_sp,
                l_cs,
                total,
            };
            if ![row.l_mask, row.l_match, row.l_sp, row.l_cs, row.total]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(Error::NonFinite(format!(
                    "step {step}: l_mask={} l_match={} l_sp={} l_cs={} total={}",
                    row.l_mask, row.l_match, row.l_sp, row.l_cs, row.total
                )));
            }
            Ok((row, grads))
        };
        let (row, grads) = step_body().map_err(|e| match e {
            e @ Error::NonFinite(_) => e,
            e => Error::Step {
                step,
                source: Box::new(e),
            },
        })?;
        log::debug!("step {step}: total {:.6}", row.total);
        log.push(row);

        let lr = config.learning_rate;
        params.semantic.add_scaled(-lr, &grads.semantic)?;
        params.projections.spatial.add_scaled(-lr, &grads.spatial)?;
        params.projections.channel.add_scaled(-lr, &grads.channel)?;
        params.mask_gain -= lr * grads.gain;
        params.mask_bias -= lr * grads.bias;
        if !params.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {step}: parameters diverged after the update"
            )));
        }
    }

    Ok(TrainedModel {
        config: config.clone(),
        params,
        diagnostics,
        log,
    })
}
