//! End-to-end model: semantics → retrieval → state-space aggregation →
//! per-branch cross-attention → heads → fusion → loss.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::attention::{mhs_ca_on, pool_spatial, pool_temporal, AttnVars, Branch, Hierarchy};
use super::heads::{head_on, BranchPrediction, MlpParams, MlpVars, ModelOutput};
use crate::error::{Error, Result, Stage, StageExt};
use crate::numerics::gradcheck::{Objective, Probe};
use crate::numerics::{DenseMatrix, ParamStore, Tape, Var};
use crate::retrieval::{build_trajectory_set, TrajectoryKind, TrajectorySet, VisualTokenGrid};
use crate::semantics::{
    build_scene_attribute_tokens, embed_reference, Detection, ReferenceBundle, StopSet,
    SyntheticEncoder, TextEncoder,
};
use crate::ssm::SsmLayerParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyToggles {
    pub holistic: bool,
    pub keyword: bool,
    pub attribute: bool,
}

impl Default for HierarchyToggles {
    fn default() -> Self {
        Self {
            holistic: true,
            keyword: true,
            attribute: true,
        }
    }
}

impl HierarchyToggles {
    pub fn enabled(&self, h: Hierarchy) -> bool {
        match h {
            Hierarchy::Holistic => self.holistic,
            Hierarchy::Keyword => self.keyword,
            Hierarchy::Attribute => self.attribute,
        }
    }

    pub fn without(mut self, h: Hierarchy) -> Self {
        match h {
            Hierarchy::Holistic => self.holistic = false,
            Hierarchy::Keyword => self.keyword = false,
            Hierarchy::Attribute => self.attribute = false,
        }
        self
    }

    pub fn only(h: Hierarchy) -> Self {
        Self {
            holistic: h == Hierarchy::Holistic,
            keyword: h == Hierarchy::Keyword,
            attribute: h == Hierarchy::Attribute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchToggles {
    pub temporal: bool,
    pub spatial: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        Self {
            temporal: true,
            spatial: true,
        }
    }
}

impl BranchToggles {
    pub fn enabled(&self, b: Branch) -> bool {
        match b {
            Branch::Temporal => self.temporal,
            Branch::Spatial => self.spatial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Visual token and text embedding width `d`.
    pub dim: usize,
    /// Projected width inside each state-space layer, `d_s`.
    pub ssm_dim: usize,
    /// Attention width `d_a`.
    pub attn_dim: usize,
    /// State size `n`.
    pub state_dim: usize,
    /// Learnable prompt rows per attention block, `N_p`.
    pub num_prompts: usize,
    pub num_classes: usize,
    pub hierarchies: HierarchyToggles,
    pub branches: BranchToggles,
    pub conf_threshold: f64,
    pub max_detections: usize,
    pub encoder_seed: u64,
    /// Weight of the box loss relative to the classification loss.
    pub bbox_weight: f64,
    /// Also supervise each branch's own predictions.
    pub aux_branch_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            ssm_dim: 16,
            attn_dim: 16,
            state_dim: 16,
            num_prompts: 6,
            num_classes: 10,
            hierarchies: HierarchyToggles::default(),
            branches: BranchToggles::default(),
            conf_threshold: 0.7,
            max_detections: 10,
            encoder_seed: 0,
            bbox_weight: 1.0,
            aux_branch_loss: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("ssm_dim", self.ssm_dim),
            ("attn_dim", self.attn_dim),
            ("state_dim", self.state_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        let h = self.hierarchies;
        if !(h.holistic || h.keyword || h.attribute) {
            return Err(Error::Config("at least one query hierarchy must be enabled".into()));
        }
        if !(self.branches.temporal || self.branches.spatial) {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Config("conf_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn active_branches(&self) -> impl Iterator<Item = Branch> + '_ {
        Branch::ALL.into_iter().filter(|b| self.branches.enabled(*b))
    }

    pub fn active_hierarchies(&self) -> impl Iterator<Item = Hierarchy> + '_ {
        Hierarchy::ALL.into_iter().filter(|h| self.hierarchies.enabled(*h))
    }
}

/// Ground truth for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub bbox: [f64; 4],
    /// Multi-hot, length `N_c`.
    pub labels: Vec<f64>,
}

/// Inputs that do not depend on parameters, computed once per sample.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub grid: VisualTokenGrid,
    pub reference: ReferenceBundle,
    pub detections: Vec<Detection>,
    pub target: Option<Target>,
    pooled_spatial: DenseMatrix,
    pooled_temporal: DenseMatrix,
}

pub(crate) mod names {
    use super::{Branch, Hierarchy};

    pub const SCENE_WEIGHT: &str = "scene.proj.weight";
    pub const SCENE_BIAS: &str = "scene.proj.bias";
    pub const SSM_KEYWORD: &str = "ssm.keyword";
    pub const SSM_ATTRIBUTE: &str = "ssm.attribute";

    pub fn ssm_branch(b: Branch) -> String {
        format!("ssm.{}", b.as_str())
    }

    pub fn attn(b: Branch, h: Hierarchy) -> String {
        format!("attn.{}.{}", b.as_str(), h.as_str())
    }

    pub fn head(b: Branch, kind: &str) -> String {
        format!("head.{}.{kind}", b.as_str())
    }
}

pub struct Model {
    config: ModelConfig,
    encoder: Arc<dyn TextEncoder>,
    stop: StopSet,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).finish_non_exhaustive()
    }
}

struct Built {
    bbox: Var,
    probs: Var,
    branches: Vec<(Branch, Var, Var, Var)>,
    selection: Vec<usize>,
}

impl Model {
    /// Model with the synthetic encoder and the bundled stop-word list.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let encoder = SyntheticEncoder {
            dim: config.dim,
            seed: config.encoder_seed,
        };
        Self::with_adapters(config, Arc::new(encoder), StopSet::default_list())
    }

    pub fn with_adapters(
        config: ModelConfig,
        encoder: Arc<dyn TextEncoder>,
        stop: StopSet,
    ) -> Result<Self> {
        config.validate()?;
        if encoder.dim() != config.dim {
            return Err(Error::Config(format!(
                "encoder dim {} does not match model dim {}",
                encoder.dim(),
                config.dim
            )));
        }
        Ok(Self {
            config,
            encoder,
            stop,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &dyn TextEncoder {
        self.encoder.as_ref()
    }

    /// Parameters for every enabled hierarchy and branch. Each tensor draws
    /// from its own name-seeded stream.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.config;
        let mut store = ParamStore::new(seed);
        if c.hierarchies.attribute {
            store.init_projection(names::SCENE_WEIGHT, c.dim + 4, c.dim)?;
            store.init_zeros(names::SCENE_BIAS, 1, c.dim)?;
            SsmLayerParams::init_in_store(&mut store, names::SSM_ATTRIBUTE, c.dim, c.ssm_dim, c.state_dim)?;
        }
        if c.hierarchies.keyword {
            SsmLayerParams::init_in_store(&mut store, names::SSM_KEYWORD, c.dim, c.ssm_dim, c.state_dim)?;
        }
        for b in c.active_branches() {
            SsmLayerParams::init_in_store(&mut store, &names::ssm_branch(b), c.dim, c.ssm_dim, c.state_dim)?;
            for h in c.active_hierarchies() {
                let prefix = names::attn(b, h);
                let query_dim = if h == Hierarchy::Holistic { c.dim } else { c.ssm_dim };
                store.init_projection(&format!("{prefix}.w_q"), query_dim, c.attn_dim)?;
                store.init_projection(&format!("{prefix}.w_k"), c.ssm_dim, c.attn_dim)?;
                store.init_projection(&format!("{prefix}.w_v"), c.ssm_dim, c.attn_dim)?;
                if c.num_prompts > 0 {
                    let bound = 1.0 / (c.attn_dim as f64).sqrt();
                    store.init_uniform(&format!("{prefix}.prompts"), c.num_prompts, c.attn_dim, bound)?;
                }
            }
            MlpParams::init_in_store(&mut store, &names::head(b, "reg"), c.attn_dim, c.attn_dim, 4)?;
            MlpParams::init_in_store(
                &mut store,
                &names::head(b, "cls"),
                c.attn_dim,
                c.attn_dim,
                c.num_classes,
            )?;
        }
        Ok(store)
    }

    pub fn prepare(
        &self,
        id: impl Into<String>,
        grid: VisualTokenGrid,
        reference: &str,
        detections: Vec<Detection>,
        target: Option<Target>,
    ) -> Result<PreparedSample> {
        if grid.dim() != self.config.dim {
            return Err(Error::Config(format!(
                "grid dim {} does not match model dim {}",
                grid.dim(),
                self.config.dim
            )));
        }
        if let Some(t) = &target {
            if t.labels.len() != self.config.num_classes {
                return Err(Error::Config(format!(
                    "{} labels for a {}-class model",
                    t.labels.len(),
                    self.config.num_classes
                )));
            }
        }
        let reference = embed_reference(reference, &self.stop, self.encoder.as_ref()).at(Stage::Semantics)?;
        Ok(PreparedSample {
            id: id.into(),
            pooled_spatial: pool_spatial(&grid),
            pooled_temporal: pool_temporal(&grid),
            grid,
            reference,
            detections,
            target,
        })
    }

    /// Keyword and scene-attribute trajectories for a sample.
    pub fn trajectories(
        &self,
        params: &ParamStore,
        sample: &PreparedSample,
    ) -> Result<(Option<TrajectorySet>, Option<TrajectorySet>)> {
        let c = &self.config;
        let keyword = if c.hierarchies.keyword {
            Some(
                build_trajectory_set(&sample.reference.keyword_embeddings, &sample.grid, TrajectoryKind::Keyword)
                    .at(Stage::Retrieval)?,
            )
        } else {
            None
        };
        let attribute = if c.hierarchies.attribute {
            let tokens = build_scene_attribute_tokens(
                &sample.detections,
                self.encoder.as_ref(),
                params.get(names::SCENE_WEIGHT)?,
                params.get(names::SCENE_BIAS)?.data(),
                c.conf_threshold,
                c.max_detections,
            )
            .at(Stage::Semantics)?;
            let rows: Vec<&[f64]> = tokens.iter().map(|t| t.vector.as_slice()).collect();
            let queries = if rows.is_empty() {
                DenseMatrix::zeros(0, c.dim)
            } else {
                DenseMatrix::from_rows(&rows)?
            };
            Some(build_trajectory_set(&queries, &sample.grid, TrajectoryKind::SceneAttribute).at(Stage::Retrieval)?)
        } else {
            None
        };
        Ok((keyword, attribute))
    }

    fn scan_on(tape: &mut Tape, params: &ParamStore, prefix: &str, inputs: Var) -> Result<Var> {
        let in_proj = tape.param(params, &format!("{prefix}.in_proj"))?;
        let a = tape.param(params, &format!("{prefix}.a"))?;
        let b = tape.param(params, &format!("{prefix}.b"))?;
        let c = tape.param(params, &format!("{prefix}.c"))?;
        let x = tape.matmul(inputs, in_proj)?;
        tape.scan(x, a, b, c)
    }

    fn build(&self, tape: &mut Tape, params: &ParamStore, sample: &PreparedSample) -> Result<Built> {
        let c = &self.config;
        if sample.grid.dim() != c.dim {
            return Err(Error::Config(format!(
                "grid dim {} does not match model dim {}",
                sample.grid.dim(),
                c.dim
            )));
        }
        let (kw_set, attr_set) = self.trajectories(params, sample)?;
        let mut selection = Vec::new();

        // Keyword readouts: last step of each independent scan.
        let keyword_queries = match &kw_set {
            Some(set) if !set.is_empty() => {
                selection.extend(set.selection_fingerprint());
                let mut rows = Vec::with_capacity(set.len());
                for traj in &set.trajectories {
                    let x = tape.constant(traj.token_matrix());
                    let out = Self::scan_on(tape, params, names::SSM_KEYWORD, x).at(Stage::Scan)?;
                    rows.push(tape.row(out, traj.len() - 1)?);
                }
                Some(tape.concat_rows(&rows)?)
            }
            _ => None,
        };
        // Scene tokens: per-step scans averaged across trajectories.
        let attribute_queries = match &attr_set {
            Some(set) if !set.is_empty() => {
                selection.push(usize::MAX);
                selection.extend(set.selection_fingerprint());
                let mut outs = Vec::with_capacity(set.len());
                for traj in &set.trajectories {
                    let x = tape.constant(traj.token_matrix());
                    outs.push(Self::scan_on(tape, params, names::SSM_ATTRIBUTE, x).at(Stage::Scan)?);
                }
                Some(tape.mean_of(&outs)?)
            }
            _ => None,
        };
        let holistic_queries = c
            .hierarchies
            .holistic
            .then(|| tape.constant(sample.reference.holistic.clone()));

        let mut branches = Vec::new();
        for b in c.active_branches() {
            let pooled = match b {
                Branch::Temporal => &sample.pooled_spatial,
                Branch::Spatial => &sample.pooled_temporal,
            };
            let pooled = tape.constant(pooled.clone());
            let context = Self::scan_on(tape, params, &names::ssm_branch(b), pooled).at(Stage::Scan)?;

            let mut queries = Vec::new();
            for (h, q) in [
                (Hierarchy::Holistic, holistic_queries),
                (Hierarchy::Keyword, keyword_queries),
                (Hierarchy::Attribute, attribute_queries),
            ] {
                if let Some(q) = q {
                    let vars = AttnVars::bind(tape, params, &names::attn(b, h))?;
                    queries.push((h, q, vars));
                }
            }
            let z = mhs_ca_on(tape, context, &queries).at(Stage::Attention)?;
            let reg = MlpVars::bind(tape, params, &names::head(b, "reg"))?;
            let cls = MlpVars::bind(tape, params, &names::head(b, "cls"))?;
            let bbox = head_on(tape, z, &reg).at(Stage::Heads)?;
            let probs = head_on(tape, z, &cls).at(Stage::Heads)?;
            branches.push((b, z, bbox, probs));
        }
        let bboxes: Vec<Var> = branches.iter().map(|b| b.2).collect();
        let probs: Vec<Var> = branches.iter().map(|b| b.3).collect();
        Ok(Built {
            bbox: tape.mean_of(&bboxes)?,
            probs: tape.mean_of(&probs)?,
            branches,
            selection,
        })
    }

    fn output(tape: &Tape, built: &Built) -> ModelOutput {
        let bbox_of = |v: Var| {
            let d = tape.value(v).data();
            [d[0], d[1], d[2], d[3]]
        };
        ModelOutput {
            bbox: bbox_of(built.bbox),
            class_probs: tape.value(built.probs).data().to_vec(),
            branches: built
                .branches
                .iter()
                .map(|(b, z, bbox, probs)| BranchPrediction {
                    branch: *b,
                    z: tape.value(*z).data().to_vec(),
                    bbox: bbox_of(*bbox),
                    class_probs: tape.value(*probs).data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn forward(&self, params: &ParamStore, sample: &PreparedSample) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let built = self.build(&mut tape, params, sample)?;
        Ok(Self::output(&tape, &built))
    }

    fn loss_on(&self, tape: &mut Tape, built: &Built, target: &Target) -> Result<Var> {
        let supervise = |tape: &mut Tape, bbox: Var, probs: Var| -> Result<Var> {
            let cls = tape.bce(probs, &target.labels)?;
            let reg = tape.mse(bbox, &target.bbox)?;
            let reg = tape.scale(reg, self.config.bbox_weight);
            tape.add(cls, reg)
        };
        let mut total = supervise(tape, built.bbox, built.probs).at(Stage::Loss)?;
        if self.config.aux_branch_loss {
            let parts = built
                .branches
                .iter()
                .map(|(_, _, bbox, probs)| supervise(tape, *bbox, *probs))
                .collect::<Result<Vec<_>>>()
                .at(Stage::Loss)?;
            let aux = tape.mean_of(&parts)?;
            total = tape.add(total, aux)?;
        }
        Ok(total)
    }

    fn target<'a>(sample: &'a PreparedSample) -> Result<&'a Target> {
        sample
            .target
            .as_ref()
            .ok_or_else(|| Error::Input(format!("sample {} has no ground truth", sample.id)))
    }

    /// Training loss and the hard-selection fingerprint.
    pub fn loss(&self, params: &ParamStore, sample: &PreparedSample) -> Result<Probe> {
        let target = Self::target(sample)?;
        let mut tape = Tape::new();
        let built = self.build(&mut tape, params, sample)?;
        let loss = self.loss_on(&mut tape, &built, target)?;
        Ok(Probe {
            loss: tape.value(loss).get(0, 0),
            selection: built.selection,
        })
    }

    /// Loss, per-parameter gradients, and the forward output of one sample.
    pub fn loss_and_grad(
        &self,
        params: &ParamStore,
        sample: &PreparedSample,
    ) -> Result<(f64, BTreeMap<String, DenseMatrix>, ModelOutput)> {
        let target = Self::target(sample)?;
        let mut tape = Tape::new();
        let built = self.build(&mut tape, params, sample)?;
        let loss = self.loss_on(&mut tape, &built, target)?;
        let grads = tape.backward(loss)?;
        let mut scratch = ParamStore::new(params.seed());
        for name in tape.param_names() {
            let shape = params.get(name)?.shape();
            scratch.insert(name, DenseMatrix::zeros(shape.0, shape.1))?;
        }
        tape.accumulate_param_grads(&grads, &mut scratch)?;
        let named = scratch
            .names()
            .map(|n| Ok((n.to_string(), scratch.grad(n)?.clone())))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok((tape.value(loss).get(0, 0), named, Self::output(&tape, &built)))
    }
}

/// Mean training loss over a fixed set of samples, for gradient checking.
pub struct ModelObjective<'a> {
    pub model: &'a Model,
    pub samples: &'a [PreparedSample],
}

impl Objective for ModelObjective<'_> {
    fn evaluate(&self, params: &ParamStore) -> Result<Probe> {
        let mut total = 0.0;
        let mut selection = Vec::new();
        for s in self.samples {
            let p = self.model.loss(params, s)?;
            total += p.loss;
            selection.extend(p.selection);
            selection.push(usize::MAX - 1);
        }
        Ok(Probe {
            loss: total / self.samples.len() as f64,
            selection,
        })
    }

    fn gradient(&self, params: &mut ParamStore) -> Result<f64> {
        let mut total = 0.0;
        let inv = 1.0 / self.samples.len() as f64;
        for s in self.samples {
            let (loss, grads, _) = self.model.loss_and_grad(params, s)?;
            total += loss;
            for (name, g) in grads {
                params.accumulate_grad(&name, &g.scale(inv))?;
            }
        }
        Ok(total * inv)
    }
}
