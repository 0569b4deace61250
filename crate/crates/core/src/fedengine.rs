//! The federated round loop: sample clients, initialize them from the
//! global state, run local SGD, aggregate uploads, measure noise and cost,
//! evaluate. Deterministic given the config seed, independent of worker
//! thread count.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::TargetModule;
use crate::datagen::{
    cluster_centers, gen_teacher_dataset, gen_teacher_dataset_at, split_dirichlet, split_iid,
    split_pathological, Dataset, TaskKind, TeacherTask,
};
use crate::noiselab::{
    agg_metrics, cosine_grid, init_noise_per_module, noise_report, NoiseReport,
};
use crate::numkit::{frobenius_norm, sample_without_replacement, Matrix, RngStream};
use crate::strategies::{
    aggregate, init_client, GlobalModule, GlobalState, Method, SelectionRule, Upload,
};
use crate::tinynet::{
    backward, batch_loss, forward, forward_dense, sgd_step, Activation, AdapterSiteSet, Batch,
    Loss, MlpSpec, Targets,
};
use crate::{Error, Result};

// Reserved stream ids for setup-time randomness; training rounds use their
// own (much smaller) round index, so these can never collide.
const STREAM_TASK: u64 = 0xF000_0000;
const STREAM_POOL: u64 = 0xF000_0001;
const STREAM_SHARD: u64 = 0xF000_0002;
const STREAM_CENTERS: u64 = 0xF000_0003;
const STREAM_PARTITION: u64 = 0xF000_0004;
const STREAM_TEST: u64 = 0xF000_0005;
const STREAM_GLOBAL_INIT: u64 = 0xF000_0006;
// Client slot reserved for the per-round participant sampler.
const SAMPLER_SLOT: u64 = u64::MAX;
// Purpose slots within one (round, client) pair.
const PURPOSE_INIT: u64 = 0;
const PURPOSE_BATCHES: u64 = 1;

/// How far apart input-cluster centers sit (entries N(0, spread)). One
/// knob for "how non-IID" the input-skew setting is; std 1 data around
/// unit-spread centers overlaps but is clearly skewed. Larger spreads
/// inflate input norms enough that the default lr destabilizes local SGD.
const CLUSTER_SPREAD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionKind {
    Iid,
    Clusters,
    Pathological,
    Dirichlet,
}

impl PartitionKind {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionKind::Iid => "iid",
            PartitionKind::Clusters => "clusters",
            PartitionKind::Pathological => "pathological",
            PartitionKind::Dirichlet => "dirichlet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_test: usize,
    pub partition: PartitionKind,
    /// Input-cluster count (clusters partition only).
    pub clusters: usize,
    /// Labels per client (pathological partition only).
    pub classes_per_client: usize,
    /// Dirichlet concentration (dirichlet partition only).
    pub alpha: f64,
    /// True rank of the teacher's hidden update.
    pub r_star: usize,
    /// Regression: target noise std. Classification: label flip prob.
    pub noise: f64,
    /// Teacher update size relative to the backbone, per module.
    pub delta_ratio: f64,
}

/// A group of `count` clients all budgeted at `rank`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankGroup {
    pub rank: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub v: usize,
    pub rounds: usize,
    pub sample_frac: f64,
    pub rank_profile: Vec<RankGroup>,
    pub method: Method,
    pub selection: SelectionRule,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub weight_by_samples: bool,
    pub seed: u64,
    pub init_std: f64,
    pub bytes_per_param: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
}

/// Three equal-as-possible groups at ranks 1, r_max/2, r_max, extras going
/// to the lower-rank groups first.
pub fn default_rank_profile(v: usize, r_max: usize) -> Vec<RankGroup> {
    let base = v / 3;
    let rem = v % 3;
    let mid = (r_max / 2).max(1);
    vec![
        RankGroup { rank: 1, count: base + usize::from(rem > 0) },
        RankGroup { rank: mid, count: base + usize::from(rem > 1) },
        RankGroup { rank: r_max, count: base },
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            v: 50,
            rounds: 50,
            sample_frac: 0.1,
            rank_profile: default_rank_profile(50, 8),
            method: Method::FedPlora,
            selection: SelectionRule::Fold,
            local_epochs: 1,
            batch_size: 8,
            lr: 0.05,
            eval_every: 10,
            weight_by_samples: false,
            seed: 1,
            init_std: 0.02,
            bytes_per_param: 2,
            model: ModelConfig {
                dims: vec![16, 32, 16],
                activation: Activation::Relu,
                loss: Loss::Mse,
            },
            data: DataConfig {
                kind: TaskKind::Regression,
                n_train: 2048,
                n_test: 512,
                partition: PartitionKind::Clusters,
                // one cluster per client in the default 50-client population,
                // so every shard has its own input distribution
                clusters: 50,
                classes_per_client: 2,
                alpha: 0.5,
                // matches the default profile's top rank so rank-R methods
                // can express the teacher exactly
                r_star: 8,
                noise: 0.0,
                delta_ratio: 0.2,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn max_rank(&self) -> usize {
        self.rank_profile.iter().map(|g| g.rank).max().unwrap_or(0)
    }

    /// Per-client rank budgets, client ids assigned group by group.
    pub fn client_ranks(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.v);
        for g in &self.rank_profile {
            out.extend(std::iter::repeat(g.rank).take(g.count));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.v == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if !(self.sample_frac > 0.0 && self.sample_frac <= 1.0) {
            return Err(Error::Config(format!(
                "sample fraction must be in (0, 1], got {}",
                self.sample_frac
            )));
        }
        if self.rank_profile.is_empty() {
            return Err(Error::Config("rank profile is empty".into()));
        }
        let mut total = 0usize;
        for g in &self.rank_profile {
            if g.rank == 0 || g.count == 0 {
                return Err(Error::Config("rank groups need rank >= 1 and count >= 1".into()));
            }
            total += g.count;
        }
        if total != self.v {
            return Err(Error::Config(format!(
                "rank profile covers {} clients, config has {}",
                total, self.v
            )));
        }
        let r_max = self.max_rank();
        if self.method == Method::FedIt
            && self.rank_profile.iter().any(|g| g.rank != r_max)
        {
            return Err(Error::Config(
                "homogeneous averaging requires every client at the global rank".into(),
            ));
        }
        if self.local_epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "local_epochs, batch_size and eval_every must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init std must be > 0, got {}", self.init_std)));
        }
        if self.bytes_per_param == 0 {
            return Err(Error::Config("bytes_per_param must be >= 1".into()));
        }
        let spec = MlpSpec {
            layer_dims: self.model.dims.clone(),
            activation: self.model.activation,
            loss: self.model.loss,
        };
        spec.validate()?;
        if self.method == Method::FlexLora {
            for l in 0..spec.layer_count() {
                let (d, k) = spec.weight_dims(l);
                if r_max > d.min(k) {
                    return Err(Error::Config(format!(
                        "rank {} exceeds min dim {} of module {}, re-factorization impossible",
                        r_max,
                        d.min(k),
                        l
                    )));
                }
            }
        }
        let data = &self.data;
        if data.n_train < self.v {
            return Err(Error::Config(format!(
                "{} training samples cannot cover {} clients",
                data.n_train, self.v
            )));
        }
        if data.n_test == 0 {
            return Err(Error::Config("need a nonempty test set".into()));
        }
        if !(data.delta_ratio > 0.0 && data.delta_ratio.is_finite()) {
            return Err(Error::Config("delta ratio must be > 0".into()));
        }
        if !(data.noise >= 0.0) {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        match data.partition {
            PartitionKind::Iid => {}
            PartitionKind::Clusters => {
                if data.clusters == 0 {
                    return Err(Error::Config("clusters partition needs clusters >= 1".into()));
                }
            }
            PartitionKind::Pathological => {
                if data.kind != TaskKind::Classification {
                    return Err(Error::Config(
                        "pathological partition needs a classification task".into(),
                    ));
                }
                if data.classes_per_client == 0 {
                    return Err(Error::Config("classes_per_client must be >= 1".into()));
                }
            }
            PartitionKind::Dirichlet => {
                if data.kind != TaskKind::Classification {
                    return Err(Error::Config(
                        "dirichlet partition needs a classification task".into(),
                    ));
                }
                if !(data.alpha > 0.0 && data.alpha.is_finite()) {
                    return Err(Error::Config(format!("alpha must be > 0, got {}", data.alpha)));
                }
            }
        }
        Ok(())
    }
}

/// Everything fixed before round 1: the teacher, the per-client shards, the
/// held-out test set, and each client's rank budget.
pub struct World {
    pub task: TeacherTask,
    pub shards: Vec<Dataset>,
    pub test: Dataset,
    pub client_ranks: Vec<usize>,
}

fn concat_datasets(parts: Vec<Dataset>) -> Result<Dataset> {
    if parts.is_empty() {
        return Err(Error::Config("no dataset parts to concatenate".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for p in &parts {
        for i in 0..p.inputs.rows() {
            rows.push(p.inputs.row(i).to_vec());
        }
    }
    let inputs = Matrix::from_rows(rows)?;
    let targets = match &parts[0].targets {
        Targets::Regression(_) => {
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for p in &parts {
                match &p.targets {
                    Targets::Regression(t) => {
                        for i in 0..t.rows() {
                            rows.push(t.row(i).to_vec());
                        }
                    }
                    _ => return Err(Error::Config("mixed target kinds".into())),
                }
            }
            Targets::Regression(Matrix::from_rows(rows)?)
        }
        Targets::Labels(_) => {
            let mut all = Vec::new();
            for p in &parts {
                match &p.targets {
                    Targets::Labels(l) => all.extend_from_slice(l),
                    _ => return Err(Error::Config("mixed target kinds".into())),
                }
            }
            Targets::Labels(all)
        }
    };
    Ok(Dataset { inputs, targets })
}

fn even_share(total: usize, parts: usize, idx: usize) -> usize {
    total / parts + usize::from(idx < total % parts)
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    cfg.validate()?;
    let stream = RngStream::new(cfg.seed);
    let spec = MlpSpec {
        layer_dims: cfg.model.dims.clone(),
        activation: cfg.model.activation,
        loss: cfg.model.loss,
    };
    let task = TeacherTask::new(
        spec,
        cfg.data.r_star,
        cfg.data.kind,
        cfg.data.noise,
        cfg.data.delta_ratio,
        &mut stream.derive(STREAM_TASK, 0, 0),
    )?;
    let (shards, test) = match cfg.data.partition {
        PartitionKind::Iid => {
            let pool =
                gen_teacher_dataset(&task, cfg.data.n_train, &mut stream.derive(STREAM_POOL, 0, 0))?;
            let part =
                split_iid(cfg.data.n_train, cfg.v, &mut stream.derive(STREAM_PARTITION, 0, 0))?;
            let shards: Result<Vec<Dataset>> =
                part.shards.iter().map(|idx| pool.subset(idx)).collect();
            let test =
                gen_teacher_dataset(&task, cfg.data.n_test, &mut stream.derive(STREAM_TEST, 0, 0))?;
            (shards?, test)
        }
        PartitionKind::Clusters => {
            let dim = cfg.model.dims[0];
            let centers = cluster_centers(
                cfg.data.clusters,
                dim,
                CLUSTER_SPREAD,
                &mut stream.derive(STREAM_CENTERS, 0, 0),
            )?;
            let mut shards = Vec::with_capacity(cfg.v);
            for c in 0..cfg.v {
                let n_c = even_share(cfg.data.n_train, cfg.v, c);
                shards.push(gen_teacher_dataset_at(
                    &task,
                    n_c,
                    &centers[c % centers.len()],
                    &mut stream.derive(STREAM_SHARD, c as u64, 0),
                )?);
            }
            let mut test_parts = Vec::with_capacity(centers.len());
            for (ci, center) in centers.iter().enumerate() {
                let share = even_share(cfg.data.n_test, centers.len(), ci);
                if share == 0 {
                    continue;
                }
                test_parts.push(gen_teacher_dataset_at(
                    &task,
                    share,
                    center,
                    &mut stream.derive(STREAM_TEST, ci as u64, 0),
                )?);
            }
            (shards, concat_datasets(test_parts)?)
        }
        PartitionKind::Pathological | PartitionKind::Dirichlet => {
            let pool =
                gen_teacher_dataset(&task, cfg.data.n_train, &mut stream.derive(STREAM_POOL, 0, 0))?;
            let labels = match &pool.targets {
                Targets::Labels(l) => l.clone(),
                _ => return Err(Error::Config("label partition on a regression task".into())),
            };
            let part = if cfg.data.partition == PartitionKind::Pathological {
                split_pathological(
                    &labels,
                    cfg.v,
                    cfg.data.classes_per_client,
                    &mut stream.derive(STREAM_PARTITION, 0, 0),
                )?
            } else {
                split_dirichlet(
                    &labels,
                    cfg.v,
                    cfg.data.alpha,
                    &mut stream.derive(STREAM_PARTITION, 0, 0),
                )?
            };
            let shards: Result<Vec<Dataset>> =
                part.shards.iter().map(|idx| pool.subset(idx)).collect();
            let test =
                gen_teacher_dataset(&task, cfg.data.n_test, &mut stream.derive(STREAM_TEST, 0, 0))?;
            (shards?, test)
        }
    };
    Ok(World { task, shards, test, client_ranks: cfg.client_ranks() })
}

/// Uniform sample of ceil(frac * v) distinct client ids, sorted. The small
/// epsilon keeps exact products like 0.1 * 50 from rounding up through the
/// ceiling.
pub fn sample_clients(
    v: usize,
    sample_frac: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<usize>> {
    if !(sample_frac > 0.0 && sample_frac <= 1.0) {
        return Err(Error::Config(format!(
            "sample fraction must be in (0, 1], got {}",
            sample_frac
        )));
    }
    let count = ((sample_frac * v as f64 - 1e-9).ceil() as usize).clamp(1, v);
    sample_without_replacement(count, v, rng)
}

/// Directional agreement of client components within and across component
/// indices, averaged over target modules. None when no qualifying client
/// pair existed (or every pair had a zero vector).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    pub diag_a: Option<f64>,
    pub diag_b: Option<f64>,
    pub offdiag_a: Option<f64>,
    pub offdiag_b: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub participants: Vec<usize>,
    /// Mean test loss of the materialized global model; only on eval rounds.
    pub eval_loss: Option<f64>,
    /// Sum over modules of ||global update - true teacher update||_F;
    /// teacher regression only, on eval rounds.
    pub recovery_error: Option<f64>,
    pub noise: NoiseReport,
    /// Frobenius norm of this round's global update step, summed over
    /// modules (denominator for relative noise).
    pub update_norm: f64,
    /// Largest client-vs-global effective weight gap at initialization.
    pub init_gap: f64,
    pub comm_up_bytes: u64,
    pub comm_down_bytes: u64,
    pub fold_flops: u64,
    /// Component indices with at least one trainer this round, per target
    /// module. Empty for methods without component selection.
    pub updated_components: Vec<Vec<usize>>,
    pub cosine: Option<CosineSummary>,
}

pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub global: GlobalState,
    pub world: World,
}

struct ClientOutcome {
    upload: Upload,
    init_noise_pm: Vec<f64>,
    init_gap: f64,
    fold_flops: u64,
    up_elems: u64,
    down_elems: u64,
}

/// Local SGD can blow up under an aggressive lr; catch it at upload time so
/// the failure names the client and round instead of surfacing as NaN noise
/// metrics downstream.
fn upload_is_finite(u: &Upload) -> bool {
    u.modules.iter().all(|m| {
        m.stack.components.iter().all(|c| {
            c.a.data().iter().all(|x| x.is_finite()) && c.b.data().iter().all(|x| x.is_finite())
        })
    })
}

fn stack_elems(stack: &crate::adapters::PloraStack) -> u64 {
    stack
        .components
        .iter()
        .map(|c| (c.a.rows() * c.a.cols() + c.b.rows() * c.b.cols()) as u64)
        .sum()
}

/// Count the elements of the payload the server actually ships to one
/// client, by traversing the real structures involved.
fn downlink_elements(
    method: Method,
    global: &GlobalState,
    init: &crate::strategies::ClientRoundState,
) -> u64 {
    match method {
        // Full-stack broadcast; the client folds locally.
        Method::FedPlora => global
            .modules
            .iter()
            .map(|m| match m {
                GlobalModule::Plora(s) => stack_elems(s),
                _ => 0,
            })
            .sum(),
        // The client receives exactly the factors it will train.
        Method::FedIt | Method::HetLora | Method::FlexLora => {
            init.modules.iter().map(|m| stack_elems(&m.trainable)).sum()
        }
        // Dense accumulated update.
        Method::Flora => global
            .modules
            .iter()
            .map(|m| match m {
                GlobalModule::FullDelta { delta } => (delta.rows() * delta.cols()) as u64,
                _ => 0,
            })
            .sum(),
    }
}

/// Flops spent merging received state into the frozen weight, from the
/// components actually folded (multiply + add per entry); the stacking
/// method's dense merge costs a scale and a store per entry.
fn fold_work(
    method: Method,
    selection: SelectionRule,
    global: &GlobalState,
    init: &crate::strategies::ClientRoundState,
) -> u64 {
    match method {
        Method::FedPlora => {
            if selection == SelectionRule::Drop {
                return 0;
            }
            init.modules
                .iter()
                .map(|m| {
                    let folded = global.rank - m.selected.as_ref().map_or(0, |s| s.len());
                    let w = m.target.w0();
                    2 * (w.rows() * w.cols() * folded) as u64
                })
                .sum()
        }
        Method::Flora => init
            .modules
            .iter()
            .map(|m| {
                let w = m.target.w0();
                2 * (w.rows() * w.cols()) as u64
            })
            .sum(),
        _ => 0,
    }
}

fn client_round(
    cfg: &ExperimentConfig,
    world: &World,
    global: &GlobalState,
    stream: &RngStream,
    t: usize,
    id: usize,
) -> Result<ClientOutcome> {
    let backbone = &world.task.backbone;
    let mut init_rng = stream.derive(t as u64, id as u64, PURPOSE_INIT);
    let mut state = init_client(
        global,
        backbone,
        id,
        world.client_ranks[id],
        cfg.selection,
        cfg.init_std,
        &mut init_rng,
    )?;
    let init_noise_pm = init_noise_per_module(global, std::slice::from_ref(&state))?;
    let mut init_gap = 0.0;
    for l in 0..global.module_count() {
        let client_w = state.effective_weight(l)?;
        let global_w = global.effective_weight(l, &backbone[l])?;
        init_gap += frobenius_norm(&client_w.sub(&global_w)?);
    }
    let down_elems = downlink_elements(cfg.method, global, &state);
    let fold_flops = fold_work(cfg.method, cfg.selection, global, &state);

    let spec = &world.task.spec;
    let shard = &world.shards[id];
    let frozen: Vec<TargetModule> = state.modules.iter().map(|m| m.target.clone()).collect();
    let mut sites =
        AdapterSiteSet { sites: state.modules.iter().map(|m| m.trainable.clone()).collect() };
    let mut train_rng = stream.derive(t as u64, id as u64, PURPOSE_BATCHES);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut train_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let part = shard.subset(chunk)?;
            let batch = Batch { inputs: part.inputs, targets: part.targets };
            let (_, cache) = forward(spec, &frozen, &sites, &batch)?;
            let grads = backward(spec, &frozen, &sites, &cache, &batch)?;
            sgd_step(&mut sites, &grads, cfg.lr)?;
        }
    }
    for (m, s) in state.modules.iter_mut().zip(sites.sites) {
        m.trainable = s;
    }
    let weight = if cfg.weight_by_samples { shard.len() as f64 } else { 1.0 };
    let upload = Upload::from_state(&state, weight);
    let up_elems = upload.modules.iter().map(|m| stack_elems(&m.stack)).sum();
    Ok(ClientOutcome { upload, init_noise_pm, init_gap, fold_flops, up_elems, down_elems })
}

/// Materialize the global effective model and score it on the test set.
/// Returns (mean loss, recovery error). The dense forward here shares no
/// code with the factored adapter path clients train through, so agreement
/// between training progress and this loss also exercises the adapter
/// algebra. Recovery error only exists for teacher regression.
pub fn evaluate(global: &GlobalState, task: &TeacherTask, test: &Dataset) -> Result<(f64, Option<f64>)> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let layers = task.spec.layer_count();
    let mut weights = Vec::with_capacity(layers);
    for l in 0..layers {
        weights.push(global.effective_weight(l, &task.backbone[l])?);
    }
    let out = forward_dense(&task.spec, &weights, &test.inputs)?;
    let loss = batch_loss(&task.spec, &out, &test.targets)?;
    let recovery = match task.kind {
        TaskKind::Regression => {
            let mut acc = 0.0;
            for l in 0..layers {
                acc += frobenius_norm(&global.delta(l)?.sub(&task.true_deltas[l])?);
            }
            Some(acc)
        }
        TaskKind::Classification => None,
    };
    Ok((loss, recovery))
}

fn cosine_summary(rank: usize, uploads: &[Upload], modules: usize) -> Result<Option<CosineSummary>> {
    if uploads.len() < 2 {
        return Ok(None);
    }
    let mut diag_a = (0.0, 0usize);
    let mut diag_b = (0.0, 0usize);
    let mut off_a = (0.0, 0usize);
    let mut off_b = (0.0, 0usize);
    for l in 0..modules {
        let (ga, gb) = cosine_grid(rank, uploads, l)?;
        for j in 0..rank {
            for jp in 0..rank {
                if let Some(v) = ga[j][jp] {
                    let slot = if j == jp { &mut diag_a } else { &mut off_a };
                    slot.0 += v;
                    slot.1 += 1;
                }
                if let Some(v) = gb[j][jp] {
                    let slot = if j == jp { &mut diag_b } else { &mut off_b };
                    slot.0 += v;
                    slot.1 += 1;
                }
            }
        }
    }
    let mean = |acc: (f64, usize)| if acc.1 > 0 { Some(acc.0 / acc.1 as f64) } else { None };
    Ok(Some(CosineSummary {
        diag_a: mean(diag_a),
        diag_b: mean(diag_b),
        offdiag_a: mean(off_a),
        offdiag_b: mean(off_b),
    }))
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let world = build_world(cfg)?;
    let stream = RngStream::new(cfg.seed);
    let spec = &world.task.spec;
    let module_dims: Vec<(usize, usize)> =
        (0..spec.layer_count()).map(|l| spec.weight_dims(l)).collect();
    let mut global = GlobalState::init(
        cfg.method,
        &module_dims,
        cfg.max_rank(),
        cfg.init_std,
        &mut stream.derive(STREAM_GLOBAL_INIT, 0, 0),
    )?;
    let pool = match std::env::var("FEDLORA_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        Some(n) if n >= 1 => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {}", e)))?,
        ),
        _ => None,
    };
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let sampled = sample_clients(
            cfg.v,
            cfg.sample_frac,
            &mut stream.derive(t as u64, SAMPLER_SLOT, 0),
        )?;
        let work = || -> Result<Vec<ClientOutcome>> {
            sampled
                .par_iter()
                .map(|&id| client_round(cfg, &world, &global, &stream, t, id))
                .collect()
        };
        let outcomes = match &pool {
            Some(p) => p.install(work),
            None => work(),
        }?;

        let uploads: Vec<Upload> = outcomes.iter().map(|o| o.upload.clone()).collect();
        for u in &uploads {
            if !upload_is_finite(u) {
                return Err(Error::NonFinite(format!(
                    "client {} update diverged at round {} (try a smaller lr)",
                    u.client_id,
                    t + 1
                )));
            }
        }
        let mut init_pm = vec![0.0f64; global.module_count()];
        let mut init_gap = 0.0f64;
        let mut fold_flops = 0u64;
        let mut up_elems = 0u64;
        let mut down_elems = 0u64;
        for o in &outcomes {
            for (dst, src) in init_pm.iter_mut().zip(&o.init_noise_pm) {
                *dst += src;
            }
            init_gap = init_gap.max(o.init_gap);
            fold_flops += o.fold_flops;
            up_elems += o.up_elems;
            down_elems += o.down_elems;
        }

        let next = aggregate(&global, &uploads)?;
        let agg = agg_metrics(&global, &next, &uploads)?;
        let noise = noise_report(&init_pm, &agg);
        let mut update_norm = 0.0;
        for l in 0..global.module_count() {
            update_norm += frobenius_norm(&next.delta(l)?.sub(&global.delta(l)?)?);
        }
        let updated_components = if cfg.method == Method::FedPlora {
            let mut per_module = vec![std::collections::BTreeSet::new(); global.module_count()];
            for u in &uploads {
                for (l, m) in u.modules.iter().enumerate() {
                    if let Some(sel) = &m.selected {
                        per_module[l].extend(sel.iter().copied());
                    }
                }
            }
            per_module.into_iter().map(|s| s.into_iter().collect()).collect()
        } else {
            Vec::new()
        };
        let cosine = if cfg.method == Method::FedPlora {
            cosine_summary(global.rank, &uploads, global.module_count())?
        } else {
            None
        };

        let should_eval = (t + 1) % cfg.eval_every == 0 || t + 1 == cfg.rounds;
        let (eval_loss, recovery_error) = if should_eval {
            let (loss, rec) = evaluate(&next, &world.task, &world.test)?;
            (Some(loss), rec)
        } else {
            (None, None)
        };

        records.push(RoundRecord {
            round: t + 1,
            participants: sampled,
            eval_loss,
            recovery_error,
            noise,
            update_norm,
            init_gap,
            comm_up_bytes: up_elems * cfg.bytes_per_param,
            comm_down_bytes: down_elems * cfg.bytes_per_param,
            fold_flops,
            updated_components,
            cosine,
        });
        global = next;
    }
    Ok(RunOutput { records, global, world })
}
