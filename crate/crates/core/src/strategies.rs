//! The five federated adapter strategies behind one interface: FedIT,
//! Fed-PLoRA (rank-wise parallel one-rank adapters with four selection
//! rules), FLoRA, FlexLoRA, and HETLoRA. Each strategy contributes a client
//! initializer and a server aggregator; clients always train a stack of
//! one-rank pairs, which is an exact reparameterization of a rank-r adapter.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    effective_weight, plora_delta, OneRank, PloraStack, TargetModule,
};
use crate::numkit::{
    matmul, random_normal, sample_without_replacement, truncated_svd, Matrix,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FedIt,
    FedPlora,
    Flora,
    FlexLora,
    HetLora,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FedIt => "fedit",
            Method::FedPlora => "fedplora",
            Method::Flora => "flora",
            Method::FlexLora => "flexlora",
            Method::HetLora => "hetlora",
        }
    }
}

/// How a Fed-PLoRA client picks its r_i of the R global components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Uniform random subset; unselected components folded into the target.
    Fold,
    /// Uniform random subset; unselected components discarded for the round.
    Drop,
    /// Always the first r_i components (folding the rest).
    FixedPrefix,
    /// The r_i components with the largest ||b|| * ||a||, ties to the lower
    /// index (folding the rest).
    WeightNorm,
}

impl SelectionRule {
    pub fn name(self) -> &'static str {
        match self {
            SelectionRule::Fold => "fold",
            SelectionRule::Drop => "drop",
            SelectionRule::FixedPrefix => "fixed",
            SelectionRule::WeightNorm => "weightnorm",
        }
    }
}

/// Server-side state for one target module.
#[derive(Clone, Debug, PartialEq)]
pub enum GlobalModule {
    /// Classic rank-R adapter pair: a is R x k, b is d x R.
    Adapter { a: Matrix, b: Matrix },
    /// R parallel one-rank pairs.
    Plora(PloraStack),
    /// Accumulated dense update, d x k.
    FullDelta { delta: Matrix },
}

impl GlobalModule {
    /// The update this module currently represents, materialized dense.
    pub fn delta(&self) -> Result<Matrix> {
        match self {
            GlobalModule::Adapter { a, b } => matmul(b, a),
            GlobalModule::Plora(stack) => plora_delta(stack),
            GlobalModule::FullDelta { delta } => Ok(delta.clone()),
        }
    }
}

/// Server state across all target modules, plus FLoRA's bookkeeping about
/// the previous round's stacked matrices (squared Frobenius norms, which is
/// all the stacking identity needs).
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub method: Method,
    pub rank: usize,
    pub scale: f64,
    pub modules: Vec<GlobalModule>,
    /// Per module: (sum of ||A_i||_F^2, sum of ||B_i||_F^2) over the clients
    /// stacked in the most recent aggregation. Zero before any aggregation.
    pub flora_prev_stack_sq: Vec<(f64, f64)>,
}

impl GlobalState {
    /// Fresh server state. Methods holding explicit factors draw A from
    /// N(0, init_std^2) and zero B, so their initial update is zero but the
    /// A side is already spread out; dense-delta methods start from zero.
    /// The draw order is fixed so adapter-carrying methods share the same
    /// initial A under the same stream.
    pub fn init(
        method: Method,
        module_dims: &[(usize, usize)],
        rank: usize,
        init_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("global rank must be >= 1".into()));
        }
        if module_dims.is_empty() {
            return Err(Error::Config("need at least one target module".into()));
        }
        if !(init_std > 0.0) {
            return Err(Error::Config("init std must be > 0".into()));
        }
        let mut modules = Vec::with_capacity(module_dims.len());
        for &(d, k) in module_dims {
            let module = match method {
                Method::FedIt | Method::HetLora => {
                    let a = random_normal(rank, k, init_std, rng);
                    let b = Matrix::zeros(d, rank);
                    GlobalModule::Adapter { a, b }
                }
                Method::FedPlora => {
                    let a = random_normal(rank, k, init_std, rng);
                    let mut components = Vec::with_capacity(rank);
                    for j in 0..rank {
                        components.push(OneRank {
                            a: a.slice_rows(j, j + 1)?,
                            b: Matrix::zeros(d, 1),
                        });
                    }
                    GlobalModule::Plora(PloraStack { components, scale: 1.0 })
                }
                Method::Flora | Method::FlexLora => {
                    GlobalModule::FullDelta { delta: Matrix::zeros(d, k) }
                }
            };
            modules.push(module);
        }
        Ok(GlobalState {
            method,
            rank,
            scale: 1.0,
            modules,
            flora_prev_stack_sq: vec![(0.0, 0.0); module_dims.len()],
        })
    }

    pub fn module_count(&self) -> usize {
        self.modules.len()
    }

    /// Dense update of module l.
    pub fn delta(&self, l: usize) -> Result<Matrix> {
        self.modules
            .get(l)
            .ok_or_else(|| Error::Shape(format!("module {} of {}", l, self.modules.len())))?
            .delta()
            .map(|d| d.scale(self.scale))
    }

    /// w0 + update for module l.
    pub fn effective_weight(&self, l: usize, w0: &Matrix) -> Result<Matrix> {
        w0.add(&self.delta(l)?)
    }
}

/// One client's view of one target module for a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientModuleState {
    /// Sorted global component indices this client trains (Fed-PLoRA only).
    pub selected: Option<Vec<usize>>,
    /// Frozen backbone; fold_delta holds whatever the client cannot train.
    pub target: TargetModule,
    /// Trainable one-rank pairs, aligned with `selected` where present.
    pub trainable: PloraStack,
}

/// A client's full per-round state across modules.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientRoundState {
    pub client_id: usize,
    pub rank: usize,
    pub modules: Vec<ClientModuleState>,
}

impl ClientRoundState {
    /// Effective weight of module l as the client sees it.
    pub fn effective_weight(&self, l: usize) -> Result<Matrix> {
        let m = self
            .modules
            .get(l)
            .ok_or_else(|| Error::Shape(format!("module {} of {}", l, self.modules.len())))?;
        effective_weight(&m.target, &m.trainable)
    }
}

/// What a client sends back after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct UploadModule {
    pub selected: Option<Vec<usize>>,
    pub stack: PloraStack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub rank: usize,
    /// Aggregation weight (sample count when size weighting is on, else 1).
    pub weight: f64,
    pub modules: Vec<UploadModule>,
}

impl Upload {
    pub fn from_state(state: &ClientRoundState, weight: f64) -> Upload {
        Upload {
            client_id: state.client_id,
            rank: state.rank,
            weight,
            modules: state
                .modules
                .iter()
                .map(|m| UploadModule { selected: m.selected.clone(), stack: m.trainable.clone() })
                .collect(),
        }
    }

    /// This client's whole update for module l, materialized dense.
    pub fn delta(&self, l: usize) -> Result<Matrix> {
        plora_delta(&self.modules[l].stack)
    }
}

fn expect_plora<'a>(g: &'a GlobalState, l: usize) -> Result<&'a PloraStack> {
    match &g.modules[l] {
        GlobalModule::Plora(stack) => Ok(stack),
        _ => Err(Error::Config("global state does not hold one-rank stacks".into())),
    }
}

fn expect_adapter<'a>(g: &'a GlobalState, l: usize) -> Result<(&'a Matrix, &'a Matrix)> {
    match &g.modules[l] {
        GlobalModule::Adapter { a, b } => Ok((a, b)),
        _ => Err(Error::Config("global state does not hold an adapter pair".into())),
    }
}

fn expect_full_delta<'a>(g: &'a GlobalState, l: usize) -> Result<&'a Matrix> {
    match &g.modules[l] {
        GlobalModule::FullDelta { delta } => Ok(delta),
        _ => Err(Error::Config("global state does not hold a dense delta".into())),
    }
}

/// Component scores for the weight-norm rule: ||b_j||_2 * ||a_j||_2, which
/// equals ||b_j a_j||_F exactly for rank one.
fn weight_norm_selection(stack: &PloraStack, r: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = stack
        .components
        .iter()
        .enumerate()
        .map(|(j, c)| (j, c.weight_norm()))
        .collect();
    // Stable sort by descending norm; ties keep the lower index first.
    scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut picked: Vec<usize> = scored[..r].iter().map(|&(j, _)| j).collect();
    picked.sort_unstable();
    picked
}

/// Fed-PLoRA client setup: pick r_i of the R one-rank components by the
/// selection rule, copy them as trainables, and fold the rest into the
/// frozen target (drop rule: discard the rest instead).
pub fn init_fedplora(
    global: &GlobalState,
    backbone: &[Matrix],
    client_id: usize,
    r_i: usize,
    rule: SelectionRule,
    rng: &mut ChaCha8Rng,
) -> Result<ClientRoundState> {
    check_backbone(global, backbone)?;
    if r_i == 0 || r_i > global.rank {
        return Err(Error::Config(format!(
            "client rank {} outside 1..={}",
            r_i, global.rank
        )));
    }
    let mut modules = Vec::with_capacity(global.modules.len());
    for (l, w0) in backbone.iter().enumerate() {
        let stack = expect_plora(global, l)?;
        // Selection is drawn independently for each target module.
        let selected = match rule {
            SelectionRule::Fold | SelectionRule::Drop => {
                sample_without_replacement(r_i, global.rank, rng)?
            }
            SelectionRule::FixedPrefix => (0..r_i).collect(),
            SelectionRule::WeightNorm => weight_norm_selection(stack, r_i),
        };
        let unselected: Vec<usize> =
            (0..global.rank).filter(|j| !selected.contains(j)).collect();
        let base = TargetModule::new(w0.clone());
        let target = match rule {
            SelectionRule::Drop => base,
            _ => crate::adapters::fold(stack, &unselected, &base)?,
        };
        let components: Vec<OneRank> =
            selected.iter().map(|&j| stack.components[j].clone()).collect();
        let trainable = PloraStack { components, scale: stack.scale };
        modules.push(ClientModuleState { selected: Some(selected), target, trainable });
    }
    Ok(ClientRoundState { client_id, rank: r_i, modules })
}

/// FedIT client setup: homogeneous only, adapters copied verbatim.
pub fn init_fedit(
    global: &GlobalState,
    backbone: &[Matrix],
    client_id: usize,
    r_i: usize,
) -> Result<ClientRoundState> {
    check_backbone(global, backbone)?;
    if r_i != global.rank {
        return Err(Error::Config(format!(
            "fedit is homogeneous: client rank {} must equal global rank {}",
            r_i, global.rank
        )));
    }
    let mut modules = Vec::with_capacity(global.modules.len());
    for (l, w0) in backbone.iter().enumerate() {
        let (a, b) = expect_adapter(global, l)?;
        let mut components = Vec::with_capacity(global.rank);
        for j in 0..global.rank {
            components.push(OneRank { a: a.slice_rows(j, j + 1)?, b: b.slice_cols(j, j + 1)? });
        }
        modules.push(ClientModuleState {
            selected: None,
            target: TargetModule::new(w0.clone()),
            trainable: PloraStack { components, scale: global.scale },
        });
    }
    Ok(ClientRoundState { client_id, rank: r_i, modules })
}

/// FLoRA client setup: the accumulated update is merged into the frozen
/// target, A is drawn fresh from N(0, std^2), B starts at zero.
pub fn init_flora(
    global: &GlobalState,
    backbone: &[Matrix],
    client_id: usize,
    r_i: usize,
    init_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ClientRoundState> {
    check_backbone(global, backbone)?;
    if r_i == 0 {
        return Err(Error::Config("client rank must be >= 1".into()));
    }
    if !(init_std > 0.0) {
        return Err(Error::Config("init std must be > 0".into()));
    }
    let mut modules = Vec::with_capacity(global.modules.len());
    for (l, w0) in backbone.iter().enumerate() {
        let delta = expect_full_delta(global, l)?;
        let d = w0.rows();
        let a = random_normal(r_i, w0.cols(), init_std, rng);
        let mut components = Vec::with_capacity(r_i);
        for j in 0..r_i {
            components.push(OneRank { a: a.slice_rows(j, j + 1)?, b: Matrix::zeros(d, 1) });
        }
        let mut target = TargetModule::new(w0.clone());
        target.set_fold_delta(delta.scale(global.scale))?;
        modules.push(ClientModuleState {
            selected: None,
            target,
            trainable: PloraStack { components, scale: global.scale },
        });
    }
    Ok(ClientRoundState { client_id, rank: r_i, modules })
}

/// FlexLoRA client setup: rank-R SVD of the accumulated update, truncated
/// to the client's r_i. b carries U*diag(S), a carries rows of V^T. The
/// update is NOT merged into the target; it lives in the adapters.
pub fn init_flexlora(
    global: &GlobalState,
    backbone: &[Matrix],
    client_id: usize,
    r_i: usize,
) -> Result<ClientRoundState> {
    check_backbone(global, backbone)?;
    if r_i == 0 || r_i > global.rank {
        return Err(Error::Config(format!(
            "client rank {} outside 1..={}",
            r_i, global.rank
        )));
    }
    let mut modules = Vec::with_capacity(global.modules.len());
    for (l, w0) in backbone.iter().enumerate() {
        let delta = expect_full_delta(global, l)?;
        let (d, k) = (delta.rows(), delta.cols());
        if global.rank > d.min(k) {
            return Err(Error::Config(format!(
                "global rank {} exceeds min dim {} of module {}",
                global.rank,
                d.min(k),
                l
            )));
        }
        let (u, s, vt) = truncated_svd(delta, global.rank)?;
        let mut components = Vec::with_capacity(r_i);
        for j in 0..r_i {
            components.push(OneRank {
                a: vt.slice_rows(j, j + 1)?,
                b: u.slice_cols(j, j + 1)?.scale(s[j]),
            });
        }
        modules.push(ClientModuleState {
            selected: None,
            target: TargetModule::new(w0.clone()),
            trainable: PloraStack { components, scale: global.scale },
        });
    }
    Ok(ClientRoundState { client_id, rank: r_i, modules })
}

/// HETLoRA client setup: truncation, the first r_i rows of A and columns
/// of B.
pub fn init_hetlora(
    global: &GlobalState,
    backbone: &[Matrix],
    client_id: usize,
    r_i: usize,
) -> Result<ClientRoundState> {
    check_backbone(global, backbone)?;
    if r_i == 0 || r_i > global.rank {
        return Err(Error::Config(format!(
            "client rank {} outside 1..={}",
            r_i, global.rank
        )));
    }
    let mut modules = Vec::with_capacity(global.modules.len());
    for (l, w0) in backbone.iter().enumerate() {
        let (a, b) = expect_adapter(global, l)?;
        let mut components = Vec::with_capacity(r_i);
        for j in 0..r_i {
            components.push(OneRank { a: a.slice_rows(j, j + 1)?, b: b.slice_cols(j, j + 1)? });
        }
        modules.push(ClientModuleState {
            selected: None,
            target: TargetModule::new(w0.clone()),
            trainable: PloraStack { components, scale: global.scale },
        });
    }
    Ok(ClientRoundState { client_id, rank: r_i, modules })
}

fn check_backbone(global: &GlobalState, backbone: &[Matrix]) -> Result<()> {
    if backbone.len() != global.modules.len() {
        return Err(Error::Shape(format!(
            "{} backbone weights for {} global modules",
            backbone.len(),
            global.modules.len()
        )));
    }
    Ok(())
}

fn normalized_weights(uploads: &[Upload]) -> Result<Vec<f64>> {
    if uploads.is_empty() {
        return Err(Error::Config("no uploads to aggregate".into()));
    }
    let total: f64 = uploads.iter().map(|u| u.weight).sum();
    if !(total > 0.0) {
        return Err(Error::Config("upload weights must sum to > 0".into()));
    }
    Ok(uploads.iter().map(|u| u.weight / total).collect())
}

fn sorted_by_client(uploads: &[Upload]) -> Vec<&Upload> {
    let mut sorted: Vec<&Upload> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    sorted
}

/// Rank-wise aggregation: each global component j becomes the weighted mean
/// of the uploads that trained j; components nobody trained are carried
/// over from the previous state unchanged.
pub fn aggregate_fedplora(prev: &GlobalState, uploads: &[Upload]) -> Result<GlobalState> {
    if prev.method != Method::FedPlora {
        return Err(Error::Config("previous state is not a one-rank stack state".into()));
    }
    let uploads = sorted_by_client(uploads);
    if uploads.is_empty() {
        return Err(Error::Config("no uploads to aggregate".into()));
    }
    let mut next = prev.clone();
    for l in 0..prev.modules.len() {
        let prev_stack = expect_plora(prev, l)?;
        let mut components = prev_stack.components.clone();
        for j in 0..prev.rank {
            // Q_j: uploads that trained component j of this module, with
            // their aggregation weights.
            let mut members: Vec<(&Upload, usize)> = Vec::new();
            for u in &uploads {
                let selected = u.modules[l]
                    .selected
                    .as_ref()
                    .ok_or_else(|| Error::Config("upload lacks a selection set".into()))?;
                if let Ok(pos) = selected.binary_search(&j) {
                    members.push((u, pos));
                }
            }
            if members.is_empty() {
                continue;
            }
            let wsum: f64 = members.iter().map(|(u, _)| u.weight).sum();
            if !(wsum > 0.0) {
                return Err(Error::Config("upload weights must sum to > 0".into()));
            }
            let (d, k) = {
                let c = &members[0].0.modules[l].stack.components[members[0].1];
                (c.b.rows(), c.a.cols())
            };
            let mut a_mean = Matrix::zeros(1, k);
            let mut b_mean = Matrix::zeros(d, 1);
            for (u, pos) in &members {
                let c = &u.modules[l].stack.components[*pos];
                a_mean.add_scaled(&c.a, u.weight / wsum)?;
                b_mean.add_scaled(&c.b, u.weight / wsum)?;
            }
            components[j] = OneRank { a: a_mean, b: b_mean };
        }
        next.modules[l] =
            GlobalModule::Plora(PloraStack { components, scale: prev_stack.scale });
    }
    Ok(next)
}

/// Homogeneous elementwise mean of full-rank adapter pairs.
pub fn aggregate_fedit(prev: &GlobalState, uploads: &[Upload]) -> Result<GlobalState> {
    if prev.method != Method::FedIt {
        return Err(Error::Config("previous state is not a fedit adapter state".into()));
    }
    let sorted = sorted_by_client(uploads);
    for u in &sorted {
        if u.rank != prev.rank {
            return Err(Error::Config(format!(
                "fedit upload rank {} does not match global rank {}",
                u.rank, prev.rank
            )));
        }
    }
    let owned: Vec<Upload> = sorted.iter().map(|&u| u.clone()).collect();
    let omega = normalized_weights(&owned)?;
    let mut next = prev.clone();
    for l in 0..prev.modules.len() {
        let (pa, pb) = expect_adapter(prev, l)?;
        let mut a = Matrix::zeros(pa.rows(), pa.cols());
        let mut b = Matrix::zeros(pb.rows(), pb.cols());
        for (u, &w) in owned.iter().zip(&omega) {
            let pair = crate::adapters::plora_to_lora(&u.modules[l].stack)?;
            a.add_scaled(&pair.a, w)?;
            b.add_scaled(&pair.b, w)?;
        }
        next.modules[l] = GlobalModule::Adapter { a, b };
    }
    Ok(next)
}

/// Stacking aggregation: the dense update gains the weighted mean of the
/// client products. Stacking client factors and multiplying is algebraically
/// the same sum of per-client products, so this is exact. Also records the
/// squared norms of this round's stacked factors for the next round's
/// retention accounting.
pub fn aggregate_flora(prev: &GlobalState, uploads: &[Upload]) -> Result<GlobalState> {
    if prev.method != Method::Flora {
        return Err(Error::Config("previous state is not a dense-delta state".into()));
    }
    let sorted = sorted_by_client(uploads);
    let owned: Vec<Upload> = sorted.iter().map(|&u| u.clone()).collect();
    let omega = normalized_weights(&owned)?;
    let mut next = prev.clone();
    for l in 0..prev.modules.len() {
        let prev_delta = expect_full_delta(prev, l)?;
        let mut increment = Matrix::zeros(prev_delta.rows(), prev_delta.cols());
        let mut a_sq = 0.0;
        let mut b_sq = 0.0;
        for (u, &w) in owned.iter().zip(&omega) {
            increment.add_scaled(&u.delta(l)?, w)?;
            for c in &u.modules[l].stack.components {
                a_sq += c.a.data().iter().map(|x| x * x).sum::<f64>();
                b_sq += c.b.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        next.modules[l] = GlobalModule::FullDelta { delta: prev_delta.add(&increment)? };
        next.flora_prev_stack_sq[l] = (a_sq, b_sq);
    }
    Ok(next)
}

/// Mean of client products, replacing the previous update outright: the
/// previous knowledge is already inside each client's SVD-initialized
/// adapters, so adding would double-count it.
pub fn aggregate_flexlora(prev: &GlobalState, uploads: &[Upload]) -> Result<GlobalState> {
    if prev.method != Method::FlexLora {
        return Err(Error::Config("previous state is not a dense-delta state".into()));
    }
    let sorted = sorted_by_client(uploads);
    let owned: Vec<Upload> = sorted.iter().map(|&u| u.clone()).collect();
    let omega = normalized_weights(&owned)?;
    let mut next = prev.clone();
    for l in 0..prev.modules.len() {
        let prev_delta = expect_full_delta(prev, l)?;
        let mut delta = Matrix::zeros(prev_delta.rows(), prev_delta.cols());
        for (u, &w) in owned.iter().zip(&omega) {
            delta.add_scaled(&u.delta(l)?, w)?;
        }
        next.modules[l] = GlobalModule::FullDelta { delta };
    }
    Ok(next)
}

/// Zero-pad each upload to rank R (extra A rows and B columns zero), then
/// take the weighted elementwise mean.
pub fn aggregate_hetlora(prev: &GlobalState, uploads: &[Upload]) -> Result<GlobalState> {
    if prev.method != Method::HetLora {
        return Err(Error::Config("previous state is not an adapter state".into()));
    }
    let sorted = sorted_by_client(uploads);
    let owned: Vec<Upload> = sorted.iter().map(|&u| u.clone()).collect();
    for u in &owned {
        if u.rank > prev.rank {
            return Err(Error::Config(format!(
                "upload rank {} exceeds global rank {}",
                u.rank, prev.rank
            )));
        }
    }
    let omega = normalized_weights(&owned)?;
    let mut next = prev.clone();
    for l in 0..prev.modules.len() {
        let (pa, pb) = expect_adapter(prev, l)?;
        let (rk, k) = (pa.rows(), pa.cols());
        let d = pb.rows();
        let mut a = Matrix::zeros(rk, k);
        let mut b = Matrix::zeros(d, rk);
        for (u, &w) in owned.iter().zip(&omega) {
            let pair = crate::adapters::plora_to_lora(&u.modules[l].stack)?;
            // Upload occupies the leading rows/columns; the pad stays zero.
            for j in 0..u.rank {
                for col in 0..k {
                    let v = a.get(j, col) + w * pair.a.get(j, col);
                    a.set(j, col, v);
                }
                for row in 0..d {
                    let v = b.get(row, j) + w * pair.b.get(row, j);
                    b.set(row, j, v);
                }
            }
        }
        next.modules[l] = GlobalModule::Adapter { a, b };
    }
    Ok(next)
}

/// Dispatch table over the five methods.
pub fn aggregate(prev: &GlobalState, uploads: &[Upload]) -> Result<GlobalState> {
    match prev.method {
        Method::FedIt => aggregate_fedit(prev, uploads),
        Method::FedPlora => aggregate_fedplora(prev, uploads),
        Method::Flora => aggregate_flora(prev, uploads),
        Method::FlexLora => aggregate_flexlora(prev, uploads),
        Method::HetLora => aggregate_hetlora(prev, uploads),
    }
}

/// Dispatch for client initialization. `rule` and `init_std` are only read
/// by the methods that use them.
pub fn init_client(
    global: &GlobalState,
    backbone: &[Matrix],
    client_id: usize,
    r_i: usize,
    rule: SelectionRule,
    init_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ClientRoundState> {
    match global.method {
        Method::FedIt => init_fedit(global, backbone, client_id, r_i),
        Method::FedPlora => init_fedplora(global, backbone, client_id, r_i, rule, rng),
        Method::Flora => init_flora(global, backbone, client_id, r_i, init_std, rng),
        Method::FlexLora => init_flexlora(global, backbone, client_id, r_i),
        Method::HetLora => init_hetlora(global, backbone, client_id, r_i),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{frobenius_norm, svd_reconstruct, RngStream};

    fn dims() -> Vec<(usize, usize)> {
        vec![(6, 5), (4, 6)]
    }

    fn backbone_for(dims: &[(usize, usize)], seed: u64) -> Vec<Matrix> {
        let root = RngStream::new(seed);
        dims.iter()
            .enumerate()
            .map(|(l, &(d, k))| random_normal(d, k, 0.5, &mut root.derive(9, 9, l as u64)))
            .collect()
    }

    fn trained_global(method: Method, rank: usize, seed: u64) -> GlobalState {
        // A freshly initialized state has zero update (b = 0), which makes
        // many oracle checks vacuous. Fill both factors with random values.
        let root = RngStream::new(seed);
        let mut g =
            GlobalState::init(method, &dims(), rank, 0.2, &mut root.derive(0, 0, 0)).unwrap();
        for (l, m) in g.modules.iter_mut().enumerate() {
            let mut rng = root.derive(1, 0, l as u64);
            match m {
                GlobalModule::Adapter { a, b } => {
                    *a = random_normal(a.rows(), a.cols(), 0.3, &mut rng);
                    *b = random_normal(b.rows(), b.cols(), 0.3, &mut rng);
                }
                GlobalModule::Plora(stack) => {
                    for c in stack.components.iter_mut() {
                        c.a = random_normal(1, c.a.cols(), 0.3, &mut rng);
                        c.b = random_normal(c.b.rows(), 1, 0.3, &mut rng);
                    }
                }
                GlobalModule::FullDelta { delta } => {
                    *delta = random_normal(delta.rows(), delta.cols(), 0.3, &mut rng);
                }
            }
        }
        g
    }

    fn upload_of(state: &ClientRoundState) -> Upload {
        Upload::from_state(state, 1.0)
    }

    fn perturb(state: &mut ClientRoundState, seed: u64) {
        let root = RngStream::new(seed);
        for (l, m) in state.modules.iter_mut().enumerate() {
            let mut rng = root.derive(7, state.client_id as u64, l as u64);
            for c in m.trainable.components.iter_mut() {
                let da = random_normal(1, c.a.cols(), 0.1, &mut rng);
                let db = random_normal(c.b.rows(), 1, 0.1, &mut rng);
                c.a.add_scaled(&da, 1.0).unwrap();
                c.b.add_scaled(&db, 1.0).unwrap();
            }
        }
    }

    #[test]
    fn fedplora_full_rank_selects_everything() {
        let g = trained_global(Method::FedPlora, 4, 1);
        let bb = backbone_for(&dims(), 2);
        let mut rng = RngStream::new(3).derive(1, 0, 0);
        let c = init_fedplora(&g, &bb, 0, 4, SelectionRule::Fold, &mut rng).unwrap();
        for m in &c.modules {
            assert_eq!(m.selected.as_deref(), Some(&[0, 1, 2, 3][..]));
            assert_eq!(frobenius_norm(m.target.fold_delta()), 0.0);
        }
    }

    #[test]
    fn weight_norm_rule_picks_largest_components() {
        // Component norms 3, 1, 2 with r_i = 2 must pick indices {0, 2}.
        let mut g = trained_global(Method::FedPlora, 3, 4);
        for m in g.modules.iter_mut() {
            if let GlobalModule::Plora(stack) = m {
                let k = stack.components[0].a.cols();
                let d = stack.components[0].b.rows();
                let unit_a = |k: usize| {
                    let mut v = vec![0.0; k];
                    v[0] = 1.0;
                    Matrix::new(1, k, v).unwrap()
                };
                let col_b = |d: usize, s: f64| {
                    let mut v = vec![0.0; d];
                    v[0] = s;
                    Matrix::new(d, 1, v).unwrap()
                };
                stack.components[0] = OneRank { a: unit_a(k), b: col_b(d, 3.0) };
                stack.components[1] = OneRank { a: unit_a(k), b: col_b(d, 1.0) };
                stack.components[2] = OneRank { a: unit_a(k), b: col_b(d, 2.0) };
            }
        }
        let bb = backbone_for(&dims(), 5);
        let mut rng = RngStream::new(6).derive(1, 0, 0);
        let c = init_fedplora(&g, &bb, 0, 2, SelectionRule::WeightNorm, &mut rng).unwrap();
        for m in &c.modules {
            assert_eq!(m.selected.as_deref(), Some(&[0, 2][..]));
        }
    }

    #[test]
    fn weight_norm_ties_break_to_lower_index() {
        let mut g = trained_global(Method::FedPlora, 3, 7);
        for m in g.modules.iter_mut() {
            if let GlobalModule::Plora(stack) = m {
                let proto = stack.components[0].clone();
                stack.components[1] = proto.clone();
                stack.components[2] = proto;
            }
        }
        let bb = backbone_for(&dims(), 8);
        let mut rng = RngStream::new(9).derive(1, 0, 0);
        let c = init_fedplora(&g, &bb, 0, 2, SelectionRule::WeightNorm, &mut rng).unwrap();
        for m in &c.modules {
            assert_eq!(m.selected.as_deref(), Some(&[0, 1][..]));
        }
    }

    #[test]
    fn fold_preserves_global_effective_weight() {
        // The zero-retention property: at initialization the client's
        // effective weight equals the global one for every folding rule.
        let g = trained_global(Method::FedPlora, 5, 10);
        let bb = backbone_for(&dims(), 11);
        for rule in [SelectionRule::Fold, SelectionRule::FixedPrefix, SelectionRule::WeightNorm] {
            for r_i in 1..=5 {
                let mut rng = RngStream::new(12).derive(1, r_i as u64, 0);
                let c = init_fedplora(&g, &bb, 0, r_i, rule, &mut rng).unwrap();
                for l in 0..bb.len() {
                    let client_w = c.effective_weight(l).unwrap();
                    let global_w = g.effective_weight(l, &bb[l]).unwrap();
                    let gap = frobenius_norm(&client_w.sub(&global_w).unwrap());
                    assert!(gap <= 1e-12, "rule {:?} r_i {} gap {}", rule, r_i, gap);
                }
            }
        }
    }

    #[test]
    fn drop_rule_discards_unselected_mass() {
        let g = trained_global(Method::FedPlora, 5, 13);
        let bb = backbone_for(&dims(), 14);
        let mut rng = RngStream::new(15).derive(1, 0, 0);
        let c = init_fedplora(&g, &bb, 0, 2, SelectionRule::Drop, &mut rng).unwrap();
        for (l, m) in c.modules.iter().enumerate() {
            assert_eq!(frobenius_norm(m.target.fold_delta()), 0.0);
            // The client weight misses exactly the unselected components.
            let client_w = c.effective_weight(l).unwrap();
            let global_w = g.effective_weight(l, &bb[l]).unwrap();
            let gap = frobenius_norm(&global_w.sub(&client_w).unwrap());
            let stack = match &g.modules[l] {
                GlobalModule::Plora(s) => s,
                _ => unreachable!(),
            };
            let selected = m.selected.as_ref().unwrap();
            let mut missing = Matrix::zeros(bb[l].rows(), bb[l].cols());
            for (j, comp) in stack.components.iter().enumerate() {
                if !selected.contains(&j) {
                    missing.add_scaled(&matmul(&comp.b, &comp.a).unwrap(), stack.scale).unwrap();
                }
            }
            assert!((gap - frobenius_norm(&missing)).abs() < 1e-12);
        }
    }

    #[test]
    fn fedit_copies_verbatim_and_rejects_other_ranks() {
        let g = trained_global(Method::FedIt, 3, 16);
        let bb = backbone_for(&dims(), 17);
        let c = init_fedit(&g, &bb, 0, 3).unwrap();
        for l in 0..bb.len() {
            let (a, b) = expect_adapter(&g, l).unwrap();
            let pair = crate::adapters::plora_to_lora(&c.modules[l].trainable).unwrap();
            assert_eq!(&pair.a, a);
            assert_eq!(&pair.b, b);
        }
        assert!(init_fedit(&g, &bb, 0, 2).is_err());
    }

    #[test]
    fn fedit_client_copies_do_not_alias_global() {
        let g = trained_global(Method::FedIt, 3, 18);
        let bb = backbone_for(&dims(), 19);
        let snapshot = g.clone();
        let mut c = init_fedit(&g, &bb, 0, 3).unwrap();
        perturb(&mut c, 20);
        assert_eq!(g, snapshot);
    }

    #[test]
    fn flora_init_merges_delta_and_zeroes_local_update() {
        let g = trained_global(Method::Flora, 3, 21);
        let bb = backbone_for(&dims(), 22);
        let mut rng = RngStream::new(23).derive(1, 0, 0);
        let c = init_flora(&g, &bb, 0, 2, 0.02, &mut rng).unwrap();
        for l in 0..bb.len() {
            // b = 0 means the local update starts at zero.
            let local = plora_delta(&c.modules[l].trainable).unwrap();
            assert_eq!(frobenius_norm(&local), 0.0);
            // and the effective weight is exactly w0 + global delta.
            let expect = g.effective_weight(l, &bb[l]).unwrap();
            let got = c.effective_weight(l).unwrap();
            assert_eq!(got, expect);
        }
        // Different streams give different fresh draws.
        let c2 = init_flora(
            &g,
            &bb,
            1,
            2,
            0.02,
            &mut RngStream::new(23).derive(1, 1, 0),
        )
        .unwrap();
        assert_ne!(
            c.modules[0].trainable.components[0].a,
            c2.modules[0].trainable.components[0].a
        );
    }

    #[test]
    fn flexlora_truncation_is_lossless_at_matching_rank() {
        // Build a delta of exact rank 2 and hand it to a rank-2 client.
        let mut g = trained_global(Method::FlexLora, 4, 24);
        let root = RngStream::new(25);
        for (l, m) in g.modules.iter_mut().enumerate() {
            if let GlobalModule::FullDelta { delta } = m {
                let mut rng = root.derive(2, 0, l as u64);
                let b = random_normal(delta.rows(), 2, 0.5, &mut rng);
                let a = random_normal(2, delta.cols(), 0.5, &mut rng);
                *delta = matmul(&b, &a).unwrap();
            }
        }
        let bb = backbone_for(&dims(), 26);
        let c = init_flexlora(&g, &bb, 0, 2).unwrap();
        for l in 0..bb.len() {
            let client_delta = plora_delta(&c.modules[l].trainable).unwrap();
            let global_delta = expect_full_delta(&g, l).unwrap();
            let gap = frobenius_norm(&client_delta.sub(global_delta).unwrap());
            assert!(gap <= 1e-9, "module {} gap {}", l, gap);
        }
    }

    #[test]
    fn flexlora_full_rank_matches_best_approximation() {
        let g = trained_global(Method::FlexLora, 4, 27);
        let bb = backbone_for(&dims(), 28);
        let c = init_flexlora(&g, &bb, 0, 4).unwrap();
        for l in 0..bb.len() {
            let delta = expect_full_delta(&g, l).unwrap();
            let (u, s, vt) = truncated_svd(delta, 4).unwrap();
            let best = svd_reconstruct(&u, &s, &vt).unwrap();
            let client_delta = plora_delta(&c.modules[l].trainable).unwrap();
            let gap = frobenius_norm(&client_delta.sub(&best).unwrap());
            assert!(gap <= 1e-9, "module {} gap {}", l, gap);
        }
    }

    #[test]
    fn flexlora_rejects_rank_beyond_min_dim() {
        // Module dims include (4, 6): min dim 4, so R = 5 must fail.
        let root = RngStream::new(29);
        let g = GlobalState::init(
            Method::FlexLora,
            &dims(),
            5,
            0.2,
            &mut root.derive(0, 0, 0),
        )
        .unwrap();
        let bb = backbone_for(&dims(), 30);
        assert!(init_flexlora(&g, &bb, 0, 5).is_err());
    }

    #[test]
    fn hetlora_truncation_slices() {
        let g = trained_global(Method::HetLora, 3, 31);
        let bb = backbone_for(&dims(), 32);
        // Full rank: bit-exact copy.
        let c = init_hetlora(&g, &bb, 0, 3).unwrap();
        for l in 0..bb.len() {
            let (a, b) = expect_adapter(&g, l).unwrap();
            let pair = crate::adapters::plora_to_lora(&c.modules[l].trainable).unwrap();
            assert_eq!(&pair.a, a);
            assert_eq!(&pair.b, b);
        }
        // Rank 1: exactly the first outer product.
        let c1 = init_hetlora(&g, &bb, 0, 1).unwrap();
        for l in 0..bb.len() {
            let (a, b) = expect_adapter(&g, l).unwrap();
            let first =
                matmul(&b.slice_cols(0, 1).unwrap(), &a.slice_rows(0, 1).unwrap()).unwrap();
            let client_delta = plora_delta(&c1.modules[l].trainable).unwrap();
            assert_eq!(client_delta, first);
        }
    }

    #[test]
    fn fedplora_aggregation_single_full_client() {
        let g = trained_global(Method::FedPlora, 3, 33);
        let bb = backbone_for(&dims(), 34);
        let mut rng = RngStream::new(35).derive(1, 0, 0);
        let mut c = init_fedplora(&g, &bb, 0, 3, SelectionRule::Fold, &mut rng).unwrap();
        perturb(&mut c, 36);
        let next = aggregate_fedplora(&g, &[upload_of(&c)]).unwrap();
        for l in 0..bb.len() {
            let agg = expect_plora(&next, l).unwrap();
            for (j, comp) in agg.components.iter().enumerate() {
                assert_eq!(comp, &c.modules[l].trainable.components[j]);
            }
        }
    }

    #[test]
    fn fedplora_aggregation_means_and_carry_over() {
        let g = trained_global(Method::FedPlora, 4, 37);
        // Hand-built selections: client 0 takes {0,1}, client 1 takes {1,2}.
        // Component 3 is selected by nobody.
        let mk = |id: usize, sel: Vec<usize>, seed: u64| -> Upload {
            let mut modules = Vec::new();
            for (l, _) in dims().iter().enumerate() {
                let stack = expect_plora(&g, l).unwrap();
                let mut components: Vec<OneRank> =
                    sel.iter().map(|&j| stack.components[j].clone()).collect();
                let mut rng = RngStream::new(seed).derive(3, id as u64, l as u64);
                for c in components.iter_mut() {
                    c.a = random_normal(1, c.a.cols(), 0.5, &mut rng);
                    c.b = random_normal(c.b.rows(), 1, 0.5, &mut rng);
                }
                modules.push(UploadModule {
                    selected: Some(sel.clone()),
                    stack: PloraStack { components, scale: stack.scale },
                });
            }
            Upload { client_id: id, rank: sel.len(), weight: 1.0, modules }
        };
        let u0 = mk(0, vec![0, 1], 40);
        let u1 = mk(1, vec![1, 2], 41);
        let next = aggregate_fedplora(&g, &[u1.clone(), u0.clone()]).unwrap();
        for l in 0..dims().len() {
            let prev_stack = expect_plora(&g, l).unwrap();
            let agg = expect_plora(&next, l).unwrap();
            // j=0: only client 0.
            assert_eq!(agg.components[0], u0.modules[l].stack.components[0]);
            // j=1: mean of both clients' second/first components.
            let a_mid = u0.modules[l].stack.components[1]
                .a
                .add(&u1.modules[l].stack.components[0].a)
                .unwrap()
                .scale(0.5);
            let b_mid = u0.modules[l].stack.components[1]
                .b
                .add(&u1.modules[l].stack.components[0].b)
                .unwrap()
                .scale(0.5);
            let gap_a = frobenius_norm(&agg.components[1].a.sub(&a_mid).unwrap());
            let gap_b = frobenius_norm(&agg.components[1].b.sub(&b_mid).unwrap());
            assert!(gap_a <= 1e-15 && gap_b <= 1e-15);
            // j=2: only client 1.
            assert_eq!(agg.components[2], u1.modules[l].stack.components[1]);
            // j=3: nobody, carried over bit-identical.
            assert_eq!(agg.components[3], prev_stack.components[3]);
        }
    }

    #[test]
    fn fedit_aggregation_midpoint_and_degenerate_weights() {
        let g = trained_global(Method::FedIt, 3, 42);
        let bb = backbone_for(&dims(), 43);
        let mut c0 = init_fedit(&g, &bb, 0, 3).unwrap();
        let mut c1 = init_fedit(&g, &bb, 1, 3).unwrap();
        perturb(&mut c0, 44);
        perturb(&mut c1, 45);

        // identical uploads reproduce the upload
        let same = aggregate_fedit(&g, &[upload_of(&c0), upload_of(&c0)]).unwrap();
        for l in 0..bb.len() {
            let (a, _) = expect_adapter(&same, l).unwrap();
            let pair = crate::adapters::plora_to_lora(&c0.modules[l].trainable).unwrap();
            let gap = frobenius_norm(&a.sub(&pair.a).unwrap());
            assert!(gap <= 1e-15);
        }

        // uniform weights give the entrywise midpoint
        let mid = aggregate_fedit(&g, &[upload_of(&c0), upload_of(&c1)]).unwrap();
        for l in 0..bb.len() {
            let (a, b) = expect_adapter(&mid, l).unwrap();
            let p0 = crate::adapters::plora_to_lora(&c0.modules[l].trainable).unwrap();
            let p1 = crate::adapters::plora_to_lora(&c1.modules[l].trainable).unwrap();
            let ea = p0.a.add(&p1.a).unwrap().scale(0.5);
            let eb = p0.b.add(&p1.b).unwrap().scale(0.5);
            assert!(frobenius_norm(&a.sub(&ea).unwrap()) <= 1e-15);
            assert!(frobenius_norm(&b.sub(&eb).unwrap()) <= 1e-15);
        }

        // weight (1, 0) returns the first upload verbatim
        let mut w0 = upload_of(&c0);
        let mut w1 = upload_of(&c1);
        w0.weight = 1.0;
        w1.weight = 0.0;
        let first = aggregate_fedit(&g, &[w0, w1]).unwrap();
        for l in 0..bb.len() {
            let (a, b) = expect_adapter(&first, l).unwrap();
            let p0 = crate::adapters::plora_to_lora(&c0.modules[l].trainable).unwrap();
            assert!(frobenius_norm(&a.sub(&p0.a).unwrap()) <= 1e-15);
            assert!(frobenius_norm(&b.sub(&p0.b).unwrap()) <= 1e-15);
        }
    }

    #[test]
    fn flora_aggregation_adds_mean_product_and_tracks_stack_norms() {
        let g = trained_global(Method::Flora, 3, 46);
        let bb = backbone_for(&dims(), 47);
        let mut rng0 = RngStream::new(48).derive(1, 0, 0);
        let mut rng1 = RngStream::new(48).derive(1, 1, 0);
        let mut c0 = init_flora(&g, &bb, 0, 1, 0.02, &mut rng0).unwrap();
        let mut c1 = init_flora(&g, &bb, 1, 1, 0.02, &mut rng1).unwrap();

        // all-zero b leaves the delta unchanged
        let unchanged = aggregate_flora(&g, &[upload_of(&c0), upload_of(&c1)]).unwrap();
        for l in 0..bb.len() {
            assert_eq!(
                expect_full_delta(&unchanged, l).unwrap(),
                expect_full_delta(&g, l).unwrap()
            );
        }

        perturb(&mut c0, 49);
        perturb(&mut c1, 50);
        let next = aggregate_flora(&g, &[upload_of(&c0), upload_of(&c1)]).unwrap();
        for l in 0..bb.len() {
            let inc = upload_of(&c0)
                .delta(l)
                .unwrap()
                .add(&upload_of(&c1).delta(l).unwrap())
                .unwrap()
                .scale(0.5);
            let expect = expect_full_delta(&g, l).unwrap().add(&inc).unwrap();
            let gap = frobenius_norm(&expect_full_delta(&next, l).unwrap().sub(&expect).unwrap());
            assert!(gap <= 1e-14, "module {} gap {}", l, gap);
            // stack norm bookkeeping holds the realized squared norms
            let mut a_sq = 0.0;
            let mut b_sq = 0.0;
            for c in [&c0, &c1] {
                for comp in &c.modules[l].trainable.components {
                    a_sq += comp.a.data().iter().map(|x| x * x).sum::<f64>();
                    b_sq += comp.b.data().iter().map(|x| x * x).sum::<f64>();
                }
            }
            let (ra, rb) = next.flora_prev_stack_sq[l];
            assert!((ra - a_sq).abs() <= 1e-14 && (rb - b_sq).abs() <= 1e-14);
        }
    }

    #[test]
    fn flora_stacking_equals_sum_of_products() {
        // Concatenate factors explicitly and multiply: the result must match
        // the sum of per-client products exactly (the identity the additive
        // implementation relies on).
        let root = RngStream::new(51);
        let (d, k, v) = (6, 5, 3);
        let mut stacked_b = Matrix::zeros(d, 0);
        let mut stacked_a = Matrix::zeros(0, k);
        let mut sum = Matrix::zeros(d, k);
        for i in 0..v {
            let mut rng = root.derive(4, i as u64, 0);
            let b = random_normal(d, 2, 0.5, &mut rng);
            let a = random_normal(2, k, 0.5, &mut rng);
            sum.add_scaled(&matmul(&b, &a).unwrap(), 1.0 / v as f64).unwrap();
            stacked_b = hconcat(&stacked_b, &b.scale(1.0 / v as f64));
            stacked_a = vconcat(&stacked_a, &a);
        }
        let product = matmul(&stacked_b, &stacked_a).unwrap();
        let gap = frobenius_norm(&product.sub(&sum).unwrap());
        assert!(gap <= 1e-13, "stacking identity gap {}", gap);
    }

    fn hconcat(left: &Matrix, right: &Matrix) -> Matrix {
        let rows = right.rows().max(left.rows());
        let mut out = Matrix::zeros(rows, left.cols() + right.cols());
        for i in 0..left.rows() {
            for j in 0..left.cols() {
                out.set(i, j, left.get(i, j));
            }
        }
        for i in 0..right.rows() {
            for j in 0..right.cols() {
                out.set(i, left.cols() + j, right.get(i, j));
            }
        }
        out
    }

    fn vconcat(top: &Matrix, bottom: &Matrix) -> Matrix {
        let cols = bottom.cols().max(top.cols());
        let mut out = Matrix::zeros(top.rows() + bottom.rows(), cols);
        for i in 0..top.rows() {
            for j in 0..top.cols() {
                out.set(i, j, top.get(i, j));
            }
        }
        for i in 0..bottom.rows() {
            for j in 0..bottom.cols() {
                out.set(top.rows() + i, j, bottom.get(i, j));
            }
        }
        out
    }

    #[test]
    fn flexlora_aggregation_replaces_and_ignores_prev() {
        let g = trained_global(Method::FlexLora, 3, 52);
        let bb = backbone_for(&dims(), 53);
        let mut c0 = init_flexlora(&g, &bb, 0, 2).unwrap();
        perturb(&mut c0, 54);

        let single = aggregate_flexlora(&g, &[upload_of(&c0)]).unwrap();
        for l in 0..bb.len() {
            let expect = upload_of(&c0).delta(l).unwrap();
            assert_eq!(expect_full_delta(&single, l).unwrap(), &expect);
        }

        // Same uploads, different previous delta: identical result.
        let mut other_prev = g.clone();
        for m in other_prev.modules.iter_mut() {
            if let GlobalModule::FullDelta { delta } = m {
                *delta = delta.scale(-3.5);
            }
        }
        let from_other = aggregate_flexlora(&other_prev, &[upload_of(&c0)]).unwrap();
        for l in 0..bb.len() {
            assert_eq!(
                expect_full_delta(&single, l).unwrap(),
                expect_full_delta(&from_other, l).unwrap()
            );
        }
    }

    #[test]
    fn hetlora_pad_then_mean_oracle() {
        let g = trained_global(Method::HetLora, 2, 55);
        let bb = backbone_for(&dims(), 56);
        let mut c0 = init_hetlora(&g, &bb, 0, 1).unwrap();
        let mut c1 = init_hetlora(&g, &bb, 1, 2).unwrap();
        perturb(&mut c0, 57);
        perturb(&mut c1, 58);
        let next = aggregate_hetlora(&g, &[upload_of(&c0), upload_of(&c1)]).unwrap();
        for l in 0..bb.len() {
            let (a, b) = expect_adapter(&next, l).unwrap();
            let p0 = crate::adapters::plora_to_lora(&c0.modules[l].trainable).unwrap();
            let p1 = crate::adapters::plora_to_lora(&c1.modules[l].trainable).unwrap();
            // Row 0 averages both clients; row 1 averages client 1 with zero.
            for col in 0..a.cols() {
                let want0 = 0.5 * (p0.a.get(0, col) + p1.a.get(0, col));
                let want1 = 0.5 * p1.a.get(1, col);
                assert!((a.get(0, col) - want0).abs() <= 1e-15);
                assert!((a.get(1, col) - want1).abs() <= 1e-15);
            }
            for row in 0..b.rows() {
                let want0 = 0.5 * (p0.b.get(row, 0) + p1.b.get(row, 0));
                let want1 = 0.5 * p1.b.get(row, 1);
                assert!((b.get(row, 0) - want0).abs() <= 1e-15);
                assert!((b.get(row, 1) - want1).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn hetlora_equals_fedit_when_homogeneous() {
        // Same initial adapters, same uploads: the two aggregators must
        // produce the same global state when every rank is R.
        let root = RngStream::new(59);
        let g_het =
            GlobalState::init(Method::HetLora, &dims(), 3, 0.2, &mut root.derive(0, 0, 0))
                .unwrap();
        let g_fit =
            GlobalState::init(Method::FedIt, &dims(), 3, 0.2, &mut root.derive(0, 0, 0)).unwrap();
        let bb = backbone_for(&dims(), 60);
        let mut c0h = init_hetlora(&g_het, &bb, 0, 3).unwrap();
        let mut c1h = init_hetlora(&g_het, &bb, 1, 3).unwrap();
        perturb(&mut c0h, 61);
        perturb(&mut c1h, 62);
        // FedIT clients receive the same perturbed states (identical local
        // training by construction).
        let mut c0f = init_fedit(&g_fit, &bb, 0, 3).unwrap();
        let mut c1f = init_fedit(&g_fit, &bb, 1, 3).unwrap();
        perturb(&mut c0f, 61);
        perturb(&mut c1f, 62);
        let next_h = aggregate_hetlora(&g_het, &[upload_of(&c0h), upload_of(&c1h)]).unwrap();
        let next_f = aggregate_fedit(&g_fit, &[upload_of(&c0f), upload_of(&c1f)]).unwrap();
        for l in 0..bb.len() {
            let (ah, bh) = expect_adapter(&next_h, l).unwrap();
            let (af, bf) = expect_adapter(&next_f, l).unwrap();
            assert!(frobenius_norm(&ah.sub(af).unwrap()) <= 1e-12);
            assert!(frobenius_norm(&bh.sub(bf).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn aggregation_order_does_not_depend_on_upload_order() {
        let g = trained_global(Method::FedPlora, 4, 63);
        let bb = backbone_for(&dims(), 64);
        let mut clients = Vec::new();
        for id in 0..3 {
            let mut rng = RngStream::new(65).derive(1, id as u64, 0);
            let mut c = init_fedplora(&g, &bb, id, 2, SelectionRule::Fold, &mut rng).unwrap();
            perturb(&mut c, 66);
            clients.push(c);
        }
        let ups: Vec<Upload> = clients.iter().map(upload_of).collect();
        let forward = aggregate_fedplora(&g, &ups).unwrap();
        let reversed: Vec<Upload> = ups.iter().rev().cloned().collect();
        let backward = aggregate_fedplora(&g, &reversed).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn initial_adapter_states_agree_across_adapter_methods() {
        // FedIT, HETLoRA, and the one-rank stack method draw the same A
        // under the same stream, so their initial dense updates all vanish
        // and their A factors coincide.
        let root = RngStream::new(67);
        let g_fit =
            GlobalState::init(Method::FedIt, &dims(), 3, 0.2, &mut root.derive(0, 0, 0)).unwrap();
        let g_het =
            GlobalState::init(Method::HetLora, &dims(), 3, 0.2, &mut root.derive(0, 0, 0))
                .unwrap();
        let g_plo =
            GlobalState::init(Method::FedPlora, &dims(), 3, 0.2, &mut root.derive(0, 0, 0))
                .unwrap();
        for l in 0..dims().len() {
            let (a_fit, _) = expect_adapter(&g_fit, l).unwrap();
            let (a_het, _) = expect_adapter(&g_het, l).unwrap();
            let stack = expect_plora(&g_plo, l).unwrap();
            assert_eq!(a_fit, a_het);
            for j in 0..3 {
                assert_eq!(stack.components[j].a, a_fit.slice_rows(j, j + 1).unwrap());
            }
            assert_eq!(frobenius_norm(&g_fit.delta(l).unwrap()), 0.0);
            assert_eq!(frobenius_norm(&g_plo.delta(l).unwrap()), 0.0);
        }
    }
}
