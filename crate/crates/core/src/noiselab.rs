//! Retention and aggregation noise metrics with closed-form verifiers.
//!
//! Two quantities are tracked per round. Initialization noise measures the
//! information a client fails to retain when the broadcast state is forced
//! into its (possibly smaller) local adapter. Aggregation noise is the
//! Frobenius distance between the server's actual update and an ideal
//! average of client updates. Each method's metric has an independent
//! closed-form route used to cross-check the brute-force computation.

use serde::{Deserialize, Serialize};

use crate::numkit::{frobenius_norm, matmul, truncated_svd, vec_norm, Matrix};
use crate::strategies::{ClientRoundState, GlobalModule, GlobalState, Method, Upload};
use crate::{Error, Result};

/// Per-round noise summary, serialized into round records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    /// Total retention loss at client initialization (Frobenius units,
    /// summed over modules and clients).
    pub init_noise: f64,
    /// Headline aggregation noise (rank-wise ideal for the one-rank stack
    /// method, client-mean ideal otherwise).
    pub agg_noise: f64,
    /// Independent closed-form value of agg_noise where one exists.
    pub agg_noise_closed_form: Option<f64>,
    /// Cauchy-Schwarz style upper bound (one-rank stack method only).
    pub cs_bound: Option<f64>,
    /// Aggregation noise against the client-mean ideal, reported separately
    /// for the one-rank stack method whose headline uses the rank-wise ideal.
    pub agg_noise_full_client: Option<f64>,
    /// Per-module breakdown: (init_noise, agg_noise) per target module.
    pub per_module: Vec<ModuleNoise>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleNoise {
    pub init_noise: f64,
    pub agg_noise: f64,
}

impl NoiseReport {
    /// All values finite and non-negative; noise within its bound.
    pub fn validate(&self) -> Result<()> {
        let mut all = vec![self.init_noise, self.agg_noise];
        all.extend(self.agg_noise_closed_form);
        all.extend(self.cs_bound);
        all.extend(self.agg_noise_full_client);
        for m in &self.per_module {
            all.push(m.init_noise);
            all.push(m.agg_noise);
        }
        for v in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NonFinite(format!("noise report value {}", v)));
            }
        }
        if let Some(bound) = self.cs_bound {
            if self.agg_noise > bound + 1e-9 {
                return Err(Error::Degenerate(format!(
                    "aggregation noise {} exceeds its bound {}",
                    self.agg_noise, bound
                )));
            }
        }
        Ok(())
    }
}

fn row_block_norm(m: &Matrix, lo: usize, hi: usize) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in lo..hi {
        for &x in m.row(i) {
            acc += x * x;
        }
    }
    acc.sqrt()
}

fn col_block_norm(m: &Matrix, lo: usize, hi: usize) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..m.rows() {
        for j in lo..hi {
            let x = m.get(i, j);
            acc += x * x;
        }
    }
    acc.sqrt()
}

/// Retention loss at initialization, per target module. Summed over the
/// sampled clients.
///
/// Adapter-copy methods lose the tails they truncate; the one-rank stack
/// method folds what it does not train, so it loses nothing; the stacking
/// method cannot retain the previous round's stacked factors (their norms
/// are carried in the global bookkeeping) and additionally pays the realized
/// norm of its fresh random draws.
pub fn init_noise_per_module(
    prev: &GlobalState,
    inits: &[ClientRoundState],
) -> Result<Vec<f64>> {
    let modules = prev.module_count();
    let mut per_module = vec![0.0f64; modules];
    match prev.method {
        Method::FedIt | Method::FedPlora => {}
        Method::HetLora => {
            for l in 0..modules {
                let (a, b) = match &prev.modules[l] {
                    GlobalModule::Adapter { a, b } => (a, b),
                    _ => return Err(Error::Config("adapter state expected".into())),
                };
                for c in inits {
                    per_module[l] += row_block_norm(a, c.rank, prev.rank)
                        + col_block_norm(b, c.rank, prev.rank);
                }
            }
        }
        Method::FlexLora => {
            for l in 0..modules {
                let delta = match &prev.modules[l] {
                    GlobalModule::FullDelta { delta } => delta,
                    _ => return Err(Error::Config("dense delta state expected".into())),
                };
                // The same deterministic factorization the client init uses:
                // a = rows of V^T, b = columns of U scaled by S.
                let (u, s, vt) = truncated_svd(delta, prev.rank)?;
                let mut b_svd = u.clone();
                for j in 0..prev.rank {
                    for i in 0..b_svd.rows() {
                        let v = b_svd.get(i, j) * s[j];
                        b_svd.set(i, j, v);
                    }
                }
                for c in inits {
                    per_module[l] += row_block_norm(&vt, c.rank, prev.rank)
                        + col_block_norm(&b_svd, c.rank, prev.rank);
                }
            }
        }
        Method::Flora => {
            for l in 0..modules {
                let (a_sq, b_sq) = prev.flora_prev_stack_sq[l];
                // Every sampled client fails to retain the previous round's
                // stacked factors...
                per_module[l] += inits.len() as f64 * (a_sq.sqrt() + b_sq.sqrt());
                // ...and the realized squared norm of its fresh draws is the
                // randomness term.
                for c in inits {
                    let m = &c.modules[l];
                    for comp in &m.trainable.components {
                        per_module[l] += comp.a.data().iter().map(|x| x * x).sum::<f64>();
                    }
                }
            }
        }
    }
    Ok(per_module)
}

pub fn init_noise(prev: &GlobalState, inits: &[ClientRoundState]) -> Result<f64> {
    Ok(init_noise_per_module(prev, inits)?.iter().sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdealMode {
    /// Mean over participants of each client's whole update.
    FullClient,
    /// Rank-wise mean of one-rank products; components nobody trained are
    /// carried over from the previous global state.
    PerRank,
}

fn upload_weights(uploads: &[Upload]) -> Result<Vec<f64>> {
    if uploads.is_empty() {
        return Err(Error::Config("no uploads for an ideal update".into()));
    }
    let total: f64 = uploads.iter().map(|u| u.weight).sum();
    if !(total > 0.0) {
        return Err(Error::Config("upload weights must sum to > 0".into()));
    }
    Ok(uploads.iter().map(|u| u.weight / total).collect())
}

fn weights_are_uniform(uploads: &[Upload]) -> bool {
    uploads
        .iter()
        .all(|u| (u.weight - uploads[0].weight).abs() <= f64::EPSILON * uploads[0].weight.abs())
}

/// The reference update the aggregator is judged against, for module l.
pub fn ideal_update(
    prev: &GlobalState,
    uploads: &[Upload],
    l: usize,
    mode: IdealMode,
) -> Result<Matrix> {
    let omega = upload_weights(uploads)?;
    match mode {
        IdealMode::FullClient => {
            let first = uploads[0].delta(l)?;
            let mut ideal = Matrix::zeros(first.rows(), first.cols());
            for (u, &w) in uploads.iter().zip(&omega) {
                ideal.add_scaled(&u.delta(l)?, w)?;
            }
            Ok(ideal)
        }
        IdealMode::PerRank => {
            let stack = match &prev.modules[l] {
                GlobalModule::Plora(s) => s,
                _ => {
                    return Err(Error::Config(
                        "rank-wise ideal needs a one-rank stack state".into(),
                    ))
                }
            };
            let (d, k) = stack.dims().ok_or_else(|| Error::Shape("empty global stack".into()))?;
            let mut ideal = Matrix::zeros(d, k);
            for j in 0..prev.rank {
                let mut members: Vec<(&Upload, usize)> = Vec::new();
                for u in uploads {
                    let selected = u.modules[l]
                        .selected
                        .as_ref()
                        .ok_or_else(|| Error::Config("upload lacks a selection set".into()))?;
                    if let Ok(pos) = selected.binary_search(&j) {
                        members.push((u, pos));
                    }
                }
                if members.is_empty() {
                    // Carry-over: the server keeps the old component, so the
                    // ideal keeps its product too.
                    let c = &stack.components[j];
                    ideal.add_scaled(&matmul(&c.b, &c.a)?, stack.scale)?;
                    continue;
                }
                let wsum: f64 = members.iter().map(|(u, _)| u.weight).sum();
                for (u, pos) in &members {
                    let c = &u.modules[l].stack.components[*pos];
                    ideal.add_scaled(&matmul(&c.b, &c.a)?, stack.scale * u.weight / wsum)?;
                }
            }
            Ok(ideal)
        }
    }
}

/// ||ideal - actual||_F.
pub fn agg_noise(ideal: &Matrix, actual: &Matrix) -> Result<f64> {
    if ideal.rows() != actual.rows() || ideal.cols() != actual.cols() {
        return Err(Error::Shape(format!(
            "ideal {}x{} vs actual {}x{}",
            ideal.rows(),
            ideal.cols(),
            actual.rows(),
            actual.cols()
        )));
    }
    Ok(frobenius_norm(&ideal.sub(actual)?))
}

/// Closed form for pad-then-mean aggregation noise over padded factor pairs
/// (B_i: d x R, A_i: R x k), uniform weights:
/// (1/v^2) ||(v-1) sum_l B_l A_l - sum_{j != k} B_j A_k||_F.
/// The double loop is deliberate; this is the independent route against the
/// brute-force mean-of-products comparison.
pub fn hetlora_closed_form(pairs: &[(Matrix, Matrix)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("no factor pairs".into()));
    }
    let v = pairs.len();
    let d = pairs[0].0.rows();
    let k = pairs[0].1.cols();
    let mut term = Matrix::zeros(d, k);
    for (b, a) in pairs {
        term.add_scaled(&matmul(b, a)?, (v - 1) as f64)?;
    }
    for (j, (bj, _)) in pairs.iter().enumerate() {
        for (kk, (_, ak)) in pairs.iter().enumerate() {
            if j != kk {
                term.add_scaled(&matmul(bj, ak)?, -1.0)?;
            }
        }
    }
    Ok(frobenius_norm(&term) / (v * v) as f64)
}

/// Closed form for the rank-wise aggregation noise and its bound, module l,
/// uniform weights within each update set:
/// noise = ||sum_j (1/|Q_j|) sum_{i in Q_j} (B_ij - mean)(A_ij - mean)||_F,
/// bound = sum_j (1/|Q_j|) sum_i (||B dev||_2 + ||A dev||_2).
pub fn fedplora_closed_form(
    rank: usize,
    uploads: &[Upload],
    l: usize,
) -> Result<(f64, f64)> {
    if uploads.is_empty() {
        return Err(Error::Config("no uploads".into()));
    }
    let mut term: Option<Matrix> = None;
    let mut bound = 0.0f64;
    for j in 0..rank {
        let mut members: Vec<&crate::adapters::OneRank> = Vec::new();
        for u in uploads {
            let selected = u.modules[l]
                .selected
                .as_ref()
                .ok_or_else(|| Error::Config("upload lacks a selection set".into()))?;
            if let Ok(pos) = selected.binary_search(&j) {
                members.push(&u.modules[l].stack.components[pos]);
            }
        }
        if members.len() <= 1 {
            continue;
        }
        let q = members.len() as f64;
        let (d, k) = (members[0].b.rows(), members[0].a.cols());
        let mut a_bar = Matrix::zeros(1, k);
        let mut b_bar = Matrix::zeros(d, 1);
        for c in &members {
            a_bar.add_scaled(&c.a, 1.0 / q)?;
            b_bar.add_scaled(&c.b, 1.0 / q)?;
        }
        let t = term.get_or_insert_with(|| Matrix::zeros(d, k));
        for c in &members {
            let db = c.b.sub(&b_bar)?;
            let da = c.a.sub(&a_bar)?;
            t.add_scaled(&matmul(&db, &da)?, 1.0 / q)?;
            bound += (vec_norm(db.data()) + vec_norm(da.data())) / q;
        }
    }
    let noise = term.map_or(0.0, |t| frobenius_norm(&t));
    Ok((noise, bound))
}

/// sqrt of the squared singular values beyond index `rank`: the loss of the
/// best rank-`rank` approximation, the independent route for SVD-truncation
/// noise.
pub fn svd_tail_norm(m: &Matrix, rank: usize) -> Result<f64> {
    let full = m.rows().min(m.cols());
    if rank >= full {
        return Ok(0.0);
    }
    let (_, s, _) = truncated_svd(m, full)?;
    Ok(s[rank..].iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Aggregation-side metrics for one round.
#[derive(Clone, Debug)]
pub struct AggMetrics {
    pub agg_noise: f64,
    pub agg_noise_closed_form: Option<f64>,
    pub cs_bound: Option<f64>,
    pub agg_noise_full_client: Option<f64>,
    pub per_module: Vec<f64>,
}

/// Compute this round's aggregation noise given the state before and after
/// aggregation and the uploads that produced it.
///
/// Method semantics:
/// - stacking: the round's actual increment vs the client-mean ideal
///   (identically zero up to rounding), closed form 0;
/// - SVD-replacement: the mean update vs its own best rank-R truncation
///   (what the next broadcast can carry), closed form from the singular
///   value tail;
/// - pad-then-mean and homogeneous averaging: product-of-means vs
///   mean-of-products, closed form from the pairwise expansion;
/// - one-rank stacks: rank-wise ideal vs the aggregated state, closed form
///   from per-rank deviations, plus the deviation-norm bound and a separate
///   client-mean figure.
pub fn agg_metrics(
    prev: &GlobalState,
    next: &GlobalState,
    uploads: &[Upload],
) -> Result<AggMetrics> {
    if uploads.is_empty() {
        return Err(Error::Config("no uploads".into()));
    }
    let modules = prev.module_count();
    let uniform = weights_are_uniform(uploads);
    let mut per_module = Vec::with_capacity(modules);
    let mut closed_total: Option<f64> = None;
    let mut bound_total: Option<f64> = None;
    let mut fc_total: Option<f64> = None;
    for l in 0..modules {
        match prev.method {
            Method::Flora => {
                let ideal = ideal_update(prev, uploads, l, IdealMode::FullClient)?;
                let actual_inc = next.delta(l)?.sub(&prev.delta(l)?)?;
                per_module.push(agg_noise(&ideal, &actual_inc)?);
                *closed_total.get_or_insert(0.0) += 0.0;
            }
            Method::FlexLora => {
                let ideal = ideal_update(prev, uploads, l, IdealMode::FullClient)?;
                let (u, s, vt) = truncated_svd(&ideal, prev.rank.min(ideal.rows().min(ideal.cols())))?;
                let truncated = crate::numkit::svd_reconstruct(&u, &s, &vt)?;
                per_module.push(agg_noise(&ideal, &truncated)?);
                *closed_total.get_or_insert(0.0) += svd_tail_norm(&ideal, prev.rank)?;
            }
            Method::HetLora | Method::FedIt => {
                let ideal = ideal_update(prev, uploads, l, IdealMode::FullClient)?;
                let actual = next.delta(l)?;
                per_module.push(agg_noise(&ideal, &actual)?);
                if uniform {
                    let mut pairs = Vec::with_capacity(uploads.len());
                    for u in uploads {
                        let pair = crate::adapters::plora_to_lora(&u.modules[l].stack)?;
                        let mut a = Matrix::zeros(prev.rank, pair.a.cols());
                        let mut b = Matrix::zeros(pair.b.rows(), prev.rank);
                        for j in 0..u.rank {
                            for c in 0..pair.a.cols() {
                                a.set(j, c, pair.a.get(j, c));
                            }
                            for r in 0..pair.b.rows() {
                                b.set(r, j, pair.b.get(r, j));
                            }
                        }
                        pairs.push((b, a));
                    }
                    *closed_total.get_or_insert(0.0) += hetlora_closed_form(&pairs)?;
                }
            }
            Method::FedPlora => {
                let ideal_pr = ideal_update(prev, uploads, l, IdealMode::PerRank)?;
                let actual = next.delta(l)?;
                per_module.push(agg_noise(&ideal_pr, &actual)?);
                let ideal_fc = ideal_update(prev, uploads, l, IdealMode::FullClient)?;
                *fc_total.get_or_insert(0.0) += agg_noise(&ideal_fc, &actual)?;
                if uniform {
                    let (noise, bound) = fedplora_closed_form(prev.rank, uploads, l)?;
                    *closed_total.get_or_insert(0.0) += noise;
                    *bound_total.get_or_insert(0.0) += bound;
                }
            }
        }
    }
    Ok(AggMetrics {
        agg_noise: per_module.iter().sum(),
        agg_noise_closed_form: closed_total,
        cs_bound: bound_total,
        agg_noise_full_client: fc_total,
        per_module,
    })
}

/// Assemble the per-round report from the two measurement points.
pub fn noise_report(init_per_module: &[f64], agg: &AggMetrics) -> NoiseReport {
    let per_module = init_per_module
        .iter()
        .zip(&agg.per_module)
        .map(|(&i, &a)| ModuleNoise { init_noise: i, agg_noise: a })
        .collect();
    NoiseReport {
        init_noise: init_per_module.iter().sum(),
        agg_noise: agg.agg_noise,
        agg_noise_closed_form: agg.agg_noise_closed_form,
        cs_bound: agg.cs_bound,
        agg_noise_full_client: agg.agg_noise_full_client,
        per_module,
    }
}

/// Within-round directional similarity of client components.
///
/// Entry (j, j') averages cosine(a of component j at client i, a of
/// component j' at client i') over ordered client pairs i != i' where both
/// components were trained. Entries with no qualifying pair, or where every
/// qualifying pair had a zero vector, stay None.
pub fn cosine_grid(
    rank: usize,
    uploads: &[Upload],
    l: usize,
) -> Result<(Vec<Vec<Option<f64>>>, Vec<Vec<Option<f64>>>)> {
    if uploads.len() < 2 {
        return Err(Error::Config("cosine grid needs at least two clients".into()));
    }
    // holder[j] lists (client position, component position) pairs.
    let mut holders: Vec<Vec<(usize, usize)>> = vec![Vec::new(); rank];
    for (ci, u) in uploads.iter().enumerate() {
        let selected = u.modules[l]
            .selected
            .as_ref()
            .ok_or_else(|| Error::Config("upload lacks a selection set".into()))?;
        for (pos, &j) in selected.iter().enumerate() {
            if j >= rank {
                return Err(Error::Shape(format!("selected index {} out of rank {}", j, rank)));
            }
            holders[j].push((ci, pos));
        }
    }
    let mut grid_a = vec![vec![None; rank]; rank];
    let mut grid_b = vec![vec![None; rank]; rank];
    for j in 0..rank {
        for jp in 0..rank {
            let mut acc_a = 0.0;
            let mut n_a = 0usize;
            let mut acc_b = 0.0;
            let mut n_b = 0usize;
            for &(ci, pos) in &holders[j] {
                for &(cip, posp) in &holders[jp] {
                    if ci == cip {
                        continue;
                    }
                    let x = &uploads[ci].modules[l].stack.components[pos];
                    let y = &uploads[cip].modules[l].stack.components[posp];
                    if let Ok(c) = crate::numkit::cosine_similarity(x.a.data(), y.a.data()) {
                        acc_a += c;
                        n_a += 1;
                    }
                    if let Ok(c) = crate::numkit::cosine_similarity(x.b.data(), y.b.data()) {
                        acc_b += c;
                        n_b += 1;
                    }
                }
            }
            if n_a > 0 {
                grid_a[j][jp] = Some(acc_a / n_a as f64);
            }
            if n_b > 0 {
                grid_b[j][jp] = Some(acc_b / n_b as f64);
            }
        }
    }
    Ok((grid_a, grid_b))
}
