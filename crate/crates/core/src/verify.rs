//! Self-check suite: every cross-module identity and invariant as a named,
//! independently runnable check. The CLI's verify subcommand prints one
//! line per check; the whole suite is side-effect free.
//!
//! FEDLORA_VERIFY_MUTATE=<check-name> flips a sign inside that check's
//! computation. That exists so the surrounding tooling can prove a broken
//! identity actually turns into a failing exit code instead of passing
//! silently.

use rand::Rng;

use crate::adapters::{
    effective_weight, fold, lora_delta, lora_to_plora, plora_delta, plora_to_lora, LoraPair,
    OneRank, PloraStack, TargetModule,
};
use crate::costmeter::{
    agg_flops, downlink_bytes, temp_memory_bytes, uplink_bytes, CostProfile, ALL_METHODS,
};
use crate::fedengine::{run, sample_clients, ExperimentConfig};
use crate::noiselab::{
    agg_noise, cosine_grid, fedplora_closed_form, hetlora_closed_form, ideal_update,
    init_noise, svd_tail_norm, IdealMode,
};
use crate::numkit::{
    frobenius_norm, matmul, random_normal, svd_reconstruct, truncated_svd, Matrix, RngStream,
};
use crate::strategies::{
    aggregate, init_client, GlobalModule, GlobalState, Method, SelectionRule, Upload,
    UploadModule,
};
use crate::tinynet::{
    backward, finite_diff_grad, forward, max_relative_gradient_gap, Activation, AdapterSiteSet,
    Batch, Loss, MlpSpec, Targets,
};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Empty when passed; the first failing comparison's values otherwise.
    pub detail: String,
}

/// -1.0 when this check is the mutation target, else 1.0.
fn mutation_sign(name: &str) -> f64 {
    match std::env::var("FEDLORA_VERIFY_MUTATE") {
        Ok(v) if v == name => -1.0,
        _ => 1.0,
    }
}

fn ensure(cond: bool, detail: String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Degenerate(detail))
    }
}

fn random_stack(r: usize, d: usize, k: usize, std: f64, seed: u64) -> PloraStack {
    let mut rng = RngStream::new(seed).derive(0, 0, 0);
    let components = (0..r)
        .map(|_| OneRank {
            a: random_normal(1, k, std, &mut rng),
            b: random_normal(d, 1, std, &mut rng),
        })
        .collect();
    PloraStack { components, scale: 1.0 }
}

fn check_plora_lora_equivalence() -> Result<()> {
    let stream = RngStream::new(101);
    for i in 0..40u64 {
        let mut rng = stream.derive(i, 0, 0);
        let d = rng.random_range(1..=32);
        let k = rng.random_range(1..=32);
        let r = rng.random_range(1..=8.min(d).min(k));
        let pair = LoraPair {
            a: random_normal(r, k, 0.7, &mut rng),
            b: random_normal(d, r, 0.7, &mut rng),
            scale: rng.random_range(0.25..2.0),
        };
        let stack = lora_to_plora(&pair);
        let gap = frobenius_norm(&lora_delta(&pair)?.sub(&plora_delta(&stack)?)?);
        let denom = frobenius_norm(&lora_delta(&pair)?).max(1e-300);
        ensure(gap <= 1e-12 * denom, format!("instance {}: relative gap {}", i, gap / denom))?;
        let back = plora_to_lora(&stack)?;
        let gap2 = frobenius_norm(&lora_delta(&back)?.sub(&lora_delta(&pair)?)?);
        ensure(gap2 <= 1e-12 * denom, format!("round-trip gap {}", gap2 / denom))?;
    }
    Ok(())
}

fn check_fold_identity() -> Result<()> {
    let stream = RngStream::new(102);
    for (i, rule) in
        [SelectionRule::Fold, SelectionRule::FixedPrefix, SelectionRule::WeightNorm]
            .into_iter()
            .enumerate()
    {
        let g =
            GlobalState::init(Method::FedPlora, &[(9, 7)], 5, 0.3, &mut stream.derive(0, 0, 0))?;
        // Give b mass so folding moves something.
        let mut g = g;
        if let GlobalModule::Plora(s) = &mut g.modules[0] {
            let mut rng = stream.derive(1, 0, 0);
            for c in &mut s.components {
                c.b = random_normal(9, 1, 0.3, &mut rng);
            }
        }
        let backbone = vec![random_normal(9, 7, 0.5, &mut stream.derive(2, 0, 0))];
        for r_i in 1..=5usize {
            let mut rng = stream.derive(3, (i * 10 + r_i) as u64, 0);
            let client = init_client(&g, &backbone, 0, r_i, rule, 0.02, &mut rng)?;
            let gap = frobenius_norm(
                &client.effective_weight(0)?.sub(&g.effective_weight(0, &backbone[0])?)?,
            );
            ensure(
                gap <= 1e-12,
                format!("{:?} at rank {}: effective weight gap {}", rule, r_i, gap),
            )?;
        }
    }
    Ok(())
}

fn check_gradients() -> Result<()> {
    let stream = RngStream::new(103);
    for (i, (act, loss)) in [
        (Activation::Relu, Loss::Mse),
        (Activation::Identity, Loss::Mse),
        (Activation::Relu, Loss::CrossEntropy),
    ]
    .into_iter()
    .enumerate()
    {
        let spec = MlpSpec { layer_dims: vec![5, 6, 4], activation: act, loss };
        let mut rng = stream.derive(i as u64, 0, 0);
        let frozen: Vec<TargetModule> = (0..2)
            .map(|l| {
                let (d, k) = spec.weight_dims(l);
                TargetModule::new(random_normal(d, k, 0.5, &mut rng))
            })
            .collect();
        let sites = AdapterSiteSet {
            sites: (0..2)
                .map(|l| {
                    let (d, k) = spec.weight_dims(l);
                    PloraStack {
                        components: (0..2)
                            .map(|_| OneRank {
                                a: random_normal(1, k, 0.4, &mut rng),
                                b: random_normal(d, 1, 0.4, &mut rng),
                            })
                            .collect(),
                        scale: 1.0,
                    }
                })
                .collect(),
        };
        // Resample inputs while any pre-activation sits near the relu kink.
        let batch = loop {
            let inputs = random_normal(6, 5, 1.0, &mut rng);
            let targets = match loss {
                Loss::Mse => Targets::Regression(random_normal(6, 4, 1.0, &mut rng)),
                Loss::CrossEntropy => {
                    Targets::Labels((0..6).map(|_| rng.random_range(0..4)).collect())
                }
            };
            let b = Batch { inputs, targets };
            let (_, cache) = forward(&spec, &frozen, &sites, &b)?;
            if act == Activation::Identity || cache.min_abs_pre_activation() > 1e-4 {
                break b;
            }
        };
        let (_, cache) = forward(&spec, &frozen, &sites, &batch)?;
        let analytic = backward(&spec, &frozen, &sites, &cache, &batch)?;
        let numeric = finite_diff_grad(&spec, &frozen, &sites, &batch, 1e-5)?;
        let gap = max_relative_gradient_gap(&analytic, &numeric);
        ensure(gap < 1e-5, format!("net {}: gradient gap {}", i, gap))?;
    }
    Ok(())
}

fn plain_upload(id: usize, sel: Option<Vec<usize>>, stack: PloraStack) -> Upload {
    Upload {
        client_id: id,
        rank: stack.rank(),
        weight: 1.0,
        modules: vec![UploadModule { selected: sel, stack }],
    }
}

fn check_hetlora_closed_form() -> Result<()> {
    let sign = mutation_sign("hetlora-closed-form");
    let stream = RngStream::new(104);
    for i in 0..10u64 {
        let mut rng = stream.derive(i, 0, 0);
        let v = 2 + (i as usize % 3);
        let mut pairs = Vec::new();
        for _ in 0..v {
            pairs.push((random_normal(7, 3, 0.4, &mut rng), random_normal(3, 6, 0.4, &mut rng)));
        }
        let vf = v as f64;
        let mut mean_prod = Matrix::zeros(7, 6);
        let mut b_mean = Matrix::zeros(7, 3);
        let mut a_mean = Matrix::zeros(3, 6);
        for (b, a) in &pairs {
            mean_prod.add_scaled(&matmul(b, a)?, 1.0 / vf)?;
            b_mean.add_scaled(b, 1.0 / vf)?;
            a_mean.add_scaled(a, 1.0 / vf)?;
        }
        let brute = frobenius_norm(&mean_prod.sub(&matmul(&b_mean, &a_mean)?)?);
        let closed = sign * hetlora_closed_form(&pairs)?;
        ensure(
            (brute - closed).abs() <= 1e-10,
            format!("instance {}: brute {} vs closed {}", i, brute, closed),
        )?;
    }
    Ok(())
}

fn check_fedplora_closed_form() -> Result<()> {
    let sign = mutation_sign("fedplora-closed-form");
    let stream = RngStream::new(105);
    for i in 0..10u64 {
        let g = GlobalState::init(Method::FedPlora, &[(7, 6)], 3, 0.2, &mut stream.derive(i, 0, 0))?;
        let sels = [vec![0, 1], vec![1, 2], vec![0, 2]];
        let ups: Vec<Upload> = sels
            .iter()
            .enumerate()
            .map(|(c, sel)| {
                plain_upload(c, Some(sel.clone()), random_stack(2, 7, 6, 0.1, 1000 + i * 10 + c as u64))
            })
            .collect();
        let next = aggregate(&g, &ups)?;
        let ideal = ideal_update(&g, &ups, 0, IdealMode::PerRank)?;
        let brute = agg_noise(&ideal, &next.delta(0)?)?;
        let (closed, bound) = fedplora_closed_form(3, &ups, 0)?;
        let closed = sign * closed;
        ensure(
            (brute - closed).abs() <= 1e-10,
            format!("instance {}: brute {} vs closed {}", i, brute, closed),
        )?;
        ensure(closed <= bound + 1e-9, format!("noise {} above bound {}", closed, bound))?;
    }
    Ok(())
}

fn check_flexlora_svd_tail() -> Result<()> {
    let sign = mutation_sign("flexlora-svd-tail");
    let stream = RngStream::new(106);
    for i in 0..10u64 {
        let mean = random_normal(8, 7, 0.5, &mut stream.derive(i, 0, 0));
        let rank = 2 + (i as usize % 3);
        let (u, s, vt) = truncated_svd(&mean, rank)?;
        let truncated = svd_reconstruct(&u, &s, &vt)?;
        let brute = frobenius_norm(&mean.sub(&truncated)?);
        let tail = sign * svd_tail_norm(&mean, rank)?;
        ensure(
            (brute - tail).abs() <= 1e-8,
            format!("instance {} rank {}: residual {} vs tail {}", i, rank, brute, tail),
        )?;
    }
    Ok(())
}

fn check_flora_stacking() -> Result<()> {
    let stream = RngStream::new(107);
    for i in 0..5u64 {
        let mut g =
            GlobalState::init(Method::Flora, &[(8, 5)], 2, 0.2, &mut stream.derive(i, 0, 0))?;
        if let GlobalModule::FullDelta { delta } = &mut g.modules[0] {
            *delta = random_normal(8, 5, 0.3, &mut stream.derive(i, 1, 0));
        }
        let ups: Vec<Upload> = (0..3)
            .map(|c| plain_upload(c, None, random_stack(2, 8, 5, 0.4, 2000 + i * 10 + c as u64)))
            .collect();
        let next = aggregate(&g, &ups)?;
        let ideal = ideal_update(&g, &ups, 0, IdealMode::FullClient)?;
        let actual_inc = next.delta(0)?.sub(&g.delta(0)?)?;
        let noise = agg_noise(&ideal, &actual_inc)?;
        let rel = noise / frobenius_norm(&ideal).max(1e-300);
        ensure(rel <= 1e-10, format!("instance {}: relative stacking noise {}", i, rel))?;
    }
    Ok(())
}

fn check_init_noise_invariants() -> Result<()> {
    let stream = RngStream::new(108);
    // Zero for the one-rank stack method at any rank mix.
    let g = GlobalState::init(Method::FedPlora, &[(8, 6)], 4, 0.2, &mut stream.derive(0, 0, 0))?;
    let backbone = vec![random_normal(8, 6, 0.5, &mut stream.derive(1, 0, 0))];
    let mut inits = Vec::new();
    for (id, r) in [(0usize, 1usize), (1, 2), (2, 4)] {
        let mut rng = stream.derive(2, id as u64, 0);
        inits.push(init_client(&g, &backbone, id, r, SelectionRule::Fold, 0.02, &mut rng)?);
    }
    let n = init_noise(&g, &inits)?;
    ensure(n == 0.0, format!("one-rank stack retention loss {}", n))?;

    // Truncating methods never lose less by keeping less.
    for method in [Method::HetLora, Method::FlexLora] {
        let mut g = GlobalState::init(method, &[(8, 6)], 4, 0.2, &mut stream.derive(3, 0, 0))?;
        match &mut g.modules[0] {
            GlobalModule::Adapter { a, b } => {
                *a = random_normal(4, 6, 0.4, &mut stream.derive(4, 0, 0));
                *b = random_normal(8, 4, 0.4, &mut stream.derive(4, 0, 1));
            }
            GlobalModule::FullDelta { delta } => {
                *delta = random_normal(8, 6, 0.4, &mut stream.derive(4, 0, 2));
            }
            _ => unreachable!(),
        }
        let mut prev = -1.0;
        for r in (1..=4).rev() {
            let mut rng = stream.derive(5, r as u64, 0);
            let c = init_client(&g, &backbone, 0, r, SelectionRule::Fold, 0.02, &mut rng)?;
            let noise = init_noise(&g, &[c])?;
            ensure(
                noise >= prev - 1e-12,
                format!("{:?}: rank {} noise {} < rank {} noise {}", method, r, noise, r + 1, prev),
            )?;
            prev = noise;
        }
    }
    Ok(())
}

fn check_svd_contract() -> Result<()> {
    let stream = RngStream::new(109);
    for i in 0..5u64 {
        let m = random_normal(9, 6, 0.8, &mut stream.derive(i, 0, 0));
        let (u, s, vt) = truncated_svd(&m, 6)?;
        ensure(
            s.windows(2).all(|w| w[0] >= w[1] - 1e-12),
            format!("instance {}: singular values not sorted: {:?}", i, s),
        )?;
        let full = svd_reconstruct(&u, &s, &vt)?;
        let err = frobenius_norm(&m.sub(&full)?) / frobenius_norm(&m).max(1e-300);
        ensure(err <= 1e-10, format!("instance {}: reconstruction error {}", i, err))?;
    }
    Ok(())
}

fn check_cost_identities() -> Result<()> {
    for r in [1u64, 4, 16] {
        let p = CostProfile {
            d: 768,
            k: 768,
            modules: 12,
            rank: 16,
            client_rank: r,
            bytes_per_param: 2,
        };
        let ours = downlink_bytes(Method::FedPlora, &p)?;
        let het = downlink_bytes(Method::HetLora, &p)?;
        ensure(
            ours - het == p.modules * (p.d + p.k) * (p.rank - r) * p.bytes_per_param,
            format!("downlink overhead identity at rank {}", r),
        )?;
        for m in ALL_METHODS {
            ensure(
                temp_memory_bytes(m, &p)? == downlink_bytes(m, &p)?,
                format!("temp memory vs downlink for {:?}", m),
            )?;
            ensure(
                uplink_bytes(m, &p)? == p.modules * (p.d + p.k) * r * p.bytes_per_param,
                format!("uplink formula for {:?}", m),
            )?;
        }
        let flex = agg_flops(Method::FlexLora, &p, 5)?;
        let flora = agg_flops(Method::Flora, &p, 5)?;
        let ours = agg_flops(Method::FedPlora, &p, 5)?;
        ensure(
            flex > flora && flora > ours,
            format!("aggregation cost ordering: {} vs {} vs {}", flex, flora, ours),
        )?;
    }
    Ok(())
}

fn check_determinism() -> Result<()> {
    let cfg = ExperimentConfig {
        v: 4,
        rounds: 2,
        sample_frac: 0.5,
        rank_profile: vec![
            crate::fedengine::RankGroup { rank: 2, count: 2 },
            crate::fedengine::RankGroup { rank: 4, count: 2 },
        ],
        data: crate::fedengine::DataConfig {
            n_train: 32,
            n_test: 16,
            r_star: 2,
            ..ExperimentConfig::default().data
        },
        model: crate::fedengine::ModelConfig {
            dims: vec![6, 8, 5],
            activation: Activation::Relu,
            loss: Loss::Mse,
        },
        ..ExperimentConfig::default()
    };
    let a = run(&cfg)?;
    let b = run(&cfg)?;
    ensure(a.records == b.records, "same seed produced different record streams".into())
}

fn check_sampler() -> Result<()> {
    let stream = RngStream::new(110);
    let mut rng = stream.derive(0, 0, 0);
    let all = sample_clients(9, 1.0, &mut rng)?;
    ensure(all == (0..9).collect::<Vec<_>>(), format!("full sample gave {:?}", all))?;
    let five = sample_clients(50, 0.1, &mut rng)?;
    ensure(five.len() == 5, format!("expected 5 ids, got {:?}", five))?;
    ensure(
        five.windows(2).all(|w| w[0] < w[1]),
        format!("ids not sorted/distinct: {:?}", five),
    )?;
    Ok(())
}

fn check_cosine_grid() -> Result<()> {
    let s = random_stack(2, 6, 32, 0.5, 3000);
    let ups = vec![
        plain_upload(0, Some(vec![0, 1]), s.clone()),
        plain_upload(1, Some(vec![0, 1]), s),
    ];
    let (ga, gb) = cosine_grid(2, &ups, 0)?;
    for j in 0..2 {
        let a = ga[j][j].ok_or_else(|| Error::Degenerate("missing diagonal entry".into()))?;
        let b = gb[j][j].ok_or_else(|| Error::Degenerate("missing diagonal entry".into()))?;
        ensure(
            (a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12,
            format!("identical stacks: diagonal ({}, {})", a, b),
        )?;
    }
    Ok(())
}

fn check_fold_matches_dense_delta() -> Result<()> {
    let stream = RngStream::new(111);
    for i in 0..5u64 {
        let stack = random_stack(4, 7, 5, 0.5, 4000 + i);
        let w0 = random_normal(7, 5, 0.5, &mut stream.derive(i, 0, 0));
        let target = fold(&stack, &[1, 3], &TargetModule::new(w0.clone()))?;
        // Folding 1 and 3 must equal adding those components' dense update.
        let partial = PloraStack {
            components: vec![stack.components[1].clone(), stack.components[3].clone()],
            scale: stack.scale,
        };
        let expect = w0.add(&plora_delta(&partial)?)?;
        let gap = frobenius_norm(&target.frozen_weight().sub(&expect)?);
        ensure(gap <= 1e-13, format!("instance {}: fold delta gap {}", i, gap))?;
        // And the remaining trainables plus fold reproduce the full stack.
        let rest = PloraStack {
            components: vec![stack.components[0].clone(), stack.components[2].clone()],
            scale: stack.scale,
        };
        let eff = effective_weight(&target, &rest)?;
        let full = w0.add(&plora_delta(&stack)?)?;
        let gap = frobenius_norm(&eff.sub(&full)?);
        ensure(gap <= 1e-12, format!("instance {}: split reconstruction gap {}", i, gap))?;
    }
    Ok(())
}

type Check = (&'static str, fn() -> Result<()>);

/// Every named check, in a stable order.
pub fn checks() -> Vec<Check> {
    vec![
        ("plora-lora-equivalence", check_plora_lora_equivalence),
        ("fold-identity", check_fold_identity),
        ("fold-dense-delta", check_fold_matches_dense_delta),
        ("gradient-check", check_gradients),
        ("hetlora-closed-form", check_hetlora_closed_form),
        ("fedplora-closed-form", check_fedplora_closed_form),
        ("flexlora-svd-tail", check_flexlora_svd_tail),
        ("flora-stacking", check_flora_stacking),
        ("init-noise-invariants", check_init_noise_invariants),
        ("svd-contract", check_svd_contract),
        ("cost-identities", check_cost_identities),
        ("determinism", check_determinism),
        ("sampler", check_sampler),
        ("cosine-grid", check_cosine_grid),
    ]
}

pub fn run_all() -> Vec<CheckResult> {
    checks()
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(()) => CheckResult { name, passed: true, detail: String::new() },
            Err(e) => CheckResult { name, passed: false, detail: e.to_string() },
        })
        .collect()
}
