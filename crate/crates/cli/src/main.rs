//! fedlora: run federated low-rank adaptation experiments, sweep them over
//! an axis, self-verify the numeric identities, or print the cost model.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration/parse failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedlora_core::costmeter::{
    agg_flops, downlink_bytes, fold_flops, temp_memory_bytes, uplink_bytes, CostProfile,
    ALL_METHODS,
};
use fedlora_core::fedengine::{
    default_rank_profile, run, ExperimentConfig, PartitionKind, RankGroup, RoundRecord,
};
use fedlora_core::strategies::{Method, SelectionRule};
use fedlora_core::tinynet::{Activation, Loss};
use fedlora_core::datagen::TaskKind;

#[derive(Parser)]
#[command(name = "fedlora", version, about = "Deterministic federated adapter laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one experiment and write rounds.jsonl, summary.csv, config.echo.
    Run(RunArgs),
    /// Run a cross product of axis values and seeds, one run directory each.
    Sweep(SweepArgs),
    /// Run every named invariant check and report pass/fail.
    Verify,
    /// Print the per-method communication/compute/memory cost table.
    Cost(CostArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config file (dotted keys, `key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override one config key, e.g. --set fed.rounds=10 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    base: RunArgs,
    /// Sweep axis: strategy, rank_profile, or alpha.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value_t = 768)]
    d: u64,
    #[arg(long, default_value_t = 768)]
    k: u64,
    /// Adapted module count.
    #[arg(long, default_value_t = 12)]
    modules: u64,
    /// Global rank R.
    #[arg(long, default_value_t = 16)]
    rank: u64,
    /// Client rank r_i.
    #[arg(long, default_value_t = 1)]
    client_rank: u64,
    #[arg(long, default_value_t = 2)]
    bytes_per_param: u64,
    /// Participants per round for aggregation flops.
    #[arg(long, default_value_t = 5)]
    participants: u64,
}

/// Failures before the experiment starts are usage errors (exit 2);
/// anything after is a runtime error (exit 1).
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

// ---------------------------------------------------------------------------
// config text format

fn parse_method(s: &str) -> Result<Method, String> {
    Ok(match s {
        "fedit" => Method::FedIt,
        "fedplora" => Method::FedPlora,
        "flora" => Method::Flora,
        "flexlora" => Method::FlexLora,
        "hetlora" => Method::HetLora,
        _ => {
            return Err(format!(
                "unknown strategy '{}' (expected fedit|fedplora|flora|flexlora|hetlora)",
                s
            ))
        }
    })
}

fn parse_selection(s: &str) -> Result<SelectionRule, String> {
    Ok(match s {
        "fold" => SelectionRule::Fold,
        "drop" => SelectionRule::Drop,
        "fixed" => SelectionRule::FixedPrefix,
        "weightnorm" => SelectionRule::WeightNorm,
        _ => return Err(format!("unknown selection '{}' (expected fold|drop|fixed|weightnorm)", s)),
    })
}

fn parse_partition(s: &str) -> Result<PartitionKind, String> {
    Ok(match s {
        "iid" => PartitionKind::Iid,
        "clusters" => PartitionKind::Clusters,
        "pathological" => PartitionKind::Pathological,
        "dirichlet" => PartitionKind::Dirichlet,
        _ => {
            return Err(format!(
                "unknown partition '{}' (expected iid|clusters|pathological|dirichlet)",
                s
            ))
        }
    })
}

/// "1x17,4x17,8x16" -> groups of (rank, count).
fn parse_ranks(s: &str) -> Result<Vec<RankGroup>, String> {
    let mut groups = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let (r, c) = part
            .split_once('x')
            .ok_or_else(|| format!("rank group '{}' is not RANKxCOUNT", part))?;
        let rank: usize = r.trim().parse().map_err(|_| format!("bad rank in '{}'", part))?;
        let count: usize = c.trim().parse().map_err(|_| format!("bad count in '{}'", part))?;
        groups.push(RankGroup { rank, count });
    }
    if groups.is_empty() {
        return Err("empty rank profile".into());
    }
    Ok(groups)
}

fn ranks_to_string(groups: &[RankGroup]) -> String {
    groups
        .iter()
        .map(|g| format!("{}x{}", g.rank, g.count))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_dims(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad layer dim '{}'", p)))
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| format!("key {}: cannot parse '{}'", key, v))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("key {}: expected a boolean, got '{}'", key, v)),
    }
}

/// Tracks whether the rank profile was given explicitly; if not, it follows
/// fed.v with the default three-group split.
struct ConfigBuilder {
    cfg: ExperimentConfig,
    ranks_set: bool,
}

impl ConfigBuilder {
    fn new() -> Self {
        ConfigBuilder { cfg: ExperimentConfig::default(), ranks_set: false }
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim().trim_matches('"');
        let c = &mut self.cfg;
        match key {
            "fed.v" => c.v = parse_num(key, v)?,
            "fed.rounds" => c.rounds = parse_num(key, v)?,
            "fed.sample_frac" => c.sample_frac = parse_num(key, v)?,
            "fed.strategy" => c.method = parse_method(v)?,
            "fed.selection" => c.selection = parse_selection(v)?,
            "fed.local_epochs" => c.local_epochs = parse_num(key, v)?,
            "fed.batch_size" => c.batch_size = parse_num(key, v)?,
            "fed.lr" => c.lr = parse_num(key, v)?,
            "fed.eval_every" => c.eval_every = parse_num(key, v)?,
            "fed.weight_by_samples" => c.weight_by_samples = parse_bool(key, v)?,
            "ranks" => {
                c.rank_profile = parse_ranks(v)?;
                self.ranks_set = true;
            }
            "seed" => c.seed = parse_num(key, v)?,
            "model.dims" => c.model.dims = parse_dims(v)?,
            "model.activation" => {
                c.model.activation = match v {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => return Err(format!("unknown activation '{}'", v)),
                }
            }
            "model.loss" => {
                c.model.loss = match v {
                    "mse" => Loss::Mse,
                    "cross_entropy" => Loss::CrossEntropy,
                    _ => return Err(format!("unknown loss '{}'", v)),
                }
            }
            "data.kind" => {
                c.data.kind = match v {
                    "regression" => TaskKind::Regression,
                    "classification" => TaskKind::Classification,
                    _ => return Err(format!("unknown task kind '{}'", v)),
                }
            }
            "data.n_train" => c.data.n_train = parse_num(key, v)?,
            "data.n_test" => c.data.n_test = parse_num(key, v)?,
            "data.partition" => c.data.partition = parse_partition(v)?,
            "data.clusters" => c.data.clusters = parse_num(key, v)?,
            "data.classes_per_client" => c.data.classes_per_client = parse_num(key, v)?,
            "data.alpha" => c.data.alpha = parse_num(key, v)?,
            "data.r_star" => c.data.r_star = parse_num(key, v)?,
            "data.label_noise" => c.data.noise = parse_num(key, v)?,
            "data.delta_ratio" => c.data.delta_ratio = parse_num(key, v)?,
            "adapter.init_std" => c.init_std = parse_num(key, v)?,
            "cost.bytes_per_param" => c.bytes_per_param = parse_num(key, v)?,
            _ => return Err(format!("unknown config key '{}'", key)),
        }
        Ok(())
    }

    fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value'", ln + 1))?;
            self.apply(key.trim(), value.trim()).map_err(|e| format!("line {}: {}", ln + 1, e))?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<ExperimentConfig, String> {
        if !self.ranks_set {
            let r_max = self.cfg.max_rank().max(1);
            self.cfg.rank_profile = default_rank_profile(self.cfg.v, r_max);
        }
        self.cfg.validate().map_err(|e| e.to_string())?;
        Ok(self.cfg)
    }
}

fn build_config(args: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {}", path.display(), e)))?;
        b.apply_text(&text).map_err(usage)?;
    }
    for kv in &args.set {
        let (key, value) =
            kv.split_once('=').ok_or_else(|| usage(format!("--set '{}' is not KEY=VALUE", kv)))?;
        b.apply(key.trim(), value.trim()).map_err(usage)?;
    }
    if let Some(seed) = args.seed {
        b.cfg.seed = seed;
    }
    b.finish().map_err(usage)
}

fn echo_config(c: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# effective configuration");
    let _ = writeln!(s, "seed = {}", c.seed);
    let _ = writeln!(s, "fed.v = {}", c.v);
    let _ = writeln!(s, "fed.rounds = {}", c.rounds);
    let _ = writeln!(s, "fed.sample_frac = {}", c.sample_frac);
    let _ = writeln!(s, "fed.strategy = {}", c.method.name());
    let _ = writeln!(s, "fed.selection = {}", c.selection.name());
    let _ = writeln!(s, "fed.local_epochs = {}", c.local_epochs);
    let _ = writeln!(s, "fed.batch_size = {}", c.batch_size);
    let _ = writeln!(s, "fed.lr = {}", c.lr);
    let _ = writeln!(s, "fed.eval_every = {}", c.eval_every);
    let _ = writeln!(s, "fed.weight_by_samples = {}", c.weight_by_samples);
    let _ = writeln!(s, "ranks = \"{}\"", ranks_to_string(&c.rank_profile));
    let _ = writeln!(
        s,
        "model.dims = \"{}\"",
        c.model.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(
        s,
        "model.activation = {}",
        match c.model.activation {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    );
    let _ = writeln!(
        s,
        "model.loss = {}",
        match c.model.loss {
            Loss::Mse => "mse",
            Loss::CrossEntropy => "cross_entropy",
        }
    );
    let _ = writeln!(
        s,
        "data.kind = {}",
        match c.data.kind {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    );
    let _ = writeln!(s, "data.n_train = {}", c.data.n_train);
    let _ = writeln!(s, "data.n_test = {}", c.data.n_test);
    let _ = writeln!(s, "data.partition = {}", c.data.partition.name());
    let _ = writeln!(s, "data.clusters = {}", c.data.clusters);
    let _ = writeln!(s, "data.classes_per_client = {}", c.data.classes_per_client);
    let _ = writeln!(s, "data.alpha = {}", c.data.alpha);
    let _ = writeln!(s, "data.r_star = {}", c.data.r_star);
    let _ = writeln!(s, "data.label_noise = {}", c.data.noise);
    let _ = writeln!(s, "data.delta_ratio = {}", c.data.delta_ratio);
    let _ = writeln!(s, "adapter.init_std = {}", c.init_std);
    let _ = writeln!(s, "cost.bytes_per_param = {}", c.bytes_per_param);
    s
}

// ---------------------------------------------------------------------------
// summaries

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct RunSummary {
    final_round: usize,
    final_eval_loss: Option<f64>,
    final_recovery_error: Option<f64>,
    median_eval_loss: Option<f64>,
    median_recovery_error: Option<f64>,
    mean_agg_noise: Option<f64>,
    mean_init_noise: Option<f64>,
    max_init_gap: Option<f64>,
    total_up_bytes: u64,
    total_down_bytes: u64,
    total_fold_flops: u64,
}

fn summarize(records: &[RoundRecord]) -> RunSummary {
    let mut eval: Vec<f64> = records.iter().filter_map(|r| r.eval_loss).collect();
    let mut rec: Vec<f64> = records.iter().filter_map(|r| r.recovery_error).collect();
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&RoundRecord) -> f64| {
        if records.is_empty() {
            None
        } else {
            Some(records.iter().map(|r| f(r)).sum::<f64>() / n)
        }
    };
    RunSummary {
        final_round: records.last().map_or(0, |r| r.round),
        final_eval_loss: records.iter().rev().find_map(|r| r.eval_loss),
        final_recovery_error: records.iter().rev().find_map(|r| r.recovery_error),
        median_eval_loss: median(&mut eval),
        median_recovery_error: median(&mut rec),
        mean_agg_noise: mean(&|r| r.noise.agg_noise),
        mean_init_noise: mean(&|r| r.noise.init_noise),
        max_init_gap: records.iter().map(|r| r.init_gap).fold(None, |acc, g| {
            Some(acc.map_or(g, |a: f64| a.max(g)))
        }),
        total_up_bytes: records.iter().map(|r| r.comm_up_bytes).sum(),
        total_down_bytes: records.iter().map(|r| r.comm_down_bytes).sum(),
        total_fold_flops: records.iter().map(|r| r.fold_flops).sum(),
    }
}

const SUMMARY_HEADER: &str = "seed,rounds,final_round,final_eval_loss,final_recovery_error,\
median_eval_loss,median_recovery_error,mean_agg_noise,mean_init_noise,max_init_gap,\
total_up_bytes,total_down_bytes,total_fold_flops";

fn summary_csv(seed: u64, records: &[RoundRecord]) -> String {
    let s = summarize(records);
    format!(
        "{}\n{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        SUMMARY_HEADER,
        seed,
        records.len(),
        s.final_round,
        fmt_opt(s.final_eval_loss),
        fmt_opt(s.final_recovery_error),
        fmt_opt(s.median_eval_loss),
        fmt_opt(s.median_recovery_error),
        fmt_opt(s.mean_agg_noise),
        fmt_opt(s.mean_init_noise),
        fmt_opt(s.max_init_gap),
        s.total_up_bytes,
        s.total_down_bytes,
        s.total_fold_flops,
    )
}

// ---------------------------------------------------------------------------
// subcommands

fn write_artifacts(out: &Path, cfg: &ExperimentConfig, records: &[RoundRecord]) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(runtime)?;
    let mut jsonl = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(runtime)?;
        jsonl.push_str(&line);
        jsonl.push('\n');
    }
    std::fs::write(out.join("rounds.jsonl"), jsonl).map_err(runtime)?;
    std::fs::write(out.join("summary.csv"), summary_csv(cfg.seed, records)).map_err(runtime)?;
    std::fs::write(out.join("config.echo"), echo_config(cfg)).map_err(runtime)?;
    Ok(())
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let cfg = build_config(args)?;
    let out = run(&cfg).map_err(runtime)?;
    write_artifacts(&args.out, &cfg, &out.records)?;
    let s = summarize(&out.records);
    println!(
        "run complete: seed {} strategy {} rounds {} -> {}",
        cfg.seed,
        cfg.method.name(),
        out.records.len(),
        args.out.display()
    );
    if let Some(l) = s.final_eval_loss {
        println!("final eval loss {}", l);
    }
    if let Some(r) = s.final_recovery_error {
        println!("final recovery error {}", r);
    }
    Ok(())
}

fn sanitize(v: &str) -> String {
    v.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let axis = args.axis.as_str();
    let key = match axis {
        "strategy" => "fed.strategy",
        "rank_profile" => "ranks",
        "alpha" => "data.alpha",
        _ => {
            return Err(usage(format!(
                "unknown axis '{}' (expected strategy|rank_profile|alpha)",
                axis
            )))
        }
    };
    // Fail fast on unparseable cells before any run starts.
    for value in &args.values {
        let mut probe = args.base.clone();
        probe.set.push(format!("{}={}", key, value));
        build_config(&probe)?;
    }
    std::fs::create_dir_all(&args.base.out).map_err(runtime)?;
    let mut failures = Vec::new();
    let mut agg = String::new();
    let _ = writeln!(
        agg,
        "axis,value,seeds,median_final_eval_loss,lo_final_eval_loss,hi_final_eval_loss,\
median_final_recovery_error,lo_final_recovery_error,hi_final_recovery_error"
    );
    for value in &args.values {
        let mut finals_loss = Vec::new();
        let mut finals_rec = Vec::new();
        let mut used_seeds = 0usize;
        for &seed in &args.seeds {
            let mut cell = args.base.clone();
            cell.set.push(format!("{}={}", key, value));
            cell.seed = Some(seed);
            cell.out =
                args.base.out.join(format!("{}-{}", axis, sanitize(value))).join(format!("seed-{}", seed));
            match cmd_run(&cell) {
                Ok(()) => {
                    used_seeds += 1;
                    let text = std::fs::read_to_string(cell.out.join("rounds.jsonl"))
                        .map_err(runtime)?;
                    let records: Vec<RoundRecord> = text
                        .lines()
                        .map(serde_json::from_str)
                        .collect::<Result<_, _>>()
                        .map_err(runtime)?;
                    let s = summarize(&records);
                    if let Some(l) = s.final_eval_loss {
                        finals_loss.push(l);
                    }
                    if let Some(r) = s.final_recovery_error {
                        finals_rec.push(r);
                    }
                }
                Err(e) => {
                    eprintln!("cell {}={} seed {} failed: {}", key, value, seed, e.message());
                    failures.push(format!("{}={} seed {}", key, value, seed));
                }
            }
        }
        let lo = |v: &[f64]| v.iter().cloned().reduce(f64::min);
        let hi = |v: &[f64]| v.iter().cloned().reduce(f64::max);
        let _ = writeln!(
            agg,
            "{},{},{},{},{},{},{},{},{}",
            axis,
            value,
            used_seeds,
            fmt_opt(median(&mut finals_loss.clone())),
            fmt_opt(lo(&finals_loss)),
            fmt_opt(hi(&finals_loss)),
            fmt_opt(median(&mut finals_rec.clone())),
            fmt_opt(lo(&finals_rec)),
            fmt_opt(hi(&finals_rec)),
        );
    }
    std::fs::write(args.base.out.join("sweep.csv"), agg).map_err(runtime)?;
    if failures.is_empty() {
        println!("sweep complete: {} values x {} seeds -> {}", args.values.len(), args.seeds.len(), args.base.out.display());
        Ok(())
    } else {
        Err(runtime(format!("{} sweep cells failed: {}", failures.len(), failures.join("; "))))
    }
}

fn cmd_verify() -> CliResult<()> {
    let results = fedlora_core::verify::run_all();
    let mut first_fail: Option<String> = None;
    for r in &results {
        if r.passed {
            println!("check {}: PASS", r.name);
        } else {
            println!("check {}: FAIL ({})", r.name, r.detail);
            if first_fail.is_none() {
                first_fail = Some(format!("{}: {}", r.name, r.detail));
            }
        }
    }
    match first_fail {
        None => {
            println!("all {} checks passed", results.len());
            Ok(())
        }
        Some(f) => Err(runtime(format!("verification failed at {}", f))),
    }
}

fn cmd_cost(a: &CostArgs) -> CliResult<()> {
    let p = CostProfile {
        d: a.d,
        k: a.k,
        modules: a.modules,
        rank: a.rank,
        client_rank: a.client_rank,
        bytes_per_param: a.bytes_per_param,
    };
    p.validate().map_err(usage)?;
    if a.participants == 0 {
        return Err(usage("participants must be >= 1".to_string()));
    }
    println!(
        "cost model: d={} k={} modules={} R={} r_i={} bytes/param={} participants={}",
        p.d, p.k, p.modules, p.rank, p.client_rank, p.bytes_per_param, a.participants
    );
    println!(
        "{:<10} {:>14} {:>14} {:>12} {:>14} {:>14} {:>10} {:>10}",
        "method", "uplink_B", "downlink_B", "fold_flops", "agg_flops", "temp_mem_B", "up_MB", "down_MB"
    );
    for m in ALL_METHODS {
        let up = uplink_bytes(m, &p).map_err(usage)?;
        let down = downlink_bytes(m, &p).map_err(usage)?;
        let fold = fold_flops(&p).map_err(usage)?;
        let agg = agg_flops(m, &p, a.participants).map_err(usage)?;
        let mem = temp_memory_bytes(m, &p).map_err(usage)?;
        println!(
            "{:<10} {:>14} {:>14} {:>12} {:>14} {:>14} {:>10.6} {:>10.6}",
            m.name(),
            up,
            down,
            fold,
            agg,
            mem,
            up as f64 / 1e6,
            down as f64 / 1e6
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Verify => cmd_verify(),
        Cmd::Cost(args) => cmd_cost(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
