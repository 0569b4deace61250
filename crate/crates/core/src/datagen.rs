//! Synthetic teacher-student tasks plus the client partitioners (IID,
//! pathological by class, Dirichlet). Everything is generated from seeded
//! rng streams so runs replay exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::numkit::{frobenius_norm, matmul, random_normal, Matrix};
use crate::tinynet::{forward_dense, Loss, MlpSpec, Targets};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Ground-truth model: a frozen backbone plus one low-rank delta per layer
/// weight. Students try to recover the deltas from the teacher's data.
#[derive(Clone, Debug)]
pub struct TeacherTask {
    pub spec: MlpSpec,
    pub backbone: Vec<Matrix>,
    /// Factors (b: d x r*, a: r* x k) whose product is the true delta.
    pub delta_factors: Vec<(Matrix, Matrix)>,
    /// Materialized b*a per layer.
    pub true_deltas: Vec<Matrix>,
    pub kind: TaskKind,
    /// Regression: std of Gaussian noise added to targets. Classification:
    /// probability a label is replaced by a uniform class draw. Default 0.
    pub noise: f64,
}

impl TeacherTask {
    /// Backbone entries are N(0, 1/fan_in), a deliberately conservative
    /// scale that keeps local SGD stable at the default lr for every
    /// aggregation strategy. Delta factor entries use a std chosen so that
    /// E||b a||_F is about `delta_ratio` of E||w0||_F.
    pub fn new(
        spec: MlpSpec,
        r_star: usize,
        kind: TaskKind,
        noise: f64,
        delta_ratio: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        match (kind, spec.loss) {
            (TaskKind::Regression, Loss::Mse) | (TaskKind::Classification, Loss::CrossEntropy) => {
            }
            _ => return Err(Error::Config("task kind does not match spec loss".into())),
        }
        if r_star == 0 {
            return Err(Error::Config("true delta rank must be >= 1".into()));
        }
        if !(noise >= 0.0) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", noise)));
        }
        if !(delta_ratio > 0.0) {
            return Err(Error::Config("delta ratio must be > 0".into()));
        }
        let mut backbone = Vec::new();
        let mut delta_factors = Vec::new();
        let mut true_deltas = Vec::new();
        for l in 0..spec.layer_count() {
            let (d, k) = spec.weight_dims(l);
            if r_star > d.min(k) {
                return Err(Error::Config(format!(
                    "true delta rank {} exceeds min dim {} of layer {}",
                    r_star,
                    d.min(k),
                    l
                )));
            }
            let w0 = random_normal(d, k, (1.0 / k as f64).sqrt(), rng);
            // E||w0||^2 = d and E||b a||^2 = d k r s^4, so matching
            // ratio^2 * d gives s = (ratio^2 / (k r))^(1/4).
            let s = (delta_ratio * delta_ratio / (k as f64 * r_star as f64)).powf(0.25);
            let b = random_normal(d, r_star, s, rng);
            let a = random_normal(r_star, k, s, rng);
            let delta = matmul(&b, &a)?;
            backbone.push(w0);
            delta_factors.push((b, a));
            true_deltas.push(delta);
        }
        Ok(TeacherTask { spec, backbone, delta_factors, true_deltas, kind, noise })
    }

    pub fn delta_rank(&self) -> usize {
        self.delta_factors.first().map_or(0, |(b, _)| b.cols())
    }

    /// w0 + true_delta per layer.
    pub fn effective_weights(&self) -> Result<Vec<Matrix>> {
        self.backbone
            .iter()
            .zip(&self.true_deltas)
            .map(|(w0, d)| w0.add(d))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Rows of this dataset selected by index, in the order given.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut rows = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!("subset index {} out of {}", i, self.len())));
            }
            rows.push(self.inputs.row(i).to_vec());
        }
        let inputs = Matrix::from_rows(rows)?;
        let targets = match &self.targets {
            Targets::Regression(t) => {
                let mut trows = Vec::with_capacity(indices.len());
                for &i in indices {
                    trows.push(t.row(i).to_vec());
                }
                Targets::Regression(Matrix::from_rows(trows)?)
            }
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
        };
        Ok(Dataset { inputs, targets })
    }

    /// Plain text form: a header with dims and kind, then row-major values.
    /// Floats use the shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("dataset v1\n");
        out.push_str(&format!("inputs {} {}\n", self.inputs.rows(), self.inputs.cols()));
        for i in 0..self.inputs.rows() {
            let row: Vec<String> = self.inputs.row(i).iter().map(|x| format!("{}", x)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        match &self.targets {
            Targets::Regression(t) => {
                out.push_str(&format!("targets {} {}\n", t.rows(), t.cols()));
                for i in 0..t.rows() {
                    let row: Vec<String> = t.row(i).iter().map(|x| format!("{}", x)).collect();
                    out.push_str(&row.join(" "));
                    out.push('\n');
                }
            }
            Targets::Labels(l) => {
                out.push_str(&format!("labels {}\n", l.len()));
                let row: Vec<String> = l.iter().map(|x| format!("{}", x)).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset text".into()))?;
        if header.trim() != "dataset v1" {
            return Err(Error::Parse(format!("unknown dataset header {:?}", header)));
        }
        let parse_dims = |line: &str, tag: &str| -> Result<(usize, usize)> {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != tag {
                return Err(Error::Parse(format!("expected '{} rows cols', got {:?}", tag, line)));
            }
            let r = parts[1].parse().map_err(|_| Error::Parse(format!("bad rows {:?}", parts[1])))?;
            let c = parts[2].parse().map_err(|_| Error::Parse(format!("bad cols {:?}", parts[2])))?;
            Ok((r, c))
        };
        let read_matrix = |lines: &mut std::str::Lines, rows: usize, cols: usize| -> Result<Matrix> {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines.next().ok_or_else(|| Error::Parse("truncated matrix".into()))?;
                let vals: Vec<&str> = line.split_whitespace().collect();
                if vals.len() != cols {
                    return Err(Error::Parse(format!("row has {} values, want {}", vals.len(), cols)));
                }
                for v in vals {
                    data.push(
                        v.parse::<f64>().map_err(|_| Error::Parse(format!("bad float {:?}", v)))?,
                    );
                }
            }
            Matrix::new(rows, cols, data)
        };
        let dims_line = lines.next().ok_or_else(|| Error::Parse("missing inputs header".into()))?;
        let (n, d) = parse_dims(dims_line, "inputs")?;
        let inputs = read_matrix(&mut lines, n, d)?;
        let tline = lines.next().ok_or_else(|| Error::Parse("missing targets header".into()))?;
        let tparts: Vec<&str> = tline.split_whitespace().collect();
        let targets = match tparts.first().copied() {
            Some("targets") => {
                let (r, c) = parse_dims(tline, "targets")?;
                Targets::Regression(read_matrix(&mut lines, r, c)?)
            }
            Some("labels") => {
                if tparts.len() != 2 {
                    return Err(Error::Parse("labels header wants one count".into()));
                }
                let count: usize =
                    tparts[1].parse().map_err(|_| Error::Parse("bad label count".into()))?;
                let line = lines.next().unwrap_or("");
                let labels: Vec<usize> = line
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad label {:?}", v))))
                    .collect::<Result<_>>()?;
                if labels.len() != count {
                    return Err(Error::Parse(format!(
                        "label count {} does not match header {}",
                        labels.len(),
                        count
                    )));
                }
                Targets::Labels(labels)
            }
            _ => return Err(Error::Parse(format!("unknown target section {:?}", tline))),
        };
        Ok(Dataset { inputs, targets })
    }
}

fn teacher_targets(task: &TeacherTask, inputs: &Matrix, rng: &mut ChaCha8Rng) -> Result<Targets> {
    let weights = task.effective_weights()?;
    let outputs = forward_dense(&task.spec, &weights, inputs)?;
    match task.kind {
        TaskKind::Regression => {
            let targets = if task.noise > 0.0 {
                let jitter = random_normal(outputs.rows(), outputs.cols(), task.noise, rng);
                outputs.add(&jitter)?
            } else {
                outputs
            };
            Ok(Targets::Regression(targets))
        }
        TaskKind::Classification => {
            let classes = outputs.cols();
            let mut labels = Vec::with_capacity(outputs.rows());
            for i in 0..outputs.rows() {
                let row = outputs.row(i);
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                let label = if task.noise > 0.0 && rng.random::<f64>() < task.noise {
                    rng.random_range(0..classes)
                } else {
                    best
                };
                labels.push(label);
            }
            Ok(Targets::Labels(labels))
        }
    }
}

/// Draw n samples with inputs from N(0, I) and targets from the teacher
/// forward pass (argmax labels for classification).
pub fn gen_teacher_dataset(task: &TeacherTask, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let inputs = random_normal(n, task.spec.layer_dims[0], 1.0, rng);
    let targets = teacher_targets(task, &inputs, rng)?;
    Ok(Dataset { inputs, targets })
}

/// Same teacher, but inputs are N(center, I). Used for input-cluster skew:
/// each client samples around its own cluster center.
pub fn gen_teacher_dataset_at(
    task: &TeacherTask,
    n: usize,
    center: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    if center.len() != task.spec.layer_dims[0] {
        return Err(Error::Shape(format!(
            "cluster center has dim {}, input dim is {}",
            center.len(),
            task.spec.layer_dims[0]
        )));
    }
    let mut inputs = random_normal(n, center.len(), 1.0, rng);
    for i in 0..n {
        for (j, &c) in center.iter().enumerate() {
            let v = inputs.get(i, j);
            inputs.set(i, j, v + c);
        }
    }
    let targets = teacher_targets(task, &inputs, rng)?;
    Ok(Dataset { inputs, targets })
}

/// Cluster centers for input-skew non-IID regression, entries N(0, spread).
pub fn cluster_centers(
    clusters: usize,
    dim: usize,
    spread: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if clusters == 0 {
        return Err(Error::Config("need at least one cluster".into()));
    }
    let m = random_normal(clusters, dim, spread, rng);
    Ok((0..clusters).map(|i| m.row(i).to_vec()).collect())
}

/// Assignment of sample indices to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    /// Disjointness, full coverage of 0..n, and no empty shard.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (i, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Config(format!("shard {} is empty", i)));
            }
            for &idx in shard {
                if idx >= n {
                    return Err(Error::Shape(format!("index {} out of {}", idx, n)));
                }
                if seen[idx] {
                    return Err(Error::Config(format!("index {} assigned twice", idx)));
                }
                seen[idx] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Config("partition does not cover the dataset".into()));
        }
        Ok(())
    }
}

/// Random even split: shard sizes differ by at most one.
pub fn split_iid(n: usize, v: usize, rng: &mut ChaCha8Rng) -> Result<Partition> {
    if v == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if n < v {
        return Err(Error::Config(format!("{} samples cannot cover {} clients", n, v)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let base = n / v;
    let extra = n % v;
    let mut shards = Vec::with_capacity(v);
    let mut cursor = 0;
    for i in 0..v {
        let size = base + usize::from(i < extra);
        let mut shard: Vec<usize> = idx[cursor..cursor + size].to_vec();
        shard.sort_unstable();
        shards.push(shard);
        cursor += size;
    }
    Ok(Partition { shards })
}

/// Each client receives samples from exactly `classes_per_client` distinct
/// classes. Class slots are dealt so every class is served at least once.
pub fn split_pathological(
    labels: &[usize],
    v: usize,
    classes_per_client: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Partition> {
    if v == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let c = classes.len();
    if c == 0 {
        return Err(Error::Config("no labels to partition".into()));
    }
    if classes_per_client == 0 || classes_per_client > c {
        return Err(Error::Config(format!(
            "classes_per_client {} outside 1..={}",
            classes_per_client, c
        )));
    }
    let total_slots = v * classes_per_client;
    if total_slots < c {
        return Err(Error::Config(format!(
            "{} clients x {} classes each cannot cover {} classes",
            v, classes_per_client, c
        )));
    }
    // Slot multiset: every class once, remainder spread round-robin over a
    // shuffled class order so no class is systematically favored.
    let mut order = classes.clone();
    order.shuffle(rng);
    let mut slots: Vec<usize> = Vec::with_capacity(total_slots);
    slots.extend_from_slice(&classes);
    for i in 0..total_slots - c {
        slots.push(order[i % c]);
    }

    // Deal classes_per_client distinct classes to each client, swapping with
    // a later slot when a duplicate comes up. Reshuffle on a dead end.
    let mut assignment: Vec<Vec<usize>> = Vec::new();
    'retry: for attempt in 0..64 {
        slots.shuffle(rng);
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); v];
        let mut pos = 0;
        for client in clients.iter_mut() {
            for _ in 0..classes_per_client {
                if !client.contains(&slots[pos]) {
                    client.push(slots[pos]);
                    pos += 1;
                    continue;
                }
                let swap = (pos + 1..total_slots).find(|&q| !client.contains(&slots[q]));
                match swap {
                    Some(q) => {
                        slots.swap(pos, q);
                        client.push(slots[pos]);
                        pos += 1;
                    }
                    None => {
                        if attempt == 63 {
                            return Err(Error::Config(
                                "could not deal distinct classes to every client".into(),
                            ));
                        }
                        continue 'retry;
                    }
                }
            }
        }
        assignment = clients;
        break;
    }

    // For every class, split its samples evenly over the clients holding it.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    let class_index = |label: usize| classes.binary_search(&label).expect("label seen above");
    for (i, &label) in labels.iter().enumerate() {
        by_class[class_index(label)].push(i);
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); v];
    for (ci, &class) in classes.iter().enumerate() {
        let holders: Vec<usize> = (0..v)
            .filter(|&client| assignment[client].contains(&class))
            .collect();
        let mut samples = by_class[ci].clone();
        samples.shuffle(rng);
        let h = holders.len();
        let base = samples.len() / h;
        let extra = samples.len() % h;
        let mut cursor = 0;
        for (slot, &client) in holders.iter().enumerate() {
            let size = base + usize::from(slot < extra);
            shards[client].extend_from_slice(&samples[cursor..cursor + size]);
            cursor += size;
        }
    }
    for shard in shards.iter_mut() {
        shard.sort_unstable();
    }
    let partition = Partition { shards };
    partition.validate(labels.len()).map_err(|e| {
        Error::Config(format!("pathological split infeasible for this data: {}", e))
    })?;
    Ok(partition)
}

/// Per-class client proportions drawn from Dirichlet(alpha). Empty shards
/// are repaired by moving one sample from the largest shard.
pub fn split_dirichlet(
    labels: &[usize],
    v: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Partition> {
    if v == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("dirichlet alpha must be > 0, got {}", alpha)));
    }
    if labels.len() < v {
        return Err(Error::Config(format!(
            "{} samples cannot cover {} clients",
            labels.len(),
            v
        )));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Config(format!("gamma parameters rejected: {}", e)))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); v];
    for &class in &classes {
        let mut samples: Vec<usize> =
            labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect();
        samples.shuffle(rng);
        // Normalized gamma draws are a Dirichlet sample. With tiny alpha all
        // draws can underflow to zero, so redraw until the sum is usable.
        let mut props = vec![0.0f64; v];
        let mut ok = false;
        for _ in 0..100 {
            let mut sum = 0.0;
            for p in props.iter_mut() {
                *p = gamma.sample(rng);
                sum += *p;
            }
            if sum > 1e-300 && sum.is_finite() {
                for p in props.iter_mut() {
                    *p /= sum;
                }
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Degenerate("dirichlet draws kept underflowing".into()));
        }
        // Cumulative boundaries over the shuffled class samples.
        let m = samples.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (client, &p) in props.iter().enumerate() {
            cum += p;
            let end = if client + 1 == v { m } else { (cum * m as f64).round() as usize };
            let end = end.clamp(start, m);
            shards[client].extend_from_slice(&samples[start..end]);
            start = end;
        }
    }
    // Repair pass: feed empty shards from the current largest shard.
    loop {
        let empty = match shards.iter().position(|s| s.is_empty()) {
            Some(i) => i,
            None => break,
        };
        let largest = (0..v)
            .max_by_key(|&i| (shards[i].len(), usize::MAX - i))
            .expect("at least one shard");
        if shards[largest].len() <= 1 {
            return Err(Error::Config("not enough samples to repair empty shards".into()));
        }
        let moved = shards[largest].pop().expect("largest shard nonempty");
        shards[empty].push(moved);
    }
    for shard in shards.iter_mut() {
        shard.sort_unstable();
    }
    let partition = Partition { shards };
    partition.validate(labels.len())?;
    Ok(partition)
}

/// Frobenius norm ratio ||delta|| / ||w0|| per layer, a calibration probe.
pub fn delta_to_backbone_ratios(task: &TeacherTask) -> Vec<f64> {
    task.true_deltas
        .iter()
        .zip(&task.backbone)
        .map(|(d, w)| frobenius_norm(d) / frobenius_norm(w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{lora_to_plora, LoraPair, TargetModule};
    use crate::numkit::{truncated_svd, RngStream};
    use crate::tinynet::{batch_loss, forward, AdapterSiteSet, Batch};
    use crate::tinynet::Activation;

    fn regression_spec() -> MlpSpec {
        MlpSpec { layer_dims: vec![6, 10, 4], activation: Activation::Relu, loss: Loss::Mse }
    }

    fn classification_spec() -> MlpSpec {
        MlpSpec {
            layer_dims: vec![5, 12, 7],
            activation: Activation::Relu,
            loss: Loss::CrossEntropy,
        }
    }

    fn entropy(counts: &[usize]) -> f64 {
        let total: usize = counts.iter().sum();
        let mut h = 0.0;
        for &c in counts {
            if c > 0 {
                let p = c as f64 / total as f64;
                h -= p * p.ln();
            }
        }
        h
    }

    fn label_counts(labels: &[usize], classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes];
        for &l in labels {
            counts[l] += 1;
        }
        counts
    }

    #[test]
    fn zero_deltas_give_backbone_targets() {
        let mut rng = RngStream::new(11).derive(0, 0, 0);
        let mut task = TeacherTask::new(
            regression_spec(),
            3,
            TaskKind::Regression,
            0.0,
            0.2,
            &mut rng,
        )
        .unwrap();
        for d in task.true_deltas.iter_mut() {
            *d = Matrix::zeros(d.rows(), d.cols());
        }
        let data = gen_teacher_dataset(&task, 9, &mut RngStream::new(12).derive(0, 0, 0)).unwrap();
        let plain = forward_dense(&task.spec, &task.backbone, &data.inputs).unwrap();
        match &data.targets {
            Targets::Regression(t) => assert_eq!(t, &plain),
            _ => panic!("regression task"),
        }
    }

    #[test]
    fn teacher_is_realizable_by_matching_adapters() {
        let mut rng = RngStream::new(21).derive(0, 0, 0);
        let task =
            TeacherTask::new(regression_spec(), 4, TaskKind::Regression, 0.0, 0.2, &mut rng)
                .unwrap();
        let data = gen_teacher_dataset(&task, 64, &mut RngStream::new(22).derive(0, 0, 0)).unwrap();
        let frozen: Vec<TargetModule> =
            task.backbone.iter().map(|w| TargetModule::new(w.clone())).collect();
        let sites = AdapterSiteSet {
            sites: task
                .delta_factors
                .iter()
                .map(|(b, a)| {
                    lora_to_plora(&LoraPair::new(a.clone(), b.clone(), 1.0).unwrap())
                })
                .collect(),
        };
        let batch = Batch { inputs: data.inputs.clone(), targets: data.targets.clone() };
        let (out, _) = forward(&task.spec, &frozen, &sites, &batch).unwrap();
        let loss = batch_loss(&task.spec, &out, &batch.targets).unwrap();
        assert!(loss <= 1e-20, "realizability loss {}", loss);
    }

    #[test]
    fn true_delta_rank_is_exact() {
        let mut rng = RngStream::new(31).derive(0, 0, 0);
        let task =
            TeacherTask::new(regression_spec(), 3, TaskKind::Regression, 0.0, 0.2, &mut rng)
                .unwrap();
        for delta in &task.true_deltas {
            let (_, s, _) = truncated_svd(delta, 4).unwrap();
            assert!(s[2] > 1e-8, "rank collapsed: {:?}", s);
            assert!(s[3] < 1e-10, "rank exceeded r*: {:?}", s);
        }
    }

    #[test]
    fn delta_norm_ratio_near_target() {
        let mut rng = RngStream::new(41).derive(0, 0, 0);
        let task =
            TeacherTask::new(regression_spec(), 4, TaskKind::Regression, 0.0, 0.2, &mut rng)
                .unwrap();
        for r in delta_to_backbone_ratios(&task) {
            assert!(r > 0.05 && r < 0.6, "delta/backbone ratio {}", r);
        }
    }

    #[test]
    fn input_sample_mean_is_small() {
        let mut rng = RngStream::new(51).derive(0, 0, 0);
        let task =
            TeacherTask::new(regression_spec(), 2, TaskKind::Regression, 0.0, 0.2, &mut rng)
                .unwrap();
        let data =
            gen_teacher_dataset(&task, 10_000, &mut RngStream::new(52).derive(0, 0, 0)).unwrap();
        let n = data.inputs.rows() as f64;
        for j in 0..data.inputs.cols() {
            let mean: f64 = data.inputs.col(j).iter().sum::<f64>() / n;
            assert!(mean.abs() < 0.05, "column {} mean {}", j, mean);
        }
    }

    #[test]
    fn clustered_inputs_center_near_their_cluster() {
        let mut rng = RngStream::new(61).derive(0, 0, 0);
        let task =
            TeacherTask::new(regression_spec(), 2, TaskKind::Regression, 0.0, 0.2, &mut rng)
                .unwrap();
        let centers = cluster_centers(3, 6, 2.0, &mut rng).unwrap();
        let data = gen_teacher_dataset_at(&task, 4000, &centers[1], &mut rng).unwrap();
        let n = data.inputs.rows() as f64;
        for j in 0..6 {
            let mean: f64 = data.inputs.col(j).iter().sum::<f64>() / n;
            assert!((mean - centers[1][j]).abs() < 0.1, "dim {}: {} vs {}", j, mean, centers[1][j]);
        }
    }

    #[test]
    fn iid_split_examples() {
        let mut rng = RngStream::new(71).derive(0, 0, 0);
        let p = split_iid(100, 50, &mut rng).unwrap();
        assert!(p.shards.iter().all(|s| s.len() == 2));
        p.validate(100).unwrap();

        let p = split_iid(7, 3, &mut rng).unwrap();
        let mut sizes: Vec<usize> = p.shards.iter().map(|s| s.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3]);
        p.validate(7).unwrap();

        assert!(split_iid(2, 3, &mut rng).is_err());
    }

    #[test]
    fn iid_split_is_deterministic_and_random_across_seeds() {
        let a = split_iid(40, 7, &mut RngStream::new(81).derive(0, 0, 0)).unwrap();
        let b = split_iid(40, 7, &mut RngStream::new(81).derive(0, 0, 0)).unwrap();
        assert_eq!(a, b);
        let c = split_iid(40, 7, &mut RngStream::new(82).derive(0, 0, 0)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pathological_single_class_shards() {
        // 10 classes, 40 samples each, one class per client.
        let labels: Vec<usize> = (0..400).map(|i| i % 10).collect();
        let mut rng = RngStream::new(91).derive(0, 0, 0);
        let p = split_pathological(&labels, 10, 1, &mut rng).unwrap();
        p.validate(labels.len()).unwrap();
        let mut covered = Vec::new();
        for shard in &p.shards {
            let mut classes: Vec<usize> = shard.iter().map(|&i| labels[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), 1, "shard has classes {:?}", classes);
            covered.push(classes[0]);
        }
        covered.sort_unstable();
        covered.dedup();
        assert_eq!(covered.len(), 10, "every class must be served");
    }

    #[test]
    fn pathological_full_class_coverage() {
        let labels: Vec<usize> = (0..500).map(|i| i % 10).collect();
        let mut rng = RngStream::new(92).derive(0, 0, 0);
        let p = split_pathological(&labels, 5, 10, &mut rng).unwrap();
        p.validate(labels.len()).unwrap();
        for shard in &p.shards {
            let mut classes: Vec<usize> = shard.iter().map(|&i| labels[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), 10);
        }
    }

    #[test]
    fn pathological_exact_class_count_per_shard() {
        let labels: Vec<usize> = (0..700).map(|i| i % 7).collect();
        let mut rng = RngStream::new(93).derive(0, 0, 0);
        let p = split_pathological(&labels, 14, 2, &mut rng).unwrap();
        p.validate(labels.len()).unwrap();
        for shard in &p.shards {
            let mut classes: Vec<usize> = shard.iter().map(|&i| labels[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), 2);
        }
    }

    #[test]
    fn pathological_infeasible_configs_error() {
        let labels: Vec<usize> = (0..70).map(|i| i % 7).collect();
        let mut rng = RngStream::new(94).derive(0, 0, 0);
        // 2 clients x 1 class cannot cover 7 classes.
        assert!(split_pathological(&labels, 2, 1, &mut rng).is_err());
        // classes_per_client beyond the class count.
        assert!(split_pathological(&labels, 3, 8, &mut rng).is_err());
    }

    #[test]
    fn dirichlet_large_alpha_approaches_global_mix() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 4).collect();
        let mut rng = RngStream::new(101).derive(0, 0, 0);
        let p = split_dirichlet(&labels, 5, 1e6, &mut rng).unwrap();
        p.validate(labels.len()).unwrap();
        let global = label_counts(&labels, 4);
        let gtotal: usize = global.iter().sum();
        for shard in &p.shards {
            let shard_labels: Vec<usize> = shard.iter().map(|&i| labels[i]).collect();
            let counts = label_counts(&shard_labels, 4);
            let total: usize = counts.iter().sum();
            for c in 0..4 {
                let pg = global[c] as f64 / gtotal as f64;
                let ps = counts[c] as f64 / total as f64;
                assert!((pg - ps).abs() < 0.05, "class {} shard {} vs global {}", c, ps, pg);
            }
        }
    }

    #[test]
    fn dirichlet_small_alpha_collapses_entropy() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 8).collect();
        let global_entropy = entropy(&label_counts(&labels, 8));
        let mut medians = Vec::new();
        for seed in 0..20 {
            let mut rng = RngStream::new(200 + seed).derive(0, 0, 0);
            let p = split_dirichlet(&labels, 10, 0.01, &mut rng).unwrap();
            p.validate(labels.len()).unwrap();
            let mut entropies: Vec<f64> = p
                .shards
                .iter()
                .map(|shard| {
                    let sl: Vec<usize> = shard.iter().map(|&i| labels[i]).collect();
                    entropy(&label_counts(&sl, 8))
                })
                .collect();
            entropies.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(entropies[entropies.len() / 2]);
        }
        medians.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_of_medians = medians[medians.len() / 2];
        assert!(
            median_of_medians < 0.25 * global_entropy,
            "median shard entropy {} vs global {}",
            median_of_medians,
            global_entropy
        );
    }

    #[test]
    fn dirichlet_repair_leaves_no_empty_shard() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        for seed in 0..30 {
            let mut rng = RngStream::new(300 + seed).derive(0, 0, 0);
            let p = split_dirichlet(&labels, 12, 0.01, &mut rng).unwrap();
            p.validate(labels.len()).unwrap();
            assert!(p.shards.iter().all(|s| !s.is_empty()));
        }
    }

    #[test]
    fn partitioners_are_deterministic() {
        let labels: Vec<usize> = (0..300).map(|i| i % 6).collect();
        let path1 =
            split_pathological(&labels, 6, 2, &mut RngStream::new(400).derive(0, 0, 0)).unwrap();
        let path2 =
            split_pathological(&labels, 6, 2, &mut RngStream::new(400).derive(0, 0, 0)).unwrap();
        assert_eq!(path1, path2);
        let d1 = split_dirichlet(&labels, 6, 0.5, &mut RngStream::new(401).derive(0, 0, 0)).unwrap();
        let d2 = split_dirichlet(&labels, 6, 0.5, &mut RngStream::new(401).derive(0, 0, 0)).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn classification_labels_come_from_argmax() {
        let mut rng = RngStream::new(111).derive(0, 0, 0);
        let task = TeacherTask::new(
            classification_spec(),
            3,
            TaskKind::Classification,
            0.0,
            0.2,
            &mut rng,
        )
        .unwrap();
        let data = gen_teacher_dataset(&task, 50, &mut RngStream::new(112).derive(0, 0, 0)).unwrap();
        let outputs =
            forward_dense(&task.spec, &task.effective_weights().unwrap(), &data.inputs).unwrap();
        match &data.targets {
            Targets::Labels(labels) => {
                for (i, &label) in labels.iter().enumerate() {
                    let row = outputs.row(i);
                    let best =
                        (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
                    assert_eq!(label, best);
                }
            }
            _ => panic!("classification task"),
        }
    }

    #[test]
    fn dataset_text_round_trip() {
        let mut rng = RngStream::new(121).derive(0, 0, 0);
        let task =
            TeacherTask::new(regression_spec(), 2, TaskKind::Regression, 0.0, 0.2, &mut rng)
                .unwrap();
        let data = gen_teacher_dataset(&task, 17, &mut rng).unwrap();
        let back = Dataset::from_text(&data.to_text()).unwrap();
        assert_eq!(data, back);

        let mut rng = RngStream::new(122).derive(0, 0, 0);
        let ctask = TeacherTask::new(
            classification_spec(),
            2,
            TaskKind::Classification,
            0.0,
            0.2,
            &mut rng,
        )
        .unwrap();
        let cdata = gen_teacher_dataset(&ctask, 11, &mut rng).unwrap();
        let cback = Dataset::from_text(&cdata.to_text()).unwrap();
        assert_eq!(cdata, cback);

        assert!(Dataset::from_text("bogus").is_err());
    }

    #[test]
    fn subset_selects_rows_in_order() {
        let mut rng = RngStream::new(131).derive(0, 0, 0);
        let task =
            TeacherTask::new(regression_spec(), 2, TaskKind::Regression, 0.0, 0.2, &mut rng)
                .unwrap();
        let data = gen_teacher_dataset(&task, 10, &mut rng).unwrap();
        let sub = data.subset(&[3, 1, 7]).unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.inputs.row(0), data.inputs.row(3));
        assert_eq!(sub.inputs.row(2), data.inputs.row(7));
        assert!(data.subset(&[10]).is_err());
    }

    #[test]
    fn task_construction_rejects_bad_configs() {
        let mut rng = RngStream::new(141).derive(0, 0, 0);
        // rank above min dim
        assert!(TeacherTask::new(
            regression_spec(),
            5,
            TaskKind::Regression,
            0.0,
            0.2,
            &mut rng
        )
        .is_err());
        // kind/loss mismatch
        assert!(TeacherTask::new(
            regression_spec(),
            2,
            TaskKind::Classification,
            0.0,
            0.2,
            &mut rng
        )
        .is_err());
        assert!(TeacherTask::new(
            regression_spec(),
            2,
            TaskKind::Regression,
            -0.1,
            0.2,
            &mut rng
        )
        .is_err());
    }
}
