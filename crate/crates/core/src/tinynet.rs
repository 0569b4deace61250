//! Small multi-layer perceptron with a frozen backbone and trainable
//! adapter stacks on each layer weight. Gradients for the adapters are
//! analytic; a central finite-difference routine serves as the oracle.
//!
//! The forward pass never materializes the adapted weight: the adapter
//! contribution is computed through its rank-one factors, so dense-weight
//! reference forwards stay an independent check.

use serde::{Deserialize, Serialize};

use crate::adapters::{effective_weight, PloraStack, TargetModule};
use crate::numkit::{matmul, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    CrossEntropy,
}

/// Architecture: layer_dims = [d0, d1, .., dH]; layer l maps d_{l-1} -> d_l
/// through act(W_l h). Weights carry no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config("mlp needs at least one layer".into()));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("mlp layer dims must be >= 1".into()));
        }
        Ok(())
    }

    #[must_use]
    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// (out_dim, in_dim) of layer l's weight.
    #[must_use]
    pub fn weight_dims(&self, l: usize) -> (usize, usize) {
        (self.layer_dims[l + 1], self.layer_dims[l])
    }
}

/// One trainable adapter stack per layer weight.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSiteSet {
    pub sites: Vec<PloraStack>,
}

impl AdapterSiteSet {
    pub fn check_shapes(&self, spec: &MlpSpec) -> Result<()> {
        if self.sites.len() != spec.layer_count() {
            return Err(Error::Shape(format!(
                "{} adapter sites for {} layers",
                self.sites.len(),
                spec.layer_count()
            )));
        }
        for (l, site) in self.sites.iter().enumerate() {
            if let Some((d, k)) = site.dims() {
                if (d, k) != spec.weight_dims(l) {
                    return Err(Error::Shape(format!(
                        "site {} is {}x{}, layer weight is {:?}",
                        l,
                        d,
                        k,
                        spec.weight_dims(l)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Targets are either dense regression outputs or class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Regression(Matrix),
    Labels(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Intermediate state retained by forward for the backward pass.
pub struct ForwardCache {
    /// Input to each layer: index l holds h_{l-1} (n x d_{l-1}).
    layer_inputs: Vec<Matrix>,
    /// Pre-activation of each layer (n x d_l).
    pre_activations: Vec<Matrix>,
    /// Smallest |pre-activation| across the batch, the relu kink margin.
    min_abs_pre: f64,
}

impl ForwardCache {
    #[must_use]
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.min_abs_pre
    }
}

/// Gradient of one rank-one component.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentGrad {
    pub da: Matrix,
    pub db: Matrix,
}

/// Mirror of AdapterSiteSet holding per-component gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub sites: Vec<Vec<ComponentGrad>>,
}

impl AdapterGrads {
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for site in &self.sites {
            for g in site {
                for x in g.da.data().iter().chain(g.db.data()) {
                    m = m.max(x.abs());
                }
            }
        }
        m
    }
}

fn activate(z: &Matrix, act: Activation) -> Matrix {
    match act {
        Activation::Identity => z.clone(),
        Activation::Relu => {
            let data = z.data().iter().map(|&x| x.max(0.0)).collect();
            Matrix::new(z.rows(), z.cols(), data).expect("same shape")
        }
    }
}

fn activation_derivative(z: &Matrix, act: Activation) -> Matrix {
    match act {
        Activation::Identity => {
            Matrix::new(z.rows(), z.cols(), vec![1.0; z.rows() * z.cols()]).expect("same shape")
        }
        Activation::Relu => {
            let data = z.data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
            Matrix::new(z.rows(), z.cols(), data).expect("same shape")
        }
    }
}

/// Pre-activation of one layer without materializing the adapted weight:
/// z = h (w0 + fold)^T + scale * sum_j (h a_j^T) b_j^T.
fn layer_preactivation(h: &Matrix, frozen: &TargetModule, site: &PloraStack) -> Result<Matrix> {
    let mut z = matmul(h, &frozen.frozen_weight().transpose())?;
    for c in &site.components {
        let ha = matmul(h, &c.a.transpose())?; // n x 1
        let contrib = matmul(&ha, &c.b.transpose())?; // n x d
        z.add_scaled(&contrib, site.scale)?;
    }
    Ok(z)
}

/// Run the network over a batch. Returns outputs (n x dH) and the cache
/// needed by backward.
pub fn forward(
    spec: &MlpSpec,
    frozen_layers: &[TargetModule],
    sites: &AdapterSiteSet,
    batch: &Batch,
) -> Result<(Matrix, ForwardCache)> {
    spec.validate()?;
    sites.check_shapes(spec)?;
    if frozen_layers.len() != spec.layer_count() {
        return Err(Error::Shape(format!(
            "{} frozen layers for {} layer spec",
            frozen_layers.len(),
            spec.layer_count()
        )));
    }
    if batch.inputs.cols() != spec.layer_dims[0] || batch.is_empty() {
        return Err(Error::Shape(format!(
            "batch inputs {}x{} for input dim {}",
            batch.inputs.rows(),
            batch.inputs.cols(),
            spec.layer_dims[0]
        )));
    }
    let mut h = batch.inputs.clone();
    let mut layer_inputs = Vec::with_capacity(spec.layer_count());
    let mut pre_activations = Vec::with_capacity(spec.layer_count());
    let mut min_abs = f64::INFINITY;
    for l in 0..spec.layer_count() {
        let z = layer_preactivation(&h, &frozen_layers[l], &sites.sites[l])?;
        for x in z.data() {
            min_abs = min_abs.min(x.abs());
        }
        let out = activate(&z, spec.activation);
        layer_inputs.push(h);
        pre_activations.push(z);
        h = out;
    }
    Ok((h, ForwardCache { layer_inputs, pre_activations, min_abs_pre: min_abs }))
}

/// Dense reference forward over explicit weight matrices; used by
/// evaluation and as the oracle against the factored adapter path.
pub fn forward_dense(spec: &MlpSpec, weights: &[Matrix], inputs: &Matrix) -> Result<Matrix> {
    spec.validate()?;
    if weights.len() != spec.layer_count() {
        return Err(Error::Shape(format!(
            "{} weights for {} layers",
            weights.len(),
            spec.layer_count()
        )));
    }
    let mut h = inputs.clone();
    for w in weights {
        let z = matmul(&h, &w.transpose())?;
        h = activate(&z, spec.activation);
    }
    Ok(h)
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &x in row {
            denom += (x - max).exp();
        }
        for (j, &x) in row.iter().enumerate() {
            out.set(i, j, (x - max).exp() / denom);
        }
    }
    out
}

/// Mean loss of a batch given the network outputs.
pub fn batch_loss(spec: &MlpSpec, outputs: &Matrix, targets: &Targets) -> Result<f64> {
    let n = outputs.rows() as f64;
    match (spec.loss, targets) {
        (Loss::Mse, Targets::Regression(t)) => {
            if t.rows() != outputs.rows() || t.cols() != outputs.cols() {
                return Err(Error::Shape("mse target shape".into()));
            }
            let mut acc = 0.0;
            for (o, y) in outputs.data().iter().zip(t.data()) {
                let e = o - y;
                acc += e * e;
            }
            Ok(acc / (2.0 * n))
        }
        (Loss::CrossEntropy, Targets::Labels(labels)) => {
            if labels.len() != outputs.rows() {
                return Err(Error::Shape("label count".into()));
            }
            let mut acc = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= outputs.cols() {
                    return Err(Error::Shape(format!(
                        "label {} out of range for {} classes",
                        label,
                        outputs.cols()
                    )));
                }
                let row = outputs.row(i);
                // log-sum-exp with max shift for stability
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for &x in row {
                    denom += (x - max).exp();
                }
                acc += max + denom.ln() - row[label];
            }
            Ok(acc / n)
        }
        _ => Err(Error::Config("loss kind does not match target kind".into())),
    }
}

/// Gradient of the mean batch loss at the network outputs.
fn loss_gradient(spec: &MlpSpec, outputs: &Matrix, targets: &Targets) -> Result<Matrix> {
    let n = outputs.rows() as f64;
    match (spec.loss, targets) {
        (Loss::Mse, Targets::Regression(t)) => {
            if t.rows() != outputs.rows() || t.cols() != outputs.cols() {
                return Err(Error::Shape("mse target shape".into()));
            }
            Ok(outputs.sub(t)?.scale(1.0 / n))
        }
        (Loss::CrossEntropy, Targets::Labels(labels)) => {
            let mut g = softmax_rows(outputs);
            for (i, &label) in labels.iter().enumerate() {
                let v = g.get(i, label);
                g.set(i, label, v - 1.0);
            }
            Ok(g.scale(1.0 / n))
        }
        _ => Err(Error::Config("loss kind does not match target kind".into())),
    }
}

/// Analytic gradients of the mean batch loss with respect to every adapter
/// entry. The backbone and folded deltas receive no gradient.
pub fn backward(
    spec: &MlpSpec,
    frozen_layers: &[TargetModule],
    sites: &AdapterSiteSet,
    cache: &ForwardCache,
    batch: &Batch,
) -> Result<AdapterGrads> {
    let layers = spec.layer_count();
    let outputs = activate(&cache.pre_activations[layers - 1], spec.activation);
    // dL/dz_l, walked backwards from the output layer.
    let dout = loss_gradient(spec, &outputs, &batch.targets)?;
    let mut gz = hadamard(
        &dout,
        &activation_derivative(&cache.pre_activations[layers - 1], spec.activation),
    );
    let mut grads: Vec<Vec<ComponentGrad>> = vec![Vec::new(); layers];
    for l in (0..layers).rev() {
        let h_in = &cache.layer_inputs[l];
        // dL/dW_l for the whole adapted weight, shaped d_l x d_{l-1}.
        let dw = matmul(&gz.transpose(), h_in)?;
        let site = &sites.sites[l];
        let mut site_grads = Vec::with_capacity(site.components.len());
        for c in &site.components {
            let da = matmul(&c.b.transpose(), &dw)?.scale(site.scale); // 1 x k
            let db = matmul(&dw, &c.a.transpose())?.scale(site.scale); // d x 1
            site_grads.push(ComponentGrad { da, db });
        }
        grads[l] = site_grads;
        if l > 0 {
            let w_eff = effective_weight(&frozen_layers[l], site)?;
            let dh = matmul(&gz, &w_eff)?;
            gz = hadamard(
                &dh,
                &activation_derivative(&cache.pre_activations[l - 1], spec.activation),
            );
        }
    }
    Ok(AdapterGrads { sites: grads })
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("same shape")
}

/// In-place SGD update of every trainable adapter entry.
pub fn sgd_step(sites: &mut AdapterSiteSet, grads: &AdapterGrads, lr: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be > 0, got {}", lr)));
    }
    if grads.sites.len() != sites.sites.len() {
        return Err(Error::Shape("gradient/site count mismatch".into()));
    }
    for (site, site_grads) in sites.sites.iter_mut().zip(&grads.sites) {
        if site.components.len() != site_grads.len() {
            return Err(Error::Shape("gradient/component count mismatch".into()));
        }
        for (c, g) in site.components.iter_mut().zip(site_grads) {
            c.a.add_scaled(&g.da, -lr)?;
            c.b.add_scaled(&g.db, -lr)?;
        }
    }
    Ok(())
}

/// Central finite differences (L(x+h) - L(x-h)) / 2h for every trainable
/// entry; the independent oracle for backward.
pub fn finite_diff_grad(
    spec: &MlpSpec,
    frozen_layers: &[TargetModule],
    sites: &AdapterSiteSet,
    batch: &Batch,
    h: f64,
) -> Result<AdapterGrads> {
    assert!(h > 0.0, "finite_diff_grad requires h > 0");
    let mut work = sites.clone();
    let mut grads: Vec<Vec<ComponentGrad>> = Vec::with_capacity(work.sites.len());
    let loss_at = |s: &AdapterSiteSet| -> Result<f64> {
        let (out, _) = forward(spec, frozen_layers, s, batch)?;
        batch_loss(spec, &out, &batch.targets)
    };
    for l in 0..work.sites.len() {
        let mut site_grads = Vec::with_capacity(work.sites[l].components.len());
        for j in 0..work.sites[l].components.len() {
            let k = work.sites[l].components[j].a.cols();
            let d = work.sites[l].components[j].b.rows();
            let mut da = Matrix::zeros(1, k);
            let mut db = Matrix::zeros(d, 1);
            for col in 0..k {
                let orig = work.sites[l].components[j].a.get(0, col);
                work.sites[l].components[j].a.set(0, col, orig + h);
                let plus = loss_at(&work)?;
                work.sites[l].components[j].a.set(0, col, orig - h);
                let minus = loss_at(&work)?;
                work.sites[l].components[j].a.set(0, col, orig);
                da.set(0, col, (plus - minus) / (2.0 * h));
            }
            for row in 0..d {
                let orig = work.sites[l].components[j].b.get(row, 0);
                work.sites[l].components[j].b.set(row, 0, orig + h);
                let plus = loss_at(&work)?;
                work.sites[l].components[j].b.set(row, 0, orig - h);
                let minus = loss_at(&work)?;
                work.sites[l].components[j].b.set(row, 0, orig);
                db.set(row, 0, (plus - minus) / (2.0 * h));
            }
            site_grads.push(ComponentGrad { da, db });
        }
        grads.push(site_grads);
    }
    Ok(AdapterGrads { sites: grads })
}

/// Largest relative gap between two gradient sets, with an absolute floor
/// to keep near-zero entries from blowing up the ratio.
pub fn max_relative_gradient_gap(a: &AdapterGrads, b: &AdapterGrads) -> f64 {
    let mut worst = 0.0f64;
    for (sa, sb) in a.sites.iter().zip(&b.sites) {
        for (ga, gb) in sa.iter().zip(sb) {
            for (x, y) in ga
                .da
                .data()
                .iter()
                .chain(ga.db.data())
                .zip(gb.da.data().iter().chain(gb.db.data()))
            {
                let denom = x.abs().max(y.abs()).max(1e-8);
                worst = worst.max((x - y).abs() / denom);
            }
        }
    }
    worst
}
