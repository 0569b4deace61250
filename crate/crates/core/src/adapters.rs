//! Adapter algebra for frozen weight matrices. A rank-r adapter is either a
//! matrix pair (a: r x k, b: d x r) or an equivalent stack of r one-rank
//! components; both produce the update scale * b * a. Folding moves a subset
//! of components into the frozen weight for the duration of a round.

use serde::{Deserialize, Serialize};

use crate::numkit::{frobenius_norm, matmul, Matrix};
use crate::{Error, Result};

/// Classic low-rank pair: delta = scale * b * a.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

impl LoraPair {
    pub fn new(a: Matrix, b: Matrix, scale: f64) -> Result<Self> {
        if a.rows() != b.cols() || a.rows() == 0 {
            return Err(Error::Shape(format!(
                "rank mismatch: a is {}x{}, b is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if scale <= 0.0 {
            return Err(Error::Config(format!("adapter scale must be > 0, got {}", scale)));
        }
        Ok(Self { a, b, scale })
    }

    #[must_use]
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Number of trainable scalars: r * (d + k).
    #[must_use]
    pub fn param_count(&self) -> usize {
        self.a.rows() * self.a.cols() + self.b.rows() * self.b.cols()
    }
}

/// One rank-one component: a is 1 x k, b is d x 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneRank {
    pub a: Matrix,
    pub b: Matrix,
}

impl OneRank {
    /// Outer-product weight norm |b|_2 * |a|_2, which equals the Frobenius
    /// norm of b * a for a rank-one product.
    #[must_use]
    pub fn weight_norm(&self) -> f64 {
        frobenius_norm(&self.b) * frobenius_norm(&self.a)
    }
}

/// Ordered stack of one-rank components sharing d and k;
/// delta = scale * sum_j b_j * a_j.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PloraStack {
    pub components: Vec<OneRank>,
    pub scale: f64,
}

impl PloraStack {
    pub fn new(components: Vec<OneRank>, scale: f64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::Config(format!("adapter scale must be > 0, got {}", scale)));
        }
        let stack = Self { components, scale };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.components.first() {
            let (d, k) = (first.b.rows(), first.a.cols());
            for (j, c) in self.components.iter().enumerate() {
                if c.a.rows() != 1 || c.b.cols() != 1 {
                    return Err(Error::Shape(format!("component {} is not rank one", j)));
                }
                if c.b.rows() != d || c.a.cols() != k {
                    return Err(Error::Shape(format!(
                        "component {} is {}x{}, expected {}x{}",
                        j,
                        c.b.rows(),
                        c.a.cols(),
                        d,
                        k
                    )));
                }
            }
        }
        Ok(())
    }

    #[must_use]
    pub fn rank(&self) -> usize {
        self.components.len()
    }

    #[must_use]
    pub fn param_count(&self) -> usize {
        self.components
            .iter()
            .map(|c| c.a.cols() + c.b.rows())
            .sum()
    }

    /// Output and input dims (d, k) of the adapted weight.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.components
            .first()
            .map(|c| (c.b.rows(), c.a.cols()))
    }
}

/// Frozen target weight plus the delta folded into it for the current round.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetModule {
    w0: Matrix,
    fold_delta: Matrix,
}

impl TargetModule {
    pub fn new(w0: Matrix) -> Self {
        let fold_delta = Matrix::zeros(w0.rows(), w0.cols());
        Self { w0, fold_delta }
    }

    /// Replace the folded delta wholesale (methods that merge an entire
    /// dense update into the frozen weight use this).
    pub fn set_fold_delta(&mut self, delta: Matrix) -> Result<()> {
        if delta.rows() != self.w0.rows() || delta.cols() != self.w0.cols() {
            return Err(Error::Shape(format!(
                "fold delta {}x{} for weight {}x{}",
                delta.rows(),
                delta.cols(),
                self.w0.rows(),
                self.w0.cols()
            )));
        }
        self.fold_delta = delta;
        Ok(())
    }

    #[must_use]
    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    #[must_use]
    pub fn fold_delta(&self) -> &Matrix {
        &self.fold_delta
    }

    /// w0 + fold_delta, the weight the forward pass sees as frozen.
    pub fn frozen_weight(&self) -> Matrix {
        self.w0.add(&self.fold_delta).expect("fold_delta shaped like w0")
    }
}

/// delta = scale * b * a for a matrix-form adapter pair.
pub fn lora_delta(p: &LoraPair) -> Result<Matrix> {
    Ok(matmul(&p.b, &p.a)?.scale(p.scale))
}

/// delta = scale * sum_j b_j * a_j, summed in component-index order.
pub fn plora_delta(s: &PloraStack) -> Result<Matrix> {
    let (d, k) = match s.dims() {
        Some(dk) => dk,
        None => return Err(Error::Shape("plora_delta of empty stack".into())),
    };
    let mut acc = Matrix::zeros(d, k);
    for c in &s.components {
        let prod = Matrix::outer(&c.b.col(0), c.a.row(0));
        acc.add_scaled(&prod, 1.0)?;
    }
    Ok(acc.scale(s.scale))
}

/// Like plora_delta but restricted to a component subset, unscaled by
/// membership order: components are visited in ascending index.
fn partial_delta(s: &PloraStack, keep: impl Fn(usize) -> bool, d: usize, k: usize) -> Matrix {
    let mut acc = Matrix::zeros(d, k);
    for (j, c) in s.components.iter().enumerate() {
        if keep(j) {
            let prod = Matrix::outer(&c.b.col(0), c.a.row(0));
            acc.add_scaled(&prod, 1.0).expect("validated stack shapes");
        }
    }
    acc.scale(s.scale)
}

/// Split a matrix pair into its rank-one components: component j takes
/// row j of a and column j of b.
pub fn lora_to_plora(p: &LoraPair) -> PloraStack {
    let components = (0..p.rank())
        .map(|j| OneRank {
            a: Matrix::row_vector(p.a.row(j)),
            b: Matrix::col_vector(&p.b.col(j)),
        })
        .collect();
    PloraStack { components, scale: p.scale }
}

/// Reassemble the matrix pair from a stack; exact inverse of lora_to_plora.
pub fn plora_to_lora(s: &PloraStack) -> Result<LoraPair> {
    let (d, k) = s
        .dims()
        .ok_or_else(|| Error::Shape("plora_to_lora of empty stack".into()))?;
    let r = s.rank();
    let mut a = Matrix::zeros(r, k);
    let mut b = Matrix::zeros(d, r);
    for (j, c) in s.components.iter().enumerate() {
        for col in 0..k {
            a.set(j, col, c.a.get(0, col));
        }
        for row in 0..d {
            b.set(row, j, c.b.get(row, 0));
        }
    }
    LoraPair::new(a, b, s.scale)
}

/// Fold the given components into the frozen weight: the returned module has
/// fold_delta = scale * sum_{j in unselected} b_j * a_j and the same w0.
pub fn fold(s: &PloraStack, unselected: &[usize], t: &TargetModule) -> Result<TargetModule> {
    let r = s.rank();
    if let Some(&bad) = unselected.iter().find(|&&j| j >= r) {
        return Err(Error::Shape(format!(
            "fold index {} out of range for stack of rank {}",
            bad, r
        )));
    }
    let mut mask = vec![false; r];
    for &j in unselected {
        mask[j] = true;
    }
    let (d, k) = (t.w0.rows(), t.w0.cols());
    if let Some((sd, sk)) = s.dims() {
        if (sd, sk) != (d, k) {
            return Err(Error::Shape(format!(
                "fold: stack is {}x{}, target is {}x{}",
                sd, sk, d, k
            )));
        }
    }
    let fold_delta = partial_delta(s, |j| mask[j], d, k);
    Ok(TargetModule { w0: t.w0.clone(), fold_delta })
}

/// w0 + fold_delta + delta(trainable). An empty trainable stack contributes
/// nothing (a fully folded module has no trainable components).
pub fn effective_weight(t: &TargetModule, trainable: &PloraStack) -> Result<Matrix> {
    let mut w = t.frozen_weight();
    if !trainable.components.is_empty() {
        if trainable.dims() != Some((w.rows(), w.cols())) {
            return Err(Error::Shape(format!(
                "effective_weight: adapter dims {:?} vs weight {}x{}",
                trainable.dims(),
                w.rows(),
                w.cols()
            )));
        }
        w.add_scaled(&plora_delta(trainable)?, 1.0)?;
    }
    Ok(w)
}
