//! Per-round communication, computation, and memory accounting.
//!
//! Everything here is a closed-form count over a cost profile; the engine
//! separately measures actual payload sizes so the two can be compared.
//! Local training flops are deliberately out of scope (every method runs
//! the same local fine-tuning), only the terms that differ are modeled.

use serde::{Deserialize, Serialize};

use crate::strategies::Method;
use crate::{Error, Result};

/// Shape of one experiment for costing purposes: L adapted modules of size
/// d x k, global rank R, client rank r_i, fixed bytes per parameter
/// (default 2: half-precision accounting).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostProfile {
    pub d: u64,
    pub k: u64,
    pub modules: u64,
    pub rank: u64,
    pub client_rank: u64,
    pub bytes_per_param: u64,
}

impl CostProfile {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("k", self.k),
            ("modules", self.modules),
            ("rank", self.rank),
            ("client_rank", self.client_rank),
            ("bytes_per_param", self.bytes_per_param),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("cost profile {} must be positive", name)));
            }
        }
        if self.client_rank > self.rank {
            return Err(Error::Config(format!(
                "client rank {} exceeds global rank {}",
                self.client_rank, self.rank
            )));
        }
        Ok(())
    }
}

/// Client upload payload. Every method ships rank-r_i factors, so this is
/// method independent: L * (d+k) * r_i * bytes.
pub fn uplink_bytes(_method: Method, p: &CostProfile) -> Result<u64> {
    p.validate()?;
    Ok(p.modules * (p.d + p.k) * p.client_rank * p.bytes_per_param)
}

/// Server-to-client payload. The one-rank stack method broadcasts the full
/// rank-R stack (the client folds what it will not train); truncating
/// methods send rank-r_i factors; the stacking method must ship the dense
/// accumulated update.
pub fn downlink_bytes(method: Method, p: &CostProfile) -> Result<u64> {
    p.validate()?;
    Ok(match method {
        Method::FedPlora => p.modules * (p.d + p.k) * p.rank * p.bytes_per_param,
        Method::FedIt | Method::HetLora | Method::FlexLora => {
            p.modules * (p.d + p.k) * p.client_rank * p.bytes_per_param
        }
        Method::Flora => p.modules * p.d * p.k * p.bytes_per_param,
    })
}

/// Client-side cost of folding the R - r_i unselected components into the
/// frozen weight: one multiply and one add per entry per component.
pub fn fold_flops(p: &CostProfile) -> Result<u64> {
    p.validate()?;
    Ok(p.modules * 2 * p.d * p.k * (p.rank - p.client_rank))
}

/// Flops the SVD re-factorization is modeled to cost. The constant is a
/// documented modeling choice (Golub-Kahan style bound); only cross-method
/// ordering is ever asserted against it.
pub fn svd_cost(d: u64, k: u64) -> u64 {
    let lo = d.min(k);
    let hi = d.max(k);
    14 * lo * lo * hi
}

/// Server aggregation cost for one round with `participants` uploads.
/// Averaging factor entries is cheap; padding adds writes; methods that
/// materialize dense client products pay 2dk per rank unit; the SVD
/// re-factorization is a one-off per round, not per module payload element.
pub fn agg_flops(method: Method, p: &CostProfile, participants: u64) -> Result<u64> {
    p.validate()?;
    if participants == 0 {
        return Err(Error::Config("aggregation needs at least one participant".into()));
    }
    Ok(match method {
        Method::FedPlora | Method::FedIt => participants * p.modules * (p.d + p.k) * p.rank,
        Method::HetLora => {
            participants * p.modules * (p.d + p.k) * p.rank
                + participants * p.modules * (p.d + p.k) * (p.rank - p.client_rank)
        }
        Method::Flora => participants * p.modules * 2 * p.d * p.k * p.client_rank,
        Method::FlexLora => {
            participants * p.modules * 2 * p.d * p.k * p.client_rank + svd_cost(p.d, p.k)
        }
    })
}

/// Transient memory a client needs to hold the received payload before
/// folding or merging it away. Same payload as the downlink, counted
/// independently.
pub fn temp_memory_bytes(method: Method, p: &CostProfile) -> Result<u64> {
    p.validate()?;
    Ok(match method {
        Method::FedPlora => p.modules * (p.d + p.k) * p.rank * p.bytes_per_param,
        Method::FedIt | Method::HetLora | Method::FlexLora => {
            p.modules * (p.d + p.k) * p.client_rank * p.bytes_per_param
        }
        Method::Flora => p.modules * p.d * p.k * p.bytes_per_param,
    })
}

pub const ALL_METHODS: [Method; 5] =
    [Method::FedIt, Method::FedPlora, Method::Flora, Method::FlexLora, Method::HetLora];
