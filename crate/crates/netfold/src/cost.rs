//! DP input tables: per-block latency T[i,j] and per-block importance
//! I[i,j] (base) / I[i,j,a,b] (extended), plus block feasibility rules, a
//! synthetic MAC-count latency model, normalization, and discretization.
//!
//! Infeasible latency blocks are simply absent (read as +infinity);
//! masked importance combinations are absent (read as -infinity).

use crate::merge::{merged_shape, MergeError};
use crate::net::{shape_trace, NetError, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("index out of range: block ({0},{1}) for L={2}")]
    IndexOutOfRange(usize, usize, usize),
    #[error("mask violation at (i={0},j={1},a={2},b={3})")]
    MaskViolation(usize, usize, u8, u8),
    #[error("non-finite or non-positive value at block ({0},{1})")]
    NonFiniteValue(usize, usize),
    #[error("singleton block ({0},{1}) missing from latency table")]
    MissingSingleton(usize, usize),
    #[error("latency model must have mac_cost >= 0, overhead >= 0, not both zero")]
    DegenerateModel,
    #[error("reference drop set is empty")]
    EmptyReferenceSet,
    #[error("tick overflow discretizing {0} ms at scale {1}")]
    Overflow(f64, u64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Millisecond latency of each feasible merged block.
#[derive(Debug, Clone)]
pub struct CostTable {
    pub l: usize,
    pub entries: BTreeMap<(usize, usize), f64>,
}

impl CostTable {
    pub fn new(l: usize) -> Self {
        CostTable {
            l,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, i: usize, j: usize, ms: f64) -> Result<(), CostError> {
        if i >= j || j > self.l {
            return Err(CostError::IndexOutOfRange(i, j, self.l));
        }
        if !ms.is_finite() || ms <= 0.0 {
            return Err(CostError::NonFiniteValue(i, j));
        }
        self.entries.insert((i, j), ms);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(&(i, j)).copied()
    }

    /// Every singleton must be present so a full partition always exists.
    pub fn validate(&self) -> Result<(), CostError> {
        for l in 1..=self.l {
            if !self.entries.contains_key(&(l - 1, l)) {
                return Err(CostError::MissingSingleton(l - 1, l));
            }
        }
        Ok(())
    }

    pub fn from_path(path: &Path, l: usize) -> Result<Self, CostError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut tbl = CostTable::new(l);
        for record in reader.deserialize() {
            let (i, j, ms): (usize, usize, f64) = record?;
            tbl.insert(i, j, ms)?;
        }
        tbl.validate()?;
        Ok(tbl)
    }

    pub fn to_path(&self, path: &Path) -> Result<(), CostError> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["i", "j", "ms"])?;
        for (&(i, j), &ms) in &self.entries {
            writer.write_record([i.to_string(), j.to_string(), format!("{ms}")])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Integer-tick latency table after discretization.
#[derive(Debug, Clone)]
pub struct TickTable {
    pub l: usize,
    pub unit_scale: u64,
    pub entries: BTreeMap<(usize, usize), u64>,
}

impl TickTable {
    pub fn get(&self, i: usize, j: usize) -> Option<u64> {
        self.entries.get(&(i, j)).copied()
    }
}

fn to_ticks(ms: f64, scale: u64) -> Result<u64, CostError> {
    // round half away from zero; inputs are non-negative here
    let v = (ms * scale as f64).round();
    if !v.is_finite() || v < 0.0 || v > u64::MAX as f64 {
        return Err(CostError::Overflow(ms, scale));
    }
    Ok(v as u64)
}

/// Converts milliseconds to integer ticks at `scale` ticks per ms.
pub fn discretize(
    tbl: &CostTable,
    budget_ms: f64,
    scale: u64,
) -> Result<(TickTable, u64), CostError> {
    assert!(scale >= 1, "scale must be >= 1");
    let mut entries = BTreeMap::new();
    for (&key, &ms) in &tbl.entries {
        entries.insert(key, to_ticks(ms, scale)?);
    }
    let budget = to_ticks(budget_ms, scale)?;
    Ok((
        TickTable {
            l: tbl.l,
            unit_scale: scale,
            entries,
        },
        budget,
    ))
}

/// Base-mode importance: one score per block, edge bits implied by the
/// network's activation pattern.
#[derive(Debug, Clone)]
pub struct BaseImportance {
    pub l: usize,
    pub entries: BTreeMap<(usize, usize), f64>,
}

impl BaseImportance {
    pub fn new(l: usize) -> Self {
        BaseImportance {
            l,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, i: usize, j: usize, score: f64) -> Result<(), CostError> {
        if i >= j || j > self.l {
            return Err(CostError::IndexOutOfRange(i, j, self.l));
        }
        if !score.is_finite() {
            return Err(CostError::NonFiniteValue(i, j));
        }
        self.entries.insert((i, j), score);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(&(i, j)).copied()
    }

    pub fn from_path(path: &Path, l: usize) -> Result<Self, CostError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut tbl = BaseImportance::new(l);
        for record in reader.deserialize() {
            let (i, j, score): (usize, usize, f64) = record?;
            tbl.insert(i, j, score)?;
        }
        Ok(tbl)
    }

    pub fn to_path(&self, path: &Path) -> Result<(), CostError> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["i", "j", "score"])?;
        for (&(i, j), &s) in &self.entries {
            writer.write_record([i.to_string(), j.to_string(), format!("{s}")])?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Subtracts `alpha * mean(drops)` from every finite entry. Affine:
    /// normalizing twice with a1, a2 equals once with a1 + a2.
    pub fn normalized(&self, alpha: f64, drops: &[f64]) -> Result<Self, CostError> {
        let shift = alpha * mean(drops)?;
        let mut out = self.clone();
        for v in out.entries.values_mut() {
            *v -= shift;
        }
        Ok(out)
    }
}

/// Extended-mode importance: score per (block, edge-bit pair). Bit a=1
/// keeps a non-identity activation at the left edge, b=1 at the right.
#[derive(Debug, Clone)]
pub struct ExtImportance {
    pub l: usize,
    pub entries: BTreeMap<(usize, usize, u8, u8), f64>,
}

impl ExtImportance {
    pub fn new(l: usize) -> Self {
        ExtImportance {
            l,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        i: usize,
        j: usize,
        a: u8,
        b: u8,
        score: f64,
    ) -> Result<(), CostError> {
        if i >= j || j > self.l || a > 1 || b > 1 {
            return Err(CostError::IndexOutOfRange(i, j, self.l));
        }
        if !score.is_finite() {
            return Err(CostError::NonFiniteValue(i, j));
        }
        self.entries.insert((i, j, a, b), score);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize, a: u8, b: u8) -> Option<f64> {
        self.entries.get(&(i, j, a, b)).copied()
    }

    /// Load and check each row against the network's activation masks.
    pub fn from_path(path: &Path, l: usize, net: &NetworkSpec) -> Result<Self, CostError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut tbl = ExtImportance::new(l);
        for record in reader.deserialize() {
            let (i, j, a, b, score): (usize, usize, u8, u8, f64) = record?;
            if !mask_allows(net, i, j, a, b) {
                return Err(CostError::MaskViolation(i, j, a, b));
            }
            tbl.insert(i, j, a, b, score)?;
        }
        Ok(tbl)
    }

    pub fn to_path(&self, path: &Path) -> Result<(), CostError> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["i", "j", "a", "b", "score"])?;
        for (&(i, j, a, b), &s) in &self.entries {
            writer.write_record([
                i.to_string(),
                j.to_string(),
                a.to_string(),
                b.to_string(),
                format!("{s}"),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn normalized(&self, alpha: f64, drops: &[f64]) -> Result<Self, CostError> {
        let shift = alpha * mean(drops)?;
        let mut out = self.clone();
        for v in out.entries.values_mut() {
            *v -= shift;
        }
        Ok(out)
    }
}

fn mean(drops: &[f64]) -> Result<f64, CostError> {
    if drops.is_empty() {
        return Err(CostError::EmptyReferenceSet);
    }
    Ok(drops.iter().sum::<f64>() / drops.len() as f64)
}

/// Edge-bit masks: a=0 needs an identity activation at boundary i, b=0
/// needs identity at j, and b=0 is additionally excluded when both edges
/// are identity.
pub fn mask_allows(net: &NetworkSpec, i: usize, j: usize, a: u8, b: u8) -> bool {
    let sigma_i_id = net.activation_at(i).is_identity();
    let sigma_j_id = net.activation_at(j).is_identity();
    if a == 0 && !sigma_i_id {
        return false;
    }
    if b == 0 && !sigma_j_id {
        return false;
    }
    if b == 0 && sigma_i_id && sigma_j_id {
        return false;
    }
    true
}

/// Blocks (i,j) whose layers i+1..j can be merged into one convolution.
/// Singletons are always included. A block is excluded when a skip has
/// exactly one endpoint strictly inside it (the skip can neither be fused
/// nor kept), or — under the heuristic flag — when a wide (K>1) layer
/// follows a strided layer anywhere inside, which would blow up the
/// merged kernel size.
pub fn feasible_latency_blocks(
    net: &NetworkSpec,
    forbid_wide_after_stride: bool,
) -> BTreeSet<(usize, usize)> {
    let l_max = net.layers.len();
    let mut out = BTreeSet::new();
    for i in 0..l_max {
        for j in i + 1..=l_max {
            if j - i == 1 {
                out.insert((i, j));
                continue;
            }
            let strictly_inside = |x: usize| i < x && x < j;
            let straddles = net.skips.iter().any(|s| {
                let contained = s.start >= i && s.end <= j;
                !contained && (strictly_inside(s.start) || strictly_inside(s.end))
            });
            if straddles {
                continue;
            }
            if forbid_wide_after_stride {
                let mut seen_stride = false;
                let mut bad = false;
                for layer in &net.layers[i..j] {
                    if seen_stride && layer.kernel_size > 1 {
                        bad = true;
                        break;
                    }
                    if layer.stride >= 2 {
                        seen_stride = true;
                    }
                }
                if bad {
                    continue;
                }
            }
            out.insert((i, j));
        }
    }
    out
}

/// Expands latency blocks by edge-activation bits under the masks.
pub fn feasible_importance_blocks(
    net: &NetworkSpec,
    blocks: &BTreeSet<(usize, usize)>,
) -> BTreeSet<(usize, usize, u8, u8)> {
    let mut out = BTreeSet::new();
    for &(i, j) in blocks {
        for a in 0..2u8 {
            for b in 0..2u8 {
                if mask_allows(net, i, j, a, b) {
                    out.insert((i, j, a, b));
                }
            }
        }
    }
    out
}

/// Analytical latency model: per-layer launch overhead plus a cost per
/// multiply-accumulate.
#[derive(Debug, Clone, Copy)]
pub struct LatencyModelParams {
    pub mac_cost: f64,
    pub layer_overhead: f64,
}

impl LatencyModelParams {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.mac_cost < 0.0
            || self.layer_overhead < 0.0
            || (self.mac_cost == 0.0 && self.layer_overhead == 0.0)
        {
            return Err(CostError::DegenerateModel);
        }
        Ok(())
    }
}

/// Latency of each feasible block from the merged layer's MAC count:
/// `overhead + mac_cost * H_out * W_out * (C_in/groups) * C_out * K_m^2`.
pub fn synthesize_latency(
    net: &NetworkSpec,
    blocks: &BTreeSet<(usize, usize)>,
    params: &LatencyModelParams,
) -> Result<CostTable, CostError> {
    params.validate()?;
    let trace = shape_trace(net)?;
    let mut tbl = CostTable::new(net.layers.len());
    for &(i, j) in blocks {
        let shape = merged_shape(net, i, j)?;
        let (_, h_in, w_in) = trace[i];
        let span = |extent: usize| -> Result<usize, CostError> {
            let padded = extent + 2 * shape.padding;
            if padded < shape.kernel_size {
                return Err(CostError::Net(NetError::NonPositiveSpatialDim { layer: j }));
            }
            Ok((padded - shape.kernel_size) / shape.stride + 1)
        };
        let h_out = span(h_in)?;
        let w_out = span(w_in)?;
        let macs = (h_out * w_out) as f64
            * (shape.in_channels / shape.groups) as f64
            * shape.out_channels as f64
            * (shape.kernel_size * shape.kernel_size) as f64;
        tbl.insert(i, j, params.layer_overhead + params.mac_cost * macs)?;
    }
    tbl.validate()?;
    Ok(tbl)
}

/// Seeded synthetic base-mode importance, uniform in [-1, 1] per block.
pub fn synthetic_importance_base(
    blocks: &BTreeSet<(usize, usize)>,
    l: usize,
    seed: u64,
) -> BaseImportance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tbl = BaseImportance::new(l);
    for &(i, j) in blocks {
        tbl.insert(i, j, rng.gen_range(-1.0..=1.0)).unwrap();
    }
    tbl
}

/// Seeded synthetic extended-mode importance over mask-approved entries.
pub fn synthetic_importance_ext(
    net: &NetworkSpec,
    blocks: &BTreeSet<(usize, usize)>,
    seed: u64,
) -> ExtImportance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tbl = ExtImportance::new(net.layers.len());
    for &(i, j, a, b) in &feasible_importance_blocks(net, blocks) {
        tbl.insert(i, j, a, b, rng.gen_range(-1.0..=1.0)).unwrap();
    }
    tbl
}
