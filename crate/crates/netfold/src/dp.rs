//! Exact solvers for the budgeted boundary-selection problem, plus the
//! exhaustive oracles used to verify them.
//!
//! All latencies here are integer ticks; absent table entries read as
//! +infinity and absent importance entries as -infinity. Scores use an
//! explicit sentinel (`Score::NegInf`) so float infinities never mix with
//! tick arithmetic. Tie-breaking is fixed everywhere (smallest index
//! first, edge bit 0 first) so outputs are reproducible.

use crate::cost::{BaseImportance, ExtImportance, TickTable};
use crate::net::{partition_blocks, Plan};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("budget {budget} ticks is not above the minimum latency {t_opt} (strict)")]
    InfeasibleBudget { budget: u64, t_opt: u64 },
    #[error("no feasible partition of block ({0},{1})")]
    NoFeasiblePartition(usize, usize),
    #[error("no plan with finite importance fits the budget")]
    NoFeasiblePlan,
    #[error("instance too large for exhaustive search: L={0}")]
    InstanceTooLarge(usize),
    #[error("table layer counts disagree: {0} vs {1}")]
    LayerCountMismatch(usize, usize),
}

/// Importance score with an explicit -infinity sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    NegInf,
    Finite(f64),
}

impl Score {
    pub fn finite(self) -> Option<f64> {
        match self {
            Score::NegInf => None,
            Score::Finite(v) => Some(v),
        }
    }

    pub fn plus(self, other: Score) -> Score {
        match (self, other) {
            (Score::Finite(a), Score::Finite(b)) => Score::Finite(a + b),
            _ => Score::NegInf,
        }
    }

    /// Strictly greater; NegInf never beats anything.
    pub fn beats(self, other: Score) -> bool {
        match (self, other) {
            (Score::NegInf, _) => false,
            (Score::Finite(_), Score::NegInf) => true,
            (Score::Finite(a), Score::Finite(b)) => a > b,
        }
    }
}

/// Tick-sum of `T` over the partition of `(k,l)` at `cuts`; `None` when
/// any block is absent (+infinity).
pub fn merge_latency_of(t: &TickTable, cuts: &[usize], k: usize, l: usize) -> Option<u64> {
    let mut total = 0u64;
    for (bi, bj) in partition_blocks(cuts, k, l) {
        total = total.checked_add(t.get(bi, bj)?)?;
    }
    Some(total)
}

/// Sum of base importance over the partition of `(0,L)` at `cuts`.
pub fn base_objective(i: &BaseImportance, cuts: &[usize]) -> Score {
    let mut total = Score::Finite(0.0);
    for (bi, bj) in partition_blocks(cuts, 0, i.l) {
        match i.get(bi, bj) {
            Some(v) => total = total.plus(Score::Finite(v)),
            None => return Score::NegInf,
        }
    }
    total
}

/// Extended objective for boundary set `b` with live activations `a`:
/// interior edge bits follow membership in `a`; the input/output edge
/// bits are free, so the best of the four combinations is taken (masked
/// combinations are absent and read as -infinity).
pub fn ext_objective(i: &ExtImportance, a: &[usize], b: &[usize]) -> Score {
    let blocks = partition_blocks(b, 0, i.l);
    let bit = |x: usize| u8::from(a.binary_search(&x).is_ok());
    let mut best = Score::NegInf;
    for e0 in 0..2u8 {
        for el in 0..2u8 {
            let mut total = Score::Finite(0.0);
            for &(bi, bj) in &blocks {
                let ba = if bi == 0 { e0 } else { bit(bi) };
                let bb = if bj == i.l { el } else { bit(bj) };
                match i.get(bi, bj, ba, bb) {
                    Some(v) => total = total.plus(Score::Finite(v)),
                    None => {
                        total = Score::NegInf;
                        break;
                    }
                }
            }
            if total.beats(best) {
                best = total;
            }
        }
    }
    best
}

/// Optimal sub-partition latency of every block: `T_opt[k,l]` is the
/// cheapest way to cover layers `k+1..l` with feasible blocks, and
/// `S_opt[k,l]` the cuts achieving it.
#[derive(Debug, Clone)]
pub struct LatencyDp {
    pub l: usize,
    t_opt: Vec<Option<u64>>,
    // start of the last block in the best partition of (k,l); == k means
    // the span is covered by the single block (k,l)
    last_cut: Vec<Option<usize>>,
}

impl LatencyDp {
    fn idx(&self, k: usize, l: usize) -> usize {
        k * (self.l + 1) + l
    }

    pub fn t_opt(&self, k: usize, l: usize) -> Option<u64> {
        self.t_opt[self.idx(k, l)]
    }

    pub fn s_opt(&self, k: usize, l: usize) -> Vec<usize> {
        let mut cuts = Vec::new();
        let mut cur = l;
        while cur > k {
            match self.last_cut[self.idx(k, cur)] {
                Some(m) if m > k => {
                    cuts.push(m);
                    cur = m;
                }
                _ => break,
            }
        }
        cuts.reverse();
        cuts
    }
}

/// Interval DP over block boundaries: `T_opt[k,l] = min over k <= m < l
/// of T_opt[k,m] + T[m,l]`, ties to the smallest m.
pub fn optimal_latency(t: &TickTable) -> Result<LatencyDp, DpError> {
    let l_max = t.l;
    let size = (l_max + 1) * (l_max + 1);
    let mut dp = LatencyDp {
        l: l_max,
        t_opt: vec![None; size],
        last_cut: vec![None; size],
    };
    for k in 0..=l_max {
        let idx = dp.idx(k, k);
        dp.t_opt[idx] = Some(0);
    }
    for span in 1..=l_max {
        for k in 0..=l_max - span {
            let l = k + span;
            let mut best: Option<(u64, usize)> = None;
            for m in k..l {
                let (Some(head), Some(block)) = (dp.t_opt(k, m), t.get(m, l)) else {
                    continue;
                };
                let total = head + block;
                if best.map_or(true, |(b, _)| total < b) {
                    best = Some((total, m));
                }
            }
            let (total, m) = best.ok_or(DpError::NoFeasiblePartition(k, l))?;
            let idx = dp.idx(k, l);
            dp.t_opt[idx] = Some(total);
            dp.last_cut[idx] = Some(m);
        }
    }
    Ok(dp)
}

/// One step of the budgeted recurrence at state `(l, t)`: scans
/// predecessors `k < l`, requiring the block to fit strictly under the
/// remaining budget and the predecessor state to be reachable (encoded by
/// `prev` returning a finite score). Returns the argmax predecessor and
/// value; ties to the smallest k.
pub fn recurrence_step(
    l: usize,
    t: u64,
    block_latency: impl Fn(usize) -> Option<u64>,
    prev: impl Fn(usize, u64) -> Score,
    importance: impl Fn(usize) -> Score,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for k in 0..l {
        let Some(block) = block_latency(k) else {
            continue;
        };
        if block >= t {
            continue;
        }
        let cand = prev(k, t - block).plus(importance(k));
        if let Score::Finite(v) = cand {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((k, v));
            }
        }
    }
    best
}

/// Budgeted DP for the base problem, built once up to a maximum budget;
/// plans for any smaller budget are read off the same tables.
pub struct BaseSolver<'a> {
    t: &'a TickTable,
    lat: LatencyDp,
    t0: u64,
    d: Vec<Score>,
    choice: Vec<Option<usize>>,
}

impl<'a> BaseSolver<'a> {
    pub fn build(t: &'a TickTable, imp: &BaseImportance, t0: u64) -> Result<Self, DpError> {
        if t.l != imp.l {
            return Err(DpError::LayerCountMismatch(t.l, imp.l));
        }
        let lat = optimal_latency(t)?;
        let l_max = t.l;
        let width = t0 as usize + 1;
        let mut d = vec![Score::NegInf; (l_max + 1) * width];
        let mut choice = vec![None; (l_max + 1) * width];
        // D[0,t] = 0: the empty prefix is reachable at any positive budget
        for tick in 0..width {
            d[tick] = Score::Finite(0.0);
        }
        for l in 1..=l_max {
            for tick in 1..width {
                let step = recurrence_step(
                    l,
                    tick as u64,
                    |k| lat.t_opt(k, l),
                    |k, rem| d[k * width + rem as usize],
                    |k| imp.get(k, l).map_or(Score::NegInf, Score::Finite),
                );
                if let Some((k, v)) = step {
                    d[l * width + tick] = Score::Finite(v);
                    choice[l * width + tick] = Some(k);
                }
            }
        }
        Ok(BaseSolver {
            t,
            lat,
            t0,
            d,
            choice,
        })
    }

    pub fn latency_dp(&self) -> &LatencyDp {
        &self.lat
    }

    pub fn objective_at(&self, budget: u64) -> Score {
        assert!(budget <= self.t0);
        self.d[self.t.l * (self.t0 as usize + 1) + budget as usize]
    }

    pub fn plan_at(&self, budget: u64) -> Result<Plan, DpError> {
        assert!(budget <= self.t0);
        let l_max = self.t.l;
        let min_lat = self.lat.t_opt(0, l_max).unwrap();
        if budget <= min_lat {
            return Err(DpError::InfeasibleBudget {
                budget,
                t_opt: min_lat,
            });
        }
        let width = self.t0 as usize + 1;
        let objective = match self.d[l_max * width + budget as usize] {
            Score::Finite(v) => v,
            Score::NegInf => return Err(DpError::NoFeasiblePlan),
        };
        let mut a = Vec::new();
        let mut s = Vec::new();
        let mut l = l_max;
        let mut tick = budget;
        while l > 0 {
            let k = self.choice[l * width + tick as usize].expect("reachable state");
            s.extend(self.lat.s_opt(k, l));
            if k > 0 {
                a.push(k);
                s.push(k);
            }
            tick -= self.lat.t_opt(k, l).unwrap();
            l = k;
        }
        a.sort_unstable();
        s.sort_unstable();
        let lat_ticks = merge_latency_of(self.t, &s, 0, l_max).expect("plan partition covered");
        Ok(make_plan(
            a.clone(),
            s,
            a,
            lat_ticks,
            objective,
            budget,
            self.t.unit_scale,
        ))
    }
}

fn make_plan(
    a: Vec<usize>,
    s: Vec<usize>,
    b: Vec<usize>,
    lat_ticks: u64,
    objective: f64,
    budget: u64,
    scale: u64,
) -> Plan {
    Plan {
        a,
        s,
        b,
        predicted_latency_ms: lat_ticks as f64 / scale as f64,
        predicted_importance: objective,
        budget_ms: budget as f64 / scale as f64,
        scale,
    }
}

/// Solves the base problem at one budget.
pub fn solve_base(t: &TickTable, imp: &BaseImportance, t0: u64) -> Result<Plan, DpError> {
    BaseSolver::build(t, imp, t0)?.plan_at(t0)
}

/// Best achievable importance of a span `(k,l)` with outer edge bits
/// `(a,b)`, splitting at interior boundaries whose bits are 0.
#[derive(Debug, Clone)]
pub struct ExtImportanceDp {
    pub l: usize,
    i_opt: Vec<Score>,
    // chosen split m for (k,l,a,b); == k means the direct entry I[k,l,a,b]
    best_m: Vec<Option<usize>>,
}

impl ExtImportanceDp {
    fn idx(&self, k: usize, l: usize, a: u8, b: u8) -> usize {
        ((k * (self.l + 1) + l) * 2 + a as usize) * 2 + b as usize
    }

    pub fn i_opt(&self, k: usize, l: usize, a: u8, b: u8) -> Score {
        self.i_opt[self.idx(k, l, a, b)]
    }

    /// Interior boundaries chosen for `(k,l,a,b)`.
    pub fn b_opt(&self, k: usize, l: usize, a: u8, b: u8) -> Vec<usize> {
        let mut cuts = Vec::new();
        let mut cur = l;
        let mut bit = b;
        while cur > k {
            match self.best_m[self.idx(k, cur, a, bit)] {
                Some(m) if m > k => {
                    cuts.push(m);
                    cur = m;
                    bit = 0;
                }
                _ => break,
            }
        }
        cuts.reverse();
        cuts
    }
}

/// Interval DP over importance blocks: `I_opt[k,l,a,b] = max(I[k,l,a,b],
/// max over k < m < l of I_opt[k,m,a,0] + I[m,l,0,b])`, ties to the
/// smallest split (no split first).
pub fn optimal_importance(imp: &ExtImportance) -> ExtImportanceDp {
    let l_max = imp.l;
    let size = (l_max + 1) * (l_max + 1) * 4;
    let mut dp = ExtImportanceDp {
        l: l_max,
        i_opt: vec![Score::NegInf; size],
        best_m: vec![None; size],
    };
    for k in 0..=l_max {
        for a in 0..2u8 {
            for b in 0..2u8 {
                let idx = dp.idx(k, k, a, b);
                dp.i_opt[idx] = Score::Finite(0.0);
            }
        }
    }
    for span in 1..=l_max {
        for k in 0..=l_max - span {
            let l = k + span;
            for a in 0..2u8 {
                for b in 0..2u8 {
                    let mut best = imp.get(k, l, a, b).map_or(Score::NegInf, Score::Finite);
                    let mut best_m = k;
                    for m in k + 1..l {
                        let tail = imp.get(m, l, 0, b).map_or(Score::NegInf, Score::Finite);
                        let cand = dp.i_opt(k, m, a, 0).plus(tail);
                        if cand.beats(best) {
                            best = cand;
                            best_m = m;
                        }
                    }
                    let idx = dp.idx(k, l, a, b);
                    dp.i_opt[idx] = best;
                    dp.best_m[idx] = match best {
                        Score::NegInf => None,
                        Score::Finite(_) => Some(best_m),
                    };
                }
            }
        }
    }
    dp
}

/// Budgeted DP for the extended problem, state `(l, t, a)` where `a` is
/// the edge bit at boundary `l`.
pub struct ExtSolver<'a> {
    t: &'a TickTable,
    lat: LatencyDp,
    imp_dp: ExtImportanceDp,
    t0: u64,
    d: Vec<Score>,
    choice: Vec<Option<(usize, u8)>>,
}

impl<'a> ExtSolver<'a> {
    pub fn build(t: &'a TickTable, imp: &ExtImportance, t0: u64) -> Result<Self, DpError> {
        if t.l != imp.l {
            return Err(DpError::LayerCountMismatch(t.l, imp.l));
        }
        let lat = optimal_latency(t)?;
        let imp_dp = optimal_importance(imp);
        let l_max = t.l;
        let width = t0 as usize + 1;
        let mut d = vec![Score::NegInf; (l_max + 1) * width * 2];
        let mut choice = vec![None; (l_max + 1) * width * 2];
        let at = |l: usize, tick: usize, a: u8| (l * width + tick) * 2 + a as usize;
        for tick in 0..width {
            for a in 0..2u8 {
                d[at(0, tick, a)] = Score::Finite(0.0);
            }
        }
        for l in 1..=l_max {
            for tick in 1..width {
                for a in 0..2u8 {
                    let mut best: Option<(usize, u8, f64)> = None;
                    for k in 0..l {
                        let Some(block) = lat.t_opt(k, l) else { continue };
                        if block >= tick as u64 {
                            continue;
                        }
                        let rem = tick - block as usize;
                        for alpha in 0..2u8 {
                            let cand =
                                d[at(k, rem, alpha)].plus(imp_dp.i_opt(k, l, alpha, a));
                            if let Score::Finite(v) = cand {
                                if best.map_or(true, |(_, _, b)| v > b) {
                                    best = Some((k, alpha, v));
                                }
                            }
                        }
                    }
                    if let Some((k, alpha, v)) = best {
                        d[at(l, tick, a)] = Score::Finite(v);
                        choice[at(l, tick, a)] = Some((k, alpha));
                    }
                }
            }
        }
        Ok(ExtSolver {
            t,
            lat,
            imp_dp,
            t0,
            d,
            choice,
        })
    }

    pub fn objective_at(&self, budget: u64) -> Score {
        assert!(budget <= self.t0);
        let width = self.t0 as usize + 1;
        let at = |a: u8| (self.t.l * width + budget as usize) * 2 + a as usize;
        let (d0, d1) = (self.d[at(0)], self.d[at(1)]);
        if d1.beats(d0) {
            d1
        } else {
            d0
        }
    }

    pub fn plan_at(&self, budget: u64) -> Result<Plan, DpError> {
        assert!(budget <= self.t0);
        let l_max = self.t.l;
        let min_lat = self.lat.t_opt(0, l_max).unwrap();
        if budget <= min_lat {
            return Err(DpError::InfeasibleBudget {
                budget,
                t_opt: min_lat,
            });
        }
        let width = self.t0 as usize + 1;
        let at = |l: usize, tick: u64, a: u8| (l * width + tick as usize) * 2 + a as usize;
        // final edge bit: best objective, bit 0 on ties
        let mut bit = 0u8;
        if self.d[at(l_max, budget, 1)].beats(self.d[at(l_max, budget, 0)]) {
            bit = 1;
        }
        let objective = match self.d[at(l_max, budget, bit)] {
            Score::Finite(v) => v,
            Score::NegInf => return Err(DpError::NoFeasiblePlan),
        };
        let (mut a, mut s, mut b) = (Vec::new(), Vec::new(), Vec::new());
        let mut l = l_max;
        let mut tick = budget;
        let mut lat_ticks = 0u64;
        while l > 0 {
            let (k, alpha) = self.choice[at(l, tick, bit)].expect("reachable state");
            b.extend(self.imp_dp.b_opt(k, l, alpha, bit));
            s.extend(self.lat.s_opt(k, l));
            if k > 0 {
                s.push(k);
                b.push(k);
                if alpha == 1 {
                    a.push(k);
                }
            }
            let block = self.lat.t_opt(k, l).unwrap();
            lat_ticks += block;
            tick -= block;
            l = k;
            bit = alpha;
        }
        a.sort_unstable();
        s.sort_unstable();
        b.sort_unstable();
        Ok(make_plan(
            a,
            s,
            b,
            lat_ticks,
            objective,
            budget,
            self.t.unit_scale,
        ))
    }
}

/// Solves the extended problem at one budget.
pub fn solve_extended(t: &TickTable, imp: &ExtImportance, t0: u64) -> Result<Plan, DpError> {
    ExtSolver::build(t, imp, t0)?.plan_at(t0)
}

const ORACLE_MAX_L: usize = 20;

fn subset(mask: u32) -> Vec<usize> {
    (0..32)
        .filter(|&i| mask & (1 << i) != 0)
        .map(|i| i as usize + 1)
        .collect()
}

/// Cheapest latency over partitions refining `a`: min over all S with
/// a ⊆ S, with the lexicographically smallest minimizer.
fn best_refinement(t: &TickTable, mask_a: u32, n: usize) -> Option<(u64, Vec<usize>)> {
    let mut best: Option<(u64, Vec<usize>)> = None;
    for mask_s in 0..1u32 << n {
        if mask_s & mask_a != mask_a {
            continue;
        }
        let s = subset(mask_s);
        if let Some(lat) = merge_latency_of(t, &s, 0, t.l) {
            if best.as_ref().map_or(true, |(b, bs)| {
                lat < *b || (lat == *b && s < *bs)
            }) {
                best = Some((lat, s));
            }
        }
    }
    best
}

struct Candidate {
    objective: f64,
    a: Vec<usize>,
    s: Vec<usize>,
    b: Vec<usize>,
    lat: u64,
}

impl Candidate {
    /// Higher objective wins; ties by smaller |A|, then lexicographic A,
    /// S, B.
    fn better_than(&self, other: &Candidate) -> bool {
        if self.objective != other.objective {
            return self.objective > other.objective;
        }
        (self.a.len(), &self.a, &self.s, &self.b)
            < (other.a.len(), &other.a, &other.s, &other.b)
    }
}

fn finish_oracle(
    best: Option<Candidate>,
    any_feasible: bool,
    budget: u64,
    min_lat: Option<u64>,
    scale: u64,
) -> Result<Plan, DpError> {
    match best {
        Some(c) => Ok(make_plan(c.a, c.s, c.b, c.lat, c.objective, budget, scale)),
        None if !any_feasible => Err(DpError::InfeasibleBudget {
            budget,
            t_opt: min_lat.unwrap_or(u64::MAX),
        }),
        None => Err(DpError::NoFeasiblePlan),
    }
}

/// Literal enumeration of every (A, S) pair for the base problem.
pub fn brute_force_base(t: &TickTable, imp: &BaseImportance, t0: u64) -> Result<Plan, DpError> {
    if t.l > ORACLE_MAX_L {
        return Err(DpError::InstanceTooLarge(t.l));
    }
    if t.l != imp.l {
        return Err(DpError::LayerCountMismatch(t.l, imp.l));
    }
    let n = t.l - 1;
    let mut best: Option<Candidate> = None;
    let mut any_feasible = false;
    let mut min_lat: Option<u64> = None;
    for mask_a in 0..1u32 << n {
        let a = subset(mask_a);
        let Some((lat, s)) = best_refinement(t, mask_a, n) else {
            continue;
        };
        min_lat = Some(min_lat.map_or(lat, |m| m.min(lat)));
        if lat >= t0 {
            continue;
        }
        any_feasible = true;
        let Score::Finite(objective) = base_objective(imp, &a) else {
            continue;
        };
        let cand = Candidate {
            objective,
            b: a.clone(),
            a,
            s,
            lat,
        };
        if best.as_ref().map_or(true, |b| cand.better_than(b)) {
            best = Some(cand);
        }
    }
    finish_oracle(best, any_feasible, t0, min_lat, t.unit_scale)
}

/// Literal enumeration of every (A, B) pair with an independently optimal
/// S for the extended problem.
pub fn brute_force_extended(
    t: &TickTable,
    imp: &ExtImportance,
    t0: u64,
) -> Result<Plan, DpError> {
    if t.l > ORACLE_MAX_L {
        return Err(DpError::InstanceTooLarge(t.l));
    }
    if t.l != imp.l {
        return Err(DpError::LayerCountMismatch(t.l, imp.l));
    }
    let n = t.l - 1;
    let mut best: Option<Candidate> = None;
    let mut any_feasible = false;
    let mut min_lat: Option<u64> = None;
    for mask_a in 0..1u32 << n {
        let a = subset(mask_a);
        let Some((lat, s)) = best_refinement(t, mask_a, n) else {
            continue;
        };
        min_lat = Some(min_lat.map_or(lat, |m| m.min(lat)));
        if lat >= t0 {
            continue;
        }
        any_feasible = true;
        // B ranges over supersets of A
        let rest = !mask_a & ((1u32 << n) - 1);
        let mut extra = rest;
        loop {
            let mask_b = mask_a | extra;
            let b = subset(mask_b);
            if let Score::Finite(objective) = ext_objective(imp, &a, &b) {
                let cand = Candidate {
                    objective,
                    a: a.clone(),
                    s: s.clone(),
                    b,
                    lat,
                };
                if best.as_ref().map_or(true, |x| cand.better_than(x)) {
                    best = Some(cand);
                }
            }
            if extra == 0 {
                break;
            }
            extra = (extra - 1) & rest;
        }
    }
    finish_oracle(best, any_feasible, t0, min_lat, t.unit_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostTable;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn ticks(l: usize, entries: &[((usize, usize), u64)]) -> TickTable {
        TickTable {
            l,
            unit_scale: 1,
            entries: entries.iter().copied().collect::<BTreeMap<_, _>>(),
        }
    }

    fn base_imp(l: usize, entries: &[((usize, usize), f64)]) -> BaseImportance {
        let mut tbl = BaseImportance::new(l);
        for &((i, j), v) in entries {
            tbl.insert(i, j, v).unwrap();
        }
        tbl
    }

    fn toy_ticks() -> TickTable {
        ticks(
            3,
            &[
                ((0, 1), 5),
                ((1, 2), 6),
                ((2, 3), 11),
                ((0, 2), 12),
                ((1, 3), 14),
                ((0, 3), 20),
            ],
        )
    }

    fn toy_imp() -> BaseImportance {
        base_imp(
            3,
            &[
                ((0, 1), 0.5),
                ((1, 2), 0.3),
                ((2, 3), 0.7),
                ((0, 2), 0.9),
                ((1, 3), 1.4),
                ((0, 3), 1.8),
            ],
        )
    }

    #[test]
    fn single_block_latency() {
        let t = ticks(1, &[((0, 1), 7)]);
        let dp = optimal_latency(&t).unwrap();
        assert_eq!(dp.t_opt(0, 1), Some(7));
        assert!(dp.s_opt(0, 1).is_empty());
    }

    #[test]
    fn latency_tie_breaks_to_smaller_cut() {
        let t = ticks(
            3,
            &[
                ((0, 1), 2),
                ((1, 2), 3),
                ((2, 3), 4),
                ((0, 2), 4),
                ((1, 3), 6),
                ((0, 3), 9),
            ],
        );
        let dp = optimal_latency(&t).unwrap();
        assert_eq!(dp.t_opt(0, 3), Some(8));
        assert_eq!(dp.s_opt(0, 3), vec![1]);
    }

    #[test]
    fn latency_triangle_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let l = rng.gen_range(2..=7);
            let mut entries = Vec::new();
            for i in 0..l {
                for j in i + 1..=l {
                    if j - i == 1 || rng.gen_bool(0.7) {
                        entries.push(((i, j), rng.gen_range(1..=20)));
                    }
                }
            }
            let t = ticks(l, &entries);
            let dp = optimal_latency(&t).unwrap();
            for k in 0..=l {
                for m in k..=l {
                    for j in m..=l {
                        let direct = dp.t_opt(k, j).unwrap();
                        let via = dp.t_opt(k, m).unwrap() + dp.t_opt(m, j).unwrap();
                        assert!(direct <= via);
                    }
                }
            }
            // optimality: T_opt equals the sum over its own S_opt partition
            for k in 0..l {
                for j in k + 1..=l {
                    let cuts = dp.s_opt(k, j);
                    assert_eq!(merge_latency_of(&t, &cuts, k, j), dp.t_opt(k, j));
                }
            }
        }
    }

    #[test]
    fn toy_solve_keeps_middle_boundary() {
        let plan = solve_base(&toy_ticks(), &toy_imp(), 21).unwrap();
        assert_eq!(plan.a, vec![1]);
        assert!((plan.predicted_importance - 1.9).abs() < 1e-12);
        assert_eq!(plan.predicted_latency_ms, 19.0);
    }

    #[test]
    fn keeping_nothing_can_dominate() {
        let t = ticks(
            3,
            &[
                ((0, 1), 1),
                ((1, 2), 1),
                ((2, 3), 1),
                ((0, 2), 2),
                ((1, 3), 2),
                ((0, 3), 10),
            ],
        );
        let imp = base_imp(
            3,
            &[
                ((0, 1), -1.0),
                ((1, 2), -1.0),
                ((2, 3), -1.0),
                ((0, 2), -1.0),
                ((1, 3), -1.0),
                ((0, 3), 0.0),
            ],
        );
        let plan = solve_base(&t, &imp, 1000).unwrap();
        assert!(plan.a.is_empty());
        let dp = optimal_latency(&t).unwrap();
        assert_eq!(plan.s, dp.s_opt(0, 3));
        assert_eq!(plan.predicted_importance, 0.0);
    }

    #[test]
    fn budget_at_minimum_is_infeasible() {
        let t = toy_ticks();
        let dp = optimal_latency(&t).unwrap();
        let min = dp.t_opt(0, 3).unwrap();
        assert!(matches!(
            solve_base(&t, &toy_imp(), min),
            Err(DpError::InfeasibleBudget { .. })
        ));
        assert!(matches!(
            brute_force_base(&t, &toy_imp(), min),
            Err(DpError::InfeasibleBudget { .. })
        ));
        // one tick above the minimum is feasible
        assert!(solve_base(&t, &toy_imp(), min + 1).is_ok());
    }

    #[test]
    fn single_layer_instance() {
        let t = ticks(1, &[((0, 1), 3)]);
        let imp = base_imp(1, &[((0, 1), 0.4)]);
        let plan = solve_base(&t, &imp, 4).unwrap();
        assert!(plan.a.is_empty() && plan.s.is_empty());
        let oracle = brute_force_base(&t, &imp, 4).unwrap();
        assert_eq!(oracle.a, plan.a);
    }

    fn random_base_instance(rng: &mut ChaCha8Rng, l: usize) -> (TickTable, BaseImportance) {
        let mut t_entries = Vec::new();
        let mut imp = BaseImportance::new(l);
        for i in 0..l {
            for j in i + 1..=l {
                let feasible = j - i == 1 || rng.gen_bool(0.8);
                if feasible {
                    t_entries.push(((i, j), rng.gen_range(1..=20u64)));
                    imp.insert(i, j, rng.gen_range(-1.0..=1.0)).unwrap();
                }
            }
        }
        (ticks(l, &t_entries), imp)
    }

    #[test]
    fn base_matches_oracle_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let l = rng.gen_range(2..=5);
            let (t, imp) = random_base_instance(&mut rng, l);
            let dp = optimal_latency(&t).unwrap();
            let lo = dp.t_opt(0, l).unwrap() + 1;
            let hi = lo + 15;
            let solver = BaseSolver::build(&t, &imp, hi).unwrap();
            for budget in lo..=hi {
                let plan = solver.plan_at(budget).unwrap();
                let oracle = brute_force_base(&t, &imp, budget).unwrap();
                assert_eq!(plan.predicted_importance, oracle.predicted_importance);
                // returned plan is feasible
                let lat = merge_latency_of(&t, &plan.s, 0, l).unwrap();
                assert!(lat < budget);
            }
        }
    }

    #[test]
    fn objective_monotone_in_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (t, imp) = random_base_instance(&mut rng, 5);
        let solver = BaseSolver::build(&t, &imp, 80).unwrap();
        let mut prev = Score::NegInf;
        for budget in 0..=80 {
            let cur = solver.objective_at(budget);
            assert!(!prev.beats(cur));
            prev = cur;
        }
    }

    fn ext_from_base(imp: &BaseImportance) -> ExtImportance {
        // every boundary treated as a live activation: only (1,1) entries
        let mut ext = ExtImportance::new(imp.l);
        for (&(i, j), &v) in &imp.entries {
            ext.insert(i, j, 1, 1, v).unwrap();
        }
        ext
    }

    #[test]
    fn extended_collapses_to_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let l = rng.gen_range(2..=5);
            let (t, imp) = random_base_instance(&mut rng, l);
            let ext = ext_from_base(&imp);
            let dp = optimal_latency(&t).unwrap();
            let lo = dp.t_opt(0, l).unwrap() + 1;
            for budget in lo..lo + 8 {
                let base = solve_base(&t, &imp, budget).unwrap();
                let extp = solve_extended(&t, &ext, budget).unwrap();
                assert_eq!(base.a, extp.a);
                assert_eq!(base.s, extp.s);
                assert_eq!(base.predicted_importance, extp.predicted_importance);
                assert_eq!(extp.a, extp.b);
            }
        }
    }

    fn random_ext_instance(rng: &mut ChaCha8Rng, l: usize) -> (TickTable, ExtImportance) {
        // random identity pattern at boundaries 1..l-1; boundary 0 acts
        // non-identity, boundary l identity
        let id_at: Vec<bool> = (0..=l)
            .map(|b| if b == 0 { false } else if b == l { true } else { rng.gen_bool(0.5) })
            .collect();
        let mut t_entries = Vec::new();
        let mut ext = ExtImportance::new(l);
        for i in 0..l {
            for j in i + 1..=l {
                let feasible = j - i == 1 || rng.gen_bool(0.8);
                if !feasible {
                    continue;
                }
                t_entries.push(((i, j), rng.gen_range(1..=20u64)));
                for a in 0..2u8 {
                    for b in 0..2u8 {
                        let masked = (a == 0 && !id_at[i])
                            || (b == 0 && !id_at[j])
                            || (b == 0 && id_at[i] && id_at[j]);
                        if !masked {
                            ext.insert(i, j, a, b, rng.gen_range(-1.0..=1.0)).unwrap();
                        }
                    }
                }
            }
        }
        (ticks(l, &t_entries), ext)
    }

    #[test]
    fn extended_matches_oracle_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..15 {
            let l = rng.gen_range(2..=4);
            let (t, ext) = random_ext_instance(&mut rng, l);
            let dp = optimal_latency(&t).unwrap();
            let lo = dp.t_opt(0, l).unwrap() + 1;
            let hi = lo + 10;
            let solver = ExtSolver::build(&t, &ext, hi).unwrap();
            for budget in lo..=hi {
                let plan = solver.plan_at(budget).unwrap();
                let oracle = brute_force_extended(&t, &ext, budget).unwrap();
                assert_eq!(
                    plan.predicted_importance, oracle.predicted_importance,
                    "L={l} budget={budget}"
                );
                // plan internally consistent
                assert!(plan.a.iter().all(|x| plan.s.contains(x)));
                assert!(plan.a.iter().all(|x| plan.b.contains(x)));
                let lat = merge_latency_of(&t, &plan.s, 0, l).unwrap();
                assert!(lat < budget);
                // objective recomputes from the tables
                let recomputed = ext_objective(&ext, &plan.a, &plan.b).finite().unwrap();
                assert!((recomputed - plan.predicted_importance).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn importance_dp_singleton_is_direct() {
        let mut ext = ExtImportance::new(2);
        ext.insert(0, 1, 1, 1, 0.4).unwrap();
        ext.insert(1, 2, 1, 1, 0.2).unwrap();
        let dp = optimal_importance(&ext);
        assert_eq!(dp.i_opt(0, 1, 1, 1), Score::Finite(0.4));
        assert!(dp.b_opt(0, 1, 1, 1).is_empty());
    }

    #[test]
    fn importance_dp_all_interior_masked() {
        // no (·,·,·,0) or (·,·,0,·) entries: splits impossible
        let mut ext = ExtImportance::new(2);
        ext.insert(0, 2, 1, 1, 0.9).unwrap();
        ext.insert(0, 1, 1, 1, 0.1).unwrap();
        ext.insert(1, 2, 1, 1, 0.1).unwrap();
        let dp = optimal_importance(&ext);
        assert_eq!(dp.i_opt(0, 2, 1, 1), Score::Finite(0.9));
        assert!(dp.b_opt(0, 2, 1, 1).is_empty());
    }

    #[test]
    fn importance_dp_matches_exhaustive_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let l = 3;
            let (_, ext) = random_ext_instance(&mut rng, l);
            let dp = optimal_importance(&ext);
            for a in 0..2u8 {
                for b in 0..2u8 {
                    // enumerate the 4 interior-boundary subsets of (0,3)
                    let mut best = Score::NegInf;
                    for mask in 0..4u32 {
                        let cuts: Vec<usize> =
                            (0..2).filter(|&i| mask & (1 << i) != 0).map(|i| i + 1).collect();
                        let blocks = partition_blocks(&cuts, 0, l);
                        let mut total = Score::Finite(0.0);
                        for (idx, &(bi, bj)) in blocks.iter().enumerate() {
                            let ba = if idx == 0 { a } else { 0 };
                            let bb = if idx == blocks.len() - 1 { b } else { 0 };
                            total = total.plus(
                                ext.get(bi, bj, ba, bb).map_or(Score::NegInf, Score::Finite),
                            );
                        }
                        if total.beats(best) {
                            best = total;
                        }
                    }
                    assert_eq!(dp.i_opt(0, l, a, b), best);
                }
            }
        }
    }

    #[test]
    fn merge_latency_split_additivity() {
        let t = toy_ticks();
        let cuts = vec![1, 2];
        for &m in &cuts {
            let left: Vec<usize> = cuts.iter().copied().filter(|&c| c < m).collect();
            let right: Vec<usize> = cuts.iter().copied().filter(|&c| c > m).collect();
            let whole = merge_latency_of(&t, &cuts, 0, 3).unwrap();
            let split = merge_latency_of(&t, &left, 0, m).unwrap()
                + merge_latency_of(&t, &right, m, 3).unwrap();
            assert_eq!(whole, split);
        }
    }

    #[test]
    fn base_objective_tail_additivity() {
        let imp = toy_imp();
        // I(A ∪ {m}, 0, L) = I(A, 0, m) + I[m, L] for m = max
        let a = vec![1usize];
        let m = 2usize;
        let with: Vec<usize> = vec![1, 2];
        let whole = base_objective(&imp, &with).finite().unwrap();
        let head = imp.get(0, 1).unwrap() + imp.get(1, 2).unwrap();
        let tail = imp.get(m, 3).unwrap();
        assert!((whole - (head + tail)).abs() < 1e-12);
        let _ = a;
    }

    #[test]
    fn discretized_pipeline_smoke() {
        // end-to-end: ms table -> ticks -> plan
        let mut tbl = CostTable::new(2);
        tbl.insert(0, 1, 0.5).unwrap();
        tbl.insert(1, 2, 0.5).unwrap();
        tbl.insert(0, 2, 0.8).unwrap();
        let (t, budget) = crate::cost::discretize(&tbl, 0.9, 100).unwrap();
        let imp = base_imp(2, &[((0, 1), 0.1), ((1, 2), 0.1), ((0, 2), 0.3)]);
        let plan = solve_base(&t, &imp, budget).unwrap();
        assert_eq!(plan.a, Vec::<usize>::new());
        assert!((plan.predicted_importance - 0.3).abs() < 1e-12);
        assert_eq!(plan.scale, 100);
        assert!((plan.predicted_latency_ms - 0.8).abs() < 1e-12);
    }
}
