//! Per-layer bit-width assignment under model-size and BitOps budgets.
//!
//! Maximizes `Φ = Σ Ω_l·b_l − λ·Σ Ŝ_l·|b_l − b_{l+1}|` subject to
//! `Σ |w_l|·b_l ≤ C_M` and `Σ MAC_l·b_l² ≤ C_BitOps`, with each `b_l` drawn
//! from a candidate set. The penalty only couples neighbours, so the search
//! runs over the layer chain. Partial assignments are pruned by budget
//! completion costs and by Lagrangian relaxations of the two budgets, each
//! solved exactly by dynamic programming over the chain. A short depth-first
//! pass supplies an incumbent; when it does not finish, a breadth-first pass
//! over layers also discards partial states dominated in value and both costs.
//!
//! Ties are broken towards the lexicographically smallest bit vector.
//! Infeasibility is reported in the result, not as an error.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceProfile;
use crate::profiler::LayerStats;
use crate::synergy::SynergyProfile;

pub const DEFAULT_BIT_SET: [u32; 5] = [4, 5, 6, 7, 8];
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Largest search space the exhaustive solver accepts.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// How the transition penalty is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Penalty weighted by pair synergy.
    #[default]
    Synergy,
    /// Unit weight on every pair.
    Independent,
    /// No penalty (`λ = 0`).
    ImportanceOnly,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Synergy => "synergy",
            Mode::Independent => "independent",
            Mode::ImportanceOnly => "importance-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub layer_ids: Vec<usize>,
    /// Candidate bit-widths, strictly ascending.
    pub bit_set: Vec<u32>,
    pub omega: Vec<f64>,
    /// Penalty weight of each adjacent pair; length `L - 1`.
    pub s_hat: Vec<f64>,
    pub w_count: Vec<u64>,
    pub macs: Vec<u64>,
    pub size_budget: u64,
    pub bitops_budget: u64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    pub bits: Vec<u32>,
    pub objective: f64,
    pub size_bits: u64,
    pub bitops: u64,
    pub feasible: bool,
}

impl BitAllocation {
    /// Marker for a problem with no assignment inside both budgets.
    pub fn infeasible() -> Self {
        Self { bits: Vec::new(), objective: f64::NEG_INFINITY, size_bits: 0, bitops: 0, feasible: false }
    }
}

impl AllocationProblem {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.omega.len();
        if l == 0 {
            return Err(Error::EmptyInput("allocation layers"));
        }
        if self.w_count.len() != l || self.macs.len() != l || self.layer_ids.len() != l {
            return Err(Error::ShapeMismatch("per-layer vectors differ in length".into()));
        }
        if self.s_hat.len() != l - 1 {
            return Err(Error::ShapeMismatch(format!("{} pair weights for {l} layers", self.s_hat.len())));
        }
        if self.bit_set.is_empty() {
            return Err(Error::EmptyInput("candidate bit set"));
        }
        if self.bit_set.windows(2).any(|w| w[0] >= w[1]) || self.bit_set[0] == 0 || *self.bit_set.last().unwrap() > 32 {
            return Err(Error::InvalidParameter(format!(
                "bit set {:?} must be strictly ascending within 1..=32",
                self.bit_set
            )));
        }
        if self.omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("omega"));
        }
        if self.s_hat.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("pair weights must be finite and ≥ 0".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidParameter(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        let bmax = *self.bit_set.last().unwrap() as u64;
        let fits = |v: &[u64], k: u64| {
            v.iter().try_fold(0u64, |acc, &x| x.checked_mul(k).and_then(|y| acc.checked_add(y))).is_some()
        };
        if !fits(&self.w_count, bmax) || !fits(&self.macs, bmax * bmax) {
            return Err(Error::InvalidParameter("cost totals overflow 64 bits".into()));
        }
        Ok(())
    }

    fn check_bits(&self, bits: &[u32]) -> Result<()> {
        if bits.len() != self.len() {
            return Err(Error::ShapeMismatch(format!("{} bit-widths for {} layers", bits.len(), self.len())));
        }
        if let Some(b) = bits.iter().find(|b| !self.bit_set.contains(b)) {
            return Err(Error::InvalidParameter(format!("bit-width {b} not in {:?}", self.bit_set)));
        }
        Ok(())
    }

    /// `(Σ |w_l|·b_l, Σ MAC_l·b_l²)`.
    pub fn costs(&self, bits: &[u32]) -> (u64, u64) {
        let size = self.w_count.iter().zip(bits).map(|(&w, &b)| w * b as u64).sum();
        let ops = self.macs.iter().zip(bits).map(|(&m, &b)| m * (b as u64).pow(2)).sum();
        (size, ops)
    }

    fn within_budget(&self, bits: &[u32]) -> bool {
        let (s, o) = self.costs(bits);
        s <= self.size_budget && o <= self.bitops_budget
    }

    fn allocation(&self, bits: Vec<u32>) -> BitAllocation {
        let (size_bits, bitops) = self.costs(&bits);
        BitAllocation {
            objective: phi(self, &bits),
            feasible: size_bits <= self.size_budget && bitops <= self.bitops_budget,
            bits,
            size_bits,
            bitops,
        }
    }

    /// The allocation assigning `b` to every layer, evaluated against this problem.
    pub fn uniform(&self, b: u32) -> Result<BitAllocation> {
        let bits = vec![b; self.len()];
        self.check_bits(&bits)?;
        Ok(self.allocation(bits))
    }
}

fn phi(p: &AllocationProblem, bits: &[u32]) -> f64 {
    let gain: f64 = p.omega.iter().zip(bits).map(|(o, &b)| o * b as f64).sum();
    gain - p.lambda * raw_penalty(p, bits)
}

fn raw_penalty(p: &AllocationProblem, bits: &[u32]) -> f64 {
    p.s_hat
        .iter()
        .zip(bits.windows(2))
        .map(|(s, w)| s * (w[0] as f64 - w[1] as f64).abs())
        .sum()
}

/// `Φ` of an assignment.
pub fn objective(p: &AllocationProblem, bits: &[u32]) -> Result<f64> {
    p.check_bits(bits)?;
    Ok(phi(p, bits))
}

/// `Σ Ŝ_l·|b_l − b_{l+1}|`, the transition penalty before scaling by λ.
pub fn realized_penalty(p: &AllocationProblem, bits: &[u32]) -> Result<f64> {
    p.check_bits(bits)?;
    Ok(raw_penalty(p, bits))
}

/// Budgets equal to the cost of running every layer at `target_bits`.
pub fn uniform_budgets(stats: &LayerStats, target_bits: u32) -> (u64, u64) {
    let t = target_bits as u64;
    (stats.w_count.iter().map(|w| w * t).sum(), stats.macs.iter().map(|m| m * t * t).sum())
}

pub fn build_problem(
    importance: &ImportanceProfile,
    synergy: &SynergyProfile,
    stats: &LayerStats,
    target_bits: u32,
    bit_set: &[u32],
    lambda: f64,
    mode: Mode,
) -> Result<AllocationProblem> {
    let l = importance.layer_ids.len();
    if stats.layer_ids != importance.layer_ids {
        return Err(Error::ShapeMismatch("importance and layer stats cover different layers".into()));
    }
    if synergy.s_hat.len() + 1 != l {
        return Err(Error::ShapeMismatch(format!("{} synergy pairs for {l} layers", synergy.s_hat.len())));
    }
    let (lo, hi) = match (bit_set.first(), bit_set.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Err(Error::EmptyInput("candidate bit set")),
    };
    if target_bits < lo || target_bits > hi {
        return Err(Error::InvalidParameter(format!("target {target_bits} outside bit set range [{lo}, {hi}]")));
    }
    let s_hat = match mode {
        Mode::Independent => vec![1.0; l - 1],
        _ => synergy.s_hat.clone(),
    };
    let lambda = if mode == Mode::ImportanceOnly { 0.0 } else { lambda };
    let (size_budget, bitops_budget) = uniform_budgets(stats, target_bits);
    let p = AllocationProblem {
        layer_ids: importance.layer_ids.clone(),
        bit_set: bit_set.to_vec(),
        omega: importance.omega.clone(),
        s_hat,
        w_count: stats.w_count.clone(),
        macs: stats.macs.clone(),
        size_budget,
        bitops_budget,
        lambda,
    };
    p.validate()?;
    Ok(p)
}

fn better(obj: f64, bits: &[u32], best: &Option<(f64, Vec<u32>)>) -> bool {
    match best {
        None => true,
        Some((b, bb)) => obj > *b || (obj == *b && bits < bb.as_slice()),
    }
}

/// Exhaustive enumeration; the reference the search is checked against.
pub fn solve_bruteforce(p: &AllocationProblem) -> Result<BitAllocation> {
    p.validate()?;
    let nb = p.bit_set.len();
    let l = p.len();
    let space = (nb as u128).checked_pow(l as u32).unwrap_or(u128::MAX);
    if space > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(space));
    }
    let mut idx = vec![0usize; l];
    let mut bits = vec![p.bit_set[0]; l];
    let mut best: Option<(f64, Vec<u32>)> = None;
    loop {
        if p.within_budget(&bits) {
            let obj = phi(p, &bits);
            // Enumeration is lexicographic, so the first of equal optima wins.
            if best.as_ref().is_none_or(|(b, _)| obj > *b) {
                best = Some((obj, bits.clone()));
            }
        }
        // Odometer step, last layer fastest.
        let mut k = l;
        loop {
            if k == 0 {
                return Ok(best.map_or_else(BitAllocation::infeasible, |(_, b)| p.allocation(b)));
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < nb {
                bits[k] = p.bit_set[idx[k]];
                break;
            }
            idx[k] = 0;
            bits[k] = p.bit_set[0];
        }
    }
}

/// Relaxation of both budgets with fixed multipliers.
///
/// `v[k][j]` is the best value of layers `k..L` with layer `k` at candidate
/// `j`, where each layer earns `Ω·b − μ_M·|w|·b − μ_B·MAC·b²` and pays its
/// transition penalties.
struct Relaxation {
    mu_size: f64,
    mu_ops: f64,
    v: Vec<Vec<f64>>,
}

fn relax(p: &AllocationProblem, pen: &[f64], mu_size: f64, mu_ops: f64) -> (Relaxation, u64, u64) {
    let l = p.len();
    let nb = p.bit_set.len();
    let gain = |k: usize, j: usize| {
        let b = p.bit_set[j] as f64;
        p.omega[k] * b - mu_size * p.w_count[k] as f64 * b - mu_ops * p.macs[k] as f64 * b * b
    };
    let mut v = vec![vec![0.0; nb]; l];
    let mut next = vec![vec![0usize; nb]; l];
    for j in 0..nb {
        v[l - 1][j] = gain(l - 1, j);
    }
    for k in (0..l - 1).rev() {
        for j in 0..nb {
            let (mut bv, mut bj) = (f64::NEG_INFINITY, 0);
            for jj in 0..nb {
                let d = (p.bit_set[j] as f64 - p.bit_set[jj] as f64).abs();
                let c = v[k + 1][jj] - pen[k] * d;
                if c > bv {
                    bv = c;
                    bj = jj;
                }
            }
            v[k][j] = gain(k, j) + bv;
            next[k][j] = bj;
        }
    }
    // Resource use of the relaxed optimum, for the multiplier update.
    let mut j = (0..nb).fold(0, |a, jj| if v[0][jj] > v[0][a] { jj } else { a });
    let mut bits = Vec::with_capacity(l);
    for k in 0..l {
        bits.push(p.bit_set[j]);
        if k + 1 < l {
            j = next[k][j];
        }
    }
    let (s, o) = p.costs(&bits);
    (Relaxation { mu_size, mu_ops, v }, s, o)
}

/// Picks multipliers by projected subgradient descent on the root dual and
/// keeps the tightest few (plus the unrelaxed chain bound).
fn choose_relaxations(p: &AllocationProblem, pen: &[f64]) -> Vec<Relaxation> {
    const ITERS: usize = 120;
    const KEEP: usize = 8;
    let bmax = *p.bit_set.last().unwrap() as f64;
    let bspan = bmax - p.bit_set[0] as f64;
    let scale = p.omega.iter().map(|o| o.abs() * bmax).sum::<f64>() + pen.iter().sum::<f64>() * bspan + 1e-12;
    let cm = (p.size_budget as f64).max(1.0);
    let cb = (p.bitops_budget as f64).max(1.0);

    let dual = |r: &Relaxation| {
        r.mu_size * p.size_budget as f64
            + r.mu_ops * p.bitops_budget as f64
            + r.v[0].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    let (mut theta_m, mut theta_b) = (0.0f64, 0.0f64);
    let mut pool: Vec<(f64, Relaxation)> = Vec::new();
    for t in 0..ITERS {
        let (r, s, o) = relax(p, pen, theta_m * scale / cm, theta_b * scale / cb);
        let d = dual(&r);
        if t > 0 {
            pool.push((d, r));
        } else {
            pool.insert(0, (f64::NEG_INFINITY, r));
        }
        let step = 1.0 / (t as f64 + 1.0);
        theta_m = (theta_m - step * (p.size_budget as f64 - s as f64) / cm).max(0.0);
        theta_b = (theta_b - step * (p.bitops_budget as f64 - o as f64) / cb).max(0.0);
    }
    // Entry 0 is the unrelaxed bound; keep it and the best duals.
    let first = pool.remove(0).1;
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![first];
    for (_, r) in pool {
        if out.len() > KEEP {
            break;
        }
        if !out.iter().any(|o| o.mu_size == r.mu_size && o.mu_ops == r.mu_ops) {
            out.push(r);
        }
    }
    out
}

struct Search<'a> {
    p: &'a AllocationProblem,
    pen: Vec<f64>,
    min_size_from: Vec<u64>,
    min_ops_from: Vec<u64>,
    optimistic_from: Vec<f64>,
    relaxations: Vec<Relaxation>,
    cur: Vec<u32>,
    best: Option<(f64, Vec<u32>)>,
    nodes: u64,
    node_limit: u64,
}

/// Nodes the depth-first pass may visit before handing over to the layered search.
const DFS_NODE_LIMIT: u64 = 20_000;

/// A partial assignment of the first `k` layers in the layered search.
#[derive(Debug, Clone, Copy)]
struct State {
    size: u64,
    ops: u64,
    /// `Σ Ω·b` and `Σ Ŝ·|Δb|`, summed left to right exactly as [`phi`] does.
    gain: f64,
    pen: f64,
    parent: u32,
    bit: u8,
}

fn tol(v: f64) -> f64 {
    1e-9 * (1.0 + v.abs())
}

/// Prefix maximum over ranks.
struct MaxTree(Vec<f64>);

impl MaxTree {
    fn new(n: usize) -> Self {
        Self(vec![f64::NEG_INFINITY; n + 1])
    }

    fn insert(&mut self, rank: usize, v: f64) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] = self.0[i].max(v);
            i += i & i.wrapping_neg();
        }
    }

    fn max_upto(&self, rank: usize) -> f64 {
        let (mut i, mut m) = (rank + 1, f64::NEG_INFINITY);
        while i > 0 {
            m = m.max(self.0[i]);
            i -= i & i.wrapping_neg();
        }
        m
    }
}

impl Search<'_> {
    fn bound(&self, k: usize, prefix: f64, prev: u32, size: u64, ops: u64) -> f64 {
        let p = self.p;
        if k == p.len() {
            return prefix;
        }
        let mut bound = prefix + self.optimistic_from[k];
        let rem_size = (p.size_budget - size) as f64;
        let rem_ops = (p.bitops_budget - ops) as f64;
        for r in &self.relaxations {
            let tail = r.v[k]
                .iter()
                .zip(&p.bit_set)
                .map(|(v, &b)| v - self.pen[k - 1] * (prev as f64 - b as f64).abs())
                .fold(f64::NEG_INFINITY, f64::max);
            bound = bound.min(prefix + r.mu_size * rem_size + r.mu_ops * rem_ops + tail);
        }
        bound
    }

    fn value(&self, s: &State) -> f64 {
        s.gain - self.p.lambda * s.pen
    }

    /// Drops states beaten by at least [`tol`] in value by another state of
    /// the same group that uses no more of either budget. Such a state can
    /// never complete to an optimum, so exactness is kept.
    fn prune_dominated(&self, states: Vec<State>) -> Vec<State> {
        let mut ops: Vec<u64> = states.iter().map(|s| s.ops).collect();
        ops.sort_unstable();
        ops.dedup();
        let values: Vec<f64> = states.iter().map(|s| self.value(s)).collect();
        let mut order: Vec<usize> = (0..states.len()).collect();
        order.sort_by(|&a, &b| {
            (states[a].size, states[a].ops)
                .cmp(&(states[b].size, states[b].ops))
                .then(values[b].total_cmp(&values[a]))
        });
        let mut tree = MaxTree::new(ops.len());
        let mut keep = vec![false; states.len()];
        for i in order {
            let rank = ops.binary_search(&states[i].ops).expect("present");
            if tree.max_upto(rank) >= values[i] + tol(values[i]) {
                continue;
            }
            tree.insert(rank, values[i]);
            keep[i] = true;
        }
        states.into_iter().zip(keep).filter_map(|(s, k)| k.then_some(s)).collect()
    }

    /// Breadth-first over layers, keeping only undominated partial states.
    /// States are grouped by their last bit-width, which the next transition
    /// penalty depends on; groups merge when that penalty weight is zero.
    fn layered(&mut self) {
        let p = self.p;
        let (l, nb) = (p.len(), p.bit_set.len());
        let root = State { size: 0, ops: 0, gain: 0.0, pen: 0.0, parent: u32::MAX, bit: 0 };
        let mut levels: Vec<Vec<State>> = vec![vec![root]];
        for k in 0..l {
            let mut groups: Vec<Vec<State>> = vec![Vec::new(); nb];
            let merged = k + 1 == l || self.pen[k] == 0.0;
            let frontier = levels.last().expect("root level");
            for (pi, s) in frontier.iter().enumerate() {
                for (j, &b) in p.bit_set.iter().enumerate() {
                    let size = s.size + p.w_count[k] * b as u64;
                    let ops = s.ops + p.macs[k] * (b as u64).pow(2);
                    if size + self.min_size_from[k + 1] > p.size_budget
                        || ops + self.min_ops_from[k + 1] > p.bitops_budget
                    {
                        continue;
                    }
                    let gain = s.gain + p.omega[k] * b as f64;
                    let pen = if k == 0 {
                        0.0
                    } else {
                        s.pen + p.s_hat[k - 1] * (p.bit_set[s.bit as usize] as f64 - b as f64).abs()
                    };
                    let next = State { size, ops, gain, pen, parent: pi as u32, bit: j as u8 };
                    if let Some((best, _)) = &self.best {
                        if self.bound(k + 1, self.value(&next), b, size, ops) < best - tol(*best) {
                            continue;
                        }
                    }
                    self.nodes += 1;
                    groups[if merged { 0 } else { j }].push(next);
                }
            }
            let next: Vec<State> = groups.into_iter().flat_map(|g| self.prune_dominated(g)).collect();
            if next.is_empty() {
                return;
            }
            levels.push(next);
        }
        let last = levels.last().expect("final level");
        let top = last.iter().map(|s| self.value(s)).fold(f64::NEG_INFINITY, f64::max);
        for s in last {
            if self.value(s) < top - tol(top) {
                continue;
            }
            let mut bits = vec![0u32; l];
            let mut cur = *s;
            for k in (0..l).rev() {
                bits[k] = p.bit_set[cur.bit as usize];
                if k > 0 {
                    cur = levels[k][cur.parent as usize];
                }
            }
            let obj = phi(p, &bits);
            if better(obj, &bits, &self.best) {
                self.best = Some((obj, bits));
            }
        }
    }

    fn dfs(&mut self, k: usize, prefix: f64, size: u64, ops: u64) {
        if self.nodes >= self.node_limit {
            return;
        }
        self.nodes += 1;
        let p = self.p;
        if k == p.len() {
            let obj = phi(p, &self.cur);
            if better(obj, &self.cur, &self.best) {
                self.best = Some((obj, self.cur.clone()));
            }
            return;
        }
        for &b in p.bit_set.iter().rev() {
            let s = size + p.w_count[k] * b as u64;
            let o = ops + p.macs[k] * (b as u64).pow(2);
            if s + self.min_size_from[k + 1] > p.size_budget || o + self.min_ops_from[k + 1] > p.bitops_budget {
                continue;
            }
            let mut value = prefix + p.omega[k] * b as f64;
            if k > 0 {
                value -= self.pen[k - 1] * (self.cur[k - 1] as f64 - b as f64).abs();
            }
            if let Some((best, _)) = &self.best {
                let tol = 1e-9 * (1.0 + best.abs());
                if self.bound(k + 1, value, b, s, o) < best - tol {
                    continue;
                }
            }
            self.cur[k] = b;
            self.dfs(k + 1, value, s, o);
        }
    }
}

/// Exact optimum: a node-capped depth-first pass for an incumbent, then,
/// if the cap was hit, the layer-by-layer search.
pub fn solve_bnb(p: &AllocationProblem) -> Result<BitAllocation> {
    Ok(solve_bnb_counted(p)?.0)
}

/// [`solve_bnb`] plus the number of search nodes visited.
pub fn solve_bnb_counted(p: &AllocationProblem) -> Result<(BitAllocation, u64)> {
    solve_with_node_limit(p, DFS_NODE_LIMIT)
}

fn solve_with_node_limit(p: &AllocationProblem, node_limit: u64) -> Result<(BitAllocation, u64)> {
    p.validate()?;
    let l = p.len();
    let bmin = p.bit_set[0] as u64;
    if !p.within_budget(&vec![p.bit_set[0]; l]) {
        return Ok((BitAllocation::infeasible(), 0));
    }
    let pen: Vec<f64> = p.s_hat.iter().map(|s| p.lambda * s).collect();
    let mut min_size_from = vec![0u64; l + 1];
    let mut min_ops_from = vec![0u64; l + 1];
    let mut optimistic_from = vec![0.0; l + 1];
    for k in (0..l).rev() {
        min_size_from[k] = min_size_from[k + 1] + p.w_count[k] * bmin;
        min_ops_from[k] = min_ops_from[k + 1] + p.macs[k] * bmin * bmin;
        let best_gain = p.bit_set.iter().map(|&b| p.omega[k] * b as f64).fold(f64::NEG_INFINITY, f64::max);
        optimistic_from[k] = optimistic_from[k + 1] + best_gain;
    }
    let relaxations = choose_relaxations(p, &pen);
    let mut search = Search {
        p,
        pen,
        min_size_from,
        min_ops_from,
        optimistic_from,
        relaxations,
        cur: vec![0; l],
        best: None,
        nodes: 0,
        node_limit,
    };
    search.dfs(0, 0.0, 0, 0);
    if search.nodes >= search.node_limit {
        search.layered();
    }
    let nodes = search.nodes;
    Ok((search.best.map_or_else(BitAllocation::infeasible, |(_, b)| p.allocation(b)), nodes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub feasible: bool,
    pub bits_valid: bool,
    pub size_bits: u64,
    pub bitops: u64,
    pub objective: f64,
    /// Budget minus usage; negative when over budget.
    pub size_slack: i128,
    pub bitops_slack: i128,
    /// Stored fields that disagree with the recomputation.
    pub mismatches: Vec<String>,
}

/// Recomputes costs and objective of `alloc` and compares them with its stored fields.
pub fn verify_allocation(p: &AllocationProblem, alloc: &BitAllocation) -> VerificationReport {
    let bits_valid = p.check_bits(&alloc.bits).is_ok();
    let n = alloc.bits.len().min(p.len());
    let size: u64 = p.w_count[..n].iter().zip(&alloc.bits).map(|(&w, &b)| w * b as u64).sum();
    let ops: u64 = p.macs[..n].iter().zip(&alloc.bits).map(|(&m, &b)| m * (b as u64).pow(2)).sum();
    let objective = if bits_valid { phi(p, &alloc.bits) } else { f64::NAN };
    let size_slack = p.size_budget as i128 - size as i128;
    let bitops_slack = p.bitops_budget as i128 - ops as i128;
    let feasible = bits_valid && size_slack >= 0 && bitops_slack >= 0;
    let mut mismatches = Vec::new();
    if alloc.size_bits != size {
        mismatches.push(format!("size_bits {} != {size}", alloc.size_bits));
    }
    if alloc.bitops != ops {
        mismatches.push(format!("bitops {} != {ops}", alloc.bitops));
    }
    if alloc.objective != objective {
        mismatches.push(format!("objective {} != {objective}", alloc.objective));
    }
    if alloc.feasible != feasible {
        mismatches.push(format!("feasible {} != {feasible}", alloc.feasible));
    }
    VerificationReport { feasible, bits_valid, size_bits: size, bitops: ops, objective, size_slack, bitops_slack, mismatches }
}

fn term(out: &mut String, coef: f64, var: &str, first: &mut bool) {
    if coef == 0.0 {
        return;
    }
    let sign = if coef < 0.0 { "-" } else { "+" };
    if *first && coef > 0.0 {
        write!(out, " {} {var}", coef).unwrap();
    } else {
        write!(out, " {sign} {} {var}", coef.abs()).unwrap();
    }
    *first = false;
}

/// The problem in CPLEX LP format: binaries `a_l_j` select candidate `j` for
/// layer `l`, and each pair's `|b_l − b_m|` is split into `u_p + v_p`.
pub fn export_lp(p: &AllocationProblem) -> Result<String> {
    p.validate()?;
    let l = p.len();
    let nb = p.bit_set.len();
    let a = |k: usize, j: usize| format!("a_{k}_{j}");
    let mut out = String::from("\\ mixed-precision bit allocation\nMaximize\n obj:");
    let mut first = true;
    for k in 0..l {
        for j in 0..nb {
            term(&mut out, p.omega[k] * p.bit_set[j] as f64, &a(k, j), &mut first);
        }
    }
    for (i, s) in p.s_hat.iter().enumerate() {
        let c = -p.lambda * s;
        term(&mut out, c, &format!("u_{i}"), &mut first);
        term(&mut out, c, &format!("v_{i}"), &mut first);
    }
    if first {
        out.push_str(" 0 a_0_0");
    }
    out.push_str("\nSubject To\n");
    for k in 0..l {
        let vars: Vec<String> = (0..nb).map(|j| a(k, j)).collect();
        writeln!(out, " onehot_{k}: {} = 1", vars.join(" + ")).unwrap();
    }
    for i in 0..l - 1 {
        write!(out, " diff_{i}:").unwrap();
        let mut f = true;
        for j in 0..nb {
            term(&mut out, p.bit_set[j] as f64, &a(i, j), &mut f);
        }
        for j in 0..nb {
            term(&mut out, -(p.bit_set[j] as f64), &a(i + 1, j), &mut f);
        }
        writeln!(out, " - u_{i} + v_{i} = 0").unwrap();
    }
    for (name, cost, budget) in [
        ("size", &p.w_count, p.size_budget),
        ("bitops", &p.macs, p.bitops_budget),
    ] {
        write!(out, " {name}:").unwrap();
        let mut f = true;
        for k in 0..l {
            for j in 0..nb {
                let b = p.bit_set[j] as u64;
                let c = if name == "size" { cost[k] * b } else { cost[k] * b * b };
                term(&mut out, c as f64, &a(k, j), &mut f);
            }
        }
        if f {
            out.push_str(" 0 a_0_0");
        }
        writeln!(out, " <= {budget}").unwrap();
    }
    out.push_str("Bounds\n");
    for i in 0..l - 1 {
        writeln!(out, " u_{i} >= 0\n v_{i} >= 0").unwrap();
    }
    out.push_str("Binary\n");
    for k in 0..l {
        let vars: Vec<String> = (0..nb).map(|j| a(k, j)).collect();
        writeln!(out, " {}", vars.join(" ")).unwrap();
    }
    out.push_str("End\n");
    Ok(out)
}
