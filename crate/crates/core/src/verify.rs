//! Finite experiments: tail decay, the upper-bound recipe with its error
//! budget, the barrier inequality, the delta scan and the lemma checks.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constructor::{Construction, Symbol, TargetTuple};
use crate::nets::{discretize, NetError};
use crate::orbit::{apply_t, orbit_at, orbit_norm_squared_from, orbit_of_range, reset_trace, window_factor};
use crate::schedule::{BlockGeometry, Role, Schedule, TruncationMode};
use crate::space::{z_add, z_norm, z_sub, DyadicScalar, HVector, ZVector};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("target is zero")]
    ZeroTarget,
    #[error("truncation-insufficient: no k <= k_max has R_k >= {cutoff} and ||Q_k y|| <= eta_k ||y||")]
    TruncationInsufficient { cutoff: usize },
    #[error("tuple-missing: the block {k} tuple was not enumerated")]
    TupleMissing { k: usize },
    #[error("lane ({k}, {r}) is outside grid coverage: {source}")]
    Coverage {
        k: usize,
        r: usize,
        #[source]
        source: NetError,
    },
}

impl VerifyError {
    pub fn status(&self) -> &'static str {
        match self {
            VerifyError::ZeroTarget => "zero-target",
            VerifyError::TruncationInsufficient { .. } => "truncation-insufficient",
            VerifyError::TupleMissing { .. } => "tuple-missing",
            VerifyError::Coverage { .. } => "out-of-coverage",
        }
    }
}

/// `||Q_k^flat y||` for `k = 1..=k_max`.
pub fn tail_profile(y: &ZVector, g: &BlockGeometry) -> Vec<f64> {
    (1..=g.k_max())
        .map(|k| {
            y.iter()
                .map(|(_, v)| v.filtered(|j| !g.in_projection(k, j)).norm_squared())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Smallest `R` with `||(y_r)_{r >= R}|| <= gamma ||y||`.
pub fn positional_cutoff(y: &ZVector, gamma: f64) -> usize {
    let norms: Vec<(u64, f64)> = y.iter().map(|(r, v)| (r, v.norm_squared())).collect();
    let limit = gamma * gamma * y.norm_squared();
    let mut suffix = 0.0;
    let mut cutoff = 0;
    for &(r, n2) in norms.iter().rev() {
        if suffix + n2 > limit {
            cutoff = r as usize + 1;
            break;
        }
        suffix += n2;
    }
    cutoff
}

/// Error accounting of one run of the upper-bound recipe. All norms are absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub target_norm: f64,
    /// `R`, the positional cutoff.
    pub cutoff: usize,
    pub k: usize,
    pub j: usize,
    pub n: u64,
    pub mode: TruncationMode,
    /// `(sum_{r<R_k} ||s_r - w_r||^2)^(1/2)` with `w_r` the lane part of `y_r`.
    pub net: f64,
    /// `2 tau_k (sum ||w_r||^2)^(1/2)`.
    pub net_bound: f64,
    /// Part of `P_k y_r` outside the lane `E_{k,r}`, `r < R_k`.
    pub off_lane: f64,
    /// `(sum_{r<R_k} ||Q_k y_r||^2)^(1/2)`.
    pub internal_tail: f64,
    /// `||Q_k^flat y||` over all coordinates.
    pub internal_tail_total: f64,
    /// `||(y_r)_{r >= R}||`.
    pub positional_tail: f64,
    /// `||(T^n x - y)_{r >= R_k}||` for the vector actually used.
    pub external_mismatch: f64,
    /// `||(T^n x)_{r >= R_k}||` for the vector actually used.
    pub residual: f64,
    /// `||(T^n x)_{r >= R_k}||` for the full `x`.
    pub residual_full: f64,
    pub realized: f64,
    pub realized_relative: f64,
    /// `(net^2 + off_lane^2 + internal_tail^2 + external_mismatch^2)^(1/2)`.
    pub reconstructed: f64,
    /// `((2 tau_k)^2 + eta_k^2 + gamma^2)^(1/2)`.
    pub bound_relative: f64,
    /// Whether `(T^n x)_{r < R_k}` is exactly the enumerated visit state.
    pub visit_exact: bool,
}

impl ErrorBudget {
    pub fn reconstruction_gap(&self) -> f64 {
        let r2 = self.realized * self.realized;
        (self.reconstructed * self.reconstructed - r2).abs() / r2.max(f64::MIN_POSITIVE)
    }
}

/// The recipe: choose `R`, then `k`, discretize every lane part of `y_r`
/// for `r < R_k`, look up the tuple and evaluate `T^n x` at its visiting time.
pub fn upper_experiment(y: &ZVector, c: &Construction, mode: TruncationMode) -> Result<ErrorBudget, VerifyError> {
    let p = c.params();
    let s = &c.schedule;
    let g = &s.geometry;
    let norm = y.norm();
    if norm == 0.0 {
        return Err(VerifyError::ZeroTarget);
    }
    let cutoff = positional_cutoff(y, p.gamma);
    let tails = tail_profile(y, g);
    let k = (1..=p.k_max)
        .find(|&k| cutoff <= p.r(k) && tails[k - 1] <= p.eta(k) * norm)
        .ok_or(VerifyError::TruncationInsufficient { cutoff })?;
    let rk = p.r(k);
    let nets = c.block_nets(k);

    let mut components = Vec::with_capacity(rk);
    let mut lane_parts = Vec::with_capacity(rk);
    for r in 0..rk {
        let w = y.coord(r as u64).filtered(|j| g.lane_of(j) == Some((k, r)));
        if w.is_empty() {
            components.push(None);
        } else {
            let d = discretize(&w, &nets.nets[r], &nets.grid).map_err(|source| VerifyError::Coverage { k, r, source })?;
            components.push(Some(Symbol { point: d.point as u32, step: d.step as i32 }));
        }
        lane_parts.push(w);
    }
    let j = c.find(&TargetTuple { k, components }).ok_or(VerifyError::TupleMissing { k })?;
    let n = c.visit_time(k, j);
    let visit_end = n + rk as u64;

    let z_visit = orbit_of_range(&c.x.z, n, n..visit_end, s);
    let visit_exact = z_visit == c.visit_state(k, j);
    let residual_full = orbit_norm_squared_from(&c.x.z, n, visit_end, s).sqrt();
    let z = match mode {
        TruncationMode::Strict => z_visit,
        TruncationMode::Full => z_add(&z_visit, &orbit_of_range(&c.x.z, n, visit_end..u64::MAX, s)),
    };
    let diff = z_sub(&z, y);
    let realized = z_norm(&diff);

    let (mut net2, mut off2, mut q2, mut w2) = (0.0, 0.0, 0.0, 0.0);
    for (r, w) in lane_parts.iter().enumerate() {
        let yr = y.coord(r as u64);
        net2 += z.coord(r as u64).sub(w).norm_squared();
        off2 += yr.filtered(|j| g.in_projection(k, j)).sub(w).norm_squared();
        q2 += yr.filtered(|j| !g.in_projection(k, j)).norm_squared();
        w2 += w.norm_squared();
    }
    let external_mismatch = diff.restricted(rk as u64..).norm();
    let reconstructed = (net2 + off2 + q2 + external_mismatch * external_mismatch).sqrt();
    let (tau, eta) = (p.tau(k), p.eta(k));
    Ok(ErrorBudget {
        target_norm: norm,
        cutoff,
        k,
        j,
        n,
        mode,
        net: net2.sqrt(),
        net_bound: 2.0 * tau * w2.sqrt(),
        off_lane: off2.sqrt(),
        internal_tail: q2.sqrt(),
        internal_tail_total: tails[k - 1],
        positional_tail: y.restricted(cutoff as u64..).norm(),
        external_mismatch,
        residual: z.restricted(rk as u64..).norm(),
        residual_full,
        realized,
        realized_relative: realized / norm,
        reconstructed,
        bound_relative: ((2.0 * tau).powi(2) + eta * eta + p.gamma * p.gamma).sqrt(),
        visit_exact,
    })
}

/// Exactness of one simultaneous visit of the strictly truncated `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitReport {
    pub k: usize,
    pub j: usize,
    pub n: u64,
    /// Per `r < R_k`: `(T^n x)_r == s_r` exactly.
    pub exact: Vec<bool>,
    /// No coordinate `r >= R_k` is present in the truncated orbit.
    pub absent_beyond: bool,
    /// `||(T^n x)_{r >= R_k}||` for the full `x`, when requested.
    pub residual_full: Option<f64>,
    pub micros: u64,
}

impl VisitReport {
    pub fn passed(&self) -> bool {
        self.absent_beyond && self.exact.iter().all(|&e| e)
    }
}

pub fn visit_report(c: &Construction, k: usize, j: usize, with_residual: bool) -> VisitReport {
    let start = std::time::Instant::now();
    let s = &c.schedule;
    let rk = c.params().r(k) as u64;
    let n = c.visit_time(k, j);
    // x restricted to pairs up to (k, j) is x on positions below n + R_k
    let z = orbit_of_range(&c.x.z, n, 0..n + rk, s);
    let want = c.visit_state(k, j);
    let exact = (0..rk).map(|r| z.get(r) == want.get(r)).collect();
    let absent_beyond = z.positions().all(|r| r < rk);
    let residual_full = with_residual.then(|| orbit_norm_squared_from(&c.x.z, n, n + rk, s).sqrt());
    VisitReport { k, j, n, exact, absent_beyond, residual_full, micros: start.elapsed().as_micros() as u64 }
}

/// Visit reports for every enumerated pair, in timeline order.
pub fn visit_reports(c: &Construction, with_residual: bool) -> Vec<VisitReport> {
    c.schedule
        .timeline
        .pairs
        .par_iter()
        .map(|slot| visit_report(c, slot.k, slot.j, with_residual))
        .collect()
}

/// One barrier-time sample for the target `v = K e_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerSample {
    pub k: usize,
    /// 1 for `b_k^(1)`, 2 for `b_k^(2)`.
    pub barrier: u8,
    pub n: u64,
    /// `<u_n, e_0>`.
    pub a_n: f64,
    /// `|K - a_n|`, read off the `e_0` coefficient of `(T^n u - v)_0`.
    pub barrier_value: f64,
    pub relative_barrier: f64,
    /// `||T^n u - v||`.
    pub realized: f64,
    pub realized_relative: f64,
    pub holds: bool,
}

pub fn lower_experiment(
    u: &ZVector,
    level: f64,
    s: &Schedule,
    ks: std::ops::RangeInclusive<usize>,
) -> Vec<LowerSample> {
    let v = ZVector::single(0, HVector::basis(0, level));
    let mut out = Vec::new();
    for k in ks {
        let bar = s.timeline.barrier(k);
        for (which, n) in [(1u8, bar.first), (2, bar.second)] {
            let diff = z_sub(&orbit_at(u, n, s), &v);
            let realized = diff.norm();
            let barrier_value = diff.coord(0).coefficient(0).abs();
            out.push(LowerSample {
                k,
                barrier: which,
                n,
                a_n: u.coord(n).coefficient(0),
                barrier_value,
                relative_barrier: barrier_value / level,
                realized,
                realized_relative: realized / level,
                holds: realized >= barrier_value,
            });
        }
    }
    out
}

/// `<x_n, e_0>` at every barrier time, read from the provenance of `x`.
pub fn barrier_coefficients_from_provenance(c: &Construction) -> Vec<(usize, u64, f64)> {
    let g = &c.schedule.geometry;
    let mut out = Vec::new();
    for k in 1..=c.params().k_max {
        let bar = c.schedule.timeline.barrier(k);
        for n in [bar.first, bar.second] {
            let a = c.x.provenance.get(&n).map_or(0.0, |e| {
                g.lane(e.k, e.r)
                    .iter()
                    .zip(&e.direction)
                    .filter(|(&j, _)| j == 0)
                    .map(|(_, &d)| d * e.beta.exponent().exp2())
                    .sum()
            });
            out.push((k, n, a));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Enumerated tuples with small perturbations plus internal and positional tails.
    Random,
    /// `K e_0`.
    Barrier,
    /// Exact visit states.
    Visit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusTarget {
    pub id: usize,
    pub family: Family,
    pub y: ZVector,
    /// `(k, j)` the target was derived from.
    pub origin: Option<(usize, usize)>,
    /// `K` for the barrier family.
    pub level: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub random: usize,
    pub visits: usize,
    pub barrier_levels: Vec<f64>,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn standard(seed: u64) -> CorpusSpec {
        CorpusSpec { random: 600, visits: 60, barrier_levels: vec![0.25, 0.5, 1.0, 2.0, 4.0], seed }
    }
}

fn random_vector(rng: &mut impl Rng, indices: &[u64], norm: f64) -> HVector {
    let raw: Vec<f64> = indices.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let len = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v = HVector::new();
    if len == 0.0 || norm == 0.0 {
        return v;
    }
    for (&j, x) in indices.iter().zip(raw) {
        v.insert(j, x / len * norm, DyadicScalar::ONE);
    }
    v
}

fn nonzero_pair(c: &Construction, rng: &mut impl Rng) -> (usize, usize) {
    loop {
        let k = rng.gen_range(1..=c.params().k_max);
        let j = rng.gen_range(1..=c.enumerations[k - 1].tuples.len());
        if !c.tuple(k, j).is_zero() {
            return (k, j);
        }
    }
}

fn perturbed_target(c: &Construction, rng: &mut impl Rng) -> (ZVector, (usize, usize)) {
    let p = c.params();
    let g = &c.schedule.geometry;
    let (k, j) = nonzero_pair(c, rng);
    let rk = p.r(k);
    let nets = c.block_nets(k);
    let jk = p.grid_denominator(k) as f64;
    let mut y = ZVector::new();
    for (r, comp) in c.tuple(k, j).components.iter().enumerate() {
        let Some(sym) = comp else { continue };
        let v = nets.vector(r, *sym);
        let alpha = nets.grid.value(sym.step as i64).exponent().exp2();
        // magnitude stays inside the same rounding cell, direction moves slightly
        let wobble = (rng.gen_range(-0.3..0.3) / jk).exp2();
        let mut w = HVector::new();
        for &i in g.lane(k, r) {
            let x = v.coefficient(i) * wobble + alpha * rng.gen_range(-1e-4..1e-4);
            w.insert(i, x, DyadicScalar::ONE);
        }
        y.set(r as u64, w);
    }
    let base = y.norm();
    // internal tail on indices beyond every block, hence outside every F_k
    let outside: Vec<u64> = (1..=4).map(|i| g.span_end() + i).collect();
    let r = rng.gen_range(0..rk) as u64;
    let q_norm = rng.gen_range(0.0..0.9) * p.eta(k) * base;
    let q = random_vector(rng, &outside, q_norm);
    y.set(r, y.coord(r).add(&q));
    // positional tail on indices common to every F_k
    let common: Vec<u64> = (0..=g.span_end()).filter(|&i| (1..=p.k_max).all(|kk| g.in_projection(kk, i))).collect();
    let tail_norm = rng.gen_range(0.0..0.9) * p.gamma * base;
    let spread = rng.gen_range(1..=3u64);
    for t in 0..spread {
        let part = random_vector(rng, &common, tail_norm / (spread as f64).sqrt());
        y.set(rk as u64 + t, part);
    }
    (y, (k, j))
}

/// The seeded three-family corpus: random, then visit, then barrier targets.
pub fn generate_corpus(c: &Construction, spec: &CorpusSpec) -> Vec<CorpusTarget> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for _ in 0..spec.random {
        let (y, origin) = perturbed_target(c, &mut rng);
        out.push(CorpusTarget { id: out.len(), family: Family::Random, y, origin: Some(origin), level: None });
    }
    for _ in 0..spec.visits {
        let (k, j) = nonzero_pair(c, &mut rng);
        out.push(CorpusTarget { id: out.len(), family: Family::Visit, y: c.visit_state(k, j), origin: Some((k, j)), level: None });
    }
    for &level in &spec.barrier_levels {
        let y = ZVector::single(0, HVector::basis(0, level));
        out.push(CorpusTarget { id: out.len(), family: Family::Barrier, y, origin: None, level: Some(level) });
    }
    out
}

/// Sparse vectors with mass on `e_0` and `e_{m_k}` at the barrier times and
/// random entries elsewhere.
pub fn random_lower_vectors(c: &Construction, count: usize, seed: u64) -> Vec<ZVector> {
    let s = &c.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = s.timeline.barrier(c.params().k_max).second + 64;
    (0..count)
        .map(|_| {
            let mut u = ZVector::new();
            for k in 1..=c.params().k_max {
                let bar = s.timeline.barrier(k);
                for n in [bar.first, bar.second] {
                    let mut v = HVector::basis(0, rng.gen_range(-3.0..3.0));
                    v.insert(s.geometry.plane_index(k), rng.gen_range(-3.0..3.0), DyadicScalar::ONE);
                    u.set(n, u.coord(n).add(&v));
                }
            }
            // filler avoids e_0 so that <u_n, e_0> is a single unscaled entry
            for _ in 0..10 {
                let p = rng.gen_range(0..horizon);
                let j = rng.gen_range(1..s.geometry.span_end() + 3);
                u.insert_entry(p, j, rng.gen_range(-1.0..1.0), DyadicScalar::new(rng.gen_range(-4..=4), rng.gen_range(1..=3)));
            }
            u
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub id: usize,
    pub family: Family,
    pub target_norm: f64,
    /// `ok` or the recipe's error status.
    pub status: String,
    pub in_coverage: bool,
    pub budget: Option<ErrorBudget>,
    pub recipe_relative: Option<f64>,
    /// Minimum over the recipe time and, when scanned, every visiting time.
    pub best_relative: f64,
    pub best_pair: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub delta: f64,
    /// Fraction of in-coverage targets with best relative error `<= delta`.
    pub in_coverage_fraction: f64,
    /// Same over the whole corpus, barrier family included.
    pub overall_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierDiagnostic {
    pub level: f64,
    pub samples: Vec<LowerSample>,
    /// Best relative error over all scanned visiting times.
    pub best_relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub mode: TruncationMode,
    pub brute_scan: bool,
    pub in_coverage: usize,
    pub corpus: usize,
    pub rows: Vec<ScanRow>,
    pub targets: Vec<TargetResult>,
    pub barriers: Vec<BarrierDiagnostic>,
    /// `(k, n, <x_n, e_0>)` at every barrier time.
    pub provenance_coefficients: Vec<(usize, u64, f64)>,
}

impl ThresholdTable {
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| {
            w[0].delta <= w[1].delta
                && w[0].in_coverage_fraction <= w[1].in_coverage_fraction
                && w[0].overall_fraction <= w[1].overall_fraction
        })
    }

    pub fn fraction_at(&self, delta: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.delta == delta).map(|r| r.in_coverage_fraction)
    }
}

/// Every visit state as dense `((r, j), value)` lists, with their pairs.
struct VisitIndex {
    pairs: Vec<(usize, usize)>,
    states: Vec<Vec<((u64, u64), f64)>>,
}

impl VisitIndex {
    fn build(c: &Construction) -> VisitIndex {
        let pairs: Vec<(usize, usize)> = c.schedule.timeline.pairs.iter().map(|s| (s.k, s.j)).collect();
        let states = pairs.iter().map(|&(k, j)| dense(&c.visit_state(k, j))).collect();
        VisitIndex { pairs, states }
    }

    /// The pair whose visit state is closest to `y`.
    fn nearest(&self, y: &ZVector) -> Option<(usize, usize)> {
        let y_dense: HashMap<(u64, u64), f64> = dense(y).into_iter().collect();
        let y2 = y.norm_squared();
        self.states
            .iter()
            .enumerate()
            .map(|(i, st)| {
                let d2 = st.iter().fold(y2, |acc, (key, sv)| {
                    let yv = y_dense.get(key).copied().unwrap_or(0.0);
                    acc + (sv - yv) * (sv - yv) - yv * yv
                });
                (i, d2)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| self.pairs[i])
    }
}

fn dense(z: &ZVector) -> Vec<((u64, u64), f64)> {
    z.iter().flat_map(|(r, v)| v.iter().map(move |(j, e)| ((r, j), e.value()))).collect()
}

/// Best relative errors per target and the achieved fraction per `delta`.
/// The brute scan over visiting times is exact only in strict mode, where
/// `T^{n_{k,j}} x_{<=(k,j)}` is the visit state itself; it is skipped in full mode.
pub fn threshold_scan(
    c: &Construction,
    corpus: &[CorpusTarget],
    deltas: &[f64],
    mode: TruncationMode,
    brute: bool,
) -> ThresholdTable {
    let brute = brute && mode == TruncationMode::Strict;
    let index = brute.then(|| VisitIndex::build(c));
    let targets: Vec<TargetResult> = corpus
        .par_iter()
        .map(|t| {
            let norm = t.y.norm();
            let recipe = upper_experiment(&t.y, c, mode);
            let (status, budget) = match recipe {
                Ok(b) => ("ok".to_string(), Some(b)),
                Err(e) => (e.status().to_string(), None),
            };
            let recipe_relative = budget.as_ref().map(|b| b.realized_relative);
            let mut best = recipe_relative.unwrap_or(f64::INFINITY);
            let mut best_pair = budget.as_ref().map(|b| (b.k, b.j));
            if let Some(pair) = index.as_ref().and_then(|ix| ix.nearest(&t.y)) {
                let e = z_norm(&z_sub(&c.visit_state(pair.0, pair.1), &t.y)) / norm;
                if e < best {
                    best = e;
                    best_pair = Some(pair);
                }
            }
            TargetResult {
                id: t.id,
                family: t.family,
                target_norm: norm,
                in_coverage: budget.is_some() && t.family != Family::Barrier,
                status,
                budget,
                recipe_relative,
                best_relative: best,
                best_pair,
            }
        })
        .collect();

    let covered: Vec<&TargetResult> = targets.iter().filter(|t| t.in_coverage).collect();
    let mut sorted_deltas = deltas.to_vec();
    sorted_deltas.sort_by(f64::total_cmp);
    let fraction = |set: &[&TargetResult], d: f64| {
        if set.is_empty() {
            0.0
        } else {
            set.iter().filter(|t| t.best_relative <= d).count() as f64 / set.len() as f64
        }
    };
    let all: Vec<&TargetResult> = targets.iter().collect();
    let rows = sorted_deltas
        .iter()
        .map(|&delta| ScanRow { delta, in_coverage_fraction: fraction(&covered, delta), overall_fraction: fraction(&all, delta) })
        .collect();

    let barriers = corpus
        .iter()
        .zip(&targets)
        .filter_map(|(t, r)| {
            let level = t.level?;
            Some(BarrierDiagnostic {
                level,
                samples: lower_experiment(&c.x.z, level, &c.schedule, 1..=c.params().k_max),
                best_relative: r.best_relative,
            })
        })
        .collect();

    ThresholdTable {
        mode,
        brute_scan: brute,
        in_coverage: covered.len(),
        corpus: corpus.len(),
        rows,
        targets,
        barriers,
        provenance_coefficients: barrier_coefficients_from_provenance(c),
    }
}

/// A scan grid from 0.05 to 0.99, with `epsilon` included.
pub fn default_deltas(epsilon: f64) -> Vec<f64> {
    let mut d: Vec<f64> = (1..=19).map(|i| i as f64 / 20.0).collect();
    d.push(0.99);
    if !d.contains(&epsilon) {
        d.push(epsilon);
    }
    d.sort_by(f64::total_cmp);
    d
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub samples: usize,
    pub detail: String,
}

impl Check {
    fn new(name: &str, samples: usize, failures: Vec<String>) -> Check {
        let passed = failures.is_empty();
        let detail = if passed {
            "ok".to_string()
        } else {
            format!("{} failures; first: {}", failures.len(), failures[0])
        };
        Check { name: name.to_string(), passed, samples, detail }
    }
}

/// Lane products and window factors against dense diagonal products on the
/// first `dim_cap` internal indices over times `1..=horizon`.
pub fn check_lane_oracle(s: &Schedule, windows: usize, horizon: u64, dim_cap: u64, seed: u64) -> Check {
    let horizon = horizon.min(s.timeline.end.max(1));
    let dims = dim_cap.min(s.geometry.span_end() + 1);
    let mut prefix = vec![vec![DyadicScalar::ONE; dims as usize]];
    for l in 1..=horizon {
        let d = s.weight_action(l);
        let row: Vec<DyadicScalar> = (0..dims)
            .map(|j| prefix[l as usize - 1][j as usize].mul(d.factor_for(j, &s.geometry)))
            .collect();
        prefix.push(row);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for _ in 0..windows {
        let a = rng.gen_range(0..=horizon);
        let b = rng.gen_range(a..=horizon);
        for j in 0..dims {
            let dense = prefix[b as usize][j as usize].div(prefix[a as usize][j as usize]);
            if window_factor(j, a, b, s) != dense {
                failures.push(format!("index {j} window ({a}, {b}]"));
            }
            if let Some((k, r)) = s.geometry.lane_of(j) {
                if j != s.geometry.plane_index(k) && s.lane_product(k, r, a, b) != dense {
                    failures.push(format!("lane ({k}, {r}) window ({a}, {b}]"));
                }
            }
        }
    }
    Check::new("lane-oracle", windows, failures)
}

/// `max ||A_n|| = 2` and `||T u|| <= 2 ||u||` on random sparse `u`.
pub fn check_norm_bound(s: &Schedule, samples: usize, seed: u64) -> Check {
    let mut failures = Vec::new();
    let bound = s.operator_norm_bound();
    let has_barriers = s.geometry.k_max() > 0;
    if has_barriers && bound != 2.0 {
        failures.push(format!("operator norm bound {bound} != 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = s.timeline.end.min(20_000) + 2;
    for i in 0..samples {
        let mut u = ZVector::new();
        for _ in 0..12 {
            let p = rng.gen_range(0..horizon);
            let j = rng.gen_range(0..s.geometry.span_end() + 3);
            u.insert_entry(p, j, rng.gen_range(-1.0..1.0), DyadicScalar::new(rng.gen_range(-4..=4), rng.gen_range(1..=3)));
        }
        let (tu, nu) = (apply_t(&u, s).norm(), u.norm());
        if tu > 2.0 * nu + 1e-12 * nu {
            failures.push(format!("sample {i}: ||Tu|| = {tu} > 2 ||u|| = {}", 2.0 * nu));
        }
    }
    Check::new("norm-bound", samples, failures)
}

/// The plane trace at the barrier times is `diag(1, 2)` then the identity
/// on the plane components of `u_{b_k^(1)}` and `u_{b_k^(2)}`.
pub fn check_reset(s: &Schedule, vectors: &[ZVector]) -> Check {
    let g = &s.geometry;
    let mut failures = Vec::new();
    for (i, u) in vectors.iter().enumerate() {
        for k in 1..=g.k_max() {
            let bar = s.timeline.barrier(k);
            let m = g.plane_index(k);
            let (v1, v2) = (u.coord(bar.first), u.coord(bar.second));
            let want = [(v1.coefficient(0), 2.0 * v1.coefficient(m)), (v2.coefficient(0), v2.coefficient(m))];
            match reset_trace(u, k, s) {
                Ok(got) if got == want => {}
                Ok(got) => failures.push(format!("vector {i}, k = {k}: {got:?} != {want:?}")),
                Err(e) => failures.push(e.to_string()),
            }
        }
    }
    Check::new("reset", vectors.len(), failures)
}

/// Random in-coverage `w` on every lane: `||w - alpha u|| <= 2 tau ||w||` and
/// `|alpha / ||w|| - 1| <= 2^(1/(2J)) - 1`.
pub fn check_discretizer(c: &Construction, samples: usize, seed: u64) -> Check {
    let p = c.params();
    let g = &c.schedule.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..samples {
        let k = rng.gen_range(1..=p.k_max);
        let r = rng.gen_range(0..p.r(k));
        let nets = c.block_nets(k);
        let lane = g.lane(k, r);
        let m = p.magnitude_range(k) as f64;
        let w_norm = rng.gen_range(-m..m).exp2();
        let w = random_vector(&mut rng, lane, w_norm);
        let wn = w.norm();
        match discretize(&w, &nets.nets[r], &nets.grid) {
            Ok(d) => {
                let s = nets.nets[r].point(d.point).scaled(d.alpha);
                let err = s.sub(&w).norm();
                if err > 2.0 * p.tau(k) * wn {
                    failures.push(format!("sample {i}: error {err} > 2 tau ||w|| = {}", 2.0 * p.tau(k) * wn));
                }
                let q = (d.alpha.exponent().exp2() / wn - 1.0).abs();
                if q > nets.grid.quantization_bound() + 1e-15 {
                    failures.push(format!("sample {i}: quantization {q} > {}", nets.grid.quantization_bound()));
                }
            }
            Err(e) => failures.push(format!("sample {i}: {e}")),
        }
    }
    Check::new("net-bound", samples, failures)
}

/// Closed-form orbits against iterated single steps for every `n <= horizon`.
pub fn check_orbit_equivalence(s: &Schedule, vectors: usize, horizon: u64, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..vectors {
        let mut u = ZVector::new();
        for _ in 0..20 {
            let p = rng.gen_range(0..=horizon + 20);
            let j = rng.gen_range(0..s.geometry.span_end() + 3);
            u.insert_entry(p, j, rng.gen_range(-1.0..1.0), DyadicScalar::new(rng.gen_range(-4..=4), rng.gen_range(1..=3)));
        }
        let mut it = u.clone();
        for n in 1..=horizon {
            it = apply_t(&it, s);
            if orbit_at(&u, n, s) != it {
                failures.push(format!("vector {i}, n = {n}"));
                break;
            }
        }
    }
    Check::new("orbit-equivalence", vectors, failures)
}

/// The lemma suite on a built construction.
pub fn lemma_suite(c: &Construction, seed: u64) -> (Vec<Check>, Vec<VisitReport>) {
    let s = &c.schedule;
    let visits = visit_reports(c, false);
    let failures = visits.iter().filter(|v| !v.passed()).map(|v| format!("({}, {})", v.k, v.j)).collect();
    let lower = random_lower_vectors(c, 50, seed ^ 0x5eed);
    let mut reset_vectors = lower.clone();
    reset_vectors.push(c.x.z.clone());
    let checks = vec![
        check_lane_oracle(s, 1000, 10_000, 64, seed),
        check_norm_bound(s, 1000, seed.wrapping_add(1)),
        check_reset(s, &reset_vectors),
        check_discretizer(c, 10_000, seed.wrapping_add(2)),
        check_orbit_equivalence(s, 20, 2_000, seed.wrapping_add(3)),
        Check::new("visiting-exactness", visits.len(), failures),
    ];
    (checks, visits)
}

/// One CSV row per target.
#[derive(Serialize)]
struct CsvRow<'a> {
    id: usize,
    family: Family,
    status: &'a str,
    in_coverage: bool,
    target_norm: f64,
    k: Option<usize>,
    j: Option<usize>,
    n: Option<u64>,
    cutoff: Option<usize>,
    net: Option<f64>,
    off_lane: Option<f64>,
    internal_tail: Option<f64>,
    positional_tail: Option<f64>,
    external_mismatch: Option<f64>,
    residual: Option<f64>,
    residual_full: Option<f64>,
    recipe_relative: Option<f64>,
    bound_relative: Option<f64>,
    best_relative: f64,
}

pub fn write_targets_csv(targets: &[TargetResult], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in targets {
        let b = t.budget.as_ref();
        w.serialize(CsvRow {
            id: t.id,
            family: t.family,
            status: &t.status,
            in_coverage: t.in_coverage,
            target_norm: t.target_norm,
            k: b.map(|b| b.k),
            j: b.map(|b| b.j),
            n: b.map(|b| b.n),
            cutoff: b.map(|b| b.cutoff),
            net: b.map(|b| b.net),
            off_lane: b.map(|b| b.off_lane),
            internal_tail: b.map(|b| b.internal_tail),
            positional_tail: b.map(|b| b.positional_tail),
            external_mismatch: b.map(|b| b.external_mismatch),
            residual: b.map(|b| b.residual),
            residual_full: b.map(|b| b.residual_full),
            recipe_relative: t.recipe_relative,
            bound_relative: b.map(|b| b.bound_relative),
            best_relative: t.best_relative,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// `delta fraction` lines for plotting.
pub fn plotdata(table: &ThresholdTable) -> String {
    let mut s = String::from("# delta in_coverage_fraction overall_fraction\n");
    for r in &table.rows {
        s.push_str(&format!("{} {} {}\n", r.delta, r.in_coverage_fraction, r.overall_fraction));
    }
    s
}

/// `true` when some barrier time is reached with role other than a barrier.
pub fn barrier_roles_consistent(s: &Schedule) -> bool {
    (1..=s.geometry.k_max()).all(|k| {
        let b = s.timeline.barrier(k);
        s.timeline.role_at(b.first) == Role::Barrier1(k) && s.timeline.role_at(b.second) == Role::Barrier2(k)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{BlockMode, Params};

    fn small() -> Construction {
        let mut p = Params::defaults(0.5, 2);
        p.tau = vec![0.2, 0.2];
        p.eta = vec![0.04, 0.04];
        p.grid_denominators = vec![3, 3];
        p.magnitude_range = vec![1, 1];
        p.target_budget = 40;
        p.seed = 11;
        Construction::build(p).unwrap()
    }

    #[test]
    fn tail_profile_examples() {
        let c = small();
        let g = &c.schedule.geometry;
        let y = ZVector::single(3, HVector::basis(0, 2.0));
        assert_eq!(tail_profile(&y, g), vec![0.0, 0.0]);
        let mut y = ZVector::single(0, HVector::basis(2, 1.0));
        y.set(1, HVector::basis(g.block(2).offset, 1.0));
        assert_eq!(tail_profile(&y, g), vec![0.0, 0.0]);
        y.set(2, HVector::basis(g.block(2).offset + 3, 2.0));
        assert_eq!(tail_profile(&y, g), vec![2.0, 0.0]);
        y.set(5, HVector::basis(g.span_end() + 1, 1.0));
        let t = tail_profile(&y, g);
        assert!(t[0] >= t[1] && t[1] == 1.0);
    }

    #[test]
    fn tail_profile_disjoint_mode_is_raw() {
        let mut p = Params::defaults(0.5, 2);
        p.block_mode = BlockMode::Disjoint;
        let g = BlockGeometry::build(&p).unwrap();
        let y = ZVector::single(0, HVector::basis(2, 1.0));
        assert_eq!(tail_profile(&y, &g), vec![0.0, 1.0]);
    }

    #[test]
    fn cutoff_examples() {
        let mut y = ZVector::single(0, HVector::basis(0, 1.0));
        assert_eq!(positional_cutoff(&y, 0.25), 1);
        y.set(4, HVector::basis(0, 0.1));
        assert_eq!(positional_cutoff(&y, 0.25), 1);
        y.set(6, HVector::basis(0, 0.5));
        assert_eq!(positional_cutoff(&y, 0.25), 7);
    }

    #[test]
    fn visit_state_target_is_exact_in_strict_mode() {
        let c = small();
        let (k, j) = (2, 5);
        let y = c.visit_state(k, j);
        let b = upper_experiment(&y, &c, TruncationMode::Strict).unwrap();
        assert_eq!((b.k, b.j), (k, j));
        assert_eq!(b.realized, 0.0);
        assert!(b.visit_exact);
        let full = upper_experiment(&y, &c, TruncationMode::Full).unwrap();
        assert!((full.realized - full.residual_full).abs() <= 1e-12 * full.residual_full.max(1e-300));
    }

    #[test]
    fn e0_target_is_not_reachable_through_lanes() {
        let c = small();
        let y = ZVector::single(0, HVector::basis(0, 2.0));
        let b = upper_experiment(&y, &c, TruncationMode::Strict).unwrap();
        assert_eq!(b.realized_relative, 1.0);
        assert_eq!(b.off_lane, 2.0);
    }

    #[test]
    fn recipe_errors() {
        let c = small();
        assert!(matches!(upper_experiment(&ZVector::new(), &c, TruncationMode::Strict), Err(VerifyError::ZeroTarget)));
        let far = ZVector::single(9, HVector::basis(1, 1.0));
        assert!(matches!(
            upper_experiment(&far, &c, TruncationMode::Strict),
            Err(VerifyError::TruncationInsufficient { cutoff: 10 })
        ));
        let big = ZVector::single(0, HVector::basis(1, 64.0));
        assert!(matches!(upper_experiment(&big, &c, TruncationMode::Strict), Err(VerifyError::Coverage { .. })));
    }

    #[test]
    fn corpus_budgets_reconstruct() {
        let c = small();
        let corpus = generate_corpus(&c, &CorpusSpec { random: 60, visits: 10, barrier_levels: vec![1.0], seed: 3 });
        assert_eq!(corpus.len(), 71);
        assert_eq!(corpus, generate_corpus(&c, &CorpusSpec { random: 60, visits: 10, barrier_levels: vec![1.0], seed: 3 }));
        for t in &corpus {
            if let Ok(b) = upper_experiment(&t.y, &c, TruncationMode::Strict) {
                assert!(b.reconstruction_gap() <= 1e-10, "target {}: {b:?}", t.id);
                if t.family != Family::Barrier {
                    assert!(b.realized_relative <= b.bound_relative + 1e-12);
                }
            }
        }
    }

    #[test]
    fn lower_examples() {
        let c = small();
        let s = &c.schedule;
        let samples = lower_experiment(&ZVector::new().clone(), 1.5, s, 1..=2);
        assert_eq!(samples.len(), 4);
        for x in &samples {
            assert_eq!(x.barrier_value, 1.5);
            assert_eq!(x.relative_barrier, 1.0);
            assert!(x.holds);
        }
        for u in random_lower_vectors(&c, 20, 9) {
            for x in lower_experiment(&u, 2.0, s, 1..=2) {
                assert!(x.holds);
                assert_eq!(x.barrier_value, (2.0 - x.a_n).abs());
            }
        }
        assert!(barrier_coefficients_from_provenance(&c).iter().all(|&(_, _, a)| a == 0.0));
    }

    #[test]
    fn scan_is_monotone() {
        let c = small();
        let corpus = generate_corpus(&c, &CorpusSpec { random: 40, visits: 5, barrier_levels: vec![1.0, 2.0], seed: 4 });
        let t = threshold_scan(&c, &corpus, &default_deltas(0.5), TruncationMode::Strict, true);
        assert!(t.is_monotone());
        assert_eq!(t.fraction_at(0.5), Some(1.0));
        assert_eq!(t.barriers.len(), 2);
        assert!(plotdata(&t).lines().count() == t.rows.len() + 1);
        let mut buf = Vec::new();
        write_targets_csv(&t.targets, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), corpus.len() + 1);
    }

    #[test]
    fn lemma_suite_passes_on_small_construction() {
        let c = small();
        assert!(barrier_roles_consistent(&c.schedule));
        let (checks, visits) = lemma_suite(&c, 1);
        assert_eq!(visits.len(), c.schedule.timeline.pairs.len());
        for ch in checks {
            assert!(ch.passed, "{ch:?}");
        }
    }
}
