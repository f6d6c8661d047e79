//! Block geometry, the timeline of programmed times, and the weights `A_l`.
//!
//! Internal indices `1..` are cut into blocks `I_k = {N_k+1, ..., N_k+d_k}`;
//! block `k` is split into `R_k` residue lanes. Time is laid out greedily:
//! per block, the two barrier times, then for every enumerated pair `(k, j)`
//! a programming interval `I_{k,j}` followed by a reset interval that undoes
//! it. A lane's multipliers are stored as sign-uniform runs with a prefix sum,
//! so the product over any window is two binary searches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{DyadicScalar, HVector, SpaceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid parameters:\n  - {}", .0.join("\n  - "))]
    InvalidParams(Vec<String>),
    #[error("block {k} has d_k = {dim} < R_k = {residues}: lane would be empty")]
    EmptyLane { k: usize, dim: usize, residues: usize },
    #[error("time index overflow: timeline would exceed the cap {cap}")]
    TimeOverflow { cap: u64 },
    #[error("missing interval length for pair ({k}, {j})")]
    MissingLength { k: usize, j: usize },
    #[error("interval length for pair ({k}, {j}) must be positive")]
    EmptyInterval { k: usize, j: usize },
    #[error("lane ({k}, {r}) of pair ({k}, {j}) needs {needed} steps but the interval has {available}")]
    ProgramTooLong { k: usize, j: usize, r: usize, needed: u64, available: u64 },
    #[error("inconsistent schedule document: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// `F_k = span{e_0} + span{e_j : j in I_k}`.
    Disjoint,
    /// `F_k = span{e_0, ..., e_{N_k + d_k}}`; needed for the tail lemma.
    Nested,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    Strict,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Multipliers `2^(+-1/J_k)`.
    Fractional,
    /// `J_k = 1`: multipliers exactly `{2, 1, 1/2}`.
    Integer,
}

/// Fully resolved construction parameters. Per-block sequences are indexed
/// by `k - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    pub epsilon: f64,
    pub k_max: usize,
    pub residues: Vec<usize>,
    pub block_dims: Vec<usize>,
    pub gamma: f64,
    pub tau: Vec<f64>,
    pub eta: Vec<f64>,
    pub magnitude_range: Vec<u32>,
    pub grid_denominators: Vec<u32>,
    pub grid_mode: GridMode,
    pub block_mode: BlockMode,
    pub truncation_mode: TruncationMode,
    pub target_budget: usize,
    pub zero_padding: bool,
    pub net_dim_cap: usize,
    pub net_point_budget: usize,
    pub time_cap: u64,
    pub seed: u64,
}

/// Smallest `J >= 1` with `2^(1/(2J)) - 1 <= tau`.
pub fn grid_denominator_for(tau: f64) -> u32 {
    let mut j = 1u32;
    while (1.0 / (2.0 * j as f64)).exp2() - 1.0 > tau {
        j += 1;
    }
    j
}

impl Params {
    /// Default rules: `R_k = k+1`, `d_k = R_k (k+1)`, `gamma = eps/2`,
    /// `tau_k = eta_k = eps / 2^(k+2)`, `M_k = k+1`, `J_k` minimal.
    pub fn defaults(epsilon: f64, k_max: usize) -> Params {
        let ks = 1..=k_max;
        let residues: Vec<usize> = ks.clone().map(|k| k + 1).collect();
        let block_dims = ks.clone().map(|k| residues[k - 1] * (k + 1)).collect();
        let tau: Vec<f64> = ks.clone().map(|k| epsilon / 2f64.powi(k as i32 + 2)).collect();
        let eta = tau.clone();
        Params {
            epsilon,
            k_max,
            residues,
            block_dims,
            gamma: epsilon / 2.0,
            grid_denominators: tau.iter().map(|&t| grid_denominator_for(t)).collect(),
            tau,
            eta,
            magnitude_range: ks.map(|k| k as u32 + 1).collect(),
            grid_mode: GridMode::Fractional,
            block_mode: BlockMode::Nested,
            truncation_mode: TruncationMode::Strict,
            target_budget: 2000,
            zero_padding: true,
            net_dim_cap: 4,
            net_point_budget: 1_000_000,
            time_cap: 1 << 52,
            seed: 0,
        }
    }

    pub fn r(&self, k: usize) -> usize {
        self.residues[k - 1]
    }

    pub fn tau(&self, k: usize) -> f64 {
        self.tau[k - 1]
    }

    pub fn eta(&self, k: usize) -> f64 {
        self.eta[k - 1]
    }

    pub fn grid_denominator(&self, k: usize) -> u32 {
        self.grid_denominators[k - 1]
    }

    pub fn magnitude_range(&self, k: usize) -> u32 {
        self.magnitude_range[k - 1]
    }

    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            out.push(format!("epsilon = {} must lie in (0, 1)", self.epsilon));
        }
        if self.k_max == 0 {
            out.push("k_max must be positive".into());
        }
        let per_block: [(&str, usize); 6] = [
            ("residues", self.residues.len()),
            ("block_dims", self.block_dims.len()),
            ("tau", self.tau.len()),
            ("eta", self.eta.len()),
            ("magnitude_range", self.magnitude_range.len()),
            ("grid_denominators", self.grid_denominators.len()),
        ];
        let mut lengths_ok = true;
        for (name, len) in per_block {
            if len != self.k_max {
                out.push(format!("{name} has {len} entries, expected k_max = {}", self.k_max));
                lengths_ok = false;
            }
        }
        if !(self.gamma > 0.0 && self.gamma < self.epsilon) {
            out.push(format!("gamma = {} must lie in (0, epsilon)", self.gamma));
        }
        if self.target_budget == 0 {
            out.push("target_budget must be positive".into());
        }
        if self.net_dim_cap == 0 || self.net_point_budget == 0 {
            out.push("net caps must be positive".into());
        }
        if !lengths_ok {
            return out;
        }
        for k in 1..=self.k_max {
            let (rk, dk) = (self.r(k), self.block_dims[k - 1]);
            let (tau, eta) = (self.tau(k), self.eta(k));
            let jk = self.grid_denominator(k);
            if rk == 0 {
                out.push(format!("R_{k} must be positive"));
            }
            if k > 1 && rk < self.r(k - 1) {
                out.push(format!("R_{k} = {rk} < R_{} = {}: R_k must be nondecreasing", k - 1, self.r(k - 1)));
            }
            if dk < rk {
                out.push(format!("d_{k} = {dk} < R_{k} = {rk}: empty lane"));
            }
            if !(tau > 0.0 && tau < 1.0) {
                out.push(format!("tau_{k} = {tau} must lie in (0, 1)"));
            }
            if !(eta > 0.0 && eta < 1.0) {
                out.push(format!("eta_{k} = {eta} must lie in (0, 1)"));
            }
            if tau + eta + self.gamma > self.epsilon * (1.0 + 1e-12) {
                out.push(format!(
                    "tau_{k} + eta_{k} + gamma = {} > epsilon = {}",
                    tau + eta + self.gamma,
                    self.epsilon
                ));
            }
            if jk == 0 {
                out.push(format!("J_{k} must be positive"));
            } else if (1.0 / (2.0 * jk as f64)).exp2() - 1.0 > tau {
                out.push(format!("2^(1/(2 J_{k})) - 1 > tau_{k} for J_{k} = {jk}"));
            }
            if self.grid_mode == GridMode::Integer && jk != 1 {
                out.push(format!("integer grid mode requires J_{k} = 1, got {jk}"));
            }
            if self.magnitude_range(k) == 0 {
                out.push(format!("M_{k} must be positive"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ScheduleError::InvalidParams(v))
        }
    }
}

/// One block `I_k` and its lanes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub k: usize,
    /// `N_k`.
    pub offset: u64,
    /// `d_k`.
    pub dim: u64,
    /// `R_k`.
    pub residues: usize,
    /// `E_{k,r}` for `r < R_k`, as sorted internal indices.
    pub lanes: Vec<Vec<u64>>,
}

impl Block {
    /// `m_k = N_k + 1`.
    pub fn plane_index(&self) -> u64 {
        self.offset + 1
    }

    pub fn contains(&self, j: u64) -> bool {
        j > self.offset && j <= self.offset + self.dim
    }

    pub fn lane_of(&self, j: u64) -> usize {
        ((j - self.offset - 1) % self.residues as u64) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub mode: BlockMode,
    pub blocks: Vec<Block>,
}

impl BlockGeometry {
    pub fn build(p: &Params) -> Result<BlockGeometry, ScheduleError> {
        p.validate()?;
        let mut blocks = Vec::with_capacity(p.k_max);
        let mut offset = 0u64;
        for k in 1..=p.k_max {
            let (rk, dk) = (p.r(k), p.block_dims[k - 1]);
            if dk < rk {
                return Err(ScheduleError::EmptyLane { k, dim: dk, residues: rk });
            }
            let lanes = (0..rk)
                .map(|r| {
                    (offset + 1 + r as u64..=offset + dk as u64)
                        .step_by(rk)
                        .collect::<Vec<_>>()
                })
                .collect();
            blocks.push(Block { k, offset, dim: dk as u64, residues: rk, lanes });
            offset += dk as u64;
        }
        Ok(BlockGeometry { mode: p.block_mode, blocks })
    }

    pub fn k_max(&self) -> usize {
        self.blocks.len()
    }

    pub fn check_block(&self, k: usize) -> Result<(), SpaceError> {
        if k == 0 || k > self.blocks.len() {
            Err(SpaceError::UnknownBlock { k, k_max: self.blocks.len() })
        } else {
            Ok(())
        }
    }

    pub fn block(&self, k: usize) -> &Block {
        &self.blocks[k - 1]
    }

    pub fn lane(&self, k: usize, r: usize) -> &[u64] {
        &self.block(k).lanes[r]
    }

    pub fn plane_index(&self, k: usize) -> u64 {
        self.block(k).plane_index()
    }

    /// Number of internal indices covered by the blocks, `N_{k_max + 1}`.
    pub fn span_end(&self) -> u64 {
        self.blocks.last().map_or(0, |b| b.offset + b.dim)
    }

    /// The block containing internal index `j`, if any.
    pub fn block_of(&self, j: u64) -> Option<&Block> {
        if j == 0 {
            return None;
        }
        let i = self.blocks.partition_point(|b| b.offset + b.dim < j);
        self.blocks.get(i).filter(|b| b.contains(j))
    }

    /// `(k, r)` of the lane containing `j`.
    pub fn lane_of(&self, j: u64) -> Option<(usize, usize)> {
        self.block_of(j).map(|b| (b.k, b.lane_of(j)))
    }

    /// Whether `e_j` lies in `F_k` under the active block mode.
    pub fn in_projection(&self, k: usize, j: u64) -> bool {
        if j == 0 {
            return true;
        }
        let b = self.block(k);
        match self.mode {
            BlockMode::Disjoint => b.contains(j),
            BlockMode::Nested => j <= b.offset + b.dim,
        }
    }
}

/// Inclusive time range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub first: u64,
    pub last: u64,
}

impl TimeRange {
    pub fn len(&self) -> u64 {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: u64) -> bool {
        t >= self.first && t <= self.last
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role", content = "k")]
pub enum Role {
    LaneStep(usize),
    Barrier1(usize),
    Barrier2(usize),
    Identity,
}

/// Time slots of one enumerated pair `(k, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSlot {
    pub k: usize,
    pub j: usize,
    /// `I_{k,j}`.
    pub interval: TimeRange,
    /// Reset interval: undoes the lane programs of `I_{k,j}`.
    pub reset: TimeRange,
}

impl PairSlot {
    /// Visiting time `n_{k,j} = max I_{k,j}`.
    pub fn visit_time(&self) -> u64 {
        self.interval.last
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarrierPair {
    pub k: usize,
    pub first: u64,
    pub second: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub first: u64,
    pub last: u64,
    #[serde(flatten)]
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub guard: u64,
    /// Pairs in lexicographic order.
    pub pairs: Vec<PairSlot>,
    pub barriers: Vec<BarrierPair>,
    /// Sorted, disjoint, run-length encoded; gaps are identity times.
    pub directory: Vec<DirectoryEntry>,
    /// Last allocated time (0 when nothing is allocated).
    pub end: u64,
}

/// Greedy sequential allocation. `lengths[(k, j)] = L_{k,j}`, for `j = 1..`
/// contiguous in every block; `I_{k,j}` then spans `L_{k,j} * R_k` times.
pub fn allocate_times(
    p: &Params,
    lengths: &BTreeMap<(usize, usize), u64>,
) -> Result<Timeline, ScheduleError> {
    let guard = p.residues.iter().copied().max().unwrap_or(1) as u64;
    let cap = p.time_cap;
    let mut next = 1u64;
    let mut take = |len: u64| -> Result<TimeRange, ScheduleError> {
        let last = next
            .checked_add(len - 1)
            .filter(|&l| l <= cap)
            .ok_or(ScheduleError::TimeOverflow { cap })?;
        let range = TimeRange { first: next, last };
        next = last + 1;
        Ok(range)
    };
    let mut pairs = Vec::new();
    let mut barriers = Vec::new();
    let mut directory = Vec::new();
    for k in 1..=p.k_max {
        let b1 = take(1)?.first;
        let b2 = take(1)?.first;
        barriers.push(BarrierPair { k, first: b1, second: b2 });
        directory.push(DirectoryEntry { first: b1, last: b1, role: Role::Barrier1(k) });
        directory.push(DirectoryEntry { first: b2, last: b2, role: Role::Barrier2(k) });
        let count = lengths.range((k, 0)..(k + 1, 0)).count();
        for j in 1..=count {
            let l = *lengths.get(&(k, j)).ok_or(ScheduleError::MissingLength { k, j })?;
            if l == 0 {
                return Err(ScheduleError::EmptyInterval { k, j });
            }
            let span = l
                .checked_mul(p.r(k) as u64)
                .ok_or(ScheduleError::TimeOverflow { cap })?;
            let interval = take(span)?;
            take(guard)?;
            let reset = take(span)?;
            take(guard)?;
            directory.push(DirectoryEntry {
                first: interval.first,
                last: interval.last,
                role: Role::LaneStep(k),
            });
            directory.push(DirectoryEntry { first: reset.first, last: reset.last, role: Role::LaneStep(k) });
            pairs.push(PairSlot { k, j, interval, reset });
        }
    }
    Ok(Timeline { guard, pairs, barriers, directory, end: next - 1 })
}

impl Timeline {
    pub fn role_at(&self, t: u64) -> Role {
        let i = self.directory.partition_point(|d| d.last < t);
        match self.directory.get(i) {
            Some(d) if d.first <= t => d.role,
            _ => Role::Identity,
        }
    }

    pub fn barrier(&self, k: usize) -> &BarrierPair {
        &self.barriers[k - 1]
    }

    /// Pairs of block `k`, ordered by `j`.
    pub fn block_pairs(&self, k: usize) -> &[PairSlot] {
        let lo = self.pairs.partition_point(|s| s.k < k);
        let hi = self.pairs.partition_point(|s| s.k <= k);
        &self.pairs[lo..hi]
    }

    pub fn pair(&self, k: usize, j: usize) -> Option<&PairSlot> {
        self.block_pairs(k).get(j.checked_sub(1)?)
    }
}

/// A run of equal steps at times `first, first + stride, ...` (`count` times).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRun {
    pub first: u64,
    pub count: u64,
    pub step: i8,
}

/// All programmed steps on lane `(k, r)` with a prefix-sum index.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneTrack {
    pub k: usize,
    pub r: usize,
    pub stride: u64,
    runs: Vec<StepRun>,
    /// `prefix[i]` = total steps of `runs[..i]`.
    prefix: Vec<i64>,
}

impl LaneTrack {
    fn new(k: usize, r: usize, stride: u64, runs: Vec<StepRun>) -> LaneTrack {
        let mut prefix = Vec::with_capacity(runs.len() + 1);
        let mut acc = 0i64;
        prefix.push(0);
        for run in &runs {
            acc += run.step as i64 * run.count as i64;
            prefix.push(acc);
        }
        LaneTrack { k, r, stride, runs, prefix }
    }

    pub fn runs(&self) -> &[StepRun] {
        &self.runs
    }

    /// Total steps at times `<= t`.
    pub fn cumulative(&self, t: u64) -> i64 {
        let i = self.runs.partition_point(|run| run.first <= t);
        if i == 0 {
            return 0;
        }
        let run = &self.runs[i - 1];
        let done = ((t - run.first) / self.stride + 1).min(run.count);
        self.prefix[i - 1] + run.step as i64 * done as i64
    }

    /// Step programmed at time `t` (0 when none).
    pub fn step_at(&self, t: u64) -> i8 {
        let i = self.runs.partition_point(|run| run.first <= t);
        if i == 0 {
            return 0;
        }
        let run = &self.runs[i - 1];
        let offset = t - run.first;
        if offset % self.stride == 0 && offset / self.stride < run.count {
            run.step
        } else {
            0
        }
    }
}

/// Lane programs of every block. Multipliers are `2^(step / J_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneProgram {
    denominators: Vec<u32>,
    tracks: Vec<Vec<LaneTrack>>,
}

impl LaneProgram {
    /// `steps[(k, j)][r]` is the signed step total of lane `r` over `I_{k,j}`.
    /// Steps are packed from the start of the interval; the reset interval
    /// carries the same run with the opposite sign.
    pub fn build(
        p: &Params,
        timeline: &Timeline,
        steps: &BTreeMap<(usize, usize), Vec<i64>>,
    ) -> Result<LaneProgram, ScheduleError> {
        let mut runs: Vec<Vec<Vec<StepRun>>> =
            (1..=p.k_max).map(|k| vec![Vec::new(); p.r(k)]).collect();
        for slot in &timeline.pairs {
            let (k, j) = (slot.k, slot.j);
            let rk = p.r(k) as u64;
            let lane_steps = steps.get(&(k, j)).ok_or(ScheduleError::MissingLength { k, j })?;
            if lane_steps.len() != rk as usize {
                return Err(ScheduleError::Inconsistent(format!(
                    "pair ({k}, {j}) has {} lane totals, expected {rk}",
                    lane_steps.len()
                )));
            }
            let available = slot.interval.len() / rk;
            for (r, &total) in lane_steps.iter().enumerate() {
                let needed = total.unsigned_abs();
                if needed > available {
                    return Err(ScheduleError::ProgramTooLong { k, j, r, needed, available });
                }
                if needed == 0 {
                    continue;
                }
                let sign = total.signum() as i8;
                let first_on_lane = |start: u64| start + (r as u64 + rk - start % rk) % rk;
                runs[k - 1][r].push(StepRun { first: first_on_lane(slot.interval.first), count: needed, step: sign });
                runs[k - 1][r].push(StepRun { first: first_on_lane(slot.reset.first), count: needed, step: -sign });
            }
        }
        Self::from_runs(p, runs)
    }

    fn from_runs(p: &Params, runs: Vec<Vec<Vec<StepRun>>>) -> Result<LaneProgram, ScheduleError> {
        let tracks = runs
            .into_iter()
            .enumerate()
            .map(|(i, lanes)| {
                let k = i + 1;
                lanes
                    .into_iter()
                    .enumerate()
                    .map(|(r, runs)| LaneTrack::new(k, r, p.r(k) as u64, runs))
                    .collect()
            })
            .collect();
        Ok(LaneProgram { denominators: p.grid_denominators.clone(), tracks })
    }

    pub fn track(&self, k: usize, r: usize) -> &LaneTrack {
        &self.tracks[k - 1][r]
    }

    pub fn tracks(&self) -> impl Iterator<Item = &LaneTrack> + '_ {
        self.tracks.iter().flatten()
    }

    pub fn denominator(&self, k: usize) -> u32 {
        self.denominators[k - 1]
    }

    /// Product of the multipliers of lane `(k, r)` over times in `(a, b]`.
    pub fn lane_product(&self, k: usize, r: usize, a: u64, b: u64) -> DyadicScalar {
        assert!(a <= b, "window ({a}, {b}] is reversed");
        let track = self.track(k, r);
        let steps = track.cumulative(b) - track.cumulative(a);
        DyadicScalar::new(steps, self.denominator(k) as i64)
    }
}

/// Closed description of one weight `A_l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightDescriptor {
    Identity,
    /// Scalar `factor` on `E_{k,r}`, identity elsewhere.
    Lane { k: usize, r: usize, factor: DyadicScalar },
    /// `diag(1, factor)` on `H_k = span{e_0, e_{m_k}}`, identity elsewhere.
    Plane { k: usize, factor: DyadicScalar },
}

impl WeightDescriptor {
    /// Multiplier applied to the basis vector `e_j`.
    pub fn factor_for(&self, j: u64, g: &BlockGeometry) -> DyadicScalar {
        match *self {
            WeightDescriptor::Identity => DyadicScalar::ONE,
            WeightDescriptor::Lane { k, r, factor } => {
                if j != 0 && g.lane_of(j) == Some((k, r)) {
                    factor
                } else {
                    DyadicScalar::ONE
                }
            }
            WeightDescriptor::Plane { k, factor } => {
                if j == g.plane_index(k) {
                    factor
                } else {
                    DyadicScalar::ONE
                }
            }
        }
    }

    pub fn apply(&self, v: &HVector, g: &BlockGeometry) -> HVector {
        if *self == WeightDescriptor::Identity {
            return v.clone();
        }
        let mut out = v.clone();
        for (j, e) in out.iter_mut() {
            e.scale = e.scale.mul(self.factor_for(j, g));
        }
        out
    }

    /// Operator norm of a positive diagonal operator containing 1 on its
    /// diagonal (`e_0` is always fixed).
    pub fn operator_norm(&self) -> f64 {
        match *self {
            WeightDescriptor::Identity => 1.0,
            WeightDescriptor::Lane { factor, .. } | WeightDescriptor::Plane { factor, .. } => {
                factor.exponent().exp2().max(1.0)
            }
        }
    }
}

/// Geometry, timeline and lane programs: the full weight sequence `(A_l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub params: Params,
    pub geometry: BlockGeometry,
    pub timeline: Timeline,
    pub programs: LaneProgram,
}

impl Schedule {
    pub fn assemble(
        params: Params,
        lengths: &BTreeMap<(usize, usize), u64>,
        steps: &BTreeMap<(usize, usize), Vec<i64>>,
    ) -> Result<Schedule, ScheduleError> {
        let geometry = BlockGeometry::build(&params)?;
        let timeline = allocate_times(&params, lengths)?;
        let programs = LaneProgram::build(&params, &timeline, steps)?;
        Ok(Schedule { params, geometry, timeline, programs })
    }

    pub fn weight_action(&self, l: u64) -> WeightDescriptor {
        weight_action(l, &self.geometry, &self.timeline, &self.programs)
    }

    pub fn lane_product(&self, k: usize, r: usize, a: u64, b: u64) -> DyadicScalar {
        self.programs.lane_product(k, r, a, b)
    }

    pub fn operator_norm_bound(&self) -> f64 {
        operator_norm_bound(&self.geometry, &self.timeline, &self.programs)
    }

    /// Versioned JSON document; byte-identical for equal schedules.
    pub fn to_document(&self) -> ScheduleDocument {
        ScheduleDocument {
            version: SCHEDULE_VERSION,
            params: self.params.clone(),
            geometry: self.geometry.clone(),
            timeline: self.timeline.clone(),
            lane_programs: self
                .programs
                .tracks()
                .map(|t| LaneProgramRecord { k: t.k, r: t.r, stride: t.stride, runs: t.runs.clone() })
                .collect(),
        }
    }

    pub fn from_document(doc: ScheduleDocument) -> Result<Schedule, ScheduleError> {
        if doc.version != SCHEDULE_VERSION {
            return Err(ScheduleError::Inconsistent(format!("unsupported version {}", doc.version)));
        }
        let geometry = BlockGeometry::build(&doc.params)?;
        if geometry != doc.geometry {
            return Err(ScheduleError::Inconsistent("geometry does not match params".into()));
        }
        let p = &doc.params;
        let mut runs: Vec<Vec<Vec<StepRun>>> = (1..=p.k_max).map(|k| vec![Vec::new(); p.r(k)]).collect();
        for rec in doc.lane_programs {
            if rec.k == 0 || rec.k > p.k_max || rec.r >= p.r(rec.k) || rec.stride != p.r(rec.k) as u64 {
                return Err(ScheduleError::Inconsistent(format!("bad lane record ({}, {})", rec.k, rec.r)));
            }
            if !rec.runs.windows(2).all(|w| w[0].first < w[1].first) {
                return Err(ScheduleError::Inconsistent("lane runs out of order".into()));
            }
            runs[rec.k - 1][rec.r] = rec.runs;
        }
        let programs = LaneProgram::from_runs(p, runs)?;
        Ok(Schedule { params: doc.params, geometry, timeline: doc.timeline, programs })
    }
}

pub const SCHEDULE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDocument {
    pub version: u32,
    pub params: Params,
    pub geometry: BlockGeometry,
    pub timeline: Timeline,
    pub lane_programs: Vec<LaneProgramRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneProgramRecord {
    pub k: usize,
    pub r: usize,
    pub stride: u64,
    pub runs: Vec<StepRun>,
}

pub fn weight_action(l: u64, g: &BlockGeometry, t: &Timeline, prog: &LaneProgram) -> WeightDescriptor {
    match t.role_at(l) {
        Role::Identity => WeightDescriptor::Identity,
        Role::Barrier1(k) => WeightDescriptor::Plane { k, factor: DyadicScalar::TWO },
        Role::Barrier2(k) => WeightDescriptor::Plane { k, factor: DyadicScalar::HALF },
        Role::LaneStep(k) => {
            let r = (l % g.block(k).residues as u64) as usize;
            match prog.track(k, r).step_at(l) {
                0 => WeightDescriptor::Identity,
                step => WeightDescriptor::Lane {
                    k,
                    r,
                    factor: DyadicScalar::new(step as i64, prog.denominator(k) as i64),
                },
            }
        }
    }
}

/// `sup_l ||A_l||` over every allocated time, computed per distinct
/// descriptor (barrier pairs and lane runs) rather than per time.
pub fn operator_norm_bound(_g: &BlockGeometry, t: &Timeline, prog: &LaneProgram) -> f64 {
    let barrier = if t.barriers.is_empty() { 1.0 } else { 2.0 };
    prog.tracks()
        .flat_map(|track| {
            let j = prog.denominator(track.k) as i64;
            track.runs.iter().map(move |run| {
                WeightDescriptor::Lane { k: track.k, r: track.r, factor: DyadicScalar::new(run.step as i64, j) }
                    .operator_norm()
            })
        })
        .fold(barrier, f64::max)
}
