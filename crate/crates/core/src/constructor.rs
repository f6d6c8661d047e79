//! Target enumeration, lane programs and the candidate vector `x`.
//!
//! For every block `k` the finite target set is enumerated (or sampled when it
//! exceeds the budget); the `j`-th tuple gets a programming interval whose
//! lane products turn `beta_{k,j,r} u` into `alpha u`, and `x` stores
//! `beta_{k,j,r} u` at position `n_{k,j} + r`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{build_sphere_net, GeoGrid, NetCaps, NetError, NetSummary, SphereNet};
use crate::schedule::{BlockGeometry, Params, Schedule, ScheduleError, Timeline};
use crate::space::{DyadicScalar, HVector, SpaceError, ZRecord, ZVector};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("lane budget violated for ({k}, {j}, {r}): {steps} steps > {limit}")]
    LaneBudget { k: usize, j: usize, r: usize, steps: u64, limit: u64 },
    #[error("support collision at position {position}: scheduler bug")]
    Collision { position: u64 },
    #[error("component magnitude {0} is not on the block grid")]
    OffGrid(DyadicScalar),
    #[error("inconsistent artifact: {0}")]
    Inconsistent(String),
}

/// `beta_{k,j,r} = 2^-(j + R_k) * 2^-(k^2)`.
pub fn beta(k: usize, j: usize, rk: usize) -> DyadicScalar {
    DyadicScalar::pow2(-((j + rk + k * k) as i64))
}

/// One element of `S_k`: a lane net point and a grid step `m` (`alpha = 2^(m/J)`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Symbol {
    pub point: u32,
    pub step: i32,
}

/// An element of `S_k^{R_k}`; `None` components are zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetTuple {
    pub k: usize,
    pub components: Vec<Option<Symbol>>,
}

impl TargetTuple {
    pub fn is_zero(&self) -> bool {
        self.components.iter().all(Option::is_none)
    }
}

/// The nets and grid of one block: `nets[r]` lives on the lane `E_{k,r}`.
#[derive(Clone, Debug)]
pub struct BlockNets {
    pub k: usize,
    pub grid: GeoGrid,
    pub nets: Vec<SphereNet>,
}

impl BlockNets {
    pub fn build(p: &Params, g: &BlockGeometry, k: usize) -> Result<BlockNets, NetError> {
        let caps = NetCaps { dim_cap: p.net_dim_cap, point_budget: p.net_point_budget };
        let mut by_dim: BTreeMap<usize, SphereNet> = BTreeMap::new();
        let mut nets = Vec::new();
        for lane in &g.block(k).lanes {
            let net = match by_dim.get(&lane.len()) {
                Some(net) => net.with_index_set(lane),
                None => {
                    let net = build_sphere_net(lane, p.tau(k), caps)?;
                    by_dim.insert(lane.len(), net.clone());
                    net
                }
            };
            nets.push(net);
        }
        Ok(BlockNets { k, grid: GeoGrid::new(p.grid_denominator(k), p.magnitude_range(k)), nets })
    }

    /// `|S_{k,r}|`.
    pub fn alphabet(&self, r: usize) -> usize {
        self.nets[r].len() * self.grid.len()
    }

    /// The vector `alpha u` of a symbol on lane `r`.
    pub fn vector(&self, r: usize, s: Symbol) -> HVector {
        self.nets[r].point(s.point as usize).scaled(self.grid.value(s.step as i64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationSummary {
    pub k: usize,
    pub alphabet: Vec<u64>,
    /// `prod_r alphabet_r` as a decimal string; `None` when it overflows `u128`.
    pub total: Option<String>,
    pub count: usize,
    pub sampled: bool,
    pub seed: u64,
    pub nets: Vec<NetSummary>,
}

/// The tuples of one block in `j` order (`tuples[j - 1]`).
#[derive(Clone, Debug)]
pub struct Enumeration {
    pub k: usize,
    pub tuples: Vec<TargetTuple>,
    pub sampled: bool,
    pub total: Option<u128>,
}

fn digit_to_component(d: u64, grid: &GeoGrid, zero_padding: bool) -> Option<Symbol> {
    let idx = if zero_padding {
        d.checked_sub(1)?
    } else {
        d
    };
    let g = grid.len() as u64;
    Some(Symbol { point: (idx / g) as u32, step: (idx % g) as i32 - grid.max_step() as i32 })
}

/// The target tuples of block `k`: the full Cartesian product in
/// lexicographic order when it fits in `budget`, otherwise `budget` distinct
/// seeded samples in the same order. With zero padding the all-zero tuple
/// is always present.
pub fn enumerate_targets(
    k: usize,
    nets: &BlockNets,
    zero_padding: bool,
    budget: usize,
    seed: u64,
) -> Enumeration {
    let radix: Vec<u64> = (0..nets.nets.len())
        .map(|r| nets.alphabet(r) as u64 + u64::from(zero_padding))
        .collect();
    let total = radix.iter().try_fold(1u128, |acc, &x| acc.checked_mul(x as u128));
    let fits = total.is_some_and(|t| t <= budget as u128);
    let digits: Vec<Vec<u64>> = if fits {
        let mut all = vec![vec![]];
        for &base in &radix {
            all = all
                .into_iter()
                .flat_map(|prefix| {
                    (0..base).map(move |d| {
                        let mut v = prefix.clone();
                        v.push(d);
                        v
                    })
                })
                .collect();
        }
        all
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut chosen = BTreeSet::new();
        if zero_padding {
            chosen.insert(vec![0; radix.len()]);
        }
        while chosen.len() < budget {
            chosen.insert(radix.iter().map(|&b| rng.gen_range(0..b)).collect::<Vec<_>>());
        }
        chosen.into_iter().collect()
    };
    let tuples = digits
        .into_iter()
        .map(|d| TargetTuple {
            k,
            components: d.into_iter().map(|x| digit_to_component(x, &nets.grid, zero_padding)).collect(),
        })
        .collect();
    Enumeration { k, tuples, sampled: !fits, total }
}

/// Step totals realizing `alpha_{k,j,r} / beta_{k,j,r}` on every lane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LaneSteps {
    /// Signed step count per lane, in units of `1/J_k`.
    pub steps: Vec<i64>,
    /// `L_{k,j,r} = |steps[r]|`.
    pub lengths: Vec<u64>,
    /// `L_{k,j} = max_r L_{k,j,r}` (at least 1 so the interval is nonempty).
    pub interval: u64,
}

/// Target exponent `m_r / J + (j + R_k + k^2)` for each nonzero component;
/// zero components get the neutral program.
pub fn program_exponents(
    k: usize,
    j: usize,
    tuple: &TargetTuple,
    p: &Params,
) -> Result<LaneSteps, BuildError> {
    let jk = p.grid_denominator(k) as i64;
    let mk = p.magnitude_range(k) as i64;
    let rk = p.r(k);
    let shift = (j + rk + k * k) as i64;
    let mut steps = Vec::with_capacity(rk);
    for (r, c) in tuple.components.iter().enumerate() {
        let s = match c {
            None => 0,
            Some(sym) => sym.step as i64 + jk * shift,
        };
        let limit = (jk * (2 * mk + shift)) as u64;
        if s.unsigned_abs() > limit {
            return Err(BuildError::LaneBudget { k, j, r, steps: s.unsigned_abs(), limit });
        }
        steps.push(s);
    }
    let lengths: Vec<u64> = steps.iter().map(|s| s.unsigned_abs()).collect();
    let interval = lengths.iter().copied().max().unwrap_or(0).max(1);
    Ok(LaneSteps { steps, lengths, interval })
}

/// Where an entry of `x` came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryProvenance {
    pub position: u64,
    pub k: usize,
    pub j: usize,
    pub r: usize,
    pub beta: DyadicScalar,
    pub symbol: Symbol,
    pub direction: Vec<f64>,
}

/// The vector `x` with per-position provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct XVector {
    pub z: ZVector,
    pub provenance: BTreeMap<u64, EntryProvenance>,
    /// `sum R_k 2^(-2(j + R_k)) 2^(-2 k^2)` over the selected pairs.
    pub norm_bound_squared: f64,
}

impl XVector {
    /// `||x||^2` recomputed from provenance: `sum beta^2 |u|^2`, with the
    /// squared dyadic scale taken exactly.
    pub fn provenance_norm_squared(&self) -> f64 {
        self.provenance
            .values()
            .map(|e| {
                let u2: f64 = e.direction.iter().map(|c| c * c).sum();
                u2 * e.beta.powi(2).exponent().exp2()
            })
            .sum()
    }
}

/// Builds `x` from the selected pairs. Zero components get no entry.
pub fn build_x(
    geometry: &BlockGeometry,
    timeline: &Timeline,
    nets: &[BlockNets],
    enumerations: &[Enumeration],
    mut select: impl FnMut(usize, usize) -> bool,
) -> Result<XVector, BuildError> {
    let mut z = ZVector::new();
    let mut provenance = BTreeMap::new();
    let mut bound = 0.0;
    for slot in &timeline.pairs {
        let (k, j) = (slot.k, slot.j);
        if !select(k, j) {
            continue;
        }
        let rk = geometry.block(k).residues;
        bound += rk as f64 * (-2.0 * (j + rk + k * k) as f64).exp2();
        let tuple = &enumerations[k - 1].tuples[j - 1];
        let b = beta(k, j, rk);
        for (r, c) in tuple.components.iter().enumerate() {
            let Some(sym) = c else { continue };
            let position = slot.visit_time() + r as u64;
            if z.get(position).is_some() {
                return Err(BuildError::Collision { position });
            }
            let net = &nets[k - 1].nets[r];
            z.set(position, net.point(sym.point as usize).scaled(b));
            provenance.insert(
                position,
                EntryProvenance {
                    position,
                    k,
                    j,
                    r,
                    beta: b,
                    symbol: *sym,
                    direction: net.coords(sym.point as usize).to_vec(),
                },
            );
        }
    }
    Ok(XVector { z, provenance, norm_bound_squared: bound })
}

/// Everything built from one parameter set.
#[derive(Clone, Debug)]
pub struct Construction {
    pub schedule: Schedule,
    pub nets: Vec<BlockNets>,
    pub enumerations: Vec<Enumeration>,
    pub x: XVector,
    lookup: HashMap<TargetTuple, usize>,
}

impl Construction {
    pub fn build(params: Params) -> Result<Construction, BuildError> {
        let geometry = BlockGeometry::build(&params)?;
        let nets = (1..=params.k_max)
            .map(|k| BlockNets::build(&params, &geometry, k))
            .collect::<Result<Vec<_>, _>>()?;
        let enumerations: Vec<Enumeration> = nets
            .iter()
            .map(|n| enumerate_targets(n.k, n, params.zero_padding, params.target_budget, params.seed))
            .collect();
        let mut lengths = BTreeMap::new();
        let mut steps = BTreeMap::new();
        for e in &enumerations {
            for (i, tuple) in e.tuples.iter().enumerate() {
                let prog = program_exponents(e.k, i + 1, tuple, &params)?;
                lengths.insert((e.k, i + 1), prog.interval);
                steps.insert((e.k, i + 1), prog.steps);
            }
        }
        let schedule = Schedule::assemble(params, &lengths, &steps)?;
        Self::finish(schedule, nets, enumerations)
    }

    fn finish(
        schedule: Schedule,
        nets: Vec<BlockNets>,
        enumerations: Vec<Enumeration>,
    ) -> Result<Construction, BuildError> {
        let x = build_x(&schedule.geometry, &schedule.timeline, &nets, &enumerations, |_, _| true)?;
        let lookup = enumerations
            .iter()
            .flat_map(|e| e.tuples.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)))
            .collect();
        Ok(Construction { schedule, nets, enumerations, x, lookup })
    }

    pub fn params(&self) -> &Params {
        &self.schedule.params
    }

    pub fn block_nets(&self, k: usize) -> &BlockNets {
        &self.nets[k - 1]
    }

    pub fn tuple(&self, k: usize, j: usize) -> &TargetTuple {
        &self.enumerations[k - 1].tuples[j - 1]
    }

    /// `j` of an enumerated tuple.
    pub fn find(&self, tuple: &TargetTuple) -> Option<usize> {
        self.lookup.get(tuple).copied()
    }

    pub fn visit_time(&self, k: usize, j: usize) -> u64 {
        self.schedule.timeline.pair(k, j).expect("pair is allocated").visit_time()
    }

    /// `x` restricted to pairs `<= (k, j)` in lexicographic order.
    pub fn x_through(&self, k: usize, j: usize) -> ZVector {
        let end = self.visit_time(k, j) + self.params().r(k) as u64;
        self.x.z.restricted(..end)
    }

    /// The prescribed visit state: `s_r` at coordinate `r < R_k`.
    pub fn visit_state(&self, k: usize, j: usize) -> ZVector {
        let nets = self.block_nets(k);
        let mut z = ZVector::new();
        for (r, c) in self.tuple(k, j).components.iter().enumerate() {
            if let Some(sym) = c {
                z.set(r as u64, nets.vector(r, *sym));
            }
        }
        z
    }

    pub fn enumeration_summaries(&self) -> Vec<EnumerationSummary> {
        self.enumerations
            .iter()
            .map(|e| {
                let nets = &self.nets[e.k - 1];
                EnumerationSummary {
                    k: e.k,
                    alphabet: (0..nets.nets.len()).map(|r| nets.alphabet(r) as u64).collect(),
                    total: e.total.map(|t| t.to_string()),
                    count: e.tuples.len(),
                    sampled: e.sampled,
                    seed: self.params().seed,
                    nets: nets.nets.iter().map(SphereNet::summary).collect(),
                }
            })
            .collect()
    }

    pub fn to_x_document(&self) -> XDocument {
        XDocument {
            version: X_VERSION,
            entries: self.x.z.to_records(),
            provenance: self.x.provenance.values().cloned().collect(),
            pairs: self
                .enumerations
                .iter()
                .flat_map(|e| {
                    e.tuples.iter().enumerate().map(|(i, t)| PairRecord {
                        k: e.k,
                        j: i + 1,
                        components: t.components.clone(),
                    })
                })
                .collect(),
            enumeration: self.enumeration_summaries(),
            norm_bound_squared: self.x.norm_bound_squared,
        }
    }

    /// Rebuilds from a loaded schedule and `x` document, checking that the
    /// stored `x` is exactly the one its pairs prescribe.
    pub fn from_artifacts(schedule: Schedule, doc: XDocument) -> Result<Construction, BuildError> {
        if doc.version != X_VERSION {
            return Err(BuildError::Inconsistent(format!("unsupported x version {}", doc.version)));
        }
        let p = &schedule.params;
        let nets = (1..=p.k_max)
            .map(|k| BlockNets::build(p, &schedule.geometry, k))
            .collect::<Result<Vec<_>, _>>()?;
        let mut enumerations: Vec<Enumeration> = (1..=p.k_max)
            .map(|k| Enumeration { k, tuples: Vec::new(), sampled: false, total: None })
            .collect();
        for rec in doc.pairs {
            if rec.k == 0 || rec.k > p.k_max || rec.components.len() != p.r(rec.k) {
                return Err(BuildError::Inconsistent(format!("bad pair record ({}, {})", rec.k, rec.j)));
            }
            let e = &mut enumerations[rec.k - 1];
            if rec.j != e.tuples.len() + 1 {
                return Err(BuildError::Inconsistent(format!("pair ({}, {}) out of order", rec.k, rec.j)));
            }
            for (r, c) in rec.components.iter().enumerate() {
                if let Some(sym) = c {
                    let grid = nets[rec.k - 1].grid;
                    if sym.point as usize >= nets[rec.k - 1].nets[r].len() || (sym.step as i64).abs() > grid.max_step() {
                        return Err(BuildError::Inconsistent(format!("symbol out of range in ({}, {})", rec.k, rec.j)));
                    }
                }
            }
            e.tuples.push(TargetTuple { k: rec.k, components: rec.components });
        }
        for s in &doc.enumeration {
            if let Some(e) = enumerations.get_mut(s.k.wrapping_sub(1)) {
                e.sampled = s.sampled;
                e.total = s.total.as_deref().and_then(|t| t.parse().ok());
            }
        }
        for e in &enumerations {
            if e.tuples.len() != schedule.timeline.block_pairs(e.k).len() {
                return Err(BuildError::Inconsistent(format!("block {} pair count differs from timeline", e.k)));
            }
        }
        let c = Self::finish(schedule, nets, enumerations)?;
        let stored = ZVector::from_records(&doc.entries)?;
        if stored != c.x.z {
            return Err(BuildError::Inconsistent("x entries differ from the pairs they encode".into()));
        }
        Ok(c)
    }
}

pub const X_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub k: usize,
    pub j: usize,
    pub components: Vec<Option<Symbol>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XDocument {
    pub version: u32,
    pub entries: Vec<ZRecord>,
    pub provenance: Vec<EntryProvenance>,
    pub pairs: Vec<PairRecord>,
    pub enumeration: Vec<EnumerationSummary>,
    pub norm_bound_squared: f64,
}
