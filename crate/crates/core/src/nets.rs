//! Certified tau-nets on unit spheres, the geometric magnitude grid, and the
//! discretization `w -> alpha * u`.
//!
//! A net is built from the cubic grid `(Z / n)^dim` with `n = ceil(2 sqrt(dim) / tau)`.
//! The grid point nearest to a unit vector lies within `sqrt(dim) / (2n)` of it,
//! hence inside the shell `| |g| - 1 | <= sqrt(dim) / (2n)`; normalizing the
//! shell points therefore gives a net of covering radius `sqrt(dim) / n <= tau / 2`.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use num_integer::Integer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{DyadicScalar, HVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("net dimension {dim} outside 1..={cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error("tau = {0} must lie in (0, 1)")]
    BadTau(f64),
    #[error("net would have {size} points, budget is {budget}")]
    TooLarge { size: usize, budget: usize },
    #[error("cannot discretize the zero vector")]
    ZeroVector,
    #[error("vector has support outside the net's index set (index {0})")]
    NotInSpan(u64),
    #[error("log2 |w| = {log2_norm} outside [-{m}, {m}]: increase M")]
    OutOfCoverage { log2_norm: f64, m: u32 },
}

#[derive(Clone, Copy, Debug)]
pub struct NetCaps {
    pub dim_cap: usize,
    pub point_budget: usize,
}

impl Default for NetCaps {
    fn default() -> Self {
        NetCaps { dim_cap: 4, point_budget: 1_000_000 }
    }
}

/// Net points in `R^dim` plus an exact nearest-point index.
#[derive(Debug)]
struct NetCore {
    dim: usize,
    tau: f64,
    subdivisions: u64,
    coords: Vec<f64>,
    cell: f64,
    cells: HashMap<Vec<i64>, Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct SphereNet {
    /// Internal basis indices the net's coordinates refer to.
    pub index_set: Vec<u64>,
    core: Arc<NetCore>,
}

/// Certification record of a net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSummary {
    pub dim: usize,
    pub tau: f64,
    pub h: f64,
    pub covering_radius: f64,
    pub point_count: usize,
}

pub fn build_sphere_net(index_set: &[u64], tau: f64, caps: NetCaps) -> Result<SphereNet, NetError> {
    let dim = index_set.len();
    if dim == 0 || dim > caps.dim_cap {
        return Err(NetError::DimensionCap { dim, cap: caps.dim_cap });
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(NetError::BadTau(tau));
    }
    let n = (2.0 * (dim as f64).sqrt() / tau).ceil() as i64;
    let half_width = (dim as f64).sqrt() / 2.0 + 1e-9;
    let (lo2, hi2) = {
        let lo = (n as f64 - half_width).max(0.0);
        let hi = n as f64 + half_width;
        (lo * lo, hi * hi)
    };

    let mut seen = HashSet::new();
    let mut points: Vec<Vec<i64>> = Vec::new();
    let mut prefix = vec![0i64; dim];
    shell_points(&mut prefix, 0, 0, n, lo2, hi2, &mut |g| {
        if g.iter().all(|&c| c == 0) {
            return Ok(());
        }
        let d = g.iter().fold(0i64, |acc, &c| acc.gcd(&c));
        let key: Vec<i64> = g.iter().map(|&c| c / d).collect();
        if seen.insert(key.clone()) {
            points.push(key);
            if points.len() > caps.point_budget {
                return Err(());
            }
        }
        Ok(())
    })
    .map_err(|_| NetError::TooLarge {
        size: estimate_shell_size(dim, n),
        budget: caps.point_budget,
    })?;

    let mut coords = Vec::with_capacity(points.len() * dim);
    for g in &points {
        let norm = g.iter().map(|&c| (c * c) as f64).sum::<f64>().sqrt();
        coords.extend(g.iter().map(|&c| c as f64 / norm));
    }
    let cell = (dim as f64).sqrt() / n as f64;
    let mut cells: HashMap<Vec<i64>, Vec<u32>> = HashMap::new();
    for (i, p) in coords.chunks(dim).enumerate() {
        cells.entry(cell_key(p, cell)).or_default().push(i as u32);
    }
    Ok(SphereNet {
        index_set: index_set.to_vec(),
        core: Arc::new(NetCore { dim, tau, subdivisions: n as u64, coords, cell, cells }),
    })
}

/// Visits the integer points `g` in `[-n, n]^dim` with `lo2 <= |g|^2 <= hi2`,
/// in lexicographic order. The last coordinate is solved for directly.
fn shell_points(
    prefix: &mut Vec<i64>,
    depth: usize,
    sum2: i64,
    n: i64,
    lo2: f64,
    hi2: f64,
    visit: &mut impl FnMut(&[i64]) -> Result<(), ()>,
) -> Result<(), ()> {
    let dim = prefix.len();
    let s = sum2 as f64;
    if s > hi2 {
        return Ok(());
    }
    if depth + 1 == dim {
        let need_lo = (lo2 - s).max(0.0);
        let need_hi = hi2 - s;
        // one extra candidate on each side; `in_shell` decides exactly
        let c_hi = (need_hi.sqrt().floor() as i64 + 1).min(n);
        let c_lo = (need_lo.sqrt().ceil() as i64 - 1).max(0);
        let in_shell = |c: i64| {
            let t = s + (c * c) as f64;
            t >= lo2 && t <= hi2
        };
        let candidates: Vec<i64> = if c_lo == 0 {
            (-c_hi..=c_hi).collect()
        } else {
            (-c_hi..=-c_lo).chain(c_lo..=c_hi).collect()
        };
        for c in candidates {
            if in_shell(c) {
                prefix[depth] = c;
                visit(prefix)?;
            }
        }
        return Ok(());
    }
    for c in -n..=n {
        prefix[depth] = c;
        shell_points(prefix, depth + 1, sum2 + c * c, n, lo2, hi2, visit)?;
    }
    Ok(())
}

fn estimate_shell_size(dim: usize, n: i64) -> usize {
    // surface area of the unit sphere times shell thickness, in grid cells
    let d = dim as f64;
    let area = 2.0 * std::f64::consts::PI.powf(d / 2.0) / gamma_half(dim);
    (area * (n as f64).powf(d - 1.0) * d.sqrt()).round() as usize
}

fn gamma_half(dim: usize) -> f64 {
    // Gamma(dim / 2)
    match dim {
        1 => std::f64::consts::PI.sqrt(),
        2 => 1.0,
        _ => (dim as f64 / 2.0 - 1.0) * gamma_half(dim - 2),
    }
}

fn cell_key(p: &[f64], cell: f64) -> Vec<i64> {
    p.iter().map(|&x| (x / cell).floor() as i64).collect()
}

impl SphereNet {
    pub fn dim(&self) -> usize {
        self.core.dim
    }

    pub fn tau(&self) -> f64 {
        self.core.tau
    }

    /// Grid step `h`.
    pub fn step(&self) -> f64 {
        1.0 / self.core.subdivisions as f64
    }

    /// Certified covering radius `h * sqrt(dim)`.
    pub fn covering_radius(&self) -> f64 {
        self.step() * (self.dim() as f64).sqrt()
    }

    pub fn len(&self) -> usize {
        self.core.coords.len() / self.core.dim
    }

    pub fn is_empty(&self) -> bool {
        self.core.coords.is_empty()
    }

    pub fn coords(&self, i: usize) -> &[f64] {
        let d = self.core.dim;
        &self.core.coords[i * d..(i + 1) * d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.core.coords.chunks(self.core.dim)
    }

    /// The same net placed on another index set of equal size.
    pub fn with_index_set(&self, index_set: &[u64]) -> SphereNet {
        assert_eq!(index_set.len(), self.dim(), "index set size must match the net dimension");
        SphereNet { index_set: index_set.to_vec(), core: Arc::clone(&self.core) }
    }

    /// Point `i` as a vector of `H`.
    pub fn point(&self, i: usize) -> HVector {
        let mut v = HVector::new();
        for (&j, &c) in self.index_set.iter().zip(self.coords(i)) {
            v.insert(j, c, DyadicScalar::ONE);
        }
        v
    }

    /// Index of the nearest point to the unit vector `v` (ties: lowest index).
    pub fn nearest(&self, v: &[f64]) -> usize {
        assert_eq!(v.len(), self.dim());
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        if (norm2 - 1.0).abs() > 1e-9 {
            return self.nearest_scan(v);
        }
        let core = &*self.core;
        let base = cell_key(v, core.cell);
        let mut best = (f64::INFINITY, usize::MAX);
        let mut key = base.clone();
        let neighbours = 3usize.pow(core.dim as u32);
        for code in 0..neighbours {
            let mut c = code;
            for (d, slot) in key.iter_mut().enumerate() {
                *slot = base[d] + (c % 3) as i64 - 1;
                c /= 3;
            }
            if let Some(ids) = core.cells.get(&key) {
                for &i in ids {
                    let i = i as usize;
                    let d2 = dist2(self.coords(i), v);
                    if d2 < best.0 || (d2 == best.0 && i < best.1) {
                        best = (d2, i);
                    }
                }
            }
        }
        if best.1 == usize::MAX {
            return self.nearest_scan(v);
        }
        best.1
    }

    fn nearest_scan(&self, v: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in self.points().enumerate() {
            let d2 = dist2(p, v);
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        best.1
    }

    pub fn summary(&self) -> NetSummary {
        NetSummary {
            dim: self.dim(),
            tau: self.tau(),
            h: self.step(),
            covering_radius: self.covering_radius(),
            point_count: self.len(),
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Magnitudes `2^(m/J)` for `|m| <= J M`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoGrid {
    pub denominator: u32,
    pub range: u32,
}

impl GeoGrid {
    pub fn new(denominator: u32, range: u32) -> GeoGrid {
        assert!(denominator >= 1 && range >= 1);
        GeoGrid { denominator, range }
    }

    /// Largest `|m|`, `J M`.
    pub fn max_step(&self) -> i64 {
        self.denominator as i64 * self.range as i64
    }

    pub fn len(&self) -> usize {
        2 * self.max_step() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self, m: i64) -> DyadicScalar {
        assert!(m.abs() <= self.max_step(), "grid step {m} out of range");
        DyadicScalar::new(m, self.denominator as i64)
    }

    pub fn values(&self) -> impl Iterator<Item = DyadicScalar> + '_ {
        (-self.max_step()..=self.max_step()).map(|m| self.value(m))
    }

    /// Grid step of a grid value, if it belongs to the grid.
    pub fn step_of(&self, s: DyadicScalar) -> Option<i64> {
        let j = self.denominator as u64;
        if j % s.den() != 0 {
            return None;
        }
        let m = s.num() * (j / s.den()) as i64;
        (m.abs() <= self.max_step()).then_some(m)
    }

    /// Worst relative magnitude error, `2^(1/(2J)) - 1`.
    pub fn quantization_bound(&self) -> f64 {
        (1.0 / (2.0 * self.denominator as f64)).exp2() - 1.0
    }
}

/// `S = {alpha u : u in U, alpha in G}`.
#[derive(Clone, Debug)]
pub struct SkSet {
    pub net: SphereNet,
    pub grid: GeoGrid,
}

impl SkSet {
    pub fn len(&self) -> usize {
        self.net.len() * self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.net.is_empty()
    }
}

/// Result of [`discretize`]: net point, grid step and `alpha = 2^(m/J)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Discretized {
    pub point: usize,
    pub step: i64,
    pub alpha: DyadicScalar,
}

/// Nearest direction and rounded magnitude with `|w - alpha u| <= 2 tau |w|`.
pub fn discretize(w: &HVector, net: &SphereNet, grid: &GeoGrid) -> Result<Discretized, NetError> {
    let mut coords = vec![0.0; net.dim()];
    for (j, e) in w.iter() {
        let pos = net.index_set.iter().position(|&i| i == j).ok_or(NetError::NotInSpan(j))?;
        coords[pos] = e.value();
    }
    let norm = coords.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(NetError::ZeroVector);
    }
    let log2_norm = norm.log2();
    let j = grid.denominator as f64;
    let mut m = (j * log2_norm + 0.5).floor() as i64;
    let top = grid.max_step();
    if m.abs() > top {
        if m.abs() > top + 1 {
            return Err(NetError::OutOfCoverage { log2_norm, m: grid.range });
        }
        m = m.signum() * top;
    }
    let unit: Vec<f64> = coords.iter().map(|c| c / norm).collect();
    Ok(Discretized { point: net.nearest(&unit), step: m, alpha: grid.value(m) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 && n <= 1.0 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }

    fn exhaustive_nearest(net: &SphereNet, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, p) in net.points().enumerate() {
            let d: f64 = p.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    #[test]
    fn dim_one_net_is_two_points() {
        for tau in [0.9, 0.3, 0.01] {
            let net = build_sphere_net(&[7], tau, NetCaps::default()).unwrap();
            let pts: Vec<&[f64]> = net.points().collect();
            assert_eq!(pts, vec![&[-1.0][..], &[1.0][..]]);
        }
    }

    #[test]
    fn nets_are_unit_symmetric_and_contain_axes() {
        for (dim, tau) in [(2, 0.5), (2, 0.0625), (3, 0.2), (4, 0.5)] {
            let idx: Vec<u64> = (10..10 + dim as u64).collect();
            let net = build_sphere_net(&idx, tau, NetCaps::default()).unwrap();
            assert!(net.covering_radius() <= tau);
            let mut set = HashSet::new();
            for p in net.points() {
                let n: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() <= 1e-12);
                set.insert(p.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            }
            assert_eq!(set.len(), net.len(), "points are distinct");
            for p in net.points() {
                let neg: Vec<u64> = p.iter().map(|x| (0.0 - x).to_bits()).collect();
                assert!(set.contains(&neg));
            }
            let mut axis = vec![0.0; dim];
            axis[0] = 1.0;
            assert!(set.contains(&axis.iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>()));
            let e = net.point(net.nearest(&axis));
            assert_eq!(e.coefficient(10), 1.0);
        }
    }

    #[test]
    fn covering_holds_on_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = build_sphere_net(&[0, 1], 0.5, NetCaps::default()).unwrap();
        for _ in 0..100_000 {
            let v = random_unit(&mut rng, 2);
            let i = net.nearest(&v);
            assert!(dist2(net.coords(i), &v).sqrt() <= 0.5);
        }
    }

    #[test]
    fn indexed_nearest_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (dim, tau, samples) in [(2, 0.0625, 4000), (3, 0.1, 1000), (4, 0.3, 300)] {
            let idx: Vec<u64> = (0..dim as u64).collect();
            let net = build_sphere_net(&idx, tau, NetCaps::default()).unwrap();
            for _ in 0..samples {
                let v = random_unit(&mut rng, dim);
                let (i, d) = exhaustive_nearest(&net, &v);
                let got = net.nearest(&v);
                assert!(dist2(net.coords(got), &v).sqrt() <= d + 1e-15);
                assert_eq!(got, i);
                assert!(d <= net.covering_radius());
            }
        }
    }

    #[test]
    fn oversized_net_is_rejected_with_size() {
        let caps = NetCaps { dim_cap: 4, point_budget: 100 };
        match build_sphere_net(&[1, 2, 3], 0.05, caps) {
            Err(NetError::TooLarge { size, budget }) => {
                assert_eq!(budget, 100);
                assert!(size > 100);
            }
            other => panic!("expected TooLarge, got {other:?}"),
        }
        assert!(matches!(build_sphere_net(&[1, 2, 3, 4, 5], 0.5, NetCaps::default()), Err(NetError::DimensionCap { .. })));
        assert!(matches!(build_sphere_net(&[], 0.5, NetCaps::default()), Err(NetError::DimensionCap { .. })));
        assert!(matches!(build_sphere_net(&[1], 1.5, NetCaps::default()), Err(NetError::BadTau(_))));
    }

    #[test]
    fn grid_has_expected_values() {
        let g = GeoGrid::new(6, 2);
        assert_eq!(g.len(), 25);
        let values: Vec<_> = g.values().collect();
        assert_eq!(values.len(), 25);
        for v in &values {
            assert!(values.contains(&v.inv()));
            assert_eq!(g.value(g.step_of(*v).unwrap()), *v);
        }
        assert_eq!(g.step_of(DyadicScalar::new(1, 4)), None);
        assert_eq!(g.step_of(DyadicScalar::pow2(3)), None);
    }

    #[test]
    fn discretize_exact_member() {
        let net = build_sphere_net(&[3, 5], 0.2, NetCaps::default()).unwrap();
        let grid = GeoGrid::new(4, 3);
        let u = net.point(17);
        let w = u.scaled(DyadicScalar::TWO);
        let d = discretize(&w, &net, &grid).unwrap();
        assert_eq!(d.point, 17);
        assert_eq!(d.alpha, DyadicScalar::TWO);
    }

    #[test]
    fn discretize_rounding_example() {
        let net = build_sphere_net(&[9], 0.4, NetCaps::default()).unwrap();
        let grid = GeoGrid::new(2, 2);
        let d = discretize(&HVector::basis(9, 3.0), &net, &grid).unwrap();
        assert_eq!(d.step, 3);
        assert_eq!(d.alpha, DyadicScalar::new(3, 2));
        let alpha = d.alpha.numeric().unwrap();
        assert!((alpha - 2.828_427_124_746_19).abs() < 1e-12);
        assert!((alpha - 3.0).abs() <= (0.25f64.exp2() - 1.0) * 3.0);
        assert_eq!(net.coords(d.point), &[1.0]);
    }

    #[test]
    fn discretize_errors_and_clamping() {
        let net = build_sphere_net(&[1, 2], 0.3, NetCaps::default()).unwrap();
        let grid = GeoGrid::new(2, 1);
        assert_eq!(discretize(&HVector::new(), &net, &grid), Err(NetError::ZeroVector));
        assert_eq!(discretize(&HVector::basis(4, 1.0), &net, &grid), Err(NetError::NotInSpan(4)));
        // just past 2^M: within one step, clamped
        let d = discretize(&HVector::basis(1, 2.0 * 1.2), &net, &grid).unwrap();
        assert_eq!(d.step, 2);
        assert!(matches!(discretize(&HVector::basis(1, 8.0), &net, &grid), Err(NetError::OutOfCoverage { .. })));
    }

    #[test]
    fn discretize_bound_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tau = 0.0625;
        let net = build_sphere_net(&[1, 3], tau, NetCaps::default()).unwrap();
        let grid = GeoGrid::new(6, 2);
        for _ in 0..10_000 {
            let dir = random_unit(&mut rng, 2);
            let mag = rng.gen_range(-2.0..2.0f64).exp2();
            let mut w = HVector::new();
            w.insert(1, dir[0] * mag, DyadicScalar::ONE);
            w.insert(3, dir[1] * mag, DyadicScalar::ONE);
            let d = discretize(&w, &net, &grid).unwrap();
            let alpha = d.alpha.numeric().unwrap();
            let approx = net.point(d.point).scaled(d.alpha);
            let err = w.sub(&approx).norm();
            assert!(err <= 2.0 * tau * w.norm(), "{err}");
            assert!((alpha / w.norm() - 1.0).abs() <= grid.quantization_bound() + 1e-15);
            assert_eq!(d.point, exhaustive_nearest(&net, &dir).0);
        }
    }

    mod props {
        use std::sync::OnceLock;

        use proptest::prelude::*;

        use super::*;

        fn net() -> &'static SphereNet {
            static NET: OnceLock<SphereNet> = OnceLock::new();
            NET.get_or_init(|| build_sphere_net(&[0, 2, 5], 0.2, NetCaps::default()).unwrap())
        }

        proptest! {
            #[test]
            fn discretize_stays_within_two_tau(
                v in proptest::collection::vec(-1.0f64..1.0, 3),
                log_mag in -2.5f64..2.5,
            ) {
                let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assume!(len > 1e-6);
                let mut w = HVector::new();
                for (j, x) in [0, 2, 5].into_iter().zip(&v) {
                    w.insert(j, x / len * log_mag.exp2(), DyadicScalar::ONE);
                }
                let grid = GeoGrid::new(3, 2);
                let d = discretize(&w, net(), &grid).unwrap();
                let err = w.sub(&net().point(d.point).scaled(d.alpha)).norm();
                prop_assert!(err <= 2.0 * 0.2 * w.norm());
                prop_assert!(d.step.abs() <= 6);
            }

            #[test]
            fn net_points_are_unit(i in 0usize..10_000) {
                let net = net();
                let p = net.coords(i % net.len());
                prop_assert!((p.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
