//! Sparse vectors in `H = l2(N)` and `Z = l2(N; H)`.
//!
//! Every stored coefficient is a float mantissa times an exact dyadic power
//! `2^(p/q)`. Weights of the shift only ever multiply the dyadic part, so
//! orbit values can be compared exactly; floats are only touched when a norm
//! or an external comparison is needed.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use num_integer::Integer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::BlockGeometry;

/// Largest `|p/q|` accepted by [`DyadicScalar::numeric`].
pub const DEFAULT_EXPONENT_CAP: f64 = 500.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("dyadic exponent {exponent} exceeds the numeric cap {cap}")]
    ExponentOverflow { exponent: f64, cap: f64 },
    #[error("unknown block {k} (geometry has blocks 1..={k_max})")]
    UnknownBlock { k: usize, k_max: usize },
    #[error("invalid dyadic exponent {num}/{den}")]
    InvalidExponent { num: i64, den: i64 },
    #[error("invalid vector record at position {r}, index {j}: {reason}")]
    InvalidRecord { r: u64, j: u64, reason: String },
}

/// The positive real `2^(num/den)`, kept in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDyadic", into = "RawDyadic")]
pub struct DyadicScalar {
    num: i64,
    den: u64,
}

#[derive(Serialize, Deserialize)]
struct RawDyadic {
    num: i64,
    den: i64,
}

impl TryFrom<RawDyadic> for DyadicScalar {
    type Error = SpaceError;

    fn try_from(raw: RawDyadic) -> Result<Self, SpaceError> {
        DyadicScalar::try_new(raw.num, raw.den)
    }
}

impl From<DyadicScalar> for RawDyadic {
    fn from(s: DyadicScalar) -> Self {
        RawDyadic { num: s.num, den: s.den as i64 }
    }
}

impl DyadicScalar {
    pub const ONE: DyadicScalar = DyadicScalar { num: 0, den: 1 };
    pub const TWO: DyadicScalar = DyadicScalar { num: 1, den: 1 };
    pub const HALF: DyadicScalar = DyadicScalar { num: -1, den: 1 };

    /// `2^(num/den)`. Panics on `den <= 0`; use [`DyadicScalar::try_new`] for
    /// untrusted input.
    pub fn new(num: i64, den: i64) -> Self {
        Self::try_new(num, den).expect("dyadic exponent denominator must be positive")
    }

    pub fn try_new(num: i64, den: i64) -> Result<Self, SpaceError> {
        if den <= 0 {
            return Err(SpaceError::InvalidExponent { num, den });
        }
        Ok(Self::reduced(num as i128, den as i128))
    }

    /// `2^n` for an integer `n`.
    pub fn pow2(n: i64) -> Self {
        DyadicScalar { num: n, den: 1 }
    }

    fn reduced(num: i128, den: i128) -> Self {
        debug_assert!(den > 0);
        if num == 0 {
            return DyadicScalar::ONE;
        }
        let g = num.gcd(&den);
        let (num, den) = (num / g, den / g);
        DyadicScalar {
            num: i64::try_from(num).expect("dyadic numerator overflow"),
            den: u64::try_from(den).expect("dyadic denominator overflow"),
        }
    }

    pub fn num(&self) -> i64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn is_one(&self) -> bool {
        self.num == 0
    }

    /// The exponent `num/den` as a float.
    pub fn exponent(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Exact product: exponents add.
    pub fn mul(self, other: DyadicScalar) -> DyadicScalar {
        let num = self.num as i128 * other.den as i128 + other.num as i128 * self.den as i128;
        let den = self.den as i128 * other.den as i128;
        Self::reduced(num, den)
    }

    pub fn inv(self) -> DyadicScalar {
        DyadicScalar { num: -self.num, den: self.den }
    }

    pub fn div(self, other: DyadicScalar) -> DyadicScalar {
        self.mul(other.inv())
    }

    /// `self^n` for an integer power.
    pub fn powi(self, n: i64) -> DyadicScalar {
        Self::reduced(self.num as i128 * n as i128, self.den as i128)
    }

    pub fn numeric(&self) -> Result<f64, SpaceError> {
        self.numeric_with_cap(DEFAULT_EXPONENT_CAP)
    }

    pub fn numeric_with_cap(&self, cap: f64) -> Result<f64, SpaceError> {
        let exponent = self.exponent();
        if exponent.abs() > cap {
            return Err(SpaceError::ExponentOverflow { exponent, cap });
        }
        if self.den == 1 {
            // exact for every integer exponent inside the cap, subnormals included
            Ok((self.num as f64).exp2())
        } else {
            Ok(exponent.exp2())
        }
    }
}

impl Default for DyadicScalar {
    fn default() -> Self {
        DyadicScalar::ONE
    }
}

impl Ord for DyadicScalar {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = self.num as i128 * other.den as i128;
        let rhs = other.num as i128 * self.den as i128;
        lhs.cmp(&rhs)
    }
}

impl PartialOrd for DyadicScalar {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for DyadicScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "2^{}", self.num)
        } else {
            write!(f, "2^({}/{})", self.num, self.den)
        }
    }
}

/// `2^(a+b)` in lowest terms.
pub fn dyadic_mul(a: DyadicScalar, b: DyadicScalar) -> DyadicScalar {
    a.mul(b)
}

/// One stored coefficient, `mantissa * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HEntry {
    pub mantissa: f64,
    pub scale: DyadicScalar,
}

impl HEntry {
    pub fn new(mantissa: f64, scale: DyadicScalar) -> Self {
        HEntry { mantissa, scale }
    }

    /// Float value of the coefficient. Scales far outside the float range
    /// saturate; use the norm helpers for anything that must stay finite.
    pub fn value(&self) -> f64 {
        self.mantissa * self.scale.exponent().exp2()
    }
}

/// Sparse vector in `H`, keyed by basis index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HVector {
    entries: BTreeMap<u64, HEntry>,
}

impl HVector {
    pub fn new() -> Self {
        HVector::default()
    }

    /// A single basis vector `mantissa * e_j`.
    pub fn basis(j: u64, mantissa: f64) -> Self {
        let mut v = HVector::new();
        v.insert(j, mantissa, DyadicScalar::ONE);
        v
    }

    /// Sets the coefficient at `j`; zero mantissas remove the entry.
    pub fn insert(&mut self, j: u64, mantissa: f64, scale: DyadicScalar) {
        assert!(mantissa.is_finite(), "mantissa must be finite");
        if mantissa == 0.0 {
            self.entries.remove(&j);
        } else {
            self.entries.insert(j, HEntry::new(mantissa, scale));
        }
    }

    pub fn get(&self, j: u64) -> Option<&HEntry> {
        self.entries.get(&j)
    }

    pub fn coefficient(&self, j: u64) -> f64 {
        self.entries.get(&j).map_or(0.0, HEntry::value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &HEntry)> + '_ {
        self.entries.iter().map(|(&j, e)| (j, e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (u64, &mut HEntry)> + '_ {
        self.entries.iter_mut().map(|(&j, e)| (j, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    /// Multiplies every coefficient's dyadic part by `s`.
    pub fn scaled(&self, s: DyadicScalar) -> HVector {
        let mut out = self.clone();
        for e in out.entries.values_mut() {
            e.scale = e.scale.mul(s);
        }
        out
    }

    pub fn norm_squared(&self) -> f64 {
        scaled_sum_of_squares(self.entries.values()).value()
    }

    pub fn norm(&self) -> f64 {
        scaled_sum_of_squares(self.entries.values()).sqrt_value()
    }

    /// Keeps the entries whose index satisfies `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(u64) -> bool) -> HVector {
        HVector {
            entries: self
                .entries
                .iter()
                .filter(|(&j, _)| keep(j))
                .map(|(&j, &e)| (j, e))
                .collect(),
        }
    }

    pub fn sub(&self, other: &HVector) -> HVector {
        let mut out = self.clone();
        for (&j, &e) in &other.entries {
            match out.entries.get(&j).copied() {
                None => {
                    out.entries.insert(j, HEntry::new(-e.mantissa, e.scale));
                }
                Some(mine) => match combine(mine, HEntry::new(-e.mantissa, e.scale)) {
                    Some(c) => {
                        out.entries.insert(j, c);
                    }
                    None => {
                        out.entries.remove(&j);
                    }
                },
            }
        }
        out
    }

    pub fn add(&self, other: &HVector) -> HVector {
        let negated = HVector {
            entries: other
                .entries
                .iter()
                .map(|(&j, e)| (j, HEntry::new(-e.mantissa, e.scale)))
                .collect(),
        };
        self.sub(&negated)
    }

    /// Inner product with a basis vector, `<v, e_j>`.
    pub fn dot_basis(&self, j: u64) -> f64 {
        self.coefficient(j)
    }
}

/// Sum of two coefficients at the same index; `None` when they cancel.
fn combine(a: HEntry, b: HEntry) -> Option<HEntry> {
    if a.scale == b.scale {
        let m = a.mantissa + b.mantissa;
        return (m != 0.0).then(|| HEntry::new(m, a.scale));
    }
    let (big, small) = if a.scale > b.scale { (a, b) } else { (b, a) };
    let shift = small.scale.div(big.scale).exponent().exp2();
    let m = big.mantissa + small.mantissa * shift;
    (m != 0.0).then(|| HEntry::new(m, big.scale))
}

/// A sum of squares held as `sum * 2^(2 * top)` so that entries with very
/// small or very large dyadic scales do not underflow prematurely.
#[derive(Clone, Copy, Debug)]
struct ScaledSum {
    sum: f64,
    top: f64,
}

impl ScaledSum {
    fn value(self) -> f64 {
        if self.sum == 0.0 {
            0.0
        } else {
            self.sum * (2.0 * self.top).exp2()
        }
    }

    fn sqrt_value(self) -> f64 {
        if self.sum == 0.0 {
            0.0
        } else {
            self.sum.sqrt() * self.top.exp2()
        }
    }
}

fn scaled_sum_of_squares<'a>(entries: impl Iterator<Item = &'a HEntry> + Clone) -> ScaledSum {
    let top = entries
        .clone()
        .map(|e| e.scale.exponent())
        .fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return ScaledSum { sum: 0.0, top: 0.0 };
    }
    let sum = entries
        .map(|e| {
            let rel = (e.scale.exponent() - top).exp2();
            let v = e.mantissa * rel;
            v * v
        })
        .sum();
    ScaledSum { sum, top }
}

/// Sparse element of `Z`, keyed by position `r`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ZVector {
    coords: BTreeMap<u64, HVector>,
}

impl ZVector {
    pub fn new() -> Self {
        ZVector::default()
    }

    /// `e_r(v)`: the vector with `v` at position `r` and zero elsewhere.
    pub fn single(r: u64, v: HVector) -> Self {
        let mut z = ZVector::new();
        z.set(r, v);
        z
    }

    /// Replaces coordinate `r`; an empty `v` clears it.
    pub fn set(&mut self, r: u64, v: HVector) {
        if v.is_empty() {
            self.coords.remove(&r);
        } else {
            self.coords.insert(r, v);
        }
    }

    pub fn insert_entry(&mut self, r: u64, j: u64, mantissa: f64, scale: DyadicScalar) {
        let mut v = self.coords.remove(&r).unwrap_or_default();
        v.insert(j, mantissa, scale);
        self.set(r, v);
    }

    pub fn get(&self, r: u64) -> Option<&HVector> {
        self.coords.get(&r)
    }

    pub fn coord(&self, r: u64) -> HVector {
        self.coords.get(&r).cloned().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &HVector)> + '_ {
        self.coords.iter().map(|(&r, v)| (r, v))
    }

    /// Coordinates with positions in `range`.
    pub fn range(
        &self,
        range: impl std::ops::RangeBounds<u64>,
    ) -> impl Iterator<Item = (u64, &HVector)> + '_ {
        self.coords.range(range).map(|(&r, v)| (r, v))
    }

    pub fn positions(&self) -> impl Iterator<Item = u64> + '_ {
        self.coords.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Number of stored positions.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn entry_count(&self) -> usize {
        self.coords.values().map(HVector::len).sum()
    }

    pub fn norm(&self) -> f64 {
        z_norm(self)
    }

    pub fn norm_squared(&self) -> f64 {
        scaled_sum_of_squares(self.coords.values().flat_map(|v| v.entries.values())).value()
    }

    /// Keeps coordinates with positions in `range`.
    pub fn restricted(&self, range: impl std::ops::RangeBounds<u64>) -> ZVector {
        ZVector {
            coords: self.coords.range(range).map(|(&r, v)| (r, v.clone())).collect(),
        }
    }

    /// Applies `f` to every coordinate, dropping coordinates that become empty.
    pub fn map_coords(&self, mut f: impl FnMut(u64, &HVector) -> HVector) -> ZVector {
        let mut out = ZVector::new();
        for (&r, v) in &self.coords {
            out.set(r, f(r, v));
        }
        out
    }

    pub fn to_records(&self) -> Vec<ZRecord> {
        self.coords
            .iter()
            .flat_map(|(&r, v)| {
                v.iter().map(move |(j, e)| {
                    ZRecord(r, j, e.mantissa, e.scale.num(), e.scale.den() as i64)
                })
            })
            .collect()
    }

    pub fn from_records(records: &[ZRecord]) -> Result<ZVector, SpaceError> {
        let mut z = ZVector::new();
        for &ZRecord(r, j, mantissa, num, den) in records {
            let invalid = |reason: &str| SpaceError::InvalidRecord { r, j, reason: reason.into() };
            if !mantissa.is_finite() || mantissa == 0.0 {
                return Err(invalid("mantissa must be finite and nonzero"));
            }
            let scale = DyadicScalar::try_new(num, den)?;
            if scale.num() != num || scale.den() as i64 != den {
                return Err(invalid("exponent not in lowest terms"));
            }
            if z.get(r).and_then(|v| v.get(j)).is_some() {
                return Err(invalid("duplicate entry"));
            }
            z.insert_entry(r, j, mantissa, scale);
        }
        Ok(z)
    }
}

/// Flat serialized entry `(r, j, mantissa, exp_num, exp_den)`: the value
/// `mantissa * 2^(exp_num/exp_den)` at internal index `j` of position `r`.
/// Serializes as a five-element JSON array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZRecord(pub u64, pub u64, pub f64, pub i64, pub i64);

pub fn z_norm(u: &ZVector) -> f64 {
    scaled_sum_of_squares(u.coords.values().flat_map(|v| v.entries.values())).sqrt_value()
}

/// `u - v`, coordinatewise; exactly cancelling entries disappear.
pub fn z_sub(u: &ZVector, v: &ZVector) -> ZVector {
    let mut out = u.clone();
    for (&r, vr) in &v.coords {
        let diff = match out.coords.get(&r) {
            Some(ur) => ur.sub(vr),
            None => HVector::new().sub(vr),
        };
        out.set(r, diff);
    }
    out
}

pub fn z_add(u: &ZVector, v: &ZVector) -> ZVector {
    let mut out = u.clone();
    for (&r, vr) in &v.coords {
        let sum = match out.coords.get(&r) {
            Some(ur) => ur.add(vr),
            None => vr.clone(),
        };
        out.set(r, sum);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// Onto `F_k`.
    P,
    /// Onto the complement `G_k`.
    Q,
}

/// `P_k^flat u` or `Q_k^flat u`, applied at every position.
pub fn project_block(
    u: &ZVector,
    k: usize,
    g: &BlockGeometry,
    which: Projection,
) -> Result<ZVector, SpaceError> {
    g.check_block(k)?;
    Ok(u.map_coords(|_, v| project_h(v, k, g, which)))
}

pub(crate) fn project_h(v: &HVector, k: usize, g: &BlockGeometry, which: Projection) -> HVector {
    v.filtered(|j| g.in_projection(k, j) == (which == Projection::P))
}

/// Coefficients of `e_0` and `e_{m_k}` in `v`.
pub fn project_plane(v: &HVector, k: usize, g: &BlockGeometry) -> Result<(f64, f64), SpaceError> {
    g.check_block(k)?;
    Ok((v.coefficient(0), v.coefficient(g.plane_index(k))))
}
