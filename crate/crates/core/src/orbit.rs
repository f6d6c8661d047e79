//! Orbits of sparse vectors under the weighted shift.

use crate::schedule::Schedule;
use crate::space::{DyadicScalar, HVector, SpaceError, ZVector};

/// One application of `T`: coordinate `r` of the result is `A_{r+1} u_{r+1}`.
pub fn apply_t(u: &ZVector, s: &Schedule) -> ZVector {
    let mut out = ZVector::new();
    for (p, v) in u.range(1..) {
        out.set(p - 1, s.weight_action(p).apply(v, &s.geometry));
    }
    out
}

/// The scalar by which `A_{a+1} ... A_b` multiplies `e_j`.
pub fn window_factor(j: u64, a: u64, b: u64, s: &Schedule) -> DyadicScalar {
    let Some((k, lane)) = s.geometry.lane_of(j) else {
        return DyadicScalar::ONE;
    };
    let mut f = s.lane_product(k, lane, a, b);
    if j == s.geometry.plane_index(k) {
        let bar = s.timeline.barrier(k);
        if a < bar.first && bar.first <= b {
            f = f.mul(DyadicScalar::TWO);
        }
        if a < bar.second && bar.second <= b {
            f = f.mul(DyadicScalar::HALF);
        }
    }
    f
}

/// `A_{a+1} ... A_b v`.
pub fn evolve(v: &HVector, a: u64, b: u64, s: &Schedule) -> HVector {
    let mut out = HVector::new();
    for (j, e) in v.iter() {
        out.insert(j, e.mantissa, e.scale.mul(window_factor(j, a, b, s)));
    }
    out
}

/// `T^n u` in closed form: `(T^n u)_r = A_{r+1} ... A_{r+n} u_{r+n}`.
pub fn orbit_at(u: &ZVector, n: u64, s: &Schedule) -> ZVector {
    if n == 0 {
        return u.clone();
    }
    let mut out = ZVector::new();
    for (p, v) in u.range(n..) {
        out.set(p - n, evolve(v, p - n, p, s));
    }
    out
}

/// `T^n` applied to the part of `u` stored at `positions`; positions below
/// `n` leave the orbit and are skipped.
pub fn orbit_of_range(u: &ZVector, n: u64, positions: std::ops::Range<u64>, s: &Schedule) -> ZVector {
    let mut out = ZVector::new();
    for (p, v) in u.range(positions.start.max(n)..positions.end.max(n)) {
        out.set(p - n, evolve(v, p - n, p, s));
    }
    out
}

/// `||T^n u||^2` restricted to positions `>= from`, without materializing the orbit.
pub fn orbit_norm_squared_from(u: &ZVector, n: u64, from: u64, s: &Schedule) -> f64 {
    let mut total = 0.0;
    for (p, v) in u.range(from.max(n)..) {
        // only the exponent matters for a norm: read it off the step counts
        let mut cached: Option<((usize, usize), f64)> = None;
        for (j, e) in v.iter() {
            let lane_exp = match s.geometry.lane_of(j) {
                Some(lane) if j != s.geometry.plane_index(lane.0) => match cached {
                    Some((l, x)) if l == lane => x,
                    _ => {
                        let track = s.programs.track(lane.0, lane.1);
                        let steps = track.cumulative(p) - track.cumulative(p - n);
                        let x = steps as f64 / s.programs.denominator(lane.0) as f64;
                        cached = Some((lane, x));
                        x
                    }
                },
                _ => window_factor(j, p - n, p, s).exponent(),
            };
            let x = e.mantissa * (e.scale.exponent() + lane_exp).exp2();
            total += x * x;
        }
    }
    total
}

/// Coordinate `r` of `T^n u` alone.
pub fn orbit_coord(u: &ZVector, n: u64, r: u64, s: &Schedule) -> HVector {
    match u.get(r + n) {
        Some(v) => evolve(v, r, r + n, s),
        None => HVector::new(),
    }
}

/// Plane coefficients `(a, b)` on `span{e_0, e_{m_k}}` of `(T^n u)_0` at
/// `n = b_k^(1)` and `n = b_k^(2)`.
pub fn reset_trace(u: &ZVector, k: usize, s: &Schedule) -> Result<[(f64, f64); 2], SpaceError> {
    s.geometry.check_block(k)?;
    let bar = s.timeline.barrier(k);
    let plane = |n: u64| {
        let v = orbit_coord(u, n, 0, s);
        Ok::<_, SpaceError>((v.coefficient(0), v.coefficient(s.geometry.plane_index(k))))
    };
    Ok([plane(bar.first)?, plane(bar.second)?])
}

#[cfg(test)]
pub(crate) mod testutil {
    use rand::Rng;

    use crate::schedule::Schedule;
    use crate::space::{DyadicScalar, ZVector};

    /// Sparse `u` with positions below `max_pos` and internal indices up to
    /// a little past the block span.
    pub fn random_sparse(rng: &mut impl Rng, s: &Schedule, max_pos: u64, entries: usize) -> ZVector {
        let mut u = ZVector::new();
        let span = s.geometry.span_end() + 3;
        for _ in 0..entries {
            let p = rng.gen_range(0..max_pos);
            let j = rng.gen_range(0..span);
            let m: f64 = rng.gen_range(-1.0..1.0);
            let scale = DyadicScalar::new(rng.gen_range(-6..=6), rng.gen_range(1..=4));
            u.insert_entry(p, j, m, scale);
        }
        u
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::testutil::random_sparse;
    use super::*;
    use crate::schedule::{Params, Role, WeightDescriptor};

    fn small_schedule() -> Schedule {
        let mut p = Params::defaults(0.5, 2);
        p.grid_denominators = vec![2, 3];
        p.tau = vec![0.2, 0.2];
        p.eta = vec![0.04, 0.04];
        let lengths = BTreeMap::from([((1, 1), 4u64), ((1, 2), 3), ((2, 1), 5), ((2, 2), 2)]);
        let steps = BTreeMap::from([
            ((1, 1), vec![4, -2]),
            ((1, 2), vec![0, 3]),
            ((2, 1), vec![5, -5, 1]),
            ((2, 2), vec![-2, 2, 0]),
        ]);
        Schedule::assemble(p, &lengths, &steps).unwrap()
    }

    #[test]
    fn apply_t_examples() {
        let s = small_schedule();
        assert!(apply_t(&ZVector::new(), &s).is_empty());
        let off = s.geometry.span_end() + 7;
        let u = ZVector::single(1, HVector::basis(off, 0.75));
        assert_eq!(apply_t(&u, &s), ZVector::single(0, HVector::basis(off, 0.75)));
        let discarded = ZVector::single(0, HVector::basis(3, 1.0));
        assert!(apply_t(&discarded, &s).is_empty());
    }

    #[test]
    fn apply_t_norm_bound() {
        let s = small_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let end = s.timeline.end + 3;
        for _ in 0..1000 {
            let u = random_sparse(&mut rng, &s, end, 12);
            assert!(apply_t(&u, &s).norm() <= 2.0 * u.norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn closed_form_matches_iteration() {
        let s = small_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let end = s.timeline.end + 5;
        for _ in 0..10 {
            let u = random_sparse(&mut rng, &s, end + 40, 25);
            assert_eq!(orbit_at(&u, 0, &s), u);
            let mut it = u.clone();
            for n in 1..=end + 40 {
                it = apply_t(&it, &s);
                assert_eq!(orbit_at(&u, n, &s), it, "n = {n}");
            }
        }
    }

    #[test]
    fn range_helpers_agree_with_full_orbit() {
        let s = small_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let u = random_sparse(&mut rng, &s, 120, 20);
            let n = rng.gen_range(0..60u64);
            let cut = rng.gen_range(0..120u64);
            let full = orbit_at(&u, n, &s);
            let lo = orbit_of_range(&u, n, 0..cut, &s);
            let hi = orbit_of_range(&u, n, cut..u64::MAX, &s);
            assert_eq!(crate::space::z_add(&lo, &hi), full);
            let tail = orbit_norm_squared_from(&u, n, cut, &s);
            let want = full.restricted(cut.saturating_sub(n)..).norm_squared();
            assert!((tail - want).abs() <= 1e-12 * want.max(1e-300));
        }
    }

    #[test]
    fn semigroup_law() {
        let s = small_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let u = random_sparse(&mut rng, &s, 150, 20);
            let (m, n) = (rng.gen_range(0..=100), rng.gen_range(0..=100));
            assert_eq!(orbit_at(&u, m + n, &s), orbit_at(&orbit_at(&u, n, &s), m, &s));
        }
    }

    #[test]
    fn norm_growth_bounds() {
        let s = small_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let quiet = s.timeline.end;
        for _ in 0..200 {
            let u = random_sparse(&mut rng, &s, 80, 10);
            let n = rng.gen_range(0..40u64);
            assert!(orbit_at(&u, n, &s).norm() <= (n as f64).exp2() * u.norm() * (1.0 + 1e-12));
            // windows past the timeline are identity: entries shift unchanged
            let far = ZVector::single(quiet + 50 + n, u.coord(n));
            let moved = orbit_at(&far, n, &s);
            assert_eq!(moved.get(quiet + 50), far.get(quiet + 50 + n).filter(|v| !v.is_empty()));
        }
    }

    #[test]
    fn lane_and_barrier_factors_commute() {
        let s = small_schedule();
        for k in 1..=2 {
            let m = s.geometry.plane_index(k);
            let bar = s.timeline.barrier(k);
            let end = s.timeline.end;
            let lane = s.lane_product(k, 0, 0, end);
            let two_then_lane = DyadicScalar::TWO.mul(DyadicScalar::HALF).mul(lane);
            let lane_then_two = lane.mul(DyadicScalar::HALF).mul(DyadicScalar::TWO);
            assert_eq!(two_then_lane, lane_then_two);
            assert_eq!(window_factor(m, 0, end, &s), lane);
            assert_eq!(window_factor(m, 0, bar.first, &s), s.lane_product(k, 0, 0, bar.first).mul(DyadicScalar::TWO));
        }
    }

    #[test]
    fn reset_trace_examples() {
        let s = small_schedule();
        for k in 1..=2 {
            let bar = s.timeline.barrier(k);
            let m = s.geometry.plane_index(k);
            let mut plane = HVector::basis(0, 1.0);
            plane.insert(m, 1.0, DyadicScalar::ONE);
            let mut u = ZVector::new();
            u.set(bar.first, plane.clone());
            u.set(bar.second, plane);
            let [first, second] = reset_trace(&u, k, &s).unwrap();
            assert_eq!(first, (1.0, 2.0));
            assert_eq!(second, (1.0, 1.0));

            let mut only_e0 = ZVector::new();
            only_e0.set(bar.first, HVector::basis(0, 0.3));
            only_e0.set(bar.second, HVector::basis(0, 0.3));
            assert_eq!(reset_trace(&only_e0, k, &s).unwrap(), [(0.3, 0.0), (0.3, 0.0)]);
        }
        assert!(reset_trace(&ZVector::new(), 3, &s).is_err());
    }

    #[test]
    fn reset_trace_matches_dense_plane_products() {
        let s = small_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let u = random_sparse(&mut rng, &s, s.timeline.end + 2, 30);
            for k in 1..=2 {
                let m = s.geometry.plane_index(k);
                let bar = s.timeline.barrier(k);
                let got = reset_trace(&u, k, &s).unwrap();
                for (i, n) in [bar.first, bar.second].into_iter().enumerate() {
                    // dense 2x2 diagonal product over times 1..=n on (e_0, e_m)
                    let mut diag = [1.0f64, 1.0f64];
                    for l in 1..=n {
                        let f = match s.weight_action(l) {
                            WeightDescriptor::Identity => 1.0,
                            d => d.factor_for(m, &s.geometry).numeric().unwrap(),
                        };
                        diag[1] *= f;
                    }
                    let v = u.coord(n);
                    let want = (diag[0] * v.coefficient(0), diag[1] * v.coefficient(m));
                    assert!((got[i].0 - want.0).abs() <= 1e-12 * want.0.abs());
                    assert!((got[i].1 - want.1).abs() <= 1e-12 * want.1.abs().max(1e-300));
                }
                assert!(matches!(s.timeline.role_at(bar.first), Role::Barrier1(_)));
            }
        }
    }

    mod props {
        use proptest::prelude::*;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        use super::super::testutil::random_sparse;
        use super::super::*;
        use super::small_schedule;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn t_never_more_than_doubles(seed in any::<u64>(), entries in 1usize..20) {
                let s = small_schedule();
                let u = random_sparse(&mut ChaCha8Rng::seed_from_u64(seed), &s, s.timeline.end + 3, entries);
                prop_assert!(apply_t(&u, &s).norm() <= 2.0 * u.norm() * (1.0 + 1e-12));
            }

            #[test]
            fn orbits_compose(seed in any::<u64>(), m in 0u64..80, n in 0u64..80) {
                let s = small_schedule();
                let u = random_sparse(&mut ChaCha8Rng::seed_from_u64(seed), &s, 120, 15);
                prop_assert_eq!(orbit_at(&u, m + n, &s), orbit_at(&orbit_at(&u, n, &s), m, &s));
            }

            #[test]
            fn lane_products_split_at_any_time(a in 0u64..60, b in 0u64..60, c in 0u64..60, k in 1usize..=2, r in 0usize..3) {
                let s = small_schedule();
                prop_assume!(r < s.params.r(k));
                let mut t = [a, b, c];
                t.sort_unstable();
                let whole = s.lane_product(k, r, t[0], t[2]);
                let parts = s.lane_product(k, r, t[0], t[1]).mul(s.lane_product(k, r, t[1], t[2]));
                prop_assert_eq!(whole, parts);
            }
        }
    }
}
