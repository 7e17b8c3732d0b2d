use std::collections::BTreeSet;

use proptest::prelude::*;

use dualpair::cz::{cz_audit, cz_decompose};
use dualpair::dyadic::{cube_geometry, DyadicCube, Lattice, ProductCube};
use dualpair::measure::{NuMeasure, RegionDescriptor};
use dualpair::params::{
    check_assumptions, derive_exponents, geometric_series_bound, DerivedExponents, ParameterSet,
};

mod common;
use common::Toy;

fn root() -> ProductCube {
    ProductCube::new(DyadicCube::new(0, &[0, 0]), DyadicCube::new(0, &[0, 0])).unwrap()
}

fn valid_params() -> impl Strategy<Value = ParameterSet> {
    (
        1usize..=3,
        2.0f64..4.0,
        0.0f64..1.0,
        0.05f64..0.95,
        0.0f64..1.0,
        0.0f64..1.0,
    )
        .prop_map(|(n, p, qf, s, tf, ef)| {
            let q = p * (1.0 + qf);
            let t = 0.05 + tf * (s - 0.05);
            let eps = 0.001 + ef * 0.5 * s;
            ParameterSet::new(n, p, q, s, t, eps)
        })
        .prop_filter("assumption gates", |ps| {
            check_assumptions(ps).all_required_pass()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cz_matches_brute_force(
        depth in 1u32..=2,
        values in prop::collection::vec(0.0f64..10.0, 256),
        masses in prop::collection::vec(0.2f64..3.0, 256),
        factor in 1.0f64..3.0,
    ) {
        let cells = 1usize << depth;
        let index = |c: [usize; 4]| ((c[0] * cells + c[1]) * cells + c[2]) * cells + c[3];
        let toy = Toy::new(cells, |c| values[index(c)] * masses[index(c)], |c| masses[index(c)]);
        let thr = toy.average(&root()) * factor;
        let got: BTreeSet<ProductCube> = cz_decompose(&toy.pyramid(), &root(), thr).unwrap().into_iter().collect();
        prop_assert_eq!(&got, &toy.brute_force(thr));
        let selected: Vec<ProductCube> = got.into_iter().collect();
        prop_assert!(cz_audit(&toy.pyramid(), &[root()], &selected, thr).holds());
    }

    #[test]
    fn cube_distances_are_symmetric(
        level in 1i32..6,
        z in prop::collection::vec(-8i64..8, 4),
        shift in prop::collection::vec(-0.5f64..0.5, 2),
    ) {
        let lat = Lattice { n: 2, x0: shift };
        let k1 = DyadicCube::new(level, &z[..2]);
        let k2 = DyadicCube::new(level, &z[2..]);
        let a = cube_geometry(&lat, &ProductCube::new(k1, k2).unwrap(), level - 1).unwrap();
        let b = cube_geometry(&lat, &ProductCube::new(k2, k1).unwrap(), level - 1).unwrap();
        prop_assert!((a.diagonal_distance - b.diagonal_distance).abs() < 1e-12);
        prop_assert!((a.projection_distance - b.projection_distance).abs() < 1e-12);
        prop_assert!((a.projection_distance - 2.0 * a.diagonal_distance).abs() < 1e-12);
        prop_assert!(a.diagonal_distance >= 0.0);
    }

    #[test]
    fn exponent_identities(ps in valid_params()) {
        let d = derive_exponents(&ps).unwrap();
        let tol = 1e-12;
        prop_assert!((d.gamma - d.eta / (ps.p - 1.0)).abs() < tol * d.gamma.max(1.0));
        prop_assert!((d.gamma - DerivedExponents::gamma_closed_form(&ps)).abs() < tol * d.gamma.max(1.0));
        prop_assert!((d.tau + ps.eps * ps.p / d.eta - ps.s - ps.eps).abs() < tol);
        prop_assert!(d.p_lower_s * d.theta < ps.p / (ps.p + 1.0));
        prop_assert!(d.eta > 1.0 && d.theta > 0.0);
    }

    #[test]
    fn geometric_series_within_bound(k in 1i64..40, r in 0.01f64..8.0) {
        let (lhs, rhs) = geometric_series_bound(k, r).unwrap();
        prop_assert!(lhs.is_finite() && lhs > 0.0 && lhs <= rhs);
    }

    #[test]
    fn doubling_is_exact(x in prop::collection::vec(-1.0f64..1.0, 2), small in 0.01f64..1.0, factor in 1.0f64..8.0) {
        let nu = NuMeasure::new(ParameterSet::config_s()).unwrap();
        let (ratio, exact) = nu.doubling_check(&x, factor * small, small).unwrap();
        prop_assert!((ratio / exact - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ball_mass_is_monotone(x in prop::collection::vec(-1.0f64..1.0, 2), r in 0.01f64..1.0) {
        let nu = NuMeasure::new(ParameterSet::config_s()).unwrap();
        let a = nu.mass(&RegionDescriptor::diagonal_ball(&x, r)).unwrap();
        let b = nu.mass(&RegionDescriptor::diagonal_ball(&x, 1.5 * r)).unwrap();
        prop_assert!(a > 0.0 && b > a);
    }
}
