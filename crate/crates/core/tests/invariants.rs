use proptest::prelude::*;

use sdaf_core::diagnostics::concentration_scan;
use sdaf_core::functional as fun;
use sdaf_core::target::winding_of;
use sdaf_core::{
    ActionConfig, FlatTorus2, HomotopyClass, MapField, SpinStructure, SurfaceDomain, Target, TargetManifold,
};

fn domain(n: usize, sx: i32, sy: i32) -> SurfaceDomain {
    SurfaceDomain::new(n, 1.0, SpinStructure::from_signs(sx, sy).unwrap()).unwrap()
}

fn sign() -> impl Strategy<Value = i32> {
    prop_oneof![Just(-1), Just(1)]
}

fn winding() -> impl Strategy<Value = [[i64; 2]; 2]> {
    prop::array::uniform2(prop::array::uniform2(-2i64..=2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn affine_maps_have_constant_density(a in winding(), off in prop::array::uniform2(0.0..1.0f64), alpha in 1.05..2.0f64) {
        let d = domain(8, 1, 1);
        let phi = MapField::affine_torus(&d, FlatTorus2::default(), a, off).unwrap();
        let frob: f64 = a.iter().flatten().map(|x| (x * x) as f64).sum();
        let expect = 0.5 * (1.0 + frob).powf(alpha);
        let got = fun::alpha_energy(&d, &phi, alpha);
        prop_assert!((got - expect).abs() <= 1e-12 * expect, "{got} vs {expect}");
        prop_assert_eq!(winding_of(&d, &phi).unwrap(), HomotopyClass::Winding(a));
    }

    #[test]
    fn alpha_energy_increases_with_alpha(seed in 0u64..1000, a1 in 1.0..2.0f64, a2 in 1.0..2.0f64) {
        let d = domain(8, -1, 1);
        let phi = MapField::smooth_sphere_map(&d, 0.7, seed).unwrap();
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        prop_assert!(fun::alpha_energy(&d, &phi, lo) <= fun::alpha_energy(&d, &phi, hi) + 1e-14);
    }

    #[test]
    fn spinor_projection_is_idempotent(seed in 0u64..1000, sx in sign(), sy in sign()) {
        let d = domain(6, sx, sy);
        let phi = MapField::smooth_sphere_map(&d, 0.8, seed).unwrap();
        let psi = fun::random_tangent_spinor(&d, &phi, seed + 1);
        prop_assert!(fun::tangency_violation(&d, &phi, &psi) < 1e-12);
        let again = fun::project_spinor(&d, &phi, &psi);
        prop_assert!(again.sub(&psi).max_abs() < 1e-12);
    }

    #[test]
    fn twisted_dirac_is_symmetric(seed in 0u64..1000, sx in sign(), sy in sign(), sphere in any::<bool>()) {
        let d = domain(6, sx, sy);
        let phi = if sphere {
            MapField::smooth_sphere_map(&d, 0.6, seed).unwrap()
        } else {
            MapField::smooth_torus_map(&d, FlatTorus2::default(), [[1, 0], [1, 1]], 0.2, seed).unwrap()
        };
        let a = fun::random_tangent_spinor(&d, &phi, seed + 7);
        let b = fun::random_tangent_spinor(&d, &phi, seed + 8);
        let lhs = a.inner(&d, &fun::twisted_dirac(&d, &phi, &b).unwrap());
        let rhs = fun::twisted_dirac(&d, &phi, &a).unwrap().inner(&d, &b);
        prop_assert!((lhs - rhs).norm() < 1e-11 * (1.0 + lhs.norm()));
    }

    #[test]
    fn retraction_stays_on_sphere(seed in 0u64..1000, t in -2.0..2.0f64) {
        let d = domain(6, 1, 1);
        let phi = MapField::smooth_sphere_map(&d, 0.5, seed).unwrap();
        let v = fun::random_tangent_field(&d, &phi, seed + 3);
        for moved in [phi.retract(&d, &v, t).unwrap(), phi.exp(&d, &v, t).unwrap()] {
            for i in 0..d.vertex_count() {
                prop_assert!(moved.target.manifold_violation(moved.point(i)) < 1e-12);
            }
        }
    }

    #[test]
    fn concentration_flags_shrink_as_threshold_grows(seed in 0u64..1000, e1 in 0.01..5.0f64, e2 in 0.01..5.0f64) {
        let d = domain(16, 1, 1);
        let phi = MapField::smooth_sphere_map(&d, 0.9, seed).unwrap();
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let scan = concentration_scan(&d, &phi, 0.2, lo).unwrap();
        prop_assert!(scan.flagged_at(hi) <= scan.flagged_at(lo));
        prop_assert_eq!(scan.flagged, scan.flagged_at(lo));
        prop_assert!(scan.energies.iter().all(|e| *e >= 0.0 && *e <= scan.total + 1e-12));
    }

    #[test]
    fn action_config_rejects_alpha_outside_range(alpha in prop_oneof![0.0..=1.0f64, 2.0001..5.0f64]) {
        prop_assert!(ActionConfig::with_exponent(alpha, 0.1, 3.0).is_err());
    }

    #[test]
    fn spin_structure_signs_round_trip(sx in sign(), sy in sign()) {
        prop_assert_eq!(SpinStructure::from_signs(sx, sy).unwrap().signs(), [sx, sy]);
    }
}

#[test]
fn spin_structure_rejects_other_signs() {
    assert!(SpinStructure::from_signs(0, 1).is_err());
    assert!(SpinStructure::from_signs(1, 2).is_err());
}

#[test]
fn constant_maps_carry_only_the_volume_term() {
    let d = domain(8, 1, 1);
    let phi = MapField::constant(&d, Target::sphere(), &[0.0, 0.0, 1.0]).unwrap();
    assert_eq!(fun::dirichlet_energy(&d, &phi), 0.0);
    assert!((fun::alpha_energy(&d, &phi, 1.5) - 0.5).abs() < 1e-14);
}
