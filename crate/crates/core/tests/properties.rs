use std::f64::consts::PI;

use proptest::prelude::*;

use ddfluor::averaging::{ac_average, Method, RunOptions};
use ddfluor::couplings::{all_couplings, chi_tensor, cross_couplings_closed, Axis};
use ddfluor::dynamics::{DensityMatrix, TimeGrid};
use ddfluor::ensembles::EnsembleDescriptor;
use ddfluor::io::{parse_config, serialize_config, RunConfig};
use ddfluor::model::{Geometry, PhysParams};

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn closed_form_matches_contraction(r in 0.02f64..3.0, theta in 0.0f64..=PI, phi in 0.0f64..(2.0 * PI)) {
        let p = PhysParams::default();
        let g = Geometry::new(r, theta, phi).unwrap();
        let (gc, oc) = cross_couplings_closed(&g, &p).unwrap();
        let (gt, ot) = chi_tensor(&g, p.k0).unwrap().coupling_pair(Axis::Y, Axis::X, &p);
        prop_assert!(close(gc, gt, 1e-9), "{gc} vs {gt}");
        prop_assert!(close(oc, ot, 1e-9), "{oc} vs {ot}");
    }

    #[test]
    fn cross_terms_flip_under_mirror(r in 0.02f64..3.0, theta in 0.0f64..=PI, phi in 0.0f64..PI) {
        let p = PhysParams::default();
        let a = all_couplings(&Geometry::new(r, theta, phi).unwrap(), &p, false).unwrap();
        let b = all_couplings(&Geometry::new(r, theta, PI - phi).unwrap(), &p, false).unwrap();
        prop_assert!(close(a.gamma_vc, -b.gamma_vc, 1e-12));
        prop_assert!(close(a.omega_vc, -b.omega_vc, 1e-12));
        prop_assert!(close(a.gamma1_dd, b.gamma1_dd, 1e-12));
        prop_assert!(close(a.omega2_dd, b.omega2_dd, 1e-12));
    }

    #[test]
    fn couplings_even_under_inversion(r in 0.02f64..3.0, theta in 0.0f64..=PI, phi in 0.0f64..PI) {
        let p = PhysParams::default();
        let a = all_couplings(&Geometry::new(r, theta, phi).unwrap(), &p, false).unwrap();
        let b = all_couplings(&Geometry::new(r, theta, phi + PI).unwrap(), &p, false).unwrap();
        for (x, y) in a.as_array().into_iter().zip(b.as_array()) {
            prop_assert!(close(x, y, 1e-12), "{x} vs {y}");
        }
    }

    #[test]
    fn config_round_trips(r in 0.05f64..2.0, phi in 0.0f64..PI, n in 2usize..200, t_end in 1.0f64..100.0) {
        let mut cfg = RunConfig::new(EnsembleDescriptor::ThetaCircle { r12: r, phi, n: 2 * n });
        cfg.method = Method::Ac;
        cfg.integrator.t_end = t_end;
        let back = parse_config(&serialize_config(&cfg)).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // Relabelling the members leaves the AC trajectory unchanged up to
    // summation order.
    #[test]
    fn ac_is_permutation_invariant(r in 0.1f64..0.5, theta in 0.2f64..1.4) {
        let p = PhysParams::default();
        let grid = TimeGrid::new(2.0, 0.05).unwrap();
        let rho0 = DensityMatrix::product(3, 3).unwrap();
        let opts = RunOptions::default();
        let d1 = EnsembleDescriptor::PhiCircle { r12: r, theta, n: 4 };
        let ens = d1.build().unwrap();
        let fwd = ac_average(&ens, &p, &rho0, &grid, &opts).unwrap().trajectory;

        let rev_geoms: Vec<_> = ens.members().iter().rev().map(|m| m.geometry).collect();
        let mut rev = vec![0.0; grid.len()];
        for g in &rev_geoms {
            let s = EnsembleDescriptor::Single { r12: g.r12(), theta: g.theta(), phi: g.phi() }.build().unwrap();
            let t = ac_average(&s, &p, &rho0, &grid, &opts).unwrap().trajectory;
            for (a, v) in rev.iter_mut().zip(&t.intensity) {
                *a += v / rev_geoms.len() as f64;
            }
        }
        for (a, b) in fwd.intensity.iter().zip(&rev) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // Weights are positive, so the average stays a valid intensity.
        prop_assert!(fwd.intensity.iter().all(|v| v.is_finite() && *v >= -1e-12));
    }
}
