use giqs::lattice::enumerate_lattice;
use giqs::models::anharmonic::{invert_actions, radial_action, regularized_action_a1, AnharmonicParams};
use giqs::models::{LieGroupParams, QuadraticForm};
use giqs::{ActionPoint, GiqsError, GiqsModel};
use proptest::prelude::*;

#[test]
fn harmonic_radial_action_on_a_grid() {
    let p = AnharmonicParams::new(1);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let e = 0.5 + 0.5 * i as f64;
        for j in 0..20 {
            // Mz across (-E, E), endpoints excluded
            let mz = e * (-0.95 + 1.9 * j as f64 / 19.0);
            let ar = radial_action(&p, e, mz).unwrap();
            worst = worst.max((ar - (e - mz.abs()) / 2.0).abs());
        }
    }
    assert!(worst < 1e-8, "{worst:e}");
}

#[test]
fn harmonic_energy_is_linear_in_the_actions() {
    // E = 2 a1 + a2 once a1 is regularized across Mz = 0
    let p = AnharmonicParams::new(1);
    for (a1, a2) in [(1.0, 0.5), (3.0, -2.0), (2.5, 2.5), (7.0, 0.0)] {
        let e = invert_actions(&p, a1, a2).unwrap();
        assert!((e - (2.0 * a1 + a2)).abs() < 1e-10, "({a1},{a2}) -> {e}");
        assert!((regularized_action_a1(&p, e, a2).unwrap() - a1).abs() < 1e-10);
    }
}

#[test]
fn quartic_energy_is_homogeneous() {
    let m = GiqsModel::anharmonic(AnharmonicParams::new(2)).unwrap();
    let deg = m.degree();
    assert!((deg - 4.0 / 3.0).abs() < 1e-15);
    for a in [[3.0, 1.0], [5.0, -2.0], [4.0, 0.0], [2.0, 6.0]] {
        let h = m.h_value(&a).unwrap();
        for t in [1.5, 2.0, 3.7] {
            let ht = m.h_value(&[t * a[0], t * a[1]]).unwrap();
            let rel = (ht - t.powf(deg) * h).abs() / ht;
            assert!(rel < 1e-6, "{a:?} t={t}: {rel:e}");
        }
    }
}

#[test]
fn anharmonic_domain_errors() {
    let m = GiqsModel::anharmonic(AnharmonicParams::new(2)).unwrap();
    assert!(matches!(m.h_value(&[0.3, 0.2]), Err(GiqsError::OutOfDomain { .. })));
    assert!(matches!(m.h_value(&[1.0, -3.0]), Err(GiqsError::OutOfCone(_))));
    assert!(GiqsModel::anharmonic(AnharmonicParams::new(0)).is_err());
}

#[test]
fn torus_eigenvalues_are_squared_norms() {
    let m = GiqsModel::flat_torus(3);
    for a in enumerate_lattice(&m, 0.0, 4.0).unwrap() {
        let n2: i64 = a.index.iter().map(|x| x * x).sum();
        assert_eq!(m.omega(&a).unwrap(), n2 as f64);
        assert_eq!(m.multiplicity(&a), 1);
        assert!((m.k0_weight(&a) - (1.0 + n2 as f64).sqrt()).abs() < 1e-14);
    }
}

#[test]
fn skew_torus_uses_the_metric() {
    let q = QuadraticForm::from_f64(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
    let m = GiqsModel::torus(q);
    let a = ActionPoint::new(vec![1, -2], m.kappa());
    // 2·1 + 2·0.5·(1)(-2) + 1·4
    assert_eq!(m.omega(&a).unwrap(), 4.0);
    assert_eq!(m.gradient(&a.coords).unwrap(), vec![2.0, -3.0]);
    assert!(QuadraticForm::from_f64(2, vec![1.0, 2.0, 2.0, 1.0]).is_err());
}

#[test]
fn sphere_spectrum_matches_harmonics() {
    for n in 2..=4u32 {
        let m = GiqsModel::sphere(n).unwrap();
        let shift = (n as f64 - 1.0) / 2.0;
        for j in 0..12i64 {
            let a = ActionPoint::new(vec![j], m.kappa());
            let lap = (j * (j + n as i64 - 1)) as f64;
            assert!((m.omega(&a).unwrap() - shift * shift - lap).abs() < 1e-12);
            let mult = m.multiplicity(&a);
            let expected = match n {
                2 => 2 * j + 1,
                3 => (j + 1) * (j + 1),
                _ => (2 * j + 3) * (j + 2) * (j + 1) / 6,
            };
            assert_eq!(mult as i64, expected, "n={n} j={j}");
            assert!((m.k0_weight(&a) - (1.0 + lap).sqrt()).abs() < 1e-12);
        }
    }
    assert!(GiqsModel::sphere(1).is_err());
}

#[test]
fn su2_casimir() {
    let m = GiqsModel::lie_group(LieGroupParams::su2());
    for n in 1..30i64 {
        let a = ActionPoint::new(vec![n], m.kappa());
        let j = (n - 1) as f64 / 2.0;
        // ω = n²/4 = j(j+1) + 1/4
        assert!((m.omega(&a).unwrap() - (j * (j + 1.0) + 0.25)).abs() < 1e-12);
        assert!(m.omega_exact(&a).is_some());
    }
    let pts = enumerate_lattice(&m, 0.0, 10.0).unwrap();
    assert!(pts.iter().all(|a| a.index[0] >= 1));
}

#[test]
fn su3_fundamental_representations() {
    let m = GiqsModel::lie_group(LieGroupParams::su3());
    // shifted highest weights (1,1) is the trivial rep, (2,1) and (1,2) the fundamental ones
    let trivial = m.omega(&ActionPoint::new(vec![1, 1], m.kappa())).unwrap();
    let f1 = m.omega(&ActionPoint::new(vec![2, 1], m.kappa())).unwrap();
    let f2 = m.omega(&ActionPoint::new(vec![1, 2], m.kappa())).unwrap();
    assert!((f1 - f2).abs() < 1e-14);
    assert!(f1 > trivial);
    let w = m.k0_weight(&ActionPoint::new(vec![1, 1], m.kappa()));
    assert!((w - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn torus_gradient_matches_finite_differences(x in -20.0f64..20.0, y in -20.0f64..20.0) {
        let q = QuadraticForm::from_f64(2, vec![1.5, 0.25, 0.25, 0.75]).unwrap();
        let m = GiqsModel::torus(q);
        let g = m.gradient(&[x, y]).unwrap();
        let fd = m.fd_gradient(&[x, y]).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn quadratic_models_are_two_homogeneous(x in 1.0f64..10.0, y in 1.0f64..10.0, t in 0.5f64..4.0) {
        let m = GiqsModel::lie_group(LieGroupParams::su3());
        let h = m.h_value(&[x, y]).unwrap();
        let ht = m.h_value(&[t * x, t * y]).unwrap();
        prop_assert!((ht - t * t * h).abs() < 1e-10 * ht);
    }

    #[test]
    fn inversion_round_trips(e in 1.0f64..50.0, frac in -0.9f64..0.9) {
        let p = AnharmonicParams::new(3);
        let mz = frac * p.max_angular_momentum(e);
        let a1 = regularized_action_a1(&p, e, mz).unwrap();
        let back = invert_actions(&p, a1, mz).unwrap();
        prop_assert!((back - e).abs() < 1e-9 * e);
    }
}
