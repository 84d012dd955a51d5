use giqs::lattice::Cone;
use giqs::models::{AnharmonicParams, QuadraticForm};
use giqs::steepness::*;
use giqs::{GiqsError, GiqsModel};
use proptest::prelude::*;

fn skew_quadratic(d: usize) -> GiqsModel {
    let mut g = vec![0.0; d * d];
    for i in 0..d {
        g[i * d + i] = 1.0 + 0.5 * i as f64;
        if i + 1 < d {
            g[i * d + i + 1] = 0.2;
            g[(i + 1) * d + i] = 0.2;
        }
    }
    GiqsModel::torus(QuadraticForm::from_f64(d, g).unwrap())
}

#[test]
fn convex_quadratics_have_index_one() {
    for (d, s) in [(2, 1), (3, 1), (3, 2)] {
        let m = skew_quadratic(d);
        let est = steepness_profile(&m, &Annulus::default_for(&m), &SteepnessOptions::new(s, 4)).unwrap();
        let alpha = est.alpha.unwrap();
        assert_eq!(est.verdict, SteepVerdict::Steep);
        assert!((0.9..=1.1).contains(&alpha), "d={d} s={s}: {alpha}");
        assert!(est.fit_r2.unwrap() > 0.99);
        assert!(est.envelope.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn linear_and_degenerate_functions() {
    let lin = GiqsModel::custom("linear", 3, 1.0, Cone::Full, |a| a[0] + 2.0 * a[1] - a[2], None);
    let dom = Annulus::new(0.5, 1.0).unwrap();
    for s in [1, 2] {
        let est = steepness_profile(&lin, &dom, &SteepnessOptions::new(s, 1)).unwrap();
        assert_eq!(est.verdict, SteepVerdict::NotSteep);
        assert!(est.alpha.is_none());
    }
    let flat = GiqsModel::custom("flat", 2, 0.0, Cone::Full, |_| 3.0, None);
    assert!(matches!(
        steepness_profile(&flat, &dom, &SteepnessOptions::new(1, 1)),
        Err(GiqsError::VanishingGradient(_))
    ));
    assert!(steepness_profile(&lin, &dom, &SteepnessOptions::new(3, 1)).is_err());
    assert!(Annulus::new(1.0, 0.5).is_err());
}

#[test]
fn quartic_oscillator_passes_the_line_test() {
    let m = GiqsModel::anharmonic(AnharmonicParams::new(2)).unwrap();
    let dom = Annulus::default_for(&m);
    assert_eq!((dom.r_min, dom.r_max), (1.0, 2.0));
    let rep = niederman_check(&m, &dom, 12, 100, 1e-6, 9).unwrap();
    assert!(rep.pass);
    for line in &rep.lines {
        assert!(dom.contains(&m, &line.point));
        assert!(line.t_range.0 <= 0.0 && line.t_range.1 >= 0.0);
    }
}

#[test]
fn function_constant_along_a_direction_fails_the_line_test() {
    // h(a) = a1² restricted to vertical lines is constant
    let m = GiqsModel::custom("a1sq", 2, 2.0, Cone::Full, |a| a[0] * a[0], None);
    let dom = Annulus::new(0.5, 1.0).unwrap();
    let line = check_line(&m, &dom, &[0.7, 0.0], &[0.0, 1.0], 60, 1e-6).unwrap();
    assert!(!line.pass);
    // along a horizontal line the only critical point is a1 = 0, outside the annulus
    let line = check_line(&m, &dom, &[0.7, 0.0], &[1.0, 0.0], 60, 1e-6).unwrap();
    assert!(line.pass);
    assert!(line.segments.is_empty());
    assert!(matches!(
        check_line(&m, &dom, &[0.1, 0.0], &[1.0, 0.0], 60, 1e-6),
        Err(GiqsError::DegenerateLine)
    ));
}

#[test]
fn seeds_change_samples_not_verdicts() {
    let m = skew_quadratic(3);
    let dom = Annulus::default_for(&m);
    let a = steepness_profile(&m, &dom, &SteepnessOptions::new(1, 1)).unwrap();
    let b = steepness_profile(&m, &dom, &SteepnessOptions::new(1, 2)).unwrap();
    assert_ne!(a.envelope, b.envelope);
    assert_eq!(a.verdict, b.verdict);
    let a2 = steepness_profile(&m, &dom, &SteepnessOptions::new(1, 1)).unwrap();
    assert_eq!(a, a2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convex_quadratic_lines_have_isolated_critical_points(
        r in 0.55f64..0.95, th in 0.0f64..6.28, phi in 0.0f64..3.14
    ) {
        let m = skew_quadratic(2);
        let dom = Annulus::new(0.5, 1.0).unwrap();
        let x0 = [r * th.cos(), r * th.sin()];
        let v = [phi.cos(), phi.sin()];
        let line = check_line(&m, &dom, &x0, &v, 200, 1e-6).unwrap();
        prop_assert!(line.pass);
        prop_assert!(line.segments.iter().all(|s| s.len <= 2));
    }

    #[test]
    fn annulus_membership(x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let m = GiqsModel::flat_torus(2);
        let dom = Annulus::new(0.5, 1.0).unwrap();
        let n = (x * x + y * y).sqrt();
        prop_assert_eq!(dom.contains(&m, &[x, y]), (0.5..=1.0).contains(&n));
    }
}
