use giqs::dynamics::*;
use giqs::linalg::eigh;
use giqs::partition::{build_partition, PartitionChecks, ResonanceParams};
use giqs::{GiqsError, GiqsModel};
use num_complex::Complex64 as C;
use proptest::prelude::*;

fn torus_basis(cutoff: f64) -> TruncatedBasis {
    TruncatedBasis::new(&GiqsModel::flat_torus(2), cutoff).unwrap()
}

fn mode(k: [i64; 2], re: f64, im: f64, profile: TimeProfile) -> FieldMode {
    FieldMode {
        k: k.to_vec(),
        re,
        im,
        profile,
    }
}

fn static_potential() -> TimeDependentPerturbation {
    TimeDependentPerturbation {
        kind: PerturbationKind::ConvolutionPotential {
            potential: vec![
                mode([1, 0], 0.4, 0.1, TimeProfile::constant(1.0)),
                mode([1, 1], 0.2, 0.0, TimeProfile::constant(1.0)),
            ],
        },
        order: 0.0,
        decay: 4.0,
        seed: 0,
    }
}

fn diff(a: &StateVector, b: &StateVector) -> f64 {
    a.coeffs
        .iter()
        .zip(&b.coeffs)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

fn final_state(tr: &Trajectory) -> StateVector {
    tr.checkpoints.last().unwrap().1.clone()
}

fn with_final(opts: &EvolveOptions, steps_hint: usize) -> EvolveOptions {
    EvolveOptions {
        record_every: steps_hint,
        checkpoint_every: Some(1),
        ..opts.clone()
    }
}

#[test]
fn static_potential_matches_eigendecomposition() {
    let b = torus_basis(5.7);
    assert!((95..=105).contains(&b.len()), "{}", b.len());
    let spec = static_potential();
    let v = assemble_perturbation(&b, &spec, 0.0).unwrap();
    let mut h = v.entries.clone();
    for i in 0..b.len() {
        h[(i, i)] += C::new(b.omega[i], 0.0);
    }
    let (vals, vecs) = eigh(&h).unwrap();
    let psi0 = localized_state(&b, 3.0, 5);
    let t = 2.0;
    // exact: U diag(e^{-iλt}) U^† ψ0
    let n = b.len();
    let mut exact = StateVector::zeros(n);
    for k in 0..n {
        let c: C = (0..n).map(|i| vecs[(i, k)].conj() * psi0.coeffs[i]).sum();
        let c = c * C::from_polar(1.0, -vals[k] * t);
        for i in 0..n {
            exact.coeffs[i] += vecs[(i, k)] * c;
        }
    }
    for dense_limit in [400, 0] {
        let opts = EvolveOptions {
            dt: 0.05,
            dense_limit,
            ..Default::default()
        };
        let tr = evolve(&b, &spec, &psi0, 0.0, t, &with_final(&opts, 40)).unwrap();
        let err = diff(&final_state(&tr), &exact);
        assert!(err < 1e-8, "dense_limit {dense_limit}: error {err:e}");
    }
}

#[test]
fn midpoint_rule_is_second_order() {
    let b = torus_basis(4.0);
    assert_eq!(b.len(), 49);
    let spec = TimeDependentPerturbation::quasiperiodic_magnetic(0.3, 0);
    let psi0 = localized_state(&b, 2.0, 9);
    let run = |dt: f64| {
        let opts = EvolveOptions {
            dt,
            ..Default::default()
        };
        let steps = (1.0 / dt).round() as usize;
        final_state(&evolve(&b, &spec, &psi0, 0.0, 1.0, &with_final(&opts, steps)).unwrap())
    };
    let reference = run(0.1 / 64.0);
    let e1 = diff(&run(0.1), &reference);
    let e2 = diff(&run(0.05), &reference);
    let ratio = e1 / e2;
    assert!((3.5..=4.5).contains(&ratio), "error ratio {ratio} ({e1:e}, {e2:e})");
}

#[test]
fn constant_potential_shift_is_a_global_phase() {
    let b = torus_basis(6.0);
    let base = TimeDependentPerturbation::quasiperiodic_magnetic(0.2, 0);
    let mut shifted = base.clone();
    if let PerturbationKind::MagneticTorus { potential, .. } = &mut shifted.kind {
        potential.push(mode(
            [0, 0],
            0.7,
            0.0,
            TimeProfile {
                terms: vec![(0.0, 1.0), (1.3, 0.5)],
            },
        ));
    }
    let psi0 = localized_state(&b, 3.0, 2);
    let opts = EvolveOptions {
        dt: 0.05,
        s_list: vec![0.0, 1.0, 2.0],
        ..Default::default()
    };
    let a = evolve(&b, &base, &psi0, 0.0, 3.0, &opts).unwrap();
    let c = evolve(&b, &shifted, &psi0, 0.0, 3.0, &opts).unwrap();
    for (sa, sc) in a.sobolev.iter().zip(&c.sobolev) {
        for (x, y) in sa.iter().zip(sc) {
            assert!((x - y).abs() <= 1e-12 * x.max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn backward_evolution_returns_the_initial_state() {
    let b = torus_basis(8.0);
    let spec = TimeDependentPerturbation::quasiperiodic_magnetic(0.3, 0);
    let psi0 = localized_state(&b, 3.0, 4);
    let opts = EvolveOptions {
        dt: 0.05,
        dense_limit: 0,
        ..Default::default()
    };
    let fwd = evolve(&b, &spec, &psi0, 0.0, 5.0, &with_final(&opts, 100)).unwrap();
    let mid = final_state(&fwd);
    let back = evolve(&b, &spec, &mid, 5.0, 0.0, &with_final(&opts, 100)).unwrap();
    let err = diff(&final_state(&back), &psi0);
    assert!(err < 1e-7, "{err:e}");
}

#[test]
fn magnetic_run_conserves_l2_over_a_hundred_time_units() {
    let b = torus_basis(12.0);
    let spec = TimeDependentPerturbation::quasiperiodic_magnetic(0.3, 0);
    let psi0 = localized_state(&b, 3.0, 8);
    let opts = EvolveOptions {
        dt: 0.1,
        record_every: 10,
        ..Default::default()
    };
    let tr = evolve(&b, &spec, &psi0, 0.0, 100.0, &opts).unwrap();
    assert_eq!(tr.method, "chebyshev");
    assert!(tr.max_l2_drift() < 1e-8, "{:e}", tr.max_l2_drift());
}

#[test]
fn free_and_commuting_flows_have_zero_growth() {
    let b = torus_basis(10.0);
    let psi0 = localized_state(&b, 4.0, 3);
    let opts = EvolveOptions {
        dt: 0.1,
        ..Default::default()
    };
    let free = evolve(&b, &TimeDependentPerturbation::free(), &psi0, 0.0, 50.0, &opts).unwrap();
    let g = growth_exponent(&free, 2.0, (1.0, 50.0)).unwrap();
    assert!(g.epsilon.abs() <= 1e-10, "{}", g.epsilon);

    let periodic = TimeDependentPerturbation {
        kind: PerturbationKind::ConvolutionPotential {
            potential: vec![mode(
                [0, 0],
                1.0,
                0.0,
                TimeProfile {
                    terms: vec![(2.0, 0.5)],
                },
            )],
        },
        order: 0.0,
        decay: 4.0,
        seed: 0,
    };
    let tr = evolve(&b, &periodic, &psi0, 0.0, 50.0, &opts).unwrap();
    assert_eq!(tr.method, "diagonal");
    let g = growth_exponent(&tr, 2.0, (1.0, 50.0)).unwrap();
    assert!(g.epsilon.abs() <= 1e-10, "{}", g.epsilon);
}

#[test]
fn contaminated_window_is_refused() {
    let b = torus_basis(6.0);
    let mut psi = StateVector::zeros(b.len());
    let i = b.position(&[6, 0]).unwrap();
    psi.coeffs[i] = C::new(1.0, 0.0);
    assert!(b.boundary[i]);
    let tr = evolve(&b, &TimeDependentPerturbation::free(), &psi, 0.0, 5.0, &Default::default()).unwrap();
    match growth_exponent(&tr, 2.0, (1.0, 5.0)) {
        Err(GiqsError::TruncationContaminated { max_tail, .. }) => assert_eq!(max_tail, 1.0),
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn tail_mass_of_uniform_state_counts_the_shell() {
    let b = torus_basis(10.0);
    let psi = StateVector {
        coeffs: vec![C::new(1.0, 0.0); b.len()],
    };
    let shell = b.boundary.iter().filter(|&&x| x).count();
    assert!(shell > 0);
    assert!((tail_mass(&b, &psi) - shell as f64 / b.len() as f64).abs() < 1e-15);
    let mut low = StateVector::zeros(b.len());
    low.coeffs[b.position(&[0, 0]).unwrap()] = C::new(1.0, 0.0);
    assert_eq!(tail_mass(&b, &low), 0.0);
}

#[test]
fn sobolev_norms_are_equivalent_to_l2_inside_a_block() {
    let m = GiqsModel::flat_torus(2);
    let b = TruncatedBasis::new(&m, 32.0).unwrap();
    let part = build_partition(&m, 8.0, 32.0, &ResonanceParams::defaults_for(&m), &PartitionChecks::default()).unwrap();
    let mut checked = 0;
    for (bi, blk) in part.blocks.iter().enumerate().filter(|(_, k)| !k.boundary && k.members.len() > 1) {
        let mut psi = StateVector::zeros(b.len());
        for (j, a) in blk.members.iter().enumerate() {
            psi.coeffs[b.position(a).unwrap()] = C::new(1.0 + (j % 3) as f64, (bi % 5) as f64);
        }
        let wmin = blk
            .members
            .iter()
            .map(|a| b.weights[b.position(a).unwrap()])
            .fold(f64::INFINITY, f64::min);
        let l2 = sobolev_norm(&b, &psi, 0.0);
        for s in [0.5, 1.0, 2.0] {
            let ratio = sobolev_norm(&b, &psi, s) / (wmin.powf(s) * l2);
            assert!(ratio >= 1.0 - 1e-12 && ratio <= blk.dyadic_ratio().powf(s) + 1e-12, "block {bi}: {ratio}");
        }
        checked += 1;
    }
    assert!(checked > 20);
}

#[test]
fn random_decay_envelope() {
    let b = torus_basis(9.0);
    let spec = TimeDependentPerturbation {
        kind: PerturbationKind::RandomDecay {
            amplitude: 1.0,
            profile: TimeProfile::constant(1.0),
        },
        order: 0.0,
        decay: 4.0,
        seed: 17,
    };
    let v = assemble_perturbation(&b, &spec, 0.0).unwrap();
    assert!(v.hermitian_defect() < 1e-14);
    // largest entry per integer distance against ⟨a-b⟩^{-4}
    let mut best = vec![(0.0f64, 0usize); 40];
    for i in 0..b.len() {
        for j in 0..b.len() {
            let (a, c) = (b.basis.point_of(i), b.basis.point_of(j));
            let dist = a.coords.iter().zip(&c.coords).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let k = dist.round() as usize;
            if (dist - k as f64).abs() > 1e-9 {
                continue;
            }
            let env = (1.0 + dist * dist).sqrt().powf(-4.0);
            let e = &mut best[k];
            e.0 = e.0.max(v.entries[(i, j)].norm() / env);
            e.1 += 1;
        }
    }
    let mut bins = 0;
    for (k, (ratio, count)) in best.iter().enumerate() {
        if *count >= 50 {
            assert!((0.5..=2.0).contains(ratio), "distance {k}: {ratio}");
            bins += 1;
        }
    }
    assert!(bins >= 5);
}

#[test]
fn trajectory_csv_has_one_row_per_record() {
    let b = torus_basis(4.0);
    let psi0 = localized_state(&b, 2.0, 1);
    let tr = evolve(&b, &TimeDependentPerturbation::free(), &psi0, 0.0, 1.0, &Default::default()).unwrap();
    let mut buf = Vec::new();
    tr.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,l2,s=1,s=2,tail");
    assert_eq!(lines.len(), tr.times.len() + 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sobolev_norms_grow_with_s(seed in 0u64..1000, r in 1.0f64..6.0) {
        let b = torus_basis(6.0);
        let psi = localized_state(&b, r, seed);
        let norms: Vec<f64> = [0.0, 0.5, 1.0, 2.0].iter().map(|&s| sobolev_norm(&b, &psi, s)).collect();
        prop_assert!((norms[0] - psi.l2_norm()).abs() < 1e-14);
        for w in norms.windows(2) {
            prop_assert!(w[1] >= w[0] * (1.0 - 1e-14));
        }
        let t = tail_mass(&b, &psi);
        prop_assert!((0.0..=1.0).contains(&t));
    }

    #[test]
    fn evolution_is_unitary(seed in 0u64..1000, amp in 0.0f64..0.5) {
        let b = torus_basis(4.0);
        let spec = TimeDependentPerturbation::quasiperiodic_magnetic(amp, seed);
        let psi0 = localized_state(&b, 3.0, seed);
        let tr = evolve(&b, &spec, &psi0, 0.0, 2.0, &EvolveOptions { dt: 0.1, ..Default::default() }).unwrap();
        prop_assert!(tr.max_l2_drift() < 1e-12);
    }

    #[test]
    fn assembled_perturbations_are_hermitian(t in -10.0f64..10.0, amp in 0.0f64..1.0) {
        let b = torus_basis(5.0);
        let v = assemble_perturbation(&b, &TimeDependentPerturbation::quasiperiodic_magnetic(amp, 0), t).unwrap();
        prop_assert!(v.hermitian_defect() < 1e-14);
    }
}
