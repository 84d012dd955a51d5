use std::collections::HashSet;

use giqs::lattice::enumerate_lattice;
use giqs::models::LieGroupParams;
use giqs::partition::*;
use giqs::{ActionPoint, GiqsModel};
use proptest::prelude::*;

fn params(delta: f64, mu: f64) -> ResonanceParams {
    ResonanceParams { delta, mu, r: 8.0 }
}

/// Every resonant `k` of `a`, found by scanning the full cube.
fn brute_resonant(model: &GiqsModel, a: &ActionPoint, p: &ResonanceParams) -> Vec<Vec<i64>> {
    let d = a.dim();
    let m = p.k_radius(a.norm).floor() as i64;
    let mut out = Vec::new();
    let mut k = vec![-m; d];
    loop {
        if k.iter().any(|&x| x != 0) && is_resonant(model, a, &k, p).unwrap() {
            out.push(k.clone());
        }
        let mut i = 0;
        while i < d && k[i] == m {
            k[i] = -m;
            i += 1;
        }
        if i == d {
            return out;
        }
        k[i] += 1;
    }
}

fn check_partition(model: &GiqsModel, r_min: f64, r_max: f64, p: &ResonanceParams) {
    let rep = build_partition(model, r_min, r_max, p, &PartitionChecks::default()).unwrap();
    let pts: Vec<ActionPoint> = enumerate_lattice(model, r_min, r_max)
        .unwrap()
        .into_iter()
        .filter(|a| a.norm >= model.eval_radius())
        .collect();
    assert_eq!(rep.n_points, pts.len());

    // exact cover
    let mut seen = HashSet::new();
    for b in &rep.blocks {
        for m in &b.members {
            assert!(seen.insert(m.clone()), "{m:?} in two blocks");
        }
    }
    assert_eq!(seen.len(), pts.len());
    for a in &pts {
        assert!(seen.contains(&a.index));
    }

    // resonant vectors stay in the module and their translates in the block
    let index_set: HashSet<&Vec<i64>> = pts.iter().map(|a| &a.index).collect();
    for a in &pts {
        let bid = rep.block_of_index(&a.index).unwrap();
        let blk = &rep.blocks[bid];
        for k in brute_resonant(model, a, p) {
            assert!(blk.module.contains(&k), "{k:?} not in module of {:?}", a.index);
            let b: Vec<i64> = a.index.iter().zip(&k).map(|(x, y)| x + y).collect();
            if index_set.contains(&b) {
                assert_eq!(rep.block_of_index(&b), Some(bid));
            }
        }
        if blk.module.rank == 0 {
            assert_eq!(blk.members.len(), 1);
            assert_eq!(rep.in_omega(&a.index), Some(true));
        }
    }

    // dyadic constant
    let dy = rep
        .blocks
        .iter()
        .filter(|b| !b.boundary)
        .map(|b| b.dyadic_ratio())
        .fold(1.0f64, f64::max);
    assert_eq!(dy, rep.dyadic_constant);

    // brute-force separation over all cross-block pairs of non-boundary blocks
    let elig: Vec<&ActionPoint> = pts
        .iter()
        .filter(|a| !rep.blocks[rep.block_of_index(&a.index).unwrap()].boundary)
        .collect();
    let mut best = f64::INFINITY;
    let mut below = 0usize;
    for (i, a) in elig.iter().enumerate() {
        for b in &elig[i + 1..] {
            if rep.block_of_index(&a.index) == rep.block_of_index(&b.index) {
                continue;
            }
            let dist = a.coords.iter().zip(&b.coords).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let dw = (model.omega(a).unwrap() - model.omega(b).unwrap()).abs();
            let r = (dist + dw) / (a.norm.powf(p.mu) + b.norm.powf(p.mu));
            best = best.min(r);
            if r < rep.checks.separation_floor {
                below += 1;
            }
        }
    }
    assert!(best.is_finite(), "no interior cross-block pairs");
    assert!((best - rep.separation_constant).abs() <= 1e-12 * best, "{best} vs {}", rep.separation_constant);
    assert_eq!(below, rep.violations.separation_count);
}

#[test]
fn flat_torus_partition_oracles() {
    let m = GiqsModel::flat_torus(2);
    check_partition(&m, 8.0, 24.0, &ResonanceParams::defaults_for(&m));
    check_partition(&m, 8.0, 24.0, &params(0.3, 0.15));
}

#[test]
fn three_torus_partition_oracles() {
    check_partition(&GiqsModel::flat_torus(3), 8.0, 12.0, &params(0.3, 0.15));
}

#[test]
fn su3_partition_oracles() {
    check_partition(&GiqsModel::lie_group(LieGroupParams::su3()), 8.0, 20.0, &params(0.5, 0.3));
}

#[test]
fn resonance_boundary_cases() {
    let m = GiqsModel::flat_torus(2);
    let p = ResonanceParams::defaults_for(&m);
    let a = ActionPoint::new(vec![10, 0], m.kappa());
    // w = (20, 0): k = (0, 1) is orthogonal
    assert!(is_resonant(&m, &a, &[0, 1], &p).unwrap());
    assert!(!is_resonant(&m, &a, &[1, 0], &p).unwrap());
    assert!(is_resonant(&m, &a, &[0, 0], &p).is_err());
    let small = ActionPoint::new(vec![3, 0], m.kappa());
    assert!(!is_resonant(&m, &small, &[0, 1], &p).unwrap());
    assert!(resonance_module(&m, &small, &p).is_err());
    let module = resonance_module(&m, &a, &p).unwrap();
    assert_eq!(module.rank, 1);
    assert_eq!(module.basis, vec![vec![0, 1]]);
    assert!(params(1.5, 0.25).validate(&m).is_err());
}

#[test]
fn half_ball_has_one_vector_per_sign() {
    for d in 1..=3 {
        let hb = half_ball(d, 3.0);
        let set: HashSet<Vec<i64>> = hb.iter().cloned().collect();
        assert_eq!(set.len(), hb.len());
        for k in &hb {
            let neg: Vec<i64> = k.iter().map(|x| -x).collect();
            assert!(!set.contains(&neg));
        }
        // full ball minus the origin, halved
        let full = enumerate_lattice(&GiqsModel::flat_torus(d), 0.0, 3.0).unwrap().len();
        assert_eq!(2 * hb.len() + 1, full);
    }
}

#[test]
fn clusters_cover_the_spectrum() {
    for model in [GiqsModel::flat_torus(2), GiqsModel::sphere(2).unwrap(), GiqsModel::lie_group(LieGroupParams::su2())] {
        let c = build_clusters(&model, 2000.0).unwrap();
        assert!(c.coverage_ok);
        for &v in &c.values {
            let i = c.locate(v).unwrap();
            assert!(c.alpha[i] <= v && v <= c.beta[i]);
        }
        for n in 0..c.len() {
            assert!(c.alpha[n] <= c.beta[n]);
            let w = c.beta[n] - c.alpha[n];
            assert_eq!(w > 2.0, c.width_failures.contains(&(n + 1)));
            if n + 1 < c.len() && !c.gap_failures.contains(&(n + 1)) {
                assert!(c.alpha[n + 1] - c.beta[n] >= c.gap_bound(n + 1));
            }
        }
    }
}

#[test]
fn melnikov_counts_match_brute_force() {
    let m = GiqsModel::flat_torus(1);
    let (cutoff, gamma, tau) = (6.0, 1.0, 1.0);
    let cl = build_clusters(&m, 2.0 * 3.0 * 36.0 + 1.0).unwrap();
    let pts = enumerate_lattice(&m, 0.0, cutoff).unwrap();
    let om: Vec<i64> = pts.iter().map(|a| a.index[0] * a.index[0]).collect();
    let nrm = |i: usize| pts[i].norm.max(1.0);
    let n = pts.len();

    // r = 2
    let mut count = 0;
    for i in 0..n {
        for j in 0..n {
            // j = 1: one on each side; same-cluster pairs are exempt
            if cl.locate(om[i] as f64) == cl.locate(om[j] as f64) {
                continue;
            }
            let div = (om[i] - om[j]).abs() as f64;
            count += (div < gamma / nrm(i).max(nrm(j)).powf(tau)) as u64;
        }
        for j in i..n {
            let div = (om[i] + om[j]) as f64;
            count += (div < gamma / nrm(i).max(nrm(j)).powf(tau)) as u64;
        }
    }
    let rep = melnikov_scan(&m, &cl, 2, cutoff, gamma, tau, 10_000).unwrap();
    assert_eq!(rep.violation_count, count);

    // r = 3 has no exemptions
    let mut count3 = 0;
    let mut scanned = 0u64;
    for i in 0..n {
        for j in 0..n {
            for k in j..n {
                let big = nrm(i).max(nrm(j)).max(nrm(k));
                let thr = gamma / big.powf(tau);
                // j = 1: i | j k, j = 2 handled by the multiset loop below
                scanned += 1;
                count3 += (((om[i] - om[j] - om[k]).abs() as f64) < thr) as u64;
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            for k in 0..n {
                let big = nrm(i).max(nrm(j)).max(nrm(k));
                scanned += 1;
                count3 += (((om[i] + om[j] - om[k]).abs() as f64) < gamma / big.powf(tau)) as u64;
            }
            for k in j..n {
                let big = nrm(i).max(nrm(j)).max(nrm(k));
                scanned += 1;
                count3 += (((om[i] + om[j] + om[k]) as f64) < gamma / big.powf(tau)) as u64;
            }
        }
    }
    let rep3 = melnikov_scan(&m, &cl, 3, cutoff, gamma, tau, 10_000).unwrap();
    assert_eq!(rep3.tuples_scanned, scanned);
    assert_eq!(rep3.violation_count, count3);
    assert!(rep3.exact);
    for v in &rep3.violations {
        assert_eq!(recompute_divisor(&m, &v.tuple, v.j).unwrap(), v.divisor);
        assert!(v.divisor < v.threshold);
    }
}

#[test]
fn sphere_melnikov_divisors_recompute_exactly() {
    let m = GiqsModel::sphere(2).unwrap();
    let cl = build_clusters(&m, 400.0).unwrap();
    let rep = melnikov_scan(&m, &cl, 4, 8.0, 1.0, 1.0, 500).unwrap();
    assert!(rep.exact);
    for v in &rep.violations {
        assert_eq!(recompute_divisor(&m, &v.tuple, v.j).unwrap(), v.divisor);
        let om: Vec<f64> = v
            .tuple
            .iter()
            .map(|i| m.omega(&ActionPoint::new(i.clone(), m.kappa())).unwrap())
            .collect();
        if v.j * 2 == 4 {
            assert_eq!(classify_tuple(&cl, &om), TupleClass::Nondangerous);
        }
    }
    assert!(melnikov_scan(&m, &cl, 1, 8.0, 1.0, 1.0, 10).is_err());
}

fn small_vec(d: usize) -> impl Strategy<Value = Vec<i64>> {
    prop::collection::vec(-4i64..=4, d)
}

proptest! {
    #[test]
    fn saturated_module_contains_its_generators(gens in prop::collection::vec(small_vec(3), 0..3), c in -3i64..=3) {
        let m = ResonanceModule::saturate(3, &gens);
        prop_assert!(m.rank <= 3);
        for g in &gens {
            prop_assert!(m.contains(g));
            let scaled: Vec<i64> = g.iter().map(|x| x * c).collect();
            prop_assert!(m.contains(&scaled));
        }
        // saturation: k ∈ M whenever 2k ∈ M
        for b in &m.basis {
            let twice: Vec<i64> = b.iter().map(|x| 2 * x).collect();
            prop_assert!(m.contains(&twice) && m.contains(b));
        }
        // canonical form does not depend on generator order
        let mut rev = gens.clone();
        rev.reverse();
        prop_assert_eq!(ResonanceModule::saturate(3, &rev), m);
    }

    #[test]
    fn saturation_adds_rational_multiples(g in small_vec(2), f in 2i64..5) {
        prop_assume!(g.iter().any(|&x| x != 0));
        let scaled: Vec<i64> = g.iter().map(|x| x * f).collect();
        let m = ResonanceModule::saturate(2, &[scaled]);
        prop_assert!(m.contains(&g));
        prop_assert_eq!(m.rank, 1);
    }

    #[test]
    fn resonance_is_sign_symmetric(x in -30i64..30, y in -30i64..30, k in small_vec(2)) {
        prop_assume!(k.iter().any(|&v| v != 0));
        let m = GiqsModel::flat_torus(2);
        let p = ResonanceParams::defaults_for(&m);
        let a = ActionPoint::new(vec![x, y], m.kappa());
        let neg: Vec<i64> = k.iter().map(|v| -v).collect();
        prop_assert_eq!(is_resonant(&m, &a, &k, &p).unwrap(), is_resonant(&m, &a, &neg, &p).unwrap());
    }

    #[test]
    fn clustering_invariants(mut vals in prop::collection::vec(0.0f64..200.0, 1..80)) {
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let c = clusters_from_values(vals.clone(), 1.0, 200.0);
        prop_assert!(c.coverage_ok);
        prop_assert_eq!(c.n_values, vals.len());
        for n in 0..c.len().saturating_sub(1) {
            let gap = c.alpha[n + 1] - c.beta[n];
            prop_assert!(gap >= c.gap_bound(n + 1) || c.gap_failures.contains(&(n + 1)));
        }
    }
}
