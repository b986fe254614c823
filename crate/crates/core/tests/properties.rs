mod oracle;

use kefs_core::evaluation::{average_precision, harmonic_mean, mean_average_precision, recall_at_k};
use kefs_core::graphs::{build_hyperclass_adjacency, laplacian_normalize, normalize_and_quantize};
use kefs_core::msgf::{adain, attention_weights};
use kefs_core::rfdm::make_schedule;
use kefs_core::rng::{normal_matrix, seeded, uniform_matrix};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn adain_identities(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..9) {
        let mut rng = seeded(seed);
        let n = normal_matrix(&mut rng, rows, cols);
        let s = normal_matrix(&mut rng, rows, cols).scale(3.0);
        prop_assert!(adain(&n, &n).unwrap().max_abs_diff(&n) < 1e-12);
        let out = adain(&n, &s).unwrap();
        for r in 0..rows {
            let (mo, so) = row_stats(out.row(r));
            let (ms, ss) = row_stats(s.row(r));
            prop_assert!((mo - ms).abs() < 1e-6 && (so - ss).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), nq in 1usize..5, nk in 1usize..5, heads in 1usize..4) {
        let mut rng = seeded(seed);
        let q = normal_matrix(&mut rng, nq, heads * 3).scale(4.0);
        let k = normal_matrix(&mut rng, nk, heads * 3).scale(4.0);
        let ws = attention_weights(&q, &k, heads).unwrap();
        prop_assert_eq!(ws.len(), heads);
        for w in ws {
            for r in 0..nq {
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(w.row(r).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn schedule_is_monotone(steps in 1usize..200, lo in 1e-5f64..0.3, span in 1e-4f64..0.6) {
        let sched = make_schedule(steps, lo, lo + span).unwrap();
        for t in 1..=steps {
            prop_assert!(sched.gamma(t) > 0.0 && sched.gamma(t) < 1.0);
            prop_assert!(sched.beta_bar(t) < sched.beta_bar(t - 1));
            if t > 1 {
                prop_assert!(sched.gamma(t) > sched.gamma(t - 1));
            }
        }
        prop_assert!(sched.beta_bar(steps) > 0.0);
    }

    #[test]
    fn harmonic_mean_bounds(s in 0.0f64..100.0, u in 0.0f64..100.0) {
        let hm = harmonic_mean(s, u).unwrap();
        prop_assert!(hm <= (s + u) / 2.0 + 1e-12);
        prop_assert!(hm <= 2.0 * s.min(u) + 1e-12);
        prop_assert!(hm >= 0.0);
    }

    #[test]
    fn metrics_match_brute_force(seed in any::<u64>(), k in 1usize..6, thresh in prop::sample::select(vec![0.4, 0.5, 0.6])) {
        let (dets, gts) = oracle::instance(&mut seeded(seed));
        for c in 0..3 {
            let got = average_precision(&dets, &gts, c, thresh).unwrap();
            let want = oracle::ap(&dets, &gts, c, thresh);
            prop_assert_eq!(got.is_some(), want.is_some());
            if let (Some(g), Some(w)) = (got, want) {
                prop_assert!((g - w).abs() < 1e-10 && (0.0..=1.0).contains(&g));
            }
        }
        let m = mean_average_precision(&dets, &gts, &[0, 1, 2], thresh).unwrap();
        prop_assert!((m - oracle::map(&dets, &gts, &[0, 1, 2], thresh).unwrap()).abs() < 1e-10);
        let r = recall_at_k(&dets, &gts, k, thresh).unwrap();
        prop_assert!((r - oracle::recall(&dets, &gts, k, thresh)).abs() < 1e-10);
        prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&m));
    }

    #[test]
    fn duplicates_never_raise_recall(seed in any::<u64>(), k in 1usize..6, pick in any::<prop::sample::Index>()) {
        let (mut dets, gts) = oracle::instance(&mut seeded(seed));
        prop_assume!(!dets.is_empty());
        let before = recall_at_k(&dets, &gts, k, 0.5).unwrap();
        let copy = dets[pick.index(dets.len())].clone();
        dets.push(copy);
        prop_assert!(recall_at_k(&dets, &gts, k, 0.5).unwrap() <= before);
    }

    #[test]
    fn ap_ignores_input_order_with_distinct_scores(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let (mut dets, gts) = oracle::instance(&mut rng);
        for (i, d) in dets.iter_mut().enumerate() {
            d.score = rng.random::<f64>() + i as f64 * 1e-9;
        }
        let want: Vec<_> = (0..3).map(|c| average_precision(&dets, &gts, c, 0.5).unwrap()).collect();
        dets.shuffle(&mut rng);
        let got: Vec<_> = (0..3).map(|c| average_precision(&dets, &gts, c, 0.5).unwrap()).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn quantization_monotone_and_symmetric(seed in any::<u64>(), n in 1usize..8, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let mut rng = seeded(seed);
        let a = uniform_matrix(&mut rng, n, n, 0.0, 5.0);
        let sym = a.add(&a.transpose());
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let q_lo = normalize_and_quantize(&sym, lo).unwrap();
        let q_hi = normalize_and_quantize(&sym, hi).unwrap();
        prop_assert!(q_lo.is_symmetric());
        for (x, y) in q_lo.data().iter().zip(q_hi.data()) {
            prop_assert!(*x == 0.0 || *x == 1.0);
            prop_assert!(y <= x);
        }
        for i in 0..n {
            prop_assert_eq!(q_hi.get(i, i), 1.0);
        }
    }

    #[test]
    fn laplacian_spectral_radius(seed in any::<u64>(), n in 1usize..10, symmetric in any::<bool>()) {
        let mut rng = seeded(seed);
        let raw = uniform_matrix(&mut rng, n, n, 0.0, 1.0);
        let raw = if symmetric { raw.add(&raw.transpose()) } else { raw };
        let a = normalize_and_quantize(&raw, 0.4).unwrap();
        let norm = laplacian_normalize(&a).unwrap();
        prop_assert!(norm.is_finite());
        prop_assert!(oracle::gelfand_radius(&norm) <= 1.0 + 1e-9, "radius {}", oracle::gelfand_radius(&norm));
    }

    #[test]
    fn hyperclass_matches_lca(seed in any::<u64>(), leaves in 1usize..=32, levels in 1usize..5) {
        let mut rng = seeded(seed);
        let (tax, ids) = oracle::random_tree(&mut rng, leaves, levels);
        let a = build_hyperclass_adjacency(&tax, &ids).unwrap();
        for i in 0..ids.len() {
            for j in 0..ids.len() {
                prop_assert_eq!(a.get(i, j), oracle::lca_depth(tax.nodes(), ids[i], ids[j]) as f64);
            }
        }
        prop_assert!(a.is_symmetric());
    }
}
