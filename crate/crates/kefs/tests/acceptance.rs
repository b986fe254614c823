//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero when any
//! criterion fails. Run with `cargo test --release -p kefs --test acceptance`.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use kefs::bench::generate_synthetic_benchmark;
use kefs::config::PipelineConfig;
use kefs::pipeline::{execute, files, run_pipeline, PipelineInputs};
use kefs::KefsError;
use kefs_core::data::{RegionFeatureSet, Split};
use kefs_core::evaluation::{average_precision, harmonic_mean, mean_average_precision, recall_at_k};
use kefs_core::gradcheck::suite;
use kefs_core::graphs::{build_hyperclass_adjacency, laplacian_normalize, normalize_and_quantize, MultiSourceGraphSet};
use kefs_core::msgf::adain;
use kefs_core::params::ParamStore;
use kefs_core::rfdm::{forward_marginal, forward_step, make_schedule, posterior_mean, Denoiser, DenoiserConfig};
use kefs_core::rng::{normal_matrix, seeded, standard_normal, uniform_matrix};
use kefs_core::training::EpochLoss;
use kefs_core::Matrix;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn one_decimal(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn harmonic_mean_oracle() -> Outcome {
    for (s, u, want) in [(82.7, 2.7, 5.2), (82.8, 3.6, 6.9), (86.6, 47.6, 61.4)] {
        let got = harmonic_mean(s, u).map_err(|e| e.to_string())?;
        ensure(one_decimal(got) == want, || format!("HM({s}, {u}) = {got}, want {want}"))?;
    }
    Ok("3 reference values reproduced".into())
}

fn metric_oracle() -> Outcome {
    let mut compared = 0;
    for seed in 0..200u64 {
        let mut rng = seeded(1000 + seed);
        let (dets, gts) = oracle::instance(&mut rng);
        let thresh = [0.4, 0.5, 0.6][seed as usize % 3];
        let k = rng.random_range(1..=8);
        for c in 0..3 {
            let got = average_precision(&dets, &gts, c, thresh).map_err(|e| e.to_string())?;
            let want = oracle::ap(&dets, &gts, c, thresh);
            let same = match (got, want) {
                (Some(g), Some(w)) => (g - w).abs() <= 1e-10,
                (None, None) => true,
                _ => false,
            };
            ensure(same, || format!("instance {seed} class {c}: AP {got:?} vs {want:?}"))?;
            compared += 1;
        }
        let got = mean_average_precision(&dets, &gts, &[0, 1, 2], thresh).ok();
        let want = oracle::map(&dets, &gts, &[0, 1, 2], thresh);
        let same = match (got, want) {
            (Some(g), Some(w)) => (g - w).abs() <= 1e-10,
            (None, None) => true,
            _ => false,
        };
        ensure(same, || format!("instance {seed}: mAP {got:?} vs {want:?}"))?;
        if !gts.is_empty() {
            let got = recall_at_k(&dets, &gts, k, thresh).map_err(|e| e.to_string())?;
            let want = oracle::recall(&dets, &gts, k, thresh);
            ensure((got - want).abs() <= 1e-10, || format!("instance {seed}: recall@{k} {got} vs {want}"))?;
        }
        compared += 2;
    }
    Ok(format!("{compared} metric values on 200 instances"))
}

fn gradient_suite() -> Outcome {
    let mut worst = (0.0, "");
    let mut entries = 0;
    for (name, check) in suite::all() {
        ensure(check.max_rel_error < suite::TOLERANCE, || {
            format!(
                "{name}: {} at {}[{}] (analytic {}, numeric {})",
                check.max_rel_error, check.worst_param, check.worst_index, check.analytic, check.numeric
            )
        })?;
        entries += check.checked;
        if check.max_rel_error >= worst.0 {
            worst = (check.max_rel_error, name);
        }
    }
    Ok(format!("{entries} entries, worst {:.2e} in {}", worst.0, worst.1))
}

fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Matrix) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let cov = Matrix::from_fn(d, d, |i, j| {
        samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / (n - 1.0)
    });
    (mean, cov)
}

fn diffusion_consistency() -> Outcome {
    const A: usize = 8;
    const T: usize = 10;
    const DRAWS: usize = 10_000;
    let s = &PipelineConfig::desk().train.schedule;
    let sched = make_schedule(T, s.gamma_1, s.gamma_t).map_err(|e| e.to_string())?;
    let mut rng = seeded(21);
    let h0: Vec<f64> = (0..A).map(|i| (i as f64 - 3.5) * 0.4).collect();
    let noise = |rng: &mut _| (0..A).map(|_| standard_normal(rng)).collect::<Vec<f64>>();
    let iterated: Vec<Vec<f64>> = (0..DRAWS)
        .map(|_| (1..=T).fold(h0.clone(), |h, t| forward_step(&h, sched.gamma(t), &noise(&mut rng))))
        .collect();
    let marginal: Vec<Vec<f64>> = (0..DRAWS)
        .map(|_| forward_marginal(&h0, T, &sched, &noise(&mut rng)).unwrap())
        .collect();
    let ((ma, ca), (mb, cb)) = (moments(&iterated), moments(&marginal));
    let n = DRAWS as f64;
    for i in 0..A {
        let se = ((ca.get(i, i) + cb.get(i, i)) / n).sqrt();
        ensure((ma[i] - mb[i]).abs() < 3.0 * se, || format!("mean {i}: {} vs {}", ma[i], mb[i]))?;
        for j in 0..A {
            let var = |c: &Matrix| (c.get(i, i) * c.get(j, j) + c.get(i, j).powi(2)) / n;
            let se = (var(&ca) + var(&cb)).sqrt();
            ensure((ca.get(i, j) - cb.get(i, j)).abs() < 3.0 * se, || {
                format!("cov {i},{j}: {} vs {}", ca.get(i, j), cb.get(i, j))
            })?;
        }
    }

    // scalar oracles
    let long = make_schedule(100, 8.5e-4, 1.2e-2).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for t in [1, 2, 50, 100] {
        let h = noise(&mut rng);
        let z = noise(&mut rng);
        let mu = posterior_mean(&h, t, &z, &long).map_err(|e| e.to_string())?;
        let g = 8.5e-4 + (1.2e-2 - 8.5e-4) * (t - 1) as f64 / 99.0;
        let bb: f64 = (1..=t).map(|s| 1.0 - (8.5e-4 + (1.2e-2 - 8.5e-4) * (s - 1) as f64 / 99.0)).product();
        for i in 0..A {
            let want = (h[i] - g / (1.0 - bb).sqrt() * z[i]) / (1.0 - g).sqrt();
            worst = worst.max((mu[i] - want).abs());
        }
    }
    let mut store = ParamStore::new();
    let cfg = DenoiserConfig { hidden: 6, time_dim: 4, ..DenoiserConfig::default() };
    let d = Denoiser::new(&mut store, "d", &cfg, T, 3, 2, &mut rng).map_err(|e| e.to_string())?;
    let h = normal_matrix(&mut rng, 1, 3);
    let cond = normal_matrix(&mut rng, 1, 2);
    for t in 1..=T {
        let z = d.predict(&store, &h, t, &cond).map_err(|e| e.to_string())?;
        let mut draw = rng.clone();
        let out = d.reverse_step(&store, &sched, &h, t, &cond, &mut rng).map_err(|e| e.to_string())?;
        let eps = normal_matrix(&mut draw, 1, 3);
        let (g, bb) = (sched.gamma(t), sched.beta_bar(t));
        for j in 0..3 {
            let mu = (h.get(0, j) - g / (1.0 - bb).sqrt() * z.get(0, j)) / (1.0 - g).sqrt();
            let want = if t == 1 { mu } else { mu + g.sqrt() * eps.get(0, j) };
            worst = worst.max((out.get(0, j) - want).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("scalar oracle error {worst:e}"))?;
    Ok(format!("moments within 3 SE over {DRAWS} draws, scalar error {worst:.1e}"))
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    (mean, (row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn adain_identities() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = seeded(2000 + seed);
        let (rows, cols) = (rng.random_range(1..6), rng.random_range(2..17));
        let n = normal_matrix(&mut rng, rows, cols).scale(rng.random_range(0.1..5.0));
        let s = normal_matrix(&mut rng, rows, cols).scale(rng.random_range(0.1..5.0));
        let same = adain(&n, &n).map_err(|e| e.to_string())?;
        worst = worst.max(same.max_abs_diff(&n));
        let out = adain(&n, &s).map_err(|e| e.to_string())?;
        for r in 0..rows {
            let (mo, so) = row_stats(out.row(r));
            let (ms, ss) = row_stats(s.row(r));
            worst = worst.max((mo - ms).abs()).max((so - ss).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 instances, max deviation {worst:.1e}"))
}

fn graph_oracles() -> Outcome {
    let mut pairs = 0;
    for seed in 0..100u64 {
        let mut rng = seeded(3000 + seed);
        let leaves = rng.random_range(1..=32);
        let levels = rng.random_range(1..=4);
        let (tax, ids) = oracle::random_tree(&mut rng, leaves, levels);
        let a = build_hyperclass_adjacency(&tax, &ids).map_err(|e| e.to_string())?;
        for i in 0..ids.len() {
            for j in 0..ids.len() {
                let want = oracle::lca_depth(tax.nodes(), ids[i], ids[j]) as f64;
                ensure(a.get(i, j) == want, || format!("tree {seed}: cursor({i},{j}) = {} vs {want}", a.get(i, j)))?;
                pairs += 1;
            }
        }
    }
    let mut radius: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = seeded(4000 + seed);
        let n = rng.random_range(1..12);
        let raw = uniform_matrix(&mut rng, n, n, 0.0, 3.0);
        let raw = if seed % 2 == 0 { raw.add(&raw.transpose()) } else { raw };
        let taus: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let qs: Vec<Matrix> = taus.iter().map(|&t| normalize_and_quantize(&raw, t).unwrap()).collect();
        for w in qs.windows(2) {
            ensure(w[1].data().iter().zip(w[0].data()).all(|(hi, lo)| hi <= lo), || {
                format!("instance {seed}: quantization not monotone in tau")
            })?;
        }
        for q in &qs {
            let norm = laplacian_normalize(q).map_err(|e| e.to_string())?;
            radius = radius.max(oracle::gelfand_radius(&norm));
        }
    }
    ensure(radius <= 1.0 + 1e-9, || format!("spectral radius {radius}"))?;
    Ok(format!("{pairs} LCA pairs, quantization monotone, max radius {radius:.12}"))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

struct DeskRun {
    trace: Vec<EpochLoss>,
    unseen_accuracy: Option<f64>,
    checkpoint: Vec<u8>,
    report: Vec<u8>,
}

fn desk_run(dir: &Path) -> Result<DeskRun, String> {
    let mut config = PipelineConfig::desk();
    config.out_dir = dir.to_path_buf();
    let report = run_pipeline(&config).map_err(|e| e.to_string())?;
    let trace = serde_json::from_slice(&read(&dir.join(files::TRACE))?).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        trace,
        unseen_accuracy: report.unseen_accuracy,
        checkpoint: read(&dir.join(files::checkpoint(config.checkpoint_format)))?,
        report: read(&dir.join(files::REPORT))?,
    })
}

fn poisoned_loader_rejected() -> Result<(), String> {
    let config = PipelineConfig::desk();
    let bench = generate_synthetic_benchmark(&config.bench, config.seed()).map_err(|e| e.to_string())?;
    let mut inputs = PipelineInputs::from_benchmark(&bench, config.tau).map_err(|e| e.to_string())?;
    let unseen = bench.semantics.ids_with(Split::Unseen);
    let mut records = inputs.train.records().to_vec();
    records.extend(bench.test.records().iter().filter(|r| unseen.contains(&r.class_id)).take(1).cloned());
    inputs.train = RegionFeatureSet::new(inputs.train.dim(), records).map_err(|e| e.to_string())?;
    match execute(&config, &inputs) {
        Err(e @ KefsError::Stage { .. }) if e.exit_code() == 3 && e.to_string().contains("unseen class") => Ok(()),
        Err(e) => Err(format!("poisoned loader failed with the wrong error: {e}")),
        Ok(_) => Err("poisoned loader was accepted".into()),
    }
}

fn end_to_end(run: &DeskRun) -> Outcome {
    poisoned_loader_rejected()?;
    ensure(run.trace.len() >= 50, || format!("only {} epochs", run.trace.len()))?;
    let (first, fiftieth) = (run.trace[0].total, run.trace[49].total);
    ensure(fiftieth < first, || format!("total loss {first:.4} at epoch 1, {fiftieth:.4} at epoch 50"))?;
    let acc = run.unseen_accuracy.ok_or("no unseen accuracy in report")?;
    ensure(acc >= 0.75, || format!("unseen accuracy {acc:.3} < 0.75"))?;
    Ok(format!("poisoned loader rejected, total {first:.3} -> {fiftieth:.3}, unseen accuracy {acc:.3}"))
}

fn determinism(a: &DeskRun, b: &DeskRun) -> Outcome {
    ensure(a.checkpoint == b.checkpoint, || "checkpoints differ".into())?;
    ensure(a.report == b.report, || "reports differ".into())?;
    Ok(format!("checkpoint {} bytes and report {} bytes identical", a.checkpoint.len(), a.report.len()))
}

fn silhouette_direction() -> Outcome {
    const SEEDS: u64 = 5;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let mut config = PipelineConfig::desk();
        config.train.seed = seed;
        let bench = generate_synthetic_benchmark(&config.bench, seed).map_err(|e| e.to_string())?;
        let inputs = PipelineInputs::from_benchmark(&bench, config.tau).map_err(|e| e.to_string())?;
        let full = execute(&config, &inputs).map_err(|e| e.to_string())?;

        let mut ablated = config.clone();
        ablated.train.lambda_g = 0.0;
        let mut plain = inputs.clone();
        plain.graphs = MultiSourceGraphSet::identity(inputs.semantics.len(), config.tau);
        let abl = execute(&ablated, &plain).map_err(|e| e.to_string())?;

        let (k, a) = (full.report.silhouette.unwrap(), abl.report.silhouette.unwrap());
        wins += u32::from(k > a);
        lines.push(format!("{k:.3}/{a:.3}"));
    }
    let detail = format!("KEFS beats ablation on {wins}/{SEEDS} seeds [{}]", lines.join(" "));
    ensure(wins * 2 > SEEDS as u32, || detail.clone())?;
    Ok(detail)
}

fn report(name: &str, budget: Duration, took: Duration, outcome: Outcome) -> bool {
    let over = took > budget;
    let (ok, detail) = match outcome {
        Ok(d) if !over => (true, d),
        Ok(d) => (false, format!("{d}; took {took:.1?}, budget {budget:?}")),
        Err(e) => (false, e),
    };
    println!("{} {name}: {detail} ({took:.2?})", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut all = true;
    let simple: [(&str, Duration, fn() -> Outcome); 6] = [
        ("harmonic-mean oracle", Duration::from_millis(100), harmonic_mean_oracle),
        ("metric oracle equivalence", secs(10), metric_oracle),
        ("gradient suite", secs(60), gradient_suite),
        ("diffusion consistency", secs(30), diffusion_consistency),
        ("AdaIN identities", secs(5), adain_identities),
        ("graph-construction oracles", secs(10), graph_oracles),
    ];
    for (name, budget, f) in simple {
        let start = Instant::now();
        let outcome = f();
        all &= report(name, budget, start.elapsed(), outcome);
    }

    let timed = |dir: std::io::Result<tempfile::TempDir>| {
        let start = Instant::now();
        let dir = dir.map_err(|e| e.to_string())?;
        desk_run(dir.path()).map(|run| (run, start.elapsed()))
    };
    match (timed(tempfile::tempdir()), timed(tempfile::tempdir())) {
        (Ok((a, took_a)), Ok((b, took_b))) => {
            all &= report("end-to-end zero-shot property", secs(300), took_a, end_to_end(&a));
            all &= report("determinism", secs(600), took_a + took_b, determinism(&a, &b));
        }
        (Err(e), _) | (_, Err(e)) => {
            all &= report("end-to-end zero-shot property", secs(300), Duration::ZERO, Err(e.clone()));
            all &= report("determinism", secs(600), Duration::ZERO, Err(e));
        }
    }

    let start = Instant::now();
    let outcome = silhouette_direction();
    all &= report("silhouette direction", secs(600), start.elapsed(), outcome);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
