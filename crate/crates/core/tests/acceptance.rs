//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero when any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ownerguard::cluster::{elbow_sweep_points, kmeans, kmeans_fit, KMeansParams};
use ownerguard::detect::{
    compute_metrics, ensemble_vote, roc_sweep, threshold_grid, windows_verdicts, DetectionConfig, MetricSet, Verdict,
};
use ownerguard::ingest::parse_trip;
use ownerguard::pipeline::{self, Evaluation, Manifest, RunConfig};
use ownerguard::reconstruct::{error_series, reconstruct_series, ErrorSeries};
use ownerguard::synth::{window_labels, ESSENTIAL_FEATURES};
use ownerguard::windowing::{highlight, highlighted_segments, slide, FilterKind, WindowConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: impl Into<String>) -> Outcome {
    if cond {
        Ok(detail.into())
    } else {
        Err(detail.into())
    }
}

fn config_in(root: &Path) -> RunConfig {
    RunConfig {
        data_dir: root.join("data"),
        output_dir: root.join("out"),
        ..RunConfig::default()
    }
}

fn full_run(cfg: &RunConfig) -> ownerguard::Result<Evaluation> {
    pipeline::run_synth(cfg)?;
    pipeline::run_ingest(cfg)?;
    pipeline::run_train(cfg)?;
    let ev = pipeline::run_evaluate(cfg)?;
    let manifest = Manifest::load(&cfg.data_dir)?;
    for s in &manifest.splices {
        pipeline::run_detect(cfg, &s.trip_id)?;
        pipeline::run_report(cfg, &s.trip_id, true)?;
    }
    Ok(ev)
}

fn end_to_end(cfg: &RunConfig, elapsed: Duration, ev: &Evaluation) -> Outcome {
    let mut detail = format!(
        "{} owner + {} thief windows, {:.1} s;",
        ev.owner_windows,
        ev.thief_windows,
        elapsed.as_secs_f64()
    );
    let mut ok = elapsed <= Duration::from_secs(60);
    ok &= cfg.train_trips >= 10 && ev.owner_windows == 4 * ev.thief_windows;
    ok &= ev.models.len() == 5;
    for m in &ev.models {
        detail.push_str(&format!(" {} acc {:.4} prec {:.4};", m.model, m.metrics.accuracy, m.metrics.precision));
        ok &= m.metrics.accuracy >= 0.95;
    }
    let best = ev.models.iter().map(|m| m.metrics.precision).fold(0.0, f64::max);
    detail.push_str(&format!(" ensemble prec {:.4} vs best {best:.4}", ev.ensemble.precision));
    ok &= ev.ensemble.precision >= best;
    check(ok, detail)
}

fn splice_localization(cfg: &RunConfig) -> Outcome {
    let manifest = Manifest::load(&cfg.data_dir).map_err(|e| e.to_string())?;
    let books = pipeline::load_codebooks(cfg).map_err(|e| e.to_string())?;
    let mut ok = !manifest.splices.is_empty();
    let mut detail = String::new();
    for s in &manifest.splices {
        let report = pipeline::run_detect(cfg, &s.trip_id).map_err(|e| e.to_string())?;
        let labels = report.labels.clone().ok_or("spliced trip without labels")?;
        let flagged: Vec<bool> = report.ensemble.verdicts.iter().map(|v| v.is_theft).collect();
        let flagged_n = flagged.iter().filter(|f| **f).count();
        let flagged_inside = flagged.iter().zip(&labels).filter(|(f, l)| **f && **l).count();
        let labeled_n = labels.iter().filter(|l| **l).count();
        let inside_share = flagged_inside as f64 / flagged_n.max(1) as f64;
        let caught_share = flagged_inside as f64 / labeled_n.max(1) as f64;
        ok &= flagged_n > 0 && inside_share >= 0.8 && caught_share >= 0.8;

        let trip = parse_trip(cfg.data_dir.join(&s.file), cfg.sample_period_s).map_err(|e| e.to_string())?;
        let start = (s.spec.start_fraction * trip.len() as f64).round() as usize;
        let mut worst_ratio = f64::INFINITY;
        for cb in &books {
            let rec = reconstruct_series(&trip.dense(&cb.feature).unwrap(), cb).map_err(|e| e.to_string())?;
            let err = error_series(&rec).errors;
            let inside = &err[start.min(err.len())..];
            let outside = &err[..start.min(err.len())];
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            worst_ratio = worst_ratio.min(mean(inside) / mean(outside));
        }
        ok &= worst_ratio >= 3.0;
        detail.push_str(&format!(
            "{}: {flagged_inside}/{flagged_n} flagged inside, {flagged_inside}/{labeled_n} caught, min error ratio {worst_ratio:.1}; ",
            s.trip_id
        ));
    }
    check(ok, detail)
}

fn determinism(first: &RunConfig, scratch: &Path) -> Outcome {
    let second = config_in(&scratch.join("again"));
    full_run(&second).map_err(|e| e.to_string())?;
    let a = collect_files(&first.output_dir);
    let b = collect_files(&second.output_dir);
    let da = collect_files(&first.data_dir);
    let db = collect_files(&second.data_dir);
    let codebooks = a.keys().filter(|k| k.starts_with("codebooks")).count();
    let reports = a.keys().filter(|k| k.starts_with("report")).count();
    check(
        a == b && da == db && codebooks == 5 && reports > 0,
        format!(
            "{} output files ({codebooks} codebooks, {reports} report files) and {} corpus files compared byte for byte",
            a.len(),
            da.len()
        ),
    )
}

fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn mean_of(points: &[Vec<f64>], members: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut sum = vec![0.0; points[0].len()];
    let mut n = 0.0;
    for i in members {
        for (s, v) in sum.iter_mut().zip(&points[i]) {
            *s += v;
        }
        n += 1.0;
    }
    sum.iter().map(|s| s / n).collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn kmeans_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 1.0).unwrap();
    // Loosely clustered segments so Lloyd has real work to do.
    let anchors: Vec<Vec<f64>> = (0..8).map(|_| (0..32).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    let points: Vec<Vec<f64>> = (0..1000)
        .map(|i| anchors[i % 8].iter().map(|a| a + 2.0 * noise.sample(&mut rng)).collect())
        .collect();
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let mut detail = String::new();
    let mut ok = true;
    for k in [4, 8, 25, 60] {
        let params = KMeansParams { k, seed: 3, max_iter: 10_000, tol: 0.0, restarts: 3 };
        let run = kmeans(&refs, &params).map_err(|e| e.to_string())?;
        let monotone = run.sse_trace.windows(2).all(|w| w[1] <= w[0]);
        let nearest_ok = points.iter().zip(&run.assignments).all(|(p, &a)| {
            let mut best = 0;
            for j in 1..k {
                if sq(p, &run.centroids[j]) < sq(p, &run.centroids[best]) {
                    best = j;
                }
            }
            best == a
        });
        let mut max_dev: f64 = 0.0;
        for j in 0..k {
            let mean = mean_of(&points, (0..points.len()).filter(|&i| run.assignments[i] == j));
            for (m, c) in mean.iter().zip(&run.centroids[j]) {
                max_dev = max_dev.max((m - c).abs());
            }
        }
        ok &= run.converged && monotone && nearest_ok && max_dev <= 1e-9;
        detail.push_str(&format!(
            "k={k}: {} iters, monotone {monotone}, nearest {nearest_ok}, mean dev {max_dev:.1e}; ",
            run.iterations
        ));
    }
    let all = kmeans(&refs, &KMeansParams { k: points.len(), seed: 1, max_iter: 100, tol: 0.0, restarts: 1 })
        .map_err(|e| e.to_string())?;
    ok &= all.sse <= 1e-18;
    detail.push_str(&format!("k=n SSE {:e}", all.sse));
    check(ok, detail)
}

fn elbow_recovery() -> Outcome {
    let ks: Vec<usize> = (1..=8).collect();
    let mut hits = 0;
    let mut picks = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let centers: Vec<[f64; 2]> = loop {
            let c: Vec<[f64; 2]> = (0..3)
                .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)])
                .collect();
            let min_gap = (0..3)
                .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
                .map(|(i, j)| sq(&c[i], &c[j]).sqrt())
                .fold(f64::INFINITY, f64::min);
            if min_gap >= 10.0 {
                break c;
            }
        };
        let points: Vec<Vec<f64>> = (0..300)
            .map(|i| centers[i % 3].iter().map(|c| c + noise.sample(&mut rng)).collect())
            .collect();
        let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
        let params = KMeansParams { seed, restarts: 5, ..KMeansParams::default() };
        let curve = elbow_sweep_points(&refs, &ks, &params).map_err(|e| e.to_string())?;
        hits += usize::from(curve.recommended_k == 3);
        picks.push(curve.recommended_k);
    }
    check(hits >= 9, format!("{hits}/10 seeds recovered k = 3 (picks {picks:?})"))
}

fn windowing_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut count_ok = true;
    let mut endpoints_ok = true;
    for _ in 0..500 {
        let w = rng.random_range(2..=64usize);
        let s = rng.random_range(1..=w);
        let len = rng.random_range(w..=w + 500);
        let filter = if rng.random_bool(0.5) { FilterKind::RaisedCosine } else { FilterKind::Triangular };
        let cfg = WindowConfig::new(w as f64, s as f64, 1.0, filter).unwrap();
        let series: Vec<f64> = (0..len).map(|_| rng.random_range(-100.0..100.0)).collect();
        let expected = (len - w) / s + 1;
        let segs = slide("f", &series, &cfg).unwrap();
        count_ok &= cfg.segment_count(len) == expected && segs.len() == expected;
        for seg in segs {
            let h = highlight(seg, filter).unwrap();
            endpoints_ok &= h.values[0] == 0.0 && h.values[w - 1] == 0.0;
        }
    }
    let mut max_asym: f64 = 0.0;
    for n in 2..=512 {
        for filter in [FilterKind::RaisedCosine, FilterKind::Triangular] {
            let c = filter.coefficients(n);
            for i in 0..n {
                max_asym = max_asym.max((c[i] - c[n - 1 - i]).abs());
            }
        }
    }
    check(
        count_ok && endpoints_ok && max_asym <= 1e-12,
        format!("500 random configs: counts {count_ok}, zero endpoints {endpoints_ok}; max asymmetry {max_asym:.1e}"),
    )
}

fn reconstruction_identity(cfg: &RunConfig) -> Outcome {
    let manifest = Manifest::load(&cfg.data_dir).map_err(|e| e.to_string())?;
    let wcfg = cfg.window_config().unwrap();
    let trips: Vec<_> = manifest
        .owner_trips(&cfg.owner)
        .into_iter()
        .take(cfg.train_trips)
        .map(|e| parse_trip(cfg.data_dir.join(&e.file), cfg.sample_period_s).unwrap())
        .collect();
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for feature in ESSENTIAL_FEATURES {
        let series: Vec<Vec<f64>> = trips.iter().map(|t| t.dense(feature).unwrap()).collect();
        let segments: Vec<_> = series
            .iter()
            .flat_map(|s| highlighted_segments(feature, s, &wcfg).unwrap())
            .collect();
        let params = KMeansParams { k: segments.len(), restarts: 1, ..KMeansParams::default() };
        let cb = kmeans_fit(feature, &segments, &wcfg, &params).map_err(|e| e.to_string())?;
        for s in &series {
            let rec = reconstruct_series(s, &cb).map_err(|e| e.to_string())?;
            worst = error_series(&rec).errors.iter().fold(worst, |m, e| m.max(*e));
        }
        detail = format!("k = {} segments per feature, ", cb.k());
    }
    check(worst <= 1e-9, format!("{detail}max per-sample error {worst:e}"))
}

fn verdicts_at(errors: &[f64], threshold: f64) -> Vec<Verdict> {
    let cfg = DetectionConfig::new(4.0, 1.0, threshold).unwrap();
    let err = ErrorSeries { feature: "f".into(), errors: errors.to_vec() };
    windows_verdicts(&err, &cfg).unwrap()
}

fn detection_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut monotone = true;
    for _ in 0..500 {
        let n = 4 * rng.random_range(1..40usize);
        let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let lo = rng.random_range(0.0..10.0);
        let hi = lo + rng.random_range(0.0..5.0);
        let a = verdicts_at(&errors, lo);
        let b = verdicts_at(&errors, hi);
        monotone &= a.iter().zip(&b).all(|(x, y)| !y.is_theft || x.is_theft);
    }
    let at = verdicts_at(&[0.75; 8], 0.75);
    let below = verdicts_at(&[0.75; 8], f64::from_bits(0.75f64.to_bits() - 1));
    let boundary = at.iter().all(|v| !v.is_theft) && below.iter().all(|v| v.is_theft);

    let mut table = true;
    for pattern in 0u32..32 {
        let models: Vec<Vec<Verdict>> = (0..5)
            .map(|m| vec![Verdict { window_start: 0, representative_error: 0.0, is_theft: pattern >> m & 1 == 1 }])
            .collect();
        let v = ensemble_vote(&models).unwrap()[0];
        let votes = pattern.count_ones();
        table &= v.is_theft == (votes >= 3) && v.representative_error == votes as f64;
    }
    check(
        monotone && boundary && table,
        format!("monotone over 500 cases {monotone}, mean = threshold is owner {boundary}, 32 vote patterns {table}"),
    )
}

fn roc_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut rates_ok = true;
    for _ in 0..200 {
        let mut labeled: Vec<(f64, bool)> = (0..50)
            .map(|_| ((rng.random_range(0..30) as f64) / 3.0, rng.random_bool(0.4)))
            .collect();
        labeled[0].1 = true;
        labeled[1].1 = false;
        let scores: Vec<f64> = labeled.iter().map(|p| p.0).collect();
        let grid = threshold_grid(&scores);
        let curve = roc_sweep(&labeled, &grid).unwrap();
        let pos = labeled.iter().filter(|p| p.1).count() as f64;
        let neg = labeled.len() as f64 - pos;
        for p in &curve.points {
            let tp = labeled.iter().filter(|(e, y)| *y && *e > p.threshold).count() as f64;
            let fp = labeled.iter().filter(|(e, y)| !*y && *e > p.threshold).count() as f64;
            rates_ok &= p.tpr == tp / pos && p.fpr == fp / neg;
        }
    }
    let separated: Vec<(f64, bool)> = (0..50).map(|i| (i as f64, i >= 30)).collect();
    let scores: Vec<f64> = separated.iter().map(|p| p.0).collect();
    let auc = roc_sweep(&separated, &threshold_grid(&scores)).unwrap().auc;

    let mut identities = true;
    for _ in 0..1000 {
        let (tp, fp, tn, fn_) = (
            rng.random_range(0..60usize),
            rng.random_range(0..60usize),
            rng.random_range(0..60usize),
            rng.random_range(0..60usize),
        );
        let m = MetricSet::from_counts(tp, fp, tn, fn_);
        let total = tp + fp + tn + fn_;
        if total > 0 {
            identities &= m.accuracy == (tp + tn) as f64 / total as f64;
        }
        if 2 * tp + fp + fn_ > 0 {
            identities &= m.f1 == (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        }
        let preds: Vec<bool> = [true].repeat(tp + fp).into_iter().chain([false].repeat(tn + fn_)).collect();
        let labels: Vec<bool> = [true]
            .repeat(tp)
            .into_iter()
            .chain([false].repeat(fp + tn))
            .chain([true].repeat(fn_))
            .collect();
        identities &= compute_metrics(&preds, &labels).unwrap() == m;
    }
    check(
        rates_ok && (auc - 1.0).abs() <= 1e-12 && identities,
        format!("brute-force rates on 200 random sets {rates_ok}, separated AUC {auc}, count identities {identities}"),
    )
}

fn window_label_sanity(cfg: &RunConfig) -> Outcome {
    // Spliced region must yield whole theft windows at the end of the trip.
    let manifest = Manifest::load(&cfg.data_dir).map_err(|e| e.to_string())?;
    let s = manifest.splices.first().ok_or("no splices")?;
    let labels = pipeline::read_labels(&cfg.data_dir.join(&s.labels_file)).map_err(|e| e.to_string())?;
    let w = window_labels(&labels, 32);
    let first = w.iter().position(|x| *x).unwrap_or(w.len());
    check(w[first..].iter().all(|x| *x) && first > 0, format!("theft windows from index {first} of {}", w.len()))
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let cfg = config_in(&scratch.path().join("run"));
    let started = Instant::now();
    let run = full_run(&cfg);
    let elapsed = started.elapsed();

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    match &run {
        Ok(ev) => {
            results.push(("end-to-end synthetic run", end_to_end(&cfg, elapsed, ev)));
            results.push(("splice localization", splice_localization(&cfg)));
            results.push(("splice window labels", window_label_sanity(&cfg)));
            results.push(("reconstruction identity", reconstruction_identity(&cfg)));
            results.push(("determinism", determinism(&cfg, scratch.path())));
        }
        Err(e) => results.push(("end-to-end synthetic run", Err(format!("pipeline failed: {e}")))),
    }
    results.push(("k-means properties", kmeans_properties()));
    results.push(("elbow recovery", elbow_recovery()));
    results.push(("windowing arithmetic", windowing_arithmetic()));
    results.push(("detection properties", detection_properties()));
    results.push(("ROC and metric oracles", roc_oracles()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
