//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion fails that is not listed in `KNOWN_RED`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cada_core::align::{normalize_meanmax, normalize_meanstd, ScoreMap, StatVariant, DEFAULT_EPS};
use cada_core::cada::{compute_image_stats, HeadConfig, TrainConfig};
use cada_core::experiment::{Bench, Summary};
use cada_core::metrics::{auroc, average_precision, MetricsReport, Scope, ScoredSample, TopFraction};
use cada_core::netcore::{smooth_l1, smooth_l1_grad};
use cada_core::synthbench::{generate_in_memory, SynthConfig};

const METRIC_TOL: f64 = 1e-9;
const METRIC_INSTANCES: usize = 1000;
const GRAD_TOL: f64 = 1e-4;
const SELF_CONSISTENCY_TOL: f64 = 1e-9;
const MIXED_GAP_POINTS: f64 = 10.0;
const ORACLE_GAP_POINTS: f64 = 1.0;
const CLASSIFIER_GAP_POINTS: f64 = 1.5;
const REGRESSOR_GAP_POINTS: f64 = 3.0;
const MECHANISM_BUDGET_S: f64 = 300.0;
const CLASS_STAT_SHARE: f64 = 0.80;
const VARIANT_MAPS: usize = 100;
const SMOOTH_L1_BOUNDARY_TOL: f64 = f64::EPSILON;

/// Criteria allowed to fail without failing the run. Their lines still
/// print FAIL.
const KNOWN_RED: &[u32] = &[10];

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn record(id: u32, name: &'static str, start: Instant, result: Result<(bool, String), String>) -> Outcome {
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match result {
        Ok((p, d)) => (p, format!("{d} [{secs:.1} s]")),
        Err(e) => (false, format!("error: {e} [{secs:.1} s]")),
    };
    let o = Outcome { id, name, pass, detail };
    println!("{} {:>2} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    o
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn auroc_pairs(s: &[ScoredSample]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for p in s.iter().filter(|x| x.positive) {
        for n in s.iter().filter(|x| !x.positive) {
            pairs += 1.0;
            if p.score > n.score {
                wins += 1.0;
            } else if p.score == n.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn ap_thresholds(s: &[ScoredSample]) -> f64 {
    let mut thresholds: Vec<f64> = s.iter().map(|x| x.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = s.iter().filter(|x| x.positive).count() as f64;
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let tp = s.iter().filter(|x| x.positive && x.score >= t).count() as f64;
        let predicted = s.iter().filter(|x| x.score >= t).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}

fn metric_oracles() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..METRIC_INSTANCES {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=n.max(3));
        let mut s: Vec<ScoredSample> = (0..n)
            .map(|_| ScoredSample {
                // Scores on a small lattice so ties are frequent.
                score: rng.random_range(0..levels) as f64 / levels as f64,
                positive: rng.random_bool(0.4),
            })
            .collect();
        s[0].positive = true;
        s[1].positive = false;
        let a = auroc(&s).map_err(err)?;
        let p = average_precision(&s).map_err(err)?;
        worst = worst.max((a - auroc_pairs(&s)).abs()).max((p - ap_thresholds(&s)).abs());
    }
    Ok((
        worst <= METRIC_TOL,
        format!("{METRIC_INSTANCES} tied instances, worst deviation {worst:.2e} (tol {METRIC_TOL:.0e})"),
    ))
}

// ---------------------------------------------------------------- 2

fn cada() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cada"))
}

fn run_in(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = cada().current_dir(dir).args(args).output().map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("cada {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn gradient_fidelity(work: &Path) -> Result<(bool, String), String> {
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for mode in ["regressor", "classifier"] {
        let dir = format!("grad_{mode}");
        let tol = GRAD_TOL.to_string();
        let status = cada()
            .current_dir(work)
            .args(["grad-check", "--mode", mode, "--dropout", "0.25", "--tolerance", &tol, "--out", &dir])
            .output()
            .map_err(err)?;
        let mut r = csv::Reader::from_path(work.join(&dir).join("grad_check.csv")).map_err(err)?;
        for rec in r.records() {
            let rec = rec.map_err(err)?;
            let e: f64 = rec[3].parse::<f64>().map_err(err)?.max(rec[4].parse().map_err(err)?);
            worst = worst.max(e);
            rows += 1;
        }
        if !status.status.success() && status.status.code() != Some(3) {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
    }
    Ok((
        rows == 10 && worst <= GRAD_TOL,
        format!("5 structures x 2 modes, frozen dropout 0.25, worst relative error {worst:.2e} (tol {GRAD_TOL:.0e})"),
    ))
}

// ---------------------------------------------------------------- 3

fn self_consistency(bench: &Bench) -> Result<(bool, String), String> {
    let stats = bench.class_stats().map_err(err)?;
    let by_class: BTreeMap<i64, _> = stats.iter().map(|s| (s.class_id, s)).collect();
    let mut groups: BTreeMap<i64, Vec<ScoreMap>> = BTreeMap::new();
    for img in &bench.train {
        let c = img.entry.class_id.ok_or("missing class id")?;
        groups
            .entry(c)
            .or_default()
            .push(by_class[&c].normalize(&img.map, StatVariant::MeanMax, DEFAULT_EPS).map);
    }
    let (mut mean_dev, mut max_dev): (f64, f64) = (0.0, 0.0);
    for maps in groups.values() {
        let n: usize = maps.iter().map(|m| m.pixels().len()).sum();
        let mean = maps.iter().flat_map(|m| m.pixels()).sum::<f64>() / n as f64;
        let gamma = maps
            .iter()
            .map(|m| m.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / maps.len() as f64;
        mean_dev = mean_dev.max(mean.abs());
        max_dev = max_dev.max((gamma - 1.0).abs());
    }
    Ok((
        mean_dev <= SELF_CONSISTENCY_TOL && max_dev <= SELF_CONSISTENCY_TOL,
        format!(
            "{} classes, |mean| <= {mean_dev:.2e}, |mean max - 1| <= {max_dev:.2e} (tol {SELF_CONSISTENCY_TOL:.0e})",
            groups.len()
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn per_class(reports: &[MetricsReport]) -> BTreeMap<i64, (u64, Option<u64>)> {
    reports
        .iter()
        .filter_map(|r| match r.scope {
            Scope::Class(c) => Some((c, (r.i_auroc.to_bits(), r.p_auroc.map(f64::to_bits)))),
            _ => None,
        })
        .collect()
}

fn rank_preservation(bench: &Bench) -> Result<(bool, String), String> {
    let top = TopFraction::default();
    let raw = per_class(&bench.evaluate(&bench.raw_maps(), top).map_err(err)?);
    let mut stats = bench.class_stats().map_err(err)?;
    let oracle = per_class(&bench.evaluate(&bench.oracle_maps(&stats, StatVariant::MeanMax, DEFAULT_EPS).map_err(err)?, top).map_err(err)?);
    // Arbitrary class-level affine maps with gamma - u > eps.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in &mut stats {
        s.u_c = rng.random_range(-5.0..5.0);
        s.gamma_c = s.u_c + rng.random_range(1e-3..50.0);
    }
    let random = per_class(&bench.evaluate(&bench.oracle_maps(&stats, StatVariant::MeanMax, DEFAULT_EPS).map_err(err)?, top).map_err(err)?);
    let ok = raw == oracle && raw == random && raw.values().all(|v| v.1.is_some());
    Ok((
        ok,
        format!("{} classes, I-AUROC and P-AUROC bit patterns compared for fitted and random statistics", raw.len()),
    ))
}

// ---------------------------------------------------------------- 5, 6

struct Mechanism {
    line: (bool, String),
    share: Result<(bool, String), String>,
}

fn points(x: f64) -> f64 {
    100.0 * x
}

fn class_stat_share(bench: &Bench, model: &cada_core::cada::HeadModel) -> Result<(usize, usize), String> {
    let stats = bench.class_stats().map_err(err)?;
    let u_c: BTreeMap<i64, f64> = stats.iter().map(|s| (s.class_id, s.u_c)).collect();
    let (mut closer, mut total) = (0, 0);
    for img in bench.test.iter().filter(|i| i.entry.label.is_anomalous()) {
        let u_hat = model.predict_stats(&img.features).map_err(err)?.u();
        let u_img = compute_image_stats(&img.map).map_err(err)?.u_img;
        let class = u_c[&img.entry.class_id.ok_or("missing class id")?];
        total += 1;
        if (u_hat - class).abs() < (u_hat - u_img).abs() {
            closer += 1;
        }
    }
    Ok((closer, total))
}

fn mechanism(bench: &Bench, start: Instant) -> Result<Mechanism, String> {
    let top = TopFraction::default();
    let eps = DEFAULT_EPS;
    let raw = Summary::of(&bench.evaluate(&bench.raw_maps(), top).map_err(err)?);
    let macro_avg = raw.macro_i_auroc.ok_or("no macro average")?;
    let stats = bench.class_stats().map_err(err)?;
    let oracle = Summary::of(&bench.evaluate(&bench.oracle_maps(&stats, StatVariant::MeanMax, eps).map_err(err)?, top).map_err(err)?);
    let train = TrainConfig::default();
    let classifier = bench.train_classifier(&HeadConfig::classifier(), &train).map_err(err)?;
    let cls = Summary::of(
        &bench
            .evaluate(&bench.classifier_maps(&classifier, &stats, StatVariant::MeanMax, eps).map_err(err)?, top)
            .map_err(err)?,
    );
    let regressor = bench.train_regressor(&HeadConfig::default(), &train).map_err(err)?;
    let reg = Summary::of(&bench.evaluate(&bench.regressor_maps(&regressor, eps).map_err(err)?, top).map_err(err)?);
    let secs = start.elapsed().as_secs_f64();

    let (m, r, o, c, g) = (
        points(macro_avg),
        points(raw.mixed_i_auroc),
        points(oracle.mixed_i_auroc),
        points(cls.mixed_i_auroc),
        points(reg.mixed_i_auroc),
    );
    let a = r <= m - MIXED_GAP_POINTS;
    let b = (o - m).abs() <= ORACLE_GAP_POINTS;
    let cc = (c - o).abs() <= CLASSIFIER_GAP_POINTS;
    let d = (g - o).abs() <= REGRESSOR_GAP_POINTS;
    let line = (
        a && b && cc && d && secs < MECHANISM_BUDGET_S,
        format!(
            "macro {m:.2}, raw mixed {r:.2} (a {}), oracle {o:.2} (b {}), classifier {c:.2} (c {}), regressor {g:.2} (d {}), {secs:.0} s of {MECHANISM_BUDGET_S:.0} s",
            yn(a),
            yn(b),
            yn(cc),
            yn(d)
        ),
    );

    let share = (|| {
        let (closer, total) = class_stat_share(bench, &regressor)?;
        let no_dropout = HeadConfig {
            dropout_rate: 0.0,
            ..HeadConfig::default()
        };
        let plain = bench.train_regressor(&no_dropout, &train).map_err(err)?;
        let (closer0, _) = class_stat_share(bench, &plain)?;
        let frac = closer as f64 / total as f64;
        Ok((
            frac >= CLASS_STAT_SHARE,
            format!(
                "dropout 0.25: {closer}/{total} = {frac:.3} closer to the class mean (need {CLASS_STAT_SHARE}); dropout 0 recorded: {closer0}/{total}"
            ),
        ))
    })();
    Ok(Mechanism { line, share })
}

fn yn(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "no"
    }
}

// ---------------------------------------------------------------- 7

fn variant_equivalence() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut identical = 0;
    for i in 0..VARIANT_MAPS {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let px: Vec<f64> = (0..h * w).map(|_| rng.random_range(-3.0..10.0)).collect();
        let map = ScoreMap::from_pixels(format!("m{i}"), h, w, px).map_err(err)?;
        let u = rng.random_range(-1.0..2.0);
        // Include sigmas that drive the denominator below eps.
        let sigma = if i % 10 == 0 { 1e-9 } else { rng.random_range(0.0..3.0) };
        let a = normalize_meanstd(&map, u, sigma, DEFAULT_EPS);
        let b = normalize_meanmax(&map, u, u + 3.0 * sigma, DEFAULT_EPS);
        let same = a.clamped == b.clamped
            && a.map.pixels().iter().zip(b.map.pixels()).all(|(x, y)| x.to_bits() == y.to_bits());
        identical += same as usize;
    }
    Ok((identical == VARIANT_MAPS, format!("{identical}/{VARIANT_MAPS} maps bitwise identical")))
}

// ---------------------------------------------------------------- 8

fn smooth_l1_suite() -> Result<(bool, String), String> {
    let alpha = 0.1;
    // Both branches evaluated at |y - y_hat| = alpha.
    let d = alpha;
    let q = 0.5 * d * (d / alpha);
    let l = d - 0.5 * alpha;
    let at = smooth_l1(0.0, alpha, alpha).map_err(err)?;
    let below = smooth_l1(0.0, f64::from_bits(alpha.to_bits() - 1), alpha).map_err(err)?;
    let boundary = (q - l).abs().max((at - below).abs()).max((at - 0.05).abs());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut max_grad: f64 = 0.0;
    for _ in 0..100_000 {
        let (y_hat, y) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let a = rng.random_range(1e-3..2.0);
        max_grad = max_grad.max(smooth_l1_grad(y_hat, y, a).map_err(err)?.abs());
    }
    let e1 = smooth_l1(0.0, 0.05, alpha).map_err(err)? == 0.0125;
    let e2 = at == 0.05;
    let e3 = smooth_l1(0.0, 1.0, alpha).map_err(err)? == 0.95
        && smooth_l1_grad(0.0, 1.0, alpha).map_err(err)? == -1.0
        && smooth_l1_grad(1.0, 0.0, alpha).map_err(err)? == 1.0;
    let ok = boundary <= SMOOTH_L1_BOUNDARY_TOL && max_grad <= 1.0 && e1 && e2 && e3;
    Ok((
        ok,
        format!(
            "boundary gap {boundary:.1e} (tol {SMOOTH_L1_BOUNDARY_TOL:.1e}), max |grad| {max_grad}, examples {} {} {}",
            yn(e1),
            yn(e2),
            yn(e3)
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn pipeline(dir: &Path) -> Result<(), String> {
    let steps: &[&[&str]] = &[
        &["gen", "--k-classes", "3", "--train-normal", "20", "--test-normal", "5", "--test-anomalous", "5", "--seed", "9", "--out", "data"],
        &["fit-base", "--data", "data", "--m-per-image", "8", "--seed", "9", "--out", "base"],
        &["score", "--data", "data", "--base", "base", "--out", "scored"],
        &["stats", "--data", "scored", "--out", "stats"],
        &["train-head", "--data", "scored", "--iterations", "200", "--train-seed", "9", "--out", "regressor"],
        &["train-head", "--data", "scored", "--mode", "classifier", "--iterations", "200", "--train-seed", "9", "--out", "classifier"],
        &["align", "--data", "scored", "--mode", "oracle", "--stats", "stats/class_stats.csv", "--out", "oracle"],
        &["align", "--data", "scored", "--mode", "regressor", "--model", "regressor", "--out", "cada"],
        &["align", "--data", "scored", "--mode", "classifier", "--model", "classifier", "--stats", "stats/class_stats.csv", "--out", "cadab"],
        &["eval", "--data", "cada", "--out", "eval"],
        &["report", "--data", "cada", "--metrics", "cada=eval/metrics.csv", "--out", "report"],
    ];
    for s in steps {
        run_in(dir, s)?;
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(work: &Path) -> Result<(bool, String), String> {
    let (a, b) = (work.join("run_a"), work.join("run_b"));
    for d in [&a, &b] {
        fs::create_dir_all(d).map_err(err)?;
        pipeline(d)?;
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    let mut differing = Vec::new();
    for f in &fa {
        if fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    let kinds = |ext: &str| fa.iter().filter(|f| f.extension().is_some_and(|e| e == ext)).count();
    Ok((
        fa == fb && differing.is_empty(),
        format!(
            "{} files ({} tensors, {} csv, {} json) compared, {} differ{}",
            fa.len(),
            kinds("adt"),
            kinds("csv"),
            kinds("json"),
            differing.len(),
            differing.first().map(|f| format!(", first {f}")).unwrap_or_default()
        ),
    ))
}

// ---------------------------------------------------------------- 10

fn ablation(work: &Path) -> Result<(bool, String), String> {
    for s in [
        &["gen", "--out", "bench"][..],
        &["fit-base", "--data", "bench", "--out", "bench_base"],
        &["score", "--data", "bench", "--base", "bench_base", "--out", "bench_scored"],
        &["ablate", "--data", "bench_scored", "--out", "ablation"],
    ] {
        run_in(work, s)?;
    }
    let mut r = csv::Reader::from_path(work.join("ablation/ablation.csv")).map_err(err)?;
    let mut cells = 0;
    let mut losing = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        let raw: f64 = rec[3].parse().map_err(err)?;
        let ours: f64 = rec[4].parse().map_err(err)?;
        cells += 1;
        if ours <= raw {
            losing.push(format!("{} d={} top={} {:.3}<={:.3}", &rec[0], &rec[1], &rec[2], ours, raw));
        }
    }
    let detail = if losing.is_empty() {
        format!("{cells} cells, all above raw")
    } else {
        format!("{cells} cells, {} not above raw: {}", losing.len(), losing.join("; "))
    };
    Ok((cells == 80 && losing.is_empty(), detail))
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let mut outcomes = Vec::new();

    let t = Instant::now();
    outcomes.push(record(1, "metric oracle equivalence", t, metric_oracles()));
    let t = Instant::now();
    outcomes.push(record(2, "gradient fidelity", t, gradient_fidelity(work.path())));

    let t = Instant::now();
    let bench = generate_in_memory(&SynthConfig::default()).and_then(|d| Bench::from_synth(&d, 16, 0));
    let bench = match bench {
        Ok(b) => b,
        Err(e) => panic!("default benchmark: {e}"),
    };
    let scored = t;
    outcomes.push(record(3, "mean-max self-consistency", Instant::now(), self_consistency(&bench)));
    outcomes.push(record(4, "rank preservation", Instant::now(), rank_preservation(&bench)));
    match mechanism(&bench, scored) {
        Ok(m) => {
            outcomes.push(record(5, "mechanism reproduction", scored, Ok(m.line)));
            outcomes.push(record(6, "regressor predicts class statistics", Instant::now(), m.share));
        }
        Err(e) => {
            outcomes.push(record(5, "mechanism reproduction", scored, Err(e.clone())));
            outcomes.push(record(6, "regressor predicts class statistics", scored, Err(e)));
        }
    }
    outcomes.push(record(7, "variant equivalence", Instant::now(), variant_equivalence()));
    outcomes.push(record(8, "smooth-L1 analytic suite", Instant::now(), smooth_l1_suite()));
    outcomes.push(record(9, "determinism", Instant::now(), determinism(work.path())));
    outcomes.push(record(10, "ablation grid beats raw", Instant::now(), ablation(work.path())));

    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("{passed}/{} criteria pass", outcomes.len());
    let unexpected: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass && !KNOWN_RED.contains(&o.id))
        .map(|o| o.id.to_string())
        .collect();
    for o in outcomes.iter().filter(|o| !o.pass && KNOWN_RED.contains(&o.id)) {
        println!("criterion {} ({}) is a known failure", o.id, o.name);
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
