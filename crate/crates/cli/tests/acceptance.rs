//! Acceptance run. One test drives every criterion in order so the
//! training-heavy ones never compete for the CPU, then prints one line per
//! criterion and fails if any of them failed.

#[allow(dead_code)]
#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use ivusnet::arch::{load_checkpoint, save_checkpoint, ArchConfig, Network};
use ivusnet::augment::AugmentConfig;
use ivusnet::data::{
    load_manifest, synth_phantoms, write_manifest, write_mask, BinaryMask, Category, ProbMap, Split, Target,
};
use ivusnet::metrics::{hausdorff, jaccard};
use ivusnet::postprocess::{ellipse_to_contour, ellipse_to_mask, extract_contour, fit_ellipse, EllipseParams};
use ivusnet::train::{ensemble_map, load_frames, mean_pixel_jm, train_model, TrainConfig};
use ivusnet::{gradcheck, Error, Tensor};
use ivusnet_cli::ablation::{arm_mean, run_ablation, AblationSetup, Arm};
use ivusnet_cli::pipeline::{evaluate_models, frames_for};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Bypasses the test harness's output capture so the lines always show.
fn emit(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let checks = gradcheck::run_suite().expect("suite runs");
    let elapsed = t.elapsed();
    let mut failed = Vec::new();
    let mut worst_op = 0.0f64;
    let mut network = f64::NAN;
    for c in &checks {
        if !c.passed() {
            failed.push(c.op);
        }
        if c.op == "tiny_network" {
            network = c.max_rel_error;
        } else {
            worst_op = worst_op.max(c.max_rel_error);
            if c.cases < 2 * gradcheck::SUITE_SEEDS.len() {
                failed.push(c.op);
            }
        }
    }
    let pass = failed.is_empty() && network <= 1e-3 && worst_op <= 1e-4 && elapsed <= Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} ops, worst op rel err {worst_op:.1e}, network {network:.1e}, {}{}",
            checks.len() - 1,
            secs(elapsed),
            if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
        ),
    )
}

fn architecture() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, cfg) in [("tiny", ArchConfig::tiny()), ("paper", ArchConfig::paper())] {
        let net = Network::<f32>::build(&cfg, 0).unwrap();
        for size in [64usize, 192] {
            let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
            let x = Tensor::from_fn(&[1, 1, size, size], |_| rng.random::<f32>()).unwrap();
            let y = net.forward(&x).unwrap();
            let ok = y.shape() == [1, 1, size, size] && y.data().iter().all(|&v| v > 0.0 && v < 1.0);
            pass &= ok;
            if !ok {
                notes.push(format!("{name} {size}: shape {:?}", y.shape()));
            }
        }
        let x = Tensor::<f32>::zeros(&[1, 1, 60, 60]).unwrap();
        let rejected = matches!(net.forward(&x), Err(Error::Dimension(ref m)) if m.contains("divisible by 8"));
        pass &= rejected;
        if !rejected {
            notes.push(format!("{name}: 60x60 accepted"));
        }
    }
    outcome(pass, if notes.is_empty() { "tiny and paper, 64 and 192, 60 rejected".into() } else { notes.join("; ") })
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let records = synth_phantoms(dir.path(), 7, 16, 64, 0).unwrap();
    let frames = load_frames(&records, Target::Lumen, false).unwrap();
    let tcfg = TrainConfig { epochs: 300, validation_count: 0, seed: 7, ..Default::default() };
    let acfg = AugmentConfig { enabled: false, seed: 7, ..Default::default() };
    let t = Instant::now();
    let (net, _) = train_model(&frames, &ArchConfig::tiny(), &tcfg, &acfg, |_| {}).unwrap();
    let elapsed = t.elapsed();
    let refs: Vec<_> = frames.iter().collect();
    let jm = mean_pixel_jm(&net, &refs, tcfg.batch_size).unwrap();
    outcome(
        jm >= 0.95 && elapsed <= Duration::from_secs(600),
        format!("training pixel JM {jm:.4}, {}", secs(elapsed)),
    )
}

/// Returns (lumen JM, lumen HD, media JM, media HD) on held-out phantoms.
fn generalization_seed(seed: u64) -> [f64; 4] {
    let dir = tempfile::tempdir().unwrap();
    let records = synth_phantoms(dir.path(), 100 + seed, 48, 64, 16).unwrap();
    let train: Vec<_> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let test: Vec<_> = records.iter().filter(|r| r.split == Split::Test).cloned().collect();
    let mut models = Vec::new();
    for target in Target::ALL {
        let frames = frames_for(&train, target, false).unwrap();
        let tcfg = TrainConfig { target, epochs: 30, validation_count: 0, seed, ..Default::default() };
        let acfg = AugmentConfig { seed, ..Default::default() };
        models.push(vec![train_model(&frames, &ArchConfig::tiny(), &tcfg, &acfg, |_| {}).unwrap().0]);
    }
    match evaluate_models(&test, [&models[0], &models[1]], 0.5, false, 1.0) {
        Ok(report) => {
            let l = report.row(Target::Lumen, None).unwrap();
            let m = report.row(Target::Media, None).unwrap();
            [l.jm_mean, l.hd_mean, m.jm_mean, m.hd_mean]
        }
        Err(_) => [0.0, f64::INFINITY, 0.0, f64::INFINITY],
    }
}

fn generalization() -> Outcome {
    let t = Instant::now();
    let mut passes = 0;
    let mut runs = Vec::new();
    for (k, seed) in [1u64, 2, 3].into_iter().enumerate() {
        // two passes or two failures settle "2 of 3"
        if passes == 2 || k - passes == 2 {
            break;
        }
        let [lj, lh, mj, mh] = generalization_seed(seed);
        let ok = lj >= 0.85 && mj >= 0.85 && lh <= 3.0 && mh <= 3.0;
        passes += ok as usize;
        runs.push(format!("seed {seed}: lumen {lj:.3}/{lh:.2}px media {mj:.3}/{mh:.2}px"));
    }
    let elapsed = t.elapsed();
    outcome(
        passes >= 2 && elapsed <= Duration::from_secs(1800),
        format!("{passes} seeds pass; {}; {}", runs.join("; "), secs(elapsed)),
    )
}

fn random_mask(rng: &mut ChaCha8Rng, p: f64) -> BinaryMask {
    let bits = (0..256).map(|_| rng.random_bool(p)).collect();
    BinaryMask::new(16, 16, bits).unwrap()
}

fn random_contour(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let n = rng.random_range(1..40);
    (0..n).map(|_| (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0))).collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut jm_mismatch = 0;
    for _ in 0..100 {
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a = random_mask(&mut rng, pa);
        let b = random_mask(&mut rng, pb);
        if jaccard(&a, &b).unwrap() != oracles::naive_jaccard(&a.bits, &b.bits) {
            jm_mismatch += 1;
        }
    }
    let mut hd_worst = 0.0f64;
    for _ in 0..100 {
        let a = random_contour(&mut rng);
        let b = random_contour(&mut rng);
        hd_worst = hd_worst.max((hausdorff(&a, &b, 1.0).unwrap() - oracles::naive_hausdorff(&a, &b)).abs());
    }
    let a = BinaryMask::from_fn(2, 2, |x, _| x == 0).unwrap();
    let b = BinaryMask::from_fn(2, 2, |_, y| y == 1).unwrap();
    let third = jaccard(&a, &b).unwrap() == 1.0 / 3.0;
    let five = hausdorff(&[(0.0, 0.0)], &[(3.0, 4.0)], 1.0).unwrap() == 5.0;
    outcome(
        jm_mismatch == 0 && hd_worst <= 1e-9 && third && five,
        format!("JM mismatches {jm_mismatch}/100, HD max gap {hd_worst:.1e}, 1/3 {third}, 5.0 {five}"),
    )
}

fn as_map(m: &BinaryMask) -> ProbMap {
    ProbMap::new(m.width, m.height, m.bits.iter().map(|&b| b as u8 as f32).collect()).unwrap()
}

/// Worst (center offset, relative axis error) over rasterized round trips.
fn raster_round_trips(rng: &mut ChaCha8Rng, minor: std::ops::Range<f64>, n: usize) -> (f64, f64) {
    let (mut center, mut axes) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let b = rng.random_range(minor.clone());
        let a = (b / rng.random_range(0.5..1.0)).min(26.0);
        let e = EllipseParams::new(
            32.0 + rng.random_range(-3.0..3.0),
            32.0 + rng.random_range(-3.0..3.0),
            a,
            b,
            rng.random_range(0.0..std::f64::consts::PI),
        );
        let f = extract_contour(&as_map(&ellipse_to_mask(&e, 64, 64)), 0.5).unwrap().ellipse;
        center = center.max((f.cx - e.cx).hypot(f.cy - e.cy));
        axes = axes.max(((f.a - e.a) / e.a).abs()).max(((f.b - e.b) / e.b).abs());
    }
    (center, axes)
}

fn ellipses() -> (Outcome, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let a = rng.random_range(4.0..20.0);
        let b = rng.random_range(4.0..a);
        let e = EllipseParams::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), a, b, rng.random_range(0.0..3.0));
        let f = fit_ellipse(&ellipse_to_contour(&e, 48).points).unwrap();
        let rel = [((f.cx - e.cx) / e.a).abs(), ((f.cy - e.cy) / e.a).abs(), ((f.a - e.a) / e.a).abs(), ((f.b - e.b) / e.b).abs()];
        worst = rel.into_iter().fold(worst, f64::max);
    }
    let (center, axes) = raster_round_trips(&mut rng, 10.0..20.0, 50);
    let (small_center, small_axes) = raster_round_trips(&mut rng, 4.0..10.0, 50);
    (
        outcome(
            worst <= 1e-6 && center <= 0.5 && axes <= 0.02,
            format!("parametric rel err {worst:.1e}; raster (minor 10-20 px) center {center:.3} px, axes {:.2}%", axes * 100.0),
        ),
        format!("raster (minor 4-10 px) center {small_center:.3} px, axes {:.2}%", small_axes * 100.0),
    )
}

fn ablation() -> Outcome {
    let t = Instant::now();
    let mut rows = Vec::new();
    for seed in [1u64, 2, 3] {
        let dir = tempfile::tempdir().unwrap();
        let records = synth_phantoms(dir.path(), 200 + seed, 24, 32, 8).unwrap();
        let train: Vec<_> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
        let test: Vec<_> = records.iter().filter(|r| r.split == Split::Test).cloned().collect();
        let frames = frames_for(&train, Target::Lumen, false).unwrap();
        let setup = AblationSetup {
            train: &frames,
            test: &test,
            target: Target::Lumen,
            arch: ArchConfig::tiny(),
            tcfg: TrainConfig { epochs: 40, validation_count: 0, ..Default::default() },
            acfg: AugmentConfig::default(),
            models_per_arm: 5,
            threshold: 0.5,
            half: false,
        };
        rows.extend(run_ablation(&setup, &Arm::ALL, &[seed], |_| {}).unwrap());
    }
    let base = arm_mean(&rows, Arm::Baseline).unwrap();
    let no_ref = arm_mean(&rows, Arm::NoRefine).unwrap();
    let no_aug = arm_mean(&rows, Arm::NoAugment).unwrap();
    outcome(
        base >= no_ref && base >= no_aug,
        format!("held-out JM baseline {base:.4}, no refine {no_ref:.4}, no aug {no_aug:.4}; {}", secs(t.elapsed())),
    )
}

fn ivusnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivusnet"))
        .args(args)
        .env_remove("IVUSNET_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synth, one-epoch train and predict in `dir`.
fn pipeline_run(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let synth = ivusnet(&["synth", "--out", s(dir), "--count", "8", "--size", "32", "--seed", "3"]);
    assert!(synth.status.success());
    let ckpt = dir.join("m.ckpt");
    let train = ivusnet(&[
        "train", "--manifest", s(&dir.join("manifest.tsv")), "--preset", "tiny", "--epochs", "1", "--iterations", "3",
        "--validation-count", "2", "--ensemble", "1", "--lr", "0.001", "--seed", "3", "--out", s(&ckpt),
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let predict = ivusnet(&[
        "predict", "--models", s(&ckpt), "--image", s(&dir.join("img_0002.pgm")), "--out-prob", s(&dir.join("p.ivpm")),
        "--out-mask", s(&dir.join("p.pgm")),
    ]);
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.push(("predict exit".into(), vec![predict.status.code().unwrap_or(-1) as u8]));
    files.sort();
    files
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline_run(a.path());
    let rb = pipeline_run(b.path());
    let differing: Vec<&str> = ra.iter().zip(&rb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let same_set = ra.len() == rb.len() && ra.iter().zip(&rb).all(|(x, y)| x.0 == y.0);

    let net = load_checkpoint(a.path().join("m.ckpt")).unwrap();
    let copy = a.path().join("copy.ckpt");
    save_checkpoint(&net, &copy).unwrap();
    let back = load_checkpoint(&copy).unwrap();
    let img = ivusnet::data::read_pgm(a.path().join("img_0005.pgm")).unwrap();
    let round_trip = ensemble_map(std::slice::from_ref(&net), &img).unwrap()
        == ensemble_map(std::slice::from_ref(&back), &img).unwrap()
        && std::fs::read(a.path().join("m.ckpt")).unwrap() == std::fs::read(&copy).unwrap();
    outcome(
        same_set && differing.is_empty() && round_trip,
        format!("{} artifacts compared, differing {differing:?}, checkpoint round trip {round_trip}", ra.len()),
    )
}

fn reporting() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut records = synth_phantoms(dir.path(), 9, 8, 32, 0).unwrap();
    for (i, r) in records.iter_mut().enumerate() {
        r.category = Category::ALL[i % 4];
        r.split = Split::Test;
    }
    let manifest = dir.path().join("manifest.tsv");
    write_manifest(&records, &manifest).unwrap();
    let preds = dir.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    for (i, r) in load_manifest(&manifest).unwrap().iter().enumerate() {
        for (target, prefix) in [(Target::Lumen, "lum"), (Target::Media, "med")] {
            let truth = r.load_mask(target, 32, 32).unwrap();
            // shift every other frame so the spreads are non-zero
            let shift = i % 2;
            let m = BinaryMask::from_fn(32, 32, |x, y| x >= shift && truth.get(x - shift, y)).unwrap();
            write_mask(&m, preds.join(format!("{prefix}_pred_{i:04}.pgm"))).unwrap();
        }
    }
    let o = ivusnet(&["eval", "--manifest", s(&manifest), "--pred-dir", s(&preds), "--split", "test"]);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let labels = ["All", "No Artifact", "Bifurcation", "Side Vessels", "Shadow"];
    let mut missing = Vec::new();
    for label in labels {
        let Some(line) = text.lines().find(|l| l.starts_with(label)) else {
            missing.push(label);
            continue;
        };
        let cells = line.split("  ").filter(|c| is_cell(c.trim())).count();
        if cells != 4 {
            missing.push(label);
        }
    }
    let header = text.lines().any(|l| l.contains("Lumen JM") && l.contains("Media HD"));
    outcome(
        o.status.success() && missing.is_empty() && header,
        format!("exit {:?}, rows with bad cells {missing:?}", o.status.code()),
    )
}

/// `d.dd (d.dd)`.
fn is_cell(c: &str) -> bool {
    let Some((mean, rest)) = c.split_once(" (") else { return false };
    let Some(std) = rest.strip_suffix(')') else { return false };
    let two = |v: &str| v.split_once('.').is_some_and(|(i, f)| !i.is_empty() && f.len() == 2) && v.parse::<f64>().is_ok();
    two(mean) && two(std)
}

fn record(results: &mut Vec<(usize, &'static str, Outcome)>, n: usize, name: &'static str, o: Outcome) {
    emit(&format!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail));
    results.push((n, name, o));
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    record(&mut results, 1, "gradient suite", gradients());
    record(&mut results, 2, "architecture contract", architecture());
    record(&mut results, 5, "metric oracles", metric_oracles());
    let (six, small) = ellipses();
    record(&mut results, 6, "ellipse recovery", six);
    emit(&format!("criterion 6 info: {small}"));
    record(&mut results, 8, "determinism", determinism());
    record(&mut results, 9, "dataset-conditional reporting", reporting());
    record(&mut results, 3, "overfit", overfit());
    record(&mut results, 4, "generalization", generalization());
    record(&mut results, 7, "ablation direction", ablation());

    results.sort_by_key(|r| r.0);
    emit("summary:");
    for (n, name, o) in &results {
        emit(&format!("  {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }));
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
