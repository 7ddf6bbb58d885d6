//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! `MATR_ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use matr_core::alignment::{hard_dtw, soft_dtw, AlignMode, CostMatrix};
use matr_core::datakit::{build_pretrain_set, gen_synthetic, PretrainConfig, SynthConfig};
use matr_core::heads::{nms_1d, Segment, NMS_IOU_THRESHOLD};
use matr_core::metrics::{evaluate, PairId};
use matr_core::autodiff::AdamWConfig;
use matr_core::model::ModelConfig;
use matr_core::objectives::LossWeights;
use matr_core::pipeline::{run_pipeline, PipelineResult, RunConfig};
use rand::Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const MODES: [AlignMode; 2] = [AlignMode::Global, AlignMode::Subsequence];
/// Weight of both alignment losses in the full configuration.
const ALIGN_WEIGHT: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_cost(r: &mut impl Rng, m: usize, n: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..n).map(|_| r.random_range(0.0..2.0)).collect()).collect()
}

fn path_cells(path: &matr_core::autodiff::Array) -> Vec<(usize, usize)> {
    let (m, n) = (path.rows(), path.cols());
    (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| path.get2(i, j) == 1.0).collect()
}

fn soft_dtw_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for k in 0..200 {
        let (m, n) = (r.random_range(1..=6), r.random_range(1..=6));
        let c = random_cost(&mut r, m, n);
        let cm = CostMatrix::from_rows(&c).unwrap();
        let mode = MODES[k % 2];
        for gamma in [0.01, 0.1, 1.0] {
            let got = soft_dtw(&cm, gamma, mode).unwrap().soft_cost;
            worst = worst.max((got - brute_soft(&c, gamma, mode)).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-9 && secs < 5.0, format!("max |dp - enum| = {worst:.2e}, {secs:.2}s"))
}

fn hard_dtw_limit() -> Outcome {
    let mut r = rng(102);
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for k in 0..200 {
        let c = random_cost(&mut r, 8, 8);
        let cm = CostMatrix::from_rows(&c).unwrap();
        let mode = MODES[k % 2];
        let soft = soft_dtw(&cm, 1e-3, mode).unwrap().soft_cost;
        let (hard, path) = hard_dtw(&cm, mode);
        worst = worst.max((soft - hard).abs());
        let (want, want_path) = brute_hard(&c, mode);
        if hard != want || path_cells(&path) != want_path {
            mismatches += 1;
        }
    }
    outcome(
        worst <= 0.01 && mismatches == 0,
        format!("max |soft - hard| = {worst:.2e}, brute-force mismatches {mismatches}"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut failed = Vec::new();
    for (name, case) in grad_cases::ALL {
        if catch_unwind(AssertUnwindSafe(case)).is_err() {
            failed.push(*name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failed.is_empty() && secs < 60.0,
        format!("{} cases, failed {failed:?}, {secs:.1}s", grad_cases::ALL.len()),
    )
}

fn nms_and_metrics() -> Outcome {
    let mut r = rng(104);
    let mut nms_bad = 0;
    for _ in 0..1000 {
        let n = r.random_range(0..15);
        let segs: Vec<Segment> = (0..n)
            .map(|_| {
                let s = r.random_range(0..10) as f64;
                let len = r.random_range(1..8) as f64;
                Segment::new(s, s + len, r.random_range(0..5) as f64 / 4.0)
            })
            .collect();
        if nms_1d(&segs, NMS_IOU_THRESHOLD) != nms_reference(&segs, NMS_IOU_THRESHOLD) {
            nms_bad += 1;
        }
    }
    let mut metric_bad = 0;
    for _ in 0..200 {
        let n = r.random_range(1..20);
        let mut gt = BTreeMap::new();
        let mut pred = BTreeMap::new();
        for i in 0..n {
            let id = PairId::new(format!("t{i}"), "q");
            let gs = r.random_range(0..20) as f64;
            gt.insert(id.clone(), Segment::new(gs, gs + r.random_range(1..10) as f64, 1.0));
            if r.random_bool(0.8) {
                let ps = r.random_range(0..20) as f64;
                pred.insert(id, Segment::new(ps, ps + r.random_range(0..10) as f64, 0.5));
            }
        }
        let (mut sum, mut hits) = (0.0, 0usize);
        for (id, g) in &gt {
            let iou = pred.get(id).map_or(0.0, |p: &Segment| {
                let inter = (p.end_sec.min(g.end_sec) - p.start_sec.max(g.start_sec)).max(0.0);
                inter / ((p.end_sec - p.start_sec) + (g.end_sec - g.start_sec) - inter)
            });
            sum += iou;
            hits += usize::from(iou >= 0.5);
        }
        let rep = evaluate(&pred, &gt).unwrap();
        if rep.miou != sum / n as f64 || rep.recall_at_1 != hits as f64 / n as f64 {
            metric_bad += 1;
        }
    }
    outcome(nms_bad == 0 && metric_bad == 0, format!("nms mismatches {nms_bad}/1000, metric mismatches {metric_bad}/200"))
}

fn pretrain_labels() -> Outcome {
    let data = SynthConfig { n_train: 0, n_val: 0, n_test: 1, n_unlabeled: 5000, ..SynthConfig::default() };
    let ds = gen_synthetic(&data, 105).unwrap();
    let (set, skipped) = build_pretrain_set(&ds.unlabeled, 105, &PretrainConfig::default());
    let mut bad = 0;
    let mut tags = std::collections::BTreeSet::new();
    for s in &set {
        let (a, b) = s.span;
        tags.insert(format!("{:?}", s.augmentation));
        let contiguous = (0..s.labels.fg.len()).all(|i| s.labels.fg[i] == (a..=b).contains(&i));
        let offsets = (a..=b).all(|i| {
            let (l, r) = s.labels.offsets[i];
            i as f64 - l == a as f64 && i as f64 + r == b as f64
        });
        if !(contiguous && offsets) {
            bad += 1;
        }
    }
    outcome(
        bad == 0 && set.len() == 10_000 && skipped == 0 && tags.len() == 5,
        format!("{} samples, {bad} violations, augmentations {tags:?}", set.len()),
    )
}

/// Desk-scale configuration for the end-to-end runs. Pre-training runs
/// without the alignment terms; they collapse the projected features before
/// the clip-matching skill forms.
fn synthetic_config(seed: u64, root: &Path) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.data.n_val = 0;
    cfg.model = ModelConfig { input_dim: cfg.data.feature_dim, d: 32, k: 2, dropout_projection: 0.0, ..ModelConfig::default() };
    cfg.pretrain_loss = LossWeights { lambda_seg: 0.1, lambda_align_pre: 0.0, lambda_align_post: 0.0, ..LossWeights::default() };
    cfg.loss = LossWeights { lambda_align_pre: ALIGN_WEIGHT, lambda_align_post: ALIGN_WEIGHT, ..LossWeights::default() };
    cfg.pretrain = PretrainConfig { noise_rel_sigma: 0.3, ..PretrainConfig::default() };
    cfg.pretrain_optimizer = AdamWConfig { learning_rate: 1e-3, ..AdamWConfig::default() };
    cfg.optimizer = AdamWConfig { learning_rate: 1e-4, ..AdamWConfig::default() };
    cfg.batch_size = 8;
    cfg.pretrain_epochs = 200;
    cfg.epochs = 4;
    cfg.paths.data_dir = root.join("data");
    cfg.paths.out_dir = root.join("runs");
    cfg
}

struct Run {
    result: PipelineResult,
    wall: Duration,
}

fn run(cfg: &RunConfig) -> Run {
    let start = Instant::now();
    let result = run_pipeline(cfg).expect("pipeline run");
    Run { result, wall: start.elapsed() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct EndToEnd {
    full: Vec<Run>,
}

fn end_to_end() -> EndToEnd {
    let full = SEEDS
        .iter()
        .map(|&s| {
            let dir = tempfile::tempdir().unwrap();
            let r = run(&synthetic_config(s, dir.path()));
            println!(
                "  seed {s}: mIoU {:.3} R@1 {:.3} ({:.0}s)",
                r.result.report.miou,
                r.result.report.recall_at_1,
                r.wall.as_secs_f64()
            );
            r
        })
        .collect();
    EndToEnd { full }
}

fn localization(e: &EndToEnd) -> Outcome {
    let miou = mean(&e.full.iter().map(|r| r.result.report.miou).collect::<Vec<_>>());
    let r1 = mean(&e.full.iter().map(|r| r.result.report.recall_at_1).collect::<Vec<_>>());
    let slowest = e.full.iter().map(|r| r.wall).max().unwrap().as_secs_f64();
    outcome(
        miou >= 0.75 && r1 >= 0.70 && slowest <= 900.0,
        format!("mean mIoU {miou:.3}, mean R@1 {r1:.3}, slowest run {slowest:.0}s"),
    )
}

fn ablations(e: &EndToEnd) -> Outcome {
    let arm = |name: &str, f: &dyn Fn(&mut RunConfig)| -> f64 {
        let v: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let dir = tempfile::tempdir().unwrap();
                let mut cfg = synthetic_config(s, dir.path());
                f(&mut cfg);
                let r = run(&cfg);
                println!("  {name} seed {s}: mIoU {:.3}", r.result.report.miou);
                r.result.report.miou
            })
            .collect();
        mean(&v)
    };
    let full = mean(&e.full.iter().map(|r| r.result.report.miou).collect::<Vec<_>>());
    let no_align = arm("no alignment", &|c| {
        for w in [&mut c.loss, &mut c.pretrain_loss] {
            w.lambda_align_pre = 0.0;
            w.lambda_align_post = 0.0;
        }
    });
    let no_pretrain = arm("no pre-training", &|c| c.use_pretraining = false);
    outcome(
        full >= no_align && full >= no_pretrain,
        format!("full {full:.3}, no alignment {no_align:.3}, no pre-training {no_pretrain:.3}"),
    )
}

fn determinism() -> Outcome {
    let small = |root: &Path| {
        let mut cfg = synthetic_config(8, root);
        cfg.pretrain_epochs = 2;
        cfg.epochs = 2;
        cfg
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (small(a.path()), small(b.path()));
    let ra = run_pipeline(&ca).unwrap();
    let rb = run_pipeline(&cb).unwrap();
    let same = |f: &dyn Fn(&RunConfig) -> std::path::PathBuf| fs::read(f(&ca)).unwrap() == fs::read(f(&cb)).unwrap();
    let ckpts = same(&|c| c.default_pretrain_checkpoint()) && same(&|c| c.default_train_checkpoint());
    let reports = ra.report == rb.report && same(&|c| c.paths.out_dir.join("eval/report.json"));
    outcome(ckpts && reports, format!("checkpoints identical: {ckpts}, reports identical: {reports}"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("MATR_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut check = |k: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(k) {
            let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| outcome(false, "panicked"));
            println!("{} [{k}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((k, name, o));
        }
    };
    check(1, "soft-DTW matches path enumeration", &mut soft_dtw_oracle);
    check(2, "hard-DTW limit and brute force", &mut hard_dtw_limit);
    check(3, "finite-difference gradient suite", &mut gradient_suite);
    check(4, "NMS and metric oracles", &mut nms_and_metrics);
    check(5, "pre-training label consistency", &mut pretrain_labels);
    let e2e = (wanted(6) || wanted(7)).then(end_to_end);
    if let Some(e) = &e2e {
        check(6, "end-to-end synthetic localization", &mut || localization(e));
        check(7, "ablation ordering", &mut || ablations(e));
    }
    check(8, "pipeline determinism", &mut determinism);
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
