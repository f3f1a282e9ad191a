//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Heavy criteria serialize on a shared lock so wall-clock budgets are
//! measured without interference from sibling tests.

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use pmt::harness::{self, AblateGrid, ExperimentConfig};
use pmt::losses::LossWeights;
use pmt::progressive::{
    checkpoint_load, checkpoint_save, history_csv, TrainerConfig, TrainerState, TrainingSet,
};
use pmt::segnet::SegNetConfig;
use pmt::synthdata::{generate, split, DataGenConfig};
use pmt::verify;

static HEAVY: Mutex<()> = Mutex::new(());

fn lock() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|p| p.into_inner())
}

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion}: {detail}");
}

fn checks_pass(checks: &[verify::Check]) -> (bool, String) {
    let failed: Vec<&verify::Check> = checks.iter().filter(|c| !c.passed).collect();
    if failed.is_empty() {
        (true, format!("{} checks green", checks.len()))
    } else {
        let names: Vec<String> = failed
            .iter()
            .map(|c| format!("{} ({})", c.name, c.detail))
            .collect();
        (false, names.join("; "))
    }
}

#[test]
fn criterion_1_gradient_suite() {
    let _guard = lock();
    let t0 = Instant::now();
    let checks = verify::gradient_suite();
    let elapsed = t0.elapsed().as_secs_f64();
    let (ok, detail) = checks_pass(&checks);
    report(
        "1 gradient-suite",
        ok && elapsed < 60.0,
        &format!("{detail}; {elapsed:.1}s (budget 60s)"),
    );
}

#[test]
fn criterion_2_schedule_invariant() {
    let _guard = lock();
    let t0 = Instant::now();
    let checks = verify::schedule_suite();
    let elapsed = t0.elapsed().as_secs_f64();
    let (ok, detail) = checks_pass(&checks);
    report(
        "2 schedule-invariant",
        ok && elapsed < 5.0,
        &format!("{detail}; {elapsed:.2}s (budget 5s)"),
    );
}

#[test]
fn criterion_3_closed_forms() {
    let _guard = lock();
    let checks = verify::closed_form_suite();
    let (ok, detail) = checks_pass(&checks);
    report("3 closed-forms", ok, &detail);
}

#[test]
fn criterion_4_metric_oracle() {
    let _guard = lock();
    let t0 = Instant::now();
    let checks = verify::metric_oracle_suite();
    let elapsed = t0.elapsed().as_secs_f64();
    let (ok, detail) = checks_pass(&checks);
    report(
        "4 metric-oracle",
        ok && elapsed < 10.0,
        &format!("{detail}; {elapsed:.2}s (budget 10s)"),
    );
}

/// A full desk run plus three toggle runs: every gated iteration must show
/// exactly zero lambda1/beta contribution, and each toggle must remove
/// exactly its own term.
#[test]
fn criterion_5_gating_soundness() {
    let _guard = lock();
    let data_cfg = DataGenConfig {
        count: 60,
        height: 32,
        width: 32,
        ..Default::default()
    };
    let samples = generate(&data_cfg).expect("generation");
    let sp = split(samples.len(), 0.15, 9).expect("split");
    let (tset, _) = TrainingSet::from_split(&samples, &sp);
    let run = |plf: bool, dda: bool, mt: bool| {
        let cfg = TrainerConfig {
            total_iters: 200,
            buffer_len: 8,
            seed: 9,
            plf_on: plf,
            dda_on: dda,
            mt_on: mt,
            ..Default::default()
        };
        let mut state =
            TrainerState::init(cfg, SegNetConfig::default(), LossWeights::default()).unwrap();
        state.run(&tset).unwrap();
        state.history
    };

    let full = run(true, true, true);
    let gated: Vec<_> = full.iter().filter(|r| r.loss.plf_pass == 0).collect();
    let sound = gated.iter().all(|r| {
        let b = &r.loss;
        b.l_total == (b.l_ce + b.l_dice) + b.lambda2_t * b.l_t && b.l_aln == 0.0 && b.l_u == 0.0
    });

    let no_plf = run(false, true, true);
    let plf_structure = no_plf.iter().all(|r| r.loss.plf_pass == 1);
    let no_dda = run(true, false, true);
    let dda_structure = no_dda.iter().all(|r| r.loss.l_aln == 0.0);
    let no_mt = run(true, true, false);
    let mt_structure = no_mt.iter().all(|r| r.loss.l_t == 0.0);

    report(
        "5 gating-soundness",
        sound && plf_structure && dda_structure && mt_structure && !full.is_empty(),
        &format!(
            "{} of {} iterations gated with exact zero contribution; toggles remove exactly their terms",
            gated.len(),
            full.len()
        ),
    );
}

/// The headline desk-scale experiment: 200 samples at 64x64 with 10%
/// labeled, 2000 iterations, 3 seeds. Mean test Dice of the co-trained
/// pairs must beat supervised-only by 0.02 absolute and stay within 0.005
/// of the plain mean-teacher baseline.
#[test]
fn criterion_6_semi_supervised_gain() {
    let _guard = lock();
    let t0 = Instant::now();
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.data.count, 200);
    assert_eq!((cfg.data.height, cfg.data.width), (64, 64));
    assert_eq!(cfg.data.labeled_fraction, 0.1);
    assert_eq!(cfg.trainer.total_iters, 2000);
    assert_eq!(cfg.seeds.len(), 3);

    let dir = tempfile::tempdir().expect("tempdir");
    let rows = harness::compare(&cfg, dir.path()).expect("compare completes");
    let elapsed = t0.elapsed().as_secs_f64();

    let dice = |label: &str| {
        rows.iter()
            .find(|r| r.label == label && r.metric == "dice")
            .map(|r| r.mean)
            .expect("summary row present")
    };
    let (pmt, mt, sup) = (
        dice("pmt"),
        dice("mt_baseline"),
        dice("supervised_baseline"),
    );
    let gain_ok = pmt >= sup + 0.02;
    let mt_ok = pmt >= mt - 0.005;
    // the 15-minute budget is stated for a 4-core CPU; scale for narrower boxes
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let budget = 900.0 * 4.0 / (cores.min(4) as f64);
    let time_ok = elapsed <= budget;
    report(
        "6 semi-supervised-gain",
        gain_ok && mt_ok && time_ok,
        &format!(
            "dice pmt {pmt:.4} vs supervised {sup:.4} (need +0.02) and mt {mt:.4} (need -0.005); {elapsed:.0}s of {budget:.0}s budget ({cores} cores)"
        ),
    );
}

/// Identical config + seed must give byte-identical history and report
/// CSVs, and a mid-run checkpoint must resume into the continuous run's
/// history bitwise.
#[test]
fn criterion_7_determinism_and_resumption() {
    let _guard = lock();
    let mut cfg = ExperimentConfig::default();
    cfg.data.count = 60;
    cfg.data.height = 32;
    cfg.data.width = 32;
    cfg.data.labeled_fraction = 0.15;
    cfg.trainer.total_iters = 120;
    cfg.trainer.buffer_len = 8;

    let samples = generate(&cfg.data).expect("generation");
    let dir = tempfile::tempdir().expect("tempdir");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    harness::train_one(&cfg, &samples, "pmt", 4, &a).expect("run a");
    harness::train_one(&cfg, &samples, "pmt", 4, &b).expect("run b");
    let bytes = |p: &Path, f: &str| std::fs::read(p.join(f)).expect("run output");
    let identical = bytes(&a, "history.csv") == bytes(&b, "history.csv")
        && bytes(&a, "report.csv") == bytes(&b, "report.csv");

    // mid-run resume, deliberately inside a phase
    let sp = split(samples.len(), cfg.data.labeled_fraction, 4).expect("split");
    let (tset, _) = TrainingSet::from_split(&samples, &sp);
    let mut trainer_cfg = cfg.trainer.clone();
    trainer_cfg.seed = 4;
    let mut continuous =
        TrainerState::init(trainer_cfg.clone(), cfg.net.clone(), cfg.weights.clone()).unwrap();
    continuous.run(&tset).unwrap();
    let full_csv = history_csv(&continuous.history);

    let mut first =
        TrainerState::init(trainer_cfg, cfg.net.clone(), cfg.weights.clone()).unwrap();
    first.run_steps(&tset, Some(77)).unwrap();
    let ckpt = dir.path().join("mid.ckpt");
    checkpoint_save(&first, &ckpt).unwrap();
    let mut resumed = checkpoint_load(&ckpt).unwrap();
    resumed.run(&tset).unwrap();
    let stitched = format!(
        "{}{}",
        history_csv(&first.history),
        history_csv(&resumed.history).split_once('\n').unwrap().1
    );
    let resume_ok = stitched == full_csv;

    report(
        "7 determinism-and-resumption",
        identical && resume_ok,
        &format!(
            "repeat run byte-identical: {identical}; resume at step 77 reproduces continuous history: {resume_ok}"
        ),
    );
}

/// Tenfold lambda sweep: the default (20, 10) cell must rank in the top 3
/// of the 9 cells by mean Dice across 3 seeds.
#[test]
fn criterion_8_lambda_sweep_sanity() {
    let _guard = lock();
    let mut cfg = ExperimentConfig::default();
    // reduced desk scale keeps the 27-run grid tractable
    cfg.data.count = 120;
    cfg.data.height = 32;
    cfg.data.width = 32;
    cfg.trainer.total_iters = 1000;

    let dir = tempfile::tempdir().expect("tempdir");
    let (rows, failures) =
        harness::ablate(&cfg, AblateGrid::Lambda, dir.path()).expect("sweep completes");
    let mut cells: Vec<(String, f64)> = rows
        .iter()
        .filter(|r| r.metric == "dice")
        .map(|r| (r.label.clone(), r.mean))
        .collect();
    assert_eq!(cells.len() + failures.len() / cfg.seeds.len().max(1), 9);
    cells.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let rank = cells
        .iter()
        .position(|(label, _)| label == "l1_20_l2_10")
        .map(|p| p + 1);
    let table: Vec<String> = cells
        .iter()
        .map(|(l, d)| format!("{l}={d:.4}"))
        .collect();
    report(
        "8 lambda-sweep-sanity",
        rank.is_some_and(|r| r <= 3),
        &format!(
            "default cell rank {:?} of {} ({}); {} diverged cells",
            rank,
            cells.len(),
            table.join(", "),
            failures.len()
        ),
    );
}
