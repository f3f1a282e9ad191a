//! Config-driven experiment orchestration: single runs, mode comparisons,
//! ablation grids, and result merging.
//!
//! Configs are JSON with strict unknown-key rejection; every field has a
//! default, `--override a.b.c=value` patches exactly one dotted path, and
//! all randomness flows from the config's seeds. Independent `(label, seed)`
//! runs execute on parallel workers; each run is internally sequential per
//! the trainer's contract, so results are reproducible bit for bit.

pub mod cli;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossWeights;
use crate::progressive::{
    checkpoint_save, history_csv, Mode, TrainError, TrainerConfig, TrainerState, TrainingSet,
};
use crate::segmetrics::{evaluate_run, Aggregate, EvalConfig, MetricError, MetricReport};
use crate::segnet::SegNetConfig;
use crate::synthdata::{generate, split, DataError, DataGenConfig, Sample};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl HarnessError {
    /// Exit-code contract: 1 config error, 2 runtime abort, 3 verification
    /// failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Verification(_) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataGenConfig,
    pub net: SegNetConfig,
    pub trainer: TrainerConfig,
    pub weights: LossWeights,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataGenConfig::default(),
            net: SegNetConfig::default(),
            trainer: TrainerConfig::default(),
            weights: LossWeights::default(),
            eval: EvalConfig::default(),
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Cross-field validation; messages name the offending key.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| Err(HarnessError::Config(m));
        self.data
            .validate()
            .map_err(|e| HarnessError::Config(format!("data: {e}")))?;
        self.net
            .validate()
            .map_err(|e| HarnessError::Config(format!("net: {e}")))?;
        self.trainer
            .validate()
            .map_err(|e| HarnessError::Config(format!("trainer: {e}")))?;
        self.weights
            .validate()
            .map_err(|e| HarnessError::Config(format!("weights: {e}")))?;
        let fac = self.net.downsample_factor();
        if self.data.height % fac != 0 || self.data.width % fac != 0 {
            return cfg(format!(
                "data.height/data.width ({}x{}) must be divisible by the \
                 network downsampling factor 2^net.depth = {fac}",
                self.data.height, self.data.width
            ));
        }
        let n_test = (self.data.count as f64 * crate::synthdata::TEST_FRACTION + 0.5) as usize;
        let n_train = self.data.count.saturating_sub(n_test);
        let n_lab = (n_train as f64 * self.data.labeled_fraction + 0.5) as usize;
        if n_lab < 1 {
            return cfg(
                "data.count and data.labeled_fraction yield fewer than 1 labeled sample".into(),
            );
        }
        if !(0.0..1.0).contains(&self.eval.threshold) {
            return cfg("eval.threshold must be in (0, 1)".into());
        }
        if self.eval.spacing <= 0.0 {
            return cfg("eval.spacing must be > 0".into());
        }
        if self.seeds.is_empty() {
            return cfg("seeds must not be empty".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies one `dotted.path=value` override to a JSON tree, creating
/// intermediate objects as needed. The value is parsed as JSON when
/// possible, else taken as a string.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<(), HarnessError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{spec}` is not key=value")))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(HarnessError::Config(format!("override key `{path}` has an empty segment")));
        }
        let obj = cur.as_object_mut().ok_or_else(|| {
            HarnessError::Config(format!(
                "override key `{}` does not address an object",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("override paths have at least one segment");
}

/// Loads a config file (or the defaults) and applies overrides. Unknown keys
/// are rejected by name.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<ExperimentConfig, HarnessError> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(ExperimentConfig::default())
            .expect("default config serializes"),
    };
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Outcome of one training run.
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub report: MetricReport,
    pub run_dir: PathBuf,
}

/// Trains one configuration on pre-generated samples, writes
/// `history.csv`, `checkpoint.ckpt`, `report.csv`, `report.json`, and
/// `config.json` into `run_dir`, and evaluates on the held-out test split.
pub fn train_one(
    cfg: &ExperimentConfig,
    samples: &[Sample],
    label: &str,
    seed: u64,
    run_dir: &Path,
) -> Result<RunResult, HarnessError> {
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let sp = split(samples.len(), cfg.data.labeled_fraction, seed)?;
    let (tset, test) = TrainingSet::from_split(samples, &sp);

    let mut trainer_cfg = cfg.trainer.clone();
    trainer_cfg.seed = seed;
    let mut state = TrainerState::init(trainer_cfg, cfg.net.clone(), cfg.weights.clone())?;
    state.run(&tset)?;

    let history_path = run_dir.join("history.csv");
    fs::write(&history_path, history_csv(&state.history)).map_err(|e| io_err(&history_path, e))?;
    let ckpt_path = run_dir.join("checkpoint.ckpt");
    checkpoint_save(&state, &ckpt_path)?;
    let cfg_path = run_dir.join("config.json");
    fs::write(&cfg_path, cfg.to_json()).map_err(|e| io_err(&cfg_path, e))?;

    let echo = serde_json::json!({
        "label": label,
        "seed": seed,
        "eval": cfg.eval,
        "trainer_mode": cfg.trainer.mode,
    });
    let report = evaluate_run(&state.net, &state.pairs, &test, &cfg.eval, echo)?;
    let report_csv_path = run_dir.join("report.csv");
    fs::write(&report_csv_path, report.to_csv()).map_err(|e| io_err(&report_csv_path, e))?;
    let report_json_path = run_dir.join("report.json");
    fs::write(&report_json_path, report.to_json()).map_err(|e| io_err(&report_json_path, e))?;

    Ok(RunResult {
        label: label.to_string(),
        seed,
        report,
        run_dir: run_dir.to_path_buf(),
    })
}

/// One grid cell / mode variant to run across the seed list.
#[derive(Clone)]
pub struct RunSpec {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Runs every `(spec, seed)` combination on parallel workers, preserving
/// input order in the output. When `tolerate_failures` is set, failed runs
/// are reported per label instead of aborting the whole matrix (a diverging
/// grid cell is a result, not a reason to lose the others).
pub fn run_matrix(
    specs: &[RunSpec],
    out_root: &Path,
    tolerate_failures: bool,
) -> Result<(Vec<RunResult>, Vec<(String, u64, HarnessError)>), HarnessError> {
    if specs.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    // all specs share the data config by construction
    let samples = generate(&specs[0].config.data)?;
    let jobs: Vec<(usize, &RunSpec, u64)> = specs
        .iter()
        .flat_map(|s| s.config.seeds.iter().map(move |&seed| (s, seed)))
        .enumerate()
        .map(|(i, (s, seed))| (i, s, seed))
        .collect();
    let outcomes: Vec<(usize, String, u64, Result<RunResult, HarnessError>)> = jobs
        .par_iter()
        .map(|&(i, spec, seed)| {
            let run_dir = out_root.join(&spec.label).join(format!("seed_{seed}"));
            let res = train_one(&spec.config, &samples, &spec.label, seed, &run_dir);
            (i, spec.label.clone(), seed, res)
        })
        .collect();
    let mut ordered = outcomes;
    ordered.sort_by_key(|(i, _, _, _)| *i);
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (_, label, seed, res) in ordered {
        match res {
            Ok(r) => results.push(r),
            Err(e) if tolerate_failures => failures.push((label, seed, e)),
            Err(e) => return Err(e),
        }
    }
    Ok((results, failures))
}

/// Aggregate of one metric across the seeds of one label.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Collapses run results into per-(label, metric) rows, labels in first-seen
/// order, metrics in the fixed order dice, jaccard, hd95, asd.
pub fn summarize(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut rows = Vec::new();
    for label in labels {
        let runs: Vec<&RunResult> = results.iter().filter(|r| r.label == label).collect();
        let metric =
            |pick: fn(&MetricReport) -> Aggregate| -> Aggregate {
                let means: Vec<f64> = runs
                    .iter()
                    .map(|r| pick(&r.report).mean)
                    .filter(|v| v.is_finite())
                    .collect();
                Aggregate::from_values(&means)
            };
        for (name, agg) in [
            ("dice", metric(|r| r.dice)),
            ("jaccard", metric(|r| r.jaccard)),
            ("hd95", metric(|r| r.hd95)),
            ("asd", metric(|r| r.asd)),
        ] {
            rows.push(SummaryRow {
                label: label.to_string(),
                metric: name.to_string(),
                mean: agg.mean,
                std: agg.std,
                n: agg.n,
            });
        }
    }
    rows
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("label,metric,mean,std,n\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.label, r.metric, r.mean, r.std, r.n);
    }
    out
}

/// Plain-text table: one line per label, metrics as `mean+-std` columns.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut out = format!(
        "{:<28} {:>16} {:>16} {:>16} {:>16}\n",
        "label", "dice", "jaccard", "hd95", "asd"
    );
    for label in labels {
        let cell = |metric: &str| -> String {
            rows.iter()
                .find(|r| r.label == label && r.metric == metric)
                .map(|r| format!("{:.4}+-{:.4}", r.mean, r.std))
                .unwrap_or_else(|| "-".into())
        };
        let _ = writeln!(
            out,
            "{:<28} {:>16} {:>16} {:>16} {:>16}",
            label,
            cell("dice"),
            cell("jaccard"),
            cell("hd95"),
            cell("asd")
        );
    }
    out
}

fn write_summary(dir: &Path, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let csv_path = dir.join("summary.csv");
    fs::write(&csv_path, summary_csv(rows)).map_err(|e| io_err(&csv_path, e))?;
    let txt_path = dir.join("summary.txt");
    fs::write(&txt_path, summary_table(rows)).map_err(|e| io_err(&txt_path, e))?;
    Ok(())
}

pub fn mode_label(mode: Mode) -> &'static str {
    match mode {
        Mode::Pmt => "pmt",
        Mode::MtBaseline => "mt_baseline",
        Mode::SupervisedBaseline => "supervised_baseline",
    }
}

/// Trains all three modes over the seed list and writes one summary table.
pub fn compare(cfg: &ExperimentConfig, out_root: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let specs: Vec<RunSpec> = [Mode::Pmt, Mode::MtBaseline, Mode::SupervisedBaseline]
        .into_iter()
        .map(|mode| {
            let mut c = cfg.clone();
            c.trainer.mode = mode;
            RunSpec {
                label: mode_label(mode).to_string(),
                config: c,
            }
        })
        .collect();
    let (results, _) = run_matrix(&specs, out_root, false)?;
    let rows = summarize(&results);
    write_summary(out_root, &rows)?;
    Ok(rows)
}

/// Which ablation grid to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateGrid {
    /// Component toggles: off / +plf / +dda / +plf+dda / +plf+dda+mt.
    Toggles,
    /// Tenfold scalings of the two regularization strengths, 3x3.
    Lambda,
}

/// Builds the ablation run specs for a grid.
pub fn ablate_specs(cfg: &ExperimentConfig, grid: AblateGrid) -> Vec<RunSpec> {
    match grid {
        AblateGrid::Toggles => [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (true, true, false),
            (true, true, true),
        ]
        .into_iter()
        .map(|(plf, dda, mt)| {
            let mut c = cfg.clone();
            c.trainer.mode = Mode::Pmt;
            c.trainer.plf_on = plf;
            c.trainer.dda_on = dda;
            c.trainer.mt_on = mt;
            RunSpec {
                label: format!(
                    "plf{}_dda{}_mt{}",
                    u8::from(plf),
                    u8::from(dda),
                    u8::from(mt)
                ),
                config: c,
            }
        })
        .collect(),
        AblateGrid::Lambda => {
            // tenfold scalings; division keeps e.g. 20/10 = 2 exact
            let scale = |v: f64, s: i32| match s {
                -1 => v / 10.0,
                1 => v * 10.0,
                _ => v,
            };
            let mut specs = Vec::new();
            for s1 in [-1, 0, 1] {
                for s2 in [-1, 0, 1] {
                    let mut c = cfg.clone();
                    c.trainer.mode = Mode::Pmt;
                    c.weights.lambda1_hat = scale(cfg.weights.lambda1_hat, s1);
                    c.weights.lambda2_hat = scale(cfg.weights.lambda2_hat, s2);
                    specs.push(RunSpec {
                        label: format!(
                            "l1_{}_l2_{}",
                            c.weights.lambda1_hat, c.weights.lambda2_hat
                        ),
                        config: c,
                    });
                }
            }
            specs
        }
    }
}

/// Runs an ablation grid over the seed list. Diverged cells are skipped and
/// reported alongside the summary rows.
pub fn ablate(
    cfg: &ExperimentConfig,
    grid: AblateGrid,
    out_root: &Path,
) -> Result<(Vec<SummaryRow>, Vec<(String, u64, HarnessError)>), HarnessError> {
    let specs = ablate_specs(cfg, grid);
    let (results, failures) = run_matrix(&specs, out_root, true)?;
    let rows = summarize(&results);
    write_summary(out_root, &rows)?;
    Ok((rows, failures))
}

/// Merged view of completed runs under a results directory.
pub struct MergeOutcome {
    pub rows: Vec<SummaryRow>,
    /// Directories that look like runs but are missing their report.
    pub partial: Vec<PathBuf>,
}

fn scan_runs(dir: &Path, found: &mut Vec<(String, u64, MetricReport)>, partial: &mut Vec<PathBuf>) {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return,
    };
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let report_path = sub.join("report.json");
        if report_path.is_file() {
            match fs::read_to_string(&report_path)
                .ok()
                .and_then(|t| serde_json::from_str::<MetricReport>(&t).ok())
            {
                Some(report) => {
                    let label = report
                        .config_echo
                        .get("label")
                        .and_then(|v| v.as_str())
                        .unwrap_or("unknown")
                        .to_string();
                    let seed = report
                        .config_echo
                        .get("seed")
                        .and_then(|v| v.as_u64())
                        .unwrap_or(0);
                    found.push((label, seed, report));
                }
                None => partial.push(sub.clone()),
            }
        } else if sub.join("history.csv").is_file() {
            partial.push(sub.clone());
        } else {
            scan_runs(&sub, found, partial);
        }
    }
}

/// Merges every completed run found under `results_dir` into summary files.
/// Missing or unreadable run directories are listed, not fatal.
pub fn report_merge(results_dir: &Path, out_dir: &Path) -> Result<MergeOutcome, HarnessError> {
    let mut found = Vec::new();
    let mut partial = Vec::new();
    scan_runs(results_dir, &mut found, &mut partial);
    found.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    let results: Vec<RunResult> = found
        .into_iter()
        .map(|(label, seed, report)| RunResult {
            label,
            seed,
            report,
            run_dir: PathBuf::new(),
        })
        .collect();
    let rows = summarize(&results);
    write_summary(out_dir, &rows)?;
    Ok(MergeOutcome { rows, partial })
}

/// Concatenates per-run histories into one long CSV with label/seed columns.
pub fn merge_curves(results_dir: &Path, out_path: &Path) -> Result<usize, HarnessError> {
    let mut found = Vec::new();
    let mut partial = Vec::new();
    scan_runs(results_dir, &mut found, &mut partial);
    let mut out = format!("label,seed,{}\n", crate::progressive::HISTORY_HEADER);
    let mut merged = 0usize;
    for (label, seed, _) in &found {
        let dir_guess = results_dir.join(label).join(format!("seed_{seed}"));
        let hist = dir_guess.join("history.csv");
        if let Ok(text) = fs::read_to_string(&hist) {
            for line in text.lines().skip(1) {
                let _ = writeln!(out, "{label},{seed},{line}");
            }
            merged += 1;
        }
    }
    fs::write(out_path, out).map_err(|e| io_err(out_path, e))?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let json = cfg.to_json();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        // parse -> serialize -> parse is a fixed point
        assert_eq!(back.to_json(), json);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = load_config(None, &["trainer.bufferlen=8".into()]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("bufferlen"), "message was: {msg}");
    }

    #[test]
    fn override_affects_exactly_one_key() {
        let base = load_config(None, &[]).unwrap();
        let patched = load_config(None, &["trainer.buffer_len_B=8".into()]).unwrap();
        assert_eq!(patched.trainer.buffer_len, 8);
        let mut expect = base;
        expect.trainer.buffer_len = 8;
        assert_eq!(patched, expect);
    }

    #[test]
    fn override_parses_numbers_strings_and_bools() {
        let cfg = load_config(
            None,
            &[
                "trainer.mode=\"mt_baseline\"".into(),
                "trainer.plf_on=false".into(),
                "weights.lambda1_hat=2.5".into(),
                "seeds=[7,8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.trainer.mode, Mode::MtBaseline);
        assert!(!cfg.trainer.plf_on);
        assert_eq!(cfg.weights.lambda1_hat, 2.5);
        assert_eq!(cfg.seeds, vec![7, 8]);
        // bare strings work too
        let cfg2 = load_config(None, &["trainer.mode=supervised_baseline".into()]).unwrap();
        assert_eq!(cfg2.trainer.mode, Mode::SupervisedBaseline);
    }

    #[test]
    fn cross_field_validation_names_keys() {
        let err = load_config(None, &["data.height=63".into()]).unwrap_err();
        assert!(format!("{err}").contains("data.height"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn lambda_grid_matches_tenfold_axes() {
        let cfg = ExperimentConfig::default();
        let specs = ablate_specs(&cfg, AblateGrid::Lambda);
        assert_eq!(specs.len(), 9);
        let l1: Vec<f64> = specs.iter().map(|s| s.config.weights.lambda1_hat).collect();
        assert!(l1.contains(&2.0) && l1.contains(&20.0) && l1.contains(&200.0));
        let l2: Vec<f64> = specs.iter().map(|s| s.config.weights.lambda2_hat).collect();
        assert!(l2.contains(&1.0) && l2.contains(&10.0) && l2.contains(&100.0));
    }

    #[test]
    fn toggle_grid_has_five_rows() {
        let specs = ablate_specs(&ExperimentConfig::default(), AblateGrid::Toggles);
        assert_eq!(specs.len(), 5);
        assert_eq!(specs[0].label, "plf0_dda0_mt0");
        assert_eq!(specs[4].label, "plf1_dda1_mt1");
    }

    #[test]
    fn empty_results_dir_merges_to_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let outcome = report_merge(dir.path(), out.path()).unwrap();
        assert!(outcome.rows.is_empty());
        assert!(outcome.partial.is_empty());
        let csv = fs::read_to_string(out.path().join("summary.csv")).unwrap();
        assert_eq!(csv, "label,metric,mean,std,n\n");
    }

    #[test]
    fn summarize_two_seeds_hand_arithmetic() {
        let mk = |label: &str, seed: u64, dice: f64| RunResult {
            label: label.into(),
            seed,
            report: {
                let rows = vec![crate::segmetrics::SampleMetrics {
                    sample_id: 0,
                    dice,
                    jaccard: dice,
                    hd95: Some(1.0),
                    asd: Some(0.5),
                    flags: String::new(),
                }];
                let json = serde_json::json!({"label": label, "seed": seed});
                serde_json::from_str(
                    &serde_json::to_string(&crate::segmetrics::MetricReport {
                        per_sample: rows.clone(),
                        dice: Aggregate::from_values(&[dice]),
                        jaccard: Aggregate::from_values(&[dice]),
                        hd95: Aggregate::from_values(&[1.0]),
                        asd: Aggregate::from_values(&[0.5]),
                        flagged: 0,
                        config_echo: json,
                    })
                    .unwrap(),
                )
                .unwrap()
            },
            run_dir: PathBuf::new(),
        };
        let rows = summarize(&[mk("pmt", 1, 0.8), mk("pmt", 2, 0.9)]);
        let dice_row = rows.iter().find(|r| r.metric == "dice").unwrap();
        assert!((dice_row.mean - 0.85).abs() < 1e-12);
        assert!((dice_row.std - 0.1 / 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(dice_row.n, 2);
    }
}
