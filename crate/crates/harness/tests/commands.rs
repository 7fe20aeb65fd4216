use std::fs;
use std::path::Path;

use ostta_core::nn::{evaluate_accuracy, LabeledData, TrainConfig};
use ostta_core::stream::StreamConfig;
use ostta_harness::commands::{self, Layout};
use ostta_harness::config::{ArchConfig, SweepAxis, SweepConfig};
use ostta_harness::{ExperimentConfig, Variant};

fn small_cfg(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir.to_path_buf(),
        seeds: vec![0],
        methods: ["source", "tent", "paf-kip"].iter().map(|m| m.parse().unwrap()).collect(),
        arch: ArchConfig { hidden: vec![12] },
        stream: StreamConfig {
            num_domains: 2,
            batches_per_domain: 5,
            batch_size: 32,
            dim: 6,
            num_classes: 4,
            num_open_classes: 2,
            source_per_class: 100,
            holdout_per_class: 30,
            ..Default::default()
        },
        train: TrainConfig { epochs: 3, ..Default::default() },
        ..Default::default()
    }
}

fn prepared(dir: &Path) -> ExperimentConfig {
    let cfg = small_cfg(dir);
    commands::gen_task(&cfg, false).unwrap();
    commands::train_source_cmd(&cfg).unwrap();
    cfg
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small_cfg(Path::new("out/x"));
    let back = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn shipped_reference_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.output_dir = ExperimentConfig::default().output_dir;
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn gen_task_is_idempotent_and_creates_missing_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_cfg(&tmp.path().join("a/b/c"));
    let first = commands::gen_task(&cfg, true).unwrap();
    let bytes: Vec<Vec<u8>> = first.files.iter().map(read).collect();
    let second = commands::gen_task(&cfg, true).unwrap();
    assert_eq!(first.files, second.files);
    for (f, b) in second.files.iter().zip(&bytes) {
        assert_eq!(&read(f), b, "{}", f.display());
    }
    let layout = Layout::new(&cfg.output_dir);
    let loaded = commands::load_task(&cfg).unwrap();
    assert_eq!(loaded, first.task);
    let source: LabeledData<f64> = commands::read_labeled_csv(&layout.source_csv()).unwrap();
    assert_eq!(source.labels, first.task.source_dataset().labels);
    assert_eq!(source.features, first.task.source_dataset().features);
}

#[test]
fn stale_task_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_cfg(tmp.path());
    commands::gen_task(&cfg, false).unwrap();
    let mut other = cfg.clone();
    other.stream.seed = 99;
    assert!(commands::load_task(&other).is_err());
}

#[test]
fn train_source_needs_a_task() {
    let tmp = tempfile::tempdir().unwrap();
    let err = commands::train_source_cmd(&small_cfg(tmp.path())).unwrap_err();
    assert!(err.to_string().contains("task"), "{err}");
}

#[test]
fn checkpoint_must_match_the_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    assert!(commands::load_source(&cfg).is_ok());
    cfg.arch.hidden = vec![7];
    assert!(commands::load_source(&cfg).is_err());
}

#[test]
fn adapt_logs_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(tmp.path());
    let layout = Layout::new(&cfg.output_dir);
    commands::adapt(&cfg).unwrap();
    let first: Vec<Vec<u8>> = cfg
        .methods
        .iter()
        .map(|&m| read(layout.run_dir(m, 0).join("steps.jsonl")))
        .collect();
    commands::adapt(&cfg).unwrap();
    for (&m, bytes) in cfg.methods.iter().zip(&first) {
        assert_eq!(&read(layout.run_dir(m, 0).join("steps.jsonl")), bytes, "{m}");
        assert!(!read(layout.run_dir(m, 0).join("domains.csv")).is_empty());
    }
    let lines = String::from_utf8(first[0].clone()).unwrap().lines().count();
    assert_eq!(lines, cfg.stream.total_batches());
}

#[test]
fn source_method_accuracy_is_the_frozen_model_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    cfg.methods = vec!["source".parse().unwrap()];
    let run = &commands::adapt(&cfg).unwrap()[0];
    let task = commands::load_task(&cfg).unwrap();
    let source = commands::load_source(&cfg).unwrap();
    // per-domain accuracy of the frozen model, averaged over domains
    let mut per_domain = vec![(0usize, 0usize); cfg.stream.num_domains];
    for b in task.stream(0) {
        let closed: Vec<usize> = (0..b.len()).filter(|&i| !b.open_flags[i]).collect();
        let data = LabeledData {
            features: b.features.select_rows(&closed),
            labels: closed.iter().map(|&i| b.labels[i]).collect(),
        };
        let acc = evaluate_accuracy(&source, &data).unwrap();
        let e = &mut per_domain[b.domain_index];
        e.0 += (acc * closed.len() as f64).round() as usize;
        e.1 += closed.len();
    }
    let want = per_domain.iter().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / per_domain.len() as f64;
    assert!((run.manifest.summary.acc - want).abs() < 1e-12);
}

#[test]
fn replayed_logs_reproduce_the_run_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(tmp.path());
    for run in commands::adapt(&cfg).unwrap() {
        let replayed = commands::replay_run(&run.dir).unwrap();
        assert_eq!(replayed.summary, run.manifest.summary);
    }
}

#[test]
fn report_aggregates_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    cfg.seeds = vec![0, 1];
    let runs = commands::adapt(&cfg).unwrap();
    let layout = Layout::new(&cfg.output_dir);
    let dirs = commands::find_runs(&layout.runs()).unwrap();
    assert_eq!(dirs.len(), 6);
    let out = tmp.path().join("report");
    let report = commands::report(&dirs, &out).unwrap();
    let names: Vec<String> = report.rows.iter().map(|r| r.method.name()).collect();
    assert_eq!(names, ["source", "tent", "paf-kip"]);
    for row in &report.rows {
        let h: Vec<f64> = runs
            .iter()
            .filter(|r| r.manifest.method == row.method)
            .map(|r| r.manifest.summary.h_score.unwrap())
            .collect();
        assert_eq!(h.len(), 2);
        let hs = row.h_score.unwrap();
        assert!((hs.mean - (h[0] + h[1]) / 2.0).abs() < 1e-15);
        // sample std of two values is |a − b| / √2
        assert!((hs.std - (h[0] - h[1]).abs() / 2f64.sqrt()).abs() < 1e-12);
    }
    let snapshot: Vec<Vec<u8>> = ["summary.csv", "summary.txt", "runs.csv"].iter().map(|f| read(out.join(f))).collect();
    commands::report(&dirs, &out).unwrap();
    for (f, b) in ["summary.csv", "summary.txt", "runs.csv"].iter().zip(&snapshot) {
        assert_eq!(&read(out.join(f)), b);
    }
    assert!(out.join("curves/paf-kip/seed-1-wrongly_filtered.csv").is_file());

    // one seed: the table is that run's summary
    let single = commands::report(&[layout.run_dir(cfg.methods[2], 1)], &tmp.path().join("single")).unwrap();
    let run = runs.iter().find(|r| r.manifest.method == cfg.methods[2] && r.manifest.seed == 1).unwrap();
    assert_eq!(single.rows[0].acc.mean, run.manifest.summary.acc);
    assert_eq!(single.rows[0].acc.std, 0.0);
}

#[test]
fn report_refuses_mixed_scenarios() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(&tmp.path().join("a"));
    let mut other = small_cfg(&tmp.path().join("b"));
    other.stream.seed = 3;
    commands::gen_task(&other, false).unwrap();
    commands::train_source_cmd(&other).unwrap();
    let a = commands::adapt(&cfg).unwrap();
    let b = commands::adapt(&other).unwrap();
    assert!(commands::report(&[a[0].dir.clone(), b[0].dir.clone()], &tmp.path().join("r")).is_err());
}

#[test]
fn single_value_sweep_matches_adapt() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    let runs = commands::adapt(&cfg).unwrap();
    cfg.sweep = Some(SweepConfig { axis: SweepAxis::Alpha, values: vec![cfg.hp.alpha] });
    let rows = commands::sweep(&cfg).unwrap();
    assert_eq!(rows.len(), runs.len());
    for run in &runs {
        let row = rows.iter().find(|r| r.method == run.manifest.method).unwrap();
        assert_eq!(row.summary, run.manifest.summary);
        let swept = Layout::new(&cfg.output_dir)
            .sweep_root(SweepAxis::Alpha)
            .join(cfg.hp.alpha.to_string())
            .join(run.manifest.method.name())
            .join("seed-0/steps.jsonl");
        assert_eq!(read(swept), read(run.dir.join("steps.jsonl")));
    }
}

#[test]
fn alpha_sweep_writes_one_row_per_value_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    cfg.seeds = vec![0, 1];
    let paf: Variant = "paf".parse().unwrap();
    cfg.methods = vec![paf];
    cfg.sweep = Some(SweepConfig { axis: SweepAxis::Alpha, values: vec![0.0, 0.5, 1.0, 2.0] });
    let rows = commands::sweep(&cfg).unwrap();
    assert_eq!(rows.len(), 8);
    let csv = fs::read_to_string(Layout::new(&cfg.output_dir).sweep_csv(SweepAxis::Alpha, paf)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("alpha,seed,acc,aur,h_score"));
    assert_eq!(lines.count(), 8);
}

#[test]
fn batch_size_sweep_keeps_the_task_draws() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    cfg.methods = vec!["tent".parse().unwrap()];
    cfg.sweep = Some(SweepConfig { axis: SweepAxis::BatchSize, values: vec![16.0, 64.0] });
    let rows = commands::sweep(&cfg).unwrap();
    assert_eq!(rows.len(), 2);
    let root = Layout::new(&cfg.output_dir).sweep_root(SweepAxis::BatchSize);
    let first = fs::read_to_string(root.join("16/tent/seed-0/steps.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(row["label"].as_array().unwrap().len(), 16);
    cfg.sweep = Some(SweepConfig { axis: SweepAxis::BatchSize, values: vec![2.5] });
    assert!(commands::sweep(&cfg).is_err());
}

#[test]
fn frozen_ema_keeps_the_auxiliary_filter_on_the_source() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    cfg.methods = vec!["paf".parse().unwrap()];
    cfg.sweep = Some(SweepConfig { axis: SweepAxis::Beta, values: vec![1.0] });
    commands::sweep(&cfg).unwrap();
    let steps = Layout::new(&cfg.output_dir)
        .sweep_root(SweepAxis::Beta)
        .join("1/paf/seed-0/steps.jsonl");
    let text = fs::read_to_string(steps).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    // with β = 1 the EMA stays the source model, so step 0 (adapting = source)
    // has identical entropies for both, and later steps see the unchanged EMA
    assert_eq!(first["h_adapt"], first["h_ema"]);
    assert_ne!(last["h_adapt"], last["h_ema"]);
}
