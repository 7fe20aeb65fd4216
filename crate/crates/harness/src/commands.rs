//! The five subcommands, as library functions over an [`ExperimentConfig`].
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.toml                  effective config of the last command
//! task.json                    generated task
//! source.csv, holdout.csv      clean closed-set data
//! stream.csv                   optional dump of the first seed's stream
//! source.ckpt                  trained source model
//! runs/<method>/seed-<s>/      steps.jsonl, domains.csv, manifest.json
//! sweep/<axis>/<value>/...     same per-run layout for each sweep value
//! sweep/<axis>-<method>.csv    one row per (value, seed)
//! report/                      tables and curves
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ostta_core::metrics::{per_domain_summary, windowed_curve, AurocPooling, MetricRecord, Summary};
use ostta_core::nn::{evaluate_accuracy, train_source, Checkpoint, LabeledData};
use ostta_core::stream::{make_task, write_stream_csv, Task};
use ostta_core::Mlp;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SweepAxis};
use crate::error::{HarnessError, IoContext, Result};
use crate::run::run_variant;
use crate::steplog::StepRow;
use crate::variant::Variant;

pub const STEPS_FILE: &str = "steps.jsonl";
pub const DOMAINS_FILE: &str = "domains.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// File locations under one output root.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn task(&self) -> PathBuf {
        self.root.join("task.json")
    }

    pub fn source_csv(&self) -> PathBuf {
        self.root.join("source.csv")
    }

    pub fn holdout_csv(&self) -> PathBuf {
        self.root.join("holdout.csv")
    }

    pub fn stream_csv(&self) -> PathBuf {
        self.root.join("stream.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("source.ckpt")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, variant: Variant, seed: u64) -> PathBuf {
        self.runs().join(variant.name()).join(format!("seed-{seed}"))
    }

    pub fn sweep_root(&self, axis: SweepAxis) -> PathBuf {
        self.root.join("sweep").join(axis.name())
    }

    pub fn sweep_csv(&self, axis: SweepAxis, variant: Variant) -> PathBuf {
        self.root.join("sweep").join(format!("{}-{}.csv", axis.name(), variant.name()))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).at(path)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).at(path)
}

fn save_config(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    write_file(&layout.config(), cfg.to_toml()?)
}

// ---------------------------------------------------------------- gen-task

#[derive(Debug, Clone)]
pub struct GenTaskOutput {
    pub task: Task,
    pub files: Vec<PathBuf>,
}

/// Generates the task and writes it with its clean datasets. Rerunning with
/// the same config rewrites identical bytes.
pub fn gen_task(cfg: &ExperimentConfig, dump_stream: bool) -> Result<GenTaskOutput> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    create_dir(layout.root())?;
    let task = make_task(&cfg.stream)?;
    let json = serde_json::to_string_pretty(&task).map_err(|e| HarnessError::Config(e.to_string()))?;
    write_file(&layout.task(), json + "\n")?;
    write_labeled_csv(&layout.source_csv(), &task.source_dataset())?;
    write_labeled_csv(&layout.holdout_csv(), &task.holdout_dataset())?;
    let mut files = vec![layout.task(), layout.source_csv(), layout.holdout_csv()];
    if dump_stream {
        let path = layout.stream_csv();
        let batches: Vec<_> = task.stream(cfg.seeds[0]).collect();
        let mut w = BufWriter::new(File::create(&path).at(&path)?);
        write_stream_csv(&mut w, task.config.dim, &batches)?;
        w.flush().at(&path)?;
        files.push(path);
    }
    save_config(cfg, &layout)?;
    Ok(GenTaskOutput { task, files })
}

pub fn write_labeled_csv(path: &Path, data: &LabeledData<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    let dim = data.features.cols();
    let header: Vec<String> = (0..dim).map(|j| format!("x{j}")).chain(["label".into()]).collect();
    writeln!(w, "{}", header.join(",")).at(path)?;
    for (row, label) in data.features.iter_rows().zip(&data.labels) {
        for v in row {
            write!(w, "{v},").at(path)?;
        }
        writeln!(w, "{label}").at(path)?;
    }
    w.flush().at(path)
}

pub fn read_labeled_csv(path: &Path) -> Result<LabeledData<f64>> {
    let parse_err = |line: usize, msg: String| HarnessError::Parse { path: path.into(), msg: format!("line {line}: {msg}") };
    let reader = BufReader::new(File::open(path).at(path)?);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate().skip(1) {
        let line = line.at(path)?;
        let mut fields: Vec<&str> = line.split(',').collect();
        let label = fields
            .pop()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(i + 1, "bad label".into()))?;
        let row = fields
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(i + 1, e.to_string()))?;
        rows.push(row);
        labels.push(label);
    }
    let features = ostta_core::Matrix::from_rows(&rows)?;
    Ok(LabeledData { features, labels })
}

/// Loads `task.json` and checks that it was generated from `cfg.stream`.
pub fn load_task(cfg: &ExperimentConfig) -> Result<Task> {
    let path = Layout::new(&cfg.output_dir).task();
    if !path.exists() {
        return Err(HarnessError::Config(format!("{} is missing; run gen-task first", path.display())));
    }
    let text = fs::read_to_string(&path).at(&path)?;
    let task: Task = serde_json::from_str(&text).map_err(|e| HarnessError::Parse { path: path.clone(), msg: e.to_string() })?;
    if task.config != cfg.stream {
        return Err(HarnessError::Config(format!(
            "{} was generated from a different stream config; rerun gen-task",
            path.display()
        )));
    }
    Ok(task)
}

// ------------------------------------------------------------ train-source

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub holdout_accuracy: f64,
}

pub fn train_source_cmd(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let task = load_task(cfg)?;
    let model: Mlp = train_source(&task.source_dataset(), &cfg.arch_spec(), &cfg.train)?;
    let holdout_accuracy = evaluate_accuracy(&model, &task.holdout_dataset())?;
    let path = layout.checkpoint();
    Checkpoint::new(&model, cfg.train.seed)?.save(&path)?;
    save_config(cfg, &layout)?;
    Ok(TrainOutput { checkpoint: path, holdout_accuracy })
}

pub fn load_source(cfg: &ExperimentConfig) -> Result<Mlp> {
    let path = Layout::new(&cfg.output_dir).checkpoint();
    if !path.exists() {
        return Err(HarnessError::Config(format!("{} is missing; run train-source first", path.display())));
    }
    let model: Mlp = Checkpoint::load(&path)?.stack()?;
    if model.arch().as_ref() != Some(&cfg.arch_spec()) {
        return Err(HarnessError::Config(format!(
            "{} does not match the configured architecture; rerun train-source",
            path.display()
        )));
    }
    Ok(model)
}

// ------------------------------------------------------------------- adapt

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub method: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub scenario_hash: String,
    pub auroc_pooling: AurocPooling,
    pub curve_window: usize,
    pub steps: usize,
    pub summary: Summary,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Runs every (method, seed) pair of `cfg` and writes one directory per run.
pub fn adapt(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let task = load_task(cfg)?;
    let source = load_source(cfg)?;
    let results = adapt_all(cfg, &task, &source, &layout, |v, s| layout.run_dir(v, s))?;
    save_config(cfg, &layout)?;
    Ok(results)
}

fn adapt_all(
    cfg: &ExperimentConfig,
    task: &Task,
    source: &Mlp,
    layout: &Layout,
    dir_for: impl Fn(Variant, u64) -> PathBuf + Sync,
) -> Result<Vec<RunResult>> {
    create_dir(layout.root())?;
    let jobs: Vec<(Variant, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(v, s)| adapt_one(cfg, task, source, v, s, &dir_for(v, s)))
        .collect()
}

fn adapt_one(
    cfg: &ExperimentConfig,
    task: &Task,
    source: &Mlp,
    variant: Variant,
    seed: u64,
    dir: &Path,
) -> Result<RunResult> {
    create_dir(dir)?;
    let steps_path = dir.join(STEPS_FILE);
    let mut w = BufWriter::new(File::create(&steps_path).at(&steps_path)?);
    let outcome = run_variant(task, source, &cfg.hp, variant, seed, cfg.eval.auroc_pooling, |log| {
        let line = serde_json::to_string(&StepRow::from(log)).map_err(|e| HarnessError::Report(e.to_string()))?;
        writeln!(w, "{line}").at(&steps_path)
    })?;
    w.flush().at(&steps_path)?;
    write_file(&dir.join(DOMAINS_FILE), domains_csv(&outcome.summary))?;
    let manifest = Manifest {
        method: variant,
        seed,
        config_hash: cfg.hash(),
        scenario_hash: cfg.scenario_hash(),
        auroc_pooling: cfg.eval.auroc_pooling,
        curve_window: cfg.eval.curve_window,
        steps: outcome.records.len(),
        summary: outcome.summary,
        wall_clock_secs: outcome.wall_clock_secs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::Report(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(RunResult { dir: dir.to_path_buf(), manifest })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn domains_csv(summary: &Summary) -> String {
    let mut out = String::from("domain,acc,aur,h_score\n");
    for d in &summary.domains {
        out += &format!("{},{},{},{}\n", d.domain_index, d.acc, opt(d.aur), opt(d.h_score));
    }
    out += &format!("mean,{},{},{}\n", summary.acc, opt(summary.aur), opt(summary.h_score));
    out
}

// ------------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub method: Variant,
    pub seed: u64,
    pub summary: Summary,
}

/// Runs `adapt` once per value of the configured sweep axis and writes one
/// CSV per method with a row per (value, seed).
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| HarnessError::Config("no [sweep] section or --axis given".into()))?;
    let layout = Layout::new(&cfg.output_dir);
    let base_task = load_task(cfg)?;
    let source = load_source(cfg)?;
    let mut rows = Vec::new();
    for &value in &spec.values {
        let vcfg = cfg.with_axis(spec.axis, value)?;
        let mut task = base_task.clone();
        // batch size and open ratio only shape the stream, never the task draws
        task.config.batch_size = vcfg.stream.batch_size;
        task.config.open_ratio = vcfg.stream.open_ratio;
        let root = layout.sweep_root(spec.axis).join(value.to_string());
        let results = adapt_all(&vcfg, &task, &source, &layout, |v, s| {
            root.join(v.name()).join(format!("seed-{s}"))
        })?;
        rows.extend(results.into_iter().map(|r| SweepRow {
            axis_value: value,
            method: r.manifest.method,
            seed: r.manifest.seed,
            summary: r.manifest.summary,
        }));
    }
    for &method in &cfg.methods {
        let mut out = format!("{},seed,acc,aur,h_score\n", spec.axis.name());
        for r in rows.iter().filter(|r| r.method == method) {
            out += &format!(
                "{},{},{},{},{}\n",
                r.axis_value,
                r.seed,
                r.summary.acc,
                opt(r.summary.aur),
                opt(r.summary.h_score)
            );
        }
        write_file(&layout.sweep_csv(spec.axis, method), out)?;
    }
    save_config(cfg, &layout)?;
    Ok(rows)
}

// ------------------------------------------------------------------ report

/// One run rebuilt from its step log.
#[derive(Debug, Clone)]
pub struct ReplayedRun {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<MetricRecord>,
    pub summary: Summary,
}

pub fn replay_run(dir: &Path) -> Result<ReplayedRun> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).at(&mpath)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse { path: mpath.clone(), msg: e.to_string() })?;
    let spath = dir.join(STEPS_FILE);
    let reader = BufReader::new(File::open(&spath).at(&spath)?);
    let mut records = Vec::with_capacity(manifest.steps);
    for (i, line) in reader.lines().enumerate() {
        let line = line.at(&spath)?;
        let row: StepRow = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Parse { path: spath.clone(), msg: format!("line {}: {e}", i + 1) })?;
        records.push(row.metric_record());
    }
    if records.len() != manifest.steps {
        return Err(HarnessError::Report(format!(
            "{}: {} steps logged, manifest says {}",
            spath.display(),
            records.len(),
            manifest.steps
        )));
    }
    let summary = per_domain_summary(&records, manifest.auroc_pooling)?;
    Ok(ReplayedRun { dir: dir.to_path_buf(), manifest, records, summary })
}

/// Every run directory below `root`, in sorted order.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(MANIFEST_FILE).is_file() {
            found.push(dir);
            continue;
        }
        for entry in fs::read_dir(&dir).at(&dir)? {
            let path = entry.at(&dir)?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Variant,
    pub seeds: Vec<u64>,
    pub acc: MeanStd,
    pub aur: Option<MeanStd>,
    pub h_score: Option<MeanStd>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<ReplayedRun>,
}

/// Rebuilds every run from its step log and writes the method × metric
/// table plus per-run curves to `out`.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(HarnessError::Report("no runs to report".into()));
    }
    let runs = run_dirs.iter().map(|d| replay_run(d)).collect::<Result<Vec<_>>>()?;
    let first = &runs[0].manifest;
    for r in &runs[1..] {
        let m = &r.manifest;
        if m.scenario_hash != first.scenario_hash {
            return Err(HarnessError::Report(format!(
                "{} and {} come from incompatible configs",
                runs[0].dir.display(),
                r.dir.display()
            )));
        }
    }

    let mut methods: Vec<Variant> = Vec::new();
    for r in &runs {
        if !methods.contains(&r.manifest.method) {
            methods.push(r.manifest.method);
        }
    }
    let rank = |v: &Variant| Variant::all().position(|(_, t)| t == *v).unwrap_or(usize::MAX);
    methods.sort_by_key(rank);
    let rows: Vec<ReportRow> = methods
        .iter()
        .map(|&method| {
            let mine: Vec<&ReplayedRun> = runs.iter().filter(|r| r.manifest.method == method).collect();
            let acc: Vec<f64> = mine.iter().map(|r| r.summary.acc).collect();
            let aur: Option<Vec<f64>> = mine.iter().map(|r| r.summary.aur).collect();
            let h: Option<Vec<f64>> = mine.iter().map(|r| r.summary.h_score).collect();
            ReportRow {
                method,
                seeds: mine.iter().map(|r| r.manifest.seed).collect(),
                acc: MeanStd::of(&acc).expect("at least one run per method"),
                aur: aur.as_deref().and_then(MeanStd::of),
                h_score: h.as_deref().and_then(MeanStd::of),
            }
        })
        .collect();

    create_dir(out)?;
    write_file(&out.join("summary.csv"), summary_csv(&rows))?;
    write_file(&out.join("summary.txt"), summary_table(&rows))?;
    let mut per_run = String::from("method,seed,acc,aur,h_score\n");
    for r in &runs {
        let s = &r.summary;
        per_run += &format!("{},{},{},{},{}\n", r.manifest.method, r.manifest.seed, s.acc, opt(s.aur), opt(s.h_score));
        let curve = windowed_curve(&r.records, r.manifest.curve_window)?;
        let mut wf = String::from("batch_index,wrongly_filtered\n");
        let mut hs = String::from("batch_index,h_score\n");
        for p in &curve {
            wf += &format!("{},{}\n", p.batch_index, p.wrongly_filtered);
            hs += &format!("{},{}\n", p.batch_index, opt(p.h_score));
        }
        let dir = out.join("curves").join(r.manifest.method.name());
        write_file(&dir.join(format!("seed-{}-wrongly_filtered.csv", r.manifest.seed)), wf)?;
        write_file(&dir.join(format!("seed-{}-h_score.csv", r.manifest.seed)), hs)?;
    }
    write_file(&out.join("runs.csv"), per_run)?;
    Ok(Report { rows, runs })
}

fn summary_csv(rows: &[ReportRow]) -> String {
    let ms = |m: Option<MeanStd>| m.map_or_else(|| ",".to_string(), |m| format!("{},{}", m.mean, m.std));
    let mut out = String::from("method,seeds,acc_mean,acc_std,aur_mean,aur_std,h_score_mean,h_score_std\n");
    for r in rows {
        out += &format!("{},{},{},{},{}\n", r.method, r.seeds.len(), ms(Some(r.acc)), ms(r.aur), ms(r.h_score));
    }
    out
}

/// Aligned plain-text table, percentages with two decimals.
pub fn summary_table(rows: &[ReportRow]) -> String {
    let cell = |m: Option<MeanStd>| m.map_or_else(|| "n/a".to_string(), |m| format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std));
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|r| [r.method.name(), cell(Some(r.acc)), cell(r.aur), cell(r.h_score)])
        .collect();
    let header = ["method".to_string(), "ACC".into(), "AUR".into(), "H-S".into()];
    let mut width = [0usize; 4];
    for row in std::iter::once(&header).chain(&body) {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: &[String; 4]| {
        let mut s = format!("{:<w$}", row[0], w = width[0]);
        for (c, w) in row[1..].iter().zip(&width[1..]) {
            s += &format!("  {:>w$}", c, w = *w);
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    for row in &body {
        out += &line(row);
    }
    out
}
