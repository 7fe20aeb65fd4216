use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ostta_harness::commands::{self, Layout};
use ostta_harness::config::{ExperimentConfig, SweepAxis, SweepConfig};
use ostta_harness::{HarnessError, Result, Variant};

/// Open-set test-time adaptation experiments on a synthetic shifted stream.
#[derive(Parser)]
#[command(name = "ostta", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides `output_dir` from the config.
    #[arg(short, long, global = true, env = "OSTTA_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Override any config field, e.g. `--set hp.alpha=1.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Comma-separated seeds, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',', global = true)]
    seeds: Option<Vec<u64>>,
    /// Comma-separated method variants, e.g. `tent,paf-kip`.
    #[arg(long, value_delimiter = ',', global = true)]
    methods: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task and write it with its clean datasets.
    GenTask {
        /// Also dump the first seed's stream as CSV.
        #[arg(long)]
        dump_stream: bool,
    },
    /// Train the source model and save a checkpoint.
    TrainSource,
    /// Run every (method, seed) pair over the stream.
    Adapt,
    /// Run `adapt` once per value of one hyperparameter.
    Sweep {
        /// alpha, tau, beta, gamma, batch_size or open_ratio.
        #[arg(long)]
        axis: Option<SweepAxis>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Build tables and curves from run logs.
    Report {
        /// Run directories; defaults to every run under `<output_dir>/runs`.
        runs: Vec<PathBuf>,
        /// Where to write the report; defaults to `<output_dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective config.
    ShowConfig,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|source| HarnessError::Io { path: path.clone(), source })?,
        None => String::new(),
    };
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Parse {
        path: common.config.clone().unwrap_or_default(),
        msg: e.to_string(),
    })?;
    for o in &common.overrides {
        set_path(&mut doc, o)?;
    }
    // line numbers would point into the merged document, so report the bare message
    let source = match (&common.config, common.overrides.is_empty()) {
        (Some(p), true) => p.clone(),
        (Some(p), false) => PathBuf::from(format!("{} with --set", p.display())),
        (None, _) => PathBuf::from("--set"),
    };
    let mut cfg: ExperimentConfig = toml::from_str(&toml::to_string(&doc).expect("table serializes"))
        .map_err(|e: toml::de::Error| HarnessError::Parse { path: source, msg: e.message().to_string() })?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(methods) = &common.methods {
        cfg.methods = methods.iter().map(|m| m.parse()).collect::<Result<Vec<Variant>>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `a.b.c=value` to a TOML table. The value is read as a TOML
/// literal when it parses as one, otherwise as a bare string.
fn set_path(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| HarnessError::Config(format!("empty key in '{assignment}'")))?;
    let mut table = doc;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("'{p}' in '{key}' is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenTask { dump_stream } => {
            let out = commands::gen_task(&cfg, dump_stream)?;
            for f in out.files {
                println!("wrote {}", f.display());
            }
        }
        Command::TrainSource => {
            let out = commands::train_source_cmd(&cfg)?;
            println!("wrote {}", out.checkpoint.display());
            println!("holdout accuracy {:.4}", out.holdout_accuracy);
        }
        Command::Adapt => {
            for r in commands::adapt(&cfg)? {
                let s = &r.manifest.summary;
                println!(
                    "{:<22} seed {:<3} acc {:.4}  aur {}  h {}  ({:.1}s)",
                    r.manifest.method.name(),
                    r.manifest.seed,
                    s.acc,
                    s.aur.map_or("n/a".into(), |v| format!("{v:.4}")),
                    s.h_score.map_or("n/a".into(), |v| format!("{v:.4}")),
                    r.manifest.wall_clock_secs
                );
            }
        }
        Command::Sweep { axis, values } => {
            match (axis, values, cfg.sweep.take()) {
                (Some(axis), Some(values), _) => cfg.sweep = Some(SweepConfig { axis, values }),
                (Some(axis), None, Some(s)) if s.axis == axis => cfg.sweep = Some(s),
                (None, None, s) => cfg.sweep = s,
                _ => return Err(HarnessError::Config("--axis and --values go together".into())),
            }
            cfg.validate()?;
            let rows = commands::sweep(&cfg)?;
            let layout = Layout::new(&cfg.output_dir);
            let axis = cfg.sweep.as_ref().expect("set above").axis;
            for m in &cfg.methods {
                println!("wrote {}", layout.sweep_csv(axis, *m).display());
            }
            println!("{} runs", rows.len());
        }
        Command::Report { runs, out } => {
            let layout = Layout::new(&cfg.output_dir);
            let runs = if runs.is_empty() { commands::find_runs(&layout.runs())? } else { runs };
            let out = out.unwrap_or_else(|| layout.report());
            let report = commands::report(&runs, &out)?;
            print!("{}", commands::summary_table(&report.rows));
            println!("wrote {}", out.display());
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
