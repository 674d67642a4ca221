//! `prunekit`: data generation, teacher training, importance inspection,
//! pruning, recovery, evaluation, advice and reporting.
//!
//! Exit codes: 0 success, 1 usage, 2 config or input, 3 numeric failure,
//! 4 infeasible plan.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prunekit_core::accounting::{PruneMode, ShapeRecord};
use prunekit_core::advisor::{recommend, Scenario, DEFAULT_PROMPT_TOKENS};
use prunekit_core::config::ToolkitConfig;
use prunekit_core::eval::{checkpoint, RunRecord};
use prunekit_core::recovery::Strategy;
use prunekit_core::workflow::{self, Command};
use prunekit_core::Error;

#[derive(Parser)]
#[command(
    name = "prunekit",
    version,
    about = "Structural pruning and recovery for small multimodal decoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config value, e.g. `--set recovery.optimizer.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/eval pools.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dense reference model on the train pool.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score layers or dependency groups on a calibration sample.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: PruneMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a checkpoint to a target decoder compression ratio.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: PruneMode,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover a pruned checkpoint against its teacher.
    Recover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// none, projector-ft, ft, ft+l2, ft+rkl or ft+kl.
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        data_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-match accuracy per task, optionally relative to a reference.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        /// Run record (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Recommend a pruning mode and recovery recipe.
    Advise {
        #[arg(long)]
        ratio: f64,
        /// Recovery training is affordable.
        #[arg(long)]
        recover: bool,
        /// Fraction of the training data available for recovery.
        #[arg(long, default_value_t = 1.0)]
        budget: f64,
        #[arg(long, default_value_t = DEFAULT_PROMPT_TOKENS)]
        prompt_tokens: usize,
        /// Take the shape from a checkpoint instead of LLaVA-7B.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Aggregate evaluate runs into tables and plot data.
    Report {
        #[command(flatten)]
        common: Common,
        /// Evaluate manifests or run records.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat the run recorded in a manifest.
    Rerun { manifest: PathBuf },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) => match e {
                Error::Parameter(_) | Error::OutOfRange(_) => 1,
                Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => 3,
                Error::InfeasiblePlan { .. } => 4,
                _ => 2,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {assignment}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Failure::Usage(format!("{key}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn resolve(common: &Common) -> Result<(ToolkitConfig, Option<PathBuf>, u64), Failure> {
    let base = match &common.config {
        Some(p) => ToolkitConfig::load(p)?,
        None => ToolkitConfig::default(),
    };
    let config = if common.overrides.is_empty() {
        base
    } else {
        let text = base.to_toml_string()?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for o in &common.overrides {
            apply_override(&mut table, o)?;
        }
        ToolkitConfig::from_toml_str(
            &toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?,
        )?
    };
    let seed = common.seed.unwrap_or(config.seed);
    Ok((config, common.config.clone(), seed))
}

fn abs(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

fn launch(common: &Common, command: Command) -> Result<workflow::RunManifest, Failure> {
    let (config, path, seed) = resolve(common)?;
    Ok(workflow::run(command, &config, path, seed)?)
}

fn print_run(path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    let run: RunRecord = serde_json::from_str(&text).map_err(Error::from)?;
    for (task, s) in &run.eval.per_task {
        println!(
            "{:<14} {:>5}/{:<5} {:.4}",
            task.label(),
            s.correct,
            s.total,
            s.accuracy
        );
    }
    println!("AVG {:.4}", run.eval.avg);
    if let Some(p) = run.eval.avg_pct {
        println!("AVG-% {p:.2}");
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    let manifest = match cmd {
        Cmd::GenerateData { common, out } => {
            launch(&common, Command::GenerateData { out: abs(out) })?
        }
        Cmd::TrainTeacher { common, data, out } => launch(
            &common,
            Command::TrainTeacher {
                data: abs(data),
                out: abs(out),
            },
        )?,
        Cmd::Inspect {
            common,
            model,
            data,
            mode,
            out,
        } => launch(
            &common,
            Command::Inspect {
                model: abs(model),
                data: abs(data),
                mode,
                out: abs(out),
            },
        )?,
        Cmd::Prune {
            common,
            model,
            data,
            mode,
            ratio,
            out,
        } => {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Failure::Usage(format!(
                    "ratio must be in (0,1), got {ratio}"
                )));
            }
            let m = launch(
                &common,
                Command::Prune {
                    model: abs(model),
                    data: abs(data),
                    mode,
                    ratio,
                    out: abs(out),
                },
            )?;
            let (_, meta) = checkpoint::load(m.command.output())?;
            if let Some(r) = meta.get("achieved_ratio") {
                println!("achieved ratio {r}");
            }
            m
        }
        Cmd::Recover {
            common,
            student,
            teacher,
            data,
            strategy,
            data_fraction,
            out,
        } => launch(
            &common,
            Command::Recover {
                student: abs(student),
                teacher: abs(teacher),
                data: abs(data),
                strategy,
                data_fraction,
                out: abs(out),
            },
        )?,
        Cmd::Evaluate {
            common,
            model,
            data,
            reference,
            name,
            out,
        } => {
            let m = launch(
                &common,
                Command::Evaluate {
                    model: abs(model),
                    data: abs(data),
                    reference: reference.map(abs),
                    name,
                    out: abs(out),
                },
            )?;
            print_run(m.command.output())?;
            m
        }
        Cmd::Advise {
            ratio,
            recover,
            budget,
            prompt_tokens,
            model,
            json,
        } => {
            let shape = match model {
                Some(p) => checkpoint::load(&p)?.0.shape_record(),
                None => ShapeRecord::llava_7b(),
            };
            let scenario = Scenario {
                can_recover: recover,
                target_ratio: ratio,
                data_budget_fraction: budget,
                prompt_tokens,
            };
            let r = recommend(&scenario, &shape)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r).map_err(Error::from)?);
            } else {
                print!("{r}");
            }
            return Ok(());
        }
        Cmd::Report { common, runs, out } => launch(
            &common,
            Command::Report {
                runs: runs.into_iter().map(abs).collect(),
                out: abs(out),
            },
        )?,
        Cmd::Rerun { manifest } => workflow::rerun(&manifest)?,
    };
    for o in &manifest.outputs {
        println!("wrote {}", o.display());
    }
    println!("manifest {}", manifest.command.manifest_path().display());
    Ok(())
}
