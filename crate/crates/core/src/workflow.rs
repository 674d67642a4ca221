//! Artifact-producing commands and the run manifests that replay them.
//!
//! Every command takes one root seed. A manifest stores the command, the
//! fully resolved configuration and that seed, so `rerun` repeats the run
//! without consulting the original config file. Manifests carry a
//! timestamp; the artifacts they describe do not.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::accounting::PruneMode;
use crate::config::ToolkitConfig;
use crate::error::{Error, Result};
use crate::eval::{checkpoint, emit_report, evaluate, generate_dataset, Dataset, RunRecord};
use crate::model::Model;
use crate::pipeline;
use crate::recovery::{train, Strategy};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    GenerateData {
        out: PathBuf,
    },
    TrainTeacher {
        data: PathBuf,
        out: PathBuf,
    },
    Inspect {
        model: PathBuf,
        data: PathBuf,
        mode: PruneMode,
        out: PathBuf,
    },
    Prune {
        model: PathBuf,
        data: PathBuf,
        mode: PruneMode,
        ratio: f64,
        out: PathBuf,
    },
    Recover {
        student: PathBuf,
        teacher: PathBuf,
        data: PathBuf,
        strategy: Strategy,
        /// Falls back to `recovery.data_fraction` from the config.
        data_fraction: Option<f64>,
        out: PathBuf,
    },
    Evaluate {
        model: PathBuf,
        data: PathBuf,
        reference: Option<PathBuf>,
        name: Option<String>,
        out: PathBuf,
    },
    /// `runs` may list run records or the manifests of `evaluate` runs.
    Report {
        runs: Vec<PathBuf>,
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::Inspect { .. } => "inspect",
            Command::Prune { .. } => "prune",
            Command::Recover { .. } => "recover",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Command::GenerateData { .. } => vec![],
            Command::TrainTeacher { data, .. } => vec![data.clone()],
            Command::Inspect { model, data, .. } | Command::Prune { model, data, .. } => {
                vec![model.clone(), data.clone()]
            }
            Command::Recover {
                student, teacher, data, ..
            } => vec![student.clone(), teacher.clone(), data.clone()],
            Command::Evaluate {
                model, data, reference, ..
            } => {
                let mut v = vec![model.clone(), data.clone()];
                v.extend(reference.clone());
                v
            }
            Command::Report { runs, .. } => runs.clone(),
        }
    }

    pub fn output(&self) -> &Path {
        match self {
            Command::GenerateData { out }
            | Command::TrainTeacher { out, .. }
            | Command::Inspect { out, .. }
            | Command::Prune { out, .. }
            | Command::Recover { out, .. }
            | Command::Evaluate { out, .. }
            | Command::Report { out, .. } => out,
        }
    }

    /// `<output>.manifest.json`, or `manifest.json` inside a report
    /// directory.
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            Command::Report { out, .. } => out.join("manifest.json"),
            _ => {
                let mut s = self.output().as_os_str().to_owned();
                s.push(".manifest.json");
                PathBuf::from(s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub toolkit_version: String,
    #[serde(flatten)]
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub config: ToolkitConfig,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Runs `command` and writes its manifest next to the outputs.
pub fn run(
    command: Command,
    config: &ToolkitConfig,
    config_path: Option<PathBuf>,
    seed: u64,
) -> Result<RunManifest> {
    config.validate()?;
    let outputs = execute(&command, config, seed)?;
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: command.inputs(),
        command,
        config_path,
        config: config.clone(),
        seed,
        outputs,
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    write_json(&manifest.command.manifest_path(), &manifest)?;
    Ok(manifest)
}

/// Repeats the run recorded in a manifest.
pub fn rerun(manifest_path: &Path) -> Result<RunManifest> {
    let m = RunManifest::load(manifest_path)?;
    if m.manifest_version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "manifest version {} is not supported",
            m.manifest_version
        )));
    }
    run(m.command, &m.config, m.config_path, m.seed)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn save_model(model: &Model, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    checkpoint::save(model, path, metadata)
}

fn meta_f64(meta: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    meta.get(key).map_or(Ok(0.0), |v| {
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata {key}={v} is not a number")))
    })
}

/// Builds a run record from the provenance a checkpoint carries.
fn run_record(name: String, meta: &BTreeMap<String, String>, seed: u64, eval: crate::eval::EvalReport) -> Result<RunRecord> {
    let text = |k: &str| meta.get(k).cloned().unwrap_or_else(|| "none".into());
    Ok(RunRecord {
        name,
        mode: text("mode"),
        target_ratio: meta_f64(meta, "target_ratio")?,
        achieved_ratio: meta_f64(meta, "achieved_ratio")?,
        strategy: text("strategy"),
        data_fraction: meta_f64(meta, "data_fraction")?,
        seed: meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(seed),
        eval,
    })
}

fn load_run(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
        return match m.command {
            Command::Evaluate { out, .. } => load_run(&out),
            other => Err(Error::Data(format!(
                "{} is a {} manifest, expected evaluate",
                path.display(),
                other.name()
            ))),
        };
    }
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Runs one command without writing a manifest; returns the output paths.
pub fn execute(command: &Command, config: &ToolkitConfig, seed: u64) -> Result<Vec<PathBuf>> {
    let out = command.output().to_path_buf();
    match command {
        Command::GenerateData { .. } => {
            let d = generate_dataset(&config.data.mix, config.data.n, seed)?;
            write_json(&out, &d)?;
        }
        Command::TrainTeacher { data, .. } => {
            let d = load_dataset(data)?;
            let t = pipeline::train_teacher(&config.model, &config.teacher, &d.train, seed, None)?;
            let meta = BTreeMap::from([
                ("kind".to_string(), "teacher".to_string()),
                ("seed".to_string(), seed.to_string()),
            ]);
            save_model(&t.student, &out, &meta)?;
        }
        Command::Inspect { model, data, mode, .. } => {
            let (m, _) = checkpoint::load(model)?;
            let d = load_dataset(data)?;
            let r = pipeline::importance(&m, *mode, &d.train, config.prune.calibration_size, seed)?;
            write_json(&out, &r.score_lines())?;
        }
        Command::Prune {
            model, data, mode, ratio, ..
        } => {
            if !(*ratio > 0.0 && *ratio < 1.0) {
                return Err(Error::OutOfRange(format!("ratio must be in (0,1), got {ratio}")));
            }
            let (m, mut meta) = checkpoint::load(model)?;
            let d = load_dataset(data)?;
            let r = pipeline::prune_model(&m, *mode, *ratio, &d.train, &config.prune, seed)?;
            meta.insert("kind".into(), "pruned".into());
            meta.insert("mode".into(), mode.to_string());
            meta.insert("target_ratio".into(), ratio.to_string());
            meta.insert("achieved_ratio".into(), r.achieved_ratio.to_string());
            meta.insert("seed".into(), seed.to_string());
            save_model(&r.model, &out, &meta)?;
        }
        Command::Recover {
            student,
            teacher,
            data,
            strategy,
            data_fraction,
            ..
        } => {
            let (s, mut meta) = checkpoint::load(student)?;
            let fraction = data_fraction.unwrap_or(config.recovery.data_fraction);
            let model = match strategy.apply(&config.recovery) {
                None => s,
                Some(mut rc) => {
                    let (t, _) = checkpoint::load(teacher)?;
                    let d = load_dataset(data)?;
                    rc.data_fraction = fraction;
                    rc.optimizer.seed = seed;
                    train(s, Some(&t), &d.train, &rc, None)?.student
                }
            };
            meta.insert("kind".into(), "recovered".into());
            meta.insert("strategy".into(), strategy.to_string());
            meta.insert("data_fraction".into(), fraction.to_string());
            meta.insert("seed".into(), seed.to_string());
            save_model(&model, &out, &meta)?;
        }
        Command::Evaluate {
            model,
            data,
            reference,
            name,
            ..
        } => {
            let (m, meta) = checkpoint::load(model)?;
            let d = load_dataset(data)?;
            let name = name.clone().unwrap_or_else(|| {
                model
                    .file_stem()
                    .map_or("model".into(), |s| s.to_string_lossy().into_owned())
            });
            let reference_report = match reference {
                Some(p) => {
                    let (r, _) = checkpoint::load(p)?;
                    let label = p
                        .file_stem()
                        .map_or("reference".into(), |s| s.to_string_lossy().into_owned());
                    Some(evaluate(&r, &d.eval, &label, None)?)
                }
                None => None,
            };
            let eval = evaluate(&m, &d.eval, &name, reference_report.as_ref())?;
            write_json(&out, &run_record(name, &meta, seed, eval)?)?;
        }
        Command::Report { runs, .. } => {
            let records = runs.iter().map(|p| load_run(p)).collect::<Result<Vec<_>>>()?;
            return emit_report(&records, &out);
        }
    }
    Ok(vec![out])
}
