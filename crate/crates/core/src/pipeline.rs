//! End-to-end composition: teacher training, importance + prune, recovery
//! and evaluation.

use serde::{Deserialize, Serialize};

use crate::accounting::PruneMode;
use crate::config::PruneConfig;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport, RunRecord};
use crate::importance::{
    block_influence, build_dependency_groups, taylor_group_importance, CalibrationSet,
    ImportanceReport,
};
use crate::model::{Model, ModelConfig, Triplet};
use crate::prune::{execute, plan, PruneResult};
use crate::recovery::{train, Monitor, OptimizerConfig, RecoveryConfig, Strategy, TrainOutcome, TrainScope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub optimizer: OptimizerConfig,
}

/// Trains every non-vision parameter with response cross-entropy. `seed`
/// drives both the initializer and the batch order.
pub fn train_teacher(
    config: &ModelConfig,
    teacher: &TeacherConfig,
    pool: &[Triplet],
    seed: u64,
    monitor: Option<Monitor<'_>>,
) -> Result<TrainOutcome> {
    let model = Model::init(config, seed)?;
    let mut optimizer = teacher.optimizer.clone();
    optimizer.seed = seed;
    let rc = RecoveryConfig {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
        scope: TrainScope::ProjectorLlm,
        lora: None,
        data_fraction: 1.0,
        optimizer,
        ..RecoveryConfig::default()
    };
    train(model, None, pool, &rc, monitor)
}

/// Scores `model` for `mode` on a seeded calibration sample.
pub fn importance(
    model: &Model,
    mode: PruneMode,
    pool: &[Triplet],
    calibration_size: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    let calib = CalibrationSet::sample(pool, calibration_size, seed)?;
    Ok(match mode {
        PruneMode::Layerwise => ImportanceReport::Layers(block_influence(model, &calib)?),
        PruneMode::Widthwise => {
            let groups = build_dependency_groups(model);
            ImportanceReport::Groups {
                groups: taylor_group_importance(model, &groups, &calib)?,
            }
        }
    })
}

pub fn prune_model(
    model: &Model,
    mode: PruneMode,
    ratio: f64,
    pool: &[Triplet],
    prune: &PruneConfig,
    seed: u64,
) -> Result<PruneResult> {
    let report = importance(model, mode, pool, prune.calibration_size, seed)?;
    let p = plan(model, &report, ratio, &prune.floors)?;
    execute(model, &p)
}

/// One prune-then-recover experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub mode: PruneMode,
    pub ratio: f64,
    pub strategy: Strategy,
    pub data_fraction: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn name(&self) -> String {
        format!(
            "{}-{:.2}-{}-f{:.2}-s{}",
            self.mode, self.ratio, self.strategy, self.data_fraction, self.seed
        )
    }
}

pub struct ScenarioOutcome {
    pub record: RunRecord,
    pub model: Model,
    pub history: Vec<crate::recovery::LossBreakdown>,
}

/// Prunes `teacher`, recovers with the scenario's strategy on top of
/// `base`, and evaluates against `teacher_report`.
pub fn run_scenario(
    teacher: &Model,
    train_pool: &[Triplet],
    eval_pool: &[Triplet],
    teacher_report: &EvalReport,
    scenario: &Scenario,
    base: &RecoveryConfig,
    prune: &PruneConfig,
) -> Result<ScenarioOutcome> {
    let pruned = prune_model(
        teacher,
        scenario.mode,
        scenario.ratio,
        train_pool,
        prune,
        scenario.seed,
    )?;
    let (model, history) = match scenario.strategy.apply(base) {
        None => (pruned.model, Vec::new()),
        Some(mut rc) => {
            rc.data_fraction = scenario.data_fraction;
            rc.optimizer.seed = scenario.seed;
            let out = train(pruned.model, Some(teacher), train_pool, &rc, None)?;
            (out.student, out.history)
        }
    };
    let name = scenario.name();
    let eval = evaluate(&model, eval_pool, &name, Some(teacher_report))?;
    Ok(ScenarioOutcome {
        record: RunRecord {
            name,
            mode: scenario.mode.to_string(),
            target_ratio: scenario.ratio,
            achieved_ratio: pruned.achieved_ratio,
            strategy: scenario.strategy.to_string(),
            data_fraction: scenario.data_fraction,
            seed: scenario.seed,
            eval,
        },
        model,
        history,
    })
}
