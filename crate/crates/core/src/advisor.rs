//! Rule-based compression advice from resource availability and a target
//! ratio.
//!
//! | condition | mode | recovery |
//! |-----------|------|----------|
//! | no recovery possible | widthwise | none |
//! | ratio < 0.20 | layerwise | projector-only FT |
//! | 0.20 ≤ ratio ≤ 0.40 | layerwise | projector + LLM FT with L2 matching |
//! | ratio > 0.40 | widthwise | projector + LLM FT with L2 matching |
//!
//! Suggested data fraction is 0.05 below a ratio of 0.50 and 1.0 from 0.50
//! on, capped by the available budget.

use serde::{Deserialize, Serialize};

use crate::accounting::{
    compression_ratio, count_params, estimate_flops, project_shape, CountScope, PruneMode,
    ShapeRecord,
};
use crate::error::{Error, Result};
use crate::recovery::Strategy;

/// Highest target the rules were validated for.
pub const MAX_VALIDATED_RATIO: f64 = 0.8;
pub const PROJECTOR_ONLY_BELOW: f64 = 0.20;
pub const LAYERWISE_UP_TO: f64 = 0.40;
pub const SMALL_DATA_BELOW: f64 = 0.50;
pub const SMALL_DATA_FRACTION: f64 = 0.05;
pub const DEFAULT_PROMPT_TOKENS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Compute and data are available for recovery training.
    pub can_recover: bool,
    pub target_ratio: f64,
    /// Largest share of the original training data that can be used.
    pub data_budget_fraction: f64,
    /// Text tokens assumed per request for the FLOPs estimate.
    pub prompt_tokens: usize,
}

impl Scenario {
    pub fn new(can_recover: bool, target_ratio: f64) -> Self {
        Self {
            can_recover,
            target_ratio,
            data_budget_fraction: 1.0,
            prompt_tokens: DEFAULT_PROMPT_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio <= MAX_VALIDATED_RATIO) {
            return Err(Error::OutOfRange(format!(
                "target ratio {} is outside the validated range (0, {MAX_VALIDATED_RATIO}]",
                self.target_ratio
            )));
        }
        if !(self.data_budget_fraction > 0.0 && self.data_budget_fraction <= 1.0) {
            return Err(Error::param(format!(
                "data budget fraction must be in (0,1], got {}",
                self.data_budget_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    /// Widthwise pruning without recovery.
    NoResources,
    /// Layerwise pruning with projector (or projector + LLM) finetuning.
    Moderate,
    /// Widthwise pruning with finetuning and hidden-state distillation.
    High,
}

impl Rule {
    pub fn numeral(self) -> &'static str {
        match self {
            Rule::NoResources => "i",
            Rule::Moderate => "ii",
            Rule::High => "iii",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Rule::NoResources => "no recovery resources",
            Rule::Moderate => "moderate compression with recovery",
            Rule::High => "high compression with recovery",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub seq_len: usize,
    pub params_before: u64,
    pub params_after: u64,
    pub decoder_params_before: u64,
    pub decoder_params_after: u64,
    pub achieved_ratio: f64,
    pub flops_before: f64,
    pub flops_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rule: Rule,
    pub mode: PruneMode,
    pub recovery: Strategy,
    /// `None` when no recovery is recommended.
    pub data_fraction: Option<f64>,
    pub rationale: Vec<String>,
    pub estimates: Estimates,
}

pub fn recommend(scenario: &Scenario, shape: &ShapeRecord) -> Result<Recommendation> {
    scenario.validate()?;
    let r = scenario.target_ratio;
    let mut rationale = Vec::new();
    let (rule, mode, recovery) = if !scenario.can_recover {
        rationale.push(
            "no recovery budget: widthwise pruning degrades most gracefully without retraining \
             (LLaVA-7B keeps 92.79% at 15% widthwise compression with no recovery)"
                .to_string(),
        );
        (Rule::NoResources, PruneMode::Widthwise, Strategy::NoRecovery)
    } else if r <= LAYERWISE_UP_TO {
        let recovery = if r < PROJECTOR_ONLY_BELOW {
            rationale.push(format!(
                "ratio {r:.2} < {PROJECTOR_ONLY_BELOW:.2}: realigning the projector alone recovers most of the loss"
            ));
            Strategy::ProjectorFt
        } else {
            rationale.push(format!(
                "ratio {r:.2} >= {PROJECTOR_ONLY_BELOW:.2}: language ability also degrades, finetune projector and LLM with L2 hidden-state matching"
            ));
            Strategy::FtL2
        };
        rationale.push(format!(
            "ratio {r:.2} <= {LAYERWISE_UP_TO:.2}: layerwise pruning for moderate compression \
             (Bunny-3B keeps 95.03% at 30% depth pruning with FT+L2)"
        ));
        (Rule::Moderate, PruneMode::Layerwise, recovery)
    } else {
        rationale.push(format!(
            "ratio {r:.2} > {LAYERWISE_UP_TO:.2}: widthwise pruning with finetuning plus L2 hidden-state distillation"
        ));
        (Rule::High, PruneMode::Widthwise, Strategy::FtL2)
    };

    let data_fraction = if recovery == Strategy::NoRecovery {
        None
    } else {
        let wanted = if r < SMALL_DATA_BELOW {
            rationale.push(format!(
                "ratio {r:.2} < {SMALL_DATA_BELOW:.2}: {SMALL_DATA_FRACTION} of the data retains over 95% of full-data recovery"
            ));
            SMALL_DATA_FRACTION
        } else {
            rationale.push(format!(
                "ratio {r:.2} >= {SMALL_DATA_BELOW:.2}: recovery needs the full training set"
            ));
            1.0
        };
        if scenario.data_budget_fraction < wanted {
            rationale.push(format!(
                "data budget {} is below the suggested {wanted}; expect weaker recovery",
                scenario.data_budget_fraction
            ));
            Some(scenario.data_budget_fraction)
        } else {
            Some(wanted)
        }
    };

    let estimates = estimate(shape, mode, r, scenario.prompt_tokens)?;
    Ok(Recommendation {
        rule,
        mode,
        recovery,
        data_fraction,
        rationale,
        estimates,
    })
}

/// Closed-form size and cost before and after compressing `shape`.
pub fn estimate(shape: &ShapeRecord, mode: PruneMode, ratio: f64, prompt_tokens: usize) -> Result<Estimates> {
    let after = project_shape(shape, mode, ratio)?;
    let seq_len = shape.n_visual_tokens + prompt_tokens;
    Ok(Estimates {
        seq_len,
        params_before: count_params(shape, CountScope::Total),
        params_after: count_params(&after, CountScope::Total),
        decoder_params_before: count_params(shape, CountScope::Decoder),
        decoder_params_after: count_params(&after, CountScope::Decoder),
        achieved_ratio: compression_ratio(shape, &after),
        flops_before: estimate_flops(shape, seq_len).total(),
        flops_after: estimate_flops(&after, seq_len).total(),
    })
}

impl std::fmt::Display for Recommendation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "rule ({}): {}", self.rule.numeral(), self.rule.summary())?;
        writeln!(f, "mode: {}", self.mode)?;
        writeln!(f, "recovery: {}", self.recovery)?;
        match self.data_fraction {
            Some(x) => writeln!(f, "data fraction: {x}")?,
            None => writeln!(f, "data fraction: -")?,
        }
        let e = &self.estimates;
        writeln!(
            f,
            "params: {} -> {} (decoder ratio {:.3})",
            e.params_before, e.params_after, e.achieved_ratio
        )?;
        writeln!(
            f,
            "flops @ {} tokens: {:.3e} -> {:.3e}",
            e.seq_len, e.flops_before, e.flops_after
        )?;
        for line in &self.rationale {
            writeln!(f, "- {line}")?;
        }
        Ok(())
    }
}
