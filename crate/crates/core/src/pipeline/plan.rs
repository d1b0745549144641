//! Stage plans and the order-string grammar.
//!
//! ```text
//! order  := "" | stage ("," stage)*
//! stage  := "prune:" rho ":" epochs
//!         | "qat:" epochs
//!         | "kd:" epochs | "kd:" alpha ":" temperature ":" epochs
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::distill::KdConfig;
use crate::error::{Error, Result};

pub const DEFAULT_ORDER: &str = "prune:0.5:20,qat:40,kd:40";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageKind {
    Prune,
    Qat,
    Kd,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Prune => "prune",
            StageKind::Qat => "qat",
            StageKind::Kd => "kd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StageConfig {
    Prune { rho: f64 },
    Qat,
    Kd(KdConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub config: StageConfig,
    pub epochs: usize,
}

impl Stage {
    pub fn prune(rho: f64, epochs: usize) -> Self {
        Self {
            config: StageConfig::Prune { rho },
            epochs,
        }
    }

    pub fn qat(epochs: usize) -> Self {
        Self {
            config: StageConfig::Qat,
            epochs,
        }
    }

    pub fn kd(cfg: KdConfig, epochs: usize) -> Self {
        Self {
            config: StageConfig::Kd(cfg),
            epochs,
        }
    }

    pub fn kind(&self) -> StageKind {
        match self.config {
            StageConfig::Prune { .. } => StageKind::Prune,
            StageConfig::Qat => StageKind::Qat,
            StageConfig::Kd(_) => StageKind::Kd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.config {
            StageConfig::Prune { rho } if !(0.0..1.0).contains(&rho) => Err(Error::config(
                format!("prune sparsity {rho} outside [0, 1)"),
            )),
            StageConfig::Kd(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }
}

/// Canonical grammar form; KD parameters are spelled out only when they
/// differ from the defaults.
impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.config {
            StageConfig::Prune { rho } => write!(f, "prune:{rho}:{}", self.epochs),
            StageConfig::Qat => write!(f, "qat:{}", self.epochs),
            StageConfig::Kd(cfg) if cfg == KdConfig::default() => write!(f, "kd:{}", self.epochs),
            StageConfig::Kd(cfg) => {
                write!(f, "kd:{}:{}:{}", cfg.alpha, cfg.temperature, self.epochs)
            }
        }
    }
}

pub fn format_order(stages: &[Stage]) -> String {
    stages
        .iter()
        .map(Stage::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Directory-safe name of the stage sequence, e.g. `prune-qat-kd`.
pub fn order_label(stages: &[Stage]) -> String {
    if stages.is_empty() {
        return "baseline".into();
    }
    stages
        .iter()
        .map(|s| s.kind().name())
        .collect::<Vec<_>>()
        .join("-")
}

fn check_unique(stages: &[Stage]) -> Result<()> {
    for (i, s) in stages.iter().enumerate() {
        if stages[..i].iter().any(|p| p.kind() == s.kind()) {
            return Err(Error::config(format!(
                "stage {} appears more than once",
                s.kind().name()
            )));
        }
    }
    Ok(())
}

pub fn parse_order(text: &str) -> Result<Vec<Stage>> {
    let mut stages: Vec<Stage> = Vec::new();
    if text.trim().is_empty() {
        return Ok(stages);
    }
    let mut start = 0;
    for item in text.split(',') {
        let stage = parse_stage(item, start)?;
        if stages.iter().any(|s| s.kind() == stage.kind()) {
            return Err(Error::Parse {
                position: start,
                message: format!("duplicate stage {:?}", stage.kind().name()),
            });
        }
        stages.push(stage);
        start += item.len() + 1;
    }
    Ok(stages)
}

fn parse_stage(item: &str, base: usize) -> Result<Stage> {
    let mut fields = Vec::new();
    let mut pos = base;
    for f in item.split(':') {
        fields.push((f, pos));
        pos += f.len() + 1;
    }
    let err = |position: usize, message: String| Error::Parse { position, message };
    let num = |(f, p): (&str, usize), what: &str| -> Result<f64> {
        f.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| err(p, format!("expected {what}, found {f:?}")))
    };
    let epochs = |(f, p): (&str, usize)| -> Result<usize> {
        f.parse::<usize>()
            .map_err(|_| err(p, format!("expected an epoch count, found {f:?}")))
    };
    let (name, name_pos) = fields[0];
    let arity = |want: &[usize]| -> Result<()> {
        if want.contains(&fields.len()) {
            Ok(())
        } else {
            Err(err(
                name_pos,
                format!(
                    "stage {name:?} takes {} fields, found {}",
                    want.iter()
                        .map(|w| w.to_string())
                        .collect::<Vec<_>>()
                        .join(" or "),
                    fields.len()
                ),
            ))
        }
    };
    let stage = match name {
        "prune" => {
            arity(&[3])?;
            let rho = num(fields[1], "a sparsity")?;
            if !(0.0..1.0).contains(&rho) {
                return Err(err(fields[1].1, format!("sparsity {rho} outside [0, 1)")));
            }
            Stage::prune(rho, epochs(fields[2])?)
        }
        "qat" => {
            arity(&[2])?;
            Stage::qat(epochs(fields[1])?)
        }
        "kd" => {
            arity(&[2, 4])?;
            if fields.len() == 2 {
                Stage::kd(KdConfig::default(), epochs(fields[1])?)
            } else {
                let alpha = num(fields[1], "alpha")? as f32;
                let t = num(fields[2], "a temperature")? as f32;
                let cfg = KdConfig::new(alpha, t).map_err(|e| err(fields[1].1, e.to_string()))?;
                Stage::kd(cfg, epochs(fields[3])?)
            }
        }
        other => {
            return Err(err(
                name_pos,
                format!("unknown stage {other:?}, expected prune, qat or kd"),
            ))
        }
    };
    Ok(stage)
}

/// Shared optimizer settings of every fine-tuning stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTraining {
    pub base_lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
}

impl Default for StageTraining {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
    pub total_budget: usize,
    pub seed: u64,
    /// Flags, but does not fail, a final model slower than this.
    pub latency_budget_ms: Option<f64>,
    pub training: StageTraining,
}

impl StagePlan {
    /// A plan whose budget is exactly the sum of its stage epochs.
    pub fn new(stages: Vec<Stage>, seed: u64) -> Result<Self> {
        let plan = Self {
            total_budget: stages.iter().map(|s| s.epochs).sum(),
            stages,
            seed,
            latency_budget_ms: None,
            training: StageTraining::default(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        check_unique(&self.stages)?;
        for s in &self.stages {
            s.validate()?;
        }
        let used = self.epochs();
        if used > self.total_budget {
            return Err(Error::config(format!(
                "stages use {used} epochs, budget is {}",
                self.total_budget
            )));
        }
        if let Some(t) = self.latency_budget_ms {
            if !(t > 0.0) {
                return Err(Error::config(format!(
                    "latency budget must be positive, got {t}"
                )));
            }
        }
        let t = self.training;
        if !(t.base_lr.is_finite() && t.base_lr > 0.0)
            || !(0.0..1.0).contains(&t.momentum)
            || t.batch_size == 0
        {
            return Err(Error::config(format!(
                "invalid stage training settings {t:?}"
            )));
        }
        Ok(())
    }

    /// Fine-tuning epochs summed over stages.
    pub fn epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn label(&self) -> String {
        order_label(&self.stages)
    }
}

/// The four orders of the reference ablation, default first.
pub fn default_orders(rho: f64, budgets: [usize; 3], kd: KdConfig) -> Vec<Vec<Stage>> {
    let p = Stage::prune(rho, budgets[0]);
    let q = Stage::qat(budgets[1]);
    let k = Stage::kd(kd, budgets[2]);
    vec![vec![p, q, k], vec![p, k, q], vec![q, p, k], vec![q, k, p]]
}

/// All six permutations: the four above, then the two KD-first orders.
pub fn all_orders(rho: f64, budgets: [usize; 3], kd: KdConfig) -> Vec<Vec<Stage>> {
    let mut v = default_orders(rho, budgets, kd);
    let p = Stage::prune(rho, budgets[0]);
    let q = Stage::qat(budgets[1]);
    let k = Stage::kd(kd, budgets[2]);
    v.push(vec![k, p, q]);
    v.push(vec![k, q, p]);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_string_is_the_standard_plan() {
        let s = parse_order(DEFAULT_ORDER).unwrap();
        assert_eq!(
            s,
            vec![
                Stage::prune(0.5, 20),
                Stage::qat(40),
                Stage::kd(KdConfig::default(), 40)
            ]
        );
        assert_eq!(format_order(&s), DEFAULT_ORDER);
        assert_eq!(order_label(&s), "prune-qat-kd");
        assert_eq!(StagePlan::new(s, 0).unwrap().epochs(), 100);
    }

    #[test]
    fn explicit_kd_parameters() {
        let s = parse_order("kd:0.7:2:5").unwrap();
        assert_eq!(s, vec![Stage::kd(KdConfig::new(0.7, 2.0).unwrap(), 5)]);
        assert_eq!(format_order(&s), "kd:0.7:2:5");
    }

    #[test]
    fn errors_carry_positions() {
        let pos = |s: &str| match parse_order(s).unwrap_err() {
            Error::Parse { position, .. } => position,
            other => panic!("{other}"),
        };
        assert_eq!(pos("qat:4,qat:5"), 6);
        assert_eq!(pos("qat:4,prune:x:2"), 12);
        assert_eq!(pos("zap:1"), 0);
        assert_eq!(pos("qat:4,kd:-1"), 9);
        assert_eq!(pos("prune:1.0:3"), 6);
        assert_eq!(pos("qat"), 0);
    }

    #[test]
    fn empty_order_is_empty_plan() {
        assert!(parse_order("").unwrap().is_empty());
        assert_eq!(order_label(&[]), "baseline");
    }

    #[test]
    fn budget_and_duplicates_checked() {
        let mut plan = StagePlan::new(vec![Stage::qat(3)], 0).unwrap();
        plan.total_budget = 2;
        assert!(plan.validate().is_err());
        assert!(StagePlan::new(vec![Stage::qat(1), Stage::qat(1)], 0).is_err());
    }

    #[test]
    fn order_sets() {
        let kd = KdConfig::default();
        assert_eq!(default_orders(0.5, [2, 4, 4], kd).len(), 4);
        let all = all_orders(0.5, [2, 4, 4], kd);
        let mut labels: Vec<String> = all.iter().map(|o| order_label(o)).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 6);
    }
}
