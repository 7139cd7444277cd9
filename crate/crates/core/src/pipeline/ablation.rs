use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, SamPlacement, TrainTarget};
use super::infer::{evaluate_net, Sample};
use super::train::train;
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::metrics::MetricReport;

/// One network/objective configuration to compare. Fields left unset keep
/// the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    #[serde(default)]
    pub loss_mode: Option<LossMode>,
    #[serde(default)]
    pub skip_encoding: Option<bool>,
    #[serde(default)]
    pub skip_rgb: Option<bool>,
    #[serde(default)]
    pub sam: Option<SamPlacement>,
}

impl AblationVariant {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            loss_mode: None,
            skip_encoding: None,
            skip_rgb: None,
            sam: None,
        }
    }

    /// The five training objectives.
    pub fn task_set() -> Vec<Self> {
        [
            LossMode::Reg,
            LossMode::HardCls,
            LossMode::SoftCls,
            LossMode::HardClsPlusReg,
            LossMode::SoftClsPlusReg,
        ]
        .into_iter()
        .map(|m| Self {
            loss_mode: Some(m),
            ..Self::named(m.to_string())
        })
        .collect()
    }

    /// Encoder-skip and RGB-skip toggles.
    pub fn skip_set() -> Vec<Self> {
        [(true, true), (true, false), (false, true), (false, false)]
            .into_iter()
            .map(|(y, z)| Self {
                skip_encoding: Some(y),
                skip_rgb: Some(z),
                ..Self::named(format!(
                    "skip-encoding {} / skip-rgb {}",
                    if y { "yes" } else { "no" },
                    if z { "yes" } else { "no" }
                ))
            })
            .collect()
    }

    /// SAM at decoding block 3, 4, 5 or absent.
    pub fn sam_set() -> Vec<Self> {
        [Some(3), Some(4), Some(5), None]
            .into_iter()
            .map(|p| Self {
                sam: Some(SamPlacement(p)),
                ..Self::named(match p {
                    Some(b) => format!("SAM at block {b}"),
                    None => "no SAM".to_string(),
                })
            })
            .collect()
    }

    /// Named preset: `tasks`, `skips` or `sam`.
    pub fn preset(name: &str) -> Result<Vec<Self>> {
        match name {
            "tasks" => Ok(Self::task_set()),
            "skips" => Ok(Self::skip_set()),
            "sam" => Ok(Self::sam_set()),
            _ => Err(Error::Config(format!("unknown ablation preset `{name}` (tasks, skips, sam)"))),
        }
    }

    /// The base config with this variant's overrides applied.
    pub fn apply(&self, base: &PipelineConfig, target: TrainTarget) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        if let Some(m) = self.loss_mode {
            cfg.loss.mode = m;
        }
        if let Some(y) = self.skip_encoding {
            cfg.network.skip_encoding = y;
        }
        if let Some(z) = self.skip_rgb {
            cfg.network.skip_rgb = z;
        }
        if let Some(s) = self.sam {
            match target.variant() {
                crate::netgraph::Variant::LowDepthRange => cfg.network.low_sam = s,
                crate::netgraph::Variant::HighDepthRange => cfg.network.high_sam = s,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn format(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            "variant", "REL", "RMSE", "sqREL", "delta1"
        );
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}\n",
                r.variant, m.rel, m.rmse, m.sq_rel, m.delta1
            ));
        }
        out
    }
}

/// Trains every variant under the same seed and schedule and scores it on
/// `val_set` (or the training set when no validation set is given).
pub fn ablation_run(
    config: &PipelineConfig,
    target: TrainTarget,
    variants: &[AblationVariant],
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    let eval_set = if val_set.is_empty() { train_set } else { val_set };
    let mut rows = Vec::new();
    for v in variants {
        let cfg = v.apply(config, target)?;
        let report = train(&cfg, target, train_set, &[], None, None)?;
        let (_, metrics) = evaluate_net(&report.net, eval_set)?;
        log::info!("ablation {}: REL {:.4}", v.name, metrics.rel);
        rows.push(AblationRow {
            variant: v.name.clone(),
            metrics,
        });
    }
    Ok(AblationTable { rows })
}
