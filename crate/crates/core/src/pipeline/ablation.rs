use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate::Task;
use super::finetune::{finetune, FinetuneConfig};
use super::metrics::{series, MetricsRecord};
use super::pretrain::{run_pretrain, Objective, PretrainConfig};
use crate::backbone::BackboneConfig;
use crate::data::{Image, SegExample};
use crate::error::{Error, Result};
use crate::masking::MaskStrategy;
use crate::tokenizer::TokenizerWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    Full,
    NoBlockwise,
    NoVisualTokens,
    NoBoth,
    AllTokens,
}

impl AblationArm {
    pub const ALL: [AblationArm; 5] = [
        AblationArm::Full,
        AblationArm::NoBlockwise,
        AblationArm::NoVisualTokens,
        AblationArm::NoBoth,
        AblationArm::AllTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Full => "full",
            AblationArm::NoBlockwise => "-blockwise",
            AblationArm::NoVisualTokens => "-visual_tokens",
            AblationArm::NoBoth => "-both",
            AblationArm::AllTokens => "+100%_tokens",
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            AblationArm::Full | AblationArm::NoBlockwise => Objective::Mim,
            AblationArm::NoVisualTokens | AblationArm::NoBoth => Objective::Pixel,
            AblationArm::AllTokens => Objective::MimAllPositions,
        }
    }

    pub fn strategy(self) -> MaskStrategy {
        match self {
            AblationArm::NoBlockwise | AblationArm::NoBoth => MaskStrategy::Random,
            _ => MaskStrategy::Blockwise,
        }
    }

    /// Pre-training config for this arm derived from the shared base.
    pub fn pretrain_config(self, base: &PretrainConfig) -> PretrainConfig {
        let mut cfg = base.clone();
        cfg.objective = self.objective();
        cfg.mask.strategy = self.strategy();
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub pretrain: PretrainConfig,
    pub classify: FinetuneConfig,
    pub segment: FinetuneConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            pretrain: PretrainConfig::default(),
            classify: FinetuneConfig::default(),
            segment: FinetuneConfig {
                task: Task::Segment,
                label_smoothing: 0.0,
                ..FinetuneConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    /// Last logged pre-training loss. Token and pixel arms use different
    /// losses, so compare within an objective only.
    pub pretrain_loss: f64,
    pub classify_accuracy: f64,
    pub segment_miou: f64,
}

fn last(records: &[MetricsRecord], split: &str, metric: &str) -> f64 {
    series(records, split, metric).last().map_or(f64::NAN, |p| p.1)
}

/// Runs every arm at the same step budget and seed, then fine-tunes each
/// result for classification and segmentation. Metrics from every run are
/// returned with the split prefixed by the arm name.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_suite(
    pretrain_images: &[Image],
    train: &[SegExample],
    eval: &[SegExample],
    num_classes: usize,
    tokenizer: &TokenizerWeights,
    backbone: &BackboneConfig,
    cfg: &AblationConfig,
) -> Result<(Vec<AblationRow>, Vec<MetricsRecord>)> {
    if cfg.classify.task != Task::Classify || cfg.segment.task != Task::Segment {
        return Err(Error::config("ablate.classify.task", "ablation fine-tunes classify then segment"));
    }
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for arm in AblationArm::ALL {
        let pcfg = arm.pretrain_config(&cfg.pretrain);
        let pre = run_pretrain(pretrain_images, Some(tokenizer), backbone, None, &pcfg)?;
        let cls = finetune(&pre.weights, train, eval, num_classes, &cfg.classify)?;
        let seg = finetune(&pre.weights, train, eval, num_classes + 1, &cfg.segment)?;
        let row = AblationRow {
            arm: arm.name().to_string(),
            pretrain_loss: last(&pre.metrics, "train", "loss"),
            classify_accuracy: last(&cls.metrics, "eval", "accuracy"),
            segment_miou: last(&seg.metrics, "eval", "miou"),
        };
        for (stage, recs) in [("pretrain", pre.metrics), ("classify", cls.metrics), ("segment", seg.metrics)] {
            all.extend(recs.into_iter().map(|mut r| {
                r.split = format!("{}/{stage}/{}", arm.name(), r.split);
                r
            }));
        }
        rows.push(row);
    }
    Ok((rows, all))
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Fixed-width text rendering of the comparison table.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<16}{:>14}{:>14}{:>14}\n", "arm", "pretrain_loss", "cls_acc", "seg_miou");
    for r in rows {
        s += &format!(
            "{:<16}{:>14.4}{:>14.4}{:>14.4}\n",
            r.arm, r.pretrain_loss, r.classify_accuracy, r.segment_miou
        );
    }
    s
}
