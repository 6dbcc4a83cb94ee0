//! Run configuration: every tunable constant of the pipeline in one JSON-
//! serializable struct, so a config file plus a seed fully determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::PriorConfig;
use crate::error::{invalid_arg, Error, Result};
use crate::net::DEFAULT_CUT_INDEX;
use crate::pod::RankPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Cut-off layer index l (1-based layer count of the pre-model).
    pub cut_index: usize,
    pub rank_policy: RankPolicy,
    pub mean_center_snapshots: bool,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub freeze_pre_model: bool,
    pub warm_start_heads: bool,
    pub priors: PriorConfig,
    pub match_iou_threshold: f64,
    pub neg_pos_ratio: f64,
    pub nms_iou_threshold: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub eval_iou_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n_train: 600,
            n_test: 100,
            cut_index: DEFAULT_CUT_INDEX,
            rank_policy: RankPolicy::FixedR { r: 64 },
            mean_center_snapshots: false,
            epochs: 30,
            finetune_epochs: 30,
            learning_rate: 1e-2,
            momentum: 0.8,
            batch_size: 8,
            freeze_pre_model: true,
            warm_start_heads: false,
            priors: PriorConfig::default(),
            match_iou_threshold: 0.5,
            neg_pos_ratio: 3.0,
            nms_iou_threshold: 0.45,
            score_threshold: 0.05,
            max_detections: 50,
            eval_iou_threshold: 0.5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Format(format!(
                "{}: {} (line {}, column {})",
                path.display(),
                e,
                e.line(),
                e.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(invalid_arg!("dataset sizes must be >= 1"));
        }
        if self.epochs == 0 || self.finetune_epochs == 0 {
            return Err(invalid_arg!("epoch counts must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid_arg!("batch size must be >= 1"));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(invalid_arg!("learning rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid_arg!("momentum must be in [0, 1)"));
        }
        for (name, v) in [
            ("match_iou_threshold", self.match_iou_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
            ("score_threshold", self.score_threshold),
            ("eval_iou_threshold", self.eval_iou_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid_arg!("{name} {v} outside (0, 1)"));
            }
        }
        if self.neg_pos_ratio <= 0.0 {
            return Err(invalid_arg!("neg_pos_ratio must be positive"));
        }
        if self.max_detections == 0 {
            return Err(invalid_arg!("max_detections must be >= 1"));
        }
        self.priors.validate()
    }
}
