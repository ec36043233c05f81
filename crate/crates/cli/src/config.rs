//! Run configuration shared by the training and benchmarking commands.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use streamtag::arm::{ArmConfig, ArmTrainOptions, PostProcess};
use streamtag::encoder::TrainOptions;
use streamtag::{HybridConfig, UniLayerKind};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "HEAR_SEED";

/// Every setting of a run. Missing keys take the defaults below; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub uni_layers: usize,
    pub bi_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Replaced by the vocabulary size when training.
    pub vocab_size: usize,
    /// Replaced by the label count when training.
    pub num_labels: usize,
    pub max_len: usize,
    pub uni_kind: UniLayerKind,
    pub use_indicators: bool,

    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,

    /// Score window of the restart module.
    pub m: usize,
    /// GRU width of the restart module.
    pub d_arm: usize,
    pub arm_lr: f32,
    pub arm_batch_size: usize,
    pub arm_epochs: usize,
    pub alpha: usize,
    pub beta: usize,
    pub tau: f64,
    pub exclude_latest: bool,
    /// Pick α, β and exclude_latest on dev; otherwise use the values above.
    pub select_postprocess: bool,

    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = HybridConfig::default();
        let train = TrainOptions::default();
        let arm = ArmConfig::default();
        let arm_train = ArmTrainOptions::default();
        let post = PostProcess::default();
        RunConfig {
            uni_layers: model.uni_layers,
            bi_layers: model.bi_layers,
            d_model: model.d_model,
            heads: model.heads,
            ffn: model.ffn,
            vocab_size: 0,
            // Label count of the lookahead task (O, B-PRE, B-MRK).
            num_labels: 3,
            max_len: model.max_len,
            uni_kind: model.uni_kind,
            use_indicators: model.use_indicators,
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            m: arm.m,
            d_arm: arm.hidden,
            arm_lr: arm_train.lr,
            arm_batch_size: arm_train.batch_size,
            arm_epochs: arm_train.epochs,
            alpha: post.alpha,
            beta: post.beta,
            tau: post.tau,
            exclude_latest: post.exclude_latest,
            select_postprocess: true,
            train: None,
            dev: None,
            test: None,
            seed: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`) and applies the seed override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"))?;
        }
        Ok(cfg)
    }

    /// Points `train`, `dev` and `test` at the split files in `dir`.
    pub fn set_data_dir(&mut self, dir: &Path) {
        self.train = Some(dir.join(crate::commands::TRAIN_FILE));
        self.dev = Some(dir.join(crate::commands::DEV_FILE));
        self.test = Some(dir.join(crate::commands::TEST_FILE));
    }

    pub fn model(&self) -> HybridConfig {
        HybridConfig {
            uni_layers: self.uni_layers,
            bi_layers: self.bi_layers,
            d_model: self.d_model,
            heads: self.heads,
            ffn: self.ffn,
            vocab_size: self.vocab_size,
            num_labels: self.num_labels,
            max_len: self.max_len,
            uni_kind: self.uni_kind,
            use_indicators: self.use_indicators,
            seed: self.seed,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }

    pub fn arm(&self) -> ArmConfig {
        ArmConfig {
            m: self.m,
            hidden: self.d_arm,
            seed: self.seed,
        }
    }

    pub fn arm_train_options(&self) -> ArmTrainOptions {
        ArmTrainOptions {
            epochs: self.arm_epochs,
            batch_size: self.arm_batch_size,
            lr: self.arm_lr,
            seed: self.seed,
        }
    }

    pub fn post(&self) -> PostProcess {
        PostProcess {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            exclude_latest: self.exclude_latest,
        }
    }
}
