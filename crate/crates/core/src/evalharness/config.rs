//! TOML run configuration covering every tunable of a run.
//!
//! Every section and field is optional; missing values take the defaults
//! below.
//!
//! ```toml
//! [model]            # image_size 224, channels 3, patch_side 16, mask_ratio 0.75
//! [model.encoder]    # depth 6, width 192, heads 6, mlp_ratio 4, memory_slots 50
//! [model.decoder]    # depth 2, width 128, heads 4, gate_granularity "per_token"
//! [model.ablation]   # mem_enc true, mc_dec true
//! [train]            # epochs 2000, batch_size 256, base_lr 1.5e-3, weight_decay 0.05
//! [scoring]          # n_seeds 10, mask_ratio 0.75, pooling "scores"
//! [scoring.ms_ssim]  # scales 3, window_side 11, sigma 1.5, c1 1e-4, c2 9e-4
//! [synthetic]        # image_size 64, n_train 200, 50 + 50 test, anomaly "blob"
//! [eval]             # group_size 100, n_groups 5, fixed_threshold 0.5
//! [data]             # root: dataset directory (absent: use [synthetic])
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::report::EvalConfig;
use crate::evalharness::synthetic::SyntheticSpec;
use crate::pipeline::{AugmentConfig, ModelConfig, TrainConfig};
use crate::scoring::ScoringConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root with manifests or the directory layout.
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub synthetic: SyntheticSpec,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Small profile for 64×64 grayscale images.
    ///
    /// Uses small batches for more optimizer steps in 200 epochs, and no
    /// crop augmentation, since the synthetic textures are already stationary.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            train: TrainConfig {
                epochs: 200,
                batch_size: 2,
                augmentation: AugmentConfig {
                    random_resized_crop: false,
                    ..AugmentConfig::default()
                },
                ..TrainConfig::default()
            },
            scoring: ScoringConfig::tiny(),
            synthetic: SyntheticSpec::default(),
            eval: EvalConfig {
                group_size: 25,
                n_groups: 2,
                ..EvalConfig::default()
            },
            data: DataConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scoring.validate(self.model.image_size, self.model.patch_side)?;
        Ok(())
    }
}
