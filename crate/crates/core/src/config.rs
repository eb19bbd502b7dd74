//! Configuration for every stage of the pipeline.
//!
//! A config file is TOML with one table per struct. Field names match the
//! struct fields exactly; unknown or missing keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden width multiplier of the transformer MLP.
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_cameras: usize,
    /// Weight on the camera embedding added to every token.
    pub camera_weight: f64,
    pub stem_channels: usize,
    /// Standard deviation of the truncated-normal init of every linear
    /// weight and embedding.
    pub init_std: f64,
}

impl BackboneConfig {
    /// ViT-Small/16 at 384x128 with the IBN stem.
    pub fn vit_small(num_cameras: usize) -> Self {
        Self {
            image_height: 384,
            image_width: 128,
            patch_size: 16,
            embed_dim: 384,
            num_layers: 12,
            num_heads: 6,
            num_cameras,
            camera_weight: 3.0,
            stem_channels: 64,
            init_std: 0.02,
        }
    }

    /// CPU-trainable configuration that keeps every shape relation.
    pub fn toy(num_cameras: usize) -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            patch_size: 16,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            num_cameras,
            camera_weight: 3.0,
            stem_channels: 32,
            init_std: 0.3,
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    /// Number of local tokens.
    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Local tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || p % 2 != 0 {
            return Err(Error::Config(format!("patch_size {p} must be a positive even number")));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch_size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.num_cameras == 0 {
            return Err(Error::Config("num_cameras must be at least 1".into()));
        }
        if self.stem_channels < 2 {
            return Err(Error::Config("stem_channels must be at least 2".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if !self.camera_weight.is_finite() {
            return Err(Error::Config("camera_weight must be finite".into()));
        }
        Ok(())
    }
}

/// Which class token(s) form the global feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Avg,
    Branch1,
    Branch2,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(FusionMode::Avg),
            "b1" | "branch1" => Ok(FusionMode::Branch1),
            "b2" | "branch2" => Ok(FusionMode::Branch2),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected avg, b1 or b2)"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Avg => "avg",
            FusionMode::Branch1 => "branch1",
            FusionMode::Branch2 => "branch2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Stripe counts `[K1, K2]` for the two branches.
    pub partitions: [usize; 2],
    pub duplicate_last_layer: bool,
    pub fusion_mode: FusionMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            partitions: [2, 3],
            duplicate_last_layer: true,
            fusion_mode: FusionMode::Avg,
        }
    }
}

impl HeadConfig {
    pub fn num_parts(&self) -> usize {
        self.partitions[0] + self.partitions[1]
    }

    pub fn validate(&self, grid_rows: usize) -> Result<()> {
        for (i, &k) in self.partitions.iter().enumerate() {
            if k == 0 || k > grid_rows {
                return Err(Error::Config(format!(
                    "partition K{} = {k} must lie in 1..={grid_rows}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssociationConfig {
    /// Cosine-distance radius.
    pub dbscan_eps: f64,
    pub dbscan_min_samples: usize,
    pub num_hard_negatives: usize,
    pub online_topk: usize,
    /// When every image is an outlier, retry up to this many times with eps
    /// scaled by [`EPS_RELAX_FACTOR`]. Zero aborts the epoch instead.
    #[serde(default)]
    pub eps_relax_steps: usize,
}

pub const EPS_RELAX_FACTOR: f64 = 1.25;

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            dbscan_eps: 0.5,
            dbscan_min_samples: 4,
            num_hard_negatives: 50,
            online_topk: 5,
            eps_relax_steps: 0,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dbscan_eps > 0.0) {
            return Err(Error::Config("dbscan_eps must be positive".into()));
        }
        if self.dbscan_min_samples == 0 {
            return Err(Error::Config("dbscan_min_samples must be at least 1".into()));
        }
        if self.num_hard_negatives == 0 {
            return Err(Error::Config("num_hard_negatives must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// Updating rate of the proxy memory.
    pub momentum: f64,
    pub temperature: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            momentum: 0.2,
            temperature: 0.07,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("memory momentum must lie in [0, 1]".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_p: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0) || !self.lambda_p.is_finite() {
            return Err(Error::Config("lambda_p must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub warmup_start_factor: f64,
    pub step_epochs: Vec<usize>,
    pub step_factor: f64,
    pub batch_size: usize,
    /// Zero padding before the random crop, in pixels.
    pub crop_padding: usize,
    /// Recompute BN running statistics on the clean training images before
    /// each clustering round.
    #[serde(default)]
    pub calibrate_bn: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            base_lr: 3.5e-4,
            weight_decay: 5e-4,
            momentum: 0.9,
            warmup_epochs: 10,
            warmup_start_factor: 0.01,
            step_epochs: vec![20, 40],
            step_factor: 0.1,
            batch_size: 32,
            crop_padding: 10,
            calibrate_bn: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.step_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("step_epochs must be strictly increasing".into()));
        }
        if self.step_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::Config("step_epochs must be below epochs".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for `epoch`: linear warmup then step decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.base_lr;
        if epoch < self.warmup_epochs {
            let t = epoch as f64 / self.warmup_epochs as f64;
            lr *= self.warmup_start_factor + (1.0 - self.warmup_start_factor) * t;
        }
        let decays = self.step_epochs.iter().filter(|&&s| epoch >= s).count();
        lr * self.step_factor.powi(decays as i32)
    }
}

/// Input and output locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub association: AssociationConfig,
    pub memory: MemoryConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    /// Desk-scale defaults: toy backbone with a 15-epoch schedule.
    pub fn toy(num_cameras: usize) -> Self {
        Self {
            backbone: BackboneConfig::toy(num_cameras),
            head: HeadConfig::default(),
            association: AssociationConfig {
                dbscan_min_samples: 6,
                eps_relax_steps: 6,
                ..AssociationConfig::default()
            },
            memory: MemoryConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig {
                epochs: 15,
                base_lr: 3.5e-4,
                warmup_epochs: 2,
                step_epochs: vec![10],
                crop_padding: 3,
                calibrate_bn: true,
                ..TrainConfig::default()
            },
            data: DataConfig {
                manifest: PathBuf::from("manifest.csv"),
                output_dir: PathBuf::from("run"),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate(self.backbone.grid_rows())?;
        self.association.validate()?;
        self.memory.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_reference_points() {
        let t = TrainConfig::default();
        assert!((t.lr_at(0) - 3.5e-6).abs() < 1e-15);
        assert!((t.lr_at(10) - 3.5e-4).abs() < 1e-15);
        assert!((t.lr_at(5) - 3.5e-4 * (0.01 + 0.99 * 0.5)).abs() < 1e-15);
        assert!((t.lr_at(20) - 3.5e-5).abs() < 1e-15);
        assert!((t.lr_at(40) - 3.5e-6).abs() < 1e-15);
        assert!((t.lr_at(49) - 3.5e-6).abs() < 1e-15);
    }

    #[test]
    fn token_counts() {
        let b = BackboneConfig::vit_small(6);
        assert_eq!((b.grid_rows(), b.grid_cols(), b.num_tokens()), (24, 8, 193));
        let t = BackboneConfig::toy(4);
        assert_eq!((t.grid_rows(), t.grid_cols(), t.num_tokens()), (4, 2, 9));
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut b = BackboneConfig::toy(2);
        b.image_height = 60;
        assert!(matches!(b.validate(), Err(Error::Config(_))));
        let mut b = BackboneConfig::toy(2);
        b.patch_size = 15;
        assert!(b.validate().is_err());
        let mut b = BackboneConfig::toy(2);
        b.num_heads = 5;
        assert!(b.validate().is_err());
        let h = HeadConfig {
            partitions: [2, 5],
            ..HeadConfig::default()
        };
        assert!(h.validate(4).is_err());
    }

    #[test]
    fn toml_roundtrip_and_strictness() {
        let cfg = Config::toy(4);
        let text = cfg.to_toml_string();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);

        let missing = text.replace("online_topk = 5\n", "");
        assert!(matches!(Config::from_toml_str(&missing), Err(Error::Config(_))));
        let extra = text.replace("online_topk = 5\n", "online_topk = 5\nbogus = 1\n");
        assert!(Config::from_toml_str(&extra).is_err());
    }

    #[test]
    fn fusion_mode_parsing() {
        assert_eq!("avg".parse::<FusionMode>().unwrap(), FusionMode::Avg);
        assert_eq!("b1".parse::<FusionMode>().unwrap(), FusionMode::Branch1);
        assert_eq!("branch2".parse::<FusionMode>().unwrap(), FusionMode::Branch2);
        assert!("max".parse::<FusionMode>().is_err());
    }
}
