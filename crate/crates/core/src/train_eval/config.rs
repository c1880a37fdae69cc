use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bev_encoder::{BevSpec, EncoderConfig};
use crate::detection_head::HeadConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::predictor::PredictorConfig;
use crate::scene_sim::{CameraModel, LidarSensorModel, ObjectClass, SceneConfig};
use crate::temporal_data::LagConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// F_f := F_o; no predictor or alignment modules.
    Baseline,
    TimeAlign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub bev: BevSpec,
    pub encoder: EncoderConfig,
    pub camera_channels: usize,
    pub predictor: PredictorConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    /// Feed F_p to the fusion path without gradient, so the predictor is
    /// trained by the prediction loss alone.
    #[serde(default = "default_true")]
    pub detach_prediction: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// 32 x 32 grid, 16 LiDAR and 8 camera channels.
    pub fn desk(variant: Variant) -> Self {
        Self::with_widths(variant, BevSpec::desk(), 16, 8, 16, 16)
    }

    /// 180 x 180 grid, 256 LiDAR and 80 camera channels.
    pub fn full_scale(variant: Variant) -> Self {
        let mut cfg = Self::with_widths(variant, BevSpec::full_scale(), 256, 80, 64, 64);
        cfg.predictor.patch_size = 4;
        cfg.predictor.embed_dim = 96;
        cfg.predictor.window_size = 5;
        cfg.predictor.num_heads = 4;
        cfg.fusion.combine_hidden = 128;
        cfg.fusion.offset_hidden = 64;
        cfg
    }

    pub fn with_widths(variant: Variant, bev: BevSpec, lidar: usize, camera: usize, encoder_hidden: usize, hidden: usize) -> Self {
        let fusion = FusionConfig {
            lidar_channels: lidar,
            camera_channels: camera,
            deform_kernel: 3,
            offset_hidden: hidden,
            combine_hidden: lidar.max(hidden),
            fuse_hidden: hidden,
            fuse_out: hidden,
        };
        Self {
            variant,
            bev,
            encoder: EncoderConfig {
                hidden_channels: encoder_hidden,
                out_channels: lidar,
            },
            camera_channels: camera,
            predictor: PredictorConfig::desk(lidar),
            fusion,
            head: HeadConfig::new(hidden, hidden),
            detach_prediction: true,
        }
    }

    pub fn lidar_channels(&self) -> usize {
        self.encoder.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.bev.validate()?;
        let c = self.lidar_channels();
        if c == 0 || self.encoder.hidden_channels == 0 || self.camera_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.predictor.channels != c || self.fusion.lidar_channels != c {
            return Err(Error::Config(format!(
                "LiDAR channel count disagrees: encoder {}, predictor {}, fusion {}",
                c, self.predictor.channels, self.fusion.lidar_channels
            )));
        }
        if self.fusion.camera_channels != self.camera_channels {
            return Err(Error::Config(format!(
                "camera channel count disagrees: {} vs fusion {}",
                self.camera_channels, self.fusion.camera_channels
            )));
        }
        if self.head.in_channels != self.fusion.fuse_out {
            return Err(Error::Config(format!(
                "head input {} does not match fusion output {}",
                self.head.in_channels, self.fusion.fuse_out
            )));
        }
        if self.head.num_classes != ObjectClass::ALL.len() {
            return Err(Error::Config(format!("head must predict {} classes", ObjectClass::ALL.len())));
        }
        self.fusion.validate()?;
        self.predictor.validate(self.bev.height(), self.bev.width())
    }
}

/// How a synthetic dataset is generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_scenes: usize,
    pub scene: SceneConfig,
    pub sensor: LidarSensorModel,
    pub camera: CameraModel,
    pub bev: BevSpec,
    pub camera_channels: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_scenes: 8,
            scene: SceneConfig::default(),
            sensor: LidarSensorModel::default(),
            camera: CameraModel::default(),
            bev: BevSpec::desk(),
            camera_channels: 8,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 {
            return Err(Error::Config("num_scenes must be positive".into()));
        }
        self.scene.validate()?;
        self.sensor.validate()?;
        self.camera.validate()?;
        self.bev.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub epochs: usize,
    pub lambda_pred: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    pub lag: LagConfig,
    /// First frame index used as a sample.
    pub first_frame: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: vec![
                Stage { epochs: 15, lambda_pred: 10.0 },
                Stage { epochs: 10, lambda_pred: 0.001 },
            ],
            learning_rate: 2e-3,
            lr_decay: 0.95,
            batch_size: 4,
            grad_clip: 5.0,
            lag: LagConfig::default(),
            first_frame: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// `lambda_pred` for every epoch, in order.
    pub fn lambda_schedule(&self) -> Vec<f64> {
        self.stages
            .iter()
            .flat_map(|s| std::iter::repeat(s.lambda_pred).take(s.epochs))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs() == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        if self.stages.iter().any(|s| !(s.lambda_pred >= 0.0) || !s.lambda_pred.is_finite()) {
            return Err(Error::Config("lambda_pred must be finite and nonnegative".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || self.batch_size == 0 || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        self.lag.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCondition {
    pub label: String,
    pub lag: LagConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub conditions: Vec<EvalCondition>,
    pub match_distance: f64,
    pub classes: Vec<ObjectClass>,
    pub score_threshold: f64,
    pub max_dets: usize,
    pub first_frame: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            conditions: vec![Self::condition(0), Self::condition(1)],
            match_distance: 2.0,
            classes: ObjectClass::ALL.to_vec(),
            score_threshold: 0.05,
            max_dets: 50,
            first_frame: 3,
        }
    }
}

impl EvalProtocol {
    pub fn condition(lag: usize) -> EvalCondition {
        let label = if lag == 0 {
            "LiDAR(T)".to_string()
        } else {
            format!("LiDAR Lagging(T-{})", lag)
        };
        EvalCondition {
            label,
            lag: LagConfig::fixed(lag),
        }
    }

    pub fn single(lag: usize) -> Self {
        Self {
            conditions: vec![Self::condition(lag)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::Config("evaluation needs at least one condition".into()));
        }
        if self.classes.is_empty() || !(self.match_distance > 0.0) {
            return Err(Error::Config("invalid evaluation classes or match distance".into()));
        }
        for c in &self.conditions {
            c.lag.validate()?;
        }
        Ok(())
    }
}

/// Everything a CLI run needs, as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::desk(Variant::TimeAlign),
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.bev != self.model.bev || self.data.camera_channels != self.model.camera_channels {
            return Err(Error::Config("data and model disagree on the BEV grid or camera channels".into()));
        }
        Ok(())
    }
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// First 16 hex digits of the SHA-256 of the JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{:02x}", b)).collect())
}
