use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use timealign_nn::io::{load_tensor, save_tensor};
use timealign_nn::Tensor;

use crate::bev_encoder::{pillarize, BevSpec, FeatureMap, FeatureRole, PillarGrid};
use crate::detection_head::{encode_targets, Box3D, Targets};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::scene_sim::{generate_scene, mix_seed, render_camera_bev, render_lidar, SceneConfig};
use crate::temporal_data::{
    assemble_history, draw_lag, inject_lag, load_nuscenes_style, write_nuscenes_style, FrameRecord, LagConfig,
    HISTORY_LEN,
};

use super::config::DataConfig;

pub const DATASET_META: &str = "dataset.json";
pub const ANNOTATIONS: &str = "annotations.json";
pub const CAMERA_DIR: &str = "camera";

/// One scene: LiDAR frames with poses, per-frame camera BEV features and
/// ground-truth boxes in each frame's ego coordinates.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub token: String,
    pub frames: Vec<FrameRecord>,
    /// `1 x C x H x W` per frame.
    pub camera: Vec<Tensor>,
    pub gt: Vec<Vec<Box3D>>,
}

/// Everything the model sees for one timestep.
#[derive(Clone, Debug)]
pub struct TemporalSample {
    pub scene_token: String,
    pub t: usize,
    /// Frames `t-3, t-2, t-1` in the ego frame of `t`.
    pub history: Vec<PointCloud>,
    /// The cloud presented as current (possibly lagged).
    pub observed: PointCloud,
    /// The true frame `t`, used for the step-`t` prediction label.
    pub current: PointCloud,
    pub lag_applied: usize,
    pub camera_feature: FeatureMap,
    pub gt_boxes: Vec<Box3D>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetMeta {
    bev: BevSpec,
    camera_channels: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub bev: BevSpec,
    pub camera_channels: usize,
    pub scenes: Vec<SceneData>,
}

impl Dataset {
    pub fn simulate(cfg: &DataConfig) -> Result<Dataset> {
        cfg.validate()?;
        let scenes = (0..cfg.num_scenes)
            .map(|i| {
                let scene_cfg = SceneConfig {
                    seed: mix_seed(&[cfg.seed, i as u64, 0x5ce7e]),
                    ..cfg.scene.clone()
                };
                let scene = generate_scene(&scene_cfg)?;
                let render_seed = mix_seed(&[scene_cfg.seed, 1]);
                let mut frames = Vec::with_capacity(scene.duration());
                let mut camera = Vec::with_capacity(scene.duration());
                let mut gt = Vec::with_capacity(scene.duration());
                for k in 0..scene.duration() {
                    let cloud = render_lidar(&scene, k, &cfg.sensor, render_seed)?;
                    frames.push(FrameRecord {
                        cloud,
                        ego_pose: scene.frames[k].ego_pose,
                        timestamp_us: scene.timestamp_us(k),
                        scene_token: scene.token.clone(),
                        frame_index: k,
                    });
                    camera.push(render_camera_bev(&scene, k, &cfg.bev, cfg.camera_channels, &cfg.camera, render_seed)?.data);
                    gt.push(scene.ego_objects(k)?.iter().map(Box3D::ground_truth).collect());
                }
                Ok(SceneData {
                    token: scene.token,
                    frames,
                    camera,
                    gt,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            bev: cfg.bev,
            camera_channels: cfg.camera_channels,
            scenes,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let frames: Vec<Vec<FrameRecord>> = self.scenes.iter().map(|s| s.frames.clone()).collect();
        write_nuscenes_style(dir, &frames)?;
        let cam_dir = dir.join(CAMERA_DIR);
        std::fs::create_dir_all(&cam_dir).map_err(|e| Error::io(&cam_dir, e))?;
        let mut ann: BTreeMap<&str, &Vec<Vec<Box3D>>> = BTreeMap::new();
        for s in &self.scenes {
            for (k, t) in s.camera.iter().enumerate() {
                save_tensor(cam_dir.join(camera_file(&s.token, k)), t)?;
            }
            ann.insert(&s.token, &s.gt);
        }
        super::config::write_json(dir.join(ANNOTATIONS), &ann)?;
        super::config::write_json(
            dir.join(DATASET_META),
            &DatasetMeta {
                bev: self.bev,
                camera_channels: self.camera_channels,
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let meta: DatasetMeta = read_data_json(&dir.join(DATASET_META))?;
        meta.bev.validate()?;
        let mut ann: BTreeMap<String, Vec<Vec<Box3D>>> = read_data_json(&dir.join(ANNOTATIONS))?;
        let mut scenes = Vec::new();
        for frames in load_nuscenes_style(dir)? {
            let token = frames[0].scene_token.clone();
            let gt = ann
                .remove(&token)
                .ok_or_else(|| Error::Manifest(format!("no annotations for scene {}", token)))?;
            if gt.len() != frames.len() {
                return Err(Error::Manifest(format!(
                    "scene {}: {} annotated frames for {} point files",
                    token,
                    gt.len(),
                    frames.len()
                )));
            }
            let mut camera = Vec::with_capacity(frames.len());
            for k in 0..frames.len() {
                let path = dir.join(CAMERA_DIR).join(camera_file(&token, k));
                let t = load_tensor(&path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
                let s = t.shape();
                if s.len() != 4 || s[1] != meta.camera_channels || s[2] != meta.bev.height() || s[3] != meta.bev.width() {
                    return Err(Error::Data(format!("{}: camera feature has shape {:?}", path.display(), s)));
                }
                camera.push(t);
            }
            scenes.push(SceneData { token, frames, camera, gt });
        }
        if scenes.is_empty() {
            return Err(Error::Data(format!("{}: dataset has no scenes", dir.display())));
        }
        Ok(Dataset {
            bev: meta.bev,
            camera_channels: meta.camera_channels,
            scenes,
        })
    }

    /// `(scene, t)` pairs with `t >= first_frame`.
    pub fn indices(&self, first_frame: usize) -> Vec<(usize, usize)> {
        self.scenes
            .iter()
            .enumerate()
            .flat_map(|(s, sc)| (first_frame..sc.frames.len()).map(move |t| (s, t)))
            .collect()
    }

    pub fn sample(&self, scene: usize, t: usize, lag: &LagConfig, rng_seed: u64) -> Result<TemporalSample> {
        let sc = self
            .scenes
            .get(scene)
            .ok_or_else(|| Error::Data(format!("scene {} out of range", scene)))?;
        let history = assemble_history(&sc.frames, t)?;
        let (observed, lag_applied) = inject_lag(&sc.frames, t, lag, rng_seed)?;
        Ok(TemporalSample {
            scene_token: sc.token.clone(),
            t,
            history,
            observed,
            current: sc.frames[t].cloud.clone(),
            lag_applied,
            camera_feature: FeatureMap::new(sc.camera[t].clone(), FeatureRole::Camera)?,
            gt_boxes: sc.gt[t].clone(),
        })
    }

    /// Pillarized inputs for `(scene, t)` under every possible lag.
    pub fn prepare(&self, scene: usize, t: usize) -> Result<PreparedSample> {
        let sc = &self.scenes[scene];
        let history = assemble_history(&sc.frames, t)?;
        let max_k = t.min(HISTORY_LEN);
        let observed = (0..=max_k)
            .map(|k| -> Result<PillarGrid> {
                let (cloud, _) = inject_lag(&sc.frames, t, &LagConfig::fixed(k), 0)?;
                Ok(pillarize(&cloud, &self.bev))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSample {
            scene_token: sc.token.clone(),
            t,
            history: history.iter().map(|c| pillarize(c, &self.bev)).collect(),
            observed,
            camera: sc.camera[t].clone(),
            targets: encode_targets(&sc.gt[t], &self.bev, crate::scene_sim::ObjectClass::ALL.len())?,
            gt_boxes: sc.gt[t].clone(),
        })
    }

    pub fn prepare_all(&self, first_frame: usize) -> Result<Vec<PreparedSample>> {
        self.indices(first_frame)
            .into_iter()
            .map(|(s, t)| self.prepare(s, t))
            .collect()
    }
}

fn read_data_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {}", path.display(), e)))
}

pub fn camera_file(token: &str, frame: usize) -> String {
    format!("{}_{:04}.tabv", token, frame)
}

/// Pillar grids for one timestep. `observed[k]` is frame `t - k` in the ego
/// frame of `t`; `observed[0]` is the true current frame.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub scene_token: String,
    pub t: usize,
    pub history: Vec<PillarGrid>,
    pub observed: Vec<PillarGrid>,
    pub camera: Tensor,
    pub targets: Targets,
    pub gt_boxes: Vec<Box3D>,
}

impl PreparedSample {
    /// Applied lag after clamping at the scene start.
    pub fn clamp_lag(&self, k: usize) -> usize {
        k.min(self.observed.len() - 1)
    }

    pub fn lag_for(&self, cfg: &LagConfig, rng_seed: u64) -> usize {
        self.clamp_lag(draw_lag(cfg, &self.scene_token, self.t, rng_seed))
    }
}
