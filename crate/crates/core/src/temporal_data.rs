//! Temporal sample assembly: history extraction, ego-motion compensation,
//! padding, lag injection, and the on-disk frame layout.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{read_point_file, write_point_file, PointCloud};
use crate::pose::SE3Pose;
use crate::scene_sim::mix_seed;

pub const HISTORY_LEN: usize = 3;
pub const POSES_MANIFEST: &str = "poses.json";

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub cloud: PointCloud,
    /// Ego to global.
    pub ego_pose: SE3Pose,
    pub timestamp_us: u64,
    pub scene_token: String,
    pub frame_index: usize,
}

/// Express `cloud` (in the ego frame of `pose_src`) in the ego frame of
/// `pose_dst`: `p' = pose_dst^-1 * pose_src * p`.
pub fn compensate(cloud: &PointCloud, pose_src: &SE3Pose, pose_dst: &SE3Pose) -> PointCloud {
    let m = pose_dst.inverse().compose(pose_src);
    let mut out = cloud.clone();
    for p in &mut out.points {
        let [x, y, z] = m.transform_point(p.xyz());
        p.x = x;
        p.y = y;
        p.z = z;
    }
    out
}

fn frame_in_current(frames: &[FrameRecord], src: usize, t: usize) -> PointCloud {
    if src == t {
        frames[t].cloud.clone()
    } else {
        compensate(&frames[src].cloud, &frames[src].ego_pose, &frames[t].ego_pose)
    }
}

/// Frames `t-3, t-2, t-1` (earliest first) in the ego frame of `t`. Slots
/// before the scene start hold a copy of frame `t`.
pub fn assemble_history(frames: &[FrameRecord], t: usize) -> Result<Vec<PointCloud>> {
    if frames.is_empty() {
        return Err(Error::Data("cannot assemble history from an empty scene".into()));
    }
    if t >= frames.len() {
        return Err(Error::Data(format!("frame {} out of range ({} frames)", t, frames.len())));
    }
    Ok((1..=HISTORY_LEN)
        .rev()
        .map(|back| match t.checked_sub(back) {
            Some(src) => frame_in_current(frames, src, t),
            None => frames[t].cloud.clone(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagMode {
    TrainRandom,
    EvalFixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagConfig {
    pub alpha: f64,
    pub max_lag: usize,
    /// Weights over lags `1..=max_lag`.
    pub lag_weights: Vec<f64>,
    pub mode: LagMode,
}

impl LagConfig {
    pub fn train(alpha: f64, max_lag: usize) -> Self {
        Self {
            alpha,
            max_lag,
            lag_weights: vec![1.0 / max_lag.max(1) as f64; max_lag.max(1)],
            mode: LagMode::TrainRandom,
        }
    }

    pub fn fixed(k: usize) -> Self {
        Self {
            alpha: 0.0,
            max_lag: k.max(1),
            lag_weights: vec![1.0 / k.max(1) as f64; k.max(1)],
            mode: LagMode::EvalFixed(k),
        }
    }

    pub fn none() -> Self {
        Self::train(0.0, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("lag alpha {} outside [0, 1]", self.alpha)));
        }
        if !(1..=3).contains(&self.max_lag) {
            return Err(Error::Config(format!("max_lag {} outside 1..=3", self.max_lag)));
        }
        if self.lag_weights.len() != self.max_lag
            || self.lag_weights.iter().any(|w| !(*w >= 0.0))
            || (self.lag_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "lag weights {:?} must be {} nonnegative values summing to 1",
                self.lag_weights, self.max_lag
            )));
        }
        if let LagMode::EvalFixed(k) = self.mode {
            if k > 3 {
                return Err(Error::Config(format!("fixed lag {} outside 0..=3", k)));
            }
        }
        Ok(())
    }
}

impl Default for LagConfig {
    fn default() -> Self {
        Self::train(0.5, 1)
    }
}

/// Lag length chosen for sample `(scene_token, t)` before clamping.
pub fn draw_lag(cfg: &LagConfig, scene_token: &str, t: usize, rng_seed: u64) -> usize {
    match cfg.mode {
        LagMode::EvalFixed(k) => k,
        LagMode::TrainRandom => {
            let token_hash = mix_seed(&[token_u64(scene_token)]);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[rng_seed, token_hash, t as u64]));
            if rng.gen::<f64>() >= cfg.alpha {
                return 0;
            }
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, w) in cfg.lag_weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    return i + 1;
                }
            }
            cfg.max_lag
        }
    }
}

fn token_u64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Returns the cloud presented as "current" and the applied lag. A lagged
/// frame is compensated into the ego frame of `t`; lags reaching before the
/// scene start are clamped to `t`.
pub fn inject_lag(frames: &[FrameRecord], t: usize, cfg: &LagConfig, rng_seed: u64) -> Result<(PointCloud, usize)> {
    if t >= frames.len() {
        return Err(Error::Data(format!("frame {} out of range ({} frames)", t, frames.len())));
    }
    let k = draw_lag(cfg, &frames[t].scene_token, t, rng_seed).min(t);
    Ok((frame_in_current(frames, t - k, t), k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub file: String,
    pub timestamp_us: u64,
    pub scene_token: String,
    pub ego_pose: SE3Pose,
}

/// Read `*.bin` clouds listed in `poses.json`, grouped by scene and sorted
/// by timestamp. Returns scenes in token order.
pub fn load_nuscenes_style(dir: impl AsRef<Path>) -> Result<Vec<Vec<FrameRecord>>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(POSES_MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let entries: Vec<PoseEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {}", manifest_path.display(), e)))?;
    let mut by_file: BTreeMap<&str, &PoseEntry> = BTreeMap::new();
    for e in &entries {
        if by_file.insert(e.file.as_str(), e).is_some() {
            return Err(Error::Manifest(format!("duplicate manifest entry for {}", e.file)));
        }
    }

    let mut bins: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|d| d.ok())
        .map(|d| d.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".bin"))
        .collect();
    bins.sort();

    let mut scenes: BTreeMap<String, Vec<FrameRecord>> = BTreeMap::new();
    for name in &bins {
        let entry = by_file
            .get(name.as_str())
            .ok_or_else(|| Error::Manifest(format!("no pose for point file {}", name)))?;
        let mut cloud = read_point_file(dir.join(name))?;
        cloud.timestamp_us = entry.timestamp_us;
        scenes.entry(entry.scene_token.clone()).or_default().push(FrameRecord {
            cloud,
            ego_pose: entry.ego_pose,
            timestamp_us: entry.timestamp_us,
            scene_token: entry.scene_token.clone(),
            frame_index: 0,
        });
    }
    for e in &entries {
        if !bins.iter().any(|b| *b == e.file) {
            return Err(Error::Manifest(format!("manifest lists missing point file {}", e.file)));
        }
    }

    let mut out = Vec::with_capacity(scenes.len());
    for (token, mut frames) in scenes {
        frames.sort_by_key(|f| f.timestamp_us);
        for (i, w) in frames.windows(2).enumerate() {
            if w[0].timestamp_us == w[1].timestamp_us {
                return Err(Error::Data(format!("scene {}: duplicate timestamp at frame {}", token, i + 1)));
            }
        }
        for (i, f) in frames.iter_mut().enumerate() {
            f.frame_index = i;
        }
        out.push(frames);
    }
    Ok(out)
}

/// File name used for a frame when writing a dataset.
pub fn frame_file_name(scene_token: &str, frame_index: usize) -> String {
    format!("{}_{:04}.bin", scene_token, frame_index)
}

/// Write frames as `*.bin` files plus a `poses.json` manifest.
pub fn write_nuscenes_style(dir: impl AsRef<Path>, scenes: &[Vec<FrameRecord>]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for frames in scenes {
        for f in frames {
            let file = frame_file_name(&f.scene_token, f.frame_index);
            write_point_file(dir.join(&file), &f.cloud)?;
            entries.push(PoseEntry {
                file,
                timestamp_us: f.timestamp_us,
                scene_token: f.scene_token.clone(),
                ego_pose: f.ego_pose,
            });
        }
    }
    let path = dir.join(POSES_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&entries)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Point;

    fn frame(k: usize, x: f64) -> FrameRecord {
        FrameRecord {
            cloud: PointCloud::new(vec![Point::new(k as f64, 0.0, 0.0, 0.5)], format!("f{}", k), k as u64),
            ego_pose: SE3Pose::from_xyz_yaw(x, 0.0, 0.0, 0.0),
            timestamp_us: k as u64 * 500_000,
            scene_token: "s".into(),
            frame_index: k,
        }
    }

    #[test]
    fn pure_translation() {
        let c = PointCloud::new(vec![Point::new(3.0, 0.0, 0.0, 0.2)], "c", 0);
        let out = compensate(&c, &SE3Pose::identity(), &SE3Pose::from_xyz_yaw(2.0, 0.0, 0.0, 0.0));
        assert_eq!(out.points[0].xyz(), [1.0, 0.0, 0.0]);
        assert_eq!(out.points[0].intensity, 0.2);
    }

    #[test]
    fn fixed_lag_clamps_at_scene_start() {
        let frames: Vec<_> = (0..4).map(|k| frame(k, 0.0)).collect();
        let (obs, k) = inject_lag(&frames, 0, &LagConfig::fixed(2), 1).unwrap();
        assert_eq!(k, 0);
        assert_eq!(obs, frames[0].cloud);
        let (obs, k) = inject_lag(&frames, 3, &LagConfig::fixed(2), 1).unwrap();
        assert_eq!(k, 2);
        assert_eq!(obs.points[0].x, 1.0);
    }

    #[test]
    fn lag_config_validation() {
        LagConfig::default().validate().unwrap();
        assert!(LagConfig::train(1.5, 1).validate().is_err());
        let mut c = LagConfig::train(0.5, 2);
        c.lag_weights = vec![0.9, 0.9];
        assert!(c.validate().is_err());
        assert!(LagConfig::train(0.5, 4).validate().is_err());
    }

    #[test]
    fn empty_scene_is_a_data_error() {
        assert!(matches!(assemble_history(&[], 0), Err(Error::Data(_))));
    }
}
