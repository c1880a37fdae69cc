//! Synthetic driving scenes: constant-velocity boxes, a slow unicycle ego,
//! surface-sampled LiDAR and a rasterized camera BEV stand-in.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use timealign_nn::Tensor;

use crate::bev_encoder::{BevSpec, FeatureMap, FeatureRole};
use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud};
use crate::pose::SE3Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Truck,
    Bus,
    Pedestrian,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [ObjectClass::Car, ObjectClass::Truck, ObjectClass::Bus, ObjectClass::Pedestrian];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Bus => "bus",
            ObjectClass::Pedestrian => "pedestrian",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Truck => "Truck",
            ObjectClass::Bus => "Bus",
            ObjectClass::Pedestrian => "Pedestrian",
        }
    }

    /// Nominal `(l, w, h)` in meters.
    pub fn size_prior(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [4.5, 1.9, 1.6],
            ObjectClass::Truck => [7.0, 2.5, 2.8],
            ObjectClass::Bus => [11.0, 2.9, 3.2],
            ObjectClass::Pedestrian => [0.7, 0.7, 1.7],
        }
    }

    fn lidar_intensity(self) -> f64 {
        match self {
            ObjectClass::Car => 0.6,
            ObjectClass::Truck => 0.7,
            ObjectClass::Bus => 0.8,
            ObjectClass::Pedestrian => 0.3,
        }
    }
}

impl std::str::FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown class `{}`", s)))
    }
}

/// Speed range `[min, max]` in m/s per class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRanges {
    pub car: [f64; 2],
    pub truck: [f64; 2],
    pub bus: [f64; 2],
    pub pedestrian: [f64; 2],
}

impl SpeedRanges {
    pub fn get(&self, class: ObjectClass) -> [f64; 2] {
        match class {
            ObjectClass::Car => self.car,
            ObjectClass::Truck => self.truck,
            ObjectClass::Bus => self.bus,
            ObjectClass::Pedestrian => self.pedestrian,
        }
    }

    pub fn all_static() -> Self {
        Self {
            car: [0.0, 0.0],
            truck: [0.0, 0.0],
            bus: [0.0, 0.0],
            pedestrian: [0.0, 0.0],
        }
    }
}

impl Default for SpeedRanges {
    fn default() -> Self {
        Self {
            car: [3.0, 8.0],
            truck: [2.0, 6.0],
            bus: [2.0, 6.0],
            pedestrian: [0.5, 1.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_objects: usize,
    pub classes: Vec<ObjectClass>,
    /// Side of the square spawn area centered on the ego start (m).
    pub area_extent: f64,
    /// Number of frames.
    pub duration: usize,
    pub frame_period: f64,
    pub speed_range: SpeedRanges,
    /// Ego speed range (m/s).
    pub ego_speed: [f64; 2],
    /// Maximum absolute ego yaw rate (rad/s).
    pub ego_yaw_rate: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 6,
            classes: ObjectClass::ALL.to_vec(),
            area_extent: 28.0,
            duration: 8,
            frame_period: 0.5,
            speed_range: SpeedRanges::default(),
            ego_speed: [0.0, 2.0],
            ego_yaw_rate: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.duration < 4 {
            return Err(Error::Config(format!("scene duration {} < 4 frames", self.duration)));
        }
        if !(self.frame_period > 0.0) {
            return Err(Error::Config(format!("frame_period {} must be positive", self.frame_period)));
        }
        if !(self.area_extent > 0.0) {
            return Err(Error::Config(format!("area_extent {} must be positive", self.area_extent)));
        }
        if self.num_objects > 0 && self.classes.is_empty() {
            return Err(Error::Config("no object classes configured".into()));
        }
        for c in ObjectClass::ALL {
            let r = self.speed_range.get(c);
            if !(r[0] >= 0.0 && r[1] >= r[0]) {
                return Err(Error::Config(format!("invalid {} speed range {:?}", c.name(), r)));
            }
        }
        if !(self.ego_speed[0] >= 0.0 && self.ego_speed[1] >= self.ego_speed[0]) || !(self.ego_yaw_rate >= 0.0) {
            return Err(Error::Config("invalid ego motion ranges".into()));
        }
        Ok(())
    }
}

/// One box in global coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl SceneObject {
    /// `[x, y, z, l, w, h, yaw, vx, vy]`.
    pub fn to_record(&self) -> [f64; 9] {
        let [x, y, z] = self.center;
        let [l, w, h] = self.size;
        [x, y, z, l, w, h, self.yaw, self.velocity[0], self.velocity[1]]
    }

    /// The same box expressed in the ego frame of `ego_pose`.
    pub fn in_ego_frame(&self, ego_pose: &SE3Pose) -> SceneObject {
        let inv = ego_pose.inverse();
        let c = inv.transform_point(self.center);
        let v = inv.rotate_vector([self.velocity[0], self.velocity[1], 0.0]);
        SceneObject {
            center: c,
            yaw: wrap_angle(self.yaw - ego_pose.yaw()),
            velocity: [v[0], v[1]],
            ..*self
        }
    }

    fn object_to_world(&self) -> SE3Pose {
        SE3Pose::from_xyz_yaw(self.center[0], self.center[1], self.center[2], self.yaw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub ego_pose: SE3Pose,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub token: String,
    pub frame_period: f64,
    pub frames: Vec<SceneFrame>,
}

impl SceneState {
    pub fn duration(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, index: usize) -> Result<&SceneFrame> {
        self.frames.get(index).ok_or_else(|| {
            Error::Data(format!("frame {} out of range for scene of {} frames", index, self.frames.len()))
        })
    }

    /// Objects of `frame` in that frame's ego coordinates.
    pub fn ego_objects(&self, index: usize) -> Result<Vec<SceneObject>> {
        let f = self.frame(index)?;
        Ok(f.objects.iter().map(|o| o.in_ego_frame(&f.ego_pose)).collect())
    }

    pub fn timestamp_us(&self, index: usize) -> u64 {
        (index as f64 * self.frame_period * 1e6).round() as u64
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

fn reflect(pos: &mut f64, vel: &mut f64, half: f64) {
    if *pos > half {
        *pos = 2.0 * half - *pos;
        *vel = -*vel;
    } else if *pos < -half {
        *pos = -2.0 * half - *pos;
        *vel = -*vel;
    }
}

fn sample_range<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

pub fn generate_scene(config: &SceneConfig) -> Result<SceneState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dt = config.frame_period;
    let half = config.area_extent / 2.0;

    let ego_speed = sample_range(&mut rng, config.ego_speed);
    let ego_rate = sample_range(&mut rng, [-config.ego_yaw_rate, config.ego_yaw_rate]);

    let mut objects: Vec<SceneObject> = (0..config.num_objects)
        .map(|_| {
            let class = config.classes[rng.gen_range(0..config.classes.len())];
            let size = class.size_prior();
            let speed = sample_range(&mut rng, config.speed_range.get(class));
            let heading = rng.gen_range(-PI..PI);
            let x = rng.gen_range(-half..half);
            let y = rng.gen_range(-half..half);
            SceneObject {
                class,
                center: [x, y, size[2] / 2.0],
                size,
                yaw: heading,
                velocity: [speed * heading.cos(), speed * heading.sin()],
            }
        })
        .collect();

    let (mut ex, mut ey, mut eyaw) = (0.0f64, 0.0f64, 0.0f64);
    let mut frames = Vec::with_capacity(config.duration);
    for k in 0..config.duration {
        if k > 0 {
            // exact unicycle integration over one period
            if ego_rate.abs() > 1e-12 {
                let r = ego_speed / ego_rate;
                let ny = eyaw + ego_rate * dt;
                ex += r * (ny.sin() - eyaw.sin());
                ey -= r * (ny.cos() - eyaw.cos());
                eyaw = ny;
            } else {
                ex += ego_speed * dt * eyaw.cos();
                ey += ego_speed * dt * eyaw.sin();
            }
            for o in &mut objects {
                o.center[0] += o.velocity[0] * dt;
                o.center[1] += o.velocity[1] * dt;
                reflect(&mut o.center[0], &mut o.velocity[0], half);
                reflect(&mut o.center[1], &mut o.velocity[1], half);
                if o.velocity[0] != 0.0 || o.velocity[1] != 0.0 {
                    o.yaw = o.velocity[1].atan2(o.velocity[0]);
                }
            }
        }
        frames.push(SceneFrame {
            ego_pose: SE3Pose::from_xyz_yaw(ex, ey, 0.0, wrap_angle(eyaw)),
            objects: objects.clone(),
        });
    }
    Ok(SceneState {
        token: format!("scene-{:016x}", config.seed),
        frame_period: dt,
        frames,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarSensorModel {
    pub points_per_object: usize,
    pub ground_points: usize,
    pub range_max: f64,
    pub noise_sigma: f64,
    pub dropout_prob: f64,
    /// Sensor height above the ground, used for ring indices.
    pub mount_height: f64,
}

impl Default for LidarSensorModel {
    fn default() -> Self {
        Self {
            points_per_object: 120,
            ground_points: 400,
            range_max: 30.0,
            noise_sigma: 0.03,
            dropout_prob: 0.05,
            mount_height: 1.8,
        }
    }
}

impl LidarSensorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.dropout_prob) || !(self.range_max > 0.0) {
            return Err(Error::Config(format!("invalid LiDAR sensor model {:?}", self)));
        }
        Ok(())
    }
}

/// Stable per-call RNG seed.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Uniform sample on the top or one of the four side faces, area-weighted.
/// Object-frame coordinates with the box centered at the origin.
fn sample_surface<R: Rng>(rng: &mut R, size: [f64; 3]) -> [f64; 3] {
    let [l, w, h] = size;
    let areas = [l * w, l * h, l * h, w * h, w * h];
    let total: f64 = areas.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    let mut face = 0;
    while face < 4 && u >= areas[face] {
        u -= areas[face];
        face += 1;
    }
    let a = rng.gen_range(-0.5..0.5);
    let b = rng.gen_range(-0.5..0.5);
    match face {
        0 => [a * l, b * w, h / 2.0],
        1 => [a * l, w / 2.0, b * h],
        2 => [a * l, -w / 2.0, b * h],
        3 => [l / 2.0, a * w, b * h],
        _ => [-l / 2.0, a * w, b * h],
    }
}

fn ring_index(p: [f64; 3], mount_height: f64) -> u16 {
    let r = (p[0] * p[0] + p[1] * p[1]).sqrt().max(1e-6);
    let elev = (p[2] - mount_height).atan2(r).to_degrees();
    (((elev + 30.0) / 40.0 * 31.0).round().clamp(0.0, 31.0)) as u16
}

/// Surface and ground samples for `frame`, in that frame's ego coordinates.
pub fn render_lidar(scene: &SceneState, frame: usize, sensor: &LidarSensorModel, seed: u64) -> Result<PointCloud> {
    sensor.validate()?;
    let f = scene.frame(frame)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, frame as u64, 0x11da2]));
    let noise = Normal::new(0.0, sensor.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let to_ego = f.ego_pose.inverse();

    let mut points = Vec::new();
    let mut rings = Vec::new();
    let mut push = |rng: &mut ChaCha8Rng, p: [f64; 3], intensity: f64| {
        let dropped = rng.gen::<f64>() < sensor.dropout_prob;
        let q = [
            p[0] + noise.sample(rng),
            p[1] + noise.sample(rng),
            p[2] + noise.sample(rng),
        ];
        if dropped {
            return;
        }
        if (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt() > sensor.range_max {
            return;
        }
        points.push(Point::new(q[0], q[1], q[2], intensity.clamp(0.0, 1.0)));
        rings.push(ring_index(q, sensor.mount_height));
    };

    // Surface samples are fixed per object and ground returns fixed in the
    // sensor frame, so only noise and dropout change from frame to frame.
    for (oi, o) in f.objects.iter().enumerate() {
        let to_world = o.object_to_world();
        let base = o.class.lidar_intensity();
        let mut surface = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, oi as u64, 0x5bf]));
        for _ in 0..sensor.points_per_object {
            let local = sample_surface(&mut surface, o.size);
            let ego = to_ego.transform_point(to_world.transform_point(local));
            let intensity = base + surface.gen_range(-0.05..0.05);
            push(&mut rng, ego, intensity);
        }
    }
    let mut ground = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9d]));
    for _ in 0..sensor.ground_points {
        let r = sensor.range_max * ground.gen::<f64>().sqrt();
        let th = ground.gen_range(-PI..PI);
        push(&mut rng, [r * th.cos(), r * th.sin(), 0.0], 0.1);
    }

    let mut cloud = PointCloud::new(points, format!("{}-{:03}", scene.token, frame), scene.timestamp_us(frame));
    cloud.ring = Some(rings);
    Ok(cloud)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    /// Blob standard deviation across the viewing ray (m).
    pub blob_sigma: f64,
    /// Blob standard deviation along the viewing ray (m); camera depth is
    /// less certain than bearing.
    pub depth_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            blob_sigma: 1.0,
            depth_sigma: 4.0,
            noise_sigma: 0.1,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.blob_sigma > 0.0) || !(self.depth_sigma > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("invalid camera model {:?}", self)));
        }
        Ok(())
    }
}

/// Fixed class-to-channel mixing weights in `(0.2, 1]`.
pub fn camera_mixing(channels: usize) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xca3e_7a);
    (0..channels)
        .map(|_| {
            let mut row = [0.0; 4];
            for v in &mut row {
                *v = 1.0 - rng.gen_range(0.0..0.8);
            }
            row
        })
        .collect()
}

/// Gaussian footprint blobs of the true objects at `frame`, mixed into
/// `channels` channels by class, plus white noise. Returns `1 x C x H x W`.
pub fn render_camera_bev(
    scene: &SceneState,
    frame: usize,
    spec: &BevSpec,
    channels: usize,
    camera: &CameraModel,
    seed: u64,
) -> Result<FeatureMap> {
    spec.validate()?;
    camera.validate()?;
    if channels == 0 {
        return Err(Error::Config("camera channel count must be positive".into()));
    }
    let (h, w) = (spec.height(), spec.width());
    let plane = h * w;
    let mut data = vec![0.0f64; channels * plane];
    let mix = camera_mixing(channels);
    let across = camera.blob_sigma / spec.resolution;
    let along = camera.depth_sigma.max(camera.blob_sigma) / spec.resolution;
    let reach = (3.0 * along).ceil() as isize + 1;
    for o in scene.ego_objects(frame)? {
        let (r0, c0) = spec.continuous_cell(o.center[0], o.center[1]);
        let (ri, ci) = (r0.round() as isize, c0.round() as isize);
        // unit viewing ray in (row, col) = (y, x) order
        let range = o.center[0].hypot(o.center[1]);
        let ray = if range > 1e-9 { (o.center[1] / range, o.center[0] / range) } else { (0.0, 1.0) };
        for i in (ri - reach)..=(ri + reach) {
            for j in (ci - reach)..=(ci + reach) {
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    continue;
                }
                let (dr, dc) = (i as f64 - r0, j as f64 - c0);
                let u = dr * ray.0 + dc * ray.1;
                let v = dc * ray.0 - dr * ray.1;
                let g = (-0.5 * (u * u / (along * along) + v * v / (across * across))).exp();
                let cell = i as usize * w + j as usize;
                for (c, m) in mix.iter().enumerate() {
                    let x = &mut data[c * plane + cell];
                    *x = x.max(m[o.class.index()] * g);
                }
            }
        }
    }
    if camera.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, frame as u64, 0xca3]));
        let noise = Normal::new(0.0, camera.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }
    FeatureMap::new(Tensor::new(vec![1, channels, h, w], data)?, FeatureRole::Camera)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_names_round_trip() {
        for c in ObjectClass::ALL {
            assert_eq!(c.name().parse::<ObjectClass>().unwrap(), c);
            assert_eq!(ObjectClass::from_index(c.index()), Some(c));
        }
        assert!("tram".parse::<ObjectClass>().is_err());
    }

    #[test]
    fn short_scene_is_rejected() {
        let cfg = SceneConfig { duration: 3, ..Default::default() };
        assert!(matches!(generate_scene(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.5), 0.5);
    }
}
