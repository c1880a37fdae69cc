//! LiDAR point clouds and the nuScenes-style binary point layout:
//! consecutive little-endian `f32` quintuples `(x, y, z, intensity, ring)`.

use std::path::Path;

use crate::error::{Error, Result};

pub const FLOATS_PER_POINT: usize = 5;
pub const BYTES_PER_POINT: usize = FLOATS_PER_POINT * 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Laser ring per point, when the source provides one.
    pub ring: Option<Vec<u16>>,
    pub frame_id: String,
    pub timestamp_us: u64,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_id: impl Into<String>, timestamp_us: u64) -> Self {
        Self {
            points,
            ring: None,
            frame_id: frame_id.into(),
            timestamp_us,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = &self.ring {
            if r.len() != self.points.len() {
                return Err(Error::Data(format!(
                    "{}: {} ring entries for {} points",
                    self.frame_id,
                    r.len(),
                    self.points.len()
                )));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::Data(format!("{}: point {} not finite", self.frame_id, i)));
            }
            if !(0.0..=1.0).contains(&p.intensity) {
                return Err(Error::Data(format!(
                    "{}: point {} intensity {} outside [0, 1]",
                    self.frame_id, i, p.intensity
                )));
            }
        }
        Ok(())
    }
}

/// Parse the binary layout. Intensities above 1 are taken to be on the
/// 0..255 scale and divided by 255; all intensities are then clamped to
/// `[0, 1]`.
pub fn parse_point_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % BYTES_PER_POINT != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {}-byte point records",
            bytes.len(),
            BYTES_PER_POINT
        )));
    }
    let n = bytes.len() / BYTES_PER_POINT;
    let mut points = Vec::with_capacity(n);
    let mut ring = Vec::with_capacity(n);
    let f = |rec: &[u8], k: usize| f32::from_le_bytes([rec[4 * k], rec[4 * k + 1], rec[4 * k + 2], rec[4 * k + 3]]);
    for rec in bytes.chunks_exact(BYTES_PER_POINT) {
        let (x, y, z, i, r) = (f(rec, 0), f(rec, 1), f(rec, 2), f(rec, 3), f(rec, 4));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && i.is_finite() && r.is_finite()) {
            return Err(Error::Format("non-finite value in point record".into()));
        }
        points.push(Point::new(x as f64, y as f64, z as f64, i as f64));
        ring.push(r.max(0.0).round() as u16);
    }
    if points.iter().any(|p| p.intensity > 1.0) {
        for p in &mut points {
            p.intensity /= 255.0;
        }
    }
    for p in &mut points {
        p.intensity = p.intensity.clamp(0.0, 1.0);
    }
    Ok(PointCloud {
        points,
        ring: Some(ring),
        frame_id: String::new(),
        timestamp_us: 0,
    })
}

pub fn encode_point_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * BYTES_PER_POINT);
    for (k, p) in cloud.points.iter().enumerate() {
        let ring = cloud.ring.as_ref().map_or(0.0, |r| r[k] as f32);
        for v in [p.x as f32, p.y as f32, p.z as f32, p.intensity as f32, ring] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_point_file(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cloud = parse_point_bin(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {}", path.display(), m)),
        other => other,
    })?;
    cloud.frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(cloud)
}

pub fn write_point_file(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_point_bin(cloud)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn floats(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|f| f.to_le_bytes()).collect()
    }

    #[test]
    fn twenty_floats_make_four_points() {
        let v: Vec<f32> = (0..20).map(|i| (i % 5) as f32 * 0.1).collect();
        assert_eq!(parse_point_bin(&floats(&v)).unwrap().len(), 4);
    }

    #[test]
    fn crafted_single_point() {
        let c = parse_point_bin(&floats(&[1.0, 2.0, 3.0, 0.5, 0.0])).unwrap();
        assert_eq!(c.points, vec![Point::new(1.0, 2.0, 3.0, 0.5)]);
        assert_eq!(c.ring, Some(vec![0]));
    }

    #[test]
    fn misaligned_file_is_a_format_error() {
        let v = vec![0.0f32; 21];
        assert!(matches!(parse_point_bin(&floats(&v)), Err(Error::Format(_))));
    }

    #[test]
    fn byte_scale_intensity_is_normalized() {
        let c = parse_point_bin(&floats(&[0.0, 0.0, 0.0, 255.0, 3.0, 1.0, 1.0, 1.0, 51.0, 4.0])).unwrap();
        assert_eq!(c.points[0].intensity, 1.0);
        assert!((c.points[1].intensity - 0.2).abs() < 1e-12);
        c.validate().unwrap();
    }
}
