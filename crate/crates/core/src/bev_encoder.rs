//! Pillar binning and the shared convolutional BEV encoder.
//!
//! Grid convention: row `i` runs along +y, column `j` along +x, and cell
//! `(i, j)` has its center at
//! `(x_min + (j + 0.5) res, y_min + (i + 0.5) res)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use timealign_nn::layers::Conv2d;
use timealign_nn::{ops, ParamStore, Params, Tensor, Var};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

pub const PILLAR_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub resolution: f64,
}

impl BevSpec {
    /// 32 x 32 cells of 1 m.
    pub fn desk() -> Self {
        Self {
            x_range: [-16.0, 16.0],
            y_range: [-16.0, 16.0],
            resolution: 1.0,
        }
    }

    /// 180 x 180 cells of 0.6 m.
    pub fn full_scale() -> Self {
        Self {
            x_range: [-54.0, 54.0],
            y_range: [-54.0, 54.0],
            resolution: 0.6,
        }
    }

    fn cells(span: f64, res: f64) -> Option<usize> {
        let n = span / res;
        let r = n.round();
        ((n - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Config(format!("BEV resolution {} must be positive", self.resolution)));
        }
        for (axis, r) in [("x", self.x_range), ("y", self.y_range)] {
            if !(r[1] > r[0]) || Self::cells(r[1] - r[0], self.resolution).is_none() {
                return Err(Error::Config(format!(
                    "BEV {} range {:?} is not a whole number of {} m cells",
                    axis, r, self.resolution
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        Self::cells(self.x_range[1] - self.x_range[0], self.resolution).unwrap_or(0)
    }

    pub fn height(&self) -> usize {
        Self::cells(self.y_range[1] - self.y_range[0], self.resolution).unwrap_or(0)
    }

    /// Continuous `(row, col)` coordinates; integers are cell centers.
    pub fn continuous_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.y_range[0]) / self.resolution - 0.5,
            (x - self.x_range[0]) / self.resolution - 0.5,
        )
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < self.x_range[0] || x >= self.x_range[1] || y < self.y_range[0] || y >= self.y_range[1] {
            return None;
        }
        let j = ((x - self.x_range[0]) / self.resolution).floor() as usize;
        let i = ((y - self.y_range[0]) / self.resolution).floor() as usize;
        (i < self.height() && j < self.width()).then_some((i, j))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_range[0] + (j as f64 + 0.5) * self.resolution,
            self.y_range[0] + (i as f64 + 0.5) * self.resolution,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureRole {
    /// Encoded history frame.
    History,
    Observed,
    Predicted,
    Camera,
    Fused,
    Combine,
}

/// `B x C x H x W` feature tensor tagged with its role in the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub role: FeatureRole,
}

impl FeatureMap {
    pub fn new(data: Tensor, role: FeatureRole) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::Data(format!("feature map must be rank 4, got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::Data(format!("{:?} feature map has non-finite entries", role)));
        }
        Ok(Self { data, role })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// Raw per-cell statistics `[6, H, W]`: count, mean z, max z, mean
/// intensity, mean x and y offset from the cell center (in cells).
#[derive(Clone, Debug, PartialEq)]
pub struct PillarGrid {
    pub data: Tensor,
}

impl PillarGrid {
    pub fn count(&self, i: usize, j: usize) -> f64 {
        self.data.at(&[0, i, j])
    }
}

/// Bin a cloud into pillars. Points in each cell are sorted before the
/// statistics are summed, so the result does not depend on point order.
pub fn pillarize(cloud: &PointCloud, spec: &BevSpec) -> PillarGrid {
    let (h, w) = (spec.height(), spec.width());
    let mut cells: Vec<Vec<[f64; 4]>> = vec![Vec::new(); h * w];
    for p in &cloud.points {
        if let Some((i, j)) = spec.cell_of(p.x, p.y) {
            let (cx, cy) = spec.cell_center(i, j);
            cells[i * w + j].push([
                p.z,
                p.intensity,
                (p.x - cx) / spec.resolution,
                (p.y - cy) / spec.resolution,
            ]);
        }
    }
    let plane = h * w;
    let mut data = vec![0.0; PILLAR_CHANNELS * plane];
    for (c, pts) in cells.iter_mut().enumerate() {
        if pts.is_empty() {
            continue;
        }
        pts.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n = pts.len() as f64;
        let mut sums = [0.0; 4];
        let mut zmax = f64::NEG_INFINITY;
        for q in pts.iter() {
            for k in 0..4 {
                sums[k] += q[k];
            }
            zmax = zmax.max(q[0]);
        }
        data[c] = n;
        data[plane + c] = sums[0] / n;
        data[2 * plane + c] = zmax;
        data[3 * plane + c] = sums[1] / n;
        data[4 * plane + c] = sums[2] / n;
        data[5 * plane + c] = sums[3] / n;
    }
    PillarGrid {
        data: Tensor::new(vec![PILLAR_CHANNELS, h, w], data).expect("pillar shape"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_channels: usize,
    pub out_channels: usize,
}

/// Three 3x3 convolutions `6 -> hidden -> hidden -> C_lidar` with GELU
/// between them. The count channel goes through `log1p` first.
#[derive(Clone, Debug)]
pub struct BevEncoder {
    pub cfg: EncoderConfig,
    convs: [Conv2d; 3],
}

impl BevEncoder {
    pub fn new(prefix: &str, cfg: EncoderConfig) -> Self {
        let c = |k: usize, i: usize, o: usize| Conv2d::same(format!("{}.conv{}", prefix, k), i, o, 3);
        Self {
            cfg,
            convs: [
                c(1, PILLAR_CHANNELS, cfg.hidden_channels),
                c(2, cfg.hidden_channels, cfg.hidden_channels),
                c(3, cfg.hidden_channels, cfg.out_channels),
            ],
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for conv in &self.convs {
            conv.init(store, rng)?;
        }
        Ok(())
    }

    /// Stack pillar grids into a `B x 6 x H x W` input with `log1p(count)`.
    pub fn prepare(grids: &[&PillarGrid]) -> Result<Tensor> {
        let parts: Vec<Tensor> = grids
            .iter()
            .map(|g| {
                let mut s = vec![1];
                s.extend_from_slice(g.data.shape());
                g.data.clone().reshape(s)
            })
            .collect::<timealign_nn::Result<_>>()?;
        let mut t = Tensor::concat0(&parts)?;
        let s = t.shape().to_vec();
        if s.len() != 4 || s[1] != PILLAR_CHANNELS {
            return Err(Error::Data(format!("pillar batch has shape {:?}", s)));
        }
        let plane = s[2] * s[3];
        for b in 0..s[0] {
            let base = b * PILLAR_CHANNELS * plane;
            for v in &mut t.data_mut()[base..base + plane] {
                *v = v.ln_1p();
            }
        }
        Ok(t)
    }

    /// `x`: prepared `B x 6 x H x W` input.
    pub fn forward(&self, p: &Params, x: &Var) -> Result<Var> {
        let h = ops::gelu(&self.convs[0].forward(p, x)?);
        let h = ops::gelu(&self.convs[1].forward(p, &h)?);
        Ok(self.convs[2].forward(p, &h)?)
    }

    pub fn encode(&self, p: &Params, grids: &[&PillarGrid]) -> Result<Var> {
        self.forward(p, &Var::constant(Self::prepare(grids)?))
    }
}
