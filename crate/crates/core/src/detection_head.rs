//! Center-heatmap detection head, its targets and losses, and decoding.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use timealign_nn::layers::Conv2d;
use timealign_nn::{ops, ParamStore, Params, Tensor, Var};

use crate::bev_encoder::BevSpec;
use crate::error::{Error, Result};
use crate::scene_sim::{wrap_angle, ObjectClass, SceneObject};

pub const REG_CHANNELS: usize = 6;
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const HEATMAP_CLAMP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: ObjectClass,
    #[serde(default = "one")]
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
}

fn one() -> f64 {
    1.0
}

impl Box3D {
    pub fn ground_truth(o: &SceneObject) -> Self {
        Self {
            center: o.center,
            size: o.size,
            yaw: wrap_angle(o.yaw),
            class: o.class,
            score: 1.0,
            velocity: Some(o.velocity),
        }
    }

    pub fn bev_distance(&self, other: &Box3D) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub num_classes: usize,
    pub heatmap_bias: f64,
}

impl HeadConfig {
    pub fn new(in_channels: usize, hidden_channels: usize) -> Self {
        Self {
            in_channels,
            hidden_channels,
            num_classes: ObjectClass::ALL.len(),
            heatmap_bias: -2.19,
        }
    }
}

/// Post-sigmoid heatmap `B x K x H x W` and regression `B x 6 x H x W`
/// (dx, dy in cells, log l, log w, sin yaw, cos yaw).
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub heatmap: Var,
    pub regression: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub heatmap: Tensor,
    pub regression: Tensor,
}

impl HeadVars {
    pub fn output(&self) -> HeadOutput {
        HeadOutput {
            heatmap: self.heatmap.value().clone(),
            regression: self.regression.value().clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub cfg: HeadConfig,
    hm1: Conv2d,
    hm2: Conv2d,
    reg1: Conv2d,
    reg2: Conv2d,
}

impl DetectionHead {
    pub fn new(prefix: &str, cfg: HeadConfig) -> Self {
        Self {
            cfg,
            hm1: Conv2d::same(format!("{}.heatmap.conv1", prefix), cfg.in_channels, cfg.hidden_channels, 3),
            hm2: Conv2d::same(format!("{}.heatmap.conv2", prefix), cfg.hidden_channels, cfg.num_classes, 1),
            reg1: Conv2d::same(format!("{}.regression.conv1", prefix), cfg.in_channels, cfg.hidden_channels, 3),
            reg2: Conv2d::same(format!("{}.regression.conv2", prefix), cfg.hidden_channels, REG_CHANNELS, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for c in [&self.hm1, &self.hm2, &self.reg1, &self.reg2] {
            c.init(store, rng)?;
        }
        store.set(&self.hm2.bias_name(), Tensor::full(vec![self.cfg.num_classes], self.cfg.heatmap_bias))?;
        Ok(())
    }

    pub fn heatmap_bias_name(&self) -> String {
        self.hm2.bias_name()
    }

    pub fn forward(&self, p: &Params, x: &Var) -> Result<HeadVars> {
        let h = ops::gelu(&self.hm1.forward(p, x)?);
        let heatmap = ops::sigmoid(&self.hm2.forward(p, &h)?);
        let r = ops::gelu(&self.reg1.forward(p, x)?);
        let regression = self.reg2.forward(p, &r)?;
        Ok(HeadVars { heatmap, regression })
    }
}

/// Heatmap, regression and mask targets for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub heatmap: Tensor,
    pub regression: Tensor,
    /// `B x 1 x H x W`, 1 at supervised center cells.
    pub mask: Tensor,
    pub num_objects: usize,
}

impl Targets {
    pub fn stack(parts: &[&Targets]) -> Result<Targets> {
        let cat = |f: fn(&Targets) -> &Tensor| -> Result<Tensor> {
            let out: Vec<Tensor> = parts.iter().map(|t| f(t).clone()).collect();
            Ok(Tensor::concat0(&out)?)
        };
        Ok(Targets {
            heatmap: cat(|t| &t.heatmap)?,
            regression: cat(|t| &t.regression)?,
            mask: cat(|t| &t.mask)?,
            num_objects: parts.iter().map(|t| t.num_objects).sum(),
        })
    }
}

/// Radius (cells) for a box footprint of `h x w` cells such that a corner
/// shift of that size keeps IoU above `min_overlap`.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

pub const GAUSSIAN_MIN_OVERLAP: f64 = 0.1;

pub fn splat_radius(b: &Box3D, spec: &BevSpec) -> usize {
    let r = gaussian_radius(b.size[0] / spec.resolution, b.size[1] / spec.resolution, GAUSSIAN_MIN_OVERLAP);
    (r.floor() as usize).max(1)
}

/// Draw a Gaussian of `radius` centered on `(ci, cj)` into `plane` by
/// elementwise max.
pub fn splat_gaussian(plane: &mut [f64], h: usize, w: usize, ci: usize, cj: usize, radius: usize) {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as isize;
    for di in -r..=r {
        for dj in -r..=r {
            let (i, j) = (ci as isize + di, cj as isize + dj);
            if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                continue;
            }
            let g = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            let v = &mut plane[i as usize * w + j as usize];
            *v = v.max(g);
        }
    }
}

/// Targets for one frame (`B = 1`). Boxes outside the grid are dropped.
pub fn encode_targets(gt: &[Box3D], spec: &BevSpec, num_classes: usize) -> Result<Targets> {
    let (h, w) = (spec.height(), spec.width());
    let plane = h * w;
    let mut heat = vec![0.0; num_classes * plane];
    let mut reg = vec![0.0; REG_CHANNELS * plane];
    let mut mask = vec![0.0; plane];
    let mut n = 0;
    for b in gt {
        let Some((i, j)) = spec.cell_of(b.center[0], b.center[1]) else { continue };
        let k = b.class.index();
        if k >= num_classes {
            return Err(Error::Data(format!("class {} outside the head's {} classes", k, num_classes)));
        }
        splat_gaussian(&mut heat[k * plane..(k + 1) * plane], h, w, i, j, splat_radius(b, spec));
        let (cx, cy) = spec.cell_center(i, j);
        let cell = i * w + j;
        let vals = [
            (b.center[0] - cx) / spec.resolution,
            (b.center[1] - cy) / spec.resolution,
            b.size[0].ln(),
            b.size[1].ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ];
        for (c, v) in vals.into_iter().enumerate() {
            reg[c * plane + cell] = v;
        }
        mask[cell] = 1.0;
        n += 1;
    }
    Ok(Targets {
        heatmap: Tensor::new(vec![1, num_classes, h, w], heat)?,
        regression: Tensor::new(vec![1, REG_CHANNELS, h, w], reg)?,
        mask: Tensor::new(vec![1, 1, h, w], mask)?,
        num_objects: n,
    })
}

/// Penalty-reduced focal loss summed over all cells (not normalized).
pub fn focal_loss_sum(heatmap: &Var, target: &Tensor) -> Result<Var> {
    if heatmap.shape() != target.shape() {
        return Err(Error::Nn(timealign_nn::NnError::Shape {
            op: "focal_loss",
            detail: format!("{:?} vs {:?}", heatmap.shape(), target.shape()),
        }));
    }
    let (a, b) = (FOCAL_ALPHA, FOCAL_BETA);
    let lo = HEATMAP_CLAMP;
    let hi = 1.0 - HEATMAP_CLAMP;
    let mut total = 0.0;
    for (&p, &g) in heatmap.value().data().iter().zip(target.data()) {
        let q = p.clamp(lo, hi);
        total += if g == 1.0 {
            -(1.0 - q).powi(a) * q.ln()
        } else {
            -(1.0 - g).powi(b) * q.powi(a) * (1.0 - q).ln()
        };
    }
    let target = target.clone();
    Ok(Var::from_op(Tensor::scalar(total), vec![heatmap.clone()], move |ctx| {
        let s = ctx.grad.item();
        let d = ctx.inputs[0]
            .value()
            .zip_map(&target, |p, g| {
                if !(lo..=hi).contains(&p) {
                    return 0.0;
                }
                let q = p;
                let v = if g == 1.0 {
                    // d/dq [-(1-q)^2 ln q]
                    2.0 * (1.0 - q) * q.ln() - (1.0 - q).powi(2) / q
                } else {
                    let wneg = (1.0 - g).powi(FOCAL_BETA);
                    // d/dq [-q^2 ln(1-q)]
                    wneg * (-2.0 * q * (1.0 - q).ln() + q * q / (1.0 - q))
                };
                v * s
            });
        vec![Some(d)]
    }))
}

/// `sum(mask * |pred - target|)` over all regression channels.
pub fn masked_l1_sum(pred: &Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    let s = pred.shape().to_vec();
    if s != target.shape() || s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::Nn(timealign_nn::NnError::Shape {
            op: "masked_l1",
            detail: format!("pred {:?}, target {:?}, mask {:?}", s, target.shape(), mask.shape()),
        }));
    }
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let m_at = move |mask: &Tensor, idx: usize| -> f64 {
        let bi = idx / (c * plane);
        mask.data()[bi * plane + idx % plane]
    };
    let mut total = 0.0;
    for (idx, (&p, &t)) in pred.value().data().iter().zip(target.data()).enumerate() {
        total += m_at(mask, idx) * (p - t).abs();
    }
    let _ = b;
    let (target, mask) = (target.clone(), mask.clone());
    Ok(Var::from_op(Tensor::scalar(total), vec![pred.clone()], move |ctx| {
        let g = ctx.grad.item();
        let pv = ctx.inputs[0].value();
        let mut d = vec![0.0; pv.numel()];
        for (idx, v) in d.iter_mut().enumerate() {
            let diff = pv.data()[idx] - target.data()[idx];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v = g * m_at(&mask, idx) * sign;
        }
        vec![Some(Tensor::new(pv.shape().to_vec(), d).unwrap())]
    }))
}

/// Focal + L1, divided by the object count (at least 1).
pub fn detection_loss(pred: &HeadVars, targets: &Targets) -> Result<Var> {
    let focal = focal_loss_sum(&pred.heatmap, &targets.heatmap)?;
    let l1 = masked_l1_sum(&pred.regression, &targets.regression, &targets.mask)?;
    let norm = targets.num_objects.max(1) as f64;
    Ok(ops::scale(&ops::add(&focal, &l1)?, 1.0 / norm))
}

/// Decode one batch element: 3x3 local maxima above `score_threshold`,
/// highest `max_dets` scores, regression applied at each peak.
pub fn decode(out: &HeadOutput, batch: usize, spec: &BevSpec, score_threshold: f64, max_dets: usize) -> Result<Vec<Box3D>> {
    let hs = out.heatmap.shape();
    let rs = out.regression.shape();
    if hs.len() != 4 || rs.len() != 4 || rs[1] != REG_CHANNELS || hs[2..] != rs[2..] || batch >= hs[0] {
        return Err(Error::Data(format!("cannot decode heatmap {:?} with regression {:?}", hs, rs)));
    }
    let (k, h, w) = (hs[1], hs[2], hs[3]);
    let plane = h * w;
    let heat = &out.heatmap.data()[batch * k * plane..(batch + 1) * k * plane];
    let reg = &out.regression.data()[batch * REG_CHANNELS * plane..(batch + 1) * REG_CHANNELS * plane];

    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for c in 0..k {
        let hm = &heat[c * plane..(c + 1) * plane];
        for i in 0..h {
            for j in 0..w {
                let v = hm[i * w + j];
                if v < score_threshold {
                    continue;
                }
                let mut is_max = true;
                'n: for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        let (ii, jj) = (i as isize + di, j as isize + dj);
                        if ii >= 0 && jj >= 0 && ii < h as isize && jj < w as isize && hm[ii as usize * w + jj as usize] > v {
                            is_max = false;
                            break 'n;
                        }
                    }
                }
                if is_max {
                    peaks.push((v, c, i * w + j));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks.truncate(max_dets);

    let mut boxes = Vec::with_capacity(peaks.len());
    for (score, c, cell) in peaks {
        let class = ObjectClass::from_index(c).ok_or_else(|| Error::Data(format!("class index {} has no name", c)))?;
        let r = |ch: usize| reg[ch * plane + cell];
        let (cx, cy) = spec.cell_center(cell / w, cell % w);
        let prior = class.size_prior();
        let mut yaw = r(4).atan2(r(5));
        if yaw <= -PI {
            yaw += 2.0 * PI;
        }
        boxes.push(Box3D {
            center: [cx + r(0) * spec.resolution, cy + r(1) * spec.resolution, prior[2] / 2.0],
            size: [r(2).exp(), r(3).exp(), prior[2]],
            yaw,
            class,
            score,
            velocity: None,
        });
    }
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_has_a_floor_of_one_cell() {
        let b = Box3D {
            center: [0.5, 0.5, 0.0],
            size: [0.7, 0.7, 1.7],
            yaw: 0.0,
            class: ObjectClass::Pedestrian,
            score: 1.0,
            velocity: None,
        };
        assert_eq!(splat_radius(&b, &BevSpec::desk()), 1);
        let car = Box3D { size: [4.5, 1.9, 1.6], class: ObjectClass::Car, ..b };
        assert!(splat_radius(&car, &BevSpec::desk()) >= 1);
    }

    #[test]
    fn no_boxes_give_empty_targets() {
        let t = encode_targets(&[], &BevSpec::desk(), 4).unwrap();
        assert_eq!(t.heatmap.sum(), 0.0);
        assert_eq!(t.mask.sum(), 0.0);
        assert_eq!(t.num_objects, 0);
    }
}
