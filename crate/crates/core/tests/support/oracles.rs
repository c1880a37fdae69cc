//! Scalar and brute-force references for the detection loss and AP,
//! shared by the head tests and the acceptance run.
#![allow(dead_code)]

use timealign::detection_head::{Box3D, FOCAL_ALPHA, FOCAL_BETA, HEATMAP_CLAMP};
use timealign::scene_sim::ObjectClass;
use timealign_nn::Tensor;

pub fn gt_box(x: f64, y: f64, class: ObjectClass, yaw: f64) -> Box3D {
    let size = class.size_prior();
    Box3D {
        center: [x, y, size[2] / 2.0],
        size,
        yaw,
        class,
        score: 1.0,
        velocity: None,
    }
}

/// Penalty-reduced focal loss and masked L1 by scalar loops.
pub fn loss_oracle(hm: &Tensor, reg: &Tensor, thm: &Tensor, treg: &Tensor, mask: &Tensor, n: usize) -> f64 {
    let mut focal = 0.0;
    for (&p, &g) in hm.data().iter().zip(thm.data()) {
        let q = p.clamp(HEATMAP_CLAMP, 1.0 - HEATMAP_CLAMP);
        focal += if g == 1.0 {
            -(1.0 - q).powi(FOCAL_ALPHA) * q.ln()
        } else {
            -(1.0 - g).powi(FOCAL_BETA) * q.powi(FOCAL_ALPHA) * (1.0 - q).ln()
        };
    }
    let s = reg.shape();
    let mut l1 = 0.0;
    for b in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    l1 += mask.at(&[b, 0, i, j]) * (reg.at(&[b, c, i, j]) - treg.at(&[b, c, i, j])).abs();
                }
            }
        }
    }
    (focal + l1) / n.max(1) as f64
}

pub fn det(x: f64, y: f64, class: ObjectClass, score: f64) -> Box3D {
    Box3D {
        score,
        ..gt_box(x, y, class, 0.0)
    }
}

/// Re-match at every score threshold and take the interpolated envelope.
pub fn brute_force_ap(dets: &[Vec<Box3D>], gts: &[Vec<Box3D>], class: ObjectClass, dist: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class == class).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = dets.iter().flatten().filter(|d| d.class == class).map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let mut points = Vec::new();
    for &thr in &thresholds {
        let (mut tp, mut fp) = (0, 0);
        for (f, ds) in dets.iter().enumerate() {
            let mut kept: Vec<&Box3D> = ds.iter().filter(|d| d.class == class && d.score >= thr).collect();
            kept.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut used = vec![false; gts[f].len()];
            for d in kept {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in gts[f].iter().enumerate() {
                    let dd = d.bev_distance(g);
                    if g.class == class && !used[gi] && dd <= dist && best.map_or(true, |(_, b)| dd < b) {
                        best = Some((gi, dd));
                    }
                }
                match best {
                    Some((gi, _)) => {
                        used[gi] = true;
                        tp += 1;
                    }
                    None => fp += 1,
                }
            }
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let total: f64 = (0..101)
        .map(|k| {
            let r = k as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / 101.0)
}
