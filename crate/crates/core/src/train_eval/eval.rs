use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use timealign_nn::{ParamStore, Params};

use crate::detection_head::{decode, Box3D};
use crate::error::{Error, Result};
use crate::scene_sim::ObjectClass;
use crate::temporal_data::LagMode;

use super::config::EvalProtocol;
use super::dataset::PreparedSample;
use super::model::{BatchInput, Model};

pub const RECALL_POINTS: usize = 101;

/// Precision/recall after each detection, highest score first. Matching is
/// greedy and one-to-one by BEV center distance within each frame.
pub fn pr_curve(
    detections: &[Vec<Box3D>],
    ground_truth: &[Vec<Box3D>],
    class: ObjectClass,
    match_distance: f64,
) -> (Vec<(f64, f64)>, usize) {
    let num_gt: usize = ground_truth.iter().map(|g| g.iter().filter(|b| b.class == class).count()).sum();
    let mut dets: Vec<(usize, &Box3D)> = detections
        .iter()
        .enumerate()
        .flat_map(|(f, ds)| ds.iter().filter(|b| b.class == class).map(move |b| (f, b)))
        .collect();
    // stable: ties keep frame/emission order
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(dets.len());
    for (f, d) in dets {
        let mut best: Option<(usize, f64)> = None;
        if let Some(gts) = ground_truth.get(f) {
            for (gi, g) in gts.iter().enumerate() {
                if g.class != class || used[f][gi] {
                    continue;
                }
                let dist = d.bev_distance(g);
                if dist <= match_distance && best.map_or(true, |(_, bd)| dist < bd) {
                    best = Some((gi, dist));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                used[f][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let recall = if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 };
        curve.push((recall, tp as f64 / (tp + fp) as f64));
    }
    (curve, num_gt)
}

/// 101-point interpolated AP; `None` when the class has no ground truth.
pub fn average_precision(
    detections: &[Vec<Box3D>],
    ground_truth: &[Vec<Box3D>],
    class: ObjectClass,
    match_distance: f64,
) -> Option<f64> {
    let (curve, num_gt) = pr_curve(detections, ground_truth, class, match_distance);
    if num_gt == 0 {
        return None;
    }
    // precision envelope from the right
    let mut env = vec![0.0; curve.len()];
    let mut best = 0.0f64;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        env[i] = best;
    }
    let mut total = 0.0;
    let mut idx = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while idx < curve.len() && curve[idx].0 < r - 1e-12 {
            idx += 1;
        }
        if idx < curve.len() {
            total += env[idx];
        }
    }
    Some(total / RECALL_POINTS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub model: String,
    pub condition: String,
    /// Per-class AP; `None` when the class has no ground truth.
    pub ap: BTreeMap<ObjectClass, Option<f64>>,
    pub map: f64,
    pub meta: ReportMeta,
}

impl APReport {
    pub fn from_ap(model: &str, condition: &str, ap: BTreeMap<ObjectClass, Option<f64>>, meta: ReportMeta) -> Self {
        let vals: Vec<f64> = ap.values().flatten().copied().collect();
        let map = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        Self {
            model: model.to_string(),
            condition: condition.to_string(),
            ap,
            map,
            meta,
        }
    }
}

/// Detections for each sample under a fixed lag.
pub fn detect(
    model: &Model,
    store: &ParamStore,
    samples: &[PreparedSample],
    lag: usize,
    protocol: &EvalProtocol,
    batch_size: usize,
) -> Result<Vec<Vec<Box3D>>> {
    let p = Params::new(store, false);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&PreparedSample> = chunk.iter().collect();
        let input = BatchInput::from_samples(&batch, &vec![lag; batch.len()])?;
        let head = model.forward(&p, &input)?.head.output();
        for b in 0..batch.len() {
            out.push(decode(&head, b, &model.cfg.bev, protocol.score_threshold, protocol.max_dets)?);
        }
    }
    Ok(out)
}

/// One report per protocol condition.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    samples: &[PreparedSample],
    protocol: &EvalProtocol,
    model_label: &str,
    meta: ReportMeta,
) -> Result<Vec<APReport>> {
    protocol.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let gts: Vec<Vec<Box3D>> = samples.iter().map(|s| s.gt_boxes.clone()).collect();
    let mut reports = Vec::with_capacity(protocol.conditions.len());
    for cond in &protocol.conditions {
        let started = std::time::Instant::now();
        let lag = match cond.lag.mode {
            LagMode::EvalFixed(k) => k,
            LagMode::TrainRandom => {
                return Err(Error::Config(format!("condition `{}` must use a fixed lag", cond.label)));
            }
        };
        let dets = detect(model, store, samples, lag, protocol, 4)?;
        let ap = protocol
            .classes
            .iter()
            .map(|&c| (c, average_precision(&dets, &gts, c, protocol.match_distance)))
            .collect();
        let meta = ReportMeta {
            runtime_s: started.elapsed().as_secs_f64(),
            ..meta.clone()
        };
        reports.push(APReport::from_ap(model_label, &cond.label, ap, meta));
    }
    Ok(reports)
}

/// Mean squared errors on held-out samples (no lag on the observed input).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionStats {
    /// F_p against the encoded true frame T.
    pub predictor_mse: f64,
    /// Encoded frame T-1 against the encoded true frame T.
    pub copy_last_mse: f64,
}

pub fn prediction_stats(model: &Model, store: &ParamStore, samples: &[PreparedSample]) -> Result<PredictionStats> {
    if !model.uses_alignment() {
        return Err(Error::Config("the baseline has no predictor".into()));
    }
    let p = Params::new(store, false);
    let (mut pm, mut cm, mut n) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(4) {
        let batch: Vec<&PreparedSample> = chunk.iter().collect();
        let input = BatchInput::from_samples(&batch, &vec![0; batch.len()])?;
        let out = model.forward(&p, &input)?;
        let labels = out.labels.as_ref().expect("alignment model returns labels");
        let truth = &labels[2];
        let f_p = out.f_p.as_ref().expect("alignment model predicts");
        let last = model.encoder.forward(&p, &timealign_nn::Var::constant(input.history[2].clone()))?;
        let w = batch.len() as f64;
        pm += w * f_p.value().zip_map(truth, |a, b| (a - b) * (a - b)).mean();
        cm += w * last.value().zip_map(truth, |a, b| (a - b) * (a - b)).mean();
        n += w;
    }
    Ok(PredictionStats {
        predictor_mse: pm / n,
        copy_last_mse: cm / n,
    })
}
