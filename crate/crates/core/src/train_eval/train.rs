use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use timealign_nn::io::Checkpoint;
use timealign_nn::{ops, ParamStore, Params, Tensor, Var};

use crate::error::{Error, Result};
use crate::scene_sim::mix_seed;

use super::config::{ModelConfig, TrainConfig};
use super::dataset::PreparedSample;
use super::model::{BatchInput, Model};

pub fn total_loss(l_det: f64, l_pred: f64, lambda_pred: f64) -> f64 {
    l_det + lambda_pred * l_pred
}

pub fn total_loss_var(l_det: &Var, l_pred: &Var, lambda_pred: f64) -> Result<Var> {
    Ok(ops::add(l_det, &ops::scale(l_pred, lambda_pred))?)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply the accumulated gradients in `store`, scaled by `grad_scale`.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, value, grad) in store.params_and_grads_mut() {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g * grad_scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub lambda_pred: f64,
    pub learning_rate: f64,
    pub loss: f64,
    pub det_loss: f64,
    pub pred_loss: f64,
    pub lagged_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub best: ParamStore,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub runtime_s: f64,
}

/// Stage index for every epoch.
fn stage_of_epoch(cfg: &TrainConfig) -> Vec<usize> {
    cfg.stages
        .iter()
        .enumerate()
        .flat_map(|(i, s)| std::iter::repeat(i).take(s.epochs))
        .collect()
}

/// One optimizer step's forward/backward. Returns `(total, det, pred)`.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    batch: &[&PreparedSample],
    lags: &[usize],
    lambda_pred: f64,
) -> Result<(f64, f64, f64)> {
    let input = BatchInput::from_samples(batch, lags)?;
    let targets = super::dataset_targets(batch)?;
    let (vals, grads) = {
        let p = Params::new(store, true);
        let out = model.forward(&p, &input)?;
        let (l_det, l_pred) = model.losses(&out, &targets)?;
        let total = total_loss_var(&l_det, &l_pred, lambda_pred)?;
        let vals = (total.value().item(), l_det.value().item(), l_pred.value().item());
        if !(vals.0.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite loss (det {}, pred {})",
                vals.1, vals.2
            )));
        }
        let g = total.backward();
        (vals, p.collect_grads(&g))
    };
    store.accumulate_grads(&grads)?;
    Ok(vals)
}

fn clip_scale(store: &ParamStore, max_norm: f64) -> Result<f64> {
    let sq: f64 = store
        .names()
        .filter_map(|n| store.grad(n))
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("non-finite gradient norm {}", norm)));
    }
    Ok(if max_norm > 0.0 && norm > max_norm { max_norm / norm } else { 1.0 })
}

/// Train `store` in place over `samples`, following the stage schedule.
pub fn train(
    model: &Model,
    mut store: ParamStore,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let started = std::time::Instant::now();
    let lambdas = cfg.lambda_schedule();
    let stages = stage_of_epoch(cfg);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x7a1]));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(lambdas.len());
    let mut best = (f64::INFINITY, store.clone(), 0usize);

    for (epoch, &lambda_pred) in lambdas.iter().enumerate() {
        // fresh moments per stage; stale momentum from the previous weight
        // keeps pushing parameters after the switch
        if epoch > 0 && stages[epoch] != stages[epoch - 1] {
            opt = Adam::new(cfg.learning_rate);
        }
        opt.lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        order.shuffle(&mut rng);
        let lag_seed = mix_seed(&[cfg.seed, epoch as u64, 0x1a6]);
        let (mut sum, mut sum_det, mut sum_pred, mut lagged) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let lags: Vec<usize> = batch.iter().map(|s| s.lag_for(&cfg.lag, lag_seed)).collect();
            lagged += lags.iter().filter(|&&k| k > 0).count();
            store.zero_grads();
            let (t, d, pr) = train_step(model, &mut store, &batch, &lags, lambda_pred)?;
            let n = batch.len() as f64;
            sum += t * n;
            sum_det += d * n;
            sum_pred += pr * n;
            let scale = clip_scale(&store, cfg.grad_clip)?;
            opt.step(&mut store, scale);
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            stage: stages[epoch] + 1,
            lambda_pred,
            learning_rate: opt.lr,
            loss: sum / n,
            det_loss: sum_det / n,
            pred_loss: sum_pred / n,
            lagged_fraction: lagged as f64 / n,
        };
        if entry.loss < best.0 {
            best = (entry.loss, store.clone(), entry.epoch);
        }
        on_epoch(&entry);
        log.push(entry);
    }
    store.zero_grads();
    Ok(TrainOutcome {
        store,
        best: best.1,
        best_epoch: best.2,
        log,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub note: String,
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, model: &ModelConfig, note: &str) -> Result<()> {
    let meta = serde_json::to_string(&CheckpointMeta {
        model: model.clone(),
        note: note.to_string(),
    })?;
    let path = path.as_ref();
    Checkpoint::from_store(store, meta)
        .save(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

/// Model config and note of a checkpoint, without building the store.
pub fn checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let ck = Checkpoint::load(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    serde_json::from_str(&ck.metadata).map_err(|e| Error::Format(format!("{}: checkpoint metadata: {}", path.display(), e)))
}

/// Parameters and model config from a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, ModelConfig)> {
    let path = path.as_ref();
    let ck = Checkpoint::load(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    let meta: CheckpointMeta = serde_json::from_str(&ck.metadata)
        .map_err(|e| Error::Format(format!("{}: checkpoint metadata: {}", path.display(), e)))?;
    Ok((ck.to_store()?, meta.model))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartialLoadReport {
    pub loaded: Vec<String>,
    /// `(name, reason)` for every checkpoint entry or store parameter that
    /// was not loaded.
    pub skipped: Vec<(String, String)>,
}

/// Overwrite parameters of `store` whose name and shape match an entry of
/// the checkpoint.
pub fn load_partial_checkpoint(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<PartialLoadReport> {
    let path = path.as_ref();
    let ck = Checkpoint::load(path).map_err(|e| match e {
        timealign_nn::NnError::Io(io) => Error::io(path, io),
        other => Error::Nn(other),
    })?;
    Ok(load_partial_from(store, &ck))
}

pub fn load_partial_from(store: &mut ParamStore, ck: &Checkpoint) -> PartialLoadReport {
    let mut report = PartialLoadReport::default();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        match ck.get(&name) {
            None => report.skipped.push((name, "not in checkpoint".into())),
            Some(t) => {
                let want = store.get(&name).map(|v| v.shape().to_vec()).unwrap_or_default();
                if t.shape() != want.as_slice() {
                    report.skipped.push((
                        name,
                        format!("shape mismatch: checkpoint {:?}, model {:?}", t.shape(), want),
                    ));
                } else {
                    store.set(&name, t.clone()).expect("shape checked");
                    report.loaded.push(name);
                }
            }
        }
    }
    for (name, _) in &ck.tensors {
        if !store.contains(name) {
            report.skipped.push((name.clone(), "not in model".into()));
        }
    }
    report
}
