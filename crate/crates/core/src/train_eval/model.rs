use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timealign_nn::{ops, ParamStore, Params, Tensor, Var};

use crate::bev_encoder::{BevEncoder, PillarGrid};
use crate::detection_head::{detection_loss, DetectionHead, HeadVars, Targets};
use crate::error::{Error, Result};
use crate::fusion::{AlignBranch, Combine, GlobalFuse};
use crate::predictor::{prediction_loss, PredictionBundle, Predictor};
use crate::temporal_data::HISTORY_LEN;

use super::config::{ModelConfig, Variant};
use super::dataset::PreparedSample;

/// Prepared encoder inputs for a batch, each `B x 6 x H x W`.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub history: Vec<Tensor>,
    pub observed: Tensor,
    /// True current frame; the step-T prediction label.
    pub current: Tensor,
    pub camera: Tensor,
}

impl BatchInput {
    /// `lags[b]` selects which observed grid of sample `b` is presented.
    pub fn from_samples(samples: &[&PreparedSample], lags: &[usize]) -> Result<Self> {
        if samples.is_empty() || samples.len() != lags.len() {
            return Err(Error::Data("batch needs one lag per sample".into()));
        }
        let stack = |grids: Vec<&PillarGrid>| BevEncoder::prepare(&grids);
        let history = (0..HISTORY_LEN)
            .map(|k| stack(samples.iter().map(|s| &s.history[k]).collect()))
            .collect::<Result<Vec<_>>>()?;
        let observed = stack(samples.iter().zip(lags).map(|(s, &k)| &s.observed[s.clamp_lag(k)]).collect())?;
        let current = stack(samples.iter().map(|s| &s.observed[0]).collect())?;
        let cams: Vec<Tensor> = samples.iter().map(|s| s.camera.clone()).collect();
        Ok(Self {
            history,
            observed,
            current,
            camera: Tensor::concat0(&cams)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.observed.shape()[0]
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub head: HeadVars,
    pub f_o: Var,
    pub f_p: Option<Var>,
    pub f_f: Var,
    pub bundle: Option<PredictionBundle>,
    /// Encoded true features of `T-2, T-1, T` (constants).
    pub labels: Option<Vec<Tensor>>,
    pub concat_shape: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: BevEncoder,
    pub predictor: Predictor,
    pub align_pred: AlignBranch,
    pub align_obs: AlignBranch,
    pub combine: Combine,
    pub global: GlobalFuse,
    pub head: DetectionHead,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: BevEncoder::new("encoder", cfg.encoder),
            predictor: Predictor::new("predictor", cfg.predictor)?,
            align_pred: AlignBranch::new("align.pred", cfg.fusion),
            align_obs: AlignBranch::new("align.obs", cfg.fusion),
            combine: Combine::new("fuse.combine", cfg.fusion),
            global: GlobalFuse::new("fuse.global", cfg.fusion),
            head: DetectionHead::new("head", cfg.head),
            cfg,
        })
    }

    pub fn uses_alignment(&self) -> bool {
        self.cfg.variant == Variant::TimeAlign
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng)?;
        if self.uses_alignment() {
            self.predictor.init(&mut store, &mut rng)?;
            self.align_pred.init(&mut store, &mut rng)?;
            self.align_obs.init(&mut store, &mut rng)?;
            self.combine.init(&mut store, &mut rng)?;
        }
        self.global.init(&mut store, &mut rng)?;
        self.head.init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn forward(&self, p: &Params, input: &BatchInput) -> Result<ForwardOutput> {
        let b = input.batch();
        let camera = Var::constant(input.camera.clone());
        if !self.uses_alignment() {
            let f_o = self.encoder.forward(p, &Var::constant(input.observed.clone()))?;
            let fused = self.global.forward(p, &f_o, &camera)?;
            let head = self.head.forward(p, &fused)?;
            return Ok(ForwardOutput {
                head,
                f_f: f_o.clone(),
                f_o,
                f_p: None,
                bundle: None,
                labels: None,
                concat_shape: None,
            });
        }

        // history, observed and current frames share one encoder pass
        let mut parts = input.history.clone();
        parts.push(input.observed.clone());
        parts.push(input.current.clone());
        let stacked = Tensor::concat0(&parts)?;
        let encoded = self.encoder.forward(p, &Var::constant(stacked))?;
        let frame = |k: usize| ops::slice(&encoded, 0, k * b, (k + 1) * b);
        let history = (0..HISTORY_LEN).map(frame).collect::<timealign_nn::Result<Vec<_>>>()?;
        let f_o = frame(HISTORY_LEN)?;
        let current = frame(HISTORY_LEN + 1)?;
        let labels = vec![
            history[1].value().clone(),
            history[2].value().clone(),
            current.value().clone(),
        ];
        drop(current);
        drop(encoded);

        let bundle = self.predictor.rollout(p, &history)?;
        drop(history);
        let f_p = bundle.final_prediction().clone();
        let f_p = if self.cfg.detach_prediction { f_p.detach() } else { f_p };
        let pred_branch = self.align_pred.forward(p, &f_p, &camera)?;
        let obs_branch = self.align_obs.forward(p, &f_o, &camera)?;
        let concat_shape = obs_branch.concat_shape.clone();
        let f_f = self.combine.forward(p, &pred_branch, &obs_branch)?;
        drop(pred_branch);
        drop(obs_branch);
        let fused = self.global.forward(p, &f_f, &camera)?;
        let head = self.head.forward(p, &fused)?;
        Ok(ForwardOutput {
            head,
            f_o,
            f_p: Some(f_p),
            f_f,
            bundle: Some(bundle),
            labels: Some(labels),
            concat_shape: Some(concat_shape),
        })
    }

    /// `(l_det, l_pred)`; `l_pred` is zero for the baseline.
    pub fn losses(&self, out: &ForwardOutput, targets: &Targets) -> Result<(Var, Var)> {
        let l_det = detection_loss(&out.head, targets)?;
        let l_pred = match (&out.bundle, &out.labels) {
            (Some(b), Some(l)) => prediction_loss(b, l)?,
            _ => Var::constant(Tensor::scalar(0.0)),
        };
        Ok((l_det, l_pred))
    }

    /// Zero the observed branch's deformable conv and set the combination
    /// layers so that F_f equals F_o.
    pub fn set_pass_observed(&self, store: &mut ParamStore) -> Result<()> {
        for name in self.align_obs.deform_names() {
            let shape = store
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", name)))?
                .shape()
                .to_vec();
            store.set(&name, Tensor::zeros(shape))?;
        }
        self.combine.set_pass_observed(store, PASS_SHIFT)
    }
}

/// Shift that puts GELU inputs deep in its linear regime.
pub const PASS_SHIFT: f64 = 100.0;
