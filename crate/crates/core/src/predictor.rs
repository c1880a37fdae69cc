//! Swin-LSTM feature predictor: patch embedding, stacked recurrent cells
//! whose transition is a stack of Swin blocks, and patch inflation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use timealign_nn::layers::Linear;
use timealign_nn::{ops, ParamStore, Params, SwinBlock, Tensor, Var, WindowAttentionConfig};

use crate::error::{Error, Result};
use crate::temporal_data::HISTORY_LEN;

/// What each rollout step after the first consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryFeed {
    /// The previous step's prediction.
    Autoregressive,
    /// The next true history feature.
    TeacherForced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Swin blocks per cell.
    pub depths: usize,
    pub num_heads: usize,
    pub num_cells: usize,
    pub window_size: usize,
    pub feed: HistoryFeed,
    /// Predict `input + inflate(h)` instead of `inflate(h)`.
    pub residual: bool,
}

impl PredictorConfig {
    pub fn desk(channels: usize) -> Self {
        Self {
            channels,
            patch_size: 2,
            embed_dim: 32,
            depths: 2,
            num_heads: 4,
            num_cells: 1,
            window_size: 4,
            feed: HistoryFeed::TeacherForced,
            residual: true,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "feature grid {}x{} is not divisible by patch size {}",
                h, w, self.patch_size
            )));
        }
        if self.num_cells == 0 || self.depths == 0 {
            return Err(Error::Config("predictor needs at least one cell and one block".into()));
        }
        WindowAttentionConfig::new(self.window_size, self.num_heads, self.embed_dim, false).validate()?;
        Ok(())
    }
}

/// Per-cell hidden and memory token grids, each `B x N x D`.
#[derive(Clone, Debug)]
pub struct SwinLstmState {
    pub hidden: Var,
    pub memory: Var,
}

impl SwinLstmState {
    pub fn zeros(batch: usize, tokens: usize, dim: usize) -> Self {
        Self {
            hidden: Var::constant(Tensor::zeros(vec![batch, tokens, dim])),
            memory: Var::constant(Tensor::zeros(vec![batch, tokens, dim])),
        }
    }
}

fn patchify(x: &Var, p: usize) -> Result<(Var, (usize, usize))> {
    let s = x.shape().to_vec();
    if s.len() != 4 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(Error::Config(format!("cannot split {:?} into {}x{} patches", s, p, p)));
    }
    let (b, c, h, w) = (s[0], s[1], s[2] / p, s[3] / p);
    let t = ops::reshape(x, &[b, c, h, p, w, p])?;
    let t = ops::permute(&t, &[0, 2, 4, 3, 5, 1])?;
    Ok((ops::reshape(&t, &[b, h * w, p * p * c])?, (h, w)))
}

fn unpatchify(tokens: &Var, p: usize, c: usize, grid: (usize, usize)) -> Result<Var> {
    let b = tokens.shape()[0];
    let (h, w) = grid;
    let t = ops::reshape(tokens, &[b, h, w, p, p, c])?;
    let t = ops::permute(&t, &[0, 5, 1, 3, 2, 4])?;
    Ok(ops::reshape(&t, &[b, c, h * p, w * p])?)
}

/// Non-overlapping `p x p` patches projected to `embed_dim`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch_size: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(prefix: &str, channels: usize, patch_size: usize, embed_dim: usize) -> Self {
        Self {
            patch_size,
            proj: Linear::new(format!("{}.patch_embed", prefix), patch_size * patch_size * channels, embed_dim),
        }
    }

    /// `B x C x H x W` to `B x (H/p)(W/p) x D` and the token grid.
    pub fn forward(&self, p: &Params, x: &Var) -> Result<(Var, (usize, usize))> {
        let (patches, grid) = patchify(x, self.patch_size)?;
        Ok((self.proj.forward(p, &patches)?, grid))
    }
}

/// Tokens projected to `p² C` values and scattered back to `C x H x W`.
#[derive(Clone, Debug)]
pub struct PatchInflate {
    pub patch_size: usize,
    pub channels: usize,
    pub proj: Linear,
}

impl PatchInflate {
    pub fn new(prefix: &str, channels: usize, patch_size: usize, embed_dim: usize) -> Self {
        Self {
            patch_size,
            channels,
            proj: Linear::new(format!("{}.patch_inflate", prefix), embed_dim, patch_size * patch_size * channels),
        }
    }

    pub fn forward(&self, p: &Params, tokens: &Var, grid: (usize, usize)) -> Result<Var> {
        if tokens.shape().len() != 3 || tokens.shape()[1] != grid.0 * grid.1 {
            return Err(Error::Config(format!("{:?} tokens for a {:?} grid", tokens.shape(), grid)));
        }
        let v = self.proj.forward(p, tokens)?;
        unpatchify(&v, self.patch_size, self.channels, grid)
    }
}

/// One recurrent cell: `z = STB^depth(proj([x, H]))`, four gates from `z`,
/// `C' = σ(f) C + σ(i) tanh(g)`, `H' = σ(o) tanh(C')`.
#[derive(Clone, Debug)]
pub struct SwinLstmCell {
    pub embed_dim: usize,
    proj: Linear,
    blocks: Vec<SwinBlock>,
    gate_i: Linear,
    gate_f: Linear,
    gate_o: Linear,
    gate_g: Linear,
}

pub const FORGET_BIAS_INIT: f64 = 1.0;

impl SwinLstmCell {
    pub fn new(prefix: &str, cfg: &PredictorConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let blocks = (0..cfg.depths)
            .map(|k| {
                SwinBlock::new(
                    format!("{}.block{}", prefix, k),
                    WindowAttentionConfig::new(cfg.window_size, cfg.num_heads, d, k % 2 == 1),
                )
            })
            .collect::<timealign_nn::Result<Vec<_>>>()?;
        Ok(Self {
            embed_dim: d,
            proj: Linear::new(format!("{}.proj", prefix), 2 * d, d),
            blocks,
            gate_i: Linear::new(format!("{}.gate_i", prefix), d, d),
            gate_f: Linear::new(format!("{}.gate_f", prefix), d, d),
            gate_o: Linear::new(format!("{}.gate_o", prefix), d, d),
            gate_g: Linear::new(format!("{}.gate_g", prefix), d, d),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.proj.init(store, rng)?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        for g in [&self.gate_i, &self.gate_f, &self.gate_o, &self.gate_g] {
            g.init(store, rng)?;
        }
        store.set(&self.gate_f.bias_name(), Tensor::full(vec![self.embed_dim], FORGET_BIAS_INIT))?;
        Ok(())
    }

    pub fn forget_bias_name(&self) -> String {
        self.gate_f.bias_name()
    }

    pub fn input_bias_name(&self) -> String {
        self.gate_i.bias_name()
    }

    pub fn gate_names(&self) -> Vec<String> {
        [&self.gate_i, &self.gate_f, &self.gate_o, &self.gate_g]
            .iter()
            .flat_map(|g| [g.weight_name(), g.bias_name()])
            .collect()
    }

    pub fn step(&self, p: &Params, x: &Var, state: &SwinLstmState, grid: (usize, usize)) -> Result<(Var, SwinLstmState)> {
        if x.shape() != state.hidden.shape() || x.shape() != state.memory.shape() {
            return Err(Error::Config(format!(
                "cell input {:?} does not match state {:?}/{:?}",
                x.shape(),
                state.hidden.shape(),
                state.memory.shape()
            )));
        }
        let mut z = self.proj.forward(p, &ops::concat(&[x.clone(), state.hidden.clone()], 2)?)?;
        for b in &self.blocks {
            z = b.forward(p, &z, grid)?;
        }
        let i = ops::sigmoid(&self.gate_i.forward(p, &z)?);
        let f = ops::sigmoid(&self.gate_f.forward(p, &z)?);
        let o = ops::sigmoid(&self.gate_o.forward(p, &z)?);
        let g = ops::tanh(&self.gate_g.forward(p, &z)?);
        let memory = ops::add(&ops::mul(&f, &state.memory)?, &ops::mul(&i, &g)?)?;
        let hidden = ops::mul(&o, &ops::tanh(&memory))?;
        Ok((hidden.clone(), SwinLstmState { hidden, memory }))
    }
}

/// Predictions for `T-2`, `T-1`, `T` (the last is F_p).
#[derive(Clone, Debug)]
pub struct PredictionBundle {
    pub predictions: Vec<Var>,
}

impl PredictionBundle {
    pub fn final_prediction(&self) -> &Var {
        self.predictions.last().expect("bundle holds three predictions")
    }
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    pub embed: PatchEmbed,
    pub cells: Vec<SwinLstmCell>,
    pub inflate: PatchInflate,
}

impl Predictor {
    pub fn new(prefix: &str, cfg: PredictorConfig) -> Result<Self> {
        let cells = (0..cfg.num_cells)
            .map(|k| SwinLstmCell::new(&format!("{}.cell{}", prefix, k), &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            embed: PatchEmbed::new(prefix, cfg.channels, cfg.patch_size, cfg.embed_dim),
            cells,
            inflate: PatchInflate::new(prefix, cfg.channels, cfg.patch_size, cfg.embed_dim),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.embed.proj.init(store, rng)?;
        for c in &self.cells {
            c.init(store, rng)?;
        }
        let proj = &self.inflate.proj;
        proj.init(store, rng)?;
        if self.cfg.residual {
            // start from copy-last
            for name in [proj.weight_name(), proj.bias_name()] {
                let shape = store.get(&name).expect("just initialized").shape().to_vec();
                store.set(&name, Tensor::zeros(shape))?;
            }
        }
        Ok(())
    }

    /// Map one frame to the next through all cells, updating `states`.
    fn advance(&self, p: &Params, input: &Var, states: &mut Vec<SwinLstmState>) -> Result<Var> {
        let (tokens, grid) = self.embed.forward(p, input)?;
        if states.is_empty() {
            let s = tokens.shape();
            *states = vec![SwinLstmState::zeros(s[0], s[1], s[2]); self.cells.len()];
        }
        let mut y = tokens;
        for (cell, st) in self.cells.iter().zip(states.iter_mut()) {
            let (out, next) = cell.step(p, &y, st, grid)?;
            *st = next;
            y = out;
        }
        let delta = self.inflate.forward(p, &y, grid)?;
        if self.cfg.residual {
            Ok(ops::add(input, &delta)?)
        } else {
            Ok(delta)
        }
    }

    /// `history`: features of `T-3, T-2, T-1`, each `B x C x H x W`.
    pub fn rollout(&self, p: &Params, history: &[Var]) -> Result<PredictionBundle> {
        if history.len() != HISTORY_LEN {
            return Err(Error::Config(format!("rollout needs {} history frames, got {}", HISTORY_LEN, history.len())));
        }
        let s = history[0].shape();
        if s.len() != 4 || s[1] != self.cfg.channels || history.iter().any(|h| h.shape() != s) {
            return Err(Error::Config(format!(
                "history shapes {:?} do not match {} channels",
                history.iter().map(|h| h.shape().to_vec()).collect::<Vec<_>>(),
                self.cfg.channels
            )));
        }
        self.cfg.validate(s[2], s[3])?;
        let mut states = Vec::new();
        let mut predictions: Vec<Var> = Vec::with_capacity(HISTORY_LEN);
        for k in 0..HISTORY_LEN {
            let input = match (k, self.cfg.feed) {
                (0, _) | (_, HistoryFeed::TeacherForced) => history[k].clone(),
                (_, HistoryFeed::Autoregressive) => predictions[k - 1].clone(),
            };
            predictions.push(self.advance(p, &input, &mut states)?);
        }
        Ok(PredictionBundle { predictions })
    }
}

/// Mean over the three steps of the per-element MSE against fixed labels.
pub fn prediction_loss(bundle: &PredictionBundle, labels: &[Tensor]) -> Result<Var> {
    if labels.len() != bundle.predictions.len() || labels.len() != HISTORY_LEN {
        return Err(Error::Config(format!(
            "{} predictions vs {} labels",
            bundle.predictions.len(),
            labels.len()
        )));
    }
    let terms = bundle
        .predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| ops::mse(p, l))
        .collect::<timealign_nn::Result<Vec<_>>>()?;
    Ok(ops::scale(&ops::add_n(&terms)?, 1.0 / HISTORY_LEN as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_round_trips() {
        let x = Tensor::from_fn(vec![2, 3, 4, 6], |i| i as f64);
        let v = Var::constant(x.clone());
        let (t, grid) = patchify(&v, 2).unwrap();
        assert_eq!(t.shape(), &[2, 6, 12]);
        let back = unpatchify(&t, 2, 3, grid).unwrap();
        assert_eq!(back.value(), &x);
    }

    #[test]
    fn config_rejects_indivisible_grid() {
        let cfg = PredictorConfig::desk(4);
        assert!(cfg.validate(32, 32).is_ok());
        assert!(cfg.validate(31, 32).is_err());
    }
}
