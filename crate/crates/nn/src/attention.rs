//! Swin transformer block: pre-norm windowed multi-head self-attention and
//! MLP, with optional cyclic window shift and boundary masking.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{shape_err, NnError, Result};
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::ops;
use crate::params::{ParamStore, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowAttentionConfig {
    pub window_size: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub shifted: bool,
    pub mlp_ratio: usize,
}

impl WindowAttentionConfig {
    pub fn new(window_size: usize, num_heads: usize, embed_dim: usize, shifted: bool) -> Self {
        Self {
            window_size,
            num_heads,
            embed_dim,
            shifted,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.num_heads == 0 || self.mlp_ratio == 0 {
            return Err(NnError::Config(format!("degenerate attention config {:?}", self)));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(NnError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// How tokens of an `h x w` grid are padded, shifted and split into windows.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub grid: (usize, usize),
    pub padded: (usize, usize),
    pub window: (usize, usize),
    pub shift: (usize, usize),
    pub num_windows: usize,
    pub tokens_per_window: usize,
    /// Per windowed row: source token index in the unpadded grid, or `None`
    /// for padding.
    pub gather: Vec<Option<usize>>,
    /// Per source token: its row in the windowed layout.
    pub scatter: Vec<usize>,
    /// Shift-region label of each windowed row; attention is allowed only
    /// between rows of the same window with equal labels.
    pub region: Vec<usize>,
}

impl WindowPlan {
    pub fn new(cfg: &WindowAttentionConfig, h: usize, w: usize) -> Result<Self> {
        cfg.validate()?;
        if h == 0 || w == 0 {
            return Err(NnError::Config("empty token grid".into()));
        }
        let wh = cfg.window_size.min(h);
        let ww = cfg.window_size.min(w);
        let hp = h.div_ceil(wh) * wh;
        let wp = w.div_ceil(ww) * ww;
        if hp % wh != 0 || wp % ww != 0 {
            return Err(NnError::Config(format!("grid {}x{} not divisible by window", h, w)));
        }
        let whole = wh == hp && ww == wp;
        let shift = if cfg.shifted && !whole { (wh / 2, ww / 2) } else { (0, 0) };
        let (nwy, nwx) = (hp / wh, wp / ww);
        let t = wh * ww;
        let mut gather = Vec::with_capacity(nwy * nwx * t);
        let mut region = Vec::with_capacity(nwy * nwx * t);
        let mut scatter = vec![0usize; h * w];
        let label = |r: usize, size: usize, win: usize, s: usize| -> usize {
            if s == 0 || r < size - win {
                0
            } else if r < size - s {
                1
            } else {
                2
            }
        };
        for wy in 0..nwy {
            for wx in 0..nwx {
                for ty in 0..wh {
                    for tx in 0..ww {
                        // position in the shifted padded grid
                        let (sy, sx) = (wy * wh + ty, wx * ww + tx);
                        let (py, px) = ((sy + shift.0) % hp, (sx + shift.1) % wp);
                        let row = gather.len();
                        if py < h && px < w {
                            gather.push(Some(py * w + px));
                            scatter[py * w + px] = row;
                        } else {
                            gather.push(None);
                        }
                        region.push(label(sy, hp, wh, shift.0) * 3 + label(sx, wp, ww, shift.1));
                    }
                }
            }
        }
        Ok(Self {
            grid: (h, w),
            padded: (hp, wp),
            window: (wh, ww),
            shift,
            num_windows: nwy * nwx,
            tokens_per_window: t,
            gather,
            scatter,
            region,
        })
    }

    pub fn allowed(&self, window: usize, query: usize, key: usize) -> bool {
        let base = window * self.tokens_per_window;
        self.region[base + query] == self.region[base + key]
    }

    /// Gather indices for a batch of `b` grids stacked along rows.
    fn batched(&self, b: usize) -> (Vec<Option<usize>>, Vec<usize>) {
        let n = self.grid.0 * self.grid.1;
        let rows = self.gather.len();
        let mut gather = Vec::with_capacity(b * rows);
        let mut scatter = Vec::with_capacity(b * n);
        for bi in 0..b {
            gather.extend(self.gather.iter().map(|g| g.map(|s| s + bi * n)));
            scatter.extend(self.scatter.iter().map(|&r| r + bi * rows));
        }
        (gather, scatter)
    }
}

/// One Swin transformer block.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub name: String,
    pub cfg: WindowAttentionConfig,
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl SwinBlock {
    pub fn new(name: impl Into<String>, cfg: WindowAttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let d = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(format!("{}.norm1", name), d),
            qkv: Linear::new(format!("{}.qkv", name), d, 3 * d),
            proj: Linear::new(format!("{}.proj", name), d, d),
            norm2: LayerNorm::new(format!("{}.norm2", name), d),
            mlp: Mlp::new(&format!("{}.mlp", name), d, cfg.mlp_ratio * d),
            name,
            cfg,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.norm1.init(store)?;
        self.qkv.init(store, rng)?;
        self.proj.init(store, rng)?;
        self.norm2.init(store)?;
        self.mlp.init(store, rng)
    }

    /// `tokens`: `B x N x D` with `N = h * w` in row-major grid order.
    pub fn forward(&self, p: &Params, tokens: &Var, grid: (usize, usize)) -> Result<Var> {
        Ok(self.forward_inner(p, tokens, grid)?.0)
    }

    /// Forward pass that also returns the attention weights,
    /// `[B * windows * heads, T, T]`.
    pub fn forward_with_attention(
        &self,
        p: &Params,
        tokens: &Var,
        grid: (usize, usize),
    ) -> Result<(Var, Tensor, WindowPlan)> {
        self.forward_inner(p, tokens, grid)
    }

    fn forward_inner(
        &self,
        p: &Params,
        tokens: &Var,
        grid: (usize, usize),
    ) -> Result<(Var, Tensor, WindowPlan)> {
        let s = tokens.shape();
        let d = self.cfg.embed_dim;
        if s.len() != 3 || s[2] != d || s[1] != grid.0 * grid.1 {
            return Err(shape_err(
                "swin_block",
                format!("tokens {:?} for grid {:?} and dim {}", s, grid, d),
            ));
        }
        let b = s[0];
        let plan = WindowPlan::new(&self.cfg, grid.0, grid.1)?;
        let heads = self.cfg.num_heads;
        let hd = d / heads;
        let t = plan.tokens_per_window;
        let nw = plan.num_windows;
        let (gather, scatter) = plan.batched(b);

        let xn = self.norm1.forward(p, tokens)?;
        let xr = ops::reshape(&xn, &[b * grid.0 * grid.1, d])?;
        let xw = ops::gather_rows(&xr, Rc::new(gather))?;
        let qkv = self.qkv.forward(p, &xw)?;
        let qkv = ops::reshape(&qkv, &[b * nw, t, 3, heads, hd])?;
        let qkv = ops::permute(&qkv, &[2, 0, 3, 1, 4])?;
        let g = b * nw * heads;
        let pick = |i: usize| -> Result<Var> {
            ops::reshape(&ops::slice(&qkv, 0, i, i + 1)?, &[g, t, hd])
        };
        let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
        let logits = ops::scale(&ops::bmm(&q, &k, true)?, 1.0 / (hd as f64).sqrt());
        let attn = if plan.shift == (0, 0) {
            ops::softmax(&logits)?
        } else {
            let region = plan.region.clone();
            ops::masked_softmax(&logits, move |row, col| {
                let window = (row / t / heads) % nw;
                let base = window * t;
                region[base + row % t] == region[base + col]
            })?
        };
        let o = ops::bmm(&attn, &v, false)?;
        let o = ops::reshape(&o, &[b * nw, heads, t, hd])?;
        let o = ops::permute(&o, &[0, 2, 1, 3])?;
        let o = ops::reshape(&o, &[b * nw * t, d])?;
        let o = self.proj.forward(p, &o)?;
        let back = ops::gather_rows(&o, Rc::new(scatter.into_iter().map(Some).collect()))?;
        let back = ops::reshape(&back, &[b, grid.0 * grid.1, d])?;
        let x1 = ops::add(tokens, &back)?;
        let m = self.mlp.forward(p, &self.norm2.forward(p, &x1)?)?;
        let out = ops::add(&x1, &m)?;
        Ok((out, attn.value().clone(), plan))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_without_shift_is_a_partition() {
        let cfg = WindowAttentionConfig::new(2, 1, 4, false);
        let plan = WindowPlan::new(&cfg, 4, 6).unwrap();
        assert_eq!(plan.num_windows, 6);
        let mut seen = vec![false; 24];
        for s in plan.gather.iter().flatten() {
            assert!(!seen[*s]);
            seen[*s] = true;
        }
        assert!(seen.iter().all(|&v| v));
        for (tok, &row) in plan.scatter.iter().enumerate() {
            assert_eq!(plan.gather[row], Some(tok));
        }
    }

    #[test]
    fn plan_pads_to_window_multiple() {
        let cfg = WindowAttentionConfig::new(4, 1, 4, true);
        let plan = WindowPlan::new(&cfg, 5, 6).unwrap();
        assert_eq!(plan.padded, (8, 8));
        assert_eq!(plan.gather.iter().filter(|g| g.is_none()).count(), 64 - 30);
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(SwinBlock::new("b", WindowAttentionConfig::new(2, 3, 8, false)).is_err());
    }
}
