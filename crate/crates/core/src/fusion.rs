//! Camera-guided alignment of predicted and observed LiDAR features, their
//! combination into F_f, and the final LiDAR-camera fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};
use timealign_nn::layers::Conv2d;
use timealign_nn::sample::{deformable_conv, grid_sample_bilinear};
use timealign_nn::{ops, ParamStore, Params, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lidar_channels: usize,
    pub camera_channels: usize,
    pub deform_kernel: usize,
    /// Width of the offset convolution stack.
    pub offset_hidden: usize,
    /// Hidden width of the combination layers.
    pub combine_hidden: usize,
    /// Hidden width and output width of the global fusion.
    pub fuse_hidden: usize,
    pub fuse_out: usize,
}

impl FusionConfig {
    pub fn concat_channels(&self) -> usize {
        self.lidar_channels + self.camera_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.deform_kernel % 2 == 0 {
            return Err(Error::Config(format!("deform kernel {} must be odd", self.deform_kernel)));
        }
        let widths = [
            self.lidar_channels,
            self.camera_channels,
            self.offset_hidden,
            self.combine_hidden,
            self.fuse_hidden,
            self.fuse_out,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("fusion channel widths must be positive".into()));
        }
        Ok(())
    }
}

fn check_pair(op: &str, lidar: &Var, cam: &Var, lc: usize, cc: usize) -> Result<()> {
    let (a, b) = (lidar.shape(), cam.shape());
    if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] || a[1] != lc || b[1] != cc {
        return Err(Error::Config(format!(
            "{}: lidar {:?} / camera {:?} do not match {} + {} channels",
            op, a, b, lc, cc
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub realigned: Var,
    pub offsets: Var,
    pub modulation: Var,
    /// Shape of the LiDAR-camera concatenation fed to the offset convs.
    pub concat_shape: Vec<usize>,
}

/// Offset convs on `[f_lidar, f_cam]` give per-tap offsets and modulation
/// logits; the logits are grid-sampled at the displaced tap locations and
/// squashed, then drive a deformable conv over `f_lidar` plus a residual.
#[derive(Clone, Debug)]
pub struct AlignBranch {
    pub cfg: FusionConfig,
    offset1: Conv2d,
    offset2: Conv2d,
    deform: Conv2d,
}

impl AlignBranch {
    pub fn new(prefix: &str, cfg: FusionConfig) -> Self {
        let kk = cfg.deform_kernel * cfg.deform_kernel;
        Self {
            cfg,
            offset1: Conv2d::same(format!("{}.offset1", prefix), cfg.concat_channels(), cfg.offset_hidden, 3),
            offset2: Conv2d::same(format!("{}.offset2", prefix), cfg.offset_hidden, 3 * kk, 3),
            deform: Conv2d::same(format!("{}.deform", prefix), cfg.lidar_channels, cfg.lidar_channels, cfg.deform_kernel),
        }
    }

    /// The final offset layer starts at zero.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.offset1.init(store, rng)?;
        self.offset2.init_zero(store)?;
        self.deform.init(store, rng)?;
        Ok(())
    }

    pub fn offset_head_names(&self) -> [String; 2] {
        [self.offset2.weight_name(), self.offset2.bias_name()]
    }

    pub fn deform_names(&self) -> [String; 2] {
        [self.deform.weight_name(), self.deform.bias_name()]
    }

    pub fn forward(&self, p: &Params, f_lidar: &Var, f_cam: &Var) -> Result<BranchOutput> {
        check_pair("align_branch", f_lidar, f_cam, self.cfg.lidar_channels, self.cfg.camera_channels)?;
        let s = f_lidar.shape().to_vec();
        let (b, h, w) = (s[0], s[2], s[3]);
        let k = self.cfg.deform_kernel;
        let kk = k * k;

        let concat = ops::concat(&[f_lidar.clone(), f_cam.clone()], 1)?;
        let concat_shape = concat.shape().to_vec();
        let hid = ops::gelu(&self.offset1.forward(p, &concat)?);
        drop(concat);
        let raw = self.offset2.forward(p, &hid)?;
        drop(hid);
        let offsets = ops::slice(&raw, 1, 0, 2 * kk)?;
        let logits = ops::slice(&raw, 1, 2 * kk, 3 * kk)?;

        let half = (k / 2) as f64;
        let mut sampled = Vec::with_capacity(kk);
        for tap in 0..kk {
            let (ky, kx) = ((tap / k) as f64 - half, (tap % k) as f64 - half);
            let base = Tensor::from_fn(vec![b, h, w, 2], |idx| {
                let cell = idx / 2 % (h * w);
                if idx % 2 == 0 {
                    (cell / w) as f64 + ky
                } else {
                    (cell % w) as f64 + kx
                }
            });
            let off = ops::slice(&offsets, 1, 2 * tap, 2 * tap + 2)?;
            let loc = ops::add_const(&ops::permute(&off, &[0, 2, 3, 1])?, &base)?;
            let logit = ops::slice(&logits, 1, tap, tap + 1)?;
            sampled.push(grid_sample_bilinear(&logit, &loc)?);
        }
        let modulation = ops::sigmoid(&ops::concat(&sampled, 1)?);
        drop(sampled);

        let wt = p.get(&self.deform.weight_name())?;
        let bias = p.get(&self.deform.bias_name())?;
        let deformed = deformable_conv(f_lidar, &wt, Some(&bias), &offsets, &modulation)?;
        let realigned = ops::add(&deformed, f_lidar)?;
        Ok(BranchOutput {
            realigned,
            offsets,
            modulation,
            concat_shape,
        })
    }
}

/// Two convs with GELU between over `[pred, obs]`, producing F_f.
#[derive(Clone, Debug)]
pub struct Combine {
    pub cfg: FusionConfig,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Combine {
    pub fn new(prefix: &str, cfg: FusionConfig) -> Self {
        Self {
            cfg,
            conv1: Conv2d::same(format!("{}.conv1", prefix), 2 * cfg.lidar_channels, cfg.combine_hidden, 3),
            conv2: Conv2d::same(format!("{}.conv2", prefix), cfg.combine_hidden, cfg.lidar_channels, 3),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.conv2.init(store, rng)?;
        Ok(())
    }

    pub fn forward(&self, p: &Params, pred: &BranchOutput, obs: &BranchOutput) -> Result<Var> {
        if pred.realigned.shape() != obs.realigned.shape() {
            return Err(Error::Config(format!(
                "combine: branch shapes {:?} and {:?} differ",
                pred.realigned.shape(),
                obs.realigned.shape()
            )));
        }
        let x = ops::concat(&[pred.realigned.clone(), obs.realigned.clone()], 1)?;
        let h = ops::gelu(&self.conv1.forward(p, &x)?);
        Ok(self.conv2.forward(p, &h)?)
    }

    /// Weights for which the output equals the observed branch: the first
    /// conv copies it shifted by `shift` so GELU acts as the identity, the
    /// second undoes the shift. Requires `combine_hidden >= lidar_channels`.
    pub fn set_pass_observed(&self, store: &mut ParamStore, shift: f64) -> Result<()> {
        let c = self.cfg.lidar_channels;
        if self.cfg.combine_hidden < c {
            return Err(Error::Config("combine_hidden must be at least lidar_channels".into()));
        }
        let (hid, k) = (self.cfg.combine_hidden, 3);
        let mut w1 = Tensor::zeros(self.conv1.weight_shape());
        let mut b1 = Tensor::zeros(vec![hid]);
        let mut w2 = Tensor::zeros(self.conv2.weight_shape());
        let mut b2 = Tensor::zeros(vec![c]);
        for ch in 0..c {
            w1.set(&[ch, c + ch, k / 2, k / 2], 1.0);
            b1.data_mut()[ch] = shift;
            w2.set(&[ch, ch, k / 2, k / 2], 1.0);
            b2.data_mut()[ch] = -shift;
        }
        store.set(&self.conv1.weight_name(), w1)?;
        store.set(&self.conv1.bias_name(), b1)?;
        store.set(&self.conv2.weight_name(), w2)?;
        store.set(&self.conv2.bias_name(), b2)?;
        Ok(())
    }
}

/// `[F_f, F_c]` through two convs with GELU between, to the detector input.
#[derive(Clone, Debug)]
pub struct GlobalFuse {
    pub cfg: FusionConfig,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl GlobalFuse {
    pub fn new(prefix: &str, cfg: FusionConfig) -> Self {
        Self {
            cfg,
            conv1: Conv2d::same(format!("{}.conv1", prefix), cfg.concat_channels(), cfg.fuse_hidden, 3),
            conv2: Conv2d::same(format!("{}.conv2", prefix), cfg.fuse_hidden, cfg.fuse_out, 3),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.conv2.init(store, rng)?;
        Ok(())
    }

    pub fn forward(&self, p: &Params, f_f: &Var, f_cam: &Var) -> Result<Var> {
        check_pair("global_fuse", f_f, f_cam, self.cfg.lidar_channels, self.cfg.camera_channels)?;
        let x = ops::concat(&[f_f.clone(), f_cam.clone()], 1)?;
        let h = ops::gelu(&self.conv1.forward(p, &x)?);
        Ok(self.conv2.forward(p, &h)?)
    }
}

/// Parameter count under `prefix`.
pub fn count_params(store: &ParamStore, prefix: &str) -> usize {
    store
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, v)| v.numel())
        .sum()
}
