//! Bilinear sampling with zero padding, and modulated deformable convolution
//! built on it. Locations are continuous `(row, col)` cell coordinates where
//! integer values hit cell centers.

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Corner indices and weights of a bilinear tap; out-of-bounds corners carry
/// `None` and contribute zero.
#[derive(Clone, Copy, Debug)]
struct Taps {
    idx: [Option<usize>; 4],
    // (1-wy)(1-wx), (1-wy)wx, wy(1-wx), wy wx
    wt: [f64; 4],
    wy: f64,
    wx: f64,
}

#[inline]
fn taps(h: usize, w: usize, y: f64, x: f64) -> Taps {
    let y0 = y.floor();
    let x0 = x.floor();
    let wy = y - y0;
    let wx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| -> Option<usize> {
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w)
            .then(|| yy as usize * w + xx as usize)
    };
    Taps {
        idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        wt: [(1.0 - wy) * (1.0 - wx), (1.0 - wy) * wx, wy * (1.0 - wx), wy * wx],
        wy,
        wx,
    }
}

impl Taps {
    #[inline]
    fn value(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for k in 0..4 {
            if let Some(i) = self.idx[k] {
                v += self.wt[k] * plane[i];
            }
        }
        v
    }

    /// d value / d (y, x).
    #[inline]
    fn loc_grad(&self, plane: &[f64]) -> (f64, f64) {
        let v = |k: usize| self.idx[k].map_or(0.0, |i| plane[i]);
        let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
        let dy = (1.0 - self.wx) * (v10 - v00) + self.wx * (v11 - v01);
        let dx = (1.0 - self.wy) * (v01 - v00) + self.wy * (v11 - v10);
        (dy, dx)
    }

    #[inline]
    fn scatter(&self, plane: &mut [f64], g: f64) {
        for k in 0..4 {
            if let Some(i) = self.idx[k] {
                plane[i] += self.wt[k] * g;
            }
        }
    }
}

/// Sample `feature` (`B x C x H x W`) at `locations` (`B x Ho x Wo x 2`,
/// `(row, col)` per output cell). Returns `B x C x Ho x Wo`.
pub fn grid_sample_bilinear(feature: &Var, locations: &Var) -> Result<Var> {
    let (fs, ls) = (feature.shape(), locations.shape());
    if fs.len() != 4 || ls.len() != 4 || ls[3] != 2 || ls[0] != fs[0] {
        return Err(shape_err("grid_sample_bilinear", format!("feature {:?}, locations {:?}", fs, ls)));
    }
    let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let (ho, wo) = (ls[1], ls[2]);
    let np = ho * wo;
    let fd = feature.value().data();
    let ld = locations.value().data();
    let mut out = vec![0.0; b * c * np];
    for bi in 0..b {
        for p in 0..np {
            let l = (bi * np + p) * 2;
            let t = taps(h, w, ld[l], ld[l + 1]);
            for ci in 0..c {
                let plane = &fd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                out[(bi * c + ci) * np + p] = t.value(plane);
            }
        }
    }
    let out = Tensor::new(vec![b, c, ho, wo], out)?;
    Ok(Var::from_op(out, vec![feature.clone(), locations.clone()], move |ctx| {
        let g = ctx.grad.data();
        let fd = ctx.inputs[0].value().data();
        let ld = ctx.inputs[1].value().data();
        let mut df = ctx.needs[0].then(|| vec![0.0; b * c * h * w]);
        let mut dl = ctx.needs[1].then(|| vec![0.0; b * np * 2]);
        for bi in 0..b {
            for p in 0..np {
                let l = (bi * np + p) * 2;
                let t = taps(h, w, ld[l], ld[l + 1]);
                for ci in 0..c {
                    let gv = g[(bi * c + ci) * np + p];
                    let pr = (bi * c + ci) * h * w..(bi * c + ci + 1) * h * w;
                    if let Some(dl) = dl.as_mut() {
                        let (dy, dx) = t.loc_grad(&fd[pr.clone()]);
                        dl[l] += gv * dy;
                        dl[l + 1] += gv * dx;
                    }
                    if let Some(df) = df.as_mut() {
                        t.scatter(&mut df[pr], gv);
                    }
                }
            }
        }
        vec![
            df.map(|d| Tensor::new(vec![b, c, h, w], d).unwrap()),
            dl.map(|d| Tensor::new(vec![b, ho, wo, 2], d).unwrap()),
        ]
    }))
}

#[derive(Clone, Copy)]
struct DeformGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl DeformGeom {
    fn kk(&self) -> usize {
        self.k * self.k
    }

    fn np(&self) -> usize {
        self.h * self.w
    }

    /// Sampling location of tap `t` for output cell `p` of one batch element.
    #[inline]
    fn loc(&self, off: &[f64], t: usize, p: usize) -> (f64, f64) {
        let half = (self.k / 2) as f64;
        let (oy, ox) = (p / self.w, p % self.w);
        let (ky, kx) = (t / self.k, t % self.k);
        let np = self.np();
        (
            oy as f64 + ky as f64 - half + off[(2 * t) * np + p],
            ox as f64 + kx as f64 - half + off[(2 * t + 1) * np + p],
        )
    }

    /// Modulated deformable column matrix, rows `(channel, tap)`.
    fn columns(&self, x: &[f64], off: &[f64], modu: &[f64], col: &mut [f64]) {
        let np = self.np();
        let plane_len = self.h * self.w;
        for t in 0..self.kk() {
            for p in 0..np {
                let (y, xx) = self.loc(off, t, p);
                let tp = taps(self.h, self.w, y, xx);
                let m = modu[t * np + p];
                for ci in 0..self.c {
                    let plane = &x[ci * plane_len..(ci + 1) * plane_len];
                    col[(ci * self.kk() + t) * np + p] = m * tp.value(plane);
                }
            }
        }
    }
}

/// Modulated deformable convolution with stride 1 and "same" padding.
///
/// `x`: `B x C x H x W`; `weight`: `[Cout, C, K, K]` (odd `K`);
/// `offsets`: `B x 2K² x H x W` with `(dy, dx)` per tap in row-major tap
/// order; `modulation`: `B x K² x H x W`. Each tap samples `x` bilinearly
/// at its base location plus offset, is scaled by the modulation, and the
/// taps are then weighted and summed as in [`crate::conv::conv2d`].
pub fn deformable_conv(
    x: &Var,
    weight: &Var,
    bias: Option<&Var>,
    offsets: &Var,
    modulation: &Var,
) -> Result<Var> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(shape_err("deformable_conv", format!("input {:?}, weight {:?}", xs, ws)));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    let geom = DeformGeom { c, h, w, k };
    let kk = geom.kk();
    if offsets.shape() != [b, 2 * kk, h, w] || modulation.shape() != [b, kk, h, w] {
        return Err(shape_err(
            "deformable_conv",
            format!(
                "offsets {:?} / modulation {:?} for K={} on {:?}",
                offsets.shape(),
                modulation.shape(),
                k,
                xs
            ),
        ));
    }
    if let Some(bv) = bias {
        if bv.shape() != [cout] {
            return Err(shape_err("deformable_conv", format!("bias {:?}", bv.shape())));
        }
    }
    let np = geom.np();
    let ckk = c * kk;
    let (xd, od, md) = (x.value().data(), offsets.value().data(), modulation.value().data());
    let mut out = vec![0.0; b * cout * np];
    let mut col = vec![0.0; ckk * np];
    for bi in 0..b {
        geom.columns(
            &xd[bi * c * np..(bi + 1) * c * np],
            &od[bi * 2 * kk * np..(bi + 1) * 2 * kk * np],
            &md[bi * kk * np..(bi + 1) * kk * np],
            &mut col,
        );
        let dst = &mut out[bi * cout * np..(bi + 1) * cout * np];
        if let Some(bv) = bias {
            for (o, &bb) in bv.value().data().iter().enumerate() {
                dst[o * np..(o + 1) * np].fill(bb);
            }
        }
        gemm(cout, ckk, np, 1.0, weight.value().data(), false, &col, false, 1.0, dst);
    }
    let out = Tensor::new(vec![b, cout, h, w], out)?;
    let mut inputs = vec![x.clone(), weight.clone(), offsets.clone(), modulation.clone()];
    if let Some(bv) = bias {
        inputs.push(bv.clone());
    }
    Ok(Var::from_op(out, inputs, move |ctx| {
        let g = ctx.grad.data();
        let xd = ctx.inputs[0].value().data();
        let wd = ctx.inputs[1].value().data();
        let od = ctx.inputs[2].value().data();
        let md = ctx.inputs[3].value().data();
        let mut dx = ctx.needs[0].then(|| vec![0.0; b * c * np]);
        let mut dw = ctx.needs[1].then(|| vec![0.0; cout * ckk]);
        let mut doff = ctx.needs[2].then(|| vec![0.0; b * 2 * kk * np]);
        let mut dmod = ctx.needs[3].then(|| vec![0.0; b * kk * np]);
        let want_sample_grads = dx.is_some() || doff.is_some() || dmod.is_some();
        let mut col = vec![0.0; ckk * np];
        let mut dcol = vec![0.0; ckk * np];
        for bi in 0..b {
            let gb = &g[bi * cout * np..(bi + 1) * cout * np];
            let xb = &xd[bi * c * np..(bi + 1) * c * np];
            let ob = &od[bi * 2 * kk * np..(bi + 1) * 2 * kk * np];
            let mb = &md[bi * kk * np..(bi + 1) * kk * np];
            if let Some(dw) = dw.as_mut() {
                geom.columns(xb, ob, mb, &mut col);
                gemm(cout, np, ckk, 1.0, gb, false, &col, true, 1.0, dw);
            }
            if !want_sample_grads {
                continue;
            }
            gemm(ckk, cout, np, 1.0, wd, true, gb, false, 0.0, &mut dcol);
            for t in 0..kk {
                for p in 0..np {
                    let (y, xx) = geom.loc(ob, t, p);
                    let tp = taps(h, w, y, xx);
                    let m = mb[t * np + p];
                    let (mut gy, mut gx, mut gm) = (0.0, 0.0, 0.0);
                    for ci in 0..c {
                        let gc = dcol[(ci * kk + t) * np + p];
                        if gc == 0.0 {
                            continue;
                        }
                        let plane = &xb[ci * np..(ci + 1) * np];
                        if dmod.is_some() {
                            gm += gc * tp.value(plane);
                        }
                        if doff.is_some() {
                            let (dy, dxl) = tp.loc_grad(plane);
                            gy += gc * m * dy;
                            gx += gc * m * dxl;
                        }
                        if let Some(dx) = dx.as_mut() {
                            tp.scatter(&mut dx[(bi * c + ci) * np..(bi * c + ci + 1) * np], gc * m);
                        }
                    }
                    if let Some(dm) = dmod.as_mut() {
                        dm[(bi * kk + t) * np + p] += gm;
                    }
                    if let Some(d) = doff.as_mut() {
                        d[(bi * 2 * kk + 2 * t) * np + p] += gy;
                        d[(bi * 2 * kk + 2 * t + 1) * np + p] += gx;
                    }
                }
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::new(vec![b, c, h, w], d).unwrap()),
            dw.map(|d| Tensor::new(vec![cout, c, k, k], d).unwrap()),
            doff.map(|d| Tensor::new(vec![b, 2 * kk, h, w], d).unwrap()),
            dmod.map(|d| Tensor::new(vec![b, kk, h, w], d).unwrap()),
        ];
        if ctx.inputs.len() == 5 {
            grads.push(ctx.needs[4].then(|| {
                let mut db = vec![0.0; cout];
                for bi in 0..b {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let s = (bi * cout + o) * np;
                        *acc += g[s..s + np].iter().sum::<f64>();
                    }
                }
                Tensor::new(vec![cout], db).unwrap()
            }));
        }
        grads
    }))
}
