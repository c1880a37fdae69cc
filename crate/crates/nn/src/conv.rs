//! 2D cross-correlation over `B x C x H x W` tensors via im2col + gemm.

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("kernel {} stride {} pad {} on {}x{}", k, stride, pad, h, w),
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Rows are (channel, ky, kx), columns output positions.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let n = self.cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let n = self.cols();
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = c * self.h * self.w + iy as usize * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dx[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `weight` is `[Cout, Cin, K, K]`,
/// `bias` `[Cout]`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
        return Err(shape_err("conv2d", format!("input {:?}, weight {:?}", xs, ws)));
    }
    let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let cout = ws[0];
    if let Some(bv) = bias {
        if bv.shape() != [cout] {
            return Err(shape_err("conv2d", format!("bias {:?} for {} outputs", bv.shape(), cout)));
        }
    }
    let geom = ConvGeom::new(cin, h, w, ws[2], stride, pad)?;
    let ckk = cin * geom.k * geom.k;
    let n = geom.cols();
    let mut out = vec![0.0; b * cout * n];
    let mut col = vec![0.0; ckk * n];
    let xd = x.value().data();
    for bi in 0..b {
        geom.im2col(&xd[bi * cin * h * w..(bi + 1) * cin * h * w], &mut col);
        let dst = &mut out[bi * cout * n..(bi + 1) * cout * n];
        if let Some(bv) = bias {
            for (o, &bb) in bv.value().data().iter().enumerate() {
                dst[o * n..(o + 1) * n].fill(bb);
            }
        }
        gemm(cout, ckk, n, 1.0, weight.value().data(), false, &col, false, 1.0, dst);
    }
    let out = Tensor::new(vec![b, cout, geom.ho, geom.wo], out)?;
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(bv) = bias {
        inputs.push(bv.clone());
    }
    Ok(Var::from_op(out, inputs, move |ctx| {
        let g = ctx.grad.data();
        let xd = ctx.inputs[0].value().data();
        let wd = ctx.inputs[1].value().data();
        let mut dx = ctx.needs[0].then(|| vec![0.0; b * cin * h * w]);
        let mut dw = ctx.needs[1].then(|| vec![0.0; cout * ckk]);
        let mut col = vec![0.0; ckk * n];
        for bi in 0..b {
            let gb = &g[bi * cout * n..(bi + 1) * cout * n];
            if let Some(dw) = dw.as_mut() {
                geom.im2col(&xd[bi * cin * h * w..(bi + 1) * cin * h * w], &mut col);
                gemm(cout, n, ckk, 1.0, gb, false, &col, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(ckk, cout, n, 1.0, wd, true, gb, false, 0.0, &mut col);
                geom.col2im(&col, &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w]);
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::new(vec![b, cin, h, w], d).unwrap()),
            dw.map(|d| Tensor::new(vec![cout, cin, geom.k, geom.k], d).unwrap()),
        ];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs[2].then(|| {
                let mut db = vec![0.0; cout];
                for bi in 0..b {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let s = (bi * cout + o) * n;
                        *acc += g[s..s + n].iter().sum::<f64>();
                    }
                }
                Tensor::new(vec![cout], db).unwrap()
            }));
        }
        grads
    }))
}
