//! Naive reference implementations shared by the kernel tests and the
//! acceptance run.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timealign_nn::{ParamStore, SwinBlock, Tensor, WindowAttentionConfig};

pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(vec![bn, cout, ho, wo]);
    for n in 0..bn {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at(&[o, c, ky, kx]) * x.at(&[n, c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[n, o, oy, ox], acc);
                }
            }
        }
    }
    out
}

/// Direct four-neighbour formula, zero outside the grid.
pub fn bilinear(plane: &dyn Fn(isize, isize) -> f64, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    plane(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + plane(y0, x0 + 1) * (1.0 - fy) * fx
        + plane(y0 + 1, x0) * fy * (1.0 - fx)
        + plane(y0 + 1, x0 + 1) * fy * fx
}

pub fn pixel(t: &Tensor, n: usize, c: usize) -> impl Fn(isize, isize) -> f64 + '_ {
    let (h, w) = (t.shape()[2] as isize, t.shape()[3] as isize);
    move |y, x| {
        if y < 0 || x < 0 || y >= h || x >= w {
            0.0
        } else {
            t.at(&[n, c, y as usize, x as usize])
        }
    }
}

pub fn naive_deform(x: &Tensor, w: &Tensor, b: &Tensor, off: &Tensor, m: &Tensor) -> Tensor {
    let (bn, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let half = (k / 2) as f64;
    let mut out = Tensor::zeros(vec![bn, cout, h, wd]);
    for n in 0..bn {
        for o in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b.data()[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let t = ky * k + kx;
                            let y = i as f64 + ky as f64 - half + off.at(&[n, 2 * t, i, j]);
                            let xx = j as f64 + kx as f64 - half + off.at(&[n, 2 * t + 1, i, j]);
                            for ci in 0..c {
                                let v = bilinear(&pixel(x, n, ci), y, xx);
                                acc += w.at(&[o, ci, ky, kx]) * m.at(&[n, t, i, j]) * v;
                            }
                        }
                    }
                    out.set(&[n, o, i, j], acc);
                }
            }
        }
    }
    out
}

pub fn init_block(cfg: WindowAttentionConfig, seed: u64) -> (SwinBlock, ParamStore) {
    let block = SwinBlock::new("blk", cfg).unwrap();
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    block.init(&mut store, &mut r).unwrap();
    // break the trivial init so the oracle sees non-degenerate weights
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let t = store.get(&n).unwrap();
        let noisy = Tensor::randn(t.shape().to_vec(), 0.3, &mut r).zip_map(t, |a, b| a + b);
        store.set(&n, noisy).unwrap();
    }
    (block, store)
}

pub fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    x.iter().enumerate().map(|(k, v)| (v - mu) / (var + 1e-5).sqrt() * g[k] + b[k]).collect()
}

pub fn lin(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o).map(|r| b.data()[r] + (0..i).map(|c| w.at(&[r, c]) * x[c]).sum::<f64>()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Global multi-head self-attention block written with plain loops.
pub fn dense_block(store: &ParamStore, x: &Tensor, heads: usize) -> Tensor {
    let (bn, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hd = d / heads;
    let p = |k: &str| store.get(&format!("blk.{}", k)).unwrap().clone();
    let mut out = x.clone();
    for b in 0..bn {
        let rows: Vec<Vec<f64>> = (0..n).map(|t| x.data()[(b * n + t) * d..(b * n + t + 1) * d].to_vec()).collect();
        let normed: Vec<Vec<f64>> = rows.iter().map(|r| layer_norm_row(r, p("norm1.gamma").data(), p("norm1.beta").data())).collect();
        let qkv: Vec<Vec<f64>> = normed.iter().map(|r| lin(r, &p("qkv.weight"), &p("qkv.bias"))).collect();
        let mut attn_out = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let q = &qkv[i][h * hd..(h + 1) * hd];
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        let k = &qkv[j][d + h * hd..d + (h + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    let v = &qkv[j][2 * d + h * hd..2 * d + (h + 1) * hd];
                    for k in 0..hd {
                        attn_out[i][h * hd + k] += e[j] / z * v[k];
                    }
                }
            }
        }
        for i in 0..n {
            let proj = lin(&attn_out[i], &p("proj.weight"), &p("proj.bias"));
            let x1: Vec<f64> = rows[i].iter().zip(&proj).map(|(a, b)| a + b).collect();
            let n2 = layer_norm_row(&x1, p("norm2.gamma").data(), p("norm2.beta").data());
            let hdn: Vec<f64> = lin(&n2, &p("mlp.fc1.weight"), &p("mlp.fc1.bias")).into_iter().map(gelu).collect();
            let m = lin(&hdn, &p("mlp.fc2.weight"), &p("mlp.fc2.bias"));
            for k in 0..d {
                out.data_mut()[(b * n + i) * d + k] = x1[k] + m[k];
            }
        }
    }
    out
}
