//! Elementwise, reduction, shape and dense linear-algebra ops.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary(x: &Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    let out = x.value().map(f);
    Var::from_op(out, vec![x.clone()], move |ctx| {
        let x = ctx.inputs[0].value();
        let data = x
            .data()
            .iter()
            .zip(ctx.output.data())
            .zip(ctx.grad.data())
            .map(|((&xv, &yv), &g)| g * df(xv, yv))
            .collect();
        vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
    })
}

fn check_same(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    check_same("add", a, b)?;
    let out = a.value().zip_map(b.value(), |x, y| x + y);
    Ok(Var::from_op(out, vec![a.clone(), b.clone()], |ctx| {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    }))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    check_same("sub", a, b)?;
    let out = a.value().zip_map(b.value(), |x, y| x - y);
    Ok(Var::from_op(out, vec![a.clone(), b.clone()], |ctx| {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-1.0))]
    }))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    check_same("mul", a, b)?;
    let out = a.value().zip_map(b.value(), |x, y| x * y);
    Ok(Var::from_op(out, vec![a.clone(), b.clone()], |ctx| {
        let (a, b) = (ctx.inputs[0].value(), ctx.inputs[1].value());
        vec![
            ctx.needs[0].then(|| ctx.grad.zip_map(b, |g, y| g * y)),
            ctx.needs[1].then(|| ctx.grad.zip_map(a, |g, x| g * x)),
        ]
    }))
}

pub fn scale(x: &Var, s: f64) -> Var {
    unary(x, move |v| v * s, move |_, _| s)
}

pub fn add_scalar(x: &Var, c: f64) -> Var {
    unary(x, move |v| v + c, |_, _| 1.0)
}

/// `x + c` for a constant tensor of the same shape.
pub fn add_const(x: &Var, c: &Tensor) -> Result<Var> {
    if x.shape() != c.shape() {
        return Err(shape_err("add_const", format!("{:?} vs {:?}", x.shape(), c.shape())));
    }
    let out = x.value().zip_map(c, |a, b| a + b);
    Ok(Var::from_op(out, vec![x.clone()], |ctx| vec![Some(ctx.grad.clone())]))
}

pub fn sigmoid(x: &Var) -> Var {
    unary(x, sigmoid_f, |_, y| y * (1.0 - y))
}

pub fn tanh(x: &Var) -> Var {
    unary(x, f64::tanh, |_, y| 1.0 - y * y)
}

pub fn relu(x: &Var) -> Var {
    unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

/// Tanh approximation of GELU.
pub fn gelu(x: &Var) -> Var {
    unary(x, gelu_f, |x, _| gelu_grad(x))
}

pub fn square(x: &Var) -> Var {
    unary(x, |v| v * v, |x, _| 2.0 * x)
}

pub fn sigmoid_f(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sum(x: &Var) -> Var {
    let out = Tensor::scalar(x.value().sum());
    Var::from_op(out, vec![x.clone()], |ctx| {
        let g = ctx.grad.item();
        vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
    })
}

pub fn mean(x: &Var) -> Var {
    let n = x.value().numel().max(1) as f64;
    scale(&sum(x), 1.0 / n)
}

/// `sum(x * w)` for a constant weight tensor.
pub fn weighted_sum(x: &Var, w: &Tensor) -> Result<Var> {
    if x.shape() != w.shape() {
        return Err(shape_err("weighted_sum", format!("{:?} vs {:?}", x.shape(), w.shape())));
    }
    let s: f64 = x.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let w = w.clone();
    Ok(Var::from_op(Tensor::scalar(s), vec![x.clone()], move |ctx| {
        vec![Some(w.scale(ctx.grad.item()))]
    }))
}

/// Mean of squared differences against a target that receives no gradient.
pub fn mse(pred: &Var, target: &Tensor) -> Result<Var> {
    if pred.shape() != target.shape() {
        return Err(shape_err("mse", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = target.numel().max(1) as f64;
    let s: f64 = pred
        .value()
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    let target = target.clone();
    Ok(Var::from_op(Tensor::scalar(s / n), vec![pred.clone()], move |ctx| {
        let g = ctx.grad.item() * 2.0 / n;
        vec![Some(ctx.inputs[0].value().zip_map(&target, |p, t| g * (p - t)))]
    }))
}

/// Sum of several same-shape values.
pub fn add_n(parts: &[Var]) -> Result<Var> {
    let mut iter = parts.iter();
    let first = iter.next().ok_or_else(|| shape_err("add_n", "no inputs"))?;
    let mut acc = first.clone();
    for p in iter {
        acc = add(&acc, p)?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------- shape ops

pub fn reshape(x: &Var, shape: &[usize]) -> Result<Var> {
    let old = x.shape().to_vec();
    let out = x.value().clone().reshape(shape.to_vec())?;
    Ok(Var::from_op(out, vec![x.clone()], move |ctx| {
        vec![Some(ctx.grad.clone().reshape(old.clone()).unwrap())]
    }))
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let src = x.data();
    if rank == 0 {
        return x.clone();
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let inner = out_shape[last];
    let inner_stride = strides[last];
    while out.len() < n {
        for k in 0..inner {
            out.push(src[base + k * inner_stride]);
        }
        // advance all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

pub fn permute(x: &Var, axes: &[usize]) -> Result<Var> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(shape_err("permute", format!("axes {:?} for rank {}", axes, rank)));
    }
    let out = permute_tensor(x.value(), axes);
    let mut inverse = vec![0; rank];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    Ok(Var::from_op(out, vec![x.clone()], move |ctx| {
        vec![Some(permute_tensor(ctx.grad, &inverse))]
    }))
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(shape_err("concat", format!("axis {} for rank {}", axis, rank)));
    }
    for p in parts {
        let ok = p.shape().len() == rank
            && p.shape().iter().enumerate().all(|(i, &d)| i == axis || d == first.shape()[i]);
        if !ok {
            return Err(shape_err("concat", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let (outer, inner) = outer_inner(first.shape(), axis);
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &s) in parts.iter().zip(&sizes) {
            let chunk = s * inner;
            data.extend_from_slice(&p.value().data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let out = Tensor::new(shape, data)?;
    Ok(Var::from_op(out, parts.to_vec(), move |ctx| {
        let mut grads = Vec::with_capacity(sizes.len());
        let g = ctx.grad.data();
        let mut start = 0;
        for (i, &s) in sizes.iter().enumerate() {
            if !ctx.needs[i] {
                grads.push(None);
                start += s;
                continue;
            }
            let mut buf = Vec::with_capacity(outer * s * inner);
            for o in 0..outer {
                let row = o * total * inner;
                buf.extend_from_slice(&g[row + start * inner..row + (start + s) * inner]);
            }
            grads.push(Some(Tensor::new(ctx.inputs[i].shape().to_vec(), buf).unwrap()));
            start += s;
        }
        grads
    }))
}

/// Indices `start..end` along `axis`.
pub fn slice(x: &Var, axis: usize, start: usize, end: usize) -> Result<Var> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() || start > end || end > shape[axis] {
        return Err(shape_err("slice", format!("{}..{} on axis {} of {:?}", start, end, axis, shape)));
    }
    let (outer, inner) = outer_inner(&shape, axis);
    let dim = shape[axis];
    let len = end - start;
    let mut data = Vec::with_capacity(outer * len * inner);
    let src = x.value().data();
    for o in 0..outer {
        let row = o * dim * inner;
        data.extend_from_slice(&src[row + start * inner..row + end * inner]);
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let out = Tensor::new(out_shape, data)?;
    Ok(Var::from_op(out, vec![x.clone()], move |ctx| {
        let mut g = vec![0.0; outer * dim * inner];
        let src = ctx.grad.data();
        for o in 0..outer {
            let row = o * dim * inner;
            g[row + start * inner..row + end * inner]
                .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        vec![Some(Tensor::new(shape.clone(), g).unwrap())]
    }))
}

/// Treat `x` as rows of its last dimension and build `index.len()` output
/// rows, row `r` copied from source row `index[r]` or zero when `None`.
/// Output shape is `[index.len(), D]`.
pub fn gather_rows(x: &Var, index: Rc<Vec<Option<usize>>>) -> Result<Var> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err("gather_rows", "rank-0 input"))?;
    let rows = x.value().numel() / d.max(1);
    if let Some(bad) = index.iter().flatten().find(|&&r| r >= rows) {
        return Err(shape_err("gather_rows", format!("row {} of {}", bad, rows)));
    }
    let src = x.value().data();
    let mut data = vec![0.0; index.len() * d];
    for (r, ix) in index.iter().enumerate() {
        if let Some(s) = ix {
            data[r * d..(r + 1) * d].copy_from_slice(&src[s * d..(s + 1) * d]);
        }
    }
    let out = Tensor::new(vec![index.len(), d], data)?;
    Ok(Var::from_op(out, vec![x.clone()], move |ctx| {
        let mut g = vec![0.0; rows * d];
        let src = ctx.grad.data();
        for (r, ix) in index.iter().enumerate() {
            if let Some(s) = ix {
                for k in 0..d {
                    g[s * d + k] += src[r * d + k];
                }
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), g).unwrap())]
    }))
}

// ------------------------------------------------------------------ linalg

/// `y = x W^T + b` over the last axis; `weight` is `[out, in]`.
pub fn linear(x: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
    let din = *x.shape().last().ok_or_else(|| shape_err("linear", "rank-0 input"))?;
    let ws = weight.shape();
    if ws.len() != 2 || ws[1] != din {
        return Err(shape_err("linear", format!("input {:?}, weight {:?}", x.shape(), ws)));
    }
    let dout = ws[0];
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(shape_err("linear", format!("bias {:?}, out {}", b.shape(), dout)));
        }
    }
    let rows = x.value().numel() / din.max(1);
    let mut out = vec![0.0; rows * dout];
    if let Some(b) = bias {
        for r in 0..rows {
            out[r * dout..(r + 1) * dout].copy_from_slice(b.value().data());
        }
    }
    gemm(rows, din, dout, 1.0, x.value().data(), false, weight.value().data(), true, 1.0, &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let out = Tensor::new(shape, out)?;
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Var::from_op(out, inputs, move |ctx| {
        let g = ctx.grad.data();
        let x = ctx.inputs[0].value();
        let w = ctx.inputs[1].value();
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; rows * din];
            gemm(rows, dout, din, 1.0, g, false, w.data(), false, 0.0, &mut dx);
            Tensor::new(x.shape().to_vec(), dx).unwrap()
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![0.0; dout * din];
            gemm(dout, rows, din, 1.0, g, true, x.data(), false, 0.0, &mut dw);
            Tensor::new(vec![dout, din], dw).unwrap()
        });
        let mut grads = vec![dx, dw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs[2].then(|| {
                let mut db = vec![0.0; dout];
                for r in 0..rows {
                    for (acc, v) in db.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                        *acc += v;
                    }
                }
                Tensor::new(vec![dout], db).unwrap()
            }));
        }
        grads
    }))
}

/// Batched matmul `[G, M, K] x [G, K, N]`, or `[G, M, K] x [G, N, K]^T` when
/// `trans_b` is set.
pub fn bmm(a: &Var, b: &Var, trans_b: bool) -> Result<Var> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(shape_err("bmm", format!("{:?} x {:?}", sa, sb)));
    }
    let (g, m, k) = (sa[0], sa[1], sa[2]);
    let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    if kb != k {
        return Err(shape_err("bmm", format!("{:?} x {:?} (trans_b={})", sa, sb, trans_b)));
    }
    let mut out = vec![0.0; g * m * n];
    let (ad, bd) = (a.value().data(), b.value().data());
    for i in 0..g {
        gemm(
            m,
            k,
            n,
            1.0,
            &ad[i * m * k..],
            false,
            &bd[i * k * n..],
            trans_b,
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let out = Tensor::new(vec![g, m, n], out)?;
    Ok(Var::from_op(out, vec![a.clone(), b.clone()], move |ctx| {
        let gd = ctx.grad.data();
        let ad = ctx.inputs[0].value().data();
        let bd = ctx.inputs[1].value().data();
        let da = ctx.needs[0].then(|| {
            // dA = dC B^T  (or dC B when b was transposed)
            let mut da = vec![0.0; g * m * k];
            for i in 0..g {
                gemm(m, n, k, 1.0, &gd[i * m * n..], false, &bd[i * k * n..], !trans_b, 0.0, &mut da[i * m * k..(i + 1) * m * k]);
            }
            Tensor::new(vec![g, m, k], da).unwrap()
        });
        let db = ctx.needs[1].then(|| {
            let mut db = vec![0.0; g * k * n];
            for i in 0..g {
                let dst = &mut db[i * k * n..(i + 1) * k * n];
                if trans_b {
                    // B is [N, K]: dB = dC^T A
                    gemm(n, m, k, 1.0, &gd[i * m * n..], true, &ad[i * m * k..], false, 0.0, dst);
                } else {
                    gemm(k, m, n, 1.0, &ad[i * m * k..], true, &gd[i * m * n..], false, 0.0, dst);
                }
            }
            Tensor::new(ctx.inputs[1].shape().to_vec(), db).unwrap()
        });
        vec![da, db]
    }))
}

// ------------------------------------------------------------------- norms

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    let d = *x.shape().last().ok_or_else(|| shape_err("layer_norm", "rank-0 input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err("layer_norm", format!("dim {} vs gamma {:?}", d, gamma.shape())));
    }
    let rows = x.value().numel() / d.max(1);
    let xd = x.value().data();
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for k in 0..d {
            let h = (row[k] - mu) * is;
            xhat[r * d + k] = h;
            out[r * d + k] = h * gd[k] + bd[k];
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    Ok(Var::from_op(out, vec![x.clone(), gamma.clone(), beta.clone()], move |ctx| {
        let g = ctx.grad.data();
        let gamma = ctx.inputs[1].value().data();
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; rows * d];
            for r in 0..rows {
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for k in 0..d {
                    let gh = g[r * d + k] * gamma[k];
                    s1 += gh;
                    s2 += gh * xhat[r * d + k];
                }
                let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                for k in 0..d {
                    let gh = g[r * d + k] * gamma[k];
                    dx[r * d + k] = inv_std[r] * (gh - m1 - xhat[r * d + k] * m2);
                }
            }
            Tensor::new(ctx.inputs[0].shape().to_vec(), dx).unwrap()
        });
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        for r in 0..rows {
            for k in 0..d {
                dg[k] += g[r * d + k] * xhat[r * d + k];
                db[k] += g[r * d + k];
            }
        }
        vec![
            dx,
            ctx.needs[1].then(|| Tensor::new(vec![d], dg).unwrap()),
            ctx.needs[2].then(|| Tensor::new(vec![d], db).unwrap()),
        ]
    }))
}

/// Softmax over the last axis.
pub fn softmax(x: &Var) -> Result<Var> {
    masked_softmax(x, |_, _| true)
}

/// Softmax over the last axis where entries with `allowed(row, col) == false`
/// get zero probability. `row` is the flat row index, `col` the position in
/// the row. Every row must keep at least one allowed entry.
pub fn masked_softmax(x: &Var, allowed: impl Fn(usize, usize) -> bool) -> Result<Var> {
    let n = *x.shape().last().ok_or_else(|| shape_err("softmax", "rank-0 input"))?;
    let rows = x.value().numel() / n.max(1);
    let xd = x.value().data();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let row = &xd[r * n..(r + 1) * n];
        let mut mx = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if allowed(r, c) && v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(shape_err("masked_softmax", format!("row {} fully masked", r)));
        }
        let mut z = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if allowed(r, c) {
                let e = (v - mx).exp();
                out[r * n + c] = e;
                z += e;
            }
        }
        for v in &mut out[r * n..(r + 1) * n] {
            *v /= z;
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    Ok(Var::from_op(out, vec![x.clone()], move |ctx| {
        let y = ctx.output.data();
        let g = ctx.grad.data();
        let mut dx = vec![0.0; rows * n];
        for r in 0..rows {
            let dot: f64 = (0..n).map(|c| y[r * n + c] * g[r * n + c]).sum();
            for c in 0..n {
                dx[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), dx).unwrap())]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn permute_matches_index_formula() {
        let t = Tensor::from_fn(vec![2, 3, 4], |i| i as f64);
        let p = permute_tensor(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), t.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Var::constant(Tensor::randn(vec![7, 11], 3.0, &mut rng));
        let y = softmax(&x).unwrap();
        for r in 0..7 {
            let s: f64 = y.value().data()[r * 11..(r + 1) * 11].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Var::constant(Tensor::randn(vec![5, 32], 4.0, &mut rng).map(|v| v + 3.0));
        let g = Var::constant(Tensor::full(vec![32], 1.0));
        let b = Var::constant(Tensor::zeros(vec![32]));
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        for r in 0..5 {
            let row = &y.value().data()[r * 32..(r + 1) * 32];
            let mu = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 32.0;
            assert!(mu.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Var::constant(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let b = Var::constant(Tensor::from_fn(vec![2, 1, 2], |i| 100.0 + i as f64));
        let c = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2]);
        assert_eq!(slice(&c, 1, 0, 3).unwrap().value(), a.value());
        assert_eq!(slice(&c, 1, 3, 4).unwrap().value(), b.value());
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = Var::constant(Tensor::zeros(vec![2, 3]));
        let b = Var::constant(Tensor::zeros(vec![3, 2]));
        assert!(add(&a, &b).is_err());
        assert!(linear(&a, &b, None).is_err());
        assert!(permute(&a, &[0, 0]).is_err());
    }
}
