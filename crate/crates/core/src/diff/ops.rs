//! Raw forward and adjoint kernels for the tape ops. Everything is f64,
//! row-major, shape-checked by the caller-facing dispatch in `mod.rs`.

use crate::array::Array;
use crate::error::{HctError, Result};

fn shape_err(op: &str, detail: String) -> HctError {
    HctError::ShapeMismatch { op: op.into(), detail }
}

/// Dimensions of a rank-2 operand under an optional transpose.
fn mat_dims(a: &Array, trans: bool, op: &str) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(shape_err(op, format!("expected rank-2 operand, got {:?}", a.shape())));
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    Ok(if trans { (c, r) } else { (r, c) })
}

/// C = op(A) · op(B) with optional transposes.
pub fn matmul(a: &Array, b: &Array, ta: bool, tb: bool) -> Result<Array> {
    let (n, ka) = mat_dims(a, ta, "matmul")?;
    let (kb, m) = mat_dims(b, tb, "matmul")?;
    if ka != kb {
        return Err(shape_err(
            "matmul",
            format!("inner dimensions disagree: {:?} x {:?} (ta={}, tb={})", a.shape(), b.shape(), ta, tb),
        ));
    }
    let k = ka;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; n * m];
    match (ta, tb) {
        (false, false) => {
            for i in 0..n {
                for l in 0..k {
                    let av = ad[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[l * m..(l + 1) * m];
                    let orow = &mut out[i * m..(i + 1) * m];
                    for j in 0..m {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..n {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..m {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += arow[l] * brow[l];
                    }
                    out[i * m + j] = acc;
                }
            }
        }
        (true, false) => {
            for l in 0..k {
                let arow = &ad[l * n..(l + 1) * n];
                let brow = &bd[l * m..(l + 1) * m];
                for i in 0..n {
                    let av = arow[i];
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * m..(i + 1) * m];
                    for j in 0..m {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += ad[l * n + i] * bd[j * k + l];
                    }
                    out[i * m + j] = acc;
                }
            }
        }
    }
    Array::new(vec![n, m], out)
}

/// Gradients of `matmul` with respect to both operands.
pub fn matmul_backward(
    a: &Array,
    b: &Array,
    ta: bool,
    tb: bool,
    g: &Array,
) -> Result<(Array, Array)> {
    let (da, db) = match (ta, tb) {
        (false, false) => (matmul(g, b, false, true)?, matmul(a, g, true, false)?),
        (false, true) => (matmul(g, b, false, false)?, matmul(g, a, true, false)?),
        (true, false) => (matmul(b, g, false, true)?, matmul(a, g, false, false)?),
        (true, true) => (matmul(b, g, true, true)?, matmul(g, a, true, true)?),
    };
    Ok((da, db))
}

/// y = x·W + b, with x rank-1 `[in]` or rank-2 `[n,in]`, W `[in,out]`, b `[out]`.
pub fn affine(x: &Array, w: &Array, b: &Array) -> Result<Array> {
    if w.shape().len() != 2 {
        return Err(shape_err("affine", format!("weight must be rank-2, got {:?}", w.shape())));
    }
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    if b.shape() != [dout] {
        return Err(shape_err("affine", format!("bias shape {:?} does not match output dim {}", b.shape(), dout)));
    }
    let (rows, rank1) = match x.shape() {
        [c] if *c == din => (1usize, true),
        [n, c] if *c == din => (*n, false),
        other => {
            return Err(shape_err("affine", format!("input shape {:?} incompatible with weight {:?}", other, w.shape())));
        }
    };
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![0.0; rows * dout];
    for i in 0..rows {
        let orow = &mut out[i * dout..(i + 1) * dout];
        orow.copy_from_slice(bd);
        let xrow = &xd[i * din..(i + 1) * din];
        for (l, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[l * dout..(l + 1) * dout];
            for j in 0..dout {
                orow[j] += xv * wrow[j];
            }
        }
    }
    let shape = if rank1 { vec![dout] } else { vec![rows, dout] };
    Array::new(shape, out)
}

pub fn affine_backward(x: &Array, w: &Array, g: &Array) -> Result<(Array, Array, Array)> {
    let rank1 = x.shape().len() == 1;
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = if rank1 { 1 } else { x.shape()[0] };
    let x2 = Array::new(vec![rows, din], x.data().to_vec())?;
    let g2 = Array::new(vec![rows, dout], g.data().to_vec())?;
    let dx = matmul(&g2, w, false, true)?;
    let dw = matmul(&x2, &g2, true, false)?;
    let mut db = vec![0.0; dout];
    for i in 0..rows {
        for j in 0..dout {
            db[j] += g2.data()[i * dout + j];
        }
    }
    let dx = if rank1 { dx.reshaped(vec![din])? } else { dx };
    Ok((dx, dw, Array::vector(db)))
}

pub fn concat(axis: usize, inputs: &[&Array]) -> Result<Array> {
    let first = inputs
        .first()
        .ok_or_else(|| HctError::InvalidArgument("concat of zero inputs".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(shape_err("concat", format!("axis {} out of range for rank {}", axis, rank)));
    }
    let mut axis_total = 0usize;
    for a in inputs {
        if a.shape().len() != rank {
            return Err(shape_err("concat", format!("rank mismatch: {:?} vs {:?}", first.shape(), a.shape())));
        }
        for d in 0..rank {
            if d != axis && a.shape()[d] != first.shape()[d] {
                return Err(shape_err(
                    "concat",
                    format!("non-axis dims differ: {:?} vs {:?} at axis {}", first.shape(), a.shape(), d),
                ));
            }
        }
        axis_total += a.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = axis_total;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * axis_total * inner];
    let out_stride = axis_total * inner;
    let mut offset = 0usize;
    for a in inputs {
        let block = a.shape()[axis] * inner;
        for o in 0..outer {
            let src = &a.data()[o * block..(o + 1) * block];
            let dst = &mut out[o * out_stride + offset..o * out_stride + offset + block];
            dst.copy_from_slice(src);
        }
        offset += block;
    }
    Array::new(shape, out)
}

pub fn concat_backward(axis: usize, inputs: &[&Array], g: &Array) -> Vec<Vec<f64>> {
    let rank = inputs[0].shape().len();
    let outer: usize = inputs[0].shape()[..axis].iter().product();
    let inner: usize = inputs[0].shape()[axis + 1..].iter().product();
    let total_axis: usize = inputs.iter().map(|a| a.shape()[axis]).sum();
    let _ = rank;
    let out_stride = total_axis * inner;
    let mut grads = Vec::with_capacity(inputs.len());
    let mut offset = 0usize;
    for a in inputs {
        let block = a.shape()[axis] * inner;
        let mut da = vec![0.0; a.len()];
        for o in 0..outer {
            let src = &g.data()[o * out_stride + offset..o * out_stride + offset + block];
            da[o * block..(o + 1) * block].copy_from_slice(src);
        }
        grads.push(da);
        offset += block;
    }
    grads
}

pub fn mean_pool(axis: usize, x: &Array) -> Result<Array> {
    let rank = x.shape().len();
    if axis >= rank {
        return Err(shape_err("mean-pool", format!("axis {} out of range for rank {}", axis, rank)));
    }
    let n = x.shape()[axis];
    if n == 0 {
        return Err(shape_err("mean-pool", "cannot pool an empty axis".into()));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    let inv = 1.0 / n as f64;
    for o in 0..outer {
        for j in 0..n {
            let base = (o * n + j) * inner;
            for i in 0..inner {
                out[o * inner + i] += x.data()[base + i];
            }
        }
    }
    for v in out.iter_mut() {
        *v *= inv;
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Array::new(shape, out)
}

pub fn mean_pool_backward(axis: usize, x: &Array, g: &Array) -> Vec<f64> {
    let n = x.shape()[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let inv = 1.0 / n as f64;
    let mut dx = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..n {
            let base = (o * n + j) * inner;
            for i in 0..inner {
                dx[base + i] = g.data()[o * inner + i] * inv;
            }
        }
    }
    dx
}

/// Softmax over the last axis, numerically stable.
pub fn softmax_last(x: &Array) -> Result<Array> {
    let rank = x.shape().len();
    if rank == 0 {
        return Err(shape_err("softmax", "needs at least rank 1".into()));
    }
    let c = x.shape()[rank - 1];
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x.data()[r * c..(r + 1) * c];
        let or = &mut out[r * c..(r + 1) * c];
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - m).exp();
            *o = e;
            z += e;
        }
        for o in or.iter_mut() {
            *o /= z;
        }
    }
    Array::new(x.shape().to_vec(), out)
}

pub fn softmax_backward(y: &Array, g: &Array) -> Vec<f64> {
    let rank = y.shape().len();
    let c = y.shape()[rank - 1];
    let rows = y.len() / c;
    let mut dx = vec![0.0; y.len()];
    for r in 0..rows {
        let yr = &y.data()[r * c..(r + 1) * c];
        let gr = &g.data()[r * c..(r + 1) * c];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx[r * c + j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

/// Layer norm over the last axis without learned scale/shift. Returns the
/// normalized output and the per-row inverse standard deviation needed by
/// the adjoint.
pub fn layer_norm_last(x: &Array, eps: f64) -> Result<(Array, Vec<f64>)> {
    let rank = x.shape().len();
    if rank == 0 {
        return Err(shape_err("layer-norm", "needs at least rank 1".into()));
    }
    let c = x.shape()[rank - 1];
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x.data()[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..c {
            out[r * c + j] = (xr[j] - mean) * inv;
        }
    }
    Ok((Array::new(x.shape().to_vec(), out)?, inv_std))
}

pub fn layer_norm_backward(y: &Array, inv_std: &[f64], g: &Array) -> Vec<f64> {
    let rank = y.shape().len();
    let c = y.shape()[rank - 1];
    let rows = y.len() / c;
    let mut dx = vec![0.0; y.len()];
    for r in 0..rows {
        let yr = &y.data()[r * c..(r + 1) * c];
        let gr = &g.data()[r * c..(r + 1) * c];
        let g_mean = gr.iter().sum::<f64>() / c as f64;
        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for j in 0..c {
            dx[r * c + j] = inv_std[r] * (gr[j] - g_mean - yr[j] * gy_mean);
        }
    }
    dx
}

/// Mean cross-entropy from logits. Accepts `[c]` with one label or `[n,c]`
/// with n labels. Returns the loss and the softmax probabilities saved for
/// the adjoint.
pub fn cross_entropy(logits: &Array, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (rows, c) = match logits.shape() {
        [c] => (1usize, *c),
        [n, c] => (*n, *c),
        other => {
            return Err(shape_err("cross-entropy", format!("logits must be rank 1 or 2, got {:?}", other)));
        }
    };
    if labels.len() != rows {
        return Err(shape_err(
            "cross-entropy",
            format!("{} labels for {} logit rows", labels.len(), rows),
        ));
    }
    let mut probs = vec![0.0; rows * c];
    let mut loss = 0.0;
    for r in 0..rows {
        let y = labels[r];
        if y >= c {
            return Err(HctError::InvalidArgument(format!("label {} out of range for {} classes", y, c)));
        }
        let xr = &logits.data()[r * c..(r + 1) * c];
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = xr.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - xr[y];
        for j in 0..c {
            probs[r * c + j] = (xr[j] - m).exp() / z;
        }
    }
    Ok((loss / rows as f64, probs))
}

pub fn cross_entropy_backward(logits: &Array, labels: &[usize], probs: &[f64], g: f64) -> Vec<f64> {
    let rows = labels.len();
    let c = logits.len() / rows;
    let scale = g / rows as f64;
    let mut dx = probs.to_vec();
    for r in 0..rows {
        dx[r * c + labels[r]] -= 1.0;
    }
    for v in dx.iter_mut() {
        *v *= scale;
    }
    dx
}
