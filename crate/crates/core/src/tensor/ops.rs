//! Differentiable op constructors. Each builds the output value eagerly and
//! registers a closure that maps the incoming gradient to parent gradients.
//! Conventions: tensors are row-major, rank <= 2 (a 1-D tensor acts as one
//! row where that makes sense); reductions return shape `[1]`; every
//! gradient is an accumulation, never an overwrite.

use super::{Element, Mask, Tensor};
use crate::error::{data_err, shape_err, Result};

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, parents| {
            parents[0].accumulate_grad(g);
            parents[1].accumulate_grad(g);
        }),
    ))
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x - y)
        .collect();
    Ok(Tensor::from_op(
        "sub",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, parents| {
            parents[0].accumulate_grad(g);
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            parents[1].accumulate_grad(&neg);
        }),
    ))
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, parents| {
            if parents[0].requires_grad() {
                let b = parents[1].data();
                let da: Vec<T> = g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect();
                parents[0].accumulate_grad(&da);
            }
            if parents[1].requires_grad() {
                let a = parents[0].data();
                let db: Vec<T> = g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect();
                parents[1].accumulate_grad(&db);
            }
        }),
    ))
}

pub fn neg<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|&x| -x).collect();
    Tensor::from_op(
        "neg",
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|_, g, parents| {
            let d: Vec<T> = g.iter().map(|&v| -v).collect();
            parents[0].accumulate_grad(&d);
        }),
    )
}

/// Multiply by a compile-time constant.
pub fn scale<T: Element>(a: &Tensor<T>, c: f64) -> Tensor<T> {
    let cv = T::of(c);
    let data = a.data().iter().map(|&x| x * cv).collect();
    Tensor::from_op(
        "scale",
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            let d: Vec<T> = g.iter().map(|&v| v * cv).collect();
            parents[0].accumulate_grad(&d);
        }),
    )
}

/// Multiply every element by a scalar tensor (differentiable in both).
pub fn scale_by<T: Element>(a: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.numel() != 1 {
        return Err(shape_err(format!(
            "scale_by: scale must be scalar, got {:?}",
            s.shape()
        )));
    }
    let sv = s.item();
    let data = a.data().iter().map(|&x| x * sv).collect();
    Ok(Tensor::from_op(
        "scale_by",
        a.shape().to_vec(),
        data,
        vec![a.clone(), s.clone()],
        Box::new(|_, g, parents| {
            let sv = parents[1].item();
            if parents[0].requires_grad() {
                let d: Vec<T> = g.iter().map(|&v| v * sv).collect();
                parents[0].accumulate_grad(&d);
            }
            if parents[1].requires_grad() {
                let a = parents[0].data();
                let mut acc = T::zero();
                for (&gv, &av) in g.iter().zip(a.iter()) {
                    acc = acc + gv * av;
                }
                parents[1].accumulate_grad(&[acc]);
            }
        }),
    ))
}

/// `(r, c) + (c,)` row-broadcast bias.
pub fn add_bias<T: Element>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if b.numel() != c {
        return Err(shape_err(format!(
            "add_bias: bias of {} onto {c} columns",
            b.numel()
        )));
    }
    let xd = x.data();
    let bd = b.data();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(xd[i * c + j] + bd[j]);
        }
    }
    drop(xd);
    drop(bd);
    Ok(Tensor::from_op(
        "add_bias",
        x.shape().to_vec(),
        data,
        vec![x.clone(), b.clone()],
        Box::new(move |_, g, parents| {
            parents[0].accumulate_grad(g);
            if parents[1].requires_grad() {
                let mut db = vec![T::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] = db[j] + g[i * c + j];
                    }
                }
                parents[1].accumulate_grad(&db);
            }
        }),
    ))
}

fn matmul_raw<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// `a (m, k) x b (k, n) -> (m, n)`. Strictly 2-D; batching is done by the
/// callers, which keep everything as per-sample matrices.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err(format!(
            "matmul: inner dims differ, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = matmul_raw(&a.data(), &b.data(), m, k, n);
    Ok(Tensor::from_op(
        "matmul",
        vec![m, n],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |_, g, parents| {
            if parents[0].requires_grad() {
                // dA = g . B^T
                let b = parents[1].data();
                let mut da = vec![T::zero(); m * k];
                for i in 0..m {
                    for l in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + g[i * n + j] * b[l * n + j];
                        }
                        da[i * k + l] = acc;
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            if parents[1].requires_grad() {
                // dB = A^T . g
                let a = parents[0].data();
                let mut db = vec![T::zero(); k * n];
                for i in 0..m {
                    for l in 0..k {
                        let av = a[i * k + l];
                        if av == T::zero() {
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        let drow = &mut db[l * n..(l + 1) * n];
                        for j in 0..n {
                            drow[j] = drow[j] + av * grow[j];
                        }
                    }
                }
                parents[1].accumulate_grad(&db);
            }
        }),
    ))
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    let ad = a.data();
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = ad[i * c + j];
        }
    }
    drop(ad);
    Ok(Tensor::from_op(
        "transpose",
        vec![c, r],
        data,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            let mut da = vec![T::zero(); r * c];
            for j in 0..c {
                for i in 0..r {
                    da[i * c + j] = g[j * r + i];
                }
            }
            parents[0].accumulate_grad(&da);
        }),
    ))
}

/// Same flat buffer, new shape.
pub fn reshape<T: Element>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() || shape.is_empty() {
        return Err(shape_err(format!(
            "reshape: {:?} -> {:?} changes element count",
            a.shape(),
            shape
        )));
    }
    Ok(Tensor::from_op(
        "reshape",
        shape.to_vec(),
        a.to_vec(),
        vec![a.clone()],
        Box::new(|_, g, parents| {
            parents[0].accumulate_grad(g);
        }),
    ))
}

/// Vertical concatenation of 2-D blocks with equal column counts.
pub fn concat_rows<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(shape_err("concat_rows: no parts"));
    }
    let (_, c) = parts[0].dims2()?;
    let mut rows = 0;
    let mut data = Vec::new();
    let mut spans = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, pc) = p.dims2()?;
        if pc != c {
            return Err(shape_err(format!(
                "concat_rows: column counts differ ({pc} vs {c})"
            )));
        }
        spans.push((rows * c, r * c));
        rows += r;
        data.extend_from_slice(&p.data());
    }
    Ok(Tensor::from_op(
        "concat_rows",
        vec![rows, c],
        data,
        parts.to_vec(),
        Box::new(move |_, g, parents| {
            for (p, &(off, len)) in parents.iter().zip(&spans) {
                p.accumulate_grad(&g[off..off + len]);
            }
        }),
    ))
}

pub fn slice_rows<T: Element>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    if start + len > r {
        return Err(shape_err(format!(
            "slice_rows: rows {start}..{} of a {r}-row tensor",
            start + len
        )));
    }
    let data = a.data()[start * c..(start + len) * c].to_vec();
    Ok(Tensor::from_op(
        "slice_rows",
        vec![len, c],
        data,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            let mut da = vec![T::zero(); r * c];
            da[start * c..(start + len) * c].copy_from_slice(g);
            parents[0].accumulate_grad(&da);
        }),
    ))
}

/// Horizontal concatenation of 2-D blocks with equal row counts.
pub fn concat_cols<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(shape_err("concat_cols: no parts"));
    }
    let (r, _) = parts[0].dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    let mut total = 0;
    for p in parts {
        let (pr, pc) = p.dims2()?;
        if pr != r {
            return Err(shape_err(format!(
                "concat_cols: row counts differ ({pr} vs {r})"
            )));
        }
        widths.push(pc);
        total += pc;
    }
    let mut data = vec![T::zero(); r * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for i in 0..r {
            data[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
        }
        off += w;
    }
    Ok(Tensor::from_op(
        "concat_cols",
        vec![r, total],
        data,
        parts.to_vec(),
        Box::new(move |_, g, parents| {
            let mut off = 0;
            for (p, &w) in parents.iter().zip(&widths) {
                if p.requires_grad() {
                    let mut dp = vec![T::zero(); r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    p.accumulate_grad(&dp);
                }
                off += w;
            }
        }),
    ))
}

pub fn slice_cols<T: Element>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    if start + len > c {
        return Err(shape_err(format!(
            "slice_cols: cols {start}..{} of a {c}-col tensor",
            start + len
        )));
    }
    let ad = a.data();
    let mut data = Vec::with_capacity(r * len);
    for i in 0..r {
        data.extend_from_slice(&ad[i * c + start..i * c + start + len]);
    }
    drop(ad);
    Ok(Tensor::from_op(
        "slice_cols",
        vec![r, len],
        data,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            let mut da = vec![T::zero(); r * c];
            for i in 0..r {
                da[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            parents[0].accumulate_grad(&da);
        }),
    ))
}

/// Embedding lookup: copy `ids` rows out of `table (v, d)`. The gradient
/// scatter-adds, so repeated ids sum their contributions.
pub fn gather_rows<T: Element>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, d) = table.dims2()?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(shape_err(format!(
            "gather_rows: id {bad} out of vocabulary of {v}"
        )));
    }
    let td = table.data();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        data.extend_from_slice(&td[i * d..(i + 1) * d]);
    }
    drop(td);
    let ids_owned: Vec<usize> = ids.to_vec();
    Ok(Tensor::from_op(
        "gather_rows",
        vec![ids.len(), d],
        data,
        vec![table.clone()],
        Box::new(move |_, g, parents| {
            let mut dt = vec![T::zero(); v * d];
            for (row, &i) in ids_owned.iter().enumerate() {
                for j in 0..d {
                    dt[i * d + j] = dt[i * d + j] + g[row * d + j];
                }
            }
            parents[0].accumulate_grad(&dt);
        }),
    ))
}

pub fn sum_all<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.data().iter().fold(T::zero(), |acc, &x| acc + x);
    let n = a.numel();
    Tensor::from_op(
        "sum_all",
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            parents[0].accumulate_grad(&vec![g[0]; n]);
        }),
    )
}

pub fn mean_all<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.numel();
    let inv = T::of(1.0 / n as f64);
    let s = a.data().iter().fold(T::zero(), |acc, &x| acc + x) * inv;
    Tensor::from_op(
        "mean_all",
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            parents[0].accumulate_grad(&vec![g[0] * inv; n]);
        }),
    )
}

/// Column means of a 2-D tensor: `(r, c) -> (1, c)`.
pub fn mean_rows<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    let inv = T::of(1.0 / r as f64);
    let ad = a.data();
    let mut data = vec![T::zero(); c];
    for i in 0..r {
        for j in 0..c {
            data[j] = data[j] + ad[i * c + j];
        }
    }
    for v in data.iter_mut() {
        *v = *v * inv;
    }
    drop(ad);
    Ok(Tensor::from_op(
        "mean_rows",
        vec![1, c],
        data,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            let mut da = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    da[i * c + j] = g[j] * inv;
                }
            }
            parents[0].accumulate_grad(&da);
        }),
    ))
}

/// Maximum element as a scalar; ties resolve to the lowest flat index, and
/// the gradient flows only to that element.
pub fn max_all<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let ad = a.data();
    let mut best = ad[0];
    let mut idx = 0;
    for (i, &v) in ad.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            idx = i;
        }
    }
    drop(ad);
    let n = a.numel();
    Tensor::from_op(
        "max_all",
        vec![1],
        vec![best],
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            let mut da = vec![T::zero(); n];
            da[idx] = g[0];
            parents[0].accumulate_grad(&da);
        }),
    )
}

pub fn exp<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|&x| x.exp()).collect();
    Tensor::from_op(
        "exp",
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|out, g, parents| {
            let d: Vec<T> = g.iter().zip(out.iter()).map(|(&gv, &y)| gv * y).collect();
            parents[0].accumulate_grad(&d);
        }),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let c = T::of(GELU_C);
    let k = T::of(GELU_A);
    let half = T::of(0.5);
    let one = T::one();
    let data: Vec<T> = a
        .data()
        .iter()
        .map(|&x| {
            let u = c * (x + k * x * x * x);
            half * x * (one + u.tanh())
        })
        .collect();
    Tensor::from_op(
        "gelu",
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            let xd = parents[0].data();
            let three_k = k * T::of(3.0);
            let d: Vec<T> = g
                .iter()
                .zip(xd.iter())
                .map(|(&gv, &x)| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (one + three_k * x * x);
                    let dy = half * (one + t) + half * x * (one - t * t) * du;
                    gv * dy
                })
                .collect();
            drop(xd);
            parents[0].accumulate_grad(&d);
        }),
    )
}

/// Row-wise softmax.
pub fn softmax_rows<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    masked_softmax_rows_inner(a, None, r, c)
}

/// Row-wise softmax with positions disallowed by `mask` forced to zero.
/// A fully masked row is an error naming the row.
pub fn masked_softmax_rows<T: Element>(a: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    if mask.rows() != r || mask.cols() != c {
        return Err(shape_err(format!(
            "masked_softmax: mask ({}, {}) against logits ({r}, {c})",
            mask.rows(),
            mask.cols()
        )));
    }
    masked_softmax_rows_inner(a, Some(mask), r, c)
}

fn masked_softmax_rows_inner<T: Element>(
    a: &Tensor<T>,
    mask: Option<&Mask>,
    r: usize,
    c: usize,
) -> Result<Tensor<T>> {
    let ad = a.data();
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        let mut mx: Option<T> = None;
        for j in 0..c {
            if mask.map_or(true, |m| m.get(i, j)) {
                let v = ad[i * c + j];
                mx = Some(match mx {
                    Some(m) if m >= v => m,
                    _ => v,
                });
            }
        }
        let Some(mx) = mx else {
            return Err(shape_err(format!(
                "masked_softmax: row {i} has no allowed positions"
            )));
        };
        let mut denom = T::zero();
        for j in 0..c {
            if mask.map_or(true, |m| m.get(i, j)) {
                let e = (ad[i * c + j] - mx).exp();
                data[i * c + j] = e;
                denom = denom + e;
            }
        }
        for j in 0..c {
            data[i * c + j] = data[i * c + j] / denom;
        }
    }
    drop(ad);
    Ok(Tensor::from_op(
        "masked_softmax",
        vec![r, c],
        data,
        vec![a.clone()],
        Box::new(move |out, g, parents| {
            // dx_ij = y_ij * (g_ij - sum_k g_ik y_ik); masked entries have
            // y = 0 and therefore zero gradient.
            let mut da = vec![T::zero(); r * c];
            for i in 0..r {
                let mut dot = T::zero();
                for j in 0..c {
                    dot = dot + g[i * c + j] * out[i * c + j];
                }
                for j in 0..c {
                    da[i * c + j] = out[i * c + j] * (g[i * c + j] - dot);
                }
            }
            parents[0].accumulate_grad(&da);
        }),
    ))
}

/// Row-wise layer norm with learned gain and bias; biased variance, epsilon
/// inside the square root.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if gain.numel() != c || bias.numel() != c {
        return Err(shape_err(format!(
            "layer_norm: gain {} / bias {} against {c} columns",
            gain.numel(),
            bias.numel()
        )));
    }
    let epsv = T::of(eps);
    let invc = T::of(1.0 / c as f64);
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut data = vec![T::zero(); r * c];
    let mut mus = vec![T::zero(); r];
    let mut rstds = vec![T::zero(); r];
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let mu = row.iter().fold(T::zero(), |a, &v| a + v) * invc;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mu) * (v - mu))
            * invc;
        let rstd = T::one() / (var + epsv).sqrt();
        mus[i] = mu;
        rstds[i] = rstd;
        for j in 0..c {
            data[i * c + j] = (row[j] - mu) * rstd * gd[j] + bd[j];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    Ok(Tensor::from_op(
        "layer_norm",
        x.shape().to_vec(),
        data,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |_, g, parents| {
            let xd = parents[0].data();
            let gd = parents[1].data();
            let mut dx = vec![T::zero(); r * c];
            let mut dgain = vec![T::zero(); c];
            let mut dbias = vec![T::zero(); c];
            for i in 0..r {
                let mu = mus[i];
                let rstd = rstds[i];
                let row = &xd[i * c..(i + 1) * c];
                let grow = &g[i * c..(i + 1) * c];
                let mut mean_a = T::zero();
                let mut mean_ax = T::zero();
                for j in 0..c {
                    let xhat = (row[j] - mu) * rstd;
                    let a = grow[j] * gd[j];
                    mean_a = mean_a + a;
                    mean_ax = mean_ax + a * xhat;
                    dgain[j] = dgain[j] + grow[j] * xhat;
                    dbias[j] = dbias[j] + grow[j];
                }
                mean_a = mean_a * invc;
                mean_ax = mean_ax * invc;
                for j in 0..c {
                    let xhat = (row[j] - mu) * rstd;
                    dx[i * c + j] = rstd * (grow[j] * gd[j] - mean_a - xhat * mean_ax);
                }
            }
            drop(xd);
            drop(gd);
            parents[0].accumulate_grad(&dx);
            if parents[1].requires_grad() {
                parents[1].accumulate_grad(&dgain);
            }
            if parents[2].requires_grad() {
                parents[2].accumulate_grad(&dbias);
            }
        }),
    ))
}

/// Row-wise L2 normalization. Norms are clamped below at 1e-12, so an
/// all-zero row maps to an all-zero row.
pub fn l2_normalize_rows<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let floor = T::of(1e-12);
    let xd = x.data();
    let mut data = vec![T::zero(); r * c];
    let mut norms = vec![T::zero(); r];
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let n = row
            .iter()
            .fold(T::zero(), |a, &v| a + v * v)
            .sqrt()
            .max(floor);
        norms[i] = n;
        for j in 0..c {
            data[i * c + j] = row[j] / n;
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        "l2_normalize_rows",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |out, g, parents| {
            // dx = (g - y (g . y)) / ||x|| per row
            let mut dx = vec![T::zero(); r * c];
            for i in 0..r {
                let y = &out[i * c..(i + 1) * c];
                let grow = &g[i * c..(i + 1) * c];
                let mut dot = T::zero();
                for j in 0..c {
                    dot = dot + grow[j] * y[j];
                }
                for j in 0..c {
                    dx[i * c + j] = (grow[j] - y[j] * dot) / norms[i];
                }
            }
            parents[0].accumulate_grad(&dx);
        }),
    ))
}

fn check_simplex_rows<T: Element>(op: &str, t: &Tensor<T>, r: usize, c: usize) -> Result<()> {
    let d = t.data();
    for i in 0..r {
        let mut s = 0.0f64;
        for j in 0..c {
            let v = d[i * c + j].as_f64();
            if v < -1e-9 {
                return Err(data_err(format!("{op}: target row {i} has negative mass {v}")));
            }
            s += v;
        }
        if (s - 1.0).abs() > 1e-6 {
            return Err(data_err(format!("{op}: target row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Mean over rows of softmax cross-entropy against soft target rows.
/// Numerically stable via log-sum-exp; targets must lie on the simplex.
pub fn cross_entropy_with_logits<T: Element>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape("cross_entropy_with_logits", logits, targets)?;
    let (r, c) = logits.dims2()?;
    check_simplex_rows("cross_entropy_with_logits", targets, r, c)?;
    let xd = logits.data();
    let yd = targets.data();
    let mut probs = vec![T::zero(); r * c];
    let mut total = T::zero();
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let mx = row.iter().fold(row[0], |a, &v| if v > a { v } else { a });
        let mut denom = T::zero();
        for j in 0..c {
            let e = (row[j] - mx).exp();
            probs[i * c + j] = e;
            denom = denom + e;
        }
        let lse = mx + denom.ln();
        let mut dot = T::zero();
        for j in 0..c {
            probs[i * c + j] = probs[i * c + j] / denom;
            dot = dot + yd[i * c + j] * row[j];
        }
        total = total + lse - dot;
    }
    drop(xd);
    drop(yd);
    let invr = T::of(1.0 / r as f64);
    let loss = total * invr;
    Ok(Tensor::from_op(
        "cross_entropy_with_logits",
        vec![1],
        vec![loss],
        vec![logits.clone(), targets.clone()],
        Box::new(move |_, g, parents| {
            let scale = g[0] * invr;
            if parents[0].requires_grad() {
                let yd = parents[1].data();
                let d: Vec<T> = probs
                    .iter()
                    .zip(yd.iter())
                    .map(|(&p, &y)| (p - y) * scale)
                    .collect();
                drop(yd);
                parents[0].accumulate_grad(&d);
            }
            if parents[1].requires_grad() {
                let xd = parents[0].data();
                let d: Vec<T> = xd.iter().map(|&x| -x * scale).collect();
                drop(xd);
                parents[1].accumulate_grad(&d);
            }
        }),
    ))
}

/// Mean over rows of `-sum_j y_j ln p_j` on probabilities directly. Terms
/// with `y_j == 0` are skipped, so a perfect one-hot prediction is exactly
/// zero loss. A zero probability on a supported class is a data error.
pub fn cross_entropy_with_probs<T: Element>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape("cross_entropy_with_probs", probs, targets)?;
    let (r, c) = probs.dims2()?;
    check_simplex_rows("cross_entropy_with_probs", targets, r, c)?;
    let pd = probs.data();
    let yd = targets.data();
    let mut total = T::zero();
    for i in 0..r {
        for j in 0..c {
            let y = yd[i * c + j];
            if y == T::zero() {
                continue;
            }
            let p = pd[i * c + j];
            if p <= T::zero() {
                return Err(data_err(format!(
                    "cross_entropy_with_probs: zero probability on supported class ({i}, {j})"
                )));
            }
            total = total - y * p.ln();
        }
    }
    drop(pd);
    drop(yd);
    let invr = T::of(1.0 / r as f64);
    let loss = total * invr;
    Ok(Tensor::from_op(
        "cross_entropy_with_probs",
        vec![1],
        vec![loss],
        vec![probs.clone(), targets.clone()],
        Box::new(move |_, g, parents| {
            let scale = g[0] * invr;
            if parents[0].requires_grad() {
                let pd = parents[0].data();
                let yd = parents[1].data();
                let d: Vec<T> = pd
                    .iter()
                    .zip(yd.iter())
                    .map(|(&p, &y)| {
                        if y == T::zero() {
                            T::zero()
                        } else {
                            -(y / p) * scale
                        }
                    })
                    .collect();
                drop(pd);
                drop(yd);
                parents[0].accumulate_grad(&d);
            }
        }),
    ))
}

/// Assemble a 2-D tensor out of scalar cells (row-major order). Used to
/// build similarity matrices whose entries come from independent subgraphs.
pub fn from_cells<T: Element>(rows: usize, cols: usize, cells: &[Tensor<T>]) -> Result<Tensor<T>> {
    if cells.len() != rows * cols {
        return Err(shape_err(format!(
            "from_cells: {} cells for a ({rows}, {cols}) tensor",
            cells.len()
        )));
    }
    let mut data = Vec::with_capacity(cells.len());
    for cell in cells {
        if cell.numel() != 1 {
            return Err(shape_err(format!(
                "from_cells: cell of shape {:?} is not scalar",
                cell.shape()
            )));
        }
        data.push(cell.item());
    }
    Ok(Tensor::from_op(
        "from_cells",
        vec![rows, cols],
        data,
        cells.to_vec(),
        Box::new(|_, g, parents| {
            for (cell, &gv) in parents.iter().zip(g.iter()) {
                cell.accumulate_grad(&[gv]);
            }
        }),
    ))
}

/// Index of the largest value in one row; ties resolve to the lowest index.
pub fn argmax_row<T: Element>(t: &Tensor<T>, row: usize) -> Result<usize> {
    let (r, c) = t.dims2()?;
    if row >= r {
        return Err(shape_err(format!("argmax_row: row {row} of {r}")));
    }
    let d = t.data();
    let slice = &d[row * c..(row + 1) * c];
    let mut best = slice[0];
    let mut idx = 0;
    for (j, &v) in slice.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            idx = j;
        }
    }
    Ok(idx)
}
