//! Differentiable operations on tape tensors.
//!
//! Shapes must match exactly; the only broadcasts are bias-add and
//! scalar-scale. Every op records its backward rule when an input
//! requires grad.

use std::rc::Rc;

use crate::error::{HtrError, Result};
use crate::parallel;

use super::{Element, Grads, Tensor};

fn dim_err(msg: String) -> HtrError {
    HtrError::Dimension(msg)
}

// ---- raw matmul kernels (also used by conv) ----

/// C[m,n] = A[m,k] * B[k,n]
pub(crate) fn mm<E: Element>(a: &[E], m: usize, k: usize, b: &[E], n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    parallel::for_each_chunk(&mut out, n, |i, row| {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == E::zero() {
                continue;
            }
            let brow = &b[l * n..l * n + n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + ail * bv;
            }
        }
    });
    out
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub(crate) fn mm_nt<E: Element>(a: &[E], m: usize, k: usize, b: &[E], n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    parallel::for_each_chunk(&mut out, n, |i, row| {
        let arow = &a[i * k..i * k + k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..j * k + k];
            *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    });
    out
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub(crate) fn mm_tn<E: Element>(a: &[E], k: usize, m: usize, b: &[E], n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    parallel::for_each_chunk(&mut out, n, |i, row| {
        for l in 0..k {
            let ali = a[l * m + i];
            if ali == E::zero() {
                continue;
            }
            let brow = &b[l * n..l * n + n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + ali * bv;
            }
        }
    });
    out
}

// ---- elementwise and structural ops ----

pub fn add<'t, E: Element>(a: Tensor<'t, E>, b: Tensor<'t, E>) -> Result<Tensor<'t, E>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash != bsh {
        return Err(dim_err(format!("add: shape {ash:?} vs {bsh:?}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let out: Vec<E> = ad.iter().zip(bd.iter()).map(|(&x, &y)| x + y).collect();
    let req = a.requires_grad() || b.requires_grad();
    let back = req.then(|| {
        let (aid, bid) = (a.id, b.id);
        let (areq, breq) = (a.requires_grad(), b.requires_grad());
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            if areq {
                grads.add(aid, g.to_vec());
            }
            if breq {
                grads.add(bid, g.to_vec());
            }
        }) as super::BackFn<E>
    });
    Ok(a.tape.record(out, ash, req, back))
}

pub fn mul<'t, E: Element>(a: Tensor<'t, E>, b: Tensor<'t, E>) -> Result<Tensor<'t, E>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash != bsh {
        return Err(dim_err(format!("mul: shape {ash:?} vs {bsh:?}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let out: Vec<E> = ad.iter().zip(bd.iter()).map(|(&x, &y)| x * y).collect();
    let req = a.requires_grad() || b.requires_grad();
    let back = req.then(|| {
        let (aid, bid) = (a.id, b.id);
        let (areq, breq) = (a.requires_grad(), b.requires_grad());
        let (ad, bd) = (Rc::clone(&ad), Rc::clone(&bd));
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            if areq {
                grads.add(aid, g.iter().zip(bd.iter()).map(|(&gv, &y)| gv * y).collect());
            }
            if breq {
                grads.add(bid, g.iter().zip(ad.iter()).map(|(&gv, &x)| gv * x).collect());
            }
        }) as super::BackFn<E>
    });
    Ok(a.tape.record(out, ash, req, back))
}

pub fn scale<E: Element>(a: Tensor<E>, c: E) -> Tensor<E> {
    let ad = a.data();
    let out: Vec<E> = ad.iter().map(|&x| x * c).collect();
    let req = a.requires_grad();
    let back = req.then(|| {
        let aid = a.id;
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            grads.add(aid, g.iter().map(|&gv| gv * c).collect());
        }) as super::BackFn<E>
    });
    a.tape.record(out, a.shape(), req, back)
}

pub fn add_scalar<E: Element>(a: Tensor<E>, c: E) -> Tensor<E> {
    let ad = a.data();
    let out: Vec<E> = ad.iter().map(|&x| x + c).collect();
    let req = a.requires_grad();
    let back = req.then(|| {
        let aid = a.id;
        Box::new(move |g: &[E], grads: &mut Grads<E>| grads.add(aid, g.to_vec()))
            as super::BackFn<E>
    });
    a.tape.record(out, a.shape(), req, back)
}

/// x[..., d] + b[d], broadcasting the bias over leading axes.
pub fn add_row_bias<'t, E: Element>(x: Tensor<'t, E>, b: Tensor<'t, E>) -> Result<Tensor<'t, E>> {
    let xs = x.shape();
    let bs = b.shape();
    let d = *xs.last().unwrap();
    if bs != [d] {
        return Err(dim_err(format!("add_row_bias: x {xs:?} vs bias {bs:?}")));
    }
    let (xd, bd) = (x.data(), b.data());
    let mut out = xd.as_ref().clone();
    for row in out.chunks_mut(d) {
        for (o, &bv) in row.iter_mut().zip(bd.iter()) {
            *o = *o + bv;
        }
    }
    let req = x.requires_grad() || b.requires_grad();
    let back = req.then(|| {
        let (xid, bid) = (x.id, b.id);
        let (xreq, breq) = (x.requires_grad(), b.requires_grad());
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            if xreq {
                grads.add(xid, g.to_vec());
            }
            if breq {
                let buf = grads.buf(bid, d);
                for row in g.chunks(d) {
                    for (o, &gv) in buf.iter_mut().zip(row) {
                        *o = *o + gv;
                    }
                }
            }
        }) as super::BackFn<E>
    });
    Ok(x.tape.record(out, xs, req, back))
}

pub fn matmul<'t, E: Element>(a: Tensor<'t, E>, b: Tensor<'t, E>) -> Result<Tensor<'t, E>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(dim_err(format!("matmul: {ash:?} x {bsh:?}")));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let (ad, bd) = (a.data(), b.data());
    let out = mm(&ad, m, k, &bd, n);
    let req = a.requires_grad() || b.requires_grad();
    let back = req.then(|| {
        let (aid, bid) = (a.id, b.id);
        let (areq, breq) = (a.requires_grad(), b.requires_grad());
        let (ad, bd) = (Rc::clone(&ad), Rc::clone(&bd));
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            if areq {
                grads.add(aid, mm_nt(g, m, n, &bd, k));
            }
            if breq {
                grads.add(bid, mm_tn(&ad, m, k, g, n));
            }
        }) as super::BackFn<E>
    });
    Ok(a.tape.record(out, vec![m, n], req, back))
}

fn permute_raw<E: Element>(data: &[E], shape: &[usize], perm: &[usize]) -> (Vec<E>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    loop {
        let mut off = 0;
        for (axis, &i) in idx.iter().enumerate() {
            off += i * in_strides[perm[axis]];
        }
        out.push(data[off]);
        let mut axis = rank;
        loop {
            if axis == 0 {
                return (out, out_shape);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Reorder axes; `perm[i]` names the input axis landing at output axis `i`.
pub fn permute<'t, E: Element>(x: Tensor<'t, E>, perm: &[usize]) -> Result<Tensor<'t, E>> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(HtrError::Contract(format!("permute: invalid axes {perm:?} for rank {rank}")));
    }
    let xd = x.data();
    let (out, out_shape) = permute_raw(&xd, &shape, perm);
    let req = x.requires_grad();
    let back = req.then(|| {
        let xid = x.id;
        let mut inv = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let osh = out_shape.clone();
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            let (gin, _) = permute_raw(g, &osh, &inv);
            grads.add(xid, gin);
        }) as super::BackFn<E>
    });
    Ok(x.tape.record(out, out_shape, req, back))
}

pub fn transpose<E: Element>(x: Tensor<E>) -> Result<Tensor<E>> {
    if x.shape().len() != 2 {
        return Err(dim_err(format!("transpose: expected rank 2, got {:?}", x.shape())));
    }
    permute(x, &[1, 0])
}

pub fn reshape<'t, E: Element>(x: Tensor<'t, E>, shape: &[usize]) -> Result<Tensor<'t, E>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() || shape.iter().any(|&d| d == 0) {
        return Err(dim_err(format!("reshape: {:?} -> {shape:?}", x.shape())));
    }
    let out = x.data().as_ref().clone();
    let req = x.requires_grad();
    let back = req.then(|| {
        let xid = x.id;
        Box::new(move |g: &[E], grads: &mut Grads<E>| grads.add(xid, g.to_vec()))
            as super::BackFn<E>
    });
    Ok(x.tape.record(out, shape.to_vec(), req, back))
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat<'t, E: Element>(parts: &[Tensor<'t, E>], axis: usize) -> Result<Tensor<'t, E>> {
    if parts.is_empty() {
        return Err(HtrError::Contract("concat: empty input list".into()));
    }
    let first = parts[0].shape();
    let rank = first.len();
    if axis >= rank {
        return Err(HtrError::Contract(format!("concat: axis {axis} out of rank {rank}")));
    }
    let mut axis_total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != rank
            || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
        {
            return Err(dim_err(format!("concat: {s:?} incompatible with {first:?} on axis {axis}")));
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();

    let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let out_row = axis_total * inner;
    let mut out = vec![E::zero(); outer * out_row];
    for o in 0..outer {
        let mut off = 0;
        for (d, &w) in datas.iter().zip(&widths) {
            out[o * out_row + off..o * out_row + off + w].copy_from_slice(&d[o * w..(o + 1) * w]);
            off += w;
        }
    }
    let req = parts.iter().any(|p| p.requires_grad());
    let back = req.then(|| {
        let meta: Vec<(usize, bool, usize)> =
            parts.iter().zip(&widths).map(|(p, &w)| (p.id, p.requires_grad(), w)).collect();
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            let mut off = 0;
            for &(id, preq, w) in &meta {
                if preq {
                    let mut gin = vec![E::zero(); outer * w];
                    for o in 0..outer {
                        gin[o * w..(o + 1) * w]
                            .copy_from_slice(&g[o * out_row + off..o * out_row + off + w]);
                    }
                    grads.add(id, gin);
                }
                off += w;
            }
        }) as super::BackFn<E>
    });
    Ok(parts[0].tape.record(out, out_shape, req, back))
}

/// Columns `[start, start+len)` of a 2-D tensor.
pub fn slice_cols<E: Element>(x: Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 || start + len > s[1] || len == 0 {
        return Err(dim_err(format!("slice_cols: [{start}, {start}+{len}) of {s:?}")));
    }
    let (r, c) = (s[0], s[1]);
    let xd = x.data();
    let mut out = Vec::with_capacity(r * len);
    for i in 0..r {
        out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
    }
    let req = x.requires_grad();
    let back = req.then(|| {
        let xid = x.id;
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            let buf = grads.buf(xid, r * c);
            for i in 0..r {
                for j in 0..len {
                    buf[i * c + start + j] = buf[i * c + start + j] + g[i * len + j];
                }
            }
        }) as super::BackFn<E>
    });
    Ok(x.tape.record(out, vec![r, len], req, back))
}

/// Slice `x[n]` along the leading axis, dropping that axis.
pub fn index_axis0<E: Element>(x: Tensor<E>, n: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() < 2 || n >= s[0] {
        return Err(dim_err(format!("index_axis0: index {n} of {s:?}")));
    }
    let inner: usize = s[1..].iter().product();
    let xd = x.data();
    let out = xd[n * inner..(n + 1) * inner].to_vec();
    let req = x.requires_grad();
    let total = xd.len();
    let back = req.then(|| {
        let xid = x.id;
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            let buf = grads.buf(xid, total);
            for (o, &gv) in buf[n * inner..(n + 1) * inner].iter_mut().zip(g) {
                *o = *o + gv;
            }
        }) as super::BackFn<E>
    });
    Ok(x.tape.record(out, s[1..].to_vec(), req, back))
}

pub fn relu<E: Element>(x: Tensor<E>) -> Tensor<E> {
    let xd = x.data();
    let out: Vec<E> = xd.iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect();
    let req = x.requires_grad();
    let back = req.then(|| {
        let xid = x.id;
        let xd = Rc::clone(&xd);
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            grads.add(
                xid,
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gv, &v)| if v > E::zero() { gv } else { E::zero() })
                    .collect(),
            );
        }) as super::BackFn<E>
    });
    x.tape.record(out, x.shape(), req, back)
}

pub fn sum_all<E: Element>(x: Tensor<E>) -> Tensor<E> {
    let xd = x.data();
    let total: E = xd.iter().copied().sum();
    let req = x.requires_grad();
    let n = xd.len();
    let back = req.then(|| {
        let xid = x.id;
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            grads.add(xid, vec![g[0]; n]);
        }) as super::BackFn<E>
    });
    x.tape.record(vec![total], vec![1], req, back)
}

fn softmax_rows<E: Element>(data: &[E], d: usize, blocked: Option<&[bool]>) -> Vec<E> {
    let mut out = vec![E::zero(); data.len()];
    for (r, (row_in, row_out)) in data.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let is_open = |j: usize| blocked.map_or(true, |b| !b[r * d + j]);
        let mut maxv = E::neg_infinity();
        for (j, &v) in row_in.iter().enumerate() {
            if is_open(j) && v > maxv {
                maxv = v;
            }
        }
        let mut denom = E::zero();
        for (j, &v) in row_in.iter().enumerate() {
            if is_open(j) {
                let e = (v - maxv).exp();
                row_out[j] = e;
                denom = denom + e;
            }
        }
        for v in row_out.iter_mut() {
            *v = *v / denom;
        }
    }
    out
}

fn softmax_backward<E: Element>(y: &[E], g: &[E], d: usize) -> Vec<E> {
    let mut gin = vec![E::zero(); y.len()];
    for ((yr, gr), or) in y.chunks(d).zip(g.chunks(d)).zip(gin.chunks_mut(d)) {
        let dot: E = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    gin
}

/// Row-wise softmax over the last axis, max-subtracted for stability.
pub fn softmax<E: Element>(x: Tensor<E>) -> Tensor<E> {
    let shape = x.shape();
    let d = *shape.last().unwrap();
    let xd = x.data();
    let out = softmax_rows(&xd, d, None);
    let req = x.requires_grad();
    let back = req.then(|| {
        let xid = x.id;
        let y = out.clone();
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            grads.add(xid, softmax_backward(&y, g, d));
        }) as super::BackFn<E>
    });
    x.tape.record(out, shape, req, back)
}

/// Softmax over a 2-D score matrix with `blocked[r*cols + c] == true`
/// entries excluded; their output weight is exactly zero.
pub fn masked_softmax<'t, E: Element>(x: Tensor<'t, E>, blocked: &[bool]) -> Result<Tensor<'t, E>> {
    let shape = x.shape();
    if shape.len() != 2 || blocked.len() != x.numel() {
        return Err(dim_err(format!(
            "masked_softmax: scores {shape:?} vs mask of {}",
            blocked.len()
        )));
    }
    let d = shape[1];
    for (r, row) in blocked.chunks(d).enumerate() {
        if row.iter().all(|&b| b) {
            return Err(HtrError::FullyBlockedRow { row: r });
        }
    }
    let xd = x.data();
    let out = softmax_rows(&xd, d, Some(blocked));
    let req = x.requires_grad();
    let back = req.then(|| {
        let xid = x.id;
        let y = out.clone();
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            // blocked entries have y == 0, so the softmax rule zeroes them
            grads.add(xid, softmax_backward(&y, g, d));
        }) as super::BackFn<E>
    });
    Ok(x.tape.record(out, shape, req, back))
}

/// Sum of negative log-likelihoods over non-ignored positions, plus the
/// count of such positions. `cross_entropy_masked` divides by the count.
pub fn cross_entropy_masked_sum<'t, E: Element>(
    logits: Tensor<'t, E>,
    targets: &[usize],
    ignore_id: usize,
) -> Result<(Tensor<'t, E>, usize)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(dim_err(format!(
            "cross_entropy: logits {shape:?} vs {} targets",
            targets.len()
        )));
    }
    let v = shape[1];
    if let Some(&bad) = targets.iter().find(|&&t| t >= v && t != ignore_id) {
        return Err(HtrError::Contract(format!("target id {bad} >= vocab size {v}")));
    }
    let count = targets.iter().filter(|&&t| t != ignore_id).count();
    if count == 0 {
        return Err(HtrError::EmptyLoss);
    }
    let ld = logits.data();
    let probs = softmax_rows(&ld, v, None);
    let mut total = E::zero();
    for (row, &t) in probs.chunks(v).zip(targets) {
        if t != ignore_id {
            total = total - row[t].ln();
        }
    }
    let req = logits.requires_grad();
    let back = req.then(|| {
        let lid = logits.id;
        let targets = targets.to_vec();
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            let mut gin = vec![E::zero(); probs.len()];
            for ((row, orow), &t) in probs.chunks(v).zip(gin.chunks_mut(v)).zip(&targets) {
                if t == ignore_id {
                    continue;
                }
                for (j, (o, &p)) in orow.iter_mut().zip(row).enumerate() {
                    let onehot = if j == t { E::one() } else { E::zero() };
                    *o = g[0] * (p - onehot);
                }
            }
            grads.add(lid, gin);
        }) as super::BackFn<E>
    });
    Ok((logits.tape.record(vec![total], vec![1], req, back), count))
}

/// Mean negative log-likelihood over positions whose target is not
/// `ignore_id`.
pub fn cross_entropy_masked<'t, E: Element>(
    logits: Tensor<'t, E>,
    targets: &[usize],
    ignore_id: usize,
) -> Result<Tensor<'t, E>> {
    let (total, count) = cross_entropy_masked_sum(logits, targets, ignore_id)?;
    Ok(scale(total, E::one() / E::from_f64(count as f64)))
}

/// Gather rows of `table[V, d]` by token id; gradients scatter back.
pub fn embedding_lookup<'t, E: Element>(
    table: Tensor<'t, E>,
    ids: &[usize],
) -> Result<Tensor<'t, E>> {
    let s = table.shape();
    if s.len() != 2 {
        return Err(dim_err(format!("embedding_lookup: table {s:?}")));
    }
    let (v, d) = (s[0], s[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(HtrError::Contract(format!("token id {bad} >= vocab size {v}")));
    }
    let td = table.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&td[i * d..(i + 1) * d]);
    }
    let req = table.requires_grad();
    let back = req.then(|| {
        let tid = table.id;
        let ids = ids.to_vec();
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            let buf = grads.buf(tid, v * d);
            for (row, &i) in g.chunks(d).zip(&ids) {
                for (o, &gv) in buf[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *o = *o + gv;
                }
            }
        }) as super::BackFn<E>
    });
    Ok(table.tape.record(out, vec![ids.len(), d], req, back))
}

/// Normalize each position over the last axis, then apply `gamma`/`beta`.
pub fn layer_norm<'t, E: Element>(
    x: Tensor<'t, E>,
    gamma: Tensor<'t, E>,
    beta: Tensor<'t, E>,
    eps: E,
) -> Result<Tensor<'t, E>> {
    let shape = x.shape();
    let d = *shape.last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(dim_err(format!(
            "layer_norm: x {shape:?}, gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= E::zero() {
        return Err(HtrError::Contract("layer_norm: eps must be positive".into()));
    }
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let rows = xd.len() / d;
    let dn = E::from_f64(d as f64);
    let mut out = vec![E::zero(); xd.len()];
    let mut xhat = vec![E::zero(); xd.len()];
    let mut inv_std = vec![E::zero(); rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean: E = row.iter().copied().sum::<E>() / dn;
        let var: E = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
        let istd = (var + eps).sqrt().recip();
        inv_std[r] = istd;
        for j in 0..d {
            let h = (row[j] - mean) * istd;
            xhat[r * d + j] = h;
            out[r * d + j] = gd[j] * h + bd[j];
        }
    }
    let req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let back = req.then(|| {
        let (xid, gid, bid) = (x.id, gamma.id, beta.id);
        let (xreq, greq, breq) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
        let gd = Rc::clone(&gd);
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            if xreq {
                let mut gin = vec![E::zero(); xhat.len()];
                for r in 0..rows {
                    let gg: Vec<E> =
                        (0..d).map(|j| g[r * d + j] * gd[j]).collect();
                    let mean_gg: E = gg.iter().copied().sum::<E>() / dn;
                    let mean_ggx: E = (0..d)
                        .map(|j| gg[j] * xhat[r * d + j])
                        .sum::<E>()
                        / dn;
                    for j in 0..d {
                        gin[r * d + j] =
                            (gg[j] - mean_gg - xhat[r * d + j] * mean_ggx) * inv_std[r];
                    }
                }
                grads.add(xid, gin);
            }
            if greq {
                let buf = grads.buf(gid, d);
                for r in 0..rows {
                    for j in 0..d {
                        buf[j] = buf[j] + g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if breq {
                let buf = grads.buf(bid, d);
                for r in 0..rows {
                    for j in 0..d {
                        buf[j] = buf[j] + g[r * d + j];
                    }
                }
            }
        }) as super::BackFn<E>
    });
    Ok(x.tape.record(out, shape, req, back))
}

/// Mean over the spatial axes of `[N, C, H, W]`.
pub fn global_avgpool<E: Element>(x: Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(dim_err(format!("global_avgpool: expected [N,C,H,W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let inv = E::from_f64(1.0 / hw as f64);
    let xd = x.data();
    let mut out = vec![E::zero(); n * c];
    for (o, plane) in out.iter_mut().zip(xd.chunks(hw)) {
        *o = plane.iter().copied().sum::<E>() * inv;
    }
    let req = x.requires_grad();
    let back = req.then(|| {
        let xid = x.id;
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            let mut gin = vec![E::zero(); n * c * hw];
            for (plane, &gv) in gin.chunks_mut(hw).zip(g) {
                plane.fill(gv * inv);
            }
            grads.add(xid, gin);
        }) as super::BackFn<E>
    });
    Ok(x.tape.record(out, vec![n, c], req, back))
}

/// Inverted dropout: keeps with probability `1 - p`, rescaled by
/// `1/(1-p)`. Apply in train mode only.
pub fn dropout<'t, E: Element>(
    x: Tensor<'t, E>,
    p: f64,
    rng: &mut (impl rand::Rng + ?Sized),
) -> Tensor<'t, E> {
    assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
    if p == 0.0 {
        return x;
    }
    let keep = E::from_f64(1.0 / (1.0 - p));
    let xd = x.data();
    let mask: Vec<E> = (0..xd.len())
        .map(|_| if rng.gen::<f64>() < p { E::zero() } else { keep })
        .collect();
    let out: Vec<E> = xd.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    let req = x.requires_grad();
    let back = req.then(|| {
        let xid = x.id;
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            grads.add(xid, g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect());
        }) as super::BackFn<E>
    });
    x.tape.record(out, x.shape(), req, back)
}
