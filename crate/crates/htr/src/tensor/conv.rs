//! Spatial ops: convolution, max-pooling, batch normalization.
//!
//! Convolution uses the cross-correlation convention (no kernel flip) and is
//! computed per sample via im2col + matmul.

use std::rc::Rc;

use crate::error::{HtrError, Result};
use crate::parallel;

use super::ops::{mm, mm_tn};
use super::{Element, Grads, Tensor};

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|d| d / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let ckk = c * kh * kw;
    let _ = oh;
    let mut col = vec![E::zero(); oh * ow * ckk];
    parallel::for_each_chunk(&mut col, ckk, |p, row| {
        let (oy, ox) = (p / ow, p % ow);
        let mut idx = 0;
        for ci in 0..c {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        row[idx] = x[(ci * h + iy as usize) * w + ix as usize];
                    }
                    idx += 1;
                }
            }
        }
    });
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_accum<E: Element>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    _oh: usize,
    ow: usize,
    out: &mut [E],
) {
    let ckk = c * kh * kw;
    for (p, row) in col.chunks(ckk).enumerate() {
        let (oy, ox) = (p / ow, p % ow);
        let mut idx = 0;
        for ci in 0..c {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let o = (ci * h + iy as usize) * w + ix as usize;
                        out[o] = out[o] + row[idx];
                    }
                    idx += 1;
                }
            }
        }
    }
}

/// 2-D cross-correlation of `input [N,C,H,W]` with `weight [F,C,kh,kw]`,
/// zero padding, optional per-filter bias.
pub fn conv2d<'t, E: Element>(
    input: Tensor<'t, E>,
    weight: Tensor<'t, E>,
    bias: Option<Tensor<'t, E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<'t, E>> {
    let xs = input.shape();
    let ws = weight.shape();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(HtrError::Dimension(format!("conv2d: input {xs:?} vs weight {ws:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
    if let Some(b) = &bias {
        if b.shape() != [f] {
            return Err(HtrError::Dimension(format!(
                "conv2d: bias {:?} vs {f} filters",
                b.shape()
            )));
        }
    }
    let (oh, ow) = match (conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kw, stride, pad))
    {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(HtrError::Dimension(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} yields no output on {h}x{w}"
            )))
        }
    };
    let ckk = c * kh * kw;
    let p = oh * ow;
    let (xd, wd) = (input.data(), weight.data());
    let bd = bias.map(|b| b.data());

    let mut out = vec![E::zero(); n * f * p];
    let mut cols: Vec<Vec<E>> = Vec::with_capacity(n);
    for s in 0..n {
        let col = im2col(&xd[s * c * h * w..(s + 1) * c * h * w], c, h, w, kh, kw, stride, pad, oh, ow);
        // [P, F] = col [P, CKK] * weight [F, CKK]^T
        let prod = super::ops::mm_nt(&col, p, ckk, &wd, f);
        let dst = &mut out[s * f * p..(s + 1) * f * p];
        for (pi, row) in prod.chunks(f).enumerate() {
            for (fi, &v) in row.iter().enumerate() {
                dst[fi * p + pi] = v;
            }
        }
        if let Some(bd) = &bd {
            for fi in 0..f {
                let bv = bd[fi];
                for o in dst[fi * p..(fi + 1) * p].iter_mut() {
                    *o = *o + bv;
                }
            }
        }
        cols.push(col);
    }

    let breq = bias.map(|b| (b.id, b.requires_grad()));
    let req = input.requires_grad()
        || weight.requires_grad()
        || breq.map_or(false, |(_, r)| r);
    let back = req.then(|| {
        let (xid, wid) = (input.id, weight.id);
        let (xreq, wreq) = (input.requires_grad(), weight.requires_grad());
        let wd = Rc::clone(&wd);
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            let mut dw = vec![E::zero(); f * ckk];
            let mut dx = vec![E::zero(); n * c * h * w];
            let mut db = vec![E::zero(); f];
            for s in 0..n {
                let gs = &g[s * f * p..(s + 1) * f * p];
                // transpose to [P, F]
                let mut gt = vec![E::zero(); p * f];
                for fi in 0..f {
                    for pi in 0..p {
                        gt[pi * f + fi] = gs[fi * p + pi];
                    }
                }
                if wreq {
                    let d = mm_tn(&gt, p, f, &cols[s], ckk);
                    for (o, v) in dw.iter_mut().zip(d) {
                        *o = *o + v;
                    }
                }
                if xreq {
                    let dcol = mm(&gt, p, f, &wd, ckk);
                    col2im_accum(
                        &dcol,
                        c,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                        &mut dx[s * c * h * w..(s + 1) * c * h * w],
                    );
                }
                if breq.map_or(false, |(_, r)| r) {
                    for fi in 0..f {
                        db[fi] = db[fi] + gs[fi * p..(fi + 1) * p].iter().copied().sum::<E>();
                    }
                }
            }
            if wreq {
                grads.add(wid, dw);
            }
            if xreq {
                grads.add(xid, dx);
            }
            if let Some((bid, true)) = breq {
                grads.add(bid, db);
            }
        }) as super::BackFn<E>
    });
    Ok(input.tape.record(out, vec![n, f, oh, ow], req, back))
}

/// Windowed maximum; backward routes to the first argmax in row-major
/// window order.
pub fn maxpool2d<E: Element>(
    input: Tensor<E>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let xs = input.shape();
    if xs.len() != 4 {
        return Err(HtrError::Dimension(format!("maxpool2d: expected [N,C,H,W], got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if pad >= k {
        return Err(HtrError::Contract(format!("maxpool2d: pad {pad} must be < window {k}")));
    }
    let (oh, ow) = match (conv_out_extent(h, k, stride, pad), conv_out_extent(w, k, stride, pad)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(HtrError::Dimension(format!(
                "maxpool2d: window {k} stride {stride} pad {pad} yields no output on {h}x{w}"
            )))
        }
    };
    let xd = input.data();
    let planes = n * c;
    let p = oh * ow;
    let mut out = vec![E::zero(); planes * p];
    let mut argmax = vec![0usize; planes * p];
    for pl in 0..planes {
        let plane = &xd[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = E::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                out[pl * p + oy * ow + ox] = best;
                argmax[pl * p + oy * ow + ox] = best_i;
            }
        }
    }
    let req = input.requires_grad();
    let back = req.then(|| {
        let xid = input.id;
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            let buf = grads.buf(xid, planes * h * w);
            for pl in 0..planes {
                for (i, &gv) in g[pl * p..(pl + 1) * p].iter().enumerate() {
                    let a = pl * h * w + argmax[pl * p + i];
                    buf[a] = buf[a] + gv;
                }
            }
        }) as super::BackFn<E>
    });
    Ok(input.tape.record(out, vec![n, c, oh, ow], req, back))
}

/// Per-channel running statistics for batch normalization.
#[derive(Clone, Debug)]
pub struct BnStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Element> BnStats<E> {
    pub fn identity(channels: usize) -> Self {
        BnStats { mean: vec![E::zero(); channels], var: vec![E::one(); channels] }
    }
}

/// Train mode normalizes with batch statistics and returns updated running
/// stats (exponential moving average with `momentum`); eval mode uses the
/// running stats as-is and returns `None`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<'t, E: Element>(
    x: Tensor<'t, E>,
    gamma: Tensor<'t, E>,
    beta: Tensor<'t, E>,
    running: &BnStats<E>,
    train: bool,
    momentum: E,
    eps: E,
) -> Result<(Tensor<'t, E>, Option<BnStats<E>>)> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(HtrError::Dimension(format!("batchnorm2d: expected [N,C,H,W], got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if gamma.shape() != [c] || beta.shape() != [c] || running.mean.len() != c {
        return Err(HtrError::Dimension(format!(
            "batchnorm2d: {c} channels vs gamma {:?} beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= E::zero() {
        return Err(HtrError::Contract("batchnorm2d: eps must be positive".into()));
    }
    let hw = h * w;
    let m = n * hw;
    if train && m < 2 {
        return Err(HtrError::DegenerateStats(format!(
            "batchnorm2d train mode needs >= 2 elements per channel, got {m}"
        )));
    }
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let minv = E::from_f64(1.0 / m as f64);

    let (mean, var) = if train {
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        for ci in 0..c {
            let mut s = E::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                s = s + xd[base..base + hw].iter().copied().sum::<E>();
            }
            let mu = s * minv;
            let mut v = E::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                v = v + xd[base..base + hw].iter().map(|&x| (x - mu) * (x - mu)).sum::<E>();
            }
            mean[ci] = mu;
            var[ci] = v * minv;
        }
        (mean, var)
    } else {
        (running.mean.clone(), running.var.clone())
    };

    let inv_std: Vec<E> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut out = vec![E::zero(); xd.len()];
    let mut xhat = vec![E::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                let hhat = (xd[base + i] - mean[ci]) * inv_std[ci];
                xhat[base + i] = hhat;
                out[base + i] = gd[ci] * hhat + bd[ci];
            }
        }
    }

    let new_running = train.then(|| {
        let one_m = E::one() - momentum;
        BnStats {
            mean: running
                .mean
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| one_m * r + momentum * b)
                .collect(),
            var: running
                .var
                .iter()
                .zip(&var)
                .map(|(&r, &b)| one_m * r + momentum * b)
                .collect(),
        }
    });

    let req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let back = req.then(|| {
        let (xid, gid, bid) = (x.id, gamma.id, beta.id);
        let (xreq, greq, breq) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
        let gd = Rc::clone(&gd);
        Box::new(move |g: &[E], grads: &mut Grads<E>| {
            if greq || breq {
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dgamma[ci] = dgamma[ci] + g[base + i] * xhat[base + i];
                            dbeta[ci] = dbeta[ci] + g[base + i];
                        }
                    }
                }
                if greq {
                    grads.add(gid, dgamma);
                }
                if breq {
                    grads.add(bid, dbeta);
                }
            }
            if xreq {
                let mut gin = vec![E::zero(); xhat.len()];
                if train {
                    for ci in 0..c {
                        let mut sum_g = E::zero();
                        let mut sum_gx = E::zero();
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                sum_g = sum_g + g[base + i];
                                sum_gx = sum_gx + g[base + i] * xhat[base + i];
                            }
                        }
                        let mean_g = sum_g * minv;
                        let mean_gx = sum_gx * minv;
                        let a = gd[ci] * inv_std[ci];
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                gin[base + i] =
                                    a * (g[base + i] - mean_g - xhat[base + i] * mean_gx);
                            }
                        }
                    }
                } else {
                    for ni in 0..n {
                        for ci in 0..c {
                            let a = gd[ci] * inv_std[ci];
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                gin[base + i] = a * g[base + i];
                            }
                        }
                    }
                }
                grads.add(xid, gin);
            }
        }) as super::BackFn<E>
    });
    Ok((x.tape.record(out, xs, req, back), new_running))
}
