//! Encoder-decoder transformer over image-feature memory, emitting
//! character logits.
//!
//! Post-layer-norm arrangement throughout; sinusoidal positional encoding
//! added once at entry on both sides. The decoder self-attends under a
//! causal mask and cross-attends into the (padding-masked) memory.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::codec::{TokenSeq, EOS_ID, SOS_ID};
use crate::error::{HtrError, Result};
use crate::params::{normal_init, xavier_uniform, Binding, ParamStore};
use crate::tensor::ops;
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_target_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 256,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 512,
            dropout: 0.1,
            max_target_len: 128,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(HtrError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(HtrError::Config(format!("d_model {} must be even", self.d_model)));
        }
        if self.max_target_len < 2 {
            return Err(HtrError::Config(format!(
                "max_target_len {} must be >= 2",
                self.max_target_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HtrError::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if self.d_ff == 0 || self.dec_layers == 0 {
            return Err(HtrError::Config("d_ff and dec_layers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Padding,
    Combined,
}

/// Boolean score mask, `true` = blocked.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub t_q: usize,
    pub t_k: usize,
    pub blocked: Vec<bool>,
}

impl AttentionMask {
    /// Strict upper triangle blocked: query t sees keys 0..=t.
    pub fn causal(t: usize) -> AttentionMask {
        let mut blocked = vec![false; t * t];
        for q in 0..t {
            for k in q + 1..t {
                blocked[q * t + k] = true;
            }
        }
        AttentionMask { kind: MaskKind::Causal, t_q: t, t_k: t, blocked }
    }

    /// Same blocked keys for every query row.
    pub fn padding(t_q: usize, key_pad: &[bool]) -> AttentionMask {
        let t_k = key_pad.len();
        let mut blocked = vec![false; t_q * t_k];
        for q in 0..t_q {
            blocked[q * t_k..(q + 1) * t_k].copy_from_slice(key_pad);
        }
        AttentionMask { kind: MaskKind::Padding, t_q, t_k, blocked }
    }

    /// Union of blocked entries; fails if any query row ends up fully
    /// blocked.
    pub fn combine(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if (self.t_q, self.t_k) != (other.t_q, other.t_k) {
            return Err(HtrError::Contract(format!(
                "mask combine: [{}, {}] vs [{}, {}]",
                self.t_q, self.t_k, other.t_q, other.t_k
            )));
        }
        let blocked: Vec<bool> =
            self.blocked.iter().zip(&other.blocked).map(|(&a, &b)| a || b).collect();
        for (q, row) in blocked.chunks(self.t_k).enumerate() {
            if row.iter().all(|&b| b) {
                return Err(HtrError::FullyBlockedRow { row: q });
            }
        }
        Ok(AttentionMask { kind: MaskKind::Combined, t_q: self.t_q, t_k: self.t_k, blocked })
    }
}

/// Sinusoidal table: `PE[t, 2i] = sin(t / 10000^(2i/d))`,
/// `PE[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn positional_encoding<E: Element>(t: usize, d_model: usize) -> Result<Vec<E>> {
    if d_model % 2 != 0 {
        return Err(HtrError::Contract(format!(
            "positional_encoding: d_model {d_model} must be even"
        )));
    }
    let mut out = Vec::with_capacity(t * d_model);
    for pos in 0..t {
        for i in 0..d_model / 2 {
            let freq = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            out.push(E::from_f64(freq.sin()));
            out.push(E::from_f64(freq.cos()));
        }
    }
    Ok(out)
}

fn affine<'t, E: Element>(
    b: &Binding<'t, E>,
    name: &str,
    x: Tensor<'t, E>,
) -> Result<Tensor<'t, E>> {
    let y = ops::matmul(x, b.get(&format!("{name}.weight")))?;
    ops::add_row_bias(y, b.get(&format!("{name}.bias")))
}

fn register_affine<E: Element>(
    store: &mut ParamStore<E>,
    rng: &mut impl rand::Rng,
    name: &str,
    din: usize,
    dout: usize,
) {
    store.insert(
        &format!("{name}.weight"),
        xavier_uniform(rng, din * dout, din, dout),
        vec![din, dout],
        true,
    );
    store.insert(&format!("{name}.bias"), vec![E::zero(); dout], vec![dout], true);
}

fn register_ln<E: Element>(store: &mut ParamStore<E>, name: &str, d: usize) {
    store.insert(&format!("{name}.gamma"), vec![E::one(); d], vec![d], true);
    store.insert(&format!("{name}.beta"), vec![E::zero(); d], vec![d], true);
}

fn register_attn<E: Element>(
    store: &mut ParamStore<E>,
    rng: &mut impl rand::Rng,
    prefix: &str,
    d: usize,
) {
    for p in ["wq", "wk", "wv", "wo"] {
        register_affine(store, rng, &format!("{prefix}.{p}"), d, d);
    }
}

fn ln<'t, E: Element>(b: &Binding<'t, E>, name: &str, x: Tensor<'t, E>) -> Result<Tensor<'t, E>> {
    ops::layer_norm(
        x,
        b.get(&format!("{name}.gamma")),
        b.get(&format!("{name}.beta")),
        E::from_f64(LN_EPS),
    )
}

/// Multi-head attention returning the output and the per-head attention
/// weight matrices `[T_q, T_k]`.
pub fn mha_detailed<'t, E: Element>(
    b: &Binding<'t, E>,
    prefix: &str,
    n_heads: usize,
    q: Tensor<'t, E>,
    k: Tensor<'t, E>,
    v: Tensor<'t, E>,
    mask: &AttentionMask,
) -> Result<(Tensor<'t, E>, Vec<Tensor<'t, E>>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let d = qs[1];
    if ks[1] != d || vs[1] != d || ks[0] != vs[0] {
        return Err(HtrError::Dimension(format!(
            "attention: q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    if d % n_heads != 0 {
        return Err(HtrError::Contract(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    if mask.t_q != qs[0] || mask.t_k != ks[0] {
        return Err(HtrError::Contract(format!(
            "mask [{}, {}] does not fit scores [{}, {}]",
            mask.t_q, mask.t_k, qs[0], ks[0]
        )));
    }
    let dh = d / n_heads;
    let qp = affine(b, &format!("{prefix}.wq"), q)?;
    let kp = affine(b, &format!("{prefix}.wk"), k)?;
    let vp = affine(b, &format!("{prefix}.wv"), v)?;
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = ops::slice_cols(qp, h * dh, dh)?;
        let kh = ops::slice_cols(kp, h * dh, dh)?;
        let vh = ops::slice_cols(vp, h * dh, dh)?;
        let scores = ops::scale(ops::matmul(qh, ops::transpose(kh)?)?, scale);
        let attn = ops::masked_softmax(scores, &mask.blocked)?;
        weights.push(attn);
        heads.push(ops::matmul(attn, vh)?);
    }
    let cat = ops::concat(&heads, 1)?;
    Ok((affine(b, &format!("{prefix}.wo"), cat)?, weights))
}

pub fn multi_head_attention<'t, E: Element>(
    b: &Binding<'t, E>,
    prefix: &str,
    n_heads: usize,
    q: Tensor<'t, E>,
    k: Tensor<'t, E>,
    v: Tensor<'t, E>,
    mask: &AttentionMask,
) -> Result<Tensor<'t, E>> {
    mha_detailed(b, prefix, n_heads, q, k, v, mask).map(|(o, _)| o)
}

/// Greedy/beam decode result; `truncated` marks runs stopped by the length
/// cap instead of eos.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: TokenSeq,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub vocab_size: usize,
}

impl Transformer {
    pub fn new(cfg: TransformerConfig, vocab_size: usize) -> Result<Transformer> {
        cfg.validate()?;
        if vocab_size <= EOS_ID {
            return Err(HtrError::Config(format!("vocab size {vocab_size} too small")));
        }
        Ok(Transformer { cfg, vocab_size })
    }

    /// Register all weights under the "tfenc.", "tfdec." and "proj."
    /// prefixes.
    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut impl rand::Rng) {
        let d = self.cfg.d_model;
        for i in 0..self.cfg.enc_layers {
            let p = format!("tfenc.l{i}");
            register_attn(store, rng, &format!("{p}.attn"), d);
            register_ln(store, &format!("{p}.ln1"), d);
            register_affine(store, rng, &format!("{p}.ffn.fc1"), d, self.cfg.d_ff);
            register_affine(store, rng, &format!("{p}.ffn.fc2"), self.cfg.d_ff, d);
            register_ln(store, &format!("{p}.ln2"), d);
        }
        store.insert(
            "tfdec.embed.weight",
            normal_init(rng, self.vocab_size * d, (d as f64).powf(-0.5)),
            vec![self.vocab_size, d],
            true,
        );
        for i in 0..self.cfg.dec_layers {
            let p = format!("tfdec.l{i}");
            register_attn(store, rng, &format!("{p}.self"), d);
            register_ln(store, &format!("{p}.ln1"), d);
            register_attn(store, rng, &format!("{p}.cross"), d);
            register_ln(store, &format!("{p}.ln2"), d);
            register_affine(store, rng, &format!("{p}.ffn.fc1"), d, self.cfg.d_ff);
            register_affine(store, rng, &format!("{p}.ffn.fc2"), self.cfg.d_ff, d);
            register_ln(store, &format!("{p}.ln3"), d);
        }
        // small-scale output projection: near-uniform logits at init, so
        // the first loss sits at ~ln(vocab_size)
        store.insert(
            "proj.weight",
            normal_init(rng, d * self.vocab_size, 0.1 * (d as f64).powf(-0.5)),
            vec![d, self.vocab_size],
            true,
        );
        store.insert("proj.bias", vec![E::zero(); self.vocab_size], vec![self.vocab_size], true);
    }

    fn drop<'t, E: Element>(
        &self,
        x: Tensor<'t, E>,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Tensor<'t, E> {
        if train && self.cfg.dropout > 0.0 {
            ops::dropout(x, self.cfg.dropout, rng)
        } else {
            x
        }
    }

    fn ffn<'t, E: Element>(
        &self,
        b: &Binding<'t, E>,
        prefix: &str,
        x: Tensor<'t, E>,
    ) -> Result<Tensor<'t, E>> {
        let h = ops::relu(affine(b, &format!("{prefix}.fc1"), x)?);
        affine(b, &format!("{prefix}.fc2"), h)
    }

    /// One encoder layer (no positional encoding; callers add it once at
    /// entry).
    pub fn encoder_layer<'t, E: Element>(
        &self,
        b: &Binding<'t, E>,
        i: usize,
        x: Tensor<'t, E>,
        pad_mask: &[bool],
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<'t, E>> {
        let p = format!("tfenc.l{i}");
        let mask = AttentionMask::padding(x.shape()[0], pad_mask);
        let sa = multi_head_attention(b, &format!("{p}.attn"), self.cfg.n_heads, x, x, x, &mask)?;
        let x = ln(b, &format!("{p}.ln1"), ops::add(x, self.drop(sa, train, rng))?)?;
        let ff = self.ffn(b, &format!("{p}.ffn"), x)?;
        ln(b, &format!("{p}.ln2"), ops::add(x, self.drop(ff, train, rng))?)
    }

    /// Memory `[T, d_model]` through the encoder stack. Zero layers leaves
    /// input + positional encoding.
    pub fn encoder_forward<'t, E: Element>(
        &self,
        b: &Binding<'t, E>,
        memory_in: Tensor<'t, E>,
        pad_mask: &[bool],
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<'t, E>> {
        let s = memory_in.shape();
        if s.len() != 2 || s[1] != self.cfg.d_model {
            return Err(HtrError::Contract(format!(
                "encoder_forward: memory {s:?} vs d_model {}",
                self.cfg.d_model
            )));
        }
        if pad_mask.len() != s[0] {
            return Err(HtrError::Contract(format!(
                "encoder_forward: pad_mask length {} vs T {}",
                pad_mask.len(),
                s[0]
            )));
        }
        let tape = memory_in.tape;
        let pe = tape.tensor(positional_encoding::<E>(s[0], s[1])?, &[s[0], s[1]], false)?;
        let mut x = self.drop(ops::add(memory_in, pe)?, train, rng);
        for i in 0..self.cfg.enc_layers {
            x = self.encoder_layer(b, i, x, pad_mask, train, rng)?;
        }
        Ok(x)
    }

    /// Teacher-forced decode: `tokens` (sos-led) against `memory`, emitting
    /// `[tokens.len(), V]` logits.
    pub fn decoder_forward<'t, E: Element>(
        &self,
        b: &Binding<'t, E>,
        tokens: &[usize],
        memory: Tensor<'t, E>,
        mem_pad: &[bool],
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<'t, E>> {
        if tokens.first() != Some(&SOS_ID) {
            return Err(HtrError::Contract("decoder tokens must begin with sos".into()));
        }
        if tokens.len() > self.cfg.max_target_len {
            return Err(HtrError::Contract(format!(
                "decoder input length {} exceeds max_target_len {}",
                tokens.len(),
                self.cfg.max_target_len
            )));
        }
        let d = self.cfg.d_model;
        let tt = tokens.len();
        let tape = memory.tape;
        let emb = ops::embedding_lookup(b.get("tfdec.embed.weight"), tokens)?;
        let emb = ops::scale(emb, E::from_f64((d as f64).sqrt()));
        let pe = tape.tensor(positional_encoding::<E>(tt, d)?, &[tt, d], false)?;
        let mut x = self.drop(ops::add(emb, pe)?, train, rng);
        let causal = AttentionMask::causal(tt);
        let cross = AttentionMask::padding(tt, mem_pad);
        for i in 0..self.cfg.dec_layers {
            let p = format!("tfdec.l{i}");
            let sa =
                multi_head_attention(b, &format!("{p}.self"), self.cfg.n_heads, x, x, x, &causal)?;
            x = ln(b, &format!("{p}.ln1"), ops::add(x, self.drop(sa, train, rng))?)?;
            let ca = multi_head_attention(
                b,
                &format!("{p}.cross"),
                self.cfg.n_heads,
                x,
                memory,
                memory,
                &cross,
            )?;
            x = ln(b, &format!("{p}.ln2"), ops::add(x, self.drop(ca, train, rng))?)?;
            let ff = self.ffn(b, &format!("{p}.ffn"), x)?;
            x = ln(b, &format!("{p}.ln3"), ops::add(x, self.drop(ff, train, rng))?)?;
        }
        affine(b, "proj", x)
    }

    fn last_row_logprobs<E: Element>(&self, logits: Tensor<'_, E>) -> Vec<f64> {
        let s = logits.shape();
        let v = s[1];
        let d = logits.data();
        let row: Vec<f64> = d[(s[0] - 1) * v..].iter().map(|&x| x.to_f64()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter().map(|x| x - lse).collect()
    }

    /// Argmax decode from `[sos]`; lowest id wins ties. Stops at eos or
    /// `max_len` total tokens.
    pub fn greedy_decode<E: Element>(
        &self,
        b: &Binding<'_, E>,
        memory: Tensor<'_, E>,
        mem_pad: &[bool],
        max_len: usize,
    ) -> Result<Decoded> {
        if max_len < 2 || max_len > self.cfg.max_target_len {
            return Err(HtrError::Contract(format!(
                "max_len {} outside 2..={}",
                max_len, self.cfg.max_target_len
            )));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut ids = vec![SOS_ID];
        let mut truncated = true;
        while ids.len() < max_len {
            let logits = self.decoder_forward(b, &ids, memory, mem_pad, false, &mut rng)?;
            let lp = self.last_row_logprobs(logits);
            let next = lp
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &x)| {
                    if x > best.1 {
                        (i, x)
                    } else {
                        best
                    }
                })
                .0;
            ids.push(next);
            if next == EOS_ID {
                truncated = false;
                break;
            }
        }
        Ok(Decoded { tokens: TokenSeq { ids }, truncated })
    }

    /// Length-normalized beam search; width 1 reproduces [`greedy_decode`]
    /// exactly.
    pub fn beam_decode<E: Element>(
        &self,
        b: &Binding<'_, E>,
        memory: Tensor<'_, E>,
        mem_pad: &[bool],
        width: usize,
        max_len: usize,
    ) -> Result<Decoded> {
        if width == 0 {
            return Err(HtrError::Contract("beam width must be >= 1".into()));
        }
        if max_len < 2 || max_len > self.cfg.max_target_len {
            return Err(HtrError::Contract(format!(
                "max_len {} outside 2..={}",
                max_len, self.cfg.max_target_len
            )));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        // (ids, raw log-prob); normalized score divides by generated count
        let norm = |score: f64, ids: &[usize]| score / (ids.len() - 1).max(1) as f64;
        let mut active: Vec<(Vec<usize>, f64)> = vec![(vec![SOS_ID], 0.0)];
        let mut finished: Vec<(Vec<usize>, f64, bool)> = Vec::new();
        while !active.is_empty() {
            let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
            for (ids, score) in &active {
                let logits = self.decoder_forward(b, ids, memory, mem_pad, false, &mut rng)?;
                let lp = self.last_row_logprobs(logits);
                for (tok, &l) in lp.iter().enumerate() {
                    let mut next = ids.clone();
                    next.push(tok);
                    candidates.push((next, score + l));
                }
            }
            // stable sort keeps earlier beams / lower token ids on ties
            candidates.sort_by(|a, b| {
                norm(b.1, &b.0).partial_cmp(&norm(a.1, &a.0)).unwrap()
            });
            candidates.truncate(width);
            active.clear();
            for (ids, score) in candidates {
                if *ids.last().unwrap() == EOS_ID {
                    finished.push((ids, score, false));
                } else if ids.len() == max_len {
                    finished.push((ids, score, true));
                } else {
                    active.push((ids, score));
                }
            }
        }
        let (ids, _, truncated) = finished
            .into_iter()
            .fold(None::<(Vec<usize>, f64, bool)>, |best, cand| match best {
                Some(b) if norm(b.1, &b.0) >= norm(cand.1, &cand.0) => Some(b),
                _ => Some(cand),
            })
            .expect("beam search retains at least one hypothesis");
        Ok(Decoded { tokens: TokenSeq { ids }, truncated })
    }
}
