//! Teacher-forced training: Adam with gradient clipping, divergence
//! retries, periodic evaluation, and binary checkpointing.
//!
//! Checkpoint layout: 8-byte magic `HTRCKPT1`, a little-endian u32 header
//! length, a UTF-8 JSON header (configs, vocab, tensor directory), then
//! raw little-endian f32 payloads in directory order. A save → load → save
//! round trip is byte-identical.

use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Vocab;
use crate::dataset::{make_batches, split_train_val, Batch, PreparedLine};
use crate::error::{HtrError, Result};
use crate::metrics::CerReport;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tape;

pub const CKPT_MAGIC: &[u8; 8] = b"HTRCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            max_steps: 1000,
            batch_size: 8,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 100,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(HtrError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(HtrError::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.grad_clip <= 0.0 {
            return Err(HtrError::Config(format!(
                "grad_clip must be > 0, got {}",
                self.grad_clip
            )));
        }
        if self.batch_size == 0 {
            return Err(HtrError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(HtrError::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Adam moment buffers, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn init(store: &ParamStore<f32>) -> AdamState {
        let mut state = AdamState::default();
        for name in store.trainable_names() {
            let n = store.get(&name).data.len();
            state.m.insert(name.clone(), vec![0.0; n]);
            state.v.insert(name, vec![0.0; n]);
        }
        state
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut IndexMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().flatten().map(|&g| (g as f64) * (g as f64)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One Adam update with bias correction: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    store: &mut ParamStore<f32>,
    grads: &IndexMap<String, Vec<f32>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (name, g) in grads {
        let m = state.m.get_mut(name).expect("moment buffer per parameter");
        let v = state.v.get_mut(name).expect("moment buffer per parameter");
        let p = &mut store.get_mut(name).data;
        debug_assert!(m.len() == g.len() && p.len() == g.len());
        for i in 0..g.len() {
            let gi = g[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = cfg.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            p[i] = (p[i] as f64 - update) as f32;
        }
    }
}

/// Complete training state; everything needed to resume bit-for-bit.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub vocab: Vocab,
    pub store: ParamStore<f32>,
    pub opt: AdamState,
    pub step: u64,
}

impl Checkpoint {
    pub fn init(model_cfg: ModelConfig, train_cfg: TrainConfig, vocab: Vocab) -> Result<Checkpoint> {
        train_cfg.validate()?;
        let model = Model::new(model_cfg.clone(), vocab.clone())?;
        let store = model.init_params::<f32>(train_cfg.seed);
        let opt = AdamState::init(&store);
        Ok(Checkpoint { model_cfg, train_cfg, vocab, store, opt, step: 0 })
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.model_cfg.clone(), self.vocab.clone())
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// One optimization step over `batch`. Advances the step counter; errors
/// with the step number if the loss is non-finite.
pub fn train_step(ckpt: &mut Checkpoint, model: &Model, batch: &Batch) -> Result<f64> {
    let step = ckpt.step;
    let (loss_value, grads, pending) = {
        let tape = Tape::new();
        let binding = ckpt.store.bind(&tape, true);
        let mut rng = step_rng(ckpt.train_cfg.seed, step);
        let (loss, _) = model.batch_loss(&tape, &binding, batch, true, &mut rng)?;
        let lv = loss.item() as f64;
        if !lv.is_finite() {
            return Err(HtrError::Divergence { step });
        }
        tape.backward(loss)?;
        let mut grads = IndexMap::new();
        for name in ckpt.store.trainable_names() {
            let len = ckpt.store.get(&name).data.len();
            grads.insert(name.clone(), binding.grad(&name).unwrap_or_else(|| vec![0.0; len]));
        }
        (lv, grads, binding.take_pending())
    };
    let mut grads = grads;
    clip_global_norm(&mut grads, ckpt.train_cfg.grad_clip);
    adam_step(&mut ckpt.store, &grads, &mut ckpt.opt, &ckpt.train_cfg);
    ckpt.store.apply_pending(pending);
    ckpt.step += 1;
    Ok(loss_value)
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_cer: Option<f64>,
}

fn fit_inner(
    ckpt: &mut Checkpoint,
    model: &Model,
    train: &[PreparedLine],
    val: &[PreparedLine],
    save_path: Option<&Path>,
) -> Result<Vec<LogEntry>> {
    let cfg = ckpt.train_cfg.clone();
    let mut log = Vec::new();
    let batches_per_epoch =
        make_batches(train, &model.vocab, cfg.batch_size, cfg.seed)?.len() as u64;
    let mut cached: Option<(u64, Vec<Batch>)> = None;
    while ckpt.step < cfg.max_steps {
        let epoch = ckpt.step / batches_per_epoch;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let b = make_batches(train, &model.vocab, cfg.batch_size, cfg.seed ^ epoch)?;
            cached = Some((epoch, b));
        }
        let batch = &cached.as_ref().unwrap().1[(ckpt.step % batches_per_epoch) as usize];
        let loss = train_step(ckpt, model, batch)?;
        let mut entry = LogEntry { step: ckpt.step, loss, val_cer: None };
        if cfg.eval_every > 0 && ckpt.step % cfg.eval_every == 0 {
            if !val.is_empty() {
                entry.val_cer = Some(evaluate_lines(ckpt, model, val)?.corpus_cer);
            }
            if let Some(p) = save_path {
                save_checkpoint(p, ckpt)?;
            }
        }
        log.push(entry);
    }
    if let Some(p) = save_path {
        save_checkpoint(p, ckpt)?;
    }
    Ok(log)
}

/// Train to `max_steps`. On divergence the run restarts from its starting
/// state with the learning rate halved, up to 3 retries, then the error
/// propagates.
pub fn fit(
    ckpt: &mut Checkpoint,
    lines: &[PreparedLine],
    save_path: Option<&Path>,
) -> Result<Vec<LogEntry>> {
    ckpt.train_cfg.validate()?;
    let model = ckpt.model()?;
    let cfg = &ckpt.train_cfg;
    let (train_idx, val_idx) = split_train_val(lines.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<PreparedLine> = train_idx.iter().map(|&i| lines[i].clone()).collect();
    let val: Vec<PreparedLine> = val_idx.iter().map(|&i| lines[i].clone()).collect();
    if train.is_empty() {
        return Err(HtrError::Contract("fit: no training lines after split".into()));
    }
    let initial = ckpt.clone();
    let mut attempt = 0;
    loop {
        match fit_inner(ckpt, &model, &train, &val, save_path) {
            Ok(log) => return Ok(log),
            Err(HtrError::Divergence { step }) if attempt < 3 => {
                attempt += 1;
                *ckpt = initial.clone();
                ckpt.train_cfg.learning_rate = initial.train_cfg.learning_rate / f64::powi(2.0, attempt);
                let _ = step; // restart from scratch at the reduced rate
            }
            Err(e) => return Err(e),
        }
    }
}

fn evaluate_lines(ckpt: &Checkpoint, model: &Model, lines: &[PreparedLine]) -> Result<CerReport> {
    let mut pairs = Vec::with_capacity(lines.len());
    for l in lines {
        let hyp = model.transcribe(&ckpt.store, &l.image, 1)?;
        pairs.push((l.text.clone(), hyp));
    }
    CerReport::score(&pairs)
}

/// Greedy-decode every line and score it against its reference.
pub fn evaluate_model(ckpt: &Checkpoint, lines: &[PreparedLine]) -> Result<CerReport> {
    let model = ckpt.model()?;
    evaluate_lines(ckpt, &model, lines)
}

// ---- checkpoint serialization ----

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    vocab: String,
    step: u64,
    opt_step: u64,
    tensors: Vec<TensorEntry>,
}

const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let push = |entries: &mut Vec<TensorEntry>,
                    payload: &mut Vec<u8>,
                    name: String,
                    shape: Vec<usize>,
                    trainable: bool,
                    data: &[f32]| {
        let byte_offset = payload.len() as u64;
        for &v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape,
            trainable,
            byte_offset,
            byte_len: (data.len() * 4) as u64,
        });
    };
    for (name, p) in ckpt.store.iter() {
        push(&mut entries, &mut payload, name.clone(), p.shape.clone(), p.trainable, &p.data);
    }
    for (name, m) in &ckpt.opt.m {
        push(&mut entries, &mut payload, format!("optim.m.{name}"), vec![m.len()], false, m);
    }
    for (name, v) in &ckpt.opt.v {
        push(&mut entries, &mut payload, format!("optim.v.{name}"), vec![v.len()], false, v);
    }
    let header = Header {
        version: CKPT_VERSION,
        model: ckpt.model_cfg.clone(),
        train: ckpt.train_cfg.clone(),
        vocab: ckpt.vocab.to_text(),
        step: ckpt.step,
        opt_step: ckpt.opt.t,
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header).expect("checkpoint header serialization");
    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| HtrError::io(&tmp, e))?;
        f.write_all(&out).map_err(|e| HtrError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| HtrError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| HtrError::io(path, e))?;
    if bytes.len() < 12 {
        return Err(HtrError::format(path, "file shorter than checkpoint preamble"));
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(HtrError::Version {
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            expected: String::from_utf8_lossy(CKPT_MAGIC).into_owned(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(HtrError::format(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| HtrError::format(path, format!("bad header: {e}")))?;
    if header.version != CKPT_VERSION {
        return Err(HtrError::Version {
            found: format!("header version {}", header.version),
            expected: format!("header version {CKPT_VERSION}"),
        });
    }
    let payload = &bytes[payload_start..];
    let vocab = Vocab::from_text(&header.vocab)?;
    let mut store = ParamStore::new();
    let mut opt = AdamState { t: header.opt_step, ..Default::default() };
    for e in &header.tensors {
        let start = e.byte_offset as usize;
        let end = start + e.byte_len as usize;
        if end > payload.len() || e.byte_len % 4 != 0 {
            return Err(HtrError::format(
                path,
                format!("tensor {} extends past end of file", e.name),
            ));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(name) = e.name.strip_prefix("optim.m.") {
            opt.m.insert(name.to_string(), data);
        } else if let Some(name) = e.name.strip_prefix("optim.v.") {
            opt.v.insert(name.to_string(), data);
        } else {
            if store.contains(&e.name) {
                return Err(HtrError::format(
                    path,
                    format!("duplicate tensor name {}", e.name),
                ));
            }
            if data.len() != e.shape.iter().product::<usize>() {
                return Err(HtrError::format(
                    path,
                    format!("tensor {} does not match its shape", e.name),
                ));
            }
            store.insert(&e.name, data, e.shape.clone(), e.trainable);
        }
    }
    let ckpt = Checkpoint {
        model_cfg: header.model,
        train_cfg: header.train,
        vocab,
        store,
        opt,
        step: header.step,
    };
    // structural sanity: the config must describe exactly these tensors
    let reference = ckpt.model()?.init_params::<f32>(0);
    let names: Vec<&String> = ckpt.store.names().collect();
    let expect: Vec<&String> = reference.names().collect();
    if names != expect {
        return Err(HtrError::format(path, "tensor directory does not match model config"));
    }
    for name in ckpt.store.names() {
        if ckpt.store.get(name).shape != reference.get(name).shape {
            return Err(HtrError::format(path, format!("tensor {name} has wrong shape")));
        }
    }
    Ok(ckpt)
}
