//! Convolutional feature extractor: ResNet-18-shaped backbone plus a small
//! projection head that turns a line image into a left-to-right sequence of
//! embedding vectors.
//!
//! The backbone reduces a `[N, 1, 64, W]` image to `[N, C4, 2, W/32]`; the
//! two remaining rows are concatenated channel-wise (no pooling) and each
//! column is projected to `d_model`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HtrError, Result};
use crate::params::{kaiming_uniform, xavier_uniform, Binding, ParamStore};
use crate::tensor::conv::{batchnorm2d, conv2d, maxpool2d, BnStats};
use crate::tensor::ops;
use crate::tensor::{Element, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Backbone shape. `width_scale` shrinks every channel count for desk-scale
/// runs while keeping the block graph identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub width_scale: f64,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
            width_scale: 1.0,
        }
    }
}

impl ResNetConfig {
    /// Quarter-width backbone (stage channels 16/32/64/128).
    pub fn desk_scale() -> Self {
        ResNetConfig { width_scale: 0.25, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(HtrError::Config(format!(
                "width_scale must be in (0, 1], got {}",
                self.width_scale
            )));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(HtrError::Config("blocks_per_stage entries must be >= 1".into()));
        }
        if !self.stage_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(HtrError::Config(format!(
                "stage_channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        for &c in std::iter::once(&self.stem_channels).chain(&self.stage_channels) {
            if self.width_scale * (c as f64) < 4.0 {
                return Err(HtrError::Config(format!(
                    "width_scale {} * channels {c} < 4",
                    self.width_scale
                )));
            }
        }
        Ok(())
    }

    /// Channel count after width scaling.
    pub fn scaled(&self, base: usize) -> usize {
        (base as f64 * self.width_scale).round() as usize
    }

    /// Channels of the final feature map.
    pub fn out_channels(&self) -> usize {
        self.scaled(self.stage_channels[3])
    }
}

/// Per-sample encoder result: memory rows ordered left-to-right in pixel
/// space, `pad_mask[t]` true for columns that exist only through padding.
pub struct EncoderOutput<'t, E: Element> {
    pub memory: Tensor<'t, E>,
    pub pad_mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub cfg: ResNetConfig,
    pub d_model: usize,
    pub proj_depth: usize,
}

fn register_conv<E: Element>(
    store: &mut ParamStore<E>,
    rng: &mut impl Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    let fan_in = cin * k * k;
    store.insert(name, kaiming_uniform(rng, cout * fan_in, fan_in), vec![cout, cin, k, k], true);
}

fn register_bn<E: Element>(store: &mut ParamStore<E>, prefix: &str, c: usize) {
    store.insert(&format!("{prefix}.gamma"), vec![E::one(); c], vec![c], true);
    store.insert(&format!("{prefix}.beta"), vec![E::zero(); c], vec![c], true);
    store.insert(&format!("{prefix}.running_mean"), vec![E::zero(); c], vec![c], false);
    store.insert(&format!("{prefix}.running_var"), vec![E::one(); c], vec![c], false);
}

fn bn_apply<'t, E: Element>(
    b: &Binding<'t, E>,
    prefix: &str,
    x: Tensor<'t, E>,
    train: bool,
) -> Result<Tensor<'t, E>> {
    let gamma = b.get(&format!("{prefix}.gamma"));
    let beta = b.get(&format!("{prefix}.beta"));
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");
    let running = BnStats {
        mean: b.get(&mean_name).data().as_ref().clone(),
        var: b.get(&var_name).data().as_ref().clone(),
    };
    let (y, updated) = batchnorm2d(
        x,
        gamma,
        beta,
        &running,
        train,
        E::from_f64(BN_MOMENTUM),
        E::from_f64(BN_EPS),
    )?;
    if let Some(s) = updated {
        b.push_stat(&mean_name, s.mean);
        b.push_stat(&var_name, s.var);
    }
    Ok(y)
}

/// Two 3x3 convs with batchnorms and an (optionally projected) skip.
/// `project` adds a 1x1 strided conv + batchnorm on the skip path; required
/// whenever channels or stride change.
pub fn basic_block<'t, E: Element>(
    b: &Binding<'t, E>,
    prefix: &str,
    x: Tensor<'t, E>,
    stride: usize,
    project: bool,
    train: bool,
) -> Result<Tensor<'t, E>> {
    let mut y = conv2d(x, b.get(&format!("{prefix}.conv1.weight")), None, stride, 1)?;
    y = bn_apply(b, &format!("{prefix}.bn1"), y, train)?;
    y = ops::relu(y);
    y = conv2d(y, b.get(&format!("{prefix}.conv2.weight")), None, 1, 1)?;
    y = bn_apply(b, &format!("{prefix}.bn2"), y, train)?;
    let skip = if project {
        let s = conv2d(x, b.get(&format!("{prefix}.proj.weight")), None, stride, 0)?;
        bn_apply(b, &format!("{prefix}.projbn"), s, train)?
    } else {
        x
    };
    Ok(ops::relu(ops::add(y, skip)?))
}

impl VisionEncoder {
    pub fn new(cfg: ResNetConfig, d_model: usize, proj_depth: usize) -> Result<VisionEncoder> {
        cfg.validate()?;
        if !(1..=3).contains(&proj_depth) {
            return Err(HtrError::Config(format!(
                "projection depth must be 1..=3, got {proj_depth}"
            )));
        }
        if d_model == 0 {
            return Err(HtrError::Config("d_model must be positive".into()));
        }
        Ok(VisionEncoder { cfg, d_model, proj_depth })
    }

    /// Width of projection layer `k`'s input.
    fn head_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut din = 2 * self.cfg.out_channels();
        for _ in 0..self.proj_depth {
            dims.push((din, self.d_model));
            din = self.d_model;
        }
        dims
    }

    /// Register all backbone and head parameters under the "encoder."
    /// prefix.
    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) {
        let c0 = self.cfg.scaled(self.cfg.stem_channels);
        register_conv(store, rng, "encoder.stem.conv.weight", c0, 1, 7);
        register_bn(store, "encoder.stem.bn", c0);
        let mut cin = c0;
        for (si, (&base, &blocks)) in
            self.cfg.stage_channels.iter().zip(&self.cfg.blocks_per_stage).enumerate()
        {
            let cout = self.cfg.scaled(base);
            for bi in 0..blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let p = format!("encoder.s{si}.b{bi}");
                register_conv(store, rng, &format!("{p}.conv1.weight"), cout, cin, 3);
                register_bn(store, &format!("{p}.bn1"), cout);
                register_conv(store, rng, &format!("{p}.conv2.weight"), cout, cout, 3);
                register_bn(store, &format!("{p}.bn2"), cout);
                if stride != 1 || cin != cout {
                    register_conv(store, rng, &format!("{p}.proj.weight"), cout, cin, 1);
                    register_bn(store, &format!("{p}.projbn"), cout);
                }
                cin = cout;
            }
        }
        for (k, (din, dout)) in self.head_dims().into_iter().enumerate() {
            store.insert(
                &format!("encoder.head.fc{k}.weight"),
                xavier_uniform(rng, din * dout, din, dout),
                vec![din, dout],
                true,
            );
            store.insert(&format!("encoder.head.fc{k}.bias"), vec![E::zero(); dout], vec![dout], true);
        }
    }

    /// Backbone: `[N, 1, 64, W]` (W divisible by 32) -> `[N, C4, 2, W/32]`.
    pub fn resnet_forward<'t, E: Element>(
        &self,
        b: &Binding<'t, E>,
        image: Tensor<'t, E>,
        train: bool,
    ) -> Result<Tensor<'t, E>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != 64 {
            return Err(HtrError::Contract(format!(
                "resnet_forward: expected [N, 1, 64, W], got {s:?}"
            )));
        }
        if s[3] % 32 != 0 {
            return Err(HtrError::Contract(format!(
                "resnet_forward: width {} not divisible by 32",
                s[3]
            )));
        }
        let mut x = conv2d(image, b.get("encoder.stem.conv.weight"), None, 2, 3)?;
        x = bn_apply(b, "encoder.stem.bn", x, train)?;
        x = ops::relu(x);
        x = maxpool2d(x, 3, 2, 1)?;
        let mut cin = self.cfg.scaled(self.cfg.stem_channels);
        for (si, (&base, &blocks)) in
            self.cfg.stage_channels.iter().zip(&self.cfg.blocks_per_stage).enumerate()
        {
            let cout = self.cfg.scaled(base);
            for bi in 0..blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let project = stride != 1 || cin != cout;
                x = basic_block(b, &format!("encoder.s{si}.b{bi}"), x, stride, project, train)?;
                cin = cout;
            }
        }
        Ok(x)
    }

    /// Collapse a per-sample feature map `[C, 2, T]` into memory
    /// `[T, d_model]`: the two rows concatenate into a 2C-vector per column,
    /// then the projection head maps it to d_model.
    pub fn features_to_sequence<'t, E: Element>(
        &self,
        b: &Binding<'t, E>,
        fmap: Tensor<'t, E>,
    ) -> Result<Tensor<'t, E>> {
        let s = fmap.shape();
        if s.len() != 3 || s[1] != 2 {
            return Err(HtrError::Contract(format!(
                "features_to_sequence: expected [C, 2, T], got {s:?}"
            )));
        }
        let (c, t) = (s[0], s[2]);
        let din = self.head_dims()[0].0;
        if 2 * c != din {
            return Err(HtrError::Contract(format!(
                "features_to_sequence: feature dim {} does not match projection input {din}",
                2 * c
            )));
        }
        // [C, 2, T] -> [T, 2, C] -> [T, 2C]; row-major order keeps the upper
        // image row first within each column vector
        let cols = ops::permute(fmap, &[2, 1, 0])?;
        let mut x = ops::reshape(cols, &[t, 2 * c])?;
        for k in 0..self.proj_depth {
            x = ops::matmul(x, b.get(&format!("encoder.head.fc{k}.weight")))?;
            x = ops::add_row_bias(x, b.get(&format!("encoder.head.fc{k}.bias")))?;
            if k + 1 < self.proj_depth {
                x = ops::relu(x);
            }
        }
        Ok(x)
    }

    /// Full per-sample encode: slice sample `n` from the batch feature map
    /// and project it. `valid_cols` marks how many leading columns derive
    /// from real image content.
    pub fn encode_sample<'t, E: Element>(
        &self,
        b: &Binding<'t, E>,
        fmap_batch: Tensor<'t, E>,
        n: usize,
        valid_cols: usize,
    ) -> Result<EncoderOutput<'t, E>> {
        let fmap = ops::index_axis0(fmap_batch, n)?;
        let t = fmap.shape()[2];
        let memory = self.features_to_sequence(b, fmap)?;
        let pad_mask: Vec<bool> = (0..t).map(|i| i >= valid_cols).collect();
        Ok(EncoderOutput { memory, pad_mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tape;

    fn small_encoder() -> VisionEncoder {
        VisionEncoder::new(ResNetConfig::desk_scale(), 32, 2).unwrap()
    }

    fn build<E: Element>(enc: &VisionEncoder, seed: u64) -> ParamStore<E> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        enc.register(&mut store, &mut rng);
        store
    }

    #[test]
    fn config_validation() {
        assert!(ResNetConfig::default().validate().is_ok());
        assert!(ResNetConfig::desk_scale().validate().is_ok());
        let bad = ResNetConfig { width_scale: 0.01, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ResNetConfig { stage_channels: [64, 64, 256, 512], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ResNetConfig { blocks_per_stage: [2, 0, 2, 2], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shapes() {
        let enc = small_encoder();
        let store = build::<f32>(&enc, 1);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        for w in [32usize, 160, 512] {
            let x = tape.zeros(&[1, 1, 64, w], false);
            let y = enc.resnet_forward(&b, x, false).unwrap();
            assert_eq!(y.shape(), vec![1, enc.cfg.out_channels(), 2, w / 32]);
        }
    }

    #[test]
    fn forward_rejects_bad_width() {
        let enc = small_encoder();
        let store = build::<f32>(&enc, 1);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let x = tape.zeros(&[1, 1, 64, 48], false);
        assert!(matches!(enc.resnet_forward(&b, x, false), Err(HtrError::Contract(_))));
        let x = tape.zeros(&[1, 1, 32, 64], false);
        assert!(enc.resnet_forward(&b, x, false).is_err());
    }

    #[test]
    fn residual_block_is_identity_with_zero_weights() {
        // zero convs + identity batchnorm in eval mode leave only the skip;
        // relu at the block exit is transparent on non-negative input
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        register_conv(&mut store, &mut rng, "blk.conv1.weight", 4, 4, 3);
        register_bn(&mut store, "blk.bn1", 4);
        register_conv(&mut store, &mut rng, "blk.conv2.weight", 4, 4, 3);
        register_bn(&mut store, "blk.bn2", 4);
        for name in ["blk.conv1.weight", "blk.conv2.weight"] {
            store.get_mut(name).data.fill(0.0);
        }
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let data: Vec<f32> = (0..4 * 4 * 6).map(|i| (i % 11) as f32 * 0.1).collect();
        let x = tape.tensor(data.clone(), &[1, 4, 4, 6], false).unwrap();
        let y = basic_block(&b, "blk", x, 1, false, false).unwrap();
        let yd = y.data();
        for (a, e) in yd.iter().zip(&data) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn projected_block_output_is_projected_input_with_zero_main_path() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        register_conv(&mut store, &mut rng, "blk.conv1.weight", 6, 4, 3);
        register_bn(&mut store, "blk.bn1", 6);
        register_conv(&mut store, &mut rng, "blk.conv2.weight", 6, 6, 3);
        register_bn(&mut store, "blk.bn2", 6);
        register_conv(&mut store, &mut rng, "blk.proj.weight", 6, 4, 1);
        register_bn(&mut store, "blk.projbn", 6);
        for name in ["blk.conv1.weight", "blk.conv2.weight"] {
            store.get_mut(name).data.fill(0.0);
        }
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let data: Vec<f32> = (0..4 * 4 * 6).map(|i| ((i * 7) % 13) as f32 * 0.05).collect();
        let x = tape.tensor(data, &[1, 4, 4, 6], false).unwrap();
        let y = basic_block(&b, "blk", x, 2, true, false).unwrap();
        // oracle: skip path alone
        let skip = conv2d(x, b.get("blk.proj.weight"), None, 2, 0).unwrap();
        let skip = bn_apply(&b, "blk.projbn", skip, false).unwrap();
        let skip = ops::relu(skip);
        assert_eq!(y.shape(), skip.shape());
        for (a, e) in y.data().iter().zip(skip.data().iter()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn features_to_sequence_keeps_column_order() {
        // column j of the feature map must feed memory row j
        let enc = VisionEncoder::new(ResNetConfig::desk_scale(), 8, 1).unwrap();
        let c = enc.cfg.out_channels();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        enc.register(&mut store, &mut rng);
        // weight summing all inputs into output dim 0
        let w = store.get_mut("encoder.head.fc0.weight");
        w.data.fill(0.0);
        for i in 0..2 * c {
            w.data[i * 8] = 1.0;
        }
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let t = 5;
        // fmap column j constant j+1
        let mut data = vec![0.0f32; c * 2 * t];
        for ch in 0..c {
            for r in 0..2 {
                for j in 0..t {
                    data[(ch * 2 + r) * t + j] = (j + 1) as f32;
                }
            }
        }
        let fmap = tape.tensor(data, &[c, 2, t], false).unwrap();
        let mem = enc.features_to_sequence(&b, fmap).unwrap();
        assert_eq!(mem.shape(), vec![t, 8]);
        let md = mem.data();
        for j in 0..t {
            let expect = (2 * c * (j + 1)) as f32;
            assert!((md[j * 8] - expect).abs() < 1e-4, "row {j}");
        }
    }

    #[test]
    fn features_to_sequence_rejects_dim_mismatch() {
        let enc = small_encoder();
        let store = build::<f32>(&enc, 1);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let fmap = tape.zeros(&[7, 2, 4], false);
        assert!(matches!(enc.features_to_sequence(&b, fmap), Err(HtrError::Contract(_))));
    }

    #[test]
    fn translation_by_32px_shifts_memory_one_column() {
        let enc = small_encoder();
        let store = build::<f32>(&enc, 11);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let w = 1024usize;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // content in the middle, constant background elsewhere
        let mut base = vec![1.0f32; 64 * w];
        for y in 0..64 {
            for x in 300..640 {
                base[y * w + x] = rand::Rng::gen::<f32>(&mut rng);
            }
        }
        let mut shifted = vec![1.0f32; 64 * w];
        for y in 0..64 {
            for x in 32..w {
                shifted[y * w + x] = base[y * w + x - 32];
            }
        }
        let run = |pixels: Vec<f32>| {
            let img = tape.tensor(pixels, &[1, 1, 64, w], false).unwrap();
            let fmap = enc.resnet_forward(&b, img, false).unwrap();
            let fmap = ops::index_axis0(fmap, 0).unwrap();
            enc.features_to_sequence(&b, fmap).unwrap().data().as_ref().clone()
        };
        let m0 = run(base);
        let m1 = run(shifted);
        let d = enc.d_model;
        // interior columns: receptive fields stay clear of both image edges
        for t in 9..21 {
            for k in 0..d {
                let a = m0[t * d + k];
                let s = m1[(t + 1) * d + k];
                assert!((a - s).abs() < 1e-4, "col {t} dim {k}: {a} vs {s}");
            }
        }
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let enc = small_encoder();
        let store = build::<f32>(&enc, 5);
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f32> = (0..64 * 64).map(|_| rand::Rng::gen::<f32>(&mut rng)).collect();
        let x = tape.tensor(data, &[1, 1, 64, 64], false).unwrap();
        let fmap = enc.resnet_forward(&b, x, true).unwrap();
        let fmap = ops::index_axis0(fmap, 0).unwrap();
        let mem = enc.features_to_sequence(&b, fmap).unwrap();
        // nonlinear pooling of the output so no gradient cancels structurally
        let loss = ops::sum_all(ops::mul(mem, ops::relu(mem)).unwrap());
        tape.backward(loss).unwrap();
        for name in store.trainable_names() {
            let g = b.grad(&name).unwrap_or_default();
            assert!(
                g.iter().any(|&v| v != 0.0),
                "parameter {name} received no gradient"
            );
        }
    }

    #[test]
    fn parameter_count_matches_formula() {
        // conv weights + batchnorm scale/shift + head affines, computed
        // independently of the registration loop
        fn expected(cfg: &ResNetConfig, d_model: usize, depth: usize) -> usize {
            let sc = |c: usize| (c as f64 * cfg.width_scale).round() as usize;
            let c0 = sc(cfg.stem_channels);
            let mut total = c0 * 49 + 2 * c0;
            let mut cin = c0;
            for (si, (&base, &blocks)) in
                cfg.stage_channels.iter().zip(&cfg.blocks_per_stage).enumerate()
            {
                let cout = sc(base);
                for bi in 0..blocks {
                    let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                    total += cout * cin * 9 + 2 * cout + cout * cout * 9 + 2 * cout;
                    if stride != 1 || cin != cout {
                        total += cout * cin + 2 * cout;
                    }
                    cin = cout;
                }
            }
            let mut din = 2 * sc(cfg.stage_channels[3]);
            for _ in 0..depth {
                total += din * d_model + d_model;
                din = d_model;
            }
            total
        }
        for cfg in [ResNetConfig::default(), ResNetConfig::desk_scale()] {
            let enc = VisionEncoder::new(cfg.clone(), 64, 2).unwrap();
            let store = build::<f32>(&enc, 2);
            let trainable: usize = store
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(_, p)| p.data.len())
                .sum();
            assert_eq!(trainable, expected(&cfg, 64, 2));
        }
    }

    #[test]
    fn named_import_roundtrip() {
        let enc = small_encoder();
        let mut store = build::<f32>(&enc, 1);
        let donor = build::<f32>(&enc, 2);
        for (name, p) in donor.iter() {
            store.load_values(name, p.data.clone()).unwrap();
        }
        for (name, p) in donor.iter() {
            assert_eq!(store.get(name).data, p.data);
        }
        assert!(store.load_values("encoder.nope", vec![0.0]).is_err());
    }
}
