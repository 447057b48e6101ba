//! Full recognition model: vision encoder feeding the transformer, plus
//! batch-level teacher-forced loss and single-image transcription.
//!
//! Pixel values in [0, 1] are standardized to `(x - 0.5) / 0.5` here, at
//! the model boundary.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Vocab, PAD_ID};
use crate::dataset::{Batch, WIDTH_MULTIPLE};
use crate::encoder::{ResNetConfig, VisionEncoder};
use crate::error::{HtrError, Result};
use crate::image_prep::LineImage;
use crate::params::{Binding, ParamStore};
use crate::tensor::ops;
use crate::tensor::{Element, Tape, Tensor};
use crate::transformer::{Decoded, Transformer, TransformerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resnet: ResNetConfig,
    pub transformer: TransformerConfig,
    pub proj_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resnet: ResNetConfig::desk_scale(),
            transformer: TransformerConfig::default(),
            proj_depth: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub encoder: VisionEncoder,
    pub transformer: Transformer,
}

/// `(x - 0.5) / 0.5`, mapping [0, 1] pixels to [-1, 1].
pub fn standardize<E: Element>(pixels: &[f32]) -> Vec<E> {
    pixels.iter().map(|&p| E::from_f64((p as f64 - 0.5) / 0.5)).collect()
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab: Vocab) -> Result<Model> {
        let encoder = VisionEncoder::new(
            cfg.resnet.clone(),
            cfg.transformer.d_model,
            cfg.proj_depth,
        )?;
        let transformer = Transformer::new(cfg.transformer.clone(), vocab.size())?;
        Ok(Model { cfg, vocab, encoder, transformer })
    }

    /// Fresh parameter store with seeded initialization.
    pub fn init_params<E: Element>(&self, seed: u64) -> ParamStore<E> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.encoder.register(&mut store, &mut rng);
        self.transformer.register(&mut store, &mut rng);
        store
    }

    /// Teacher-forced batch loss: decoder input `target[0..L-1]` predicts
    /// `target[1..L]` per sample; mean NLL over non-pad positions of the
    /// whole batch. Returns the scalar loss and the position count.
    pub fn batch_loss<'t, E: Element>(
        &self,
        tape: &'t Tape<E>,
        b: &Binding<'t, E>,
        batch: &Batch,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<'t, E>, usize)> {
        let images = tape.tensor(
            standardize(&batch.images),
            &[batch.batch_size, 1, 64, batch.width],
            false,
        )?;
        let fmap = self.encoder.resnet_forward(b, images, train)?;
        let mut total: Option<Tensor<'t, E>> = None;
        let mut positions = 0usize;
        for s in 0..batch.batch_size {
            let enc = self.encoder.encode_sample(b, fmap, s, batch.valid_cols(s))?;
            let memory =
                self.transformer.encoder_forward(b, enc.memory, &enc.pad_mask, train, rng)?;
            let row = batch.target_row(s);
            // trailing pad contributes nothing; trim to the eos
            let len = row
                .iter()
                .position(|&t| t == crate::codec::EOS_ID)
                .map(|p| p + 1)
                .unwrap_or(row.len());
            let input = &row[..len - 1];
            let target = &row[1..len];
            let logits =
                self.transformer.decoder_forward(b, input, memory, &enc.pad_mask, train, rng)?;
            let (sum, count) = ops::cross_entropy_masked_sum(logits, target, PAD_ID)?;
            positions += count;
            total = Some(match total {
                Some(t) => ops::add(t, sum)?,
                None => sum,
            });
        }
        let total = total.ok_or(HtrError::EmptyLoss)?;
        Ok((ops::scale(total, E::one() / E::from_f64(positions as f64)), positions))
    }

    /// Encode one prepared line image into transformer memory. The image is
    /// right-padded with background to a multiple of 32.
    fn encode_image<'t, E: Element>(
        &self,
        tape: &'t Tape<E>,
        b: &Binding<'t, E>,
        image: &LineImage,
    ) -> Result<(Tensor<'t, E>, Vec<bool>)> {
        if image.height != 64 {
            return Err(HtrError::Contract(format!(
                "transcribe: image height {} != 64; run image prep first",
                image.height
            )));
        }
        let width = image.width.div_ceil(WIDTH_MULTIPLE) * WIDTH_MULTIPLE;
        let mut pixels = vec![crate::dataset::BACKGROUND; 64 * width];
        for y in 0..64 {
            pixels[y * width..y * width + image.width]
                .copy_from_slice(&image.pixels[y * image.width..(y + 1) * image.width]);
        }
        let input = tape.tensor(standardize(&pixels), &[1, 1, 64, width], false)?;
        let fmap = self.encoder.resnet_forward(b, input, false)?;
        let valid = image.width.div_ceil(WIDTH_MULTIPLE);
        let enc = self.encoder.encode_sample(b, fmap, 0, valid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let memory =
            self.transformer.encoder_forward(b, enc.memory, &enc.pad_mask, false, &mut rng)?;
        Ok((memory, enc.pad_mask))
    }

    /// Decode one image to tokens; beam width 1 is greedy.
    pub fn decode_image<E: Element>(
        &self,
        store: &ParamStore<E>,
        image: &LineImage,
        beam_width: usize,
    ) -> Result<Decoded> {
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let (memory, pad_mask) = self.encode_image(&tape, &b, image)?;
        let max_len = self.cfg.transformer.max_target_len;
        if beam_width <= 1 {
            self.transformer.greedy_decode(&b, memory, &pad_mask, max_len)
        } else {
            self.transformer.beam_decode(&b, memory, &pad_mask, beam_width, max_len)
        }
    }

    /// Decode one image to text.
    pub fn transcribe<E: Element>(
        &self,
        store: &ParamStore<E>,
        image: &LineImage,
        beam_width: usize,
    ) -> Result<String> {
        let decoded = self.decode_image(store, image, beam_width)?;
        Ok(self.vocab.decode(&decoded.tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_batches, PreparedLine};

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            resnet: ResNetConfig::desk_scale(),
            transformer: TransformerConfig {
                d_model: 16,
                n_heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                d_ff: 32,
                dropout: 0.0,
                max_target_len: 16,
            },
            proj_depth: 1,
        };
        Model::new(cfg, Vocab::build(&["ab"]).unwrap()).unwrap()
    }

    fn tiny_lines() -> Vec<PreparedLine> {
        ["ab", "ba"]
            .iter()
            .map(|t| PreparedLine {
                image: LineImage {
                    pixels: (0..64 * 32).map(|i| ((i * 13) % 97) as f32 / 96.0).collect(),
                    height: 64,
                    width: 32,
                    source_path: String::new(),
                    original_size: (64, 32),
                },
                text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn standardize_maps_unit_interval() {
        let out: Vec<f32> = standardize(&[0.0, 0.5, 1.0]);
        assert_eq!(out, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn batch_loss_counts_non_pad_positions() {
        let model = tiny_model();
        let store = model.init_params::<f32>(1);
        let lines = tiny_lines();
        let batches = make_batches(&lines, &model.vocab, 2, 3).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, count) = model.batch_loss(&tape, &b, &batches[0], false, &mut rng).unwrap();
        // each "ab" line has targets [a, b, eos]
        assert_eq!(count, 6);
        assert!(loss.item().is_finite());
    }

    #[test]
    fn transcribe_is_deterministic() {
        let model = tiny_model();
        let store = model.init_params::<f32>(2);
        let img = &tiny_lines()[0].image;
        let a = model.transcribe(&store, img, 1).unwrap();
        let b = model.transcribe(&store, img, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transcribe_rejects_wrong_height() {
        let model = tiny_model();
        let store = model.init_params::<f32>(2);
        let img = LineImage {
            pixels: vec![0.5; 32 * 32],
            height: 32,
            width: 32,
            source_path: String::new(),
            original_size: (32, 32),
        };
        assert!(model.transcribe(&store, &img, 1).is_err());
    }
}
