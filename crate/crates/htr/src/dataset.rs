//! Corpus loading, bucketed batching, and synthetic line-image generation.
//!
//! The manifest is a two-column UTF-8 TSV (image path, transcription) with
//! no header. The synthetic generator is a stand-in for restricted line
//! datasets: procedural glyphs composited right-to-left with seeded jitter
//! and noise, paired with exact ground truth.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{normalize_text, Vocab, PAD_ID};
use crate::error::{HtrError, Result};
use crate::image_prep::{normalize_image, otsu_binarize, LineImage, CANONICAL_HEIGHT, MAX_WIDTH};

pub const BACKGROUND: f32 = 1.0;
/// Image widths are padded to a multiple of this (five stride-2 stages).
pub const WIDTH_MULTIPLE: usize = 32;
const BUCKET_PX: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub transcription: String,
}

/// Parse the TSV manifest; every referenced image must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| HtrError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(HtrError::Manifest {
                line: i + 1,
                detail: format!("expected 2 tab-separated columns, got {}", cols.len()),
            });
        }
        let image_path = base.join(cols[0]);
        if !image_path.exists() {
            return Err(HtrError::Manifest {
                line: i + 1,
                detail: format!("image file not found: {}", image_path.display()),
            });
        }
        let transcription = normalize_text(cols[1]);
        if transcription.is_empty() {
            return Err(HtrError::Manifest { line: i + 1, detail: "empty transcription".into() });
        }
        entries.push(ManifestEntry { image_path, transcription });
    }
    Ok(entries)
}

/// A canonical-height image paired with its transcription, ready to batch.
#[derive(Clone, Debug)]
pub struct PreparedLine {
    pub image: LineImage,
    pub text: String,
}

/// Load and normalize every manifest entry.
pub fn prepare_lines(entries: &[ManifestEntry], binarize: bool) -> Result<Vec<PreparedLine>> {
    entries
        .iter()
        .map(|e| {
            let raw = crate::image_prep::load_image(&e.image_path)?;
            let mut img = normalize_image(&raw, CANONICAL_HEIGHT, MAX_WIDTH)?;
            if binarize {
                img = otsu_binarize(&img)?;
            }
            img.source_path = e.image_path.display().to_string();
            Ok(PreparedLine { image: img, text: e.transcription.clone() })
        })
        .collect()
}

/// One padded training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N, 1, 64, width]` row-major, background-padded on the right.
    pub images: Vec<f32>,
    pub batch_size: usize,
    pub width: usize,
    /// Unpadded pixel width per sample.
    pub valid_widths: Vec<usize>,
    /// `[N, target_len]` sos-prefixed, eos-terminated, pad-tailed rows.
    pub targets: Vec<usize>,
    pub target_len: usize,
}

impl Batch {
    /// Feature columns that correspond to real (unpadded) pixels.
    pub fn valid_cols(&self, sample: usize) -> usize {
        self.valid_widths[sample].div_ceil(WIDTH_MULTIPLE)
    }

    pub fn target_row(&self, sample: usize) -> &[usize] {
        &self.targets[sample * self.target_len..(sample + 1) * self.target_len]
    }
}

/// Bucket by width (boundary every 64 px), shuffle within buckets with a
/// seeded RNG, emit batches padded to the bucket max rounded up to a
/// multiple of 32. Deterministic for a given seed.
pub fn make_batches(
    lines: &[PreparedLine],
    vocab: &Vocab,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(HtrError::Contract("make_batches: batch_size must be >= 1".into()));
    }
    for l in lines {
        if l.image.height != CANONICAL_HEIGHT {
            return Err(HtrError::Contract(format!(
                "make_batches: image height {} != canonical {CANONICAL_HEIGHT}; run image prep first",
                l.image.height
            )));
        }
    }
    let mut buckets: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, l) in lines.iter().enumerate() {
        buckets.entry(l.image.width / BUCKET_PX).or_default().push(i);
    }
    let mut bucket_ids: Vec<usize> = buckets.keys().copied().collect();
    bucket_ids.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for b in bucket_ids {
        let members = buckets.get_mut(&b).unwrap();
        // Fisher-Yates within the bucket
        for i in (1..members.len()).rev() {
            members.swap(i, rng.gen_range(0..=i));
        }
        for chunk in members.chunks(batch_size) {
            batches.push(build_batch(lines, chunk, vocab));
        }
    }
    Ok(batches)
}

fn build_batch(lines: &[PreparedLine], members: &[usize], vocab: &Vocab) -> Batch {
    let max_w = members.iter().map(|&i| lines[i].image.width).max().unwrap();
    let width = max_w.div_ceil(WIDTH_MULTIPLE) * WIDTH_MULTIPLE;
    let n = members.len();
    let h = CANONICAL_HEIGHT;
    let mut images = vec![BACKGROUND; n * h * width];
    let mut valid_widths = Vec::with_capacity(n);
    let tokens: Vec<Vec<usize>> = members.iter().map(|&i| vocab.encode(&lines[i].text).ids).collect();
    let target_len = tokens.iter().map(|t| t.len()).max().unwrap();
    let mut targets = vec![PAD_ID; n * target_len];
    for (s, &i) in members.iter().enumerate() {
        let img = &lines[i].image;
        for y in 0..h {
            let dst = s * h * width + y * width;
            images[dst..dst + img.width]
                .copy_from_slice(&img.pixels[y * img.width..(y + 1) * img.width]);
        }
        valid_widths.push(img.width);
        targets[s * target_len..s * target_len + tokens[s].len()].copy_from_slice(&tokens[s]);
    }
    Batch { images, batch_size: n, width, valid_widths, targets, target_len }
}

/// Seeded split into (train, validation) index lists.
pub fn split_train_val(count: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5e11);
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    let n_val = ((count as f64) * val_fraction).round() as usize;
    let val = idx.split_off(count - n_val.min(count));
    (idx, val)
}

// ---- synthetic line generation ----

/// Small ink bitmap for one character.
#[derive(Clone, Debug)]
pub struct Glyph {
    pub width: usize,
    pub height: usize,
    /// Vertical offset of the glyph top from the canvas top.
    pub baseline: usize,
    /// Row-major ink intensity in [0, 1].
    pub ink: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct GlyphSet {
    pub glyphs: HashMap<char, Glyph>,
    /// Inter-glyph spacing range in pixels (inclusive).
    pub spacing: (usize, usize),
}

const GLYPH_W: usize = 24;
const GLYPH_H: usize = 40;

fn draw_stroke(ink: &mut [f32], w: usize, h: usize, rng: &mut ChaCha8Rng) {
    let (x0, y0) = (rng.gen_range(0..w) as f32, rng.gen_range(0..h) as f32);
    let (x1, y1) = (rng.gen_range(0..w) as f32, rng.gen_range(0..h) as f32);
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1) * 2;
    for s in 0..=steps {
        let t = s as f32 / steps as f32;
        let cx = x0 + (x1 - x0) * t;
        let cy = y0 + (y1 - y0) * t;
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let px = cx as i32 + dx;
                let py = cy as i32 + dy;
                if px >= 0 && (px as usize) < w && py >= 0 && (py as usize) < h {
                    let soft = if dx == 0 && dy == 0 { 1.0 } else { 0.6 };
                    let cell = &mut ink[py as usize * w + px as usize];
                    *cell = cell.max(soft);
                }
            }
        }
    }
}

impl GlyphSet {
    /// Deterministic procedural glyphs: each character gets a distinct
    /// stroke pattern derived from (seed, codepoint).
    pub fn generate(alphabet: &[char], seed: u64) -> GlyphSet {
        let mut glyphs = HashMap::new();
        for &c in alphabet {
            if c == ' ' {
                glyphs.insert(
                    c,
                    Glyph {
                        width: GLYPH_W / 2,
                        height: GLYPH_H,
                        baseline: 12,
                        ink: vec![0.0; GLYPH_W / 2 * GLYPH_H],
                    },
                );
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((c as u64) << 17) ^ 0x917_0a7);
            let mut ink = vec![0.0f32; GLYPH_W * GLYPH_H];
            for _ in 0..rng.gen_range(4..=7) {
                draw_stroke(&mut ink, GLYPH_W, GLYPH_H, &mut rng);
            }
            glyphs.insert(c, Glyph { width: GLYPH_W, height: GLYPH_H, baseline: 12, ink });
        }
        GlyphSet { glyphs, spacing: (4, 8) }
    }
}

/// Composite `text` right-to-left on a light background at canonical
/// height, with seeded spacing/vertical jitter and additive noise.
/// Returns the image and the unmodified ground truth.
pub fn synth_line(
    text: &str,
    glyphs: &GlyphSet,
    seed: u64,
    noise_level: f32,
) -> Result<(LineImage, String)> {
    let chars: Vec<char> = text.chars().collect();
    for &c in &chars {
        if !glyphs.glyphs.contains_key(&c) {
            return Err(HtrError::MissingGlyph(c));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 4usize;

    // layout pass: advance per glyph, then place right-to-left
    let advances: Vec<(usize, usize, i32)> = chars
        .iter()
        .map(|c| {
            let g = &glyphs.glyphs[c];
            let space = rng.gen_range(glyphs.spacing.0..=glyphs.spacing.1);
            let jitter = rng.gen_range(-3i32..=3);
            (g.width, space, jitter)
        })
        .collect();
    let content: usize = advances.iter().map(|&(w, s, _)| w + s).sum();
    let width = (content + 2 * margin).max(WIDTH_MULTIPLE);

    let mut pixels = vec![BACKGROUND; CANONICAL_HEIGHT * width];
    let mut x_right = width - margin;
    for (c, &(gw, space, jitter)) in chars.iter().zip(&advances) {
        let g = &glyphs.glyphs[c];
        let x0 = x_right - gw;
        let y0 = (g.baseline as i32 + jitter).clamp(0, (CANONICAL_HEIGHT - g.height) as i32) as usize;
        for gy in 0..g.height {
            for gx in 0..gw {
                let v = g.ink[gy * g.width + gx];
                if v > 0.0 {
                    let p = &mut pixels[(y0 + gy) * width + x0 + gx];
                    *p = (*p - v).max(0.0);
                }
            }
        }
        x_right = x0 - space.min(x0);
    }
    if noise_level > 0.0 {
        for p in pixels.iter_mut() {
            *p = (*p + rng.gen_range(-noise_level..=noise_level)).clamp(0.0, 1.0);
        }
    }
    Ok((
        LineImage {
            pixels,
            height: CANONICAL_HEIGHT,
            width,
            source_path: String::new(),
            original_size: (CANONICAL_HEIGHT, width),
        },
        text.to_string(),
    ))
}

/// Write a grayscale line image as PNG.
pub fn write_png(img: &LineImage, path: &Path) -> Result<()> {
    let buf: Vec<u8> =
        img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let g = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer matches dimensions");
    g.save(path).map_err(|e| HtrError::format(path, e.to_string()))
}

/// Generate `count` synthetic lines from the lexicon into `out_dir`,
/// writing PNGs plus a manifest. Returns the manifest path.
pub fn synth_corpus(
    lexicon: &[String],
    glyphs: &GlyphSet,
    count: usize,
    out_dir: &Path,
    seed: u64,
    noise_level: f32,
    max_words: usize,
) -> Result<PathBuf> {
    if lexicon.is_empty() {
        return Err(HtrError::Contract("synth_corpus: empty lexicon".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HtrError::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    for i in 0..count {
        let n_words = rng.gen_range(1..=max_words.max(1));
        let words: Vec<&str> =
            (0..n_words).map(|_| lexicon[rng.gen_range(0..lexicon.len())].as_str()).collect();
        let text = words.join(" ");
        let (img, truth) = synth_line(&text, glyphs, rng.gen(), noise_level)?;
        let name = format!("line_{i:05}.png");
        write_png(&img, &out_dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{truth}\n"));
    }
    let manifest_path = out_dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest).map_err(|e| HtrError::io(&manifest_path, e))?;
    Ok(manifest_path)
}
