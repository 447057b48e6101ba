//! Line-image standardization: decode, grayscale, fixed-height rescale,
//! optional Otsu binarization.
//!
//! Canonical form is a grayscale row of height [`CANONICAL_HEIGHT`] with
//! values in [0, 1], ink dark on light background. Standardization to
//! `(x - 0.5) / 0.5` happens at the model boundary, not here.

use std::path::Path;

use crate::error::{HtrError, Result};

pub const CANONICAL_HEIGHT: usize = 64;
pub const MAX_WIDTH: usize = 1024;

/// Decoded raster before normalization: 8-bit samples, row-major,
/// `channels` in {1, 3, 4}.
#[derive(Clone, Debug)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Normalized grayscale line image, `[1, H, W]`, values in [0, 1].
#[derive(Clone, Debug)]
pub struct LineImage {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub source_path: String,
    pub original_size: (usize, usize),
}

/// Decode a PNG or BMP raster.
pub fn load_image(path: &Path) -> Result<RawImage> {
    if !path.exists() {
        return Err(HtrError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let img = image::open(path).map_err(|e| HtrError::format(path, e.to_string()))?;
    let (channels, data, width, height) = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            (1, g.into_raw(), w, h)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            (3, rgb.into_raw(), w, h)
        }
    };
    Ok(RawImage { height, width, channels, data })
}

fn luma(r: u8, g: u8, b: u8) -> f32 {
    (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32) / 255.0
}

impl RawImage {
    fn gray(&self) -> Vec<f32> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f32 / 255.0).collect(),
            3 | 4 => self
                .data
                .chunks(self.channels)
                .map(|px| luma(px[0], px[1], px[2]))
                .collect(),
            c => panic!("unsupported channel count {c}"),
        }
    }
}

fn bilinear_sample(src: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Grayscale conversion plus proportional bilinear rescale to
/// `target_height`; output width is `min(max_width, round(W * th / H))`,
/// at least 1.
pub fn normalize_image(raw: &RawImage, target_height: usize, max_width: usize) -> Result<LineImage> {
    if target_height < 16 {
        return Err(HtrError::Contract(format!(
            "target_height must be >= 16, got {target_height}"
        )));
    }
    if raw.height == 0 || raw.width == 0 {
        return Err(HtrError::Dimension("normalize_image: zero-area input".into()));
    }
    let gray = raw.gray();
    let scale = target_height as f32 / raw.height as f32;
    let out_w = ((raw.width as f32 * scale).round() as usize).clamp(1, max_width);
    let mut pixels = vec![0.0f32; target_height * out_w];

    if raw.height == target_height && out_w == raw.width {
        pixels.copy_from_slice(&gray);
    } else {
        let sy = raw.height as f32 / target_height as f32;
        let sx = raw.width as f32 / out_w as f32;
        for oy in 0..target_height {
            for ox in 0..out_w {
                // center-aligned sampling
                let y = (oy as f32 + 0.5) * sy - 0.5;
                let x = (ox as f32 + 0.5) * sx - 0.5;
                pixels[oy * out_w + ox] = bilinear_sample(&gray, raw.height, raw.width, y, x);
            }
        }
    }
    Ok(LineImage {
        pixels,
        height: target_height,
        width: out_w,
        source_path: String::new(),
        original_size: (raw.height, raw.width),
    })
}

/// Otsu threshold over a 256-bin histogram; returns the lowest level
/// maximizing between-class variance. Requires >= 2 occupied bins.
pub fn otsu_threshold(levels: &[u8]) -> Result<u8> {
    let mut hist = [0usize; 256];
    for &v in levels {
        hist[v as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(HtrError::DegenerateStats(
            "otsu: image has fewer than 2 distinct gray levels".into(),
        ));
    }
    let total = levels.len() as f64;
    let total_sum: f64 = hist.iter().enumerate().map(|(l, &c)| (l * c) as f64).sum();

    let mut best_t = 0u8;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..255usize {
        w0 += hist[t] as f64;
        sum0 += (t * hist[t]) as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

/// Binarize: pixels strictly above the Otsu threshold map to 1.
pub fn otsu_binarize(img: &LineImage) -> Result<LineImage> {
    let levels: Vec<u8> =
        img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let t = otsu_threshold(&levels)?;
    let mut out = img.clone();
    out.pixels = levels.iter().map(|&l| if l > t { 1.0 } else { 0.0 }).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_gray(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> RawImage {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        RawImage { height: h, width: w, channels: 1, data }
    }

    #[test]
    fn normalize_aspect_arithmetic() {
        let raw = raw_gray(128, 512, |_, _| 100);
        let img = normalize_image(&raw, 64, 1024).unwrap();
        assert_eq!((img.height, img.width), (64, 256));
        assert_eq!(img.original_size, (128, 512));
    }

    #[test]
    fn normalize_is_identity_on_canonical() {
        let raw = raw_gray(64, 100, |y, x| ((y * 3 + x) % 251) as u8);
        let img = normalize_image(&raw, 64, 1024).unwrap();
        assert_eq!((img.height, img.width), (64, 100));
        for (p, &v) in img.pixels.iter().zip(&raw.data) {
            assert!((p - v as f32 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_constant_stays_constant() {
        let raw = raw_gray(37, 91, |_, _| 77);
        let img = normalize_image(&raw, 64, 1024).unwrap();
        let expect = 77.0 / 255.0;
        assert!(img.pixels.iter().all(|&v| (v - expect).abs() < 1e-5));
    }

    #[test]
    fn normalize_clamps_width() {
        let raw = raw_gray(16, 4000, |_, _| 0);
        let img = normalize_image(&raw, 64, 1024).unwrap();
        assert_eq!(img.width, 1024);
    }

    #[test]
    fn normalize_rejects_zero_area_and_small_height() {
        let raw = RawImage { height: 0, width: 4, channels: 1, data: vec![] };
        assert!(normalize_image(&raw, 64, 1024).is_err());
        let raw = raw_gray(8, 8, |_, _| 0);
        assert!(normalize_image(&raw, 8, 1024).is_err());
    }

    #[test]
    fn otsu_bimodal_separates_classes() {
        // 60% at level 40, 40% at level 200
        let mut levels = vec![40u8; 60];
        levels.extend(vec![200u8; 40]);
        let t = otsu_threshold(&levels).unwrap();
        assert!((40..200).contains(&t), "threshold {t}");
        // exact class partition
        assert!(levels.iter().all(|&l| (l > t) == (l == 200)));
    }

    #[test]
    fn otsu_matches_bruteforce_argmax() {
        // oracle: per-threshold class statistics computed directly on pixels
        fn brute(levels: &[u8]) -> u8 {
            let mut best = (f64::NEG_INFINITY, 0u8);
            for t in 0..255u8 {
                let c0: Vec<f64> =
                    levels.iter().filter(|&&l| l <= t).map(|&l| l as f64).collect();
                let c1: Vec<f64> =
                    levels.iter().filter(|&&l| l > t).map(|&l| l as f64).collect();
                if c0.is_empty() || c1.is_empty() {
                    continue;
                }
                let m0 = c0.iter().sum::<f64>() / c0.len() as f64;
                let m1 = c1.iter().sum::<f64>() / c1.len() as f64;
                let var = c0.len() as f64 * c1.len() as f64 * (m0 - m1) * (m0 - m1);
                if var > best.0 {
                    best = (var, t);
                }
            }
            best.1
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let levels: Vec<u8> = (0..256).map(|_| rng.gen()).collect();
            assert_eq!(otsu_threshold(&levels).unwrap(), brute(&levels));
        }
    }

    #[test]
    fn otsu_binary_input_keeps_partition() {
        let pixels: Vec<f32> = (0..64).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect();
        let img = LineImage {
            pixels: pixels.clone(),
            height: 8,
            width: 8,
            source_path: String::new(),
            original_size: (8, 8),
        };
        let out = otsu_binarize(&img).unwrap();
        assert_eq!(out.pixels, pixels);
    }

    #[test]
    fn otsu_constant_image_rejected() {
        let img = LineImage {
            pixels: vec![0.5; 64],
            height: 8,
            width: 8,
            source_path: String::new(),
            original_size: (8, 8),
        };
        assert!(matches!(otsu_binarize(&img), Err(HtrError::DegenerateStats(_))));
    }
}
