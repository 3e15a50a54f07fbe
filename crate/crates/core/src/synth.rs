//! Synthetic text-line corpus rendered from built-in 5×7 bitmap glyphs.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AlphabetCodec, DatasetManifest, ManifestEntry, Sample, IMAGE_DIR};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

const BACKGROUND: f64 = 0.9;
const INK: f64 = 0.1;

/// Rows of a glyph, most significant of the low five bits leftmost.
pub fn glyph(c: char) -> Option<[u8; GLYPH_H]> {
    Some(match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub alphabet: String,
    pub min_len: usize,
    pub max_len: usize,
    /// Integer upscaling of the 5×7 glyphs; glyph height is `7 · glyph_scale`.
    pub glyph_scale: usize,
    /// Rendered image height; should equal the model input height.
    pub height: usize,
    /// Extra inter-glyph gap drawn uniformly from `0..=spacing_jitter` pixels.
    pub spacing_jitter: usize,
    /// Amplitude of uniform additive noise on the `[0, 1]` intensity scale.
    pub noise: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            alphabet: "0123456789".into(),
            min_len: 3,
            max_len: 6,
            glyph_scale: 2,
            height: 32,
            spacing_jitter: 2,
            noise: 0.05,
            count: 2000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.alphabet.is_empty() {
            v.push("alphabet is empty".into());
        }
        for c in self.alphabet.chars() {
            if glyph(c).is_none() {
                v.push(format!("alphabet symbol {c:?} has no built-in glyph"));
            }
        }
        if let Err(Error::Config(dups)) = AlphabetCodec::new(&self.alphabet) {
            v.extend(dups.into_iter().filter(|d| d.contains("repeats")));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            v.push(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            ));
        }
        if self.glyph_scale == 0 {
            v.push("glyph_scale must be at least 1".into());
        }
        if GLYPH_H * self.glyph_scale > self.height {
            v.push(format!(
                "glyphs of height {} do not fit in height {}",
                GLYPH_H * self.glyph_scale,
                self.height
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            v.push(format!("noise must lie in [0, 1], got {}", self.noise));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Renders `text`, drawing spacing jitter and pixel noise from `rng`.
pub fn render_line(text: &str, config: &SyntheticConfig, rng: &mut impl Rng) -> Result<GrayImage> {
    let s = config.glyph_scale;
    let glyphs: Vec<[u8; GLYPH_H]> = text
        .chars()
        .map(|c| glyph(c).ok_or_else(|| Error::config(format!("no built-in glyph for {c:?}"))))
        .collect::<Result<_>>()?;
    let gaps: Vec<usize> = glyphs
        .iter()
        .map(|_| s + rng.random_range(0..=config.spacing_jitter))
        .collect();
    let margin = 2 * s;
    let width = 2 * margin + glyphs.len() * GLYPH_W * s + gaps.iter().skip(1).sum::<usize>();
    let h = config.height;
    let top = (h - GLYPH_H * s) / 2;
    let mut plane = vec![BACKGROUND; width * h];
    let mut x0 = margin;
    for (i, rows) in glyphs.iter().enumerate() {
        if i > 0 {
            x0 += gaps[i];
        }
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    for dy in 0..s {
                        for dx in 0..s {
                            plane[(top + r * s + dy) * width + x0 + col * s + dx] = INK;
                        }
                    }
                }
            }
        }
        x0 += GLYPH_W * s;
    }
    let mut img = GrayImage::new(width as u32, h as u32);
    for (p, v) in img.pixels_mut().zip(plane) {
        let noisy = if config.noise > 0.0 {
            v + config.noise * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            v
        };
        *p = Luma([(noisy.clamp(0.0, 1.0) * 255.0).round() as u8]);
    }
    Ok(img)
}

/// Deterministic `(transcript, image)` pairs for `config.seed`.
pub fn synth_lines(config: &SyntheticConfig) -> Result<Vec<(String, GrayImage)>> {
    config.validate()?;
    let symbols: Vec<char> = config.alphabet.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.count)
        .map(|_| {
            let len = rng.random_range(config.min_len..=config.max_len);
            let text: String = (0..len).map(|_| symbols[rng.random_range(0..symbols.len())]).collect();
            let img = render_line(&text, config, &mut rng)?;
            Ok((text, img))
        })
        .collect()
}

/// Renders the corpus in memory and preprocesses it like images read from
/// disk.
pub fn synth_samples<T: Real>(
    config: &SyntheticConfig,
    codec: &AlphabetCodec,
    target_h: usize,
) -> Result<Vec<Sample<T>>> {
    synth_lines(config)?
        .into_iter()
        .enumerate()
        .map(|(i, (text, img))| {
            Ok(Sample {
                id: format!("{i:06}"),
                image: crate::data::preprocess(&DynamicImage::ImageLuma8(img), target_h)?,
                labels: codec.encode(&text)?,
                transcript: text,
            })
        })
        .collect()
}

/// Writes `out/images/*.png` and `out/lines.tsv`.
pub fn synth_generate(config: &SyntheticConfig, out: &Path) -> Result<DatasetManifest> {
    let lines = synth_lines(config)?;
    let dir = out.join(IMAGE_DIR);
    fs::create_dir_all(&dir)?;
    let mut entries = Vec::with_capacity(lines.len());
    for (i, (text, img)) in lines.into_iter().enumerate() {
        let id = format!("{i:06}");
        let path = dir.join(format!("{id}.png"));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        entries.push(ManifestEntry { id, transcript: text });
    }
    let manifest = DatasetManifest::new(out, entries);
    manifest.write()?;
    Ok(manifest)
}
