//! Alphabets, the `lines.tsv` dataset layout, image preprocessing and batch
//! padding.
//!
//! A dataset directory holds an `images/` folder and a `lines.tsv` file with
//! one `id<TAB>transcript` record per line. The id names `images/<id>` or
//! `images/<id>.png`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST_FILE: &str = "lines.tsv";
pub const IMAGE_DIR: &str = "images";

/// Bijection between symbols and class indices `[0, A)`. The blank is `A`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlphabetCodec {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl AlphabetCodec {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        let mut index = HashMap::new();
        let mut dups = Vec::new();
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                dups.push(format!("alphabet repeats symbol {c:?}"));
            }
        }
        if symbols.is_empty() {
            dups.push("alphabet is empty".into());
        }
        if !dups.is_empty() {
            return Err(Error::Config(dups));
        }
        Ok(AlphabetCodec { symbols, index })
    }

    /// Sorted distinct characters of the given transcripts.
    pub fn from_transcripts<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut chars: Vec<char> = lines.into_iter().flat_map(str::chars).collect();
        chars.sort_unstable();
        chars.dedup();
        Self::new(&chars.into_iter().collect::<String>())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn encode(&self, text: &str) -> Result<LabelSeq> {
        text.chars()
            .map(|c| self.index.get(&c).copied().ok_or(Error::UnknownSymbol(c)))
            .collect::<Result<Vec<_>>>()
            .map(LabelSeq)
    }

    /// Blanks and out-of-range indices are dropped.
    pub fn decode(&self, labels: &LabelSeq) -> String {
        labels.0.iter().filter_map(|&i| self.symbols.get(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Recognizes conventional directory names.
    pub fn from_dir_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "train" | "training" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub transcript: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub split: Option<Split>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        let root = root.into();
        let split = root
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(Split::from_dir_name);
        DatasetManifest { root, entries, split }
    }

    /// Reads `root/lines.tsv`. Blank lines are skipped.
    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
        let mut entries = Vec::new();
        let mut problems = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match line.split_once('\t') {
                Some((id, transcript)) if !id.is_empty() => entries.push(ManifestEntry {
                    id: id.to_string(),
                    transcript: transcript.to_string(),
                }),
                _ => problems.push(format!("{MANIFEST_FILE} line {}: expected id<TAB>transcript", n + 1)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self::new(root, entries))
    }

    pub fn write(&self) -> Result<()> {
        let mut f = fs::File::create(self.root.join(MANIFEST_FILE))?;
        for e in &self.entries {
            writeln!(f, "{}\t{}", e.id, e.transcript)?;
        }
        f.sync_all()?;
        Ok(())
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        let dir = self.root.join(IMAGE_DIR);
        let exact = dir.join(id);
        if exact.is_file() {
            exact
        } else {
            dir.join(format!("{id}.png"))
        }
    }
}

/// ITU-R BT.601 luma in `[0, 255]`, row-major.
pub fn luma(img: &DynamicImage) -> (usize, usize, Vec<f64>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = match img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| v as f64).collect(),
        _ => img
            .to_rgb8()
            .pixels()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect(),
    };
    (w, h, plane)
}

/// Bilinear resize to `target_h` rows keeping the aspect ratio. Returns the
/// new width and plane.
pub fn resize_to_height(plane: &[f64], w: usize, h: usize, target_h: usize) -> (usize, Vec<f64>) {
    if h == target_h {
        return (w, plane.to_vec());
    }
    let new_w = ((w as f64 * target_h as f64 / h as f64).round() as usize).max(1);
    let (sx, sy) = (w as f64 / new_w as f64, h as f64 / target_h as f64);
    let mut out = Vec::with_capacity(new_w * target_h);
    for y in 0..target_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
            let bottom = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    (new_w, out)
}

/// Grayscale, height resize and scaling to `[0, 1]`: `(1, target_h, W, 1)`.
pub fn preprocess<T: Real>(img: &DynamicImage, target_h: usize) -> Result<Tensor<T>> {
    let (w, h, plane) = luma(img);
    if w == 0 || h == 0 {
        return Err(Error::Shape {
            op: "preprocess",
            shape: vec![h, w],
            reason: "empty image".into(),
        });
    }
    let (new_w, plane) = resize_to_height(&plane, w, h, target_h);
    let data = plane.into_iter().map(|v| T::from_f64(v / 255.0)).collect();
    Tensor::from_vec(&[1, target_h, new_w, 1], data)
}

pub fn load_image<T: Real>(path: &Path, target_h: usize) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    preprocess(&img, target_h)
}

/// A preprocessed line image with its transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub transcript: String,
    pub labels: LabelSeq,
}

impl<T: Real> Sample<T> {
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Loaded samples plus the entries that failed, with their reasons.
#[derive(Debug)]
pub struct LoadReport<T> {
    pub samples: Vec<Sample<T>>,
    pub failures: Vec<(String, Error)>,
}

pub fn load_and_preprocess<T: Real>(
    manifest: &DatasetManifest,
    codec: &AlphabetCodec,
    target_h: usize,
) -> LoadReport<T> {
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for e in &manifest.entries {
        let loaded = codec.encode(&e.transcript).and_then(|labels| {
            load_image(&manifest.image_path(&e.id), target_h).map(|image| Sample {
                id: e.id.clone(),
                image,
                transcript: e.transcript.clone(),
                labels,
            })
        });
        match loaded {
            Ok(s) => samples.push(s),
            Err(err) => failures.push((e.id.clone(), err)),
        }
    }
    LoadReport { samples, failures }
}

/// Stacks `(1, H, W_i, 1)` images into `(N, H, max W, 1)`, right-padding each
/// row by repeating its last column. Returns the batch and the true widths.
pub fn pad_batch<T: Real>(images: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let h = first.dims4("pad_batch")?[1];
    let mut widths = Vec::with_capacity(images.len());
    for img in images {
        let [n, ih, w, c] = img.dims4("pad_batch")?;
        for (axis, expected, found) in [("batch", 1, n), ("height", h, ih), ("channels", 1, c)] {
            if expected != found {
                return Err(Error::Dimension {
                    op: "pad_batch",
                    axis,
                    expected,
                    found,
                });
            }
        }
        widths.push(w);
    }
    let wmax = widths.iter().copied().max().unwrap_or(0);
    let mut data = Vec::with_capacity(images.len() * h * wmax);
    for (img, &w) in images.iter().zip(&widths) {
        for row in img.data().chunks_exact(w) {
            data.extend_from_slice(row);
            let last = row[w - 1];
            data.extend(std::iter::repeat_n(last, wmax - w));
        }
    }
    Ok((Tensor::from_vec(&[images.len(), h, wmax, 1], data)?, widths))
}
