//! Dataset ingestion: IDX ubyte files and a synthetic difficulty-graded
//! generator.
//!
//! Synthetic samples are a pure function of (seed, sample index): each
//! class owns a coarse template pattern; easy samples show it at high
//! SNR, hard samples at low SNR with a distractor class blended in. The
//! hard fraction is `difficulty_mix`. Train and validation draw from
//! disjoint index ranges of the same generator.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::extract_patches;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

// ChaCha stream ids; the trainer itself runs on stream 0.
const TEMPLATE_STREAM: u64 = 1_000;
const SAMPLE_STREAM: u64 = 1_000_000;

/// One split of labeled images, stored as [N, 3, H, W] floats in [0, 1].
#[derive(Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// Difficulty tags (synthetic data only; all false for IDX sources).
    pub hard: Vec<bool>,
    pub image_size: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    /// Gather a batch and flatten it into patch vectors [B, P, 3·p²].
    pub fn batch_patches(&self, idxs: &[usize], patch_size: usize) -> Result<Tensor> {
        let ppi = self.pixels_per_image();
        let mut data = Vec::with_capacity(idxs.len() * ppi);
        for &i in idxs {
            if i >= self.len() {
                return Err(Error::Input(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images[i * ppi..(i + 1) * ppi]);
        }
        let images = Tensor::from_vec(
            vec![idxs.len(), 3, self.image_size, self.image_size],
            data,
        )?;
        extract_patches(&images, self.image_size, patch_size)
    }

    pub fn labels_for(&self, idxs: &[usize]) -> Vec<usize> {
        idxs.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Clone)]
pub struct DatasetHandle {
    pub train: Dataset,
    pub val: Dataset,
}

impl DatasetHandle {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }
}

// ── IDX ubyte ───────────────────────────────────────────────────────

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated while reading a 4-byte field at offset {offset}"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

/// Grayscale image file: magic, count, rows, cols, then raw bytes.
fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("image payload truncated: need {need} bytes, have {}", bytes.len()),
        });
    }
    Ok((n, rows, cols, &bytes[16..need]))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("label payload truncated: need {need} bytes, have {}", bytes.len()),
        });
    }
    Ok(&bytes[8..need])
}

/// Nearest-neighbor resize of one grayscale image, replicated to three
/// channels and normalized to [0, 1].
fn gray_to_rgb_resized(
    src: &[u8],
    rows: usize,
    cols: usize,
    target: usize,
    out: &mut Vec<f32>,
) {
    let mut plane = Vec::with_capacity(target * target);
    for y in 0..target {
        let sy = y * rows / target;
        for x in 0..target {
            let sx = x * cols / target;
            plane.push(src[sy * cols + sx] as f32 / 255.0);
        }
    }
    for _ in 0..3 {
        out.extend_from_slice(&plane);
    }
}

fn load_idx_split(
    images_path: &Path,
    labels_path: &Path,
    num_classes: usize,
    target_size: usize,
) -> Result<Dataset> {
    let image_bytes = read_file(images_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let label_bytes = read_file(labels_path)?;
    let labels_raw = parse_idx_labels(&label_bytes)?;
    if labels_raw.len() != n {
        return Err(Error::Format {
            offset: 8,
            msg: format!("{} labels for {} images", labels_raw.len(), n),
        });
    }
    let mut labels = Vec::with_capacity(n);
    for (i, &l) in labels_raw.iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Input(format!(
                "label {l} at sample {i} out of range for {num_classes} classes"
            )));
        }
        labels.push(l);
    }
    let mut images = Vec::with_capacity(n * 3 * target_size * target_size);
    for i in 0..n {
        gray_to_rgb_resized(
            &pixels[i * rows * cols..(i + 1) * rows * cols],
            rows,
            cols,
            target_size,
            &mut images,
        );
    }
    Ok(Dataset {
        images,
        labels,
        hard: vec![false; n],
        image_size: target_size,
        num_classes,
    })
}

/// Load the conventional IDX file quartet from a directory:
/// `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.
pub fn load_idx(dir: &Path, num_classes: usize, target_size: usize) -> Result<DatasetHandle> {
    let train = load_idx_split(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        num_classes,
        target_size,
    )?;
    let val = load_idx_split(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        num_classes,
        target_size,
    )?;
    Ok(DatasetHandle { train, val })
}

// ── Synthetic ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Fraction of hard (low-SNR, distractor-blended) samples.
    pub difficulty_mix: f64,
    pub seed: u64,
}

const TEMPLATE_GRID: usize = 4;
const EASY_GAIN: f32 = 0.45;
const EASY_NOISE: f32 = 0.05;
const HARD_GAIN: f32 = 0.16;
const HARD_DISTRACTOR: f32 = 0.12;
const HARD_NOISE: f32 = 0.30;

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Coarse per-class pattern in [-1, 1], upsampled nearest to full size.
fn class_template(seed: u64, class: usize, image_size: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TEMPLATE_STREAM + class as u64);
    let coarse: Vec<f32> = (0..3 * TEMPLATE_GRID * TEMPLATE_GRID)
        .map(|_| rng.random::<f32>() * 2.0 - 1.0)
        .collect();
    let mut out = Vec::with_capacity(3 * image_size * image_size);
    for ch in 0..3 {
        for y in 0..image_size {
            let cy = y * TEMPLATE_GRID / image_size;
            for x in 0..image_size {
                let cx = x * TEMPLATE_GRID / image_size;
                out.push(coarse[ch * TEMPLATE_GRID * TEMPLATE_GRID + cy * TEMPLATE_GRID + cx]);
            }
        }
    }
    out
}

fn generate_sample(
    spec: &SyntheticSpec,
    templates: &[Vec<f32>],
    index: u64,
    out: &mut Vec<f32>,
) -> (usize, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(SAMPLE_STREAM + index);
    let label = rng.random_range(0..spec.num_classes);
    let hard = rng.random::<f64>() < spec.difficulty_mix;
    let distractor = {
        // Draw unconditionally to keep the stream layout independent of
        // the difficulty decision.
        let other = rng.random_range(0..spec.num_classes.saturating_sub(1).max(1));
        if other >= label { (other + 1) % spec.num_classes } else { other }
    };
    let (gain, noise) = if hard { (HARD_GAIN, HARD_NOISE) } else { (EASY_GAIN, EASY_NOISE) };
    let t = &templates[label];
    let td = &templates[distractor];
    for i in 0..t.len() {
        let mut v = 0.5 + gain * t[i];
        if hard {
            v += HARD_DISTRACTOR * td[i];
        }
        v += noise * standard_normal(&mut rng) as f32;
        out.push(v.clamp(0.0, 1.0));
    }
    (label, hard)
}

fn synthesize_range(spec: &SyntheticSpec, templates: &[Vec<f32>], range: std::ops::Range<u64>) -> Dataset {
    let n = (range.end - range.start) as usize;
    let mut images = Vec::with_capacity(n * 3 * spec.image_size * spec.image_size);
    let mut labels = Vec::with_capacity(n);
    let mut hard = Vec::with_capacity(n);
    for idx in range {
        let (l, h) = generate_sample(spec, templates, idx, &mut images);
        labels.push(l);
        hard.push(h);
    }
    Dataset {
        images,
        labels,
        hard,
        image_size: spec.image_size,
        num_classes: spec.num_classes,
    }
}

/// Deterministic synthetic dataset; identical spec gives identical bytes.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<DatasetHandle> {
    if !(0.0..=1.0).contains(&spec.difficulty_mix) {
        return Err(Error::Config(format!(
            "difficulty_mix must be in [0, 1], got {}",
            spec.difficulty_mix
        )));
    }
    if spec.num_classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if spec.train_size == 0 || spec.val_size == 0 {
        return Err(Error::Config("synthetic split sizes must be positive".into()));
    }
    let templates: Vec<Vec<f32>> = (0..spec.num_classes)
        .map(|c| class_template(spec.seed, c, spec.image_size))
        .collect();
    let train = synthesize_range(spec, &templates, 0..spec.train_size as u64);
    let val = synthesize_range(
        spec,
        &templates,
        spec.train_size as u64..(spec.train_size + spec.val_size) as u64,
    );
    Ok(DatasetHandle { train, val })
}
