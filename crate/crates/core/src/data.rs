//! Dataset ingestion, normalization, subsetting, and synthetic data.
//!
//! Supported on-disk formats: IDX (MNIST-style, plain or gzip) and the
//! CIFAR-10 binary batch format. Pixels are scaled to [0,1] by /255 with no
//! further normalization. Loading is byte-driven and deterministic.
//!
//! Because this crate runs in offline environments, there is also a
//! procedural digit generator that renders MNIST-like 28x28 glyphs and can
//! write them out as ordinary IDX files, so the whole pipeline (including the
//! real loaders) works without any downloaded data.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::round_half_up;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Integer class ids, each < num_classes.
    Classes(Vec<usize>),
    /// Real-valued target rows (e.g. one-hot regression targets).
    Real(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
    pub num_classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets, num_classes: usize, split: SplitTag) -> Result<Self> {
        let n = inputs.rows();
        match &targets {
            Targets::Classes(ids) => {
                if ids.len() != n {
                    return Err(Error::Data(format!(
                        "{} inputs but {} labels",
                        n,
                        ids.len()
                    )));
                }
                if let Some(&bad) = ids.iter().find(|&&id| id >= num_classes) {
                    return Err(Error::Data(format!(
                        "class id {bad} out of range (num_classes = {num_classes})"
                    )));
                }
            }
            Targets::Real(t) => {
                if t.rows() != n {
                    return Err(Error::Data(format!("{} inputs but {} target rows", n, t.rows())));
                }
                if t.cols() != num_classes {
                    return Err(Error::Data(format!(
                        "target rows have {} columns, expected {num_classes}",
                        t.cols()
                    )));
                }
            }
        }
        Ok(Dataset { inputs, targets, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Class id of sample i; for real targets, the argmax (ties -> lower).
    pub fn label(&self, i: usize) -> usize {
        match &self.targets {
            Targets::Classes(ids) => ids[i],
            Targets::Real(t) => {
                let row = t.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            }
        }
    }

    /// Targets as an [n, num_classes] matrix (one-hot for class labels).
    pub fn target_matrix(&self) -> Tensor {
        match &self.targets {
            Targets::Real(t) => t.clone(),
            Targets::Classes(ids) => {
                let c = self.num_classes;
                let mut data = vec![0.0; ids.len() * c];
                for (i, &id) in ids.iter().enumerate() {
                    data[i * c + id] = 1.0;
                }
                Tensor::new(vec![ids.len(), c], data)
            }
        }
    }

    /// New dataset from the given sample indices, in the given order.
    pub fn select(&self, indices: &[usize], split: SplitTag) -> Dataset {
        let d = self.input_dim();
        let mut inputs = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            inputs.extend_from_slice(self.inputs.row(i));
        }
        let targets = match &self.targets {
            Targets::Classes(ids) => Targets::Classes(indices.iter().map(|&i| ids[i]).collect()),
            Targets::Real(t) => {
                let k = t.cols();
                let mut rows = Vec::with_capacity(indices.len() * k);
                for &i in indices {
                    rows.extend_from_slice(t.row(i));
                }
                Targets::Real(Tensor::new(vec![indices.len(), k], rows))
            }
        };
        Dataset {
            inputs: Tensor::new(vec![indices.len(), d], inputs),
            targets,
            num_classes: self.num_classes,
            split,
        }
    }

    /// First n samples in dataset order.
    pub fn take(&self, n: usize, split: SplitTag) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx, split)
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1F && raw[1] == 0x8B {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: gzip decode failed: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let chunk: [u8; 4] = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Data("truncated IDX header".into()))?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(chunk))
}

/// Parse IDX image bytes (magic 0x00000803) into an [n, h, w] tensor in [0,1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::Data(format!("bad IDX image magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "IDX image payload is {} bytes, expected {expected} for {n}x{h}x{w}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![n, h, w], data))
}

/// Parse IDX label bytes (magic 0x00000801) into class ids.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0000_0801 {
        return Err(Error::Data(format!("bad IDX label magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Data(format!(
            "IDX label payload is {} bytes, expected {} for {n} labels",
            bytes.len(),
            8 + n
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Load an IDX image/label file pair (plain or gzip) as a flat-input dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: SplitTag) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gzip(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gzip(labels_path)?)?;
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    let (h, w) = (images.shape()[1], images.shape()[2]);
    let inputs = images.reshaped(vec![n, h * w]);
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, Targets::Classes(labels), num_classes, split)
}

/// Resolve the conventional IDX file names under a directory, accepting
/// either plain files or their .gz variants.
pub fn idx_pair_in_dir(dir: &Path, split: SplitTag) -> Result<(PathBuf, PathBuf)> {
    let (img, lab) = match split {
        SplitTag::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        _ => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    };
    let resolve = |name: &str| -> Result<PathBuf> {
        let plain = dir.join(name);
        if plain.exists() {
            return Ok(plain);
        }
        let gz = dir.join(format!("{name}.gz"));
        if gz.exists() {
            return Ok(gz);
        }
        Err(Error::Data(format!("{} not found under {}", name, dir.display())))
    };
    Ok((resolve(img)?, resolve(lab)?))
}

const CIFAR_RECORD: usize = 3073;

fn parse_cifar_records(bytes: &[u8], inputs: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "CIFAR-10 payload of {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        inputs.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Load CIFAR-10 binary batches. `path` may be a single .bin file or a
/// directory; for a directory, the train split reads data_batch_1..5.bin and
/// the test split reads test_batch.bin. Inputs are rows of 3072 values in
/// CHW order scaled to [0,1].
pub fn load_cifar10_binary(path: &Path, split: SplitTag) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        match split {
            SplitTag::Test => vec![path.join("test_batch.bin")],
            _ => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        if !f.exists() {
            return Err(Error::Data(format!("{} not found", f.display())));
        }
        parse_cifar_records(&std::fs::read(f)?, &mut inputs, &mut labels)?;
    }
    let n = labels.len();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, 3072], inputs), Targets::Classes(labels), num_classes, split)
}

/// The two-digit regression subset: the first `per_class` samples of each of
/// the two classes, kept in dataset order, with one-hot 2-vector targets
/// ([1,0] for the first class).
pub fn binary_digit_subset(ds: &Dataset, classes: (usize, usize), per_class: usize) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::Data("per_class must be positive".into()));
    }
    let mut counts = [0usize; 2];
    let mut picked = Vec::new();
    let mut onehots = Vec::new();
    for i in 0..ds.len() {
        let label = ds.label(i);
        let slot = if label == classes.0 {
            0
        } else if label == classes.1 {
            1
        } else {
            continue;
        };
        if counts[slot] == per_class {
            continue;
        }
        counts[slot] += 1;
        picked.push(i);
        onehots.push(slot);
        if counts == [per_class; 2] {
            break;
        }
    }
    if counts != [per_class; 2] {
        return Err(Error::Data(format!(
            "need {per_class} samples of classes {} and {}, found {} and {}",
            classes.0, classes.1, counts[0], counts[1]
        )));
    }
    let base = ds.select(&picked, ds.split);
    let mut targets = vec![0.0; picked.len() * 2];
    for (row, &slot) in onehots.iter().enumerate() {
        targets[row * 2 + slot] = 1.0;
    }
    Dataset::new(
        base.inputs,
        Targets::Real(Tensor::new(vec![picked.len(), 2], targets)),
        2,
        ds.split,
    )
}

/// Seeded shuffle, then split off round(n * val_fraction) samples as the
/// validation set (the first of the shuffled order); the rest form the train
/// set, also in shuffled order.
pub fn split_train_val(ds: &Dataset, val_fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val fraction must be in [0,1), got {val_fraction}")));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    let val_n = round_half_up(ds.len() as f64 * val_fraction);
    let val = ds.select(&order[..val_n], SplitTag::Val);
    let train = ds.select(&order[val_n..], SplitTag::Train);
    Ok((train, val))
}

/// Linear regression fixture: standard-normal inputs with coordinates
/// outside the support zeroed, targets y = a*^T x (+ optional noise) for a
/// seeded ground truth a* that also lives on the support. Returns the
/// dataset and a*.
pub fn synthetic_linear_dataset(
    d: usize,
    n: usize,
    support: &[bool],
    noise_std: f64,
    rng: &mut Rng,
) -> Result<(Dataset, Tensor)> {
    if support.len() != d {
        return Err(Error::Config(format!("support mask has {} entries, want {d}", support.len())));
    }
    let mut astar = vec![0.0; d];
    for (k, a) in astar.iter_mut().enumerate() {
        let draw = rng.normal(1.0);
        if support[k] {
            *a = draw;
        }
    }
    let mut inputs = vec![0.0; n * d];
    let mut targets = vec![0.0; n];
    for i in 0..n {
        let mut y = 0.0;
        for k in 0..d {
            let draw = rng.normal(1.0);
            if support[k] {
                inputs[i * d + k] = draw;
                y += astar[k] * draw;
            }
        }
        if noise_std > 0.0 {
            y += rng.normal(noise_std);
        }
        targets[i] = y;
    }
    let ds = Dataset::new(
        Tensor::new(vec![n, d], inputs),
        Targets::Real(Tensor::new(vec![n, 1], targets)),
        1,
        SplitTag::Train,
    )?;
    Ok((ds, Tensor::from_vec(astar)))
}

// ---------------------------------------------------------------------------
// Procedural digit corpus.

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, k: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(k + 1);
    for i in 0..=k {
        let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
        pts.push((cx + rx * t.cos(), cy + ry * t.sin()));
    }
    pts
}

/// Stroke waypoints for each digit in normalized [0,1]^2 coordinates
/// (x right, y down).
fn digit_strokes(digit: usize) -> Vec<Vec<(f64, f64)>> {
    match digit {
        0 => vec![ellipse(0.50, 0.50, 0.30, 0.40, 12)],
        1 => vec![vec![(0.38, 0.30), (0.56, 0.10), (0.56, 0.92)]],
        2 => vec![vec![
            (0.22, 0.30),
            (0.30, 0.13),
            (0.50, 0.08),
            (0.70, 0.13),
            (0.78, 0.30),
            (0.70, 0.48),
            (0.24, 0.90),
            (0.80, 0.90),
        ]],
        3 => vec![vec![
            (0.24, 0.16),
            (0.42, 0.08),
            (0.64, 0.10),
            (0.74, 0.26),
            (0.62, 0.44),
            (0.46, 0.48),
            (0.64, 0.52),
            (0.78, 0.68),
            (0.66, 0.88),
            (0.42, 0.94),
            (0.22, 0.84),
        ]],
        4 => vec![
            vec![(0.58, 0.08), (0.22, 0.60), (0.84, 0.60)],
            vec![(0.66, 0.32), (0.66, 0.94)],
        ],
        5 => vec![vec![
            (0.74, 0.10),
            (0.30, 0.10),
            (0.26, 0.46),
            (0.50, 0.40),
            (0.72, 0.50),
            (0.76, 0.68),
            (0.60, 0.88),
            (0.28, 0.84),
        ]],
        6 => vec![vec![
            (0.66, 0.08),
            (0.44, 0.20),
            (0.30, 0.42),
            (0.27, 0.66),
            (0.38, 0.86),
            (0.60, 0.88),
            (0.72, 0.72),
            (0.68, 0.54),
            (0.48, 0.48),
            (0.30, 0.58),
        ]],
        7 => vec![vec![(0.20, 0.10), (0.80, 0.10), (0.44, 0.92)]],
        8 => vec![ellipse(0.50, 0.29, 0.21, 0.20, 10), ellipse(0.50, 0.71, 0.25, 0.21, 10)],
        9 => vec![
            ellipse(0.52, 0.30, 0.22, 0.22, 10),
            vec![(0.74, 0.32), (0.72, 0.60), (0.60, 0.92)],
        ],
        _ => unreachable!("digit out of range"),
    }
}

const GLYPH: usize = 28;

/// Render one jittered glyph to a 28x28 grayscale image in [0,1].
fn render_digit(digit: usize, rng: &mut Rng) -> Vec<f64> {
    let rot = rng.uniform(-0.20, 0.20);
    let sx = rng.uniform(0.80, 1.10);
    let sy = rng.uniform(0.80, 1.10);
    let dx = rng.uniform(-2.5, 2.5);
    let dy = rng.uniform(-2.5, 2.5);
    let sigma = rng.uniform(0.65, 1.15);
    let amp = rng.uniform(0.75, 1.0);
    let (cos_r, sin_r) = (rot.cos(), rot.sin());
    let place = |(u, v): (f64, f64)| -> (f64, f64) {
        let px = (u - 0.5) * 20.0 * sx;
        let py = (v - 0.5) * 20.0 * sy;
        (px * cos_r - py * sin_r + 13.5 + dx, px * sin_r + py * cos_r + 13.5 + dy)
    };
    let mut canvas = vec![0.0f64; GLYPH * GLYPH];
    let mut stamp = |x: f64, y: f64| {
        let r = (3.0 * sigma).ceil() as i64;
        let (cx, cy) = (x.round() as i64, y.round() as i64);
        for py in (cy - r).max(0)..=(cy + r).min(GLYPH as i64 - 1) {
            for px in (cx - r).max(0)..=(cx + r).min(GLYPH as i64 - 1) {
                let d2 = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
                let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                let cell = &mut canvas[py as usize * GLYPH + px as usize];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    };
    for stroke in digit_strokes(digit) {
        for seg in stroke.windows(2) {
            let a = place(seg[0]);
            let b = place(seg[1]);
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            let steps = (len / 0.25).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                stamp(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            }
        }
    }
    for cell in canvas.iter_mut() {
        *cell = (*cell + rng.uniform(0.0, 0.06)).clamp(0.0, 1.0);
    }
    canvas
}

/// Generate `count` synthetic digit images as raw u8 pixels plus labels.
/// Labels cycle 0..9 so every prefix is nearly class-balanced, and sample i
/// is rendered from its own stream so prefixes are stable across counts.
pub fn synthetic_digits(count: usize, seed: u64, stream_offset: u64) -> (Vec<u8>, Vec<u8>) {
    let base = Rng::new(seed);
    let mut pixels = Vec::with_capacity(count * GLYPH * GLYPH);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let digit = i % 10;
        let mut r = base.stream(stream_offset + i as u64);
        let img = render_digit(digit, &mut r);
        pixels.extend(img.iter().map(|&v| (v * 255.0).round() as u8));
        labels.push(digit as u8);
    }
    (pixels, labels)
}

/// Encode IDX image/label files (uncompressed).
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    n: usize,
    h: usize,
    w: usize,
    labels: &[u8],
) -> Result<()> {
    assert_eq!(pixels.len(), n * h * w);
    assert_eq!(labels.len(), n);
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    std::fs::write(images_path, img)?;
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    std::fs::write(labels_path, lab)?;
    Ok(())
}

const TEST_STREAM_OFFSET: u64 = 1 << 32;

/// Write a full synthetic digit corpus under `dir` using the conventional
/// MNIST file names, so it can be loaded back through `load_idx`.
pub fn write_synthetic_corpus(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (train_px, train_lab) = synthetic_digits(train_n, seed, 0);
    write_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        &train_px,
        train_n,
        GLYPH,
        GLYPH,
        &train_lab,
    )?;
    let (test_px, test_lab) = synthetic_digits(test_n, seed, TEST_STREAM_OFFSET);
    write_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        &test_px,
        test_n,
        GLYPH,
        GLYPH,
        &test_lab,
    )?;
    Ok(())
}

/// In-memory synthetic digit dataset (same pixels as the written corpus).
pub fn synthetic_digits_dataset(count: usize, seed: u64, split: SplitTag) -> Result<Dataset> {
    let offset = if split == SplitTag::Test { TEST_STREAM_OFFSET } else { 0 };
    let (pixels, labels) = synthetic_digits(count, seed, offset);
    let inputs: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![count, GLYPH * GLYPH], inputs),
        Targets::Classes(labels.iter().map(|&b| b as usize).collect()),
        10,
        split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx_bytes(n: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend((0..n * 784).map(|i| (i % 256) as u8));
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        lab.extend((0..n).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn idx_header_maps_to_shape() {
        let (img, _) = tiny_idx_bytes(2);
        let t = parse_idx_images(&img).unwrap();
        assert_eq!(t.shape(), &[2, 28, 28]);
    }

    #[test]
    fn pixel_255_maps_to_one() {
        let (mut img, _) = tiny_idx_bytes(1);
        img[16] = 255;
        let t = parse_idx_images(&img).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn labels_magic_on_images_is_error() {
        let (_, lab) = tiny_idx_bytes(2);
        assert!(matches!(parse_idx_images(&lab), Err(Error::Data(_))));
    }

    #[test]
    fn truncated_idx_is_error() {
        let (img, _) = tiny_idx_bytes(2);
        assert!(matches!(parse_idx_images(&img[..img.len() - 3]), Err(Error::Data(_))));
    }

    #[test]
    fn load_idx_roundtrip_plain_and_gzip() {
        use std::io::Write as _;
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = tiny_idx_bytes(3);
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let ds = load_idx(&ip, &lp, SplitTag::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_dim(), 784);
        assert_eq!(ds.label(1), 1);

        let gz_path = dir.path().join("img.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&img).unwrap();
        std::fs::write(&gz_path, enc.finish().unwrap()).unwrap();
        let ds2 = load_idx(&gz_path, &lp, SplitTag::Train).unwrap();
        assert_eq!(ds2.inputs, ds.inputs);
    }

    #[test]
    fn count_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = tiny_idx_bytes(3);
        let (_, lab) = tiny_idx_bytes(2);
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp, SplitTag::Train), Err(Error::Data(_))));
    }

    #[test]
    fn cifar_records_parse_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 9;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 3;
        let f = dir.path().join("batch.bin");
        std::fs::write(&f, &bytes).unwrap();
        let ds = load_cifar10_binary(&f, SplitTag::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim(), 3072);
        assert_eq!(ds.label(0), 9);
        assert_eq!(ds.label(1), 3);
        assert_eq!(ds.inputs.data()[0], 1.0);

        std::fs::write(dir.path().join("bad.bin"), &bytes[..100]).unwrap();
        assert!(load_cifar10_binary(&dir.path().join("bad.bin"), SplitTag::Train).is_err());
    }

    #[test]
    fn cifar_directory_resolution() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            let mut rec = vec![0u8; CIFAR_RECORD];
            rec[0] = i as u8;
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), &rec).unwrap();
        }
        let mut test_rec = vec![0u8; CIFAR_RECORD];
        test_rec[0] = 7;
        std::fs::write(dir.path().join("test_batch.bin"), &test_rec).unwrap();
        let train = load_cifar10_binary(dir.path(), SplitTag::Train).unwrap();
        assert_eq!(train.len(), 5);
        assert_eq!(train.label(0), 1);
        let test = load_cifar10_binary(dir.path(), SplitTag::Test).unwrap();
        assert_eq!(test.len(), 1);
        assert_eq!(test.label(0), 7);
    }

    fn labeled_dataset(labels: &[usize]) -> Dataset {
        let n = labels.len();
        let inputs: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
        Dataset::new(
            Tensor::new(vec![n, 2], inputs),
            Targets::Classes(labels.to_vec()),
            10,
            SplitTag::Train,
        )
        .unwrap()
    }

    #[test]
    fn binary_subset_keeps_dataset_order_and_onehot() {
        let ds = labeled_dataset(&[0, 1, 0, 1, 2, 0]);
        let sub = binary_digit_subset(&ds, (0, 1), 2).unwrap();
        assert_eq!(sub.len(), 4);
        // Samples 0,1,2,3 in original order.
        assert_eq!(sub.inputs.row(0), ds.inputs.row(0));
        assert_eq!(sub.inputs.row(3), ds.inputs.row(3));
        let t = sub.target_matrix();
        assert_eq!(t.row(0), &[1.0, 0.0]);
        assert_eq!(t.row(1), &[0.0, 1.0]);
        // Repeated calls identical.
        assert_eq!(binary_digit_subset(&ds, (0, 1), 2).unwrap(), sub);
    }

    #[test]
    fn binary_subset_insufficient_samples() {
        let ds = labeled_dataset(&[0, 1, 0, 1, 2, 0]);
        assert!(binary_digit_subset(&ds, (0, 1), 3).is_err());
        assert!(binary_digit_subset(&ds, (0, 1), 0).is_err());
    }

    #[test]
    fn split_sizes_and_multiset_union() {
        let ds = labeled_dataset(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let (train, val) = split_train_val(&ds, 0.1, &mut Rng::new(5)).unwrap();
        assert_eq!(val.len(), 1);
        assert_eq!(train.len(), 9);
        let mut seen: Vec<usize> = Vec::new();
        for i in 0..train.len() {
            seen.push(train.label(i));
        }
        for i in 0..val.len() {
            seen.push(val.label(i));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());

        let (_, empty) = split_train_val(&ds, 0.0, &mut Rng::new(5)).unwrap();
        assert_eq!(empty.len(), 0);
    }

    #[test]
    fn linear_fixture_support_and_targets() {
        let support = [true, false, true, false];
        let (ds, astar) = synthetic_linear_dataset(4, 20, &support, 0.0, &mut Rng::new(9)).unwrap();
        assert_eq!(astar.data()[1], 0.0);
        assert_eq!(astar.data()[3], 0.0);
        let y = ds.target_matrix();
        for i in 0..ds.len() {
            let x = ds.inputs.row(i);
            assert_eq!(x[1], 0.0);
            assert_eq!(x[3], 0.0);
            let dot: f64 = x.iter().zip(astar.data()).map(|(a, b)| a * b).sum();
            assert!((dot - y.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_digits_deterministic_with_stable_prefix() {
        let (a, la) = synthetic_digits(20, 42, 0);
        let (b, lb) = synthetic_digits(40, 42, 0);
        assert_eq!(a, b[..a.len()]);
        assert_eq!(la, lb[..20]);
        assert_eq!(la[3], 3);
        assert_eq!(la[13], 3);
    }

    #[test]
    fn synthetic_corpus_roundtrips_through_idx_loader() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_corpus(dir.path(), 30, 10, 7).unwrap();
        let (ip, lp) = idx_pair_in_dir(dir.path(), SplitTag::Train).unwrap();
        let train = load_idx(&ip, &lp, SplitTag::Train).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(train.num_classes, 10);
        let direct = synthetic_digits_dataset(30, 7, SplitTag::Train).unwrap();
        assert_eq!(train.inputs, direct.inputs);
        let (tip, tlp) = idx_pair_in_dir(dir.path(), SplitTag::Test).unwrap();
        let test = load_idx(&tip, &tlp, SplitTag::Test).unwrap();
        assert_ne!(test.inputs.row(0), train.inputs.row(0));
    }
}
