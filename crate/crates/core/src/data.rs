//! Dataset ingestion: MNIST-style IDX files and CIFAR-10 binary batches, plus
//! a deterministic synthetic glyph dataset that is written in those exact file
//! formats so the loaders can be exercised end to end without the originals.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Published per-channel statistics used to normalize CIFAR-10 after scaling
/// to [0, 1]; fixed in code for reproducibility.
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803; // 2051
const IDX_LABELS_MAGIC: u32 = 0x0000_0801; // 2049
const CIFAR_RECORD: usize = 3073;

/// An in-memory split: normalized images plus integer labels.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub images: Tensor4,
    pub labels: Vec<u32>,
    pub split: String,
    pub classes: usize,
}

impl DatasetHandle {
    pub fn new(
        images: Tensor4,
        labels: Vec<u32>,
        split: impl Into<String>,
        classes: usize,
    ) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::Dimension {
                axis: "labels",
                expected: images.batch(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(DatasetHandle {
            images,
            labels,
            split: split.into(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "unexpected end of file".into(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected 0x00000803"),
        });
    }
    let count = read_u32_be(&bytes, 4, path)? as usize;
    let rows = read_u32_be(&bytes, 8, path)? as usize;
    let cols = read_u32_be(&bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected) as u64,
            message: format!(
                "expected {expected} bytes for {count} images, got {}",
                bytes.len()
            ),
        });
    }
    Ok((count, rows, cols, bytes[16..].to_vec()))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected 0x00000801"),
        });
    }
    let count = read_u32_be(&bytes, 4, path)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected) as u64,
            message: format!(
                "expected {expected} bytes for {count} labels, got {}",
                bytes.len()
            ),
        });
    }
    Ok(bytes[8..].to_vec())
}

fn load_idx_split(dir: &Path, images: &str, labels: &str, split: &str) -> Result<DatasetHandle> {
    let (count, rows, cols, pixels) = read_idx_images(&dir.join(images))?;
    let raw_labels = read_idx_labels(&dir.join(labels))?;
    if raw_labels.len() != count {
        return Err(Error::Dimension {
            axis: "labels",
            expected: count,
            got: raw_labels.len(),
        });
    }
    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor4::from_vec(count, 1, rows, cols, data)?;
    DatasetHandle::new(
        images,
        raw_labels.iter().map(|&b| b as u32).collect(),
        split,
        10,
    )
}

/// Load the IDX image/label pairs `train-images-idx3-ubyte` etc. from a
/// directory. Pixels are scaled to [0, 1].
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(DatasetHandle, DatasetHandle)> {
    let dir = dir.as_ref();
    let train = load_idx_split(
        dir,
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "train",
    )?;
    let test = load_idx_split(
        dir,
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
        "test",
    )?;
    Ok((train, test))
}

fn parse_cifar_file(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<u32>) -> Result<usize> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!(
                "file length {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let count = bytes.len() / CIFAR_RECORD;
    for rec in 0..count {
        let base = rec * CIFAR_RECORD;
        labels.push(bytes[base] as u32);
        for ch in 0..3 {
            let mean = CIFAR10_MEAN[ch];
            let std = CIFAR10_STD[ch];
            let plane = &bytes[base + 1 + ch * 1024..base + 1 + (ch + 1) * 1024];
            images.extend(plane.iter().map(|&b| (b as f32 / 255.0 - mean) / std));
        }
    }
    Ok(count)
}

/// Load the binary batch files (`data_batch_1.bin` .. `data_batch_5.bin`,
/// `test_batch.bin`): one label byte then the three 1024-byte channel planes
/// per record. Pixels are scaled to [0, 1] and normalized by the fixed
/// per-channel statistics.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(DatasetHandle, DatasetHandle)> {
    let dir = dir.as_ref();
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        parse_cifar_file(
            &dir.join(format!("data_batch_{i}.bin")),
            &mut train_images,
            &mut train_labels,
        )?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    parse_cifar_file(
        &dir.join("test_batch.bin"),
        &mut test_images,
        &mut test_labels,
    )?;

    let train = DatasetHandle::new(
        Tensor4::from_vec(train_labels.len(), 3, 32, 32, train_images)?,
        train_labels,
        "train",
        10,
    )?;
    let test = DatasetHandle::new(
        Tensor4::from_vec(test_labels.len(), 3, 32, 32, test_images)?,
        test_labels,
        "test",
        10,
    )?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// synthetic glyph dataset
// ---------------------------------------------------------------------------

type Segment = ((f32, f32), (f32, f32));

/// Seven-segment-style strokes per class in a canonical unit square.
fn glyph_segments(class: usize) -> Vec<Segment> {
    let a = ((0.22, 0.16), (0.78, 0.16));
    let b = ((0.78, 0.16), (0.78, 0.5));
    let c = ((0.78, 0.5), (0.78, 0.84));
    let d = ((0.22, 0.84), (0.78, 0.84));
    let e = ((0.22, 0.5), (0.22, 0.84));
    let f = ((0.22, 0.16), (0.22, 0.5));
    let g = ((0.22, 0.5), (0.78, 0.5));
    match class {
        0 => vec![a, b, c, d, e, f],
        1 => vec![b, c],
        2 => vec![a, b, g, e, d],
        3 => vec![a, b, g, c, d],
        4 => vec![f, g, b, c],
        5 => vec![a, f, g, c, d],
        6 => vec![a, f, g, e, c, d],
        7 => vec![a, b, c],
        8 => vec![a, b, c, d, e, f, g],
        _ => vec![a, b, c, d, f, g],
    }
}

fn segment_distance(p: (f32, f32), seg: &Segment) -> f32 {
    let ((x1, y1), (x2, y2)) = *seg;
    let (dx, dy) = (x2 - x1, y2 - y1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - x1) * dx + (p.1 - y1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x1 + t * dx, y1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Render one glyph as `side x side` grayscale bytes with a random affine
/// jitter and pixel noise.
fn render_glyph(rng: &mut ChaCha8Rng, class: usize, side: usize) -> Vec<u8> {
    let segs = glyph_segments(class);
    let angle: f32 = rng.random_range(-0.26f32..0.26);
    let scale: f32 = rng.random_range(0.85f32..1.15);
    let tx: f32 = rng.random_range(-0.1f32..0.1);
    let ty: f32 = rng.random_range(-0.1f32..0.1);
    let thickness: f32 = rng.random_range(0.05f32..0.085);
    let intensity: f32 = rng.random_range(0.75f32..1.0);
    let (sin, cos) = angle.sin_cos();

    let mut out = Vec::with_capacity(side * side);
    for yi in 0..side {
        for xi in 0..side {
            // map the pixel back into the canonical glyph frame
            let px = (xi as f32 + 0.5) / side as f32 - 0.5 - tx;
            let py = (yi as f32 + 0.5) / side as f32 - 0.5 - ty;
            let cx = (cos * px + sin * py) / scale + 0.5;
            let cy = (-sin * px + cos * py) / scale + 0.5;
            let dist = segs
                .iter()
                .map(|s| segment_distance((cx, cy), s))
                .fold(f32::INFINITY, f32::min);
            let ink = ((thickness - dist) / (0.5 * thickness)).clamp(0.0, 1.0) * intensity;
            let noise: f32 = rng.random_range(-0.06f32..0.06);
            out.push(((ink + noise).clamp(0.0, 1.0) * 255.0) as u8);
        }
    }
    out
}

fn synth_labels(rng: &mut ChaCha8Rng, count: usize) -> Vec<u8> {
    (0..count).map(|_| rng.random_range(0..10u8)).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_idx_pair(
    dir: &Path,
    images_name: &str,
    labels_name: &str,
    count: usize,
    side: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let labels = synth_labels(rng, count);
    let mut image_bytes = Vec::with_capacity(16 + count * side * side);
    image_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(count as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(side as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(side as u32).to_be_bytes());
    for &label in &labels {
        image_bytes.extend_from_slice(&render_glyph(rng, label as usize, side));
    }
    write_file(&dir.join(images_name), &image_bytes)?;

    let mut label_bytes = Vec::with_capacity(8 + count);
    label_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(count as u32).to_be_bytes());
    label_bytes.extend_from_slice(&labels);
    write_file(&dir.join(labels_name), &label_bytes)
}

/// Write a deterministic synthetic glyph dataset in MNIST's IDX layout
/// (28x28 grayscale, 10 classes). Intended as a loader fixture and as a
/// stand-in corpus on machines without the real files.
pub fn write_synth_mnist(
    dir: impl AsRef<Path>,
    train: usize,
    test: usize,
    seed: u64,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    write_idx_pair(
        dir,
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        train,
        28,
        &mut rng,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    write_idx_pair(
        dir,
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
        test,
        28,
        &mut rng,
    )?;
    Ok(dir.to_path_buf())
}

/// Write a small synthetic dataset in the CIFAR-10 binary batch layout
/// (32x32 RGB glyphs). `per_batch` records go into each of the five training
/// batches, `test` into the test batch.
pub fn write_synth_cifar10(
    dir: impl AsRef<Path>,
    per_batch: usize,
    test: usize,
    seed: u64,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let write_batch = |name: &str, count: usize, seed: u64| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = synth_labels(&mut rng, count);
        let mut bytes = Vec::with_capacity(count * CIFAR_RECORD);
        for &label in &labels {
            bytes.push(label);
            let gray = render_glyph(&mut rng, label as usize, 32);
            // tint the glyph with a random color per sample
            let tint = [
                rng.random_range(0.6f32..1.0),
                rng.random_range(0.6f32..1.0),
                rng.random_range(0.6f32..1.0),
            ];
            for t in tint {
                bytes.extend(gray.iter().map(|&g| (g as f32 * t) as u8));
            }
        }
        write_file(&dir.join(name), &bytes)
    };
    for i in 1..=5 {
        write_batch(
            &format!("data_batch_{i}.bin"),
            per_batch,
            seed.wrapping_add(i),
        )?;
    }
    write_batch("test_batch.bin", test, seed.wrapping_add(99))?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_roundtrip_and_second_parser_agree() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_mnist(dir.path(), 50, 20, 7).unwrap();
        let (train, test) = load_mnist(dir.path()).unwrap();
        assert_eq!(train.len(), 50);
        assert_eq!(test.len(), 20);
        assert_eq!(train.images.shape(), (50, 1, 28, 28));
        assert!(train
            .images
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));

        // independent minimal parser: manual offsets, no shared code path
        let bytes = std::fs::read(dir.path().join("t10k-images-idx3-ubyte")).unwrap();
        assert_eq!(u32::from_be_bytes(bytes[0..4].try_into().unwrap()), 2051);
        let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(n, 20);
        // pixel histogram of test image 0 must match the loader's tensor
        let img0 = &bytes[16..16 + 28 * 28];
        let mut hist = [0usize; 256];
        for &b in img0 {
            hist[b as usize] += 1;
        }
        let mut hist_loaded = [0usize; 256];
        for &v in &test.images.data()[..28 * 28] {
            hist_loaded[(v * 255.0).round() as usize] += 1;
        }
        assert_eq!(hist, hist_loaded);

        // deterministic: loading twice yields identical tensors
        let (train2, _) = load_mnist(dir.path()).unwrap();
        assert_eq!(train.images.data(), train2.images.data());
        assert_eq!(train.labels, train2.labels);
    }

    #[test]
    fn idx_bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_mnist(dir.path(), 5, 5, 1).unwrap();
        let path = dir.path().join("train-images-idx3-ubyte");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] = 0x42;
        std::fs::write(&path, &bytes).unwrap();
        match load_mnist(dir.path()).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn idx_truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_mnist(dir.path(), 5, 5, 1).unwrap();
        let path = dir.path().join("train-images-idx3-ubyte");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_mnist(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn cifar_record_layout_and_second_parser() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_cifar10(dir.path(), 6, 4, 11).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 4);
        assert_eq!(train.images.shape(), (30, 3, 32, 32));

        // byte 0 is the label; bytes 1..3073 are the R, G, B planes
        let bytes = std::fs::read(dir.path().join("data_batch_1.bin")).unwrap();
        assert_eq!(bytes.len() % 3073, 0);
        assert_eq!(train.labels[0], bytes[0] as u32);
        // checksum of the first image: un-normalize the tensor and compare
        let mut sum_raw = 0u64;
        for &b in &bytes[1..3073] {
            sum_raw += b as u64;
        }
        let mut sum_loaded = 0u64;
        for ch in 0..3 {
            let plane = &train.images.data()[ch * 1024..(ch + 1) * 1024];
            for &v in plane {
                let b = ((v * CIFAR10_STD[ch] + CIFAR10_MEAN[ch]) * 255.0).round() as u64;
                sum_loaded += b;
            }
        }
        assert_eq!(sum_raw, sum_loaded);
    }

    #[test]
    fn cifar_missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn cifar_truncated_record_is_format_error_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_cifar10(dir.path(), 3, 2, 5).unwrap();
        let path = dir.path().join("data_batch_2.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        match load_cifar10(dir.path()).unwrap_err() {
            Error::Format {
                path: p, offset, ..
            } => {
                assert!(p.ends_with("data_batch_2.bin"));
                assert_eq!(offset, 2 * 3073);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn glyph_classes_are_distinct() {
        // average rendered glyphs differ clearly between classes
        let mut means = Vec::new();
        for class in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + class as u64);
            let mut acc = vec![0f64; 28 * 28];
            for _ in 0..8 {
                for (a, &b) in acc.iter_mut().zip(render_glyph(&mut rng, class, 28).iter()) {
                    *a += b as f64;
                }
            }
            means.push(acc);
        }
        for i in 0..10 {
            for j in (i + 1)..10 {
                let diff: f64 = means[i]
                    .iter()
                    .zip(means[j].iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(diff > 1000.0, "classes {i} and {j} look identical");
            }
        }
    }
}
