//! Dataset ingestion and batching.
//!
//! MNIST arrives as IDX files (big-endian magic + dims, u8 payload), CIFAR-10
//! as 3073-byte records (label byte + 3072 RGB bytes). Pixels are scaled to
//! [0,1] by division with 255 and never mean-centered, so perturbation
//! budgets are expressed in raw pixel units.
//!
//! [`synth`] writes deterministic stand-in datasets in the same binary
//! formats, for environments without the canonical files.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in [0,1] with shape [N, C, H, W] plus integer labels in 0..=9.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "dataset",
                shape: shape.to_vec(),
                reason: format!("expected [N,C,H,W] with N == {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::InvalidConfig(format!("label {bad} out of range")));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidConfig("pixel outside [0,1]".into()));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Pixels per image (C*H*W).
    pub fn sample_len(&self) -> usize {
        self.images.len() / self.len().max(1)
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Materialize a subset in the given index order.
    pub fn gather(&self, idx: &[u32]) -> Dataset {
        let k = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * k);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let i = i as usize;
            data.extend_from_slice(&self.images.data()[i * k..(i + 1) * k]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Dataset {
            images: Tensor::new(shape, data).expect("gather shape"),
            labels,
        }
    }

    pub fn bit_eq(&self, other: &Dataset) -> bool {
        self.labels == other.labels && self.images.bit_eq(&other.images)
    }
}

/// The two halves of a training set: one for fitting the update rule, one
/// for the frozen transfer runs.
#[derive(Debug, Clone)]
pub struct FoldPair {
    pub meta_fold: Dataset,
    pub transfer_fold: Dataset,
}

/// Deterministic shuffle by seed, then split in half; the first (meta) fold
/// takes the extra sample when N is odd.
pub fn split_twofold(d: &Dataset, seed: u64) -> FoldPair {
    let mut idx: Vec<u32> = (0..d.len() as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = d.len().div_ceil(2);
    FoldPair {
        meta_fold: d.gather(&idx[..cut]),
        transfer_fold: d.gather(&idx[cut..]),
    }
}

/// Shuffled sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..n as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
    idx.shuffle(&mut rng);
    idx
}

pub fn one_hot(labels: &[u8]) -> Tensor {
    Tensor::from_fn(&[labels.len(), CLASSES], |i| {
        if labels[i / CLASSES] as usize == i % CLASSES {
            1.0
        } else {
            0.0
        }
    })
}

/// Endless mini-batch stream: a fresh shuffle every epoch, short final
/// batches dropped, labels served one-hot.
pub struct BatchStream<'a> {
    data: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<u32>,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        BatchStream {
            data,
            batch_size,
            seed,
            epoch: 0,
            cursor: 0,
            order: epoch_order(data.len(), seed, 0),
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.batch_size
    }

    /// Next (images, one-hot labels) pair.
    pub fn next_batch(&mut self) -> (Tensor, Tensor) {
        assert!(
            self.batches_per_epoch() > 0,
            "dataset smaller than one batch"
        );
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.data.len(), self.seed, self.epoch);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        let sub = self.data.gather(idx);
        (sub.images.clone(), one_hot(&sub.labels))
    }
}

// ---- MNIST (IDX format) ----

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?)
        .read_to_end(&mut out)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(out)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::data(path.display().to_string(), "truncated header"))
}

pub fn mnist_file_names(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

/// Load one MNIST split from canonical IDX files in `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (img_name, lbl_name) = mnist_file_names(split);
    let img_path = dir.join(img_name);
    let lbl_path = dir.join(lbl_name);
    let img_bytes = read_all(&img_path)?;
    let lbl_bytes = read_all(&lbl_path)?;

    let magic = be_u32(&img_bytes, 0, &img_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::data(
            img_path.display().to_string(),
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img_bytes, 4, &img_path)? as usize;
    let rows = be_u32(&img_bytes, 8, &img_path)? as usize;
    let cols = be_u32(&img_bytes, 12, &img_path)? as usize;
    let want = 16 + n * rows * cols;
    if img_bytes.len() != want {
        return Err(Error::data(
            img_path.display().to_string(),
            format!("expected {want} bytes, found {}", img_bytes.len()),
        ));
    }

    let lbl_magic = be_u32(&lbl_bytes, 0, &lbl_path)?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(Error::data(
            lbl_path.display().to_string(),
            format!("bad magic {lbl_magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = be_u32(&lbl_bytes, 4, &lbl_path)? as usize;
    if lbl_bytes.len() != 8 + n_labels {
        return Err(Error::data(
            lbl_path.display().to_string(),
            format!("expected {} bytes, found {}", 8 + n_labels, lbl_bytes.len()),
        ));
    }
    if n != n_labels {
        return Err(Error::data(
            dir.display().to_string(),
            format!("{n} images but {n_labels} labels"),
        ));
    }

    let pixels: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], pixels)?,
        lbl_bytes[8..].to_vec(),
    )
}

// ---- CIFAR-10 (binary batches) ----

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 pixels
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Load one CIFAR-10 split from the binary batch files in `dir`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<&str> = match split {
        Split::Train => CIFAR_TRAIN_FILES.to_vec(),
        Split::Test => vec![CIFAR_TEST_FILE],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = read_all(&path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::data(
                path.display().to_string(),
                format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels)
}

pub mod synth {
    //! Deterministic synthetic datasets written in the canonical binary
    //! formats. Each class is a fixed arrangement of smooth bumps plus pixel
    //! noise, which makes the tasks learnable by small models in a few dozen
    //! steps.

    use std::fs;
    use std::io::Write;
    use std::path::Path;

    use super::*;

    fn class_template(class: u8, h: usize, w: usize, channel: usize) -> Vec<f64> {
        // Three bumps at class-specific positions.
        let mut img = vec![0.0f64; h * w];
        let k = class as f64;
        let centers = [
            (
                4.0 + 2.3 * ((k * 2.39 + channel as f64).sin() * 0.5 + 0.5) * (h as f64 - 8.0) / 2.0,
                4.0 + ((k * 1.17).cos() * 0.5 + 0.5) * (w as f64 - 8.0),
            ),
            (
                h as f64 - 5.0 - ((k * 0.83 + 1.1).sin() * 0.5 + 0.5) * (h as f64 - 10.0) * 0.5,
                4.0 + ((k * 2.71 + channel as f64 * 0.37).sin() * 0.5 + 0.5) * (w as f64 - 8.0),
            ),
            (
                h as f64 / 2.0 + (k - 4.5) * 0.8,
                w as f64 / 2.0 + ((k * 1.93).cos()) * (w as f64 / 3.0),
            ),
        ];
        let sigma2 = 2.0 * 2.4f64.powi(2);
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for &(cy, cx) in &centers {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v += (-d2 / sigma2).exp();
                }
                img[y * w + x] = v.min(1.0);
            }
        }
        img
    }

    fn render(class: u8, channels: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut out = Vec::with_capacity(channels * h * w);
        for c in 0..channels {
            let template = class_template(class, h, w, c);
            for &t in &template {
                let noise: f64 = rng.gen_range(-0.12..0.12);
                let v = (t * 0.9 + noise).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
        let mut f =
            fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn idx_images(samples: &[Vec<u8>], h: usize, w: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + samples.len() * h * w);
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&(samples.len() as u32).to_be_bytes());
        out.extend_from_slice(&(h as u32).to_be_bytes());
        out.extend_from_slice(&(w as u32).to_be_bytes());
        for s in samples {
            out.extend_from_slice(s);
        }
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    /// Write `train-*`/`t10k-*` IDX files with 28x28 single-channel images.
    pub fn write_mnist(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (split, n) in [(Split::Train, train_n), (Split::Test, test_n)] {
            let tag = match split {
                Split::Train => 0u64,
                Split::Test => 1,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (tag << 32));
            let mut labels = Vec::with_capacity(n);
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let class = rng.gen_range(0..CLASSES) as u8;
                labels.push(class);
                samples.push(render(class, 1, 28, 28, &mut rng));
            }
            let (img_name, lbl_name) = mnist_file_names(split);
            write_file(&dir.join(img_name), &idx_images(&samples, 28, 28))?;
            write_file(&dir.join(lbl_name), &idx_labels(&labels))?;
        }
        Ok(())
    }

    /// Write the five train batches plus the test batch with 32x32 RGB
    /// records, `per_batch` records each.
    pub fn write_cifar10(dir: &Path, per_batch: usize, test_n: usize, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1fa);
        for (i, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
            let _ = i;
            let mut bytes = Vec::with_capacity(per_batch * CIFAR_RECORD);
            for _ in 0..per_batch {
                let class = rng.gen_range(0..CLASSES) as u8;
                bytes.push(class);
                bytes.extend(render(class, 3, 32, 32, &mut rng));
            }
            write_file(&dir.join(name), &bytes)?;
        }
        let mut bytes = Vec::with_capacity(test_n * CIFAR_RECORD);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1fb);
        for _ in 0..test_n {
            let class = rng.gen_range(0..CLASSES) as u8;
            bytes.push(class);
            bytes.extend(render(class, 3, 32, 32, &mut rng));
        }
        write_file(&dir.join(CIFAR_TEST_FILE), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// Minimal independent IDX reader: header by index math, no shared code
    /// with `load_mnist`.
    fn idx_oracle_first_label(path: &Path) -> u8 {
        let bytes = std::fs::read(path).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 1]);
        bytes[8]
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let images = Tensor::from_fn(&[n, 1, 2, 2], |i| (i % 4) as f64 / 4.0);
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new(images, labels).unwrap()
    }

    #[test]
    fn mnist_roundtrip_through_canonical_files() {
        let dir = tempdir().unwrap();
        synth::write_mnist(dir.path(), 64, 16, 9).unwrap();
        let train = load_mnist(dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 64);
        assert_eq!(train.images().shape(), &[64, 1, 28, 28]);
        let test = load_mnist(dir.path(), Split::Test).unwrap();
        assert_eq!(test.len(), 16);
        // Byte 255 -> 1.0, byte 0 -> 0.0.
        assert!(train.images().data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        // Reloading is bit-identical.
        let again = load_mnist(dir.path(), Split::Train).unwrap();
        assert!(train.bit_eq(&again));
        // First label agrees with the independent reader.
        let (_, lbl_name) = mnist_file_names(Split::Train);
        let first = idx_oracle_first_label(&dir.path().join(lbl_name));
        assert!(first < 10);
        assert_eq!(train.labels()[0], first);
    }

    #[test]
    fn mnist_normalization_endpoints() {
        // Hand-built 2-sample IDX pair: one all-zero image, one all-255.
        let dir = tempdir().unwrap();
        let mut img = vec![0u8, 0, 8, 3];
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 0, 0, 0, 255, 255, 255, 255]);
        let mut lbl = vec![0u8, 0, 8, 1];
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 3]);
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), &lbl).unwrap();
        let d = load_mnist(dir.path(), Split::Train).unwrap();
        assert_eq!(d.images().data()[0], 0.0);
        assert_eq!(d.images().data()[4], 1.0);
        assert_eq!(d.labels(), &[7, 3]);
    }

    #[test]
    fn mnist_error_paths() {
        let dir = tempdir().unwrap();
        // Bad magic.
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), [9u8; 32]).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), [9u8; 32]).unwrap();
        let err = load_mnist(dir.path(), Split::Train).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        // Count mismatch between images and labels.
        let mut img = vec![0u8, 0, 8, 3];
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.push(0);
        let mut lbl = vec![0u8, 0, 8, 1];
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[1, 2]);
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), &lbl).unwrap();
        let err = load_mnist(dir.path(), Split::Train).unwrap_err().to_string();
        assert!(err.contains("labels"), "{err}");

        // Truncated image payload.
        let mut img = vec![0u8, 0, 8, 3];
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[1, 2, 3]); // needs 8
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        assert!(load_mnist(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn cifar_roundtrip_and_record_arithmetic() {
        let dir = tempdir().unwrap();
        synth::write_cifar10(dir.path(), 6, 4, 3).unwrap();
        let train = load_cifar10(dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 5 * 6);
        assert_eq!(train.images().shape(), &[30, 3, 32, 32]);
        let test = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(test.len(), 4);
    }

    #[test]
    fn cifar_zero_record_and_label_byte() {
        let dir = tempdir().unwrap();
        // One record per train file: label = file index, all-zero pixels in
        // batch 1, all-255 in the rest.
        for (i, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
            let mut rec = vec![if i == 4 { 9u8 } else { i as u8 }];
            rec.extend(vec![if i == 0 { 0u8 } else { 255u8 }; 3072]);
            std::fs::write(dir.path().join(name), &rec).unwrap();
        }
        let d = load_cifar10(dir.path(), Split::Train).unwrap();
        assert_eq!(d.len(), 5);
        assert!(d.images().data()[..3072].iter().all(|&p| p == 0.0));
        assert_eq!(d.labels()[4], 9);
    }

    #[test]
    fn cifar_rejects_partial_records() {
        let dir = tempdir().unwrap();
        for name in CIFAR_TRAIN_FILES {
            std::fs::write(dir.path().join(name), vec![0u8; 3073]).unwrap();
        }
        std::fs::write(dir.path().join(CIFAR_TRAIN_FILES[2]), vec![0u8; 3072]).unwrap();
        assert!(load_cifar10(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn split_halves_and_determinism() {
        let d = tiny_dataset(60);
        let folds = split_twofold(&d, 5);
        assert_eq!(folds.meta_fold.len(), 30);
        assert_eq!(folds.transfer_fold.len(), 30);
        let again = split_twofold(&d, 5);
        assert!(folds.meta_fold.bit_eq(&again.meta_fold));
        assert!(folds.transfer_fold.bit_eq(&again.transfer_fold));
        let other = split_twofold(&d, 6);
        assert!(!folds.meta_fold.bit_eq(&other.meta_fold));
    }

    #[test]
    fn split_odd_count_rounds_up_to_meta_fold() {
        let d = tiny_dataset(3);
        let folds = split_twofold(&d, 1);
        assert_eq!(folds.meta_fold.len(), 2);
        assert_eq!(folds.transfer_fold.len(), 1);
    }

    #[test]
    fn split_is_a_partition() {
        // Tag each sample by a unique pixel value and check the multiset.
        let n = 31;
        let images = Tensor::from_fn(&[n, 1, 1, 1], |i| i as f64 / n as f64);
        let labels = vec![0u8; n];
        let d = Dataset::new(images, labels).unwrap();
        let folds = split_twofold(&d, 42);
        let mut seen: Vec<f64> = folds
            .meta_fold
            .images()
            .data()
            .iter()
            .chain(folds.transfer_fold.images().data())
            .cloned()
            .collect();
        seen.sort_by(f64::total_cmp);
        let want: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        assert_eq!(seen, want);
    }

    #[test]
    fn batches_drop_short_tail_and_one_hot() {
        let d = tiny_dataset(300);
        let mut stream = BatchStream::new(&d, 128, 7);
        assert_eq!(stream.batches_per_epoch(), 2);
        let (images, labels) = stream.next_batch();
        assert_eq!(images.shape(), &[128, 1, 2, 2]);
        assert_eq!(labels.shape(), &[128, 10]);
        for row in labels.data().chunks(10) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn epoch_indices_form_a_permutation_subset() {
        // With N=300 and batch 128, one epoch consumes a 256-element subset
        // of a 300-permutation: all indices distinct.
        let order = epoch_order(300, 9, 0);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 300);
        let used: Vec<u32> = order[..256].to_vec();
        let mut u = used.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 256);
    }

    #[test]
    fn stream_is_deterministic_per_seed() {
        let d = tiny_dataset(50);
        let mut a = BatchStream::new(&d, 16, 3);
        let mut b = BatchStream::new(&d, 16, 3);
        for _ in 0..7 {
            let (ia, la) = a.next_batch();
            let (ib, lb) = b.next_batch();
            assert!(ia.bit_eq(&ib) && la.bit_eq(&lb));
        }
    }
}
