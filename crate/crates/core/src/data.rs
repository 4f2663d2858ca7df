//! Datasets: MNIST (IDX files), the CIFAR-10 binary format, and small
//! synthetic 2-D problems.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, IdxError, Result};
use crate::tensor::Tensor;

/// Samples stored row-major, one flattened input per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub sample_len: usize,
}

impl Split {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, sample_len: usize) -> Result<Self> {
        if inputs.len() != labels.len() * sample_len {
            return Err(Error::Dataset(format!(
                "{} values do not make {} samples of length {sample_len}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            sample_len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.sample_len..(i + 1) * self.sample_len]
    }

    /// Gather the given rows into a `[n, ..input_shape]` tensor.
    pub fn batch(&self, indices: &[usize], input_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let shape = [vec![indices.len()], input_shape.to_vec()].concat();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs[..n * self.sample_len].to_vec(),
            labels: self.labels[..n].to_vec(),
            sample_len: self.sample_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    /// Keep at most `train` / `test` samples of each split.
    pub fn subsample(mut self, train: Option<usize>, test: Option<usize>) -> Self {
        if let Some(n) = train {
            self.train = self.train.take(n);
        }
        if let Some(n) = test {
            self.test = self.test.take(n);
        }
        self
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        }
        .into());
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    check_len(path, bytes, 4)?;
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

/// Decode an IDX image file into `(pixels in [0, 1], rows, cols)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(Vec<f64>, usize, usize, usize)> {
    check_magic(path, bytes, IDX_IMAGES)?;
    check_len(path, bytes, 16)?;
    let (n, rows, cols) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    check_len(path, bytes, 16 + n * rows * cols)?;
    let pixels = bytes[16..16 + n * rows * cols]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok((pixels, n, rows, cols))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(path, bytes, IDX_LABELS)?;
    check_len(path, bytes, 8)?;
    let n = be_u32(bytes, 4) as usize;
    check_len(path, bytes, 8 + n)?;
    Ok(bytes[8..8 + n].iter().map(|&b| usize::from(b)).collect())
}

fn read(path: PathBuf) -> Result<(PathBuf, Vec<u8>)> {
    let bytes = fs::read(&path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?;
    Ok((path, bytes))
}

fn load_idx_split(dir: &Path, prefix: &str) -> Result<(Split, Vec<usize>)> {
    let (ipath, ibytes) = read(dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let (lpath, lbytes) = read(dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    let (pixels, n, rows, cols) = parse_idx_images(&ipath, &ibytes)?;
    let labels = parse_idx_labels(&lpath, &lbytes)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Dataset(format!("{}: label {bad} outside 0..10", lpath.display())));
    }
    Ok((Split::new(pixels, labels, rows * cols)?, vec![1, rows, cols]))
}

/// Load the four standard MNIST IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let (train, shape) = load_idx_split(dir, "train")?;
    let (test, _) = load_idx_split(dir, "t10k")?;
    Ok(Dataset {
        name: "mnist".into(),
        input_shape: shape,
        classes: 10,
        train,
        test,
    })
}

/// Load the CIFAR-10 binary batches (`data_batch_1..5.bin`,
/// `test_batch.bin`) from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    let load = |names: &[String]| -> Result<Split> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for name in names {
            let (path, bytes) = read(dir.join(name))?;
            if bytes.len() % RECORD != 0 {
                return Err(Error::Dataset(format!(
                    "{}: {} bytes is not a whole number of records",
                    path.display(),
                    bytes.len()
                )));
            }
            for rec in bytes.chunks(RECORD) {
                if rec[0] >= 10 {
                    return Err(Error::Dataset(format!("{}: label {}", path.display(), rec[0])));
                }
                labels.push(usize::from(rec[0]));
                inputs.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
            }
        }
        Split::new(inputs, labels, 3 * 32 * 32)
    };
    let train_names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    Ok(Dataset {
        name: "cifar10".into(),
        input_shape: vec![3, 32, 32],
        classes: 10,
        train: load(&train_names)?,
        test: load(&["test_batch.bin".to_string()])?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    Blobs,
    Moons,
}

pub const BLOB_CENTERS: [[f64; 2]; 2] = [[0.25, 0.25], [0.75, 0.75]];

/// Two-class 2-D points in the unit square, `n` of them split evenly
/// between classes (train) plus `n` more drawn the same way (test).
///
/// Blobs are isotropic Gaussians of standard deviation `noise` around
/// [`BLOB_CENTERS`]; moons are two interleaved half circles with Gaussian
/// jitter `noise`. Points are clamped to `[0, 1]²`.
pub fn make_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Dataset("need at least two samples".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Dataset(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |count: usize| -> Result<Split> {
        let mut inputs = Vec::with_capacity(2 * count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let y = i % 2;
            let (cx, cy) = match kind {
                SyntheticKind::Blobs => (BLOB_CENTERS[y][0], BLOB_CENTERS[y][1]),
                SyntheticKind::Moons => {
                    let t = std::f64::consts::PI * rand::Rng::random::<f64>(&mut rng);
                    if y == 0 {
                        (0.35 + 0.3 * t.cos(), 0.4 + 0.3 * t.sin())
                    } else {
                        (0.65 - 0.3 * t.cos(), 0.6 - 0.3 * t.sin())
                    }
                }
            };
            let dx: f64 = normal.sample(&mut rng);
            let dy: f64 = normal.sample(&mut rng);
            inputs.push((cx + noise * dx).clamp(0.0, 1.0));
            inputs.push((cy + noise * dy).clamp(0.0, 1.0));
            labels.push(y);
        }
        Split::new(inputs, labels, 2)
    };
    let train = draw(n)?;
    let test = draw(n)?;
    Ok(Dataset {
        name: match kind {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Moons => "moons",
        }
        .into(),
        input_shape: vec![2],
        classes: 2,
        train,
        test,
    })
}

/// Sample order for one epoch, reproducible from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, bytes: usize) -> Vec<u8> {
        let mut v = IDX_IMAGES.to_be_bytes().to_vec();
        for d in [n, 2, 2] {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend(std::iter::repeat_n(255u8, bytes));
        v
    }

    #[test]
    fn idx_images_decode_and_scale() {
        let (px, n, r, c) = parse_idx_images(Path::new("img"), &idx_images(2, 8)).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert!(px.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn idx_errors_are_distinct() {
        let p = Path::new("f");
        assert!(matches!(
            parse_idx_images(p, &idx_images(2, 7)),
            Err(Error::Idx(IdxError::Truncated { .. }))
        ));
        let mut bad = idx_images(1, 4);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(p, &bad), Err(Error::Idx(IdxError::BadMagic { .. }))));
    }

    #[test]
    fn count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        for prefix in ["train", "t10k"] {
            fs::write(dir.path().join(format!("{prefix}-images-idx3-ubyte")), idx_images(2, 8)).unwrap();
            let mut l = IDX_LABELS.to_be_bytes().to_vec();
            l.extend_from_slice(&3u32.to_be_bytes());
            l.extend_from_slice(&[1, 2, 3]);
            fs::write(dir.path().join(format!("{prefix}-labels-idx1-ubyte")), l).unwrap();
        }
        assert!(matches!(
            load_mnist(dir.path()),
            Err(Error::Idx(IdxError::CountMismatch { images: 2, labels: 3 }))
        ));
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = make_synthetic(SyntheticKind::Moons, 50, 0.05, 3).unwrap();
        let b = make_synthetic(SyntheticKind::Moons, 50, 0.05, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.train.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noiseless_blobs_sit_on_centers() {
        let d = make_synthetic(SyntheticKind::Blobs, 10, 0.0, 1).unwrap();
        for i in 0..d.train.len() {
            assert_eq!(d.train.sample(i), &BLOB_CENTERS[d.train.labels[i]]);
        }
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(20, 5, 2);
        assert_eq!(o, epoch_order(20, 5, 2));
        assert_ne!(o, epoch_order(20, 5, 3));
        o.sort();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }
}
