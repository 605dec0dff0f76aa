use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Labelled images stored as one `(N, C, H, W)` tensor with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: DenseTensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn new(images: DenseTensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        images.expect_ndim(4)?;
        if images.shape()[0] != labels.len() {
            return Err(Error::Input(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, idx: &[usize]) -> (DenseTensor<f32>, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images = DenseTensor::new(vec![idx.len(), c, h, w], data).expect("shape");
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset { images, labels, num_classes: self.num_classes }
    }

    /// Index batches in a seeded random order.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let gz = path.with_file_name(format!("{}.gz", path.file_name().and_then(|n| n.to_str()).unwrap_or_default()));
    let mut bytes = Vec::new();
    if path.exists() {
        File::open(path)?.read_to_end(&mut bytes)?;
    } else if gz.exists() {
        GzDecoder::new(File::open(&gz)?).read_to_end(&mut bytes)?;
    } else {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} (or .gz) not found", path.display()),
        )));
    }
    Ok(bytes)
}

fn be_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Loads MNIST in IDX format from `dir`; plain and `.gz` files are both accepted.
pub fn load_mnist_idx(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img = read_maybe_gz(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let lab = read_maybe_gz(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if be_u32(&img, 0)? != 2051 || be_u32(&lab, 0)? != 2049 {
        return Err(Error::Format("bad IDX magic number".into()));
    }
    let n = be_u32(&img, 4)? as usize;
    let (h, w) = (be_u32(&img, 8)? as usize, be_u32(&img, 12)? as usize);
    if be_u32(&lab, 4)? as usize != n {
        return Err(Error::Format("IDX image and label counts differ".into()));
    }
    let pixels = img.get(16..16 + n * h * w).ok_or_else(|| Error::Format("truncated IDX images".into()))?;
    let labels = lab.get(8..8 + n).ok_or_else(|| Error::Format("truncated IDX labels".into()))?;
    let images = DenseTensor::new(vec![n, 1, h, w], pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), 10)
}

/// Loads CIFAR-10 from the binary distribution (`data_batch_{1..5}.bin`, `test_batch.bin`).
pub fn load_cifar10_bin(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    const REC: usize = 1 + 3072;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = read_maybe_gz(&f)?;
        if bytes.len() % REC != 0 {
            let at = bytes.len() - bytes.len() % REC;
            return Err(Error::Format(format!(
                "{}: truncated record at byte offset {at} ({} of {REC} bytes)",
                f.display(),
                bytes.len() - at
            )));
        }
        for (r, rec) in bytes.chunks(REC).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::Format(format!(
                    "{}: corrupt record at byte offset {}: label {} >= 10",
                    f.display(),
                    r * REC,
                    rec[0]
                )));
            }
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(DenseTensor::new(vec![n, 3, 32, 32], data)?, labels, 10)
}

/// Gaussian-blob images: each class has a random prototype image; samples are the prototype
/// plus isotropic noise, clipped to `[0, 1]`.
pub fn synthetic_blobs(n: usize, classes: usize, shape: [usize; 3], noise: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || n == 0 {
        return Err(Error::Input("synthetic data needs at least one class and one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = shape.iter().product::<usize>();
    let protos: Vec<Vec<f32>> =
        (0..classes).map(|_| (0..per).map(|_| if rng.random_bool(0.5) { 0.9 } else { 0.1 }).collect()).collect();
    let normal = rand_distr::Normal::new(0.0, noise).map_err(|e| Error::Input(e.to_string()))?;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        data.extend(protos[c].iter().map(|&p| (p + rng.sample(normal) as f32).clamp(0.0, 1.0)));
    }
    Dataset::new(DenseTensor::new(vec![n, shape[0], shape[1], shape[2]], data)?, labels, classes)
}

/// Where a dataset comes from, as written in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    MnistIdx {
        path: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Cifar10Bin {
        path: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    SyntheticBlobs {
        train: usize,
        test: usize,
        classes: usize,
        shape: [usize; 3],
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_noise() -> f64 {
    0.2
}

impl DatasetSource {
    pub fn load(&self, split: Split) -> Result<Dataset> {
        let limit = |d: Dataset, tr: &Option<usize>, te: &Option<usize>| match split {
            Split::Train => tr.map_or(d.clone(), |n| d.take(n)),
            Split::Test => te.map_or(d.clone(), |n| d.take(n)),
        };
        match self {
            DatasetSource::MnistIdx { path, train_limit, test_limit } => {
                Ok(limit(load_mnist_idx(path, split)?, train_limit, test_limit))
            }
            DatasetSource::Cifar10Bin { path, train_limit, test_limit } => {
                Ok(limit(load_cifar10_bin(path, split)?, train_limit, test_limit))
            }
            DatasetSource::SyntheticBlobs { train, test, classes, shape, noise, seed } => {
                // same prototypes for both splits, different noise draws
                let all = synthetic_blobs(train + test, *classes, *shape, *noise, *seed)?;
                let idx: Vec<usize> = match split {
                    Split::Train => (0..*train).collect(),
                    Split::Test => (*train..train + test).collect(),
                };
                let (images, labels) = all.batch(&idx);
                Dataset::new(images, labels, *classes)
            }
        }
    }

    /// Replaces a relative path with one under `root`.
    pub fn resolve(&mut self, root: &Path) {
        if let DatasetSource::MnistIdx { path, .. } | DatasetSource::Cifar10Bin { path, .. } = self {
            if path.is_relative() {
                *path = root.join(&*path);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(dir: &Path, prefix: &str, gz: bool) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 51, 102, 255, 255, 0, 0, 1, 2, 3, 4]);
        let mut lab = vec![0, 0, 8, 1, 0, 0, 0, 3];
        lab.extend([7, 3, 0]);
        for (name, bytes) in [("images-idx3-ubyte", img), ("labels-idx1-ubyte", lab)] {
            let p = dir.join(format!("{prefix}-{name}"));
            if gz {
                let f = File::create(p.with_file_name(format!("{prefix}-{name}.gz"))).unwrap();
                let mut e = flate2::write::GzEncoder::new(f, flate2::Compression::fast());
                e.write_all(&bytes).unwrap();
                e.finish().unwrap();
            } else {
                std::fs::write(p, bytes).unwrap();
            }
        }
    }

    #[test]
    fn idx_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        write_idx(dir.path(), "train", false);
        write_idx(dir.path(), "t10k", true);
        for split in [Split::Train, Split::Test] {
            let d = load_mnist_idx(dir.path(), split).unwrap();
            assert_eq!(d.images.shape(), [3, 1, 2, 2]);
            assert_eq!(d.labels, vec![7, 3, 0]);
            let want: Vec<f32> =
                [0u8, 255, 51, 102, 255, 255, 0, 0, 1, 2, 3, 4].iter().map(|&b| b as f32 / 255.0).collect();
            assert_eq!(d.images.data(), &want[..]);
        }
    }

    #[test]
    fn missing_files_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_mnist_idx(dir.path(), Split::Train), Err(Error::Io(_))));
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for (label, base) in [(4u8, 0usize), (9, 7)] {
            bytes.push(label);
            bytes.extend((0..3072).map(|j| ((j + base) % 256) as u8));
        }
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let d = load_cifar10_bin(dir.path(), Split::Test).unwrap();
        assert_eq!(d.images.shape(), [2, 3, 32, 32]);
        assert_eq!(d.labels, vec![4, 9]);
        let px = d.images.data();
        assert_eq!(px[1], 1.0 / 255.0);
        assert_eq!(px[1024], 0.0);
        assert_eq!(px[3072], 7.0 / 255.0);
        assert_eq!(px[3072 + 248], 255.0 / 255.0);

        std::fs::write(dir.path().join("test_batch.bin"), &bytes[..3073 + 100]).unwrap();
        match load_cifar10_bin(dir.path(), Split::Test) {
            Err(Error::Format(m)) => assert!(m.contains("byte offset 3073"), "{m}"),
            other => panic!("{other:?}"),
        }
        bytes[3073] = 10;
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        match load_cifar10_bin(dir.path(), Split::Test) {
            Err(Error::Format(m)) => assert!(m.contains("corrupt record at byte offset 3073"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn swapped_idx_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_idx(dir.path(), "train", false);
        let (img, lab) = (dir.path().join("train-images-idx3-ubyte"), dir.path().join("train-labels-idx1-ubyte"));
        let tmp = dir.path().join("swap");
        std::fs::rename(&img, &tmp).unwrap();
        std::fs::rename(&lab, &img).unwrap();
        std::fs::rename(&tmp, &lab).unwrap();
        match load_mnist_idx(dir.path(), Split::Train) {
            Err(Error::Format(m)) => assert!(m.contains("magic"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let a = synthetic_blobs(40, 2, [1, 4, 4], 0.1, 3).unwrap();
        let b = synthetic_blobs(40, 2, [1, 4, 4], 0.1, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 20);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batches_cover_everything() {
        let d = synthetic_blobs(10, 2, [1, 2, 2], 0.1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all: Vec<usize> = d.shuffled_batches(3, &mut rng).concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (x, y) = d.batch(&[9, 0]);
        assert_eq!(x.shape(), [2, 1, 2, 2]);
        assert_eq!(y, vec![1, 0]);
    }
}
