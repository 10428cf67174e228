//! Datasets: IDX and CIFAR-10 binary files, synthetic generators, splits.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3072;
pub const CIFAR_CLASSES: usize = 10;

/// Noise scale of the synthetic generators, in units of the smallest
/// distance between class means.
pub const DEFAULT_SEPARATION: f32 = 6.0;
/// Rate patterns additionally pass through Poisson sampling, so they get
/// less pixel jitter by default.
pub const RATE_SEPARATION: f32 = 12.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Input(format!(
                "images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.index_first(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let [c, h, w] = self.image_shape();
        let inner = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * inner..(i + 1) * inner]);
        }
        Dataset {
            images: Tensor::from_vec(&[indices.len(), c, h, w], data).expect("sizes agree"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Deterministic shuffled split; returns `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&test_fraction) {
            return Err(Error::Input(format!(
                "test fraction must be in [0, 1], got {test_fraction}"
            )));
        }
        let perm = Rng::new(seed).permutation(self.len());
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        Ok((self.subset(&perm[n_test..]), self.subset(&perm[..n_test])))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn need(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// IDX image file (`[N, rows, cols]` unsigned bytes) plus label file.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let ib = read(images)?;
    need(images, &ib, 16)?;
    let magic = be_u32(&ib, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let (n, h, w) = (
        be_u32(&ib, 4) as usize,
        be_u32(&ib, 8) as usize,
        be_u32(&ib, 12) as usize,
    );
    need(images, &ib, 16 + n * h * w)?;

    let lb = read(labels)?;
    need(labels, &lb, 8)?;
    let magic = be_u32(&lb, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let nl = be_u32(&lb, 4) as usize;
    need(labels, &lb, 8 + nl)?;
    if nl != n {
        return Err(Error::Input(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            n,
            labels.display(),
            nl
        )));
    }
    let mut label_vec = Vec::with_capacity(n);
    for &b in &lb[8..8 + n] {
        let l = b as usize;
        if l >= classes {
            return Err(Error::LabelOutOfRange {
                path: labels.to_path_buf(),
                label: l,
                classes,
            });
        }
        label_vec.push(l);
    }
    let pixels = ib[16..16 + n * h * w].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(Tensor::from_vec(&[n, 1, h, w], pixels)?, label_vec, classes)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Inverse of [`load_idx`] for single-channel datasets.
pub fn save_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::Input(format!(
            "IDX images are single-channel, dataset has {c} channels"
        )));
    }
    let mut ib = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(ds.images.data().iter().map(|&v| to_byte(v)));
    let mut lb = Vec::with_capacity(8 + ds.len());
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        lb.push(u8::try_from(l).map_err(|_| Error::Input(format!("label {l} does not fit a byte")))?);
    }
    write_atomic(images, &ib)?;
    write_atomic(labels, &lb)
}

/// A directory with `train-images-idx3-ubyte` / `train-labels-idx1-ubyte`
/// and optionally the matching `t10k-*` test files.
pub fn load_idx_dir(dir: &Path, classes: usize) -> Result<(Dataset, Option<Dataset>)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        classes,
    )?;
    let ti = dir.join("t10k-images-idx3-ubyte");
    let test = if ti.exists() {
        Some(load_idx(&ti, &dir.join("t10k-labels-idx1-ubyte"), classes)?)
    } else {
        None
    };
    Ok((train, test))
}

/// One CIFAR-10 binary batch: records of 1 label byte + 3072 CHW pixel bytes.
pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: (bytes.len() / CIFAR_RECORD + 1) * CIFAR_RECORD,
            found: bytes.len(),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let l = rec[0] as usize;
        if l >= CIFAR_CLASSES {
            return Err(Error::LabelOutOfRange {
                path: path.to_path_buf(),
                label: l,
                classes: CIFAR_CLASSES,
            });
        }
        labels.push(l);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], pixels)?, labels, CIFAR_CLASSES)
}

pub fn save_cifar10_file(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.image_shape() != [3, 32, 32] {
        return Err(Error::Input(format!(
            "CIFAR-10 images are [3,32,32], got {:?}",
            ds.image_shape()
        )));
    }
    let mut bytes = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        bytes.push(ds.labels[i] as u8);
        bytes.extend(ds.image(i).data().iter().map(|&v| to_byte(v)));
    }
    write_atomic(path, &bytes)
}

/// A single batch file, or a directory with `data_batch_*.bin` (train) and
/// `test_batch.bin` (test).
pub fn load_cifar10_binary(path: &Path) -> Result<(Dataset, Option<Dataset>)> {
    if path.is_file() {
        return Ok((load_cifar10_file(path)?, None));
    }
    let mut batches: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    batches.sort();
    if batches.is_empty() {
        return Err(Error::Input(format!("no data_batch_*.bin files in {}", path.display())));
    }
    let parts = batches
        .iter()
        .map(|p| load_cifar10_file(p))
        .collect::<Result<Vec<_>>>()?;
    let train = concat(&parts)?;
    let tp = path.join("test_batch.bin");
    let test = if tp.exists() {
        Some(load_cifar10_file(&tp)?)
    } else {
        None
    };
    Ok((train, test))
}

fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let [c, h, w] = parts[0].image_shape();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    Dataset::new(
        Tensor::from_vec(&[labels.len(), c, h, w], data)?,
        labels,
        parts[0].classes,
    )
}

fn gaussian_clusters(means: &[Tensor], n: usize, separation: f32, shape: [usize; 3], rng: &mut Rng) -> Dataset {
    let k = means.len();
    let mut min_dist = f32::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let d: f32 = means[a]
                .data()
                .iter()
                .zip(means[b].data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f32>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    // isotropic pixel noise: its projection on any mean-difference direction
    // has the same std, so the closest pair sits `separation` std apart
    let pixel_sigma = if min_dist.is_finite() {
        min_dist / separation
    } else {
        0.0
    };
    let order = rng.permutation(n);
    let [c, h, w] = shape;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for &o in &order {
        let label = o % k;
        labels.push(label);
        for &m in means[label].data() {
            data.push((m + rng.normal(0.0, pixel_sigma)).clamp(0.0, 1.0));
        }
    }
    Dataset {
        images: Tensor::from_vec(&[n, c, h, w], data).expect("sizes agree"),
        labels,
        classes: k,
    }
}

/// Gaussian clusters around class-specific spatial blob images.
pub fn synth_blobs(classes: usize, n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    synth_blobs_with(classes, n, shape, seed, DEFAULT_SEPARATION)
}

pub fn synth_blobs_with(classes: usize, n: usize, shape: [usize; 3], seed: u64, separation: f32) -> Result<Dataset> {
    check_synth(classes, shape, separation)?;
    let [c, h, w] = shape;
    let mut rng = Rng::new(seed);
    let radius = 0.3 * h.min(w) as f32;
    let width = (h.max(w) as f32 / 6.0).max(0.5);
    let means: Vec<Tensor> = (0..classes)
        .map(|k| {
            let phase = rng.uniform() * 0.2;
            let ang = std::f32::consts::TAU * (k as f32 / classes as f32 + phase / classes as f32);
            let cy = (h as f32 - 1.0) / 2.0 + radius * ang.sin();
            let cx = (w as f32 - 1.0) / 2.0 + radius * ang.cos();
            let mut m = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                // channel gain keeps colour information class-specific too
                let gain = 0.6 + 0.4 * ((k + ch) % 2) as f32;
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        m.data_mut()[(ch * h + y) * w + x] = gain * (-d2 / (2.0 * width * width)).exp();
                    }
                }
            }
            m
        })
        .collect();
    Ok(gaussian_clusters(&means, n, separation, shape, &mut rng))
}

/// Class-specific firing-rate patterns: every pixel is either a low-rate or a
/// high-rate pixel per class, plus Gaussian jitter.
pub fn synth_rate_patterns(classes: usize, n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    synth_rate_patterns_with(classes, n, shape, seed, RATE_SEPARATION)
}

pub fn synth_rate_patterns_with(
    classes: usize,
    n: usize,
    shape: [usize; 3],
    seed: u64,
    separation: f32,
) -> Result<Dataset> {
    check_synth(classes, shape, separation)?;
    let mut rng = Rng::new(seed);
    let len: usize = shape.iter().product();
    let means: Vec<Tensor> = loop {
        let means: Vec<Tensor> = (0..classes)
            .map(|_| {
                let d = (0..len).map(|_| if rng.bernoulli(0.5) { 0.9 } else { 0.1 }).collect();
                Tensor::from_vec(&shape, d).expect("sizes agree")
            })
            .collect();
        let distinct = (0..classes).all(|a| (a + 1..classes).all(|b| means[a] != means[b]));
        if distinct {
            break means;
        }
    };
    Ok(gaussian_clusters(&means, n, separation, shape, &mut rng))
}

fn check_synth(classes: usize, shape: [usize; 3], separation: f32) -> Result<()> {
    if classes < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {classes}")));
    }
    if shape.contains(&0) {
        return Err(Error::Input(format!("image shape must be positive, got {shape:?}")));
    }
    if !(separation > 0.0) {
        return Err(Error::Input(format!("separation must be positive, got {separation}")));
    }
    if classes > 2 && shape.iter().product::<usize>() < 2 {
        return Err(Error::Input(
            "rate patterns need at least 2 pixels for more than 2 classes".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_synthetic_dataset_is_valid() {
        let d = synth_blobs(2, 0, [1, 4, 4], 1).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.images.shape(), &[0, 1, 4, 4]);
    }

    #[test]
    fn synthetic_sets_are_deterministic_and_in_range() {
        let a = synth_rate_patterns(4, 20, [1, 4, 4], 3).unwrap();
        let b = synth_rate_patterns(4, 20, [1, 4, 4], 3).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.labels.iter().all(|&l| l < 4));
        assert!(synth_blobs(1, 3, [1, 4, 4], 0).is_err());
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let d = synth_blobs(3, 30, [1, 4, 4], 2).unwrap();
        let (tr, te) = d.split(0.2, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (24, 6));
        assert_eq!(d.split(0.2, 5).unwrap(), (tr, te));
    }
}
