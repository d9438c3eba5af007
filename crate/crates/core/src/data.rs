//! Datasets: synthetic Gaussian blobs, the CIFAR-10 binary batch format, CSV
//! import/export and shuffled epoch sampling.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::Image;
use crate::error::{DcdcError, Result};
use crate::matrix::{format_sig, Matrix};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

/// Inputs the model sees. Labels live beside, never inside, this type.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Vectors(Matrix),
    Images(Vec<Image>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Vectors(m) => m.rows(),
            Samples::Images(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Samples::Vectors(m) => m.cols(),
            Samples::Images(v) => v.first().map_or(0, |im| im.data().len()),
        }
    }

    /// Model inputs for the given rows; images are scaled to [0, 1].
    pub fn features(&self, indices: &[usize]) -> Matrix {
        match self {
            Samples::Vectors(m) => m.select_rows(indices),
            Samples::Images(v) => {
                let dim = self.feature_dim();
                let mut data = Vec::with_capacity(indices.len() * dim);
                for &i in indices {
                    data.extend(v[i].to_unit_floats());
                }
                Matrix::from_vec(indices.len(), dim, data).expect("uniform image sizes")
            }
        }
    }

    pub fn all_features(&self) -> Matrix {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.features(&idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Samples,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Samples, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(DcdcError::shape(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DcdcError::shape(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if let Samples::Vectors(m) = &samples {
            if !m.is_finite() {
                return Err(DcdcError::NonFinite("dataset features".into()));
            }
        }
        if let Samples::Images(v) = &samples {
            if let Some(first) = v.first() {
                if v.iter().any(|im| {
                    (im.height(), im.width()) != (first.height(), first.width())
                }) {
                    return Err(DcdcError::shape("images differ in size"));
                }
            }
        }
        Ok(LabeledDataset {
            samples,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Writes `label,f1,f2,...` per row, 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let features = self.samples.all_features();
        let mut line = String::new();
        for (i, label) in self.labels.iter().enumerate() {
            line.clear();
            line.push_str(&label.to_string());
            for v in features.row(i) {
                line.push(',');
                line.push_str(&format_sig(*v, 9));
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// Reads the format written by [`LabeledDataset::write_csv`]; classes = max label + 1.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        let mut offset = 0u64;
        for line in input.lines() {
            let line = line?;
            let len = line.len() as u64 + 1;
            if !line.trim().is_empty() {
                let fmt_err = |message: String| DcdcError::Format { offset, message };
                let mut fields = line.split(',');
                let label = fields
                    .next()
                    .unwrap_or("")
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| fmt_err(format!("label: {e}")))?;
                let row = fields
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| fmt_err(format!("feature: {e}")))?;
                if row.is_empty() {
                    return Err(fmt_err("row has no features".into()));
                }
                labels.push(label);
                rows.push(row);
            }
            offset += len;
        }
        if rows.is_empty() {
            return Err(DcdcError::Format {
                offset: 0,
                message: "dataset is empty".into(),
            });
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        LabeledDataset::new(Samples::Vectors(Matrix::from_rows(&rows)?), labels, num_classes)
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        LabeledDataset::read_csv(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobsConfig {
    pub k: usize,
    pub dim: usize,
    pub n_per_cluster: usize,
    pub center_scale: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            k: 4,
            dim: 16,
            n_per_cluster: 50,
            center_scale: 10.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

impl BlobsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(DcdcError::config("blobs need k >= 2"));
        }
        if self.dim == 0 || self.n_per_cluster == 0 {
            return Err(DcdcError::config("blobs need dim >= 1 and n_per_cluster >= 1"));
        }
        if !(self.sigma >= 0.0) || !(self.center_scale >= 0.0) {
            return Err(DcdcError::config("sigma and center_scale must be >= 0"));
        }
        Ok(())
    }
}

/// Centers from `N(0, center_scale^2 I)`, points from `N(center, sigma^2 I)`, cluster by cluster.
pub fn generate_blobs(config: &BlobsConfig) -> Result<(LabeledDataset, Matrix)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centers = Matrix::from_fn(config.k, config.dim, |_, _| {
        config.center_scale * std_normal.sample(&mut rng)
    });
    let n = config.k * config.n_per_cluster;
    let mut data = Vec::with_capacity(n * config.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..config.k {
        for _ in 0..config.n_per_cluster {
            for &mu in centers.row(c) {
                data.push(mu + config.sigma * std_normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    let features = Matrix::from_vec(n, config.dim, data)?;
    Ok((
        LabeledDataset::new(Samples::Vectors(features), labels, config.k)?,
        centers,
    ))
}

/// Parses CIFAR-10 binary records: a label byte, then 1024 red, 1024 green and
/// 1024 blue bytes, each plane row-major.
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(DcdcError::Format {
            offset,
            message: format!(
                "truncated record: {} trailing bytes, expected {}",
                bytes.len() % CIFAR_RECORD,
                CIFAR_RECORD
            ),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(DcdcError::Format {
                offset: (r * CIFAR_RECORD) as u64,
                message: format!("label {label} out of range"),
            });
        }
        let pixels = &record[1..];
        let mut data = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            data.extend([pixels[p], pixels[plane + p], pixels[2 * plane + p]]);
        }
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, data)?);
        labels.push(label);
    }
    LabeledDataset::new(Samples::Images(images), labels, CIFAR_CLASSES)
}

pub fn load_cifar10_binary(path: &Path) -> Result<LabeledDataset> {
    parse_cifar10_binary(&fs::read(path)?)
}

/// Inverse of [`parse_cifar10_binary`] for 32x32 images.
pub fn encode_cifar10_binary(images: &[Image], labels: &[usize]) -> Result<Vec<u8>> {
    if images.len() != labels.len() {
        return Err(DcdcError::shape("images and labels differ in length"));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(images.len() * CIFAR_RECORD);
    for (im, &label) in images.iter().zip(labels) {
        if (im.height(), im.width()) != (CIFAR_SIDE, CIFAR_SIDE) || label >= CIFAR_CLASSES {
            return Err(DcdcError::shape("CIFAR-10 records are 32x32 with labels < 10"));
        }
        out.push(label as u8);
        for c in 0..3 {
            out.extend((0..plane).map(|p| im.data()[p * 3 + c]));
        }
    }
    Ok(out)
}

/// Shuffled epoch partitioning: each epoch is a fresh permutation cut into
/// `floor(N / B)` batches, the remainder dropped.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    batch_size: usize,
}

impl EpochSampler {
    pub fn new(n: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(DcdcError::config(format!(
                "batch size {batch_size} must be in [1, {n}]"
            )));
        }
        Ok(EpochSampler { n, batch_size })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(rng);
        order
            .chunks_exact(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// `b` distinct indices drawn uniformly from `0..n`.
pub fn sample_minibatch<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Result<Vec<usize>> {
    let sampler = EpochSampler::new(n, b)?;
    Ok(sampler.epoch(rng).swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_points_sit_on_centers() {
        let cfg = BlobsConfig {
            sigma: 0.0,
            n_per_cluster: 5,
            ..BlobsConfig::default()
        };
        let (ds, centers) = generate_blobs(&cfg).unwrap();
        let Samples::Vectors(x) = ds.samples() else {
            unreachable!()
        };
        for i in 0..ds.len() {
            assert_eq!(x.row(i), centers.row(ds.labels()[i]));
        }
    }

    #[test]
    fn blob_counts_are_balanced() {
        let (ds, _) = generate_blobs(&BlobsConfig::default()).unwrap();
        assert_eq!(ds.len(), 200);
        for c in 0..4 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == c).count(), 50);
        }
    }

    #[test]
    fn separated_blobs_are_recovered_by_nearest_center() {
        let (ds, centers) = generate_blobs(&BlobsConfig::default()).unwrap();
        let x = ds.samples().all_features();
        let correct = (0..ds.len())
            .filter(|&i| {
                let d = |c: usize| -> f64 {
                    x.row(i)
                        .iter()
                        .zip(centers.row(c))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum()
                };
                let best = (0..4).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
                best == ds.labels()[i]
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 > 0.99);
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = generate_blobs(&BlobsConfig::default()).unwrap();
        let b = generate_blobs(&BlobsConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(generate_blobs(&BlobsConfig { k: 1, ..BlobsConfig::default() }).is_err());
    }

    fn cifar_record(label: u8, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rec = vec![label];
        rec.extend((0..CIFAR_RECORD - 1).map(|_| rng.random::<u8>()));
        rec
    }

    #[test]
    fn cifar_single_record() {
        let rec = cifar_record(7, 1);
        let ds = parse_cifar10_binary(&rec).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[7]);
        let Samples::Images(ims) = ds.samples() else {
            unreachable!()
        };
        // Pixel (y, x) = (2, 5): plane offset 2 * 32 + 5.
        let p = 2 * 32 + 5;
        assert_eq!(ims[0].pixel(2, 5), [rec[1 + p], rec[1 + 1024 + p], rec[1 + 2048 + p]]);
    }

    #[test]
    fn cifar_rejects_bad_label_and_truncation() {
        let mut bytes = cifar_record(3, 2);
        bytes.extend(cifar_record(10, 3));
        match parse_cifar10_binary(&bytes) {
            Err(DcdcError::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("unexpected {other:?}"),
        }
        let truncated = &cifar_record(1, 4)[..CIFAR_RECORD - 5];
        assert!(matches!(
            parse_cifar10_binary(truncated),
            Err(DcdcError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn cifar_roundtrip_is_bit_exact() {
        let mut bytes = Vec::new();
        for (k, label) in [0u8, 9, 4].into_iter().enumerate() {
            bytes.extend(cifar_record(label, 10 + k as u64));
        }
        let ds = parse_cifar10_binary(&bytes).unwrap();
        let Samples::Images(ims) = ds.samples() else {
            unreachable!()
        };
        assert_eq!(encode_cifar10_binary(ims, ds.labels()).unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        fs::write(&path, &bytes).unwrap();
        assert_eq!(load_cifar10_binary(&path).unwrap(), ds);
        let f = ds.samples().features(&[1]);
        assert_eq!(f.cols(), 3072);
        assert!(f.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn csv_roundtrip() {
        let (ds, _) = generate_blobs(&BlobsConfig {
            n_per_cluster: 3,
            ..BlobsConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = LabeledDataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.labels(), ds.labels());
        let (a, b) = (ds.samples().all_features(), back.samples().all_features());
        assert!(a.max_abs_diff(&b) < 1e-6);
        assert!(LabeledDataset::read_csv(&b"0,1.0\nx,2.0\n"[..]).is_err());
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = sample_minibatch(20, 20, &mut rng).unwrap();
        b.sort();
        assert_eq!(b, (0..20).collect::<Vec<_>>());
        assert!(sample_minibatch(5, 6, &mut rng).is_err());
    }

    #[test]
    fn epochs_partition_and_differ() {
        let sampler = EpochSampler::new(23, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e1 = sampler.epoch(&mut rng);
        let e2 = sampler.epoch(&mut rng);
        assert_eq!(e1.len(), 4);
        let mut seen: Vec<usize> = e1.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 20);
        assert_ne!(e1, e2);

        let full = EpochSampler::new(10, 2).unwrap().epoch(&mut rng);
        let mut all = full.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
