//! Labeled image datasets: synthetic generation, partitioning, and the SMD1
//! file format.
//!
//! The generator replaces full-scale image corpora at desk scale: each class
//! is a fixed pseudorandom low-frequency template plus i.i.d. noise, which
//! makes classes linearly distinguishable by construction.

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const MAGIC: &[u8; 4] = b"SMD1";
const VERSION: u16 = 1;

/// A dataset of (n, c, h, w) samples in [0,1] with class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Scales the class templates away from mid-gray.
    pub class_separation: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.num_classes,
            self.samples_per_class,
            self.channels,
            self.height,
            self.width,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("dataset spec counts must be positive".into()));
        }
        if self.class_separation < 0.0 || self.noise < 0.0 {
            return Err(Error::Config("dataset spec scales must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl LabeledDataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "dataset samples must be (n, c, h, w), got {:?}",
                samples.shape()
            )));
        }
        if samples.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                samples.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range (num_classes={num_classes})"
            )));
        }
        if samples.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("sample values must lie in [0,1]".into()));
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.samples.shape();
        [s[1], s[2], s[3]]
    }

    /// Copies one sample out as a (c, h, w) tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        let [c, h, w] = self.sample_shape();
        let sz = c * h * w;
        Tensor::new(
            vec![c, h, w],
            self.samples.data()[i * sz..(i + 1) * sz].to_vec(),
        )
        .expect("slice of a valid dataset")
    }

    /// Replaces one sample and its label in place.
    pub fn set_sample(&mut self, i: usize, sample: &Tensor, label: usize) -> Result<()> {
        let [c, h, w] = self.sample_shape();
        if sample.shape() != [c, h, w] {
            return Err(Error::Shape(format!(
                "sample shape {:?} does not match dataset {:?}",
                sample.shape(),
                [c, h, w]
            )));
        }
        if label >= self.num_classes {
            return Err(Error::Data(format!("label {label} out of range")));
        }
        let sz = c * h * w;
        self.samples.data_mut()[i * sz..(i + 1) * sz].copy_from_slice(sample.data());
        self.labels[i] = label;
        Ok(())
    }

    /// Gathers the given rows into a new dataset.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        let [c, h, w] = self.sample_shape();
        let sz = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * sz);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples.data()[i * sz..(i + 1) * sz]);
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            samples: Tensor::new(vec![indices.len(), c, h, w], data).expect("valid subset"),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Batch view as (n, c, h, w) tensor plus label slice, for the given rows.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sub = self.select(indices);
        (sub.samples, sub.labels)
    }

    /// SMD1 encoding: magic "SMD1", version u16, num_classes u16, n u32,
    /// c/h/w u32, samples f32 LE, labels u16 LE, trailing CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let [c, h, w] = self.sample_shape();
        let mut wr = Writer::new(VERSION);
        wr.u16(self.num_classes as u16);
        wr.u32(self.len() as u32);
        wr.u32(c as u32);
        wr.u32(h as u32);
        wr.u32(w as u32);
        wr.f32_slice(self.samples.data());
        for &l in &self.labels {
            wr.u16(l as u16);
        }
        wr.finish(MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "dataset")?;
        let num_classes = r.u16()? as usize;
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let data = r.f32_vec(n * c * h * w)?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u16()? as usize);
        }
        r.expect_end()?;
        LabeledDataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, num_classes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        LabeledDataset::from_bytes(&read_file(path)?)
    }
}

/// Generates the synthetic dataset described by `spec`.
///
/// Each class template is a sum of three low-frequency cosine waves with
/// seeded coefficients, rescaled around mid-gray; samples add i.i.d. Gaussian
/// noise and clamp to [0,1]. Values are rounded to f32 precision so the SMD1
/// encoding is lossless.
pub fn gen_synthetic(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let px = c * h * w;
    let n = spec.num_classes * spec.samples_per_class;

    let mut templates = Vec::with_capacity(spec.num_classes);
    for class in 0..spec.num_classes {
        let mut rng = seed::rng(spec.seed, &[seed::tag::DATASET, class as u64]);
        let mut tpl = vec![0.0f64; px];
        for _ in 0..3 {
            let fx = rng.gen_range(0..3) as f64;
            let fy = rng.gen_range(0..3) as f64;
            let (fx, fy) = if fx == 0.0 && fy == 0.0 { (1.0, 1.0) } else { (fx, fy) };
            let amp: f64 = rng.gen_range(0.4..1.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let chan_shift: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let arg = std::f64::consts::TAU
                            * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                            + phase
                            + chan_shift * ci as f64;
                        tpl[(ci * h + y) * w + x] += amp * arg.cos();
                    }
                }
            }
        }
        let max = tpl.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        for v in &mut tpl {
            *v = 0.5 + 0.4 * spec.class_separation * (*v / max);
        }
        templates.push(tpl);
    }

    let mut data = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        let mut rng = seed::rng(spec.seed, &[seed::tag::DATASET, class as u64, 1]);
        for _ in 0..spec.samples_per_class {
            for &t in &templates[class] {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = (t + spec.noise * z).clamp(0.0, 1.0);
                data.push(v as f32 as f64);
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(
        Tensor::new(vec![n, c, h, w], data)?,
        labels,
        spec.num_classes,
    )
}

/// Splits a dataset into `k` near-equal shards by a seeded shuffle.
pub fn partition(ds: &LabeledDataset, k: usize, seed_v: u64) -> Result<Vec<LabeledDataset>> {
    if k == 0 || k > ds.len() {
        return Err(Error::Config(format!(
            "cannot partition {} samples into {k} shards",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = seed::rng(seed_v, &[seed::tag::PARTITION]);
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let base = ds.len() / k;
    let extra = ds.len() % k;
    let mut shards = Vec::with_capacity(k);
    let mut at = 0;
    for s in 0..k {
        let take = base + usize::from(s < extra);
        shards.push(ds.select(&order[at..at + take]));
        at += take;
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            num_classes: 4,
            samples_per_class: 50,
            channels: 1,
            height: 16,
            width: 16,
            class_separation: 1.0,
            noise: 0.08,
            seed: 7,
        }
    }

    #[test]
    fn counts_and_balance() {
        let ds = gen_synthetic(&spec()).unwrap();
        assert_eq!(ds.len(), 200);
        for class in 0..4 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == class).count(), 50);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = gen_synthetic(&spec()).unwrap();
        let b = gen_synthetic(&spec()).unwrap();
        assert_eq!(a.samples().data(), b.samples().data());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn linear_probe_oracle_reaches_90_percent() {
        // Nearest-centroid is a trained linear classifier; it must separate
        // the generated classes on held-out data.
        let ds = gen_synthetic(&spec()).unwrap();
        let train: Vec<usize> = (0..ds.len()).filter(|i| i % 5 != 0).collect();
        let test: Vec<usize> = (0..ds.len()).filter(|i| i % 5 == 0).collect();
        let px: usize = ds.sample_shape().iter().product();

        let mut centroids = vec![vec![0.0f64; px]; ds.num_classes()];
        let mut counts = vec![0usize; ds.num_classes()];
        for &i in &train {
            let s = ds.sample(i);
            let l = ds.labels()[i];
            counts[l] += 1;
            for (acc, v) in centroids[l].iter_mut().zip(s.data()) {
                *acc += v;
            }
        }
        for (cent, n) in centroids.iter_mut().zip(&counts) {
            for v in cent.iter_mut() {
                *v /= *n as f64;
            }
        }
        let mut hits = 0;
        for &i in &test {
            let s = ds.sample(i);
            let best = centroids
                .iter()
                .enumerate()
                .map(|(cl, cent)| {
                    let d: f64 = cent
                        .iter()
                        .zip(s.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (cl, d)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            if best == ds.labels()[i] {
                hits += 1;
            }
        }
        let acc = hits as f64 / test.len() as f64;
        assert!(acc >= 0.9, "probe accuracy {acc}");
    }

    #[test]
    fn smd1_roundtrip_and_corruption() {
        let ds = gen_synthetic(&spec()).unwrap();
        let bytes = ds.to_bytes();
        let back = LabeledDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back.samples().data(), ds.samples().data());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.num_classes(), ds.num_classes());

        // Truncation must fail cleanly with no partial dataset.
        assert!(matches!(
            LabeledDataset::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::Format(_))
        ));

        // Version mismatch is an explicit unsupported-version error.
        let mut w = crate::binfmt::Writer::new(9);
        w.u16(4);
        let wrong = w.finish(b"SMD1");
        match LabeledDataset::from_bytes(&wrong) {
            Err(Error::Format(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn partition_covers_everything_once() {
        let ds = gen_synthetic(&spec()).unwrap();
        let shards = partition(&ds, 3, 11).unwrap();
        assert_eq!(shards.iter().map(|s| s.len()).sum::<usize>(), ds.len());
        assert_eq!(shards[0].len(), 67);
        assert_eq!(shards[2].len(), 66);
        let again = partition(&ds, 3, 11).unwrap();
        assert_eq!(shards[1].labels(), again[1].labels());
    }
}
