//! Image classification datasets: binary CIFAR readers, a deterministic
//! synthetic generator with the same shape, and channel normalization.
//!
//! A dataset spec is a compact string:
//! * `synthetic:<seed>:<n>:<classes>` draws `n` training and `n/5` test
//!   images of shifted, noisy class templates;
//! * `cifar10:<dir>` reads `data_batch_1..5.bin` and `test_batch.bin`;
//! * `cifar100:<dir>` reads `train.bin` and `test.bin` (fine labels).

use std::fs;
use std::path::PathBuf;

use thiserror::Error;

use crate::rng::SbRng;
use crate::tensor::{Shape4, Tensor4, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad dataset spec `{0}`: expected synthetic:<seed>:<n>:<classes>, cifar10:<dir>, or cifar100:<dir>")]
    BadSpec(String),
    #[error("dataset file {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A labeled image set held densely in memory, one f64 per subpixel.
#[derive(Clone)]
pub struct Dataset {
    pub name: String,
    data: Tensor4,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(name: String, data: Tensor4, labels: Vec<usize>, num_classes: usize) -> Result<Dataset, DataError> {
        if data.shape().n != labels.len() {
            return Err(DataError::Format(format!(
                "{} images but {} labels",
                data.shape().n,
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Format(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Dataset { name, data, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.data.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> Shape4 {
        let s = self.data.shape();
        Shape4::new(1, s.c, s.h, s.w)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Raw `c*h*w` slice of image `i`.
    pub fn image_slice(&self, i: usize) -> &[f64] {
        let s = self.data.shape();
        let stride = s.c * s.h * s.w;
        &self.data.data()[i * stride..(i + 1) * stride]
    }

    /// Copy the indexed images into one batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let s = self.data.shape();
        let stride = s.c * s.h * s.w;
        let mut out = Tensor4::zeros(Shape4::new(indices.len(), s.c, s.h, s.w));
        {
            let buf = out.data_mut();
            for (row, &i) in indices.iter().enumerate() {
                buf[row * stride..(row + 1) * stride].copy_from_slice(self.image_slice(i));
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }

    /// Keep only the first `n` examples (no-op if `n` covers the set).
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let s = self.data.shape();
        let stride = s.c * s.h * s.w;
        let mut data = Tensor4::zeros(Shape4::new(n, s.c, s.h, s.w));
        data.data_mut().copy_from_slice(&self.data.data()[..n * stride]);
        self.data = data;
        self.labels.truncate(n);
    }

    fn apply_channelwise(&mut self, mean: &[f64], inv_std: &[f64]) {
        let s = self.data.shape();
        let plane = s.h * s.w;
        let buf = self.data.data_mut();
        for img in 0..s.n {
            for c in 0..s.c {
                let base = (img * s.c + c) * plane;
                for v in &mut buf[base..base + plane] {
                    *v = (*v - mean[c]) * inv_std[c];
                }
            }
        }
    }
}

/// Per-channel affine normalization fitted on a training set.
#[derive(Clone, Debug)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation per channel.
    pub fn fit(train: &Dataset) -> Normalizer {
        let s = train.data.shape();
        let plane = s.h * s.w;
        let count = (s.n * plane) as f64;
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for img in 0..s.n {
            for c in 0..s.c {
                let base = (img * s.c + c) * plane;
                for &v in &train.data.data()[base..base + plane] {
                    mean[c] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for img in 0..s.n {
            for c in 0..s.c {
                let base = (img * s.c + c) * plane;
                for &v in &train.data.data()[base..base + plane] {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(1e-8)).collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let inv: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        ds.apply_channelwise(&self.mean, &inv);
    }

    pub fn invert_value(&self, c: usize, v: f64) -> f64 {
        v * self.std[c] + self.mean[c]
    }
}

/// Parsed form of a dataset spec string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSpec {
    Synthetic { seed: u64, n: usize, classes: usize },
    Cifar10 { dir: PathBuf },
    Cifar100 { dir: PathBuf },
}

impl DatasetSpec {
    pub fn parse(s: &str) -> Result<DatasetSpec, DataError> {
        let bad = || DataError::BadSpec(s.to_string());
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "synthetic" => {
                let mut it = rest.split(':');
                let seed = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let n = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let classes = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                if it.next().is_some() || n == 0 || classes < 2 {
                    return Err(bad());
                }
                Ok(DatasetSpec::Synthetic { seed, n, classes })
            }
            "cifar10" if !rest.is_empty() => Ok(DatasetSpec::Cifar10 { dir: PathBuf::from(rest) }),
            "cifar100" if !rest.is_empty() => Ok(DatasetSpec::Cifar100 { dir: PathBuf::from(rest) }),
            _ => Err(bad()),
        }
    }

    /// Load the (train, test) pair this spec names.
    pub fn load(&self) -> Result<(Dataset, Dataset), DataError> {
        match self {
            DatasetSpec::Synthetic { seed, n, classes } => {
                let params = SynthParams::default();
                let gen = SyntheticGen::new(*seed, *classes, &params);
                let test_n = (*n / 5).max(*classes).max(50);
                Ok((
                    gen.generate(&format!("synthetic:{seed}:{n}:{classes}:train"), *n, 0),
                    gen.generate(&format!("synthetic:{seed}:{n}:{classes}:test"), test_n, 1),
                ))
            }
            DatasetSpec::Cifar10 { dir } => {
                let train_files: Vec<PathBuf> =
                    (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                let train = read_cifar_files("cifar10:train", &train_files, 10, 3073, 0)?;
                let test = read_cifar_files("cifar10:test", &[dir.join("test_batch.bin")], 10, 3073, 0)?;
                Ok((train, test))
            }
            DatasetSpec::Cifar100 { dir } => {
                let train = read_cifar_files("cifar100:train", &[dir.join("train.bin")], 100, 3074, 1)?;
                let test = read_cifar_files("cifar100:test", &[dir.join("test.bin")], 100, 3074, 1)?;
                Ok((train, test))
            }
        }
    }
}

/// Binary CIFAR record streams: each record is `label_bytes` label bytes
/// (the last one is used) followed by 3072 channel-major subpixels.
fn read_cifar_files(
    name: &str,
    files: &[PathBuf],
    num_classes: usize,
    record: usize,
    label_at: usize,
) -> Result<Dataset, DataError> {
    let mut pixels: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let bytes = fs::read(path).map_err(|e| DataError::Io(path.clone(), e))?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(DataError::Format(format!(
                "{}: {} bytes is not a whole number of {record}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(record) {
            let label = rec[label_at] as usize;
            if label >= num_classes {
                return Err(DataError::Format(format!(
                    "{}: label {label} out of range for {num_classes} classes",
                    path.display()
                )));
            }
            labels.push(label);
            pixels.extend(rec[record - 3072..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    let data = Tensor4::from_vec(Shape4::new(n, 3, 32, 32), pixels)?;
    Dataset::new(name.to_string(), data, labels, num_classes)
}

/// Knobs for the synthetic generator. Defaults give a task that a small
/// convolutional net separates well but a constant predictor does not.
#[derive(Clone, Debug)]
pub struct SynthParams {
    /// Additive pixel noise standard deviation.
    pub noise_sd: f64,
    /// Maximum circular shift along each axis, drawn uniformly from
    /// `-max_shift..=max_shift` per image.
    pub max_shift: usize,
}

impl Default for SynthParams {
    fn default() -> SynthParams {
        SynthParams { noise_sd: 1.75, max_shift: 3 }
    }
}

/// Deterministic class-template image source. Templates are coarse 8x8
/// Gaussian grids upsampled bilinearly to 32x32, shared between the train
/// and test splits; the splits differ only in their noise streams.
pub struct SyntheticGen {
    templates: Vec<Vec<f64>>,
    classes: usize,
    seed: u64,
    params: SynthParams,
}

const SYNTH_HW: usize = 32;
const SYNTH_COARSE: usize = 8;

impl SyntheticGen {
    pub fn new(seed: u64, classes: usize, params: &SynthParams) -> SyntheticGen {
        let mut rng = SbRng::new(seed).fork();
        let plane = SYNTH_HW * SYNTH_HW;
        let templates = (0..classes)
            .map(|_| {
                let mut t = vec![0.0; 3 * plane];
                for c in 0..3 {
                    let coarse: Vec<f64> =
                        (0..SYNTH_COARSE * SYNTH_COARSE).map(|_| rng.normal_std()).collect();
                    upsample_bilinear(&coarse, SYNTH_COARSE, &mut t[c * plane..(c + 1) * plane], SYNTH_HW);
                }
                t
            })
            .collect();
        SyntheticGen { templates, classes, seed, params: params.clone() }
    }

    pub fn template(&self, class: usize) -> &[f64] {
        &self.templates[class]
    }

    /// Labels cycle round-robin, so every prefix is nearly class-balanced.
    /// `stream` selects an independent noise stream per split.
    pub fn generate(&self, name: &str, n: usize, stream: u64) -> Dataset {
        let mut rng = {
            let mut root = SbRng::new(self.seed);
            root.fork(); // template stream
            for _ in 0..stream {
                root.fork();
            }
            root.fork()
        };
        let plane = SYNTH_HW * SYNTH_HW;
        let mut pixels = vec![0.0; n * 3 * plane];
        let mut labels = Vec::with_capacity(n);
        let span = 2 * self.params.max_shift + 1;
        for i in 0..n {
            let label = i % self.classes;
            labels.push(label);
            let dy = rng.index(span) as isize - self.params.max_shift as isize;
            let dx = rng.index(span) as isize - self.params.max_shift as isize;
            let t = &self.templates[label];
            let img = &mut pixels[i * 3 * plane..(i + 1) * 3 * plane];
            for c in 0..3 {
                for y in 0..SYNTH_HW {
                    let sy = (y as isize + dy).rem_euclid(SYNTH_HW as isize) as usize;
                    for x in 0..SYNTH_HW {
                        let sx = (x as isize + dx).rem_euclid(SYNTH_HW as isize) as usize;
                        img[c * plane + y * SYNTH_HW + x] = t[c * plane + sy * SYNTH_HW + sx];
                    }
                }
            }
            if self.params.noise_sd > 0.0 {
                for v in img.iter_mut() {
                    *v += self.params.noise_sd * rng.normal_std();
                }
            }
        }
        let data = Tensor4::from_vec(Shape4::new(n, 3, SYNTH_HW, SYNTH_HW), pixels).expect("sized above");
        Dataset::new(name.to_string(), data, labels, self.classes).expect("labels in range")
    }
}

/// Bilinear upsampling with pixel-center alignment.
fn upsample_bilinear(src: &[f64], src_hw: usize, dst: &mut [f64], dst_hw: usize) {
    let scale = src_hw as f64 / dst_hw as f64;
    for y in 0..dst_hw {
        let fy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_hw - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_hw - 1);
        let wy = fy - y0 as f64;
        for x in 0..dst_hw {
            let fx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_hw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_hw - 1);
            let wx = fx - x0 as f64;
            dst[y * dst_hw + x] = src[y0 * src_hw + x0] * (1.0 - wy) * (1.0 - wx)
                + src[y0 * src_hw + x1] * (1.0 - wy) * wx
                + src[y1 * src_hw + x0] * wy * (1.0 - wx)
                + src[y1 * src_hw + x1] * wy * wx;
        }
    }
}
