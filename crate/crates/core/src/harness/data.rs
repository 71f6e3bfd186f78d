use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Precision, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("{path}: truncated, need {expected} bytes, have {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} not below {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Images stored channels-last, one row of `sample_shape` per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, images: Vec<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || !images.len().is_multiple_of(per) {
            return Err(DataError::Invalid(format!(
                "{} values do not split into samples of shape {sample_shape:?}",
                images.len()
            )));
        }
        if images.len() / per != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len() / per,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        Ok(Self {
            sample_shape,
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn per_sample(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.per_sample();
        &self.images[i * per..(i + 1) * per]
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            sample_shape: self.sample_shape.clone(),
            images: self.images[..n * self.per_sample()].to_vec(),
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
        }
    }

    /// Examples `[from, len)`.
    pub fn skip(&self, from: usize) -> Self {
        let from = from.min(self.len());
        Self {
            sample_shape: self.sample_shape.clone(),
            images: self.images[from * self.per_sample()..].to_vec(),
            labels: self.labels[from..].to_vec(),
            n_classes: self.n_classes,
        }
    }

    /// Stack the given examples into a `[B, ...sample_shape]` tensor.
    pub fn batch(&self, indices: &[usize], precision: Precision) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.per_sample());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        let t = Tensor::new(&shape, data, precision).expect("batch shape matches data");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    IdxPair {
        images: PathBuf,
        labels: PathBuf,
    },
    SyntheticShift {
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        classes: usize,
        seed: u64,
        /// Per-pixel Gaussian noise standard deviation.
        #[serde(default = "default_noise")]
        noise: f64,
        /// Remove the per-pixel channel mean from every template, so that
        /// classes differ only in how channels relate to each other.
        #[serde(default)]
        zero_channel_mean: bool,
        /// Give every template the same Fourier amplitudes, so classes
        /// differ only in phases.
        #[serde(default)]
        equal_power: bool,
    },
    RawBinaryCifar {
        paths: Vec<PathBuf>,
    },
}

fn default_noise() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    #[serde(flatten)]
    pub kind: DatasetKind,
    /// Keep only the first `subset` examples.
    #[serde(default)]
    pub subset: Option<usize>,
}

impl DatasetRef {
    pub fn load(&self) -> Result<Dataset> {
        let ds = match &self.kind {
            DatasetKind::IdxPair { images, labels } => load_idx(images, labels)?,
            DatasetKind::SyntheticShift {
                n,
                h,
                w,
                c,
                classes,
                seed,
                noise,
                zero_channel_mean,
                equal_power,
            } => gen_synthetic_shift_with(
                *n,
                *h,
                *w,
                *c,
                *classes,
                *seed,
                ShiftOptions {
                    noise: *noise,
                    zero_channel_mean: *zero_channel_mean,
                    equal_power: *equal_power,
                },
            )?,
            DatasetKind::RawBinaryCifar { paths } => load_cifar_binary(paths)?,
        };
        Ok(match self.subset {
            Some(n) => ds.take(n),
            None => ds,
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or_else(|| DataError::Truncated {
        path: path.display().to_string(),
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(header..header + len).ok_or_else(|| DataError::Truncated {
        path: path.display().to_string(),
        expected: header + len,
        found: bytes.len(),
    })
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// IDX image and label files. Pixels are scaled to [0, 1]; the result has
/// sample shape `[rows, cols, 1]` and as many classes as `max label + 1`
/// (at least 10).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read(images)?;
    check_magic(&ib, IDX_IMAGES_MAGIC, images)?;
    let n = be_u32(&ib, 4, images)? as usize;
    let rows = be_u32(&ib, 8, images)? as usize;
    let cols = be_u32(&ib, 12, images)? as usize;
    let pixels = payload(&ib, 16, n * rows * cols, images)?;

    let lb = read(labels)?;
    check_magic(&lb, IDX_LABELS_MAGIC, labels)?;
    let m = be_u32(&lb, 4, labels)? as usize;
    if m != n {
        return Err(DataError::CountMismatch { images: n, labels: m });
    }
    let raw = payload(&lb, 8, m, labels)?;
    let labels: Vec<usize> = raw.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(10, |&l| (l + 1).max(10));
    Dataset::new(
        vec![rows, cols, 1],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        labels,
        classes,
    )
}

pub const CIFAR_RECORD: usize = 3073;

/// CIFAR-10 binary batches: records of one label byte and 3072 pixel bytes
/// in channel-major order, converted to `[32, 32, 3]` in [0, 1].
pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Truncated {
                path: path.display().to_string(),
                expected: bytes.len().div_ceil(CIFAR_RECORD) * CIFAR_RECORD,
                found: bytes.len(),
            });
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            let px = &rec[1..];
            for p in 0..1024 {
                for ch in 0..3 {
                    images.push(px[ch * 1024 + p] as f64 / 255.0);
                }
            }
        }
    }
    Dataset::new(vec![32, 32, 3], images, labels, 10)
}

/// One smooth periodic random field per class and channel, unit RMS.
fn templates(h: usize, w: usize, c: usize, classes: usize, opts: ShiftOptions, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    const BAND: i32 = 2;
    (0..classes)
        .map(|_| {
            let mut field = vec![0.0; h * w * c];
            for ch in 0..c {
                for fy in -BAND..=BAND {
                    for fx in 0..=BAND {
                        if fx == 0 && fy <= 0 {
                            continue;
                        }
                        let amp: f64 = if opts.equal_power {
                            1.0
                        } else {
                            StandardNormal.sample(rng)
                        };
                        let amp = amp / (1.0 + (fx * fx + fy * fy) as f64);
                        let phase = rng.gen::<f64>() * TAU;
                        for y in 0..h {
                            for x in 0..w {
                                let arg = TAU * (fy as f64 * y as f64 / h as f64 + fx as f64 * x as f64 / w as f64);
                                field[(y * w + x) * c + ch] += amp * (arg + phase).cos();
                            }
                        }
                    }
                }
            }
            if opts.zero_channel_mean {
                for px in field.chunks_mut(c) {
                    let m = px.iter().sum::<f64>() / c as f64;
                    px.iter_mut().for_each(|v| *v -= m);
                }
            }
            let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
            field.iter().map(|v| v / rms).collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftOptions {
    pub noise: f64,
    pub zero_channel_mean: bool,
    pub equal_power: bool,
}

impl Default for ShiftOptions {
    fn default() -> Self {
        Self {
            noise: default_noise(),
            zero_channel_mean: false,
            equal_power: false,
        }
    }
}

/// Class templates, cyclically shifted by a uniform random offset, plus
/// Gaussian noise of standard deviation 0.05.
pub fn gen_synthetic_shift(n: usize, h: usize, w: usize, c: usize, classes: usize, seed: u64) -> Result<Dataset> {
    gen_synthetic_shift_with(n, h, w, c, classes, seed, ShiftOptions::default())
}

pub fn gen_synthetic_shift_with(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    classes: usize,
    seed: u64,
    opts: ShiftOptions,
) -> Result<Dataset> {
    if h < 4 || w < 4 || c == 0 || classes < 2 {
        return Err(DataError::Invalid(format!(
            "need H, W >= 4, C >= 1 and at least two classes, got {h}x{w}x{c}, {classes}"
        )));
    }
    if !(0.0..=0.1).contains(&opts.noise) {
        return Err(DataError::Invalid(format!("noise {} outside [0, 0.1]", opts.noise)));
    }
    if opts.zero_channel_mean && c < 2 {
        return Err(DataError::Invalid(
            "zero channel mean needs at least two channels".into(),
        ));
    }
    let noise = opts.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let temps = templates(h, w, c, classes, opts, &mut rng);
    let mut images = Vec::with_capacity(n * h * w * c);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..classes);
        let (dy, dx) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let t = &temps[label];
        for y in 0..h {
            for x in 0..w {
                let src = ((y + dy) % h * w + (x + dx) % w) * c;
                for ch in 0..c {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    images.push(t[src + ch] + noise * e);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(vec![h, w, c], images, labels, classes)
}
