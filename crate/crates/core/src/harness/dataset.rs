//! Dataset ingestion: the procedural texture classes and CIFAR-10 binary
//! batches.

use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng;
use crate::siren::Image;

/// Bytes in one CIFAR-10 record: a label byte and 32·32·3 planar pixels.
pub const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn val_labels(&self) -> Vec<usize> {
        self.val.iter().map(|s| s.label).collect()
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|s| s.label).collect()
    }

    /// Keeps the first `train` and `val` samples of each split.
    pub fn truncated(&self, train: usize, val: usize) -> Self {
        Self {
            train: self.train.iter().take(train).cloned().collect(),
            val: self.val.iter().take(val).cloned().collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { classes: usize, height: usize, width: usize, seed: u64 },
    /// One or more CIFAR-10 binary batch files. `downsample` averages 2×2
    /// blocks to produce 16×16 images.
    Cifar10Binary { paths: Vec<PathBuf>, downsample: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub train_size: usize,
    pub val_size: usize,
    #[serde(default)]
    pub split_seed: u64,
}

impl DatasetSpec {
    pub fn synthetic_desk(train_size: usize, val_size: usize, seed: u64) -> Self {
        Self {
            source: DataSource::Synthetic { classes: 10, height: 16, width: 16, seed },
            train_size,
            val_size,
            split_seed: seed,
        }
    }
}

pub fn ingest(spec: &DatasetSpec) -> Result<Dataset> {
    match &spec.source {
        DataSource::Synthetic { classes, height, width, seed } => {
            if *classes == 0 || *classes > SYNTHETIC_CLASSES {
                return Err(Error::arg(format!(
                    "synthetic generator has {SYNTHETIC_CLASSES} classes, asked for {classes}"
                )));
            }
            let make = |split: &str, n: usize| -> Vec<Sample> {
                (0..n)
                    .map(|i| {
                        let label = i % classes;
                        let mut r = rng::stream(*seed, &format!("synthetic/{split}/{i}"));
                        Sample { image: synthetic_image(label, *height, *width, &mut r), label }
                    })
                    .collect()
            };
            Ok(Dataset {
                num_classes: *classes,
                height: *height,
                width: *width,
                train: make("train", spec.train_size),
                val: make("val", spec.val_size),
            })
        }
        DataSource::Cifar10Binary { paths, downsample } => {
            let mut all = Vec::new();
            for p in paths {
                all.extend(parse_cifar10(&fs::read(p)?, *downsample)?);
            }
            if spec.train_size + spec.val_size > all.len() {
                return Err(Error::arg(format!(
                    "requested {} images but the files hold {}",
                    spec.train_size + spec.val_size,
                    all.len()
                )));
            }
            all.shuffle(&mut rng::stream(spec.split_seed, "cifar/split"));
            let val = all.split_off(spec.train_size);
            let side = if *downsample { 16 } else { 32 };
            Ok(Dataset {
                num_classes: 10,
                height: side,
                width: side,
                train: all,
                val: val.into_iter().take(spec.val_size).collect(),
            })
        }
    }
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar10(bytes: &[u8], downsample: bool) -> Result<Vec<Sample>> {
    if bytes.is_empty() {
        return Err(Error::Format { offset: 0, message: "empty CIFAR-10 file".into() });
    }
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            message: format!("trailing partial record of {} bytes", bytes.len() - whole),
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format {
                offset: (r * CIFAR_RECORD) as u64,
                message: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        let planes = &rec[1..];
        let (side, mut px) = (32usize, Vec::with_capacity(32 * 32 * 3));
        for p in 0..side * side {
            for c in 0..3 {
                px.push(f64::from(planes[c * side * side + p]) / 255.0);
            }
        }
        let full = Tensor::new(side * side, 3, px);
        let image = if downsample {
            let mut small = Tensor::zeros(16 * 16, 3);
            for y in 0..16 {
                for x in 0..16 {
                    for c in 0..3 {
                        let s: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|(dy, dx)| full.get((2 * y + dy) * side + 2 * x + dx, c))
                            .sum();
                        small.set(y * 16 + x, c, s / 4.0);
                    }
                }
            }
            Image::new(16, 16, small)?
        } else {
            Image::new(side, side, full)?
        };
        out.push(Sample { image, label });
    }
    Ok(out)
}

pub const SYNTHETIC_CLASSES: usize = 10;

pub const SYNTHETIC_CLASS_NAMES: [&str; SYNTHETIC_CLASSES] = [
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "checkers",
    "rings",
    "horizontal_gradient",
    "vertical_gradient",
    "blob",
    "fine_stripes",
    "cross",
];

/// Class tint mixed into each image's random colors. Small enough that
/// color alone is a weak cue.
fn class_tint(class: usize) -> [f64; 3] {
    let hue = class as f64 / SYNTHETIC_CLASSES as f64 * 2.0 * PI;
    [
        0.5 + 0.5 * hue.cos(),
        0.5 + 0.5 * (hue - 2.0 * PI / 3.0).cos(),
        0.5 + 0.5 * (hue + 2.0 * PI / 3.0).cos(),
    ]
}

/// One procedural image of `class`: a class-specific pattern with random
/// phase and jitter, rendered between two random colors.
pub fn synthetic_image<R: Rng + ?Sized>(class: usize, height: usize, width: usize, rng: &mut R) -> Image {
    let phase = rng.random_range(0.0..2.0 * PI);
    let jitter = rng.random_range(-0.15..0.15);
    let cx = rng.random_range(-0.4..0.4);
    let cy = rng.random_range(-0.4..0.4);
    let tint = class_tint(class);
    let mut color = || -> [f64; 3] {
        let mut c = [0.0; 3];
        for (ch, t) in c.iter_mut().zip(tint) {
            *ch = 0.6 * rng.random_range(0.0..1.0) + 0.4 * t;
        }
        c
    };
    let (fg, bg) = (color(), color());
    let mut px = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        for c in 0..width {
            let x = -1.0 + 2.0 * (c as f64 + 0.5) / width as f64;
            let y = -1.0 + 2.0 * (r as f64 + 0.5) / height as f64;
            let wave = |u: f64, f: f64| 0.5 + 0.5 * (PI * f * u + phase).sin();
            let s = match class {
                0 => wave(y + jitter * x, 2.0),
                1 => wave(x + jitter * y, 2.0),
                2 => wave((x + y) / 2f64.sqrt(), 2.5),
                3 => {
                    let a = (PI * 2.0 * x + phase).sin() * (PI * 2.0 * y + phase).sin();
                    if a > 0.0 { 1.0 } else { 0.0 }
                }
                4 => wave(((x - cx).powi(2) + (y - cy).powi(2)).sqrt(), 3.0),
                5 => (x + 1.0) / 2.0,
                6 => (y + 1.0) / 2.0,
                7 => (-((x - cx).powi(2) + (y - cy).powi(2)) / 0.18).exp(),
                8 => wave(y + jitter * x, 5.0),
                _ => {
                    let d = (x - cx).abs().min((y - cy).abs());
                    if d < 0.2 { 1.0 } else { 0.0 }
                }
            };
            for ch in 0..3 {
                let noise = rng.random_range(-0.03..0.03);
                px.push((bg[ch] + s * (fg[ch] - bg[ch]) + noise).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(height, width, Tensor::new(height * width, 3, px)).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = DatasetSpec::synthetic_desk(40, 20, 7);
        let a = ingest(&spec).unwrap();
        assert_eq!(a, ingest(&spec).unwrap());
        for class in 0..10 {
            assert_eq!(a.train.iter().filter(|s| s.label == class).count(), 4);
        }
        assert!(a.train.iter().all(|s| s.image.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn all_white_record_with_label_seven() {
        let mut rec = vec![255u8; CIFAR_RECORD];
        rec[0] = 7;
        let s = parse_cifar10(&rec, false).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].label, 7);
        assert!(s[0].image.pixels.data().iter().all(|&v| v == 1.0));
        let small = parse_cifar10(&rec, true).unwrap();
        assert_eq!(small[0].image.pixels.shape(), [256, 3]);
    }

    #[test]
    fn malformed_lengths_report_offsets() {
        match parse_cifar10(&[], false) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let bytes = vec![0u8; CIFAR_RECORD + 10];
        match parse_cifar10(&bytes, false) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn planar_layout_maps_channels() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[1 + 1024 + 5] = 255; // green plane, pixel 5
        let s = parse_cifar10(&rec, false).unwrap();
        assert_eq!(s[0].image.pixels.row_slice(5), &[0.0, 1.0, 0.0]);
    }
}
