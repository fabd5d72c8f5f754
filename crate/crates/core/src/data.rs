//! Datasets: IDX ingestion, synthetic generators and a seeded batch stream.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_rng, Rng};
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.dims().batch != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.dims().batch,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
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

    /// Per-sample dims (batch 1).
    pub fn sample_dims(&self) -> Dims {
        self.images.dims().with_batch(1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Seeded split into `(train, validation)`.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut child_rng(seed, &[0x5e1]));
        let n_val = ((self.len() as f64) * validation_fraction).round() as usize;
        let (val, train) = idx.split_at(n_val.min(self.len()));
        (self.subset(train), self.subset(val))
    }

    /// Standardizes each channel to zero mean and unit variance in place.
    pub fn normalize_channels(&mut self) {
        let (mean, var) = self.images.channel_moments();
        let d = self.images.dims();
        let plane = d.plane();
        let data = self.images.data_mut();
        for b in 0..d.batch {
            for c in 0..d.channels {
                let s = 1.0 / var[c].sqrt().max(1e-12);
                let off = (b * d.channels + c) * plane;
                for v in &mut data[off..off + plane] {
                    *v = (*v - mean[c]) * s;
                }
            }
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: offset as u64,
            msg: format!("file ends before a 4-byte header field ({} bytes total)", bytes.len()),
        })
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `(count, rows, cols, pixels)` from an IDX image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            offset: 8,
            msg: format!("zero image dimension {rows}x{cols}"),
        });
    }
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: (16 + body.len()) as u64,
            msg: format!("truncated: header promises {need} pixel bytes, found {}", body.len()),
        });
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Parse {
            offset: (8 + body.len()) as u64,
            msg: format!("truncated: header promises {n} labels, found {}", body.len()),
        });
    }
    Ok(&body[..n])
}

/// Images scaled to `[0, 1]`, without normalization.
pub fn idx_from_bytes(images: &[u8], labels: &[u8], classes: usize) -> Result<Dataset> {
    let (n, rows, cols, px) = parse_idx_images(images)?;
    let ls = parse_idx_labels(labels)?;
    if ls.len() != n {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("{n} images but {} labels", ls.len()),
        });
    }
    let t = Tensor4::from_vec(
        Dims::new(n, 1, rows, cols),
        px.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    Dataset::new(t, ls.iter().map(|&l| l as usize).collect(), classes)
}

/// Loads an IDX image/label pair, scales to `[0, 1]` and standardizes
/// each channel.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let mut d = idx_from_bytes(&std::fs::read(images)?, &std::fs::read(labels)?, classes)?;
    d.normalize_channels();
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Per-class smooth mean images plus isotropic noise.
    Blobs,
    /// Oriented sinusoidal gratings with random phase plus noise.
    Stripes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub per_class: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.classes < 2 || self.per_class == 0 || self.size == 0 || self.channels == 0 {
            return Err(Error::Config(
                "synthetic data needs classes >= 2 and positive per_class, size, channels".into(),
            ));
        }
        let (c, s) = (self.channels, self.size);
        let plane = s * s;
        let mut rng = child_rng(self.seed, &[0]);
        let templates: Vec<Vec<f64>> = match self.kind {
            SyntheticKind::Blobs => (0..self.classes)
                .map(|_| {
                    let mut t = vec![0.0; c * plane];
                    for ch in 0..c {
                        for _ in 0..3 {
                            let cy = rng.random::<f64>() * s as f64;
                            let cx = rng.random::<f64>() * s as f64;
                            let amp = normal(&mut rng);
                            let w = 0.15 * s as f64 + 1.0;
                            for y in 0..s {
                                for x in 0..s {
                                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                                    t[ch * plane + y * s + x] += amp * (-r2 / (2.0 * w * w)).exp();
                                }
                            }
                        }
                    }
                    t
                })
                .collect(),
            SyntheticKind::Stripes => Vec::new(),
        };
        let n = self.classes * self.per_class;
        let mut data = Vec::with_capacity(n * c * plane);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % self.classes;
            labels.push(y);
            match self.kind {
                SyntheticKind::Blobs => {
                    data.extend(templates[y].iter().map(|m| m + self.noise * normal(&mut rng)));
                }
                SyntheticKind::Stripes => {
                    let theta = std::f64::consts::PI * y as f64 / self.classes as f64;
                    let freq = 2.0 * std::f64::consts::PI / (s as f64 / 2.0).max(2.0);
                    let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                    let (sn, cs) = theta.sin_cos();
                    for _ in 0..c {
                        for yy in 0..s {
                            for xx in 0..s {
                                let u = cs * xx as f64 + sn * yy as f64;
                                data.push((freq * u + phase).sin() + self.noise * normal(&mut rng));
                            }
                        }
                    }
                }
            }
        }
        let mut d = Dataset::new(Tensor4::from_vec(Dims::new(n, c, s, s), data)?, labels, self.classes)?;
        d.normalize_channels();
        Ok(d)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Zero-pad by this many pixels and crop back at a random offset.
    #[serde(default)]
    pub crop_padding: usize,
    #[serde(default)]
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

/// Seeded epochs over a dataset. Epoch `e` visits a permutation drawn from
/// `(seed, e)`; trailing samples that would form a batch of one are dropped
/// because training-mode BN needs two.
#[derive(Clone, Debug)]
pub struct DatasetStream<'a> {
    data: &'a Dataset,
    batch_size: usize,
    seed: u64,
    augment: Augment,
}

impl<'a> DatasetStream<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64, augment: Augment) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::BatchTooSmall(batch_size));
        }
        if data.len() < 2 {
            return Err(Error::invalid("dataset needs at least two samples"));
        }
        Ok(DatasetStream {
            data,
            batch_size,
            seed,
            augment,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        self.data
    }

    pub fn batches_per_epoch(&self) -> usize {
        let n = self.data.len();
        let full = n / self.batch_size;
        full + usize::from(n % self.batch_size >= 2)
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut child_rng(self.seed, &[epoch, 0]));
        let mut aug_rng = child_rng(self.seed, &[epoch, 1]);
        let chunks: Vec<Vec<usize>> = order
            .chunks(self.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect();
        chunks.into_iter().map(move |idx| {
            let mut images = self.data.images.gather(&idx);
            if self.augment.crop_padding > 0 || self.augment.flip {
                augment_batch(&mut images, self.augment, &mut aug_rng);
            }
            Batch {
                labels: idx.iter().map(|&i| self.data.labels[i]).collect(),
                images,
            }
        })
    }
}

fn augment_batch(images: &mut Tensor4, aug: Augment, rng: &mut Rng) {
    let d = images.dims();
    let (h, w) = (d.height, d.width);
    let p = aug.crop_padding as i64;
    let plane = d.plane();
    for b in 0..d.batch {
        let dy = if p > 0 { rng.random_range(-p..=p) as isize } else { 0 };
        let dx = if p > 0 { rng.random_range(-p..=p) as isize } else { 0 };
        let flip = aug.flip && rng.random::<bool>();
        for c in 0..d.channels {
            let off = (b * d.channels + c) * plane;
            let src = images.data()[off..off + plane].to_vec();
            let dst = &mut images.data_mut()[off..off + plane];
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    dst[y * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        src[sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, px: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, r, c] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(px);
        v
    }

    fn idx_labels(ls: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(ls.len() as u32).to_be_bytes());
        v.extend_from_slice(ls);
        v
    }

    #[test]
    fn two_image_fixture_exact_pixels() {
        let px = [0u8, 255, 51, 102, 10, 20, 30, 40];
        let d = idx_from_bytes(&idx_images(2, 2, 2, &px), &idx_labels(&[3, 1]), 10).unwrap();
        assert_eq!(d.images.dims(), Dims::new(2, 1, 2, 2));
        assert_eq!(d.labels, vec![3, 1]);
        for (a, &b) in d.images.data().iter().zip(&px) {
            assert_eq!(*a, b as f64 / 255.0);
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = idx_images(2, 2, 2, &[1, 2, 3]);
        match parse_idx_images(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("{other:?}"),
        }
        match parse_idx_images(&bytes[..10]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = idx_images(1, 1, 1, &[0]);
        bytes[3] = 0x01;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn label_range_checked() {
        let r = idx_from_bytes(&idx_images(1, 1, 1, &[0]), &idx_labels(&[12]), 10);
        assert!(r.is_err());
    }

    #[test]
    fn stream_epochs_reproducible_and_cover_data() {
        let d = SyntheticSpec {
            kind: SyntheticKind::Blobs,
            classes: 3,
            per_class: 7,
            channels: 1,
            size: 6,
            noise: 0.5,
            seed: 1,
        }
        .generate()
        .unwrap();
        let s = DatasetStream::new(&d, 4, 9, Augment { crop_padding: 1, flip: true }).unwrap();
        let a: Vec<Batch> = s.epoch(2).collect();
        let b: Vec<Batch> = s.epoch(2).collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), s.batches_per_epoch());
        let plain = DatasetStream::new(&d, 4, 9, Augment::default()).unwrap();
        let mut seen: Vec<usize> = plain.epoch(0).flat_map(|b| b.labels).collect();
        seen.sort();
        // 21 samples in batches of 4: the trailing singleton is dropped
        assert_eq!(seen.len(), 20);
        assert_ne!(plain.epoch(0).next(), plain.epoch(1).next());
    }

    #[test]
    fn flip_only_mirrors() {
        let mut t = Tensor4::from_vec(Dims::new(1, 1, 1, 3), vec![1., 2., 3.]).unwrap();
        let mut rng = crate::rng::rng_from(0);
        let mut flipped = false;
        for _ in 0..8 {
            let before = t.clone();
            augment_batch(&mut t, Augment { crop_padding: 0, flip: true }, &mut rng);
            if t != before {
                flipped = true;
                let mut r = before.data().to_vec();
                r.reverse();
                assert_eq!(t.data(), &r[..]);
            }
        }
        assert!(flipped);
    }

    #[test]
    fn synthetic_is_normalized_and_balanced() {
        let d = SyntheticSpec {
            kind: SyntheticKind::Stripes,
            classes: 4,
            per_class: 5,
            channels: 2,
            size: 8,
            noise: 0.1,
            seed: 0,
        }
        .generate()
        .unwrap();
        assert_eq!(d.class_counts(), vec![5; 4]);
        let (m, v) = d.images.channel_moments();
        assert!(m.iter().all(|x| x.abs() < 1e-12));
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-9));
    }
}
