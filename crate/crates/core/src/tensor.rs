//! Dense rank-4 tensors in `(batch, channels, height, width)` layout.

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Dims {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per sample.
    pub const fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn with_batch(self, batch: usize) -> Self {
        Dims { batch, ..self }
    }

    pub const fn with_channels(self, channels: usize) -> Self {
        Dims { channels, ..self }
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// The signal carrier. Data is row-major over `(b, c, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    data: Vec<f64>,
    dims: Dims,
}

impl Tensor4 {
    pub fn zeros(dims: Dims) -> Self {
        Tensor4 {
            data: vec![0.0; dims.len()],
            dims,
        }
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Tensor4 {
            data: vec![value; dims.len()],
            dims,
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::dim(format!(
                "buffer of length {} cannot hold a tensor of dims {dims}",
                data.len()
            )));
        }
        Ok(Tensor4 { data, dims })
    }

    /// I.i.d. `N(0, std^2)` entries.
    pub fn randn<R: rand::Rng + ?Sized>(dims: Dims, std: f64, rng: &mut R) -> Self {
        let data = (0..dims.len())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor4 { data, dims }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims.channels + c) * self.dims.height + h) * self.dims.width + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(b, c, h, w);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            dims: self.dims,
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor4 {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same(other, "add")?;
        Ok(Tensor4 {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
            dims: self.dims,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean and (biased) variance over every element.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.data.len().max(1) as f64;
        let mean = self.sum() / n;
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    /// Copy of sample `b` as a batch-1 tensor.
    pub fn sample(&self, b: usize) -> Tensor4 {
        let n = self.dims.sample_len();
        Tensor4 {
            data: self.data[b * n..(b + 1) * n].to_vec(),
            dims: self.dims.with_batch(1),
        }
    }

    /// Gathers the listed samples into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor4 {
        let n = self.dims.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor4 {
            data,
            dims: self.dims.with_batch(indices.len()),
        }
    }

    /// Concatenates batches with identical per-sample dims.
    pub fn stack(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let mut batch = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims.with_batch(0) != first.dims.with_batch(0) {
                return Err(Error::dim(format!(
                    "stack: {} vs {}",
                    p.dims, first.dims
                )));
            }
            batch += p.dims.batch;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            data,
            dims: first.dims.with_batch(batch),
        })
    }

    pub fn reshape(self, dims: Dims) -> Result<Tensor4> {
        if dims.len() != self.data.len() {
            return Err(Error::dim(format!("reshape {} -> {dims}", self.dims)));
        }
        Ok(Tensor4 {
            data: self.data,
            dims,
        })
    }

    /// Per-channel mean and biased variance over batch and spatial axes.
    pub fn channel_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let Dims {
            batch,
            channels,
            height,
            width,
        } = self.dims;
        let plane = height * width;
        let count = (batch * plane).max(1) as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for b in 0..batch {
            for (c, m) in mean.iter_mut().enumerate() {
                let off = (b * channels + c) * plane;
                *m += self.data[off..off + plane].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                var[c] += self.data[off..off + plane]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count;
        }
        (mean, var)
    }

    fn check_same(&self, other: &Tensor4, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dim(format!("{op}: {} vs {}", self.dims, other.dims)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let d = Dims::new(2, 3, 4, 4);
        assert!(Tensor4::from_vec(d, vec![0.0; 95]).is_err());
        assert!(Tensor4::from_vec(d, vec![0.0; 96]).is_ok());
    }

    #[test]
    fn indexing_is_row_major() {
        let d = Dims::new(2, 2, 2, 3);
        let t = Tensor4::from_vec(d, (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 1), 1.0);
        assert_eq!(t.at(0, 0, 1, 0), 3.0);
        assert_eq!(t.at(0, 1, 0, 0), 6.0);
        assert_eq!(t.at(1, 0, 0, 0), 12.0);
    }

    #[test]
    fn channel_moments_match_direct_loop() {
        let t = Tensor4::from_vec(
            Dims::new(2, 2, 1, 2),
            vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 0.0, 20.0],
        )
        .unwrap();
        let (m, v) = t.channel_moments();
        assert_eq!(m, vec![4.0, 10.0]);
        assert_eq!(v, vec![5.0, 50.0]);
    }

    #[test]
    fn gather_and_stack_roundtrip() {
        let t = Tensor4::from_vec(Dims::new(3, 1, 1, 2), (0..6).map(f64::from).collect())
            .unwrap();
        let g = t.gather(&[2, 0]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        let s = Tensor4::stack(&[t.sample(0), t.sample(1), t.sample(2)]).unwrap();
        assert_eq!(s, t);
    }
}
