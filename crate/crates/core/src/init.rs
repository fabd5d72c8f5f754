//! Frozen weight construction: Gaussian draws orthogonalized by a
//! triangular decomposition, rescaled by a gain calibrated for the
//! activation at its mean-field fixed point.

use serde::{Deserialize, Serialize};

use crate::autograd::Activation;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::meanfield;
use crate::rng::{derive_seed, rng_from, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    OrthogonalTriangular,
    /// Contrast experiments only.
    Gaussian,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoGain {
    Calibrated,
}

/// Either a literal gain or `"calibrated"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gain {
    Value(f64),
    Auto(AutoGain),
}

/// Where the orthogonal factor of a convolution lives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelLayout {
    /// The whole `d_out × (d_in·r·r)` bank is orthogonalized.
    Full,
    /// Only a stride-aligned tap window is populated: the center tap for
    /// stride 1, a 2×2 window for stride 2. Such convolutions are exact
    /// isometries of the feature map, not just of the flattened bank.
    #[default]
    Centered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub scheme: Scheme,
    pub gain: Gain,
    pub seed: u64,
    /// Variance of the Gaussian draw. For the Gaussian scheme the entries
    /// are `N(0, weight_variance / fan_in)`; for the orthogonal scheme the
    /// value does not affect the result.
    #[serde(default = "one")]
    pub weight_variance: f64,
    #[serde(default)]
    pub kernel_layout: KernelLayout,
    #[serde(default = "tanh")]
    pub activation: Activation,
    /// Pre-activation variance at which the gain is calibrated.
    #[serde(default = "default_v_star")]
    pub v_star: f64,
}

fn one() -> f64 {
    1.0
}

fn tanh() -> Activation {
    Activation::Tanh
}

pub const DEFAULT_V_STAR: f64 = 0.03;

fn default_v_star() -> f64 {
    DEFAULT_V_STAR
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            scheme: Scheme::OrthogonalTriangular,
            gain: Gain::Auto(AutoGain::Calibrated),
            seed: 0,
            weight_variance: 1.0,
            kernel_layout: KernelLayout::Centered,
            activation: Activation::Tanh,
            v_star: DEFAULT_V_STAR,
        }
    }
}

impl InitSpec {
    pub fn orthogonal(seed: u64) -> Self {
        InitSpec {
            seed,
            ..Self::default()
        }
    }

    pub fn gaussian(seed: u64, weight_variance: f64) -> Self {
        InitSpec {
            scheme: Scheme::Gaussian,
            gain: Gain::Value(1.0),
            seed,
            weight_variance,
            kernel_layout: KernelLayout::Full,
            ..Self::default()
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = Gain::Value(gain);
        self
    }

    pub fn with_layout(mut self, layout: KernelLayout) -> Self {
        self.kernel_layout = layout;
        self
    }

    /// Same spec with the seed replaced by one derived from `path`.
    pub fn child(&self, path: &[u64]) -> Self {
        InitSpec {
            seed: derive_seed(self.seed, path),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Gain::Value(g) = self.gain {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::invalid(format!("gain must be positive, got {g}")));
            }
        }
        if !(self.weight_variance > 0.0 && self.weight_variance.is_finite()) {
            return Err(Error::invalid("weight_variance must be positive"));
        }
        if self.v_star < 0.0 {
            return Err(Error::invalid("v_star must be non-negative"));
        }
        Ok(())
    }

    pub fn resolved_gain(&self) -> f64 {
        match self.gain {
            Gain::Value(g) => g,
            Gain::Auto(AutoGain::Calibrated) => calibrate_gain(self.activation, self.v_star),
        }
    }

    fn rng(&self) -> Rng {
        rng_from(self.seed)
    }
}

/// `g` with `g² · E[σ′(√v* z)²] = 1`.
pub fn calibrate_gain(activation: Activation, v_star: f64) -> f64 {
    1.0 / meanfield::estimate_p_linear(activation, v_star).sqrt()
}

/// `Q = F·Winv` (or `Winvᵀ·F` when `transposed`), with `Winv` upper
/// triangular and strictly positive on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalFactor {
    pub q: Matrix,
    pub winv: Matrix,
    /// Set for wide inputs, where the rows of `F` were orthonormalized.
    pub transposed: bool,
}

/// Orthonormalizes the columns of `F` (rows when `F` is wide) by modified
/// Gram–Schmidt with one reorthogonalization pass.
pub fn orthogonalize_triangular(f: &Matrix) -> Result<OrthogonalFactor> {
    if f.rows() == 0 || f.cols() == 0 {
        return Err(Error::invalid("cannot orthogonalize an empty matrix"));
    }
    if f.rows() < f.cols() {
        let (q, winv) = gram_schmidt_columns(&f.transpose())?;
        return Ok(OrthogonalFactor {
            q: q.transpose(),
            winv,
            transposed: true,
        });
    }
    let (q, winv) = gram_schmidt_columns(f)?;
    Ok(OrthogonalFactor {
        q,
        winv,
        transposed: false,
    })
}

fn gram_schmidt_columns(f: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = (f.rows(), f.cols());
    let cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| f[(i, j)]).collect()).collect();
    let scale = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r = Matrix::zeros(n, n);
    for (j, col) in cols.iter().enumerate() {
        let mut v = col.clone();
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let d: f64 = qi.iter().zip(&v).map(|(a, b)| a * b).sum();
                r[(i, j)] += d;
                for (vk, qk) in v.iter_mut().zip(qi) {
                    *vk -= d * qk;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 1e-10 * scale) {
            return Err(Error::RankDeficient {
                column: j,
                residual: norm,
            });
        }
        r[(j, j)] = norm;
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    let qm = Matrix::from_fn(m, n, |i, j| q[j][i]);
    Ok((qm, upper_triangular_inverse(&r)))
}

/// Inverse of an upper-triangular matrix by back substitution.
fn upper_triangular_inverse(r: &Matrix) -> Matrix {
    let n = r.rows();
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        inv[(j, j)] = 1.0 / r[(j, j)];
        for i in (0..j).rev() {
            let s: f64 = (i + 1..=j).map(|k| r[(i, k)] * inv[(k, j)]).sum();
            inv[(i, j)] = -s / r[(i, i)];
        }
    }
    inv
}

/// A `rows × cols` matrix with orthonormal rows (or columns when tall)
/// times `gain`, drawn from `rng`.
pub fn orthogonal_matrix(rows: usize, cols: usize, gain: f64, variance: f64, rng: &mut Rng) -> Result<Matrix> {
    let f = Matrix::gaussian(rows, cols, variance, rng);
    Ok(orthogonalize_triangular(&f)?.q.scale(gain))
}

/// Initialized weights for one layer. Biases are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `[d_out, d_in, r, r]` for convolutions, `[d_out, d_in]` for dense.
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub gain: f64,
}

impl LayerParams {
    /// The weights as a `d_out × (everything else)` matrix.
    pub fn flattened(&self) -> Matrix {
        let rows = self.shape[0];
        Matrix::from_vec(rows, self.weights.len() / rows, self.weights.clone())
            .expect("shape product matches weight length")
    }
}

fn matrix_for(spec: &InitSpec, rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Result<Matrix> {
    let gain = spec.resolved_gain();
    match spec.scheme {
        Scheme::OrthogonalTriangular => orthogonal_matrix(rows, cols, gain, spec.weight_variance, rng),
        Scheme::Gaussian => Ok(Matrix::gaussian(
            rows,
            cols,
            gain * gain * spec.weight_variance / fan_in as f64,
            rng,
        )),
        Scheme::Identity => Ok(Matrix::from_fn(rows, cols, |i, j| if i == j { gain } else { 0.0 })),
    }
}

pub fn init_dense(spec: &InitSpec, d_out: usize, d_in: usize) -> Result<LayerParams> {
    spec.validate()?;
    let mut rng = spec.rng();
    let m = matrix_for(spec, d_out, d_in, d_in, &mut rng)?;
    Ok(LayerParams {
        weights: m.into_vec(),
        bias: vec![0.0; d_out],
        shape: vec![d_out, d_in],
        frozen: true,
        gain: spec.resolved_gain(),
    })
}

/// Stride-aligned tap window for the centered layout.
pub fn tap_window(r: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    let c = (r - 1) / 2;
    match stride {
        1 => Ok(vec![(c, c)]),
        2 => {
            if r < 2 {
                return Err(Error::invalid("a stride-2 window needs a kernel of at least 2"));
            }
            Ok(vec![(c, c), (c, c + 1), (c + 1, c), (c + 1, c + 1)])
        }
        s => Err(Error::invalid(format!("unsupported stride {s}"))),
    }
}

/// Scatters a `d_out × (d_in·taps)` factor into a `d_out × d_in × r × r`
/// bank. Column `ic·taps + t` feeds input channel `ic` at tap `t`.
fn scatter_window(m: &Matrix, d_in: usize, r: usize, taps: &[(usize, usize)]) -> Vec<f64> {
    let d_out = m.rows();
    let mut w = vec![0.0; d_out * d_in * r * r];
    for oc in 0..d_out {
        for ic in 0..d_in {
            for (t, &(kh, kw)) in taps.iter().enumerate() {
                w[((oc * d_in + ic) * r + kh) * r + kw] = m[(oc, ic * taps.len() + t)];
            }
        }
    }
    w
}

/// Convolution bank `d_out × d_in × r × r` for stride 1.
pub fn init_conv_orthogonal(spec: &InitSpec, d_out: usize, d_in: usize, r: usize) -> Result<LayerParams> {
    init_conv(spec, d_out, d_in, r, 1)
}

/// Convolution bank for a given stride. The Gaussian scheme and the full
/// layout ignore the stride.
pub fn init_conv(spec: &InitSpec, d_out: usize, d_in: usize, r: usize, stride: usize) -> Result<LayerParams> {
    spec.validate()?;
    if r == 0 || d_out == 0 || d_in == 0 {
        return Err(Error::invalid("convolution dimensions must be positive"));
    }
    let mut rng = spec.rng();
    let fan_in = d_in * r * r;
    let weights = match (spec.scheme, spec.kernel_layout) {
        (Scheme::Gaussian, _) | (_, KernelLayout::Full) => {
            matrix_for(spec, d_out, fan_in, fan_in, &mut rng)?.into_vec()
        }
        (_, KernelLayout::Centered) => {
            let taps = tap_window(r, stride)?;
            let m = matrix_for(spec, d_out, d_in * taps.len(), fan_in, &mut rng)?;
            scatter_window(&m, d_in, r, &taps)
        }
    };
    Ok(LayerParams {
        weights,
        bias: vec![0.0; d_out],
        shape: vec![d_out, d_in, r, r],
        frozen: true,
        gain: spec.resolved_gain(),
    })
}

/// Depthwise bank `channels × 1 × r × r`. Under the orthogonal scheme with
/// the centered layout every channel shares one unit-norm tap window
/// (the window itself is an orthogonalized Gaussian row).
pub fn init_depthwise(spec: &InitSpec, channels: usize, r: usize, stride: usize) -> Result<LayerParams> {
    let window = depthwise_window(spec, r, stride, 1)?;
    Ok(depthwise_from_window(spec, channels, r, &window[0]))
}

/// `count` mutually orthonormal depthwise windows (`count ≤ taps`), each an
/// `r × r` kernel. Used where two branches must see orthogonal windows.
pub fn depthwise_window(spec: &InitSpec, r: usize, stride: usize, count: usize) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = spec.rng();
    match (spec.scheme, spec.kernel_layout) {
        (Scheme::Gaussian, _) | (_, KernelLayout::Full) => (0..count)
            .map(|_| Ok(matrix_for(spec, 1, r * r, r * r, &mut rng)?.into_vec()))
            .collect(),
        (_, KernelLayout::Centered) => {
            let taps = tap_window(r, stride)?;
            if count > taps.len() {
                return Err(Error::invalid(format!(
                    "{count} orthogonal windows requested but only {} taps",
                    taps.len()
                )));
            }
            let m = matrix_for(spec, count, taps.len(), r * r, &mut rng)?;
            Ok((0..count)
                .map(|i| {
                    let row = Matrix::from_vec(1, taps.len(), m.row(i).to_vec()).expect("row");
                    scatter_window(&row, 1, r, &taps)
                })
                .collect())
        }
    }
}

/// Replicates one window across channels.
pub fn depthwise_from_window(spec: &InitSpec, channels: usize, r: usize, window: &[f64]) -> LayerParams {
    LayerParams {
        weights: window.iter().copied().cycle().take(channels * r * r).collect(),
        bias: vec![0.0; channels],
        shape: vec![channels, 1, r, r],
        frozen: true,
        gain: spec.resolved_gain(),
    }
}

/// Largest deviation of the Gram matrix on the smaller side of the
/// flattened weights from `gain²·I`. Rows are used when `rows ≤ cols`.
pub fn gram_deviation(w: &Matrix, gain: f64) -> f64 {
    let g = if w.rows() <= w.cols() {
        w.gram_rows()
    } else {
        w.gram_cols()
    };
    let n = g.rows();
    g.max_abs_diff(&Matrix::identity(n).scale(gain * gain))
}

/// Ratio of largest to smallest singular value, from the eigenvalues of the
/// smaller Gram matrix via Jacobi rotations.
pub fn singular_value_spread(w: &Matrix) -> f64 {
    let g = if w.rows() <= w.cols() {
        w.gram_rows()
    } else {
        w.gram_cols()
    };
    let ev = crate::linalg::symmetric_eigenvalues(&g);
    let max = ev.iter().copied().fold(f64::MIN, f64::max);
    let min = ev.iter().copied().fold(f64::MAX, f64::min).max(0.0);
    (max / min).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_input_is_fixed() {
        let f = Matrix::from_vec(2, 2, vec![0.6, -0.8, 0.8, 0.6]).unwrap();
        let o = orthogonalize_triangular(&f).unwrap();
        assert!(o.q.max_abs_diff(&f) < 1e-15);
        assert!(o.winv.max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn diagonal_input() {
        let f = Matrix::from_diag(&[2.0, 3.0]);
        let o = orthogonalize_triangular(&f).unwrap();
        assert_eq!(o.q, Matrix::identity(2));
        assert_eq!(o.winv, Matrix::from_diag(&[0.5, 1.0 / 3.0]));
    }

    #[test]
    fn rank_deficient_is_reported() {
        let f = Matrix::from_vec(2, 3, vec![1., 2., 3., 2., 4., 6.]).unwrap();
        assert!(matches!(
            orthogonalize_triangular(&f),
            Err(Error::RankDeficient { column: 1, .. })
        ));
    }

    #[test]
    fn wide_factor_reconstructs() {
        let mut rng = rng_from(1);
        let f = Matrix::gaussian(3, 7, 1.0, &mut rng);
        let o = orthogonalize_triangular(&f).unwrap();
        assert!(o.transposed);
        assert!(gram_deviation(&o.q, 1.0) < 1e-12);
        let rebuilt = o.winv.transpose().matmul(&f).unwrap();
        assert!(rebuilt.max_abs_diff(&o.q) < 1e-12);
        assert!(o.winv.is_upper_triangular(0.0));
    }

    #[test]
    fn identity_activation_gain_is_one() {
        assert!((calibrate_gain(Activation::Identity, 0.7) - 1.0).abs() < 1e-14);
        assert!((calibrate_gain(Activation::Tanh, 0.0) - 1.0).abs() < 1e-14);
        assert!(calibrate_gain(Activation::Tanh, 1e-6) - 1.0 < 1e-5);
    }

    #[test]
    fn centered_conv_populates_only_the_window() {
        let spec = InitSpec::orthogonal(3).with_gain(1.0);
        let p = init_conv(&spec, 4, 2, 3, 2).unwrap();
        let taps = tap_window(3, 2).unwrap();
        for oc in 0..4 {
            for ic in 0..2 {
                for kh in 0..3 {
                    for kw in 0..3 {
                        let v = p.weights[((oc * 2 + ic) * 3 + kh) * 3 + kw];
                        if !taps.contains(&(kh, kw)) {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
        assert!(gram_deviation(&p.flattened(), 1.0) < 1e-12);
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = InitSpec::orthogonal(11);
        let a = init_conv_orthogonal(&spec, 8, 4, 3).unwrap();
        let b = init_conv_orthogonal(&spec, 8, 4, 3).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn gain_parses_from_number_or_keyword() {
        let s: InitSpec = toml::from_str(
            "scheme = \"orthogonal-triangular\"\ngain = \"calibrated\"\nseed = 1\n",
        )
        .unwrap();
        assert_eq!(s.gain, Gain::Auto(AutoGain::Calibrated));
        let s: InitSpec = toml::from_str("scheme = \"gaussian\"\ngain = 1.5\nseed = 1\n").unwrap();
        assert_eq!(s.gain, Gain::Value(1.5));
        assert!(toml::from_str::<InitSpec>("scheme = \"gaussian\"\ngain = 1.5\nseed = 1\nbogus = 2\n").is_err());
    }
}
