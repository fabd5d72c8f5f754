//! Mean-field signal propagation: the variance map, its fixed point, χ,
//! spectral moments of block Jacobians and the depth growth of Gaussian
//! Jacobian products.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Activation;
use crate::error::{Error, Result};
use crate::init::{calibrate_gain, orthogonal_matrix};
use crate::linalg::Matrix;
use crate::quadrature::GaussHermite;
use crate::rng::child_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceMap {
    pub v_w: f64,
    pub v_b: f64,
    pub activation: Activation,
    pub quadrature_nodes: usize,
}

impl VarianceMap {
    pub fn new(v_w: f64, v_b: f64, activation: Activation) -> Result<Self> {
        let m = VarianceMap {
            v_w,
            v_b,
            activation,
            quadrature_nodes: crate::quadrature::DEFAULT_NODES,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_w > 0.0) {
            return Err(Error::invalid(format!("v_W must be positive, got {}", self.v_w)));
        }
        if !(self.v_b >= 0.0) {
            return Err(Error::invalid(format!("v_b must be non-negative, got {}", self.v_b)));
        }
        if self.quadrature_nodes < 32 {
            return Err(Error::invalid("at least 32 quadrature nodes are required"));
        }
        Ok(())
    }

    fn rule(&self) -> GaussHermite {
        if self.quadrature_nodes == crate::quadrature::DEFAULT_NODES {
            GaussHermite::standard().clone()
        } else {
            GaussHermite::new(self.quadrature_nodes)
        }
    }
}

/// `E[f(√v·z)]` under the shared 64-node rule.
fn expect_scaled(v: f64, f: impl Fn(f64) -> f64) -> f64 {
    let s = v.max(0.0).sqrt();
    GaussHermite::standard().expect(|z| f(s * z))
}

/// `v_W · E[σ(√v z)²] + v_b`.
pub fn variance_step(v_in: f64, map: &VarianceMap) -> f64 {
    let s = v_in.max(0.0).sqrt();
    let act = map.activation;
    map.v_w * map.rule().expect(|z| act.apply(s * z).powi(2)) + map.v_b
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub v_star: f64,
    pub iterations: usize,
    pub residual: f64,
}

pub const FIXED_POINT_TOL: f64 = 1e-10;
pub const FIXED_POINT_MAX_ITER: usize = 10_000;

/// Plain iteration `v ← map(v)` from `v0`.
pub fn solve_fixed_point(map: &VarianceMap, v0: f64) -> Result<FixedPoint> {
    map.validate()?;
    if !(v0 >= 0.0) {
        return Err(Error::invalid("v0 must be non-negative"));
    }
    let mut v = v0;
    for it in 1..=FIXED_POINT_MAX_ITER {
        let next = variance_step(v, map);
        if !next.is_finite() {
            return Err(Error::NoConvergence {
                iterations: it,
                last: next,
            });
        }
        let delta = (next - v).abs();
        v = next;
        if delta < FIXED_POINT_TOL {
            return Ok(FixedPoint {
                v_star: v,
                iterations: it,
                residual: (variance_step(v, map) - v).abs(),
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: FIXED_POINT_MAX_ITER,
        last: v,
    })
}

/// `E[σ′(√v* z)²]`, read as the fraction of units in the linear regime.
pub fn estimate_p_linear(activation: Activation, v_star: f64) -> f64 {
    expect_scaled(v_star, |x| activation.derivative(x).powi(2))
}

/// `χ = v_W · E[σ′(√v* z)²]`.
pub fn chi(map: &VarianceMap, v_star: f64) -> f64 {
    map.v_w * estimate_p_linear(map.activation, v_star)
}

/// A critical operating point: weight gain with `χ = 1` and the bias
/// variance that makes `v_star` a fixed point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub activation: Activation,
    pub v_star: f64,
    pub gain: f64,
    pub v_b: f64,
}

impl OperatingPoint {
    pub fn critical(activation: Activation, v_star: f64) -> Result<Self> {
        let gain = calibrate_gain(activation, v_star);
        let v_b = v_star - gain * gain * expect_scaled(v_star, |x| activation.apply(x).powi(2));
        if v_b < -1e-15 {
            return Err(Error::invalid(format!(
                "no non-negative bias variance makes {v_star} critical for {}",
                activation.name()
            )));
        }
        Ok(OperatingPoint {
            activation,
            v_star,
            gain,
            v_b: v_b.max(0.0),
        })
    }

    pub fn map(&self) -> VarianceMap {
        VarianceMap {
            v_w: self.gain * self.gain,
            v_b: self.v_b,
            activation: self.activation,
            quadrature_nodes: crate::quadrature::DEFAULT_NODES,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralStats {
    pub phi: f64,
    pub phi2: f64,
    pub trace_var: f64,
    pub width: usize,
}

/// Moments of the spectrum of `JJᵀ`, normalized by the output width.
pub fn spectral_stats(j: &Matrix) -> Result<SpectralStats> {
    if j.rows() == 0 || j.cols() == 0 {
        return Err(Error::invalid("spectral stats of an empty matrix"));
    }
    let w = j.rows();
    let jjt = j.gram_rows();
    let phi = jjt.trace() / w as f64;
    let phi2 = jjt.frobenius_sq() / w as f64;
    Ok(SpectralStats {
        phi,
        phi2,
        trace_var: phi2 - phi * phi,
        width: w,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsometryVerdict {
    pub pass: bool,
    /// `tol_phi − |phi − 1|`; negative when violated.
    pub phi_margin: f64,
    /// `tol_var − trace_var`; negative when violated.
    pub var_margin: f64,
}

pub const DEFAULT_TOL: f64 = 0.05;

pub fn check_isometry(stats: &SpectralStats, tol_phi: f64, tol_var: f64) -> IsometryVerdict {
    let phi_margin = tol_phi - (stats.phi - 1.0).abs();
    let var_margin = tol_var - stats.trace_var;
    IsometryVerdict {
        pass: phi_margin >= 0.0 && var_margin >= 0.0,
        phi_margin,
        var_margin,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub m1: f64,
    pub m2: f64,
    pub variance: f64,
    pub l_depth: usize,
    pub p_linear: f64,
}

/// `m1 = (v_W p)^L`, `m2 = (v_W p)^{2L} (L + p) / p`.
pub fn gaussian_moments(v_w: f64, p_linear: f64, l_depth: usize) -> Result<GaussianMoments> {
    if !(p_linear > 0.0 && p_linear <= 1.0) {
        return Err(Error::invalid(format!("p_linear must be in (0, 1], got {p_linear}")));
    }
    if l_depth == 0 {
        return Err(Error::invalid("depth must be at least 1"));
    }
    let base = (v_w * p_linear).powi(l_depth as i32);
    let m1 = base;
    let m2 = base * base * (l_depth as f64 + p_linear) / p_linear;
    Ok(GaussianMoments {
        m1,
        m2,
        variance: m2 - m1 * m1,
        l_depth,
        p_linear,
    })
}

/// Weight family for the dense stacks below.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackInit {
    /// `gain · Q`, `Q` orthogonal.
    Orthogonal,
    /// i.i.d. `N(0, gain² / width)`.
    Gaussian,
}

fn normal(rng: &mut crate::rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn stack_weight(init: StackInit, gain: f64, width: usize, seed: u64, layer: usize) -> Result<Matrix> {
    let mut rng = child_rng(seed, &[1, layer as u64]);
    match init {
        StackInit::Orthogonal => orthogonal_matrix(width, width, gain, 1.0, &mut rng),
        StackInit::Gaussian => Ok(Matrix::gaussian(width, width, gain * gain / width as f64, &mut rng)),
    }
}

fn stack_bias(v_b: f64, width: usize, seed: u64, layer: usize) -> Vec<f64> {
    let mut rng = child_rng(seed, &[2, layer as u64]);
    let s = v_b.sqrt();
    (0..width).map(|_| s * normal(&mut rng)).collect()
}

/// Empirical pre-activation variance after each of `depth` layers
/// `h ← W σ(h) + b`, starting from `h ~ N(0, v*)`. Entry `0` is the input.
pub fn variance_profile(
    point: &OperatingPoint,
    init: StackInit,
    depth: usize,
    width: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = child_rng(seed, &[0]);
    let s = point.v_star.sqrt();
    // columns are samples
    let mut h = Matrix::from_vec(width, batch, (0..width * batch).map(|_| s * normal(&mut rng)).collect())?;
    let var = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>() / m.data().len() as f64;
    let mut out = vec![var(&h)];
    for l in 0..depth {
        let w = stack_weight(init, point.gain, width, seed, l)?;
        let b = stack_bias(point.v_b, width, seed, l);
        let a = Matrix::from_vec(
            width,
            batch,
            h.data().iter().map(|&v| point.activation.apply(v)).collect(),
        )?;
        h = w.matmul(&a)?;
        for i in 0..width {
            h.row_mut(i).iter_mut().for_each(|v| *v += b[i]);
        }
        out.push(var(&h));
    }
    Ok(out)
}

/// Spectral statistics of the input-output Jacobian of a `depth`-layer
/// stack, `J = Π W_l D_l` with `D_l = diag σ′(h_{l−1})`, along one
/// input drawn from the fixed point.
pub fn product_jacobian_stats(
    point: &OperatingPoint,
    init: StackInit,
    depth: usize,
    width: usize,
    seed: u64,
) -> Result<SpectralStats> {
    let mut rng = child_rng(seed, &[0]);
    let s = point.v_star.sqrt();
    let mut h: Vec<f64> = (0..width).map(|_| s * normal(&mut rng)).collect();
    let mut j: Option<Matrix> = None;
    for l in 0..depth {
        let w = stack_weight(init, point.gain, width, seed, l)?;
        let b = stack_bias(point.v_b, width, seed, l);
        let d: Vec<f64> = h.iter().map(|&v| point.activation.derivative(v)).collect();
        let a: Vec<f64> = h.iter().map(|&v| point.activation.apply(v)).collect();
        // W D J  ==  W (D J)
        let dj = match j.take() {
            None => Matrix::from_diag(&d),
            Some(mut prev) => {
                prev.scale_rows(&d);
                prev
            }
        };
        j = Some(w.matmul(&dj)?);
        h = w.matvec(&a).iter().zip(&b).map(|(x, bb)| x + bb).collect();
    }
    let j = j.ok_or_else(|| Error::invalid("depth must be at least 1"))?;
    spectral_stats(&j)
}

/// Writes `v_w,v_b,v_star,chi` rows over a grid of weight variances.
pub fn write_phase_diagram(
    out: &mut impl Write,
    activation: Activation,
    v_ws: &[f64],
    v_bs: &[f64],
) -> Result<()> {
    writeln!(out, "v_w,v_b,v_star,chi")?;
    for &v_b in v_bs {
        for &v_w in v_ws {
            let map = VarianceMap::new(v_w, v_b, activation)?;
            match solve_fixed_point(&map, 1.0) {
                Ok(fp) => writeln!(out, "{v_w},{v_b},{},{}", fp.v_star, chi(&map, fp.v_star))?,
                Err(_) => writeln!(out, "{v_w},{v_b},,")?,
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_step_is_affine() {
        let m = VarianceMap::new(1.3, 0.2, Activation::Identity).unwrap();
        assert!((variance_step(0.7, &m) - (1.3 * 0.7 + 0.2)).abs() < 1e-13);
    }

    #[test]
    fn tanh_zero_input_zero_bias() {
        let m = VarianceMap::new(2.0, 0.0, Activation::Tanh).unwrap();
        assert_eq!(variance_step(0.0, &m), 0.0);
    }

    #[test]
    fn identity_contracts_to_zero() {
        let m = VarianceMap::new(0.5, 0.0, Activation::Identity).unwrap();
        let fp = solve_fixed_point(&m, 3.0).unwrap();
        assert!(fp.v_star < 1e-9);
    }

    #[test]
    fn identity_marginal_keeps_v0() {
        let m = VarianceMap::new(1.0, 0.0, Activation::Identity).unwrap();
        let fp = solve_fixed_point(&m, 0.37).unwrap();
        assert!((fp.v_star - 0.37).abs() < 1e-14);
        assert_eq!(fp.iterations, 1);
    }

    #[test]
    fn identity_growth_fails_to_converge() {
        let m = VarianceMap::new(1.5, 0.1, Activation::Identity).unwrap();
        assert!(matches!(
            solve_fixed_point(&m, 1.0),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn chi_of_identity_is_v_w() {
        let m = VarianceMap::new(0.8, 0.0, Activation::Identity).unwrap();
        assert!((chi(&m, 1.0) - 0.8).abs() < 1e-13);
    }

    #[test]
    fn critical_point_is_fixed_and_critical() {
        let p = OperatingPoint::critical(Activation::Tanh, 0.03).unwrap();
        assert!(p.v_b >= 0.0);
        let m = p.map();
        assert!((variance_step(p.v_star, &m) - p.v_star).abs() < 1e-14);
        assert!((chi(&m, p.v_star) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_trivial_cases() {
        let s = spectral_stats(&Matrix::identity(5)).unwrap();
        assert_eq!((s.phi, s.phi2, s.trace_var), (1.0, 1.0, 0.0));
        let s = spectral_stats(&Matrix::identity(4).scale(2.0)).unwrap();
        assert_eq!((s.phi, s.phi2, s.trace_var), (4.0, 16.0, 0.0));
        assert!(check_isometry(&spectral_stats(&Matrix::identity(3)).unwrap(), 0.0, 0.0).pass);
        assert!(spectral_stats(&Matrix::zeros(0, 0)).is_err());
    }

    #[test]
    fn moments_plug_in() {
        let g = gaussian_moments(1.0, 1.0, 1).unwrap();
        assert_eq!((g.m1, g.m2, g.variance), (1.0, 2.0, 1.0));
        let g = gaussian_moments(2.0, 0.5, 20).unwrap();
        assert!((g.m1 - 1.0).abs() < 1e-12);
        assert!((g.variance - 40.0).abs() < 1e-9);
        assert!(gaussian_moments(1.0, 0.0, 3).is_err());
    }

    #[test]
    fn phase_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_phase_diagram(&mut buf, Activation::Tanh, &[0.5, 1.5], &[0.0]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("v_w,v_b,v_star,chi"));
    }
}
