//! Monte Carlo checks of the concentration bound for post-BN inner products
//! of cyclic convolutions with orthogonalized Gaussian filters, plus
//! Orlicz-norm estimation.

use std::io::Write;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Activation;
use crate::error::{Error, Result};
use crate::init::orthogonalize_triangular;
use crate::linalg::Matrix;
use crate::rng::{child_rng, Rng};
use crate::stats::{isotonic_nonincreasing, linear_fit, mean, quantile, variance};
use crate::tensor::{Dims, Tensor4};

/// Filter of shape `r × r × d`, stored `[a][b][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Filter {
    pub r: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Filter {
    pub fn at(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.r + b) * self.d + c]
    }

    pub fn gaussian(r: usize, d: usize, std: f64, rng: &mut Rng) -> Self {
        Filter {
            r,
            d,
            data: (0..r * r * d).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }

    /// The `r × (r·d)` unfolding made row-orthonormal by the triangular
    /// factorization, then scaled by `scale`.
    pub fn orthogonalized(&self, scale: f64) -> Result<Self> {
        let m = Matrix::from_vec(self.r, self.r * self.d, self.data.clone())?;
        let q = orthogonalize_triangular(&m)?.q;
        Ok(Filter {
            r: self.r,
            d: self.d,
            data: q.into_vec().into_iter().map(|v| v * scale).collect(),
        })
    }
}

fn check_single(h: &Tensor4) -> Result<(usize, usize)> {
    let d = h.dims();
    if d.batch != 1 || d.height != d.width {
        return Err(Error::dim(format!("expected one square image, got {d}")));
    }
    Ok((d.height, d.channels))
}

/// Wrap-around correlation with patches centered at each location:
/// `out[i][j] = Σ F[a][b][c] · h[c][(i+a−⌊r/2⌋) mod n][(j+b−⌊r/2⌋) mod n]`.
pub fn cyclic_conv(h: &Tensor4, f: &Filter) -> Result<Matrix> {
    let (n, d) = check_single(h)?;
    if f.r >= n {
        return Err(Error::invalid(format!("filter size {} must be below the image size {n}", f.r)));
    }
    if f.d != d {
        return Err(Error::dim(format!("filter has {} channels, image has {d}", f.d)));
    }
    let half = f.r / 2;
    let x = h.data();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for a in 0..f.r {
                let y = (i + n + a - half) % n;
                for b in 0..f.r {
                    let xx = (j + n + b - half) % n;
                    let w = &f.data[(a * f.r + b) * d..(a * f.r + b + 1) * d];
                    for (c, wv) in w.iter().enumerate() {
                        acc += wv * x[(c * n + y) * n + xx];
                    }
                }
            }
            out.row_mut(i)[j] = acc;
        }
    }
    Ok(out)
}

/// Largest Frobenius norm over all cyclic `r × r × d` patches.
pub fn max_patch_norm(h: &Tensor4, r: usize) -> Result<f64> {
    let (n, d) = check_single(h)?;
    let half = r / 2;
    let mut best = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for a in 0..r {
                for b in 0..r {
                    for c in 0..d {
                        let v = h.at(0, c, (i + n + a - half) % n, (j + n + b - half) % n);
                        s += v * v;
                    }
                }
            }
            best = best.max(s.sqrt());
        }
    }
    Ok(best)
}

/// `max(max‖[x]‖·(v_h − eps)^{-1/2}, max‖[y]‖·(v_h' − eps)^{-1/2})`.
pub fn compute_r(h: &Tensor4, h2: &Tensor4, r: usize, v_h: f64, v_h2: f64, eps: f64) -> Result<f64> {
    for v in [v_h, v_h2] {
        if v <= eps {
            return Err(Error::VarianceBelowEps { variance: v, eps });
        }
    }
    Ok((max_patch_norm(h, r)? / (v_h - eps).sqrt()).max(max_patch_norm(h2, r)? / (v_h2 - eps).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremConfig {
    /// Spatial size.
    pub n: usize,
    /// Kernel size, below `n`.
    pub r: usize,
    /// Channels.
    pub d: usize,
    /// Filter counts swept.
    pub n_sweep: Vec<usize>,
    /// Standard deviation of the Gaussian filter draw; the orthogonalized
    /// filter is rescaled by the same factor.
    pub v: f64,
    /// BN scale shared by every filter.
    pub gamma: f64,
    /// BN epsilon in `γ / √(v − eps)`.
    pub bn_eps: f64,
    /// Deviation threshold; `None` picks the 20th percentile of the
    /// deviations at the smallest swept `N`.
    pub eps_dev: Option<f64>,
    pub trials: usize,
    pub expectation_samples: usize,
    /// Correlation between the two inputs; 1 makes them identical.
    pub correlation: f64,
    pub seed: u64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        TheoremConfig {
            n: 8,
            r: 3,
            d: 2,
            n_sweep: vec![8, 16, 32, 64, 128],
            v: 0.5,
            gamma: 1.0,
            bn_eps: 1e-5,
            eps_dev: None,
            trials: 2000,
            expectation_samples: 100_000,
            correlation: 0.5,
            seed: 0,
        }
    }
}

impl TheoremConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r >= self.n {
            return Err(Error::Config(format!("kernel {} must be below image size {}", self.r, self.n)));
        }
        if self.n_sweep.len() < 3 || self.n_sweep.contains(&0) {
            return Err(Error::Config("n_sweep needs at least three positive filter counts".into()));
        }
        if self.trials == 0 || self.expectation_samples < 2 {
            return Err(Error::Config("trials and expectation_samples must be positive".into()));
        }
        if self.eps_dev.is_some_and(|e| e <= 0.0) {
            return Err(Error::Config("eps_dev must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.correlation) {
            return Err(Error::Config("correlation must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_filters: usize,
    pub p_hat: f64,
    /// Bound with the rate fitted from the smallest two `N`; not clipped
    /// at 1, so a vacuous bound shows as such.
    pub delta: f64,
    /// Bound with the rate from a direct log-linear fit at the smallest
    /// two `N` (reported for comparison).
    pub delta_lsq: f64,
    pub mean_abs_dev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub rows: Vec<SweepRow>,
    pub eps_dev: f64,
    pub expectation: f64,
    pub expectation_std_err: f64,
    pub v_h: f64,
    pub v_h2: f64,
    /// Slope, intercept and R² of `ln p̂` against `N` (rows with `p̂ > 0`).
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Largest gap between `p̂` and its nonincreasing isotonic fit.
    pub isotonic_residual: f64,
    pub big_r: f64,
    pub k: f64,
    pub c: f64,
    pub d_const: f64,
    /// Fitted exponent per filter, `c · min(K², K)`.
    pub rate: f64,
}

impl ConcentrationReport {
    pub fn bound_dominates(&self) -> bool {
        self.rows.iter().all(|r| r.p_hat <= r.delta)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "N,p_hat,delta,R,K")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.n_filters, r.p_hat, r.delta, self.big_r, self.k)?;
        }
        Ok(())
    }
}

struct Pair {
    h: Tensor4,
    h2: Tensor4,
}

fn input_pair(cfg: &TheoremConfig) -> Pair {
    let mut rng = child_rng(cfg.seed, &[0]);
    let dims = Dims::new(1, cfg.d, cfg.n, cfg.n);
    let h = Tensor4::randn(dims, 1.0, &mut rng);
    let noise = Tensor4::randn(dims, 1.0, &mut rng);
    let rho = cfg.correlation;
    let h2 = h.scale(rho).add(&noise.scale((1.0 - rho * rho).max(0.0).sqrt())).expect("same dims");
    Pair { h, h2 }
}

/// `(Σ σ(x)², Σ σ(y)², Σ σ(x)σ(y))` over positions for one filter.
fn filter_sums(pair: &Pair, cfg: &TheoremConfig, rng: &mut Rng) -> Result<(f64, f64, f64)> {
    let f = Filter::gaussian(cfg.r, cfg.d, cfg.v, rng).orthogonalized(cfg.v)?;
    let a = cyclic_conv(&pair.h, &f)?;
    let b = cyclic_conv(&pair.h2, &f)?;
    let t = Activation::Tanh;
    let mut s = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (sx, sy) = (t.apply(*x), t.apply(*y));
        s.0 += sx * sx;
        s.1 += sy * sy;
        s.2 += sx * sy;
    }
    Ok(s)
}

/// Largest `λ·ε − ln E[exp(λ (X − μ))]` over `λ` of either sign: a
/// Chernoff rate for the mean of i.i.d. copies of `X`.
pub fn chernoff_rate(xs: &[f64], eps: f64) -> f64 {
    let mu = mean(xs);
    let sd = variance(xs).sqrt().max(1e-300);
    let lambda_max = 4.0 * eps / (sd * sd);
    let tail = |sign: f64| {
        (1..=400)
            .map(|i| {
                let l = lambda_max * i as f64 / 400.0;
                let m = xs.iter().map(|x| (sign * l * (x - mu)).exp()).sum::<f64>() / xs.len() as f64;
                l * eps - m.ln()
            })
            .fold(0.0f64, f64::max)
    };
    tail(1.0).min(tail(-1.0))
}

/// Measures `P[|mean of N post-BN inner products − E| ≥ ε]` across the
/// sweep, fits the decay and the bound's constants.
pub fn deviation_experiment(cfg: &TheoremConfig) -> Result<ConcentrationReport> {
    cfg.validate()?;
    let pair = input_pair(cfg);
    let n2 = (cfg.n * cfg.n) as f64;

    let mut exp_rng = child_rng(cfg.seed, &[1]);
    let mut sums = Vec::with_capacity(cfg.expectation_samples);
    for _ in 0..cfg.expectation_samples {
        sums.push(filter_sums(&pair, cfg, &mut exp_rng)?);
    }
    let v_h = sums.iter().map(|s| s.0).sum::<f64>() / (sums.len() as f64 * n2);
    let v_h2 = sums.iter().map(|s| s.1).sum::<f64>() / (sums.len() as f64 * n2);
    for v in [v_h, v_h2] {
        if v <= cfg.bn_eps {
            return Err(Error::VarianceBelowEps { variance: v, eps: cfg.bn_eps });
        }
    }
    let scale = cfg.gamma * cfg.gamma / ((v_h - cfg.bn_eps).sqrt() * (v_h2 - cfg.bn_eps).sqrt());
    let ips: Vec<f64> = sums.iter().map(|s| scale * s.2).collect();
    let expectation = mean(&ips);
    let se = (variance(&ips) / ips.len() as f64).sqrt();

    // trial deviations and single-filter inner products per N
    let mut devs: Vec<Vec<f64>> = Vec::new();
    let mut singles: Vec<Vec<f64>> = Vec::new();
    for &nf in &cfg.n_sweep {
        let mut dv = Vec::with_capacity(cfg.trials);
        let mut single = Vec::new();
        for t in 0..cfg.trials {
            let mut rng = child_rng(cfg.seed, &[2, nf as u64, t as u64]);
            let mut acc = 0.0;
            for _ in 0..nf {
                let ip = scale * filter_sums(&pair, cfg, &mut rng)?.2;
                acc += ip;
                single.push(ip);
            }
            dv.push((acc / nf as f64 - expectation).abs());
        }
        devs.push(dv);
        singles.push(single);
    }

    let eps_dev = match cfg.eps_dev {
        Some(e) => e,
        None => quantile(&devs[0], 0.2),
    };
    if se > eps_dev / 10.0 {
        return Err(Error::NoisyExpectation {
            std_err: se,
            limit: eps_dev / 10.0,
        });
    }
    let p_hat: Vec<f64> = devs
        .iter()
        .map(|dv| dv.iter().filter(|&&d| d >= eps_dev).count() as f64 / dv.len() as f64)
        .collect();

    let (xs, ys): (Vec<f64>, Vec<f64>) = cfg
        .n_sweep
        .iter()
        .zip(&p_hat)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&n, &p)| (n as f64, p.ln()))
        .unzip();
    let fit = linear_fit(&xs, &ys);
    let iso = isotonic_nonincreasing(&p_hat);
    let isotonic_residual = p_hat.iter().zip(&iso).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // Rate fitted on the two smallest N only.
    let prefactor = 2.0 * n2;
    let fit_samples: Vec<f64> = singles.iter().take(2).flatten().copied().collect();
    let rate = chernoff_rate(&fit_samples, eps_dev);
    let lsq_rate = {
        let pts: Vec<(f64, f64)> = cfg
            .n_sweep
            .iter()
            .zip(&p_hat)
            .take(2)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&n, &p)| (n as f64, prefactor.ln() - p.ln()))
            .collect();
        let num: f64 = pts.iter().map(|(n, y)| n * y).sum();
        let den: f64 = pts.iter().map(|(n, _)| n * n).sum();
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };

    let big_r = compute_r(&pair.h, &pair.h2, cfg.r, v_h, v_h2, cfg.bn_eps)?;
    let lipschitz_l = Activation::Tanh.lipschitz();
    let d_const = 1.0;
    let k = eps_dev / (d_const * cfg.gamma * cfg.gamma * cfg.v * cfg.v * lipschitz_l * lipschitz_l * big_r * big_r * n2);
    let c = rate / (k * k).min(k);

    let rows = cfg
        .n_sweep
        .iter()
        .zip(&p_hat)
        .zip(&devs)
        .map(|((&nf, &p), dv)| SweepRow {
            n_filters: nf,
            p_hat: p,
            delta: prefactor * (-rate * nf as f64).exp(),
            delta_lsq: prefactor * (-lsq_rate * nf as f64).exp(),
            mean_abs_dev: mean(dv),
        })
        .collect();
    Ok(ConcentrationReport {
        rows,
        eps_dev,
        expectation,
        expectation_std_err: se,
        v_h,
        v_h2,
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        isotonic_residual,
        big_r,
        k,
        c,
        d_const,
        rate,
    })
}

/// Mean absolute deviation at `n_filters` for several BN scales; reported,
/// not asserted.
pub fn deviation_vs_gamma(cfg: &TheoremConfig, gammas: &[f64], n_filters: usize) -> Result<Vec<(f64, f64)>> {
    gammas
        .iter()
        .map(|&g| {
            let c = TheoremConfig {
                gamma: g,
                n_sweep: vec![n_filters, n_filters + 1, n_filters + 2],
                ..cfg.clone()
            };
            let r = deviation_experiment(&c)?;
            Ok((g, r.rows[0].mean_abs_dev))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrliczEstimate {
    pub psi_order: u32,
    pub norm_estimate: f64,
    pub samples: usize,
}

pub const ORLICZ_MIN_SAMPLES: usize = 10_000;

fn psi_mean(xs: &[f64], p: u32, t: f64) -> f64 {
    xs.iter()
        .map(|x| ((x.abs() / t).powi(p as i32)).exp() - 1.0)
        .sum::<f64>()
        / xs.len() as f64
}

/// `inf{t > 0 : mean ψ_p(|X|/t) ≤ 1}` by bisection on the empirical mean.
pub fn estimate_orlicz(samples: &[f64], p: u32) -> Result<OrliczEstimate> {
    if !(p == 1 || p == 2) {
        return Err(Error::invalid(format!("psi order must be 1 or 2, got {p}")));
    }
    if samples.len() < ORLICZ_MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "need at least {ORLICZ_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let max = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return Ok(OrliczEstimate {
            psi_order: p,
            norm_estimate: 0.0,
            samples: samples.len(),
        });
    }
    let t_max = max * 1e6;
    let mut hi = max;
    while psi_mean(samples, p, hi) > 1.0 {
        hi *= 2.0;
        if hi > t_max {
            return Err(Error::HeavyTail { t_max });
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 || psi_mean(samples, p, mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(OrliczEstimate {
        psi_order: p,
        norm_estimate: hi,
        samples: samples.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchBoundReport {
    pub patch_norm: f64,
    pub gaussian_norm: f64,
    pub orthogonal_norm: f64,
    /// `‖⟨F, x⟩‖_ψ2 / (v‖x‖)`.
    pub c0: f64,
    /// Same for the orthogonalized filters.
    pub c1: f64,
}

/// ψ2 norms of `⟨F, patch⟩` over `draws` Gaussian filters and over their
/// orthogonalized versions, relative to `v·‖patch‖`.
pub fn verify_subgaussian_patch_bound(patch: &Filter, v: f64, draws: usize, seed: u64) -> Result<PatchBoundReport> {
    let mut rng = child_rng(seed, &[3]);
    let norm = patch.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut g = Vec::with_capacity(draws);
    let mut o = Vec::with_capacity(draws);
    for _ in 0..draws {
        let f = Filter::gaussian(patch.r, patch.d, v, &mut rng);
        let q = f.orthogonalized(v)?;
        g.push(f.data.iter().zip(&patch.data).map(|(a, b)| a * b).sum());
        o.push(q.data.iter().zip(&patch.data).map(|(a, b)| a * b).sum());
    }
    let gn = estimate_orlicz(&g, 2)?.norm_estimate;
    let on = estimate_orlicz(&o, 2)?.norm_estimate;
    let denom = v * norm;
    let ratio = |x: f64| if denom > 0.0 { x / denom } else { 0.0 };
    Ok(PatchBoundReport {
        patch_norm: norm,
        gaussian_norm: gn,
        orthogonal_norm: on,
        c0: ratio(gn),
        c1: ratio(on),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn image(n: usize, d: usize, seed: u64) -> Tensor4 {
        Tensor4::randn(Dims::new(1, d, n, n), 1.0, &mut rng_from(seed))
    }

    #[test]
    fn center_delta_gives_channel_sum() {
        let h = image(5, 3, 1);
        let mut f = Filter {
            r: 3,
            d: 3,
            data: vec![0.0; 27],
        };
        for c in 0..3 {
            f.data[(3 + 1) * 3 + c] = 1.0;
        }
        let out = cyclic_conv(&h, &f).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let s: f64 = (0..3).map(|c| h.at(0, c, i, j)).sum();
                assert!((out[(i, j)] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_input() {
        let h = Tensor4::filled(Dims::new(1, 2, 4, 4), 0.5);
        let f = Filter::gaussian(3, 2, 1.0, &mut rng_from(0));
        let total: f64 = f.data.iter().sum();
        let out = cyclic_conv(&h, &f).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.5 * total).abs() < 1e-12));
    }

    #[test]
    fn kernel_must_be_smaller() {
        let h = image(3, 1, 0);
        let f = Filter::gaussian(3, 1, 1.0, &mut rng_from(0));
        assert!(cyclic_conv(&h, &f).is_err());
    }

    #[test]
    fn r_of_unit_patches() {
        let h = Tensor4::filled(Dims::new(1, 1, 4, 4), 1.0);
        let eps = 1e-5;
        assert!((compute_r(&h, &h, 1, 1.0 + eps, 1.0 + eps, eps).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(compute_r(&h, &h, 1, eps, 1.0, eps), Err(Error::VarianceBelowEps { .. })));
    }

    #[test]
    fn r_is_homogeneous() {
        let h = image(6, 2, 4);
        let a = compute_r(&h, &h, 3, 2.0, 2.0, 0.0).unwrap();
        let b = compute_r(&h.scale(2.0), &h, 3, 2.0, 2.0, 0.0).unwrap();
        assert!(b >= a);
        let c = compute_r(&h.scale(2.0), &h.scale(2.0), 3, 2.0, 2.0, 0.0).unwrap();
        assert!((c - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn orlicz_constant() {
        let xs = vec![1.5; ORLICZ_MIN_SAMPLES];
        let e = estimate_orlicz(&xs, 2).unwrap();
        assert!((e.norm_estimate - 1.5 / 2f64.ln().sqrt()).abs() < 1e-9);
        let e = estimate_orlicz(&xs, 1).unwrap();
        assert!((e.norm_estimate - 1.5 / 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn orlicz_rejects_small_samples() {
        assert!(estimate_orlicz(&[1.0; 10], 2).is_err());
    }

    #[test]
    fn orthogonalized_filter_rows() {
        let f = Filter::gaussian(3, 2, 1.0, &mut rng_from(1)).orthogonalized(1.0).unwrap();
        let m = Matrix::from_vec(3, 6, f.data).unwrap();
        assert!(m.gram_rows().max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn zero_patch_has_zero_norm() {
        let p = Filter {
            r: 2,
            d: 1,
            data: vec![0.0; 4],
        };
        let r = verify_subgaussian_patch_bound(&p, 1.0, ORLICZ_MIN_SAMPLES, 0).unwrap();
        assert_eq!(r.gaussian_norm, 0.0);
        assert_eq!(r.orthogonal_norm, 0.0);
    }
}
