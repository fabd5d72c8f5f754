//! Gauss–Hermite quadrature for expectations under a standard normal.

use std::sync::OnceLock;

use rand_distr::{Distribution, StandardNormal};

/// Nodes and weights rescaled so that `Σ wᵢ f(xᵢ) ≈ E[f(z)]`, `z ~ N(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

pub const DEFAULT_NODES: usize = 64;

impl GaussHermite {
    /// Roots of the physicists' Hermite polynomial `H_n` by Newton iteration
    /// on the orthonormal recurrence, then mapped to the standard normal.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let nf = n as f64;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut z = 0.0;
        for i in 0..n.div_ceil(2) {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let jf = j as f64;
                    let p3 = p2;
                    p2 = p1;
                    p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        let s2 = std::f64::consts::SQRT_2;
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        GaussHermite {
            nodes: x.iter().map(|v| v * s2).collect(),
            weights: w.iter().map(|v| v * inv_sqrt_pi).collect(),
        }
    }

    /// Shared 64-node rule.
    pub fn standard() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(DEFAULT_NODES))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(z)]` for `z ~ N(0, 1)`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Plain Monte Carlo estimate of `E[f(z)]`, `z ~ N(0, 1)`.
pub fn monte_carlo<R: rand::Rng + ?Sized>(f: impl Fn(f64) -> f64, samples: usize, rng: &mut R) -> McEstimate {
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..samples {
        let z: f64 = StandardNormal.sample(rng);
        let v = f(z);
        sum += v;
        sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    McEstimate {
        mean,
        std_err: (var / n).sqrt(),
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one_and_moments_exact() {
        let gh = GaussHermite::standard();
        assert_eq!(gh.len(), 64);
        assert!((gh.expect(|_| 1.0) - 1.0).abs() < 1e-13);
        assert!(gh.expect(|x| x).abs() < 1e-13);
        assert!((gh.expect(|x| x * x) - 1.0).abs() < 1e-12);
        assert!((gh.expect(|x| x.powi(4)) - 3.0).abs() < 1e-11);
        // E[z^10] = 9!! = 945
        assert!((gh.expect(|x| x.powi(10)) - 945.0).abs() < 1e-8);
    }

    #[test]
    fn small_rules_are_exact_to_degree_2n_minus_1() {
        let gh = GaussHermite::new(3);
        assert!((gh.expect(|x| x.powi(4)) - 3.0).abs() < 1e-12);
        // z^6 is degree 6 > 5: a 3-node rule gives 9 instead of 15
        assert!((gh.expect(|x| x.powi(6)) - 9.0).abs() < 1e-10);
    }

    #[test]
    fn lognormal_mean() {
        // E[exp(a z)] = exp(a^2 / 2)
        let gh = GaussHermite::standard();
        let a: f64 = 0.7;
        assert!((gh.expect(|x| (a * x).exp()) - (a * a / 2.0).exp()).abs() < 1e-12);
    }
}
