//! Independent references: nalgebra factorizations, naive loops and
//! closed-form Gaussian moments.

use isonas_core::concentration::{
    compute_r, cyclic_conv, estimate_orlicz, verify_subgaussian_patch_bound, Filter,
};
use isonas_core::init::orthogonalize_triangular;
use isonas_core::linalg::symmetric_eigenvalues;
use isonas_core::meanfield::spectral_stats;
use isonas_core::rng::rng_from;
use isonas_core::{Dims, Matrix, Tensor4};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[test]
fn triangular_orthogonalization_matches_householder_qr() {
    let mut rng = rng_from(11);
    for (m, n) in [(5, 3), (8, 8), (12, 4), (3, 7), (6, 10)] {
        let f = Matrix::gaussian(m, n, 1.0, &mut rng);
        let ours = orthogonalize_triangular(&f).unwrap().q;
        // wide inputs orthonormalize rows, i.e. the QR of the transpose
        let (a, transposed) = if m >= n { (to_na(&f), false) } else { (to_na(&f).transpose(), true) };
        let qr = a.qr();
        let (mut q, r) = (qr.q(), qr.r());
        for j in 0..q.ncols() {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let q = if transposed { q.transpose() } else { q };
        let diff = (to_na(&ours) - q).abs().max();
        assert!(diff < 1e-10, "{m}x{n}: {diff}");
    }
}

#[test]
fn jacobi_eigenvalues_match_nalgebra() {
    let mut rng = rng_from(3);
    for n in [1, 2, 5, 17] {
        let a = Matrix::gaussian(n, n + 3, 1.0, &mut rng).gram_rows();
        let ours = symmetric_eigenvalues(&a);
        let mut theirs: Vec<f64> = nalgebra::SymmetricEigen::new(to_na(&a)).eigenvalues.iter().copied().collect();
        theirs.sort_by(f64::total_cmp);
        for (x, y) in ours.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()), "{n}: {x} vs {y}");
        }
    }
}

#[test]
fn spectral_stats_match_eigenvalue_moments() {
    let mut rng = rng_from(5);
    let j = Matrix::gaussian(20, 30, 1.0 / 30.0, &mut rng);
    let s = spectral_stats(&j).unwrap();
    let jjt = to_na(&j) * to_na(&j).transpose();
    let eig = nalgebra::SymmetricEigen::new(jjt).eigenvalues;
    let m1 = eig.iter().sum::<f64>() / 20.0;
    let m2 = eig.iter().map(|e| e * e).sum::<f64>() / 20.0;
    assert!((s.phi - m1).abs() < 1e-12);
    assert!((s.phi2 - m2).abs() < 1e-12);
    assert!((s.trace_var - (m2 - m1 * m1)).abs() < 1e-12);
}

#[test]
fn cyclic_conv_matches_naive_loop() {
    let (n, r, d) = (4usize, 3usize, 2usize);
    let mut rng = rng_from(0);
    let h = Tensor4::randn(Dims::new(1, d, n, n), 1.0, &mut rng);
    let f = Filter::gaussian(r, d, 1.0, &mut rng);
    let out = cyclic_conv(&h, &f).unwrap();
    let half = (r / 2) as i64;
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            let mut want = 0.0;
            for a in 0..r as i64 {
                for b in 0..r as i64 {
                    for c in 0..d {
                        let y = (i + a - half).rem_euclid(n as i64) as usize;
                        let x = (j + b - half).rem_euclid(n as i64) as usize;
                        want += f.at(a as usize, b as usize, c) * h.at(0, c, y, x);
                    }
                }
            }
            assert_eq!(out[(i as usize, j as usize)], want);
        }
    }
}

#[test]
fn r_matches_patch_enumeration() {
    let (n, r, d) = (4usize, 2usize, 3usize);
    let mut rng = rng_from(8);
    let h = Tensor4::randn(Dims::new(1, d, n, n), 1.0, &mut rng);
    let h2 = Tensor4::randn(Dims::new(1, d, n, n), 2.0, &mut rng);
    let (vh, vh2, eps) = (1.5, 0.7, 1e-3);
    let max_norm = |t: &Tensor4| {
        let mut best = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let mut patch = Vec::new();
                for a in 0..r {
                    for b in 0..r {
                        for c in 0..d {
                            // r = 2 has its window starting one row/col back
                            patch.push(t.at(0, c, (i + n + a - 1) % n, (j + n + b - 1) % n));
                        }
                    }
                }
                best = best.max(patch.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        best
    };
    let want = (max_norm(&h) / (vh - eps as f64).sqrt()).max(max_norm(&h2) / (vh2 - eps as f64).sqrt());
    let got = compute_r(&h, &h2, r, vh, vh2, eps).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn gaussian_psi2_norm() {
    // E exp(X²/t²) = (1 − 2/t²)^{-1/2} = 2  ⇒  t = √(8/3)
    let want = (8.0f64 / 3.0).sqrt();
    let e = estimate_orlicz(&normals(100_000, 1), 2).unwrap();
    assert!((e.norm_estimate / want - 1.0).abs() < 0.05, "{}", e.norm_estimate);
}

#[test]
fn orlicz_estimates_agree_across_sample_sizes() {
    let xs = normals(100_000, 2);
    let small = estimate_orlicz(&xs[..10_000], 2).unwrap().norm_estimate;
    let large = estimate_orlicz(&xs, 2).unwrap().norm_estimate;
    assert!((small / large - 1.0).abs() < 0.02, "{small} vs {large}");
}

#[test]
fn product_of_subgaussians_is_subexponential() {
    let x = normals(100_000, 3);
    let y = normals(100_000, 4);
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let nx = estimate_orlicz(&x, 2).unwrap().norm_estimate;
    let ny = estimate_orlicz(&y, 2).unwrap().norm_estimate;
    let nxy = estimate_orlicz(&xy, 1).unwrap().norm_estimate;
    assert!(nxy <= nx * ny * 1.1, "{nxy} > {nx}·{ny}");
}

#[test]
fn gaussian_filter_on_unit_patch() {
    let mut patch = Filter {
        r: 3,
        d: 2,
        data: vec![0.0; 18],
    };
    patch.data[4] = 1.0;
    let rep = verify_subgaussian_patch_bound(&patch, 1.0, 100_000, 5).unwrap();
    let want = (8.0f64 / 3.0).sqrt();
    assert!((rep.c0 / want - 1.0).abs() < 0.05, "{}", rep.c0);
}

#[test]
fn orthogonalized_filters_stay_below_gaussian_constant() {
    let mut rng = rng_from(6);
    for p in 0..20 {
        let patch = Filter::gaussian(3, 2, 1.0, &mut rng);
        let rep = verify_subgaussian_patch_bound(&patch, 0.7, 20_000, p).unwrap();
        assert!(rep.c1 <= rep.c0, "patch {p}: {} > {}", rep.c1, rep.c0);
    }
}
