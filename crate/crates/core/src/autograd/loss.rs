use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Mean softmax cross-entropy over the batch. `logits` is `(b, classes, 1, 1)`
/// (any trailing layout with `sample_len == classes` works). Returns the loss
/// and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let d = logits.dims();
    let k = d.sample_len();
    if labels.len() != d.batch {
        return Err(Error::dim(format!(
            "{} labels for a batch of {}",
            labels.len(),
            d.batch
        )));
    }
    let mut grad = Tensor4::zeros(d);
    let mut loss = 0.0;
    let inv_b = 1.0 / d.batch as f64;
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        let z = &logits.data()[b * k..(b + 1) * k];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        let g = &mut grad.data_mut()[b * k..(b + 1) * k];
        for (gi, zi) in g.iter_mut().zip(z) {
            *gi = (zi - lse).exp() * inv_b;
        }
        g[y] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Index of the largest logit per sample (first on ties).
pub fn argmax_rows(logits: &Tensor4) -> Vec<usize> {
    let k = logits.dims().sample_len();
    logits
        .data()
        .chunks(k)
        .map(|z| {
            z.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn uniform_logits_give_log_k() {
        let z = Tensor4::zeros(Dims::new(2, 4, 1, 1));
        let (l, g) = softmax_cross_entropy(&z, &[0, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g.sum()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let z = Tensor4::from_vec(Dims::new(2, 3, 1, 1), vec![0.2, -1.0, 0.7, 1.5, 0.1, -0.3]).unwrap();
        let labels = [2, 0];
        let (_, g) = softmax_cross_entropy(&z, &labels).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let fd = (softmax_cross_entropy(&zp, &labels).unwrap().0
                - softmax_cross_entropy(&zm, &labels).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_prefers_first_tie() {
        let z = Tensor4::from_vec(Dims::new(2, 3, 1, 1), vec![1., 1., 0., 0., 2., 2.]).unwrap();
        assert_eq!(argmax_rows(&z), vec![0, 1]);
    }
}
