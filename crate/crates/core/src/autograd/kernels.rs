//! Direct convolution and dense kernels with their adjoints.

use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn output_dims(&self, input: Dims) -> Dims {
        Dims::new(
            input.batch,
            self.out_channels,
            self.out_len(input.height),
            self.out_len(input.width),
        )
    }
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + tap - pad`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_range(tap: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let top = in_len + pad;
    let hi = if top > tap {
        ((top - tap - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(input: &Tensor4, weight: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Tensor4 {
    let id = input.dims();
    let od = g.output_dims(id);
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let icpg = g.in_channels / g.groups;
    let ocpg = g.out_channels / g.groups;
    let (ih, iw, oh, ow) = (id.height, id.width, od.height, od.width);
    let mut out = Tensor4::zeros(od);
    if pointwise(g) {
        pointwise_forward(input.data(), weight, bias, g, id, out.data_mut());
        return out;
    }
    let x = input.data();
    let y = out.data_mut();
    for b in 0..id.batch {
        for oc in 0..g.out_channels {
            let grp = oc / ocpg;
            let yo = (b * g.out_channels + oc) * oh * ow;
            let yplane = &mut y[yo..yo + oh * ow];
            if let Some(bias) = bias {
                yplane.fill(bias[oc]);
            }
            for icg in 0..icpg {
                let ic = grp * icpg + icg;
                let xo = (b * g.in_channels + ic) * ih * iw;
                let xplane = &x[xo..xo + ih * iw];
                for kh in 0..k {
                    let (h0, h1) = valid_range(kh, p, s, ih, oh);
                    for kw in 0..k {
                        let wv = weight[((oc * icpg + icg) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (w0, w1) = valid_range(kw, p, s, iw, ow);
                        for o_h in h0..h1 {
                            let i_h = o_h * s + kh - p;
                            let xrow = &xplane[i_h * iw..(i_h + 1) * iw];
                            let yrow = &mut yplane[o_h * ow..(o_h + 1) * ow];
                            for o_w in w0..w1 {
                                yrow[o_w] += wv * xrow[o_w * s + kw - p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dense 1×1 convolution with unit stride: a per-sample matrix product
/// over channels.
fn pointwise(g: ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.padding == 0 && g.groups == 1
}

fn pointwise_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: ConvGeom, id: Dims, y: &mut [f64]) {
    let plane = id.plane();
    let (ci, co) = (g.in_channels, g.out_channels);
    for b in 0..id.batch {
        let xs = &x[b * ci * plane..(b + 1) * ci * plane];
        let ys = &mut y[b * co * plane..(b + 1) * co * plane];
        for oc in 0..co {
            let yrow = &mut ys[oc * plane..(oc + 1) * plane];
            if let Some(bias) = bias {
                yrow.fill(bias[oc]);
            }
            let wrow = &weight[oc * ci..(oc + 1) * ci];
            for (ic, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let xrow = &xs[ic * plane..(ic + 1) * plane];
                for (yv, xv) in yrow.iter_mut().zip(xrow) {
                    *yv += wv * xv;
                }
            }
        }
    }
}

fn pointwise_backward_input(gy: &[f64], weight: &[f64], g: ConvGeom, id: Dims, gx: &mut [f64]) {
    let plane = id.plane();
    let (ci, co) = (g.in_channels, g.out_channels);
    for b in 0..id.batch {
        let gys = &gy[b * co * plane..(b + 1) * co * plane];
        let gxs = &mut gx[b * ci * plane..(b + 1) * ci * plane];
        for oc in 0..co {
            let grow = &gys[oc * plane..(oc + 1) * plane];
            if grow.iter().all(|&v| v == 0.0) {
                continue;
            }
            let wrow = &weight[oc * ci..(oc + 1) * ci];
            for (ic, &wv) in wrow.iter().enumerate() {
                let xrow = &mut gxs[ic * plane..(ic + 1) * plane];
                for (xv, gv) in xrow.iter_mut().zip(grow) {
                    *xv += wv * gv;
                }
            }
        }
    }
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input(grad_out: &Tensor4, weight: &[f64], g: ConvGeom, input_dims: Dims) -> Tensor4 {
    let od = grad_out.dims();
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let icpg = g.in_channels / g.groups;
    let ocpg = g.out_channels / g.groups;
    let (ih, iw, oh, ow) = (input_dims.height, input_dims.width, od.height, od.width);
    let mut gin = Tensor4::zeros(input_dims);
    let gy = grad_out.data();
    let gx = gin.data_mut();
    if pointwise(g) {
        pointwise_backward_input(gy, weight, g, input_dims, gx);
        return gin;
    }
    for b in 0..od.batch {
        for oc in 0..g.out_channels {
            let grp = oc / ocpg;
            let yo = (b * g.out_channels + oc) * oh * ow;
            let gplane = &gy[yo..yo + oh * ow];
            if gplane.iter().all(|&v| v == 0.0) {
                continue;
            }
            for icg in 0..icpg {
                let ic = grp * icpg + icg;
                let xo = (b * g.in_channels + ic) * ih * iw;
                let xplane = &mut gx[xo..xo + ih * iw];
                for kh in 0..k {
                    let (h0, h1) = valid_range(kh, p, s, ih, oh);
                    for kw in 0..k {
                        let wv = weight[((oc * icpg + icg) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (w0, w1) = valid_range(kw, p, s, iw, ow);
                        for o_h in h0..h1 {
                            let i_h = o_h * s + kh - p;
                            let xrow = &mut xplane[i_h * iw..(i_h + 1) * iw];
                            let grow = &gplane[o_h * ow..(o_h + 1) * ow];
                            for o_w in w0..w1 {
                                xrow[o_w * s + kw - p] += wv * grow[o_w];
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient with respect to the weight, same layout as the weight.
pub fn conv2d_backward_weight(grad_out: &Tensor4, input: &Tensor4, g: ConvGeom) -> Vec<f64> {
    let id = input.dims();
    let od = grad_out.dims();
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let icpg = g.in_channels / g.groups;
    let ocpg = g.out_channels / g.groups;
    let (ih, iw, oh, ow) = (id.height, id.width, od.height, od.width);
    let mut gw = vec![0.0; g.out_channels * icpg * k * k];
    let x = input.data();
    let gy = grad_out.data();
    for b in 0..id.batch {
        for oc in 0..g.out_channels {
            let grp = oc / ocpg;
            let yo = (b * g.out_channels + oc) * oh * ow;
            let gplane = &gy[yo..yo + oh * ow];
            for icg in 0..icpg {
                let ic = grp * icpg + icg;
                let xo = (b * g.in_channels + ic) * ih * iw;
                let xplane = &x[xo..xo + ih * iw];
                for kh in 0..k {
                    let (h0, h1) = valid_range(kh, p, s, ih, oh);
                    for kw in 0..k {
                        let (w0, w1) = valid_range(kw, p, s, iw, ow);
                        let mut acc = 0.0;
                        for o_h in h0..h1 {
                            let i_h = o_h * s + kh - p;
                            let xrow = &xplane[i_h * iw..(i_h + 1) * iw];
                            let grow = &gplane[o_h * ow..(o_h + 1) * ow];
                            for o_w in w0..w1 {
                                acc += grow[o_w] * xrow[o_w * s + kw - p];
                            }
                        }
                        gw[((oc * icpg + icg) * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Sum of the output gradient over batch and spatial axes, per channel.
pub fn channel_sums(t: &Tensor4) -> Vec<f64> {
    let d = t.dims();
    let plane = d.plane();
    let mut out = vec![0.0; d.channels];
    for b in 0..d.batch {
        for (c, o) in out.iter_mut().enumerate() {
            let off = (b * d.channels + c) * plane;
            *o += t.data()[off..off + plane].iter().sum::<f64>();
        }
    }
    out
}

/// `y[b, o] = Σ_f W[o, f] x[b, f] + bias[o]` over flattened samples.
pub fn dense_forward(x: &Tensor4, weight: &[f64], bias: Option<&[f64]>, out_features: usize) -> Tensor4 {
    let d = x.dims();
    let nf = d.sample_len();
    let mut out = Tensor4::zeros(Dims::new(d.batch, out_features, 1, 1));
    for b in 0..d.batch {
        let xs = &x.data()[b * nf..(b + 1) * nf];
        for o in 0..out_features {
            let wrow = &weight[o * nf..(o + 1) * nf];
            let mut acc = bias.map_or(0.0, |bb| bb[o]);
            for (w, v) in wrow.iter().zip(xs) {
                acc += w * v;
            }
            out.data_mut()[b * out_features + o] = acc;
        }
    }
    out
}

pub fn dense_backward_input(grad_out: &Tensor4, weight: &[f64], input_dims: Dims) -> Tensor4 {
    let nf = input_dims.sample_len();
    let no = grad_out.dims().sample_len();
    let mut gin = Tensor4::zeros(input_dims);
    for b in 0..input_dims.batch {
        let go = &grad_out.data()[b * no..(b + 1) * no];
        let gx = &mut gin.data_mut()[b * nf..(b + 1) * nf];
        for (o, &g) in go.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (xv, w) in gx.iter_mut().zip(&weight[o * nf..(o + 1) * nf]) {
                *xv += g * w;
            }
        }
    }
    gin
}

pub fn dense_backward_weight(grad_out: &Tensor4, input: &Tensor4) -> Vec<f64> {
    let nf = input.dims().sample_len();
    let no = grad_out.dims().sample_len();
    let mut gw = vec![0.0; no * nf];
    for b in 0..input.dims().batch {
        let go = &grad_out.data()[b * no..(b + 1) * no];
        let xs = &input.data()[b * nf..(b + 1) * nf];
        for (o, &g) in go.iter().enumerate() {
            for (w, x) in gw[o * nf..(o + 1) * nf].iter_mut().zip(xs) {
                *w += g * x;
            }
        }
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    /// Reference convolution by explicit bounds checks.
    fn naive(input: &Tensor4, w: &[f64], g: ConvGeom) -> Tensor4 {
        let id = input.dims();
        let od = g.output_dims(id);
        let icpg = g.in_channels / g.groups;
        let ocpg = g.out_channels / g.groups;
        let mut out = Tensor4::zeros(od);
        for b in 0..id.batch {
            for oc in 0..g.out_channels {
                for oh in 0..od.height {
                    for ow in 0..od.width {
                        let mut acc = 0.0;
                        for icg in 0..icpg {
                            let ic = (oc / ocpg) * icpg + icg;
                            for kh in 0..g.kernel {
                                for kw in 0..g.kernel {
                                    let h = (oh * g.stride + kh) as isize - g.padding as isize;
                                    let wi = (ow * g.stride + kw) as isize - g.padding as isize;
                                    if h < 0 || wi < 0 || h >= id.height as isize || wi >= id.width as isize {
                                        continue;
                                    }
                                    acc += w[((oc * icpg + icg) * g.kernel + kh) * g.kernel + kw]
                                        * input.at(b, ic, h as usize, wi as usize);
                                }
                            }
                        }
                        out.set(b, oc, oh, ow, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_across_geometries() {
        let mut rng = rng_from(3);
        for &(ic, oc, k, s, p, groups, h) in &[
            (2, 3, 3, 1, 1, 1, 5),
            (4, 4, 3, 2, 1, 4, 6),
            (3, 6, 5, 2, 2, 3, 7),
            (2, 2, 1, 1, 0, 1, 4),
            (4, 2, 4, 2, 1, 2, 8),
        ] {
            let g = ConvGeom {
                in_channels: ic,
                out_channels: oc,
                kernel: k,
                stride: s,
                padding: p,
                groups,
            };
            let x = Tensor4::randn(Dims::new(2, ic, h, h), 1.0, &mut rng);
            let w: Vec<f64> = Tensor4::randn(Dims::new(oc, ic / groups, k, k), 1.0, &mut rng).into_vec();
            let fast = conv2d_forward(&x, &w, None, g);
            let slow = naive(&x, &w, g);
            let err = fast
                .data()
                .iter()
                .zip(slow.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "geometry {g:?}: {err}");
        }
    }

    #[test]
    fn adjoint_identity() {
        // <conv(x), y> == <x, conv_adjoint(y)>
        let mut rng = rng_from(4);
        let g = ConvGeom {
            in_channels: 4,
            out_channels: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
            groups: 2,
        };
        let x = Tensor4::randn(Dims::new(2, 4, 7, 7), 1.0, &mut rng);
        let w = Tensor4::randn(Dims::new(4, 2, 3, 3), 1.0, &mut rng).into_vec();
        let y = conv2d_forward(&x, &w, None, g);
        let r = Tensor4::randn(y.dims(), 1.0, &mut rng);
        let lhs = y.dot(&r).unwrap();
        let rhs = x.dot(&conv2d_backward_input(&r, &w, g, x.dims())).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        // weight gradient: <conv_w(x), r> is linear in w
        let gw = conv2d_backward_weight(&r, &x, g);
        let lin: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lin - lhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
