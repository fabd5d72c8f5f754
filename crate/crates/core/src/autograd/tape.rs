//! Recording tape and reverse sweep.

use super::kernels::{self, ConvGeom};
use super::layers::{Activation, BatchNorm, Conv2d, Dense, Layer};
use super::params::{BnId, Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// BN uses batch statistics and records running-stat updates.
    Train,
    /// BN uses running statistics.
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Input { wants_grad: bool },
    Conv { x: usize, layer: Conv2d },
    Dense { x: usize, layer: Dense },
    Act { x: usize, act: Activation },
    Bn { x: usize, id: BnId, xhat: Tensor4, inv_std: Vec<f64>, batch_stats: bool },
    Add { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Pool { x: usize },
    Concat { parts: Vec<usize> },
    Slice { x: usize, start: usize },
    Shuffle { x: usize, groups: usize },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor4,
    requires_grad: bool,
}

#[derive(Clone, Debug)]
struct StatUpdate {
    id: BnId,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

#[derive(Clone, Debug)]
pub struct Tape {
    mode: Mode,
    nodes: Vec<Node>,
    stats: Vec<StatUpdate>,
}

fn geom(c: &Conv2d) -> ConvGeom {
    ConvGeom {
        in_channels: c.in_channels,
        out_channels: c.out_channels,
        kernel: c.kernel,
        stride: c.stride,
        padding: c.padding,
        groups: c.groups,
    }
}

/// `out channel i*g + j  <-  in channel j*n + i` for `C = g*n`.
fn shuffle_source(c: usize, groups: usize, channels: usize) -> usize {
    let n = channels / groups;
    let (i, j) = (c / groups, c % groups);
    j * n + i
}

fn copy_channels(src: &Tensor4, dst: &mut Tensor4, map: impl Fn(usize) -> usize) {
    let sd = src.dims();
    let dd = dst.dims();
    let plane = sd.plane();
    for b in 0..dd.batch {
        for c in 0..dd.channels {
            let s = map(c);
            let so = (b * sd.channels + s) * plane;
            let o = (b * dd.channels + c) * plane;
            dst.data_mut()[o..o + plane].copy_from_slice(&src.data()[so..so + plane]);
        }
    }
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape {
            mode,
            nodes: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor4, requires_grad: bool, label: impl FnOnce() -> String) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericOverflow { layer: label() });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn input(&mut self, t: Tensor4) -> Var {
        self.push(Op::Input { wants_grad: false }, t, false, String::new)
            .unwrap_or_else(|_| panic!("non-finite tape input"))
    }

    /// Records an input whose gradient [`Tape::backward`] will report.
    pub fn input_with_grad(&mut self, t: Tensor4) -> Var {
        self.push(Op::Input { wants_grad: true }, t, true, String::new)
            .unwrap_or_else(|_| panic!("non-finite tape input"))
    }

    pub fn conv2d(&mut self, store: &ParamStore, layer: &Conv2d, x: Var) -> Result<Var> {
        let xin = &self.nodes[x.0].value;
        layer.output_dims(xin.dims())?;
        let w = store.param(layer.weight);
        if w.data.len() as u64 != layer.weight_count() {
            return Err(Error::dim(format!(
                "conv `{}` weight has {} values, geometry needs {}",
                w.name,
                w.data.len(),
                layer.weight_count()
            )));
        }
        let bias = layer.bias.map(|b| store.param(b).data.as_slice());
        let out = kernels::conv2d_forward(xin, &w.data, bias, geom(layer));
        let rg = self.rg(x.0)
            || store.is_trainable(layer.weight)
            || layer.bias.is_some_and(|b| store.is_trainable(b));
        self.push(
            Op::Conv {
                x: x.0,
                layer: layer.clone(),
            },
            out,
            rg,
            || w.name.clone(),
        )
    }

    pub fn dense(&mut self, store: &ParamStore, layer: &Dense, x: Var) -> Result<Var> {
        let xin = &self.nodes[x.0].value;
        if xin.dims().sample_len() != layer.in_features {
            return Err(Error::dim(format!(
                "dense expects {} features, got {}",
                layer.in_features,
                xin.dims().sample_len()
            )));
        }
        let w = store.param(layer.weight);
        let bias = layer.bias.map(|b| store.param(b).data.as_slice());
        let out = kernels::dense_forward(xin, &w.data, bias, layer.out_features);
        let rg = self.rg(x.0)
            || store.is_trainable(layer.weight)
            || layer.bias.is_some_and(|b| store.is_trainable(b));
        self.push(
            Op::Dense {
                x: x.0,
                layer: layer.clone(),
            },
            out,
            rg,
            || w.name.clone(),
        )
    }

    pub fn activation(&mut self, act: Activation, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| act.apply(v));
        let rg = self.rg(x.0);
        self.push(Op::Act { x: x.0, act }, out, rg, || act.name().to_string())
    }

    pub fn batch_norm(&mut self, store: &ParamStore, bn: &BatchNorm, x: Var) -> Result<Var> {
        let xin = &self.nodes[x.0].value;
        let d = xin.dims();
        if d.channels != bn.channels {
            return Err(Error::dim(format!(
                "batch norm over {} channels got {}",
                bn.channels, d.channels
            )));
        }
        let st = store.bn(bn.id);
        let p = store.bn_params(bn.id);
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            if d.batch < 2 {
                return Err(Error::BatchTooSmall(d.batch));
            }
            xin.channel_moments()
        } else {
            (p.running_mean.to_vec(), p.running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
        let plane = d.plane();
        let mut xhat = Tensor4::zeros(d);
        let mut out = Tensor4::zeros(d);
        for b in 0..d.batch {
            for c in 0..d.channels {
                let off = (b * d.channels + c) * plane;
                for i in off..off + plane {
                    let h = (xin.data()[i] - mean[c]) * inv_std[c];
                    xhat.data_mut()[i] = h;
                    out.data_mut()[i] = p.gamma[c] * h + p.beta[c];
                }
            }
        }
        if batch_stats {
            self.stats.push(StatUpdate {
                id: bn.id,
                mean,
                var,
                count: d.batch * plane,
            });
        }
        let rg = self.rg(x.0) || p.trainable;
        let name = st.name.clone();
        self.push(
            Op::Bn {
                x: x.0,
                id: bn.id,
                xhat,
                inv_std,
                batch_stats,
            },
            out,
            rg,
            || name,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Op::Add { a: a.0, b: b.0 }, out, rg, || "add".into())
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.nodes[x.0].value.scale(factor);
        let rg = self.rg(x.0);
        self.push(Op::Scale { x: x.0, factor }, out, rg, || "scale".into())
    }

    /// Mean over the spatial axes, giving `(b, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xin = &self.nodes[x.0].value;
        let d = xin.dims();
        let plane = d.plane();
        let data = xin
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor4::from_vec(Dims::new(d.batch, d.channels, 1, 1), data)?;
        let rg = self.rg(x.0);
        self.push(Op::Pool { x: x.0 }, out, rg, || "avg_pool".into())
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let d0 = self.nodes[first.0].value.dims();
        let mut channels = 0;
        for p in parts {
            let d = self.nodes[p.0].value.dims();
            if (d.batch, d.height, d.width) != (d0.batch, d0.height, d0.width) {
                return Err(Error::dim(format!("concat {d} with {d0}")));
            }
            channels += d.channels;
        }
        let od = Dims::new(d0.batch, channels, d0.height, d0.width);
        let mut out = Tensor4::zeros(od);
        let plane = od.plane();
        let mut c0 = 0;
        for p in parts {
            let src = &self.nodes[p.0].value;
            let pc = src.dims().channels;
            for b in 0..od.batch {
                let s = b * pc * plane;
                let o = (b * channels + c0) * plane;
                out.data_mut()[o..o + pc * plane].copy_from_slice(&src.data()[s..s + pc * plane]);
            }
            c0 += pc;
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            out,
            rg,
            || "concat".into(),
        )
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let d = src.dims();
        if start + len > d.channels || len == 0 {
            return Err(Error::dim(format!(
                "channel slice {start}..{} of {d}",
                start + len
            )));
        }
        let mut out = Tensor4::zeros(Dims::new(d.batch, len, d.height, d.width));
        copy_channels(src, &mut out, |c| c + start);
        let rg = self.rg(x.0);
        self.push(Op::Slice { x: x.0, start }, out, rg, || "slice".into())
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let d = src.dims();
        if groups == 0 || d.channels % groups != 0 {
            return Err(Error::dim(format!(
                "{} channels cannot shuffle in {groups} groups",
                d.channels
            )));
        }
        let mut out = Tensor4::zeros(d);
        copy_channels(src, &mut out, |c| shuffle_source(c, groups, d.channels));
        let rg = self.rg(x.0);
        self.push(Op::Shuffle { x: x.0, groups }, out, rg, || "shuffle".into())
    }

    /// Applies a layer; conv and dense are followed by `activation`.
    pub fn layer(&mut self, store: &ParamStore, layer: &Layer, activation: Activation, x: Var) -> Result<Var> {
        match layer {
            Layer::Conv(c) => {
                let y = self.conv2d(store, c, x)?;
                self.activation(activation, y)
            }
            Layer::Dense(d) => {
                let y = self.dense(store, d, x)?;
                self.activation(activation, y)
            }
            Layer::Norm(bn) => self.batch_norm(store, bn, x),
        }
    }

    /// Writes the momentum-averaged batch statistics recorded in training
    /// mode into the store's running statistics. Variance uses the
    /// unbiased estimate.
    pub fn commit_running_stats(&self, store: &mut ParamStore) {
        for u in &self.stats {
            let st = store.bn_mut(u.id);
            let m = st.momentum;
            let corr = if u.count > 1 {
                u.count as f64 / (u.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..u.mean.len() {
                st.running_mean[c] = (1.0 - m) * st.running_mean[c] + m * u.mean[c];
                st.running_var[c] = (1.0 - m) * st.running_var[c] + m * u.var[c] * corr;
            }
        }
    }

    /// Overwrites running statistics with the recorded batch statistics
    /// (biased variance, as used by the training-mode forward), so an
    /// eval-mode pass on the same batch reproduces the training output.
    pub fn calibrate_running_stats(&self, store: &mut ParamStore) {
        for u in &self.stats {
            let st = store.bn_mut(u.id);
            st.running_mean.clone_from(&u.mean);
            st.running_var.clone_from(&u.var);
        }
    }

    /// Reverse sweep seeded with `seed = ∂loss/∂output`. Returns gradients
    /// for every trainable parameter reached and for inputs recorded with
    /// [`Tape::input_with_grad`].
    pub fn backward(&self, store: &ParamStore, output: Var, seed: &Tensor4) -> Result<Gradients> {
        self.sweep(store, output, seed, true)
    }

    /// Like [`Tape::backward`] but skips parameter gradients.
    pub fn backward_inputs(&self, store: &ParamStore, output: Var, seed: &Tensor4) -> Result<Gradients> {
        self.sweep(store, output, seed, false)
    }

    fn sweep(&self, store: &ParamStore, output: Var, seed: &Tensor4, want_params: bool) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::invalid("output var does not belong to this tape"));
        }
        if seed.dims() != self.nodes[output.0].value.dims() {
            return Err(Error::dim(format!(
                "seed {} vs output {}",
                seed.dims(),
                self.nodes[output.0].value.dims()
            )));
        }
        let mut grads = Gradients::default();
        let mut adj: Vec<Option<Tensor4>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.clone());

        let acc = |adj: &mut Vec<Option<Tensor4>>, i: usize, g: Tensor4| -> Result<()> {
            if !self.nodes[i].requires_grad {
                return Ok(());
            }
            match &mut adj[i] {
                Some(t) => t.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        let add_param = |grads: &mut Gradients, id: ParamId, g: Vec<f64>| {
            if !store.is_trainable(id) {
                return;
            }
            match grads.params.get_mut(&id) {
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    grads.params.insert(id, g);
                }
            }
        };

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input { wants_grad } => {
                    if *wants_grad {
                        grads.inputs.insert(i, g);
                    }
                }
                Op::Conv { x, layer } => {
                    let xin = &self.nodes[*x].value;
                    let gm = geom(layer);
                    if self.rg(*x) {
                        let w = &store.param(layer.weight).data;
                        acc(&mut adj, *x, kernels::conv2d_backward_input(&g, w, gm, xin.dims()))?;
                    }
                    if want_params {
                        if store.is_trainable(layer.weight) {
                            add_param(&mut grads, layer.weight, kernels::conv2d_backward_weight(&g, xin, gm));
                        }
                        if let Some(b) = layer.bias.filter(|b| store.is_trainable(*b)) {
                            add_param(&mut grads, b, kernels::channel_sums(&g));
                        }
                    }
                }
                Op::Dense { x, layer } => {
                    let xin = &self.nodes[*x].value;
                    if self.rg(*x) {
                        let w = &store.param(layer.weight).data;
                        acc(&mut adj, *x, kernels::dense_backward_input(&g, w, xin.dims()))?;
                    }
                    if want_params {
                        if store.is_trainable(layer.weight) {
                            add_param(&mut grads, layer.weight, kernels::dense_backward_weight(&g, xin));
                        }
                        if let Some(b) = layer.bias.filter(|b| store.is_trainable(*b)) {
                            add_param(&mut grads, b, kernels::channel_sums(&g));
                        }
                    }
                }
                Op::Act { x, act } => {
                    let xin = &self.nodes[*x].value;
                    let mut gx = g;
                    match act {
                        Activation::Identity => {}
                        Activation::Tanh => {
                            // tanh' = 1 - y^2 with y the cached output
                            for (gv, y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                                *gv *= 1.0 - y * y;
                            }
                        }
                        _ => {
                            for (gv, xv) in gx.data_mut().iter_mut().zip(xin.data()) {
                                *gv *= act.derivative(*xv);
                            }
                        }
                    }
                    acc(&mut adj, *x, gx)?;
                }
                Op::Bn {
                    x,
                    id,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let p = store.bn_params(*id);
                    let st = store.bn(*id);
                    let d = g.dims();
                    let plane = d.plane();
                    let n = (d.batch * plane) as f64;
                    let mut sum_g = vec![0.0; d.channels];
                    let mut sum_gx = vec![0.0; d.channels];
                    for b in 0..d.batch {
                        for c in 0..d.channels {
                            let off = (b * d.channels + c) * plane;
                            for j in off..off + plane {
                                sum_g[c] += g.data()[j];
                                sum_gx[c] += g.data()[j] * xhat.data()[j];
                            }
                        }
                    }
                    if self.rg(*x) {
                        let mut gx = Tensor4::zeros(d);
                        for b in 0..d.batch {
                            for c in 0..d.channels {
                                let off = (b * d.channels + c) * plane;
                                let s = p.gamma[c] * inv_std[c];
                                for j in off..off + plane {
                                    gx.data_mut()[j] = if *batch_stats {
                                        s * (g.data()[j]
                                            - sum_g[c] / n
                                            - xhat.data()[j] * sum_gx[c] / n)
                                    } else {
                                        s * g.data()[j]
                                    };
                                }
                            }
                        }
                        acc(&mut adj, *x, gx)?;
                    }
                    if want_params {
                        add_param(&mut grads, st.gamma, sum_gx);
                        add_param(&mut grads, st.beta, sum_g);
                    }
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        acc(&mut adj, *a, g.clone())?;
                    }
                    acc(&mut adj, *b, g)?;
                }
                Op::Scale { x, factor } => acc(&mut adj, *x, g.scale(*factor))?,
                Op::Pool { x } => {
                    let xd = self.nodes[*x].value.dims();
                    let plane = xd.plane();
                    let mut gx = Tensor4::zeros(xd);
                    for (k, gv) in g.data().iter().enumerate() {
                        gx.data_mut()[k * plane..(k + 1) * plane].fill(gv / plane as f64);
                    }
                    acc(&mut adj, *x, gx)?;
                }
                Op::Concat { parts } => {
                    let mut c0 = 0;
                    for &p in parts {
                        let pd = self.nodes[p].value.dims();
                        if self.rg(p) {
                            let mut gp = Tensor4::zeros(pd);
                            copy_channels(&g, &mut gp, |c| c + c0);
                            acc(&mut adj, p, gp)?;
                        }
                        c0 += pd.channels;
                    }
                }
                Op::Slice { x, start } => {
                    let xd = self.nodes[*x].value.dims();
                    let len = g.dims().channels;
                    let plane = xd.plane();
                    let mut gx = Tensor4::zeros(xd);
                    for b in 0..xd.batch {
                        let s = b * len * plane;
                        let o = (b * xd.channels + start) * plane;
                        gx.data_mut()[o..o + len * plane].copy_from_slice(&g.data()[s..s + len * plane]);
                    }
                    acc(&mut adj, *x, gx)?;
                }
                Op::Shuffle { x, groups } => {
                    let d = g.dims();
                    let mut gx = Tensor4::zeros(d);
                    // invert: in channel shuffle_source(c) receives out channel c
                    let plane = d.plane();
                    for b in 0..d.batch {
                        for c in 0..d.channels {
                            let s = shuffle_source(c, *groups, d.channels);
                            let o = (b * d.channels + c) * plane;
                            let t = (b * d.channels + s) * plane;
                            gx.data_mut()[t..t + plane].copy_from_slice(&g.data()[o..o + plane]);
                        }
                    }
                    acc(&mut adj, *x, gx)?;
                }
            }
        }
        Ok(grads)
    }
}

/// Runs `layers` in sequence; conv and dense layers are followed by
/// `activation`, BN layers are not.
pub fn forward_block(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    layers: &[Layer],
    activation: Activation,
) -> Result<Var> {
    layers
        .iter()
        .try_fold(x, |h, l| tape.layer(store, l, activation, h))
}

/// Gradients of `loss` with respect to trainable BN scale/shift parameters
/// only. Other trainable parameters, if any, are dropped.
pub fn backward_bn_only(tape: &Tape, store: &ParamStore, output: Var, loss_grad: &Tensor4) -> Result<Gradients> {
    let mut g = tape.backward(store, output, loss_grad)?;
    g.retain(|id| store.param(id).role.is_bn());
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::params::ParamRole;
    use crate::rng::rng_from;

    fn dense_layer(store: &mut ParamStore, w: Vec<f64>, n: usize, frozen: bool) -> Layer {
        let id = store
            .add("d.weight", ParamRole::Weight, vec![n, n], w, frozen)
            .unwrap();
        Layer::Dense(Dense {
            weight: id,
            bias: None,
            in_features: n,
            out_features: n,
        })
    }

    #[test]
    fn identity_dense_identity_activation_is_noop() {
        let mut s = ParamStore::new();
        let l = dense_layer(&mut s, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], 3, true);
        let x = Tensor4::from_vec(Dims::new(1, 3, 1, 1), vec![0.3, -2.0, 5.0]).unwrap();
        let mut t = Tape::new(Mode::Eval);
        let v = t.input(x.clone());
        let y = forward_block(&mut t, &s, v, &[l], Activation::Identity).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn zero_weights_tanh_gives_zero() {
        let mut s = ParamStore::new();
        let l = dense_layer(&mut s, vec![0.0; 4], 2, true);
        let x = Tensor4::from_vec(Dims::new(2, 2, 1, 1), vec![1., 2., 3., 4.]).unwrap();
        let mut t = Tape::new(Mode::Eval);
        let v = t.input(x);
        let y = forward_block(&mut t, &s, v, &[l], Activation::Tanh).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_train_needs_two_samples() {
        let mut s = ParamStore::new();
        let id = s.add_bn("bn", 2, true);
        let mut t = Tape::new(Mode::Train);
        let v = t.input(Tensor4::zeros(Dims::new(1, 2, 2, 2)));
        let err = t.batch_norm(&s, &BatchNorm { id, channels: 2 }, v).unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall(1)));
    }

    #[test]
    fn bn_zero_gamma_outputs_beta() {
        let mut s = ParamStore::new();
        let id = s.add_bn("bn", 2, true);
        let (g, b) = (s.bn(id).gamma, s.bn(id).beta);
        s.param_mut(g).data = vec![0.0, 0.0];
        s.param_mut(b).data = vec![0.5, -1.0];
        let mut rng = rng_from(1);
        let mut t = Tape::new(Mode::Train);
        let v = t.input(Tensor4::randn(Dims::new(3, 2, 2, 2), 1.0, &mut rng));
        let y = t.batch_norm(&s, &BatchNorm { id, channels: 2 }, v).unwrap();
        let out = t.value(y);
        for bb in 0..3 {
            for h in 0..2 {
                for w in 0..2 {
                    assert_eq!(out.at(bb, 0, h, w), 0.5);
                    assert_eq!(out.at(bb, 1, h, w), -1.0);
                }
            }
        }
    }

    #[test]
    fn beta_grad_counts_elements_under_sum_loss() {
        let mut s = ParamStore::new();
        let id = s.add_bn("bn", 3, true);
        let mut rng = rng_from(2);
        let mut t = Tape::new(Mode::Train);
        let v = t.input(Tensor4::randn(Dims::new(4, 3, 2, 5), 1.0, &mut rng));
        let y = t.batch_norm(&s, &BatchNorm { id, channels: 3 }, v).unwrap();
        let seed = Tensor4::filled(t.value(y).dims(), 1.0);
        let g = backward_bn_only(&t, &s, y, &seed).unwrap();
        assert_eq!(g.param(s.bn(id).beta).unwrap(), &[40.0, 40.0, 40.0]);
        let gg = g.param(s.bn(id).gamma).unwrap();
        assert!(gg.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn empty_tape_errors() {
        let t = Tape::new(Mode::Train);
        let err = t
            .backward(&ParamStore::new(), Var(0), &Tensor4::zeros(Dims::new(1, 1, 1, 1)))
            .unwrap_err();
        assert!(matches!(err, Error::EmptyTape));
    }

    #[test]
    fn frozen_params_get_no_gradient_entry() {
        let mut s = ParamStore::new();
        let l = dense_layer(&mut s, vec![0.5, 0.1, -0.2, 0.3], 2, true);
        let bn = s.add_bn("bn", 2, true);
        let mut t = Tape::new(Mode::Train);
        let v = t.input(Tensor4::from_vec(Dims::new(2, 2, 1, 1), vec![1., 2., -1., 0.5]).unwrap());
        let y = forward_block(&mut t, &s, v, &[l, Layer::Norm(BatchNorm { id: bn, channels: 2 })], Activation::Tanh).unwrap();
        let seed = Tensor4::filled(t.value(y).dims(), 1.0);
        let g = t.backward(&s, y, &seed).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.param(crate::autograd::params::ParamId(0)).is_none());
    }

    #[test]
    fn shuffle_and_slice_backward_are_adjoint() {
        let mut rng = rng_from(9);
        let x = Tensor4::randn(Dims::new(2, 6, 2, 2), 1.0, &mut rng);
        let mut t = Tape::new(Mode::Eval);
        let v = t.input_with_grad(x.clone());
        let a = t.slice_channels(v, 2, 4).unwrap();
        let b = t.slice_channels(v, 0, 2).unwrap();
        let c = t.concat_channels(&[a, b]).unwrap();
        let y = t.channel_shuffle(c, 2).unwrap();
        let r = Tensor4::randn(t.value(y).dims(), 1.0, &mut rng);
        let lhs = t.value(y).dot(&r).unwrap();
        let g = t.backward(&ParamStore::new(), y, &r).unwrap();
        let rhs = x.dot(g.input(v).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn shuffle_permutation_matches_definition() {
        // 6 channels, 2 groups: [0 1 2 | 3 4 5] -> [0 3 1 4 2 5]
        let src: Vec<usize> = (0..6).map(|c| shuffle_source(c, 2, 6)).collect();
        assert_eq!(src, vec![0, 3, 1, 4, 2, 5]);
    }
}
