//! Candidate blocks built from frozen convolutions.
//!
//! Signals enter every block with unit per-channel variance (each block is
//! followed by its indicator BN). Under the orthogonal scheme the first
//! convolution of each branch is scaled by `√v*` (by `√(e·v*)` for an
//! expansion), so every activation sees pre-activations at the fixed
//! point; convolutions between two activations carry the calibrated gain
//! `g`; depthwise convolutions that follow a 1×1 inside a branch carry
//! gain 1. The mbconv projection is the transposed expansion times `g`, so
//! its linear part is an exact isometry.

use crate::autograd::{Activation, Conv2d, ParamRole, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::{self, InitSpec, LayerParams, Scheme};
use crate::tensor::Dims;

use super::space::{BlockKind, BlockTemplate};

#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Conv(Conv2d),
    Act(Activation),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Topology {
    Sequential { body: Vec<Step>, residual: bool },
    /// Split channels in half, transform the second half, concat, shuffle.
    SplitShuffle { branch: Vec<Step> },
    /// Two branches over the full input, concat, shuffle.
    DualShuffle { left: Vec<Step>, right: Vec<Step> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub template: BlockTemplate,
    pub channels: usize,
    pub topology: Topology,
}

fn run(tape: &mut Tape, store: &ParamStore, steps: &[Step], x: Var) -> Result<Var> {
    steps.iter().try_fold(x, |h, s| match s {
        Step::Conv(c) => tape.conv2d(store, c, h),
        Step::Act(a) => tape.activation(*a, h),
    })
}

fn convs(steps: &[Step]) -> impl Iterator<Item = &Conv2d> {
    steps.iter().filter_map(|s| match s {
        Step::Conv(c) => Some(c),
        Step::Act(_) => None,
    })
}

impl Block {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match &self.topology {
            Topology::Sequential { body, residual } => {
                let y = run(tape, store, body, x)?;
                if *residual {
                    tape.add(x, y)
                } else {
                    Ok(y)
                }
            }
            Topology::SplitShuffle { branch } => {
                let half = self.channels / 2;
                let a = tape.slice_channels(x, 0, half)?;
                let b = tape.slice_channels(x, half, half)?;
                let b = run(tape, store, branch, b)?;
                let y = tape.concat_channels(&[a, b])?;
                tape.channel_shuffle(y, 2)
            }
            Topology::DualShuffle { left, right } => {
                let a = run(tape, store, left, x)?;
                let b = run(tape, store, right, x)?;
                let y = tape.concat_channels(&[a, b])?;
                tape.channel_shuffle(y, 2)
            }
        }
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        match &self.topology {
            Topology::Sequential { body, .. } => convs(body).collect(),
            Topology::SplitShuffle { branch } => convs(branch).collect(),
            Topology::DualShuffle { left, right } => convs(left).chain(convs(right)).collect(),
        }
    }

    /// Multiply-accumulates per sample for an `n × n` input, summed over
    /// the block's convolutions.
    pub fn macs(&self, n: usize) -> Result<u64> {
        let mut total = 0;
        let x = Dims::new(1, self.channels, n, n);
        let mut walk = |steps: &[Step], mut d: Dims| -> Result<()> {
            for c in convs(steps) {
                total += c.macs(d)?;
                d = c.output_dims(d)?;
            }
            Ok(())
        };
        match &self.topology {
            Topology::Sequential { body, .. } => walk(body, x)?,
            Topology::SplitShuffle { branch } => walk(branch, x.with_channels(self.channels / 2))?,
            Topology::DualShuffle { left, right } => {
                walk(left, x)?;
                walk(right, x)?;
            }
        }
        Ok(total)
    }

    pub fn param_count(&self) -> u64 {
        self.convs().iter().map(|c| c.weight_count()).sum()
    }
}

/// Scale factor of a convolution by its position in the block.
#[derive(Clone, Copy, Debug)]
enum Role {
    /// First convolution feeding an activation from a unit-variance input.
    Entry,
    /// Between two activations.
    Interior,
    /// Gain 1 (depthwise after a 1×1, or before an entry 1×1).
    Unit,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    spec: &'a InitSpec,
    prefix: &'a str,
    counter: u64,
    registered: usize,
    orthogonal: bool,
    gain: f64,
    v_star: f64,
}

impl Builder<'_> {
    fn scale(&self, role: Role, expansion: usize) -> f64 {
        if !self.orthogonal {
            return 1.0;
        }
        match role {
            Role::Entry => (expansion as f64 * self.v_star).sqrt(),
            Role::Interior => self.gain,
            Role::Unit => 1.0,
        }
    }

    fn next_spec(&mut self) -> InitSpec {
        self.counter += 1;
        let s = self.spec.child(&[self.counter]);
        if self.orthogonal {
            s.with_gain(1.0)
        } else {
            s
        }
    }

    fn register(&mut self, p: LayerParams, factor: f64, stride: usize, groups: usize) -> Result<Conv2d> {
        let (d_out, d_in_g, k) = (p.shape[0], p.shape[1], p.shape[2]);
        let name = format!("{}.conv{}.weight", self.prefix, self.registered);
        self.registered += 1;
        let data = p.weights.iter().map(|w| w * factor).collect();
        let weight = self.store.add(name, ParamRole::Weight, p.shape.clone(), data, true)?;
        Ok(Conv2d {
            weight,
            bias: None,
            in_channels: d_in_g * groups,
            out_channels: d_out,
            kernel: k,
            stride,
            padding: (k - 1) / 2,
            groups,
        })
    }

    fn pointwise(&mut self, d_out: usize, d_in: usize, role: Role, expansion: usize) -> Result<Conv2d> {
        let spec = self.next_spec();
        let p = init::init_conv(&spec, d_out, d_in, 1, 1)?;
        let f = self.scale(role, expansion);
        self.register(p, f, 1, 1)
    }

    fn dense_conv(&mut self, d: usize, k: usize, stride: usize, role: Role) -> Result<Conv2d> {
        let spec = self.next_spec();
        let p = init::init_conv(&spec, d, d, k, stride)?;
        let f = self.scale(role, 1);
        self.register(p, f, stride, 1)
    }

    /// Depthwise convolutions sharing windows drawn jointly, so that the
    /// windows are mutually orthonormal under the centered layout.
    fn depthwise(&mut self, channels: &[usize], k: usize, stride: usize, role: Role) -> Result<Vec<Conv2d>> {
        let spec = self.next_spec();
        let f = self.scale(role, 1);
        if !self.orthogonal {
            return channels
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let p = init::init_conv(&spec.child(&[i as u64]), c, 1, k, stride)?;
                    self.register(p, f, stride, c)
                })
                .collect();
        }
        let windows = init::depthwise_window(&spec, k, stride, channels.len())?;
        channels
            .iter()
            .zip(windows)
            .map(|(&c, w)| {
                let p = init::depthwise_from_window(&spec, c, k, &w);
                self.register(p, f, stride, c)
            })
            .collect()
    }

    fn transpose_of(&mut self, src: &Conv2d, factor: f64) -> Result<Conv2d> {
        let (d_out, d_in) = (src.in_channels, src.out_channels);
        let w = &self.store.param(src.weight).data;
        let mut t = vec![0.0; d_out * d_in];
        for o in 0..d_out {
            for i in 0..d_in {
                t[o * d_in + i] = w[i * d_out + o] * factor;
            }
        }
        self.counter += 1;
        let p = LayerParams {
            weights: t,
            bias: vec![0.0; d_out],
            shape: vec![d_out, d_in, 1, 1],
            frozen: true,
            gain: factor,
        };
        self.register(p, 1.0, 1, 1)
    }
}

/// Builds `template` on `channels` channels, registering frozen weights
/// under `prefix` in `store`.
pub fn build_block(
    store: &mut ParamStore,
    prefix: &str,
    template: &BlockTemplate,
    channels: usize,
    spec: &InitSpec,
) -> Result<Block> {
    template.validate(channels).map_err(Error::Config)?;
    let orthogonal = spec.scheme != Scheme::Gaussian;
    let mut b = Builder {
        store,
        spec,
        prefix,
        counter: 0,
        registered: 0,
        orthogonal,
        gain: spec.resolved_gain(),
        v_star: spec.v_star,
    };
    let act = template.activation;
    let (k, s, d) = (template.kernel, template.stride, channels);
    let half = d / 2;
    let topology = match template.kind {
        BlockKind::PlainConv => Topology::Sequential {
            body: vec![Step::Conv(b.dense_conv(d, k, s, Role::Entry)?), Step::Act(act)],
            residual: false,
        },
        BlockKind::Mbconv => {
            let e = template.expansion.unwrap_or(1);
            let inner = e * d;
            let expand = b.pointwise(inner, d, Role::Entry, e)?;
            let dw = b.depthwise(&[inner], k, s, Role::Interior)?.remove(0);
            let project = if orthogonal {
                b.transpose_of(&expand, b.gain / (e as f64 * b.v_star).sqrt())?
            } else {
                b.pointwise(d, inner, Role::Unit, 1)?
            };
            Topology::Sequential {
                body: vec![
                    Step::Conv(expand),
                    Step::Act(act),
                    Step::Conv(dw),
                    Step::Act(act),
                    Step::Conv(project),
                ],
                residual: s == 1,
            }
        }
        BlockKind::Shuffle if s == 1 => {
            let p1 = b.pointwise(half, half, Role::Entry, 1)?;
            let dw = b.depthwise(&[half], k, 1, Role::Unit)?.remove(0);
            let p2 = b.pointwise(half, half, Role::Interior, 1)?;
            Topology::SplitShuffle {
                branch: vec![
                    Step::Conv(p1),
                    Step::Act(act),
                    Step::Conv(dw),
                    Step::Conv(p2),
                    Step::Act(act),
                ],
            }
        }
        BlockKind::Shuffle => {
            let mut dws = b.depthwise(&[d, half], k, 2, Role::Unit)?;
            let dw_right = dws.pop().expect("two windows");
            let dw_left = dws.pop().expect("two windows");
            let pl = b.pointwise(half, d, Role::Entry, 1)?;
            let pr1 = b.pointwise(half, d, Role::Entry, 1)?;
            let pr2 = b.pointwise(half, half, Role::Interior, 1)?;
            Topology::DualShuffle {
                left: vec![Step::Conv(dw_left), Step::Conv(pl), Step::Act(act)],
                right: vec![
                    Step::Conv(pr1),
                    Step::Act(act),
                    Step::Conv(dw_right),
                    Step::Conv(pr2),
                    Step::Act(act),
                ],
            }
        }
        BlockKind::ShuffleXception if s == 1 => {
            let mut branch = Vec::new();
            for round in 0..3 {
                let role = if round == 0 { Role::Entry } else { Role::Interior };
                branch.push(Step::Conv(b.depthwise(&[half], k, 1, Role::Unit)?.remove(0)));
                branch.push(Step::Conv(b.pointwise(half, half, role, 1)?));
                branch.push(Step::Act(act));
            }
            Topology::SplitShuffle { branch }
        }
        BlockKind::ShuffleXception => {
            let mut dws = b.depthwise(&[d, d], k, 2, Role::Unit)?;
            let dw_right = dws.pop().expect("two windows");
            let dw_left = dws.pop().expect("two windows");
            let left = vec![
                Step::Conv(dw_left),
                Step::Conv(b.pointwise(half, d, Role::Entry, 1)?),
                Step::Act(act),
            ];
            let mut right = vec![
                Step::Conv(dw_right),
                Step::Conv(b.pointwise(half, d, Role::Entry, 1)?),
                Step::Act(act),
            ];
            for _ in 0..2 {
                right.push(Step::Conv(b.depthwise(&[half], k, 1, Role::Unit)?.remove(0)));
                right.push(Step::Conv(b.pointwise(half, half, Role::Interior, 1)?));
                right.push(Step::Act(act));
            }
            Topology::DualShuffle { left, right }
        }
    };
    Ok(Block {
        template: template.clone(),
        channels,
        topology,
    })
}

/// Analytic multiply-accumulates and parameter count of `template` on
/// `d` channels at input size `n × n`. Bias-free.
pub fn template_cost(template: &BlockTemplate, d: usize, n: usize) -> (u64, u64) {
    let k = template.kernel;
    let s = template.stride;
    let n_out = (n + 2 * ((k - 1) / 2) - k) / s + 1;
    let c = d / 2;
    let pw = |d_out: usize, d_in: usize, n: usize| conv_cost(d_out, d_in, 1, n, 1);
    let dw = |ch: usize, n_out: usize| conv_cost(ch, ch, k, n_out, ch);
    let parts: Vec<(u64, u64)> = match (template.kind, s) {
        (BlockKind::PlainConv, _) => vec![conv_cost(d, d, k, n_out, 1)],
        (BlockKind::Mbconv, _) => {
            let inner = template.expansion.unwrap_or(1) * d;
            vec![pw(inner, d, n), dw(inner, n_out), pw(d, inner, n_out)]
        }
        (BlockKind::Shuffle, 1) => vec![pw(c, c, n), dw(c, n), pw(c, c, n)],
        (BlockKind::Shuffle, _) => vec![
            dw(d, n_out),
            pw(c, d, n_out),
            pw(c, d, n),
            dw(c, n_out),
            pw(c, c, n_out),
        ],
        (BlockKind::ShuffleXception, 1) => (0..3).flat_map(|_| [dw(c, n), pw(c, c, n)]).collect(),
        (BlockKind::ShuffleXception, _) => vec![
            dw(d, n_out),
            pw(c, d, n_out),
            dw(d, n_out),
            pw(c, d, n_out),
            dw(c, n_out),
            pw(c, c, n_out),
            dw(c, n_out),
            pw(c, c, n_out),
        ],
    };
    parts
        .into_iter()
        .fold((0, 0), |(m, p), (dm, dp)| (m + dm, p + dp))
}

/// `(MACs, params)` of one `k × k` convolution with `groups` groups and an
/// `n_out × n_out` output.
pub fn conv_cost(d_out: usize, d_in: usize, k: usize, n_out: usize, groups: usize) -> (u64, u64) {
    let params = (d_out * (d_in / groups) * k * k) as u64;
    (params * (n_out * n_out) as u64, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::rng::rng_from;
    use crate::tensor::Tensor4;

    fn all_templates(stride: usize) -> Vec<BlockTemplate> {
        let mut v = Vec::new();
        for k in [3, 5, 7] {
            for e in [3, 6] {
                v.push(BlockTemplate::mbconv(k, e, stride));
            }
            v.push(BlockTemplate::shuffle(k, stride));
            v.push(BlockTemplate::plain(k, stride));
        }
        v.push(BlockTemplate::shuffle_xception(stride));
        v
    }

    #[test]
    fn analytic_cost_matches_built_layers() {
        for s in [1, 2] {
            for t in all_templates(s) {
                let mut store = ParamStore::new();
                let b = build_block(&mut store, "b", &t, 8, &InitSpec::orthogonal(1)).unwrap();
                let (macs, params) = template_cost(&t, 8, 8);
                assert_eq!(b.macs(8).unwrap(), macs, "{}", t.label());
                assert_eq!(b.param_count(), params, "{}", t.label());
                assert_eq!(store.scalar_count() as u64, params, "{}", t.label());
            }
        }
    }

    #[test]
    fn mbconv_cost_fixture() {
        // expand 8·8·16·48 + depthwise 8·8·48·9 + project 8·8·48·16
        let (macs, params) = template_cost(&BlockTemplate::mbconv(3, 3, 1), 16, 8);
        assert_eq!(macs, 49_152 + 27_648 + 49_152);
        assert_eq!(params, 768 + 432 + 768);
    }

    #[test]
    fn output_shapes() {
        let mut rng = rng_from(3);
        for s in [1, 2] {
            for t in all_templates(s) {
                let mut store = ParamStore::new();
                let b = build_block(&mut store, "b", &t, 8, &InitSpec::orthogonal(2)).unwrap();
                let mut tape = Tape::new(Mode::Eval);
                let x = tape.input(Tensor4::randn(Dims::new(2, 8, 8, 8), 1.0, &mut rng));
                let y = b.forward(&mut tape, &store, x).unwrap();
                assert_eq!(tape.value(y).dims(), Dims::new(2, 8, 8 / s, 8 / s), "{}", t.label());
            }
        }
    }

    #[test]
    fn all_weights_frozen() {
        let mut store = ParamStore::new();
        build_block(&mut store, "b", &BlockTemplate::mbconv(5, 6, 1), 8, &InitSpec::orthogonal(0)).unwrap();
        assert!(store.trainable_ids().is_empty());
    }

    #[test]
    fn odd_channels_rejected_for_shuffle() {
        let mut store = ParamStore::new();
        let err = build_block(&mut store, "b", &BlockTemplate::shuffle(3, 1), 7, &InitSpec::orthogonal(0));
        assert!(err.is_err());
    }
}
