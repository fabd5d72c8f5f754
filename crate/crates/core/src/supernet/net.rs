//! The weight-sharing network: frozen stem, candidate blocks with their
//! block indicators, identity branches with layer indicators, frozen head.

use crate::autograd::{
    Activation, BatchNorm, BnId, Conv2d, Dense, Mode, ParamRole, ParamStore, Tape, Var,
};
use crate::error::{Error, Result};
use crate::init::{self, InitSpec, KernelLayout};
use crate::tensor::Tensor4;

use super::blocks::{build_block, Block};
use super::space::{Choice, PathSample, SearchSpace};

#[derive(Clone, Debug)]
pub struct Supernet {
    pub space: SearchSpace,
    pub init: InitSpec,
    pub store: ParamStore,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Vec<Block>>,
    block_indicators: Vec<Vec<BatchNorm>>,
    layer_indicators: Vec<Option<BatchNorm>>,
    head: Dense,
}

/// Trained indicator values, as consumed by scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorStore {
    /// `block[l][m]` is γ of `V^{l,m}`.
    pub block: Vec<Vec<Vec<f64>>>,
    /// γ of `U^l`, `None` on reduction layers.
    pub layer: Vec<Option<Vec<f64>>>,
}

fn bn(store: &mut ParamStore, name: String, channels: usize, trainable: bool) -> BatchNorm {
    BatchNorm {
        id: store.add_bn(name, channels, trainable),
        channels,
    }
}

impl Supernet {
    /// Builds every candidate. Frozen weights of candidate `m` in layer `l`
    /// depend only on `(init.seed, l, m)`.
    pub fn build(space: &SearchSpace, init: &InitSpec) -> Result<Self> {
        let all: Vec<Vec<usize>> = space
            .layers
            .iter()
            .map(|l| (0..l.candidates.len()).collect())
            .collect();
        Self::build_selected(space, init, &all, true)
    }

    /// A standalone subnet holding only the chosen candidate per layer,
    /// with weights identical to the same candidates in the full supernet.
    pub fn build_subnet(space: &SearchSpace, init: &InitSpec, blocks: &[usize]) -> Result<Self> {
        PathSample::from_blocks(blocks).validate(space)?;
        let chosen: Vec<Vec<usize>> = blocks.iter().map(|&m| vec![m]).collect();
        Self::build_selected(space, init, &chosen, false)
    }

    fn build_selected(space: &SearchSpace, init: &InitSpec, chosen: &[Vec<usize>], layer_ind: bool) -> Result<Self> {
        space.validate()?;
        init.validate()?;
        let d = space.channels();
        let mut store = ParamStore::new();

        let stem_spec = init.child(&[u64::MAX, 0]).with_gain(1.0).with_layout(KernelLayout::Full);
        let p = init::init_conv(&stem_spec, d, space.input_channels, 3, 1)?;
        let w = store.add("stem.conv.weight", ParamRole::Weight, p.shape, p.weights, true)?;
        let stem = Conv2d {
            weight: w,
            bias: None,
            in_channels: space.input_channels,
            out_channels: d,
            kernel: 3,
            stride: 1,
            padding: 1,
            groups: 1,
        };
        let stem_bn = bn(&mut store, "stem.bn".into(), d, false);

        let mut new_space = space.clone();
        let mut blocks = Vec::new();
        let mut block_indicators = Vec::new();
        let mut layer_indicators = Vec::new();
        for (l, slot) in space.layers.iter().enumerate() {
            let mut row = Vec::new();
            let mut inds = Vec::new();
            for &m in &chosen[l] {
                let t = &slot.candidates[m];
                let prefix = format!("layer{l}.block{m}");
                let spec = init.child(&[l as u64, m as u64]);
                let b = build_block(&mut store, &prefix, t, slot.channels, &spec)
                    .map_err(|e| Error::Config(format!("layer slot {l}, candidate {m}: {e}")))?;
                row.push(b);
                inds.push(bn(&mut store, format!("{prefix}.ind"), slot.channels, true));
            }
            new_space.layers[l].candidates = chosen[l].iter().map(|&m| slot.candidates[m].clone()).collect();
            blocks.push(row);
            block_indicators.push(inds);
            layer_indicators.push(if layer_ind && !slot.is_reduction {
                Some(bn(&mut store, format!("layer{l}.ind"), slot.channels, true))
            } else {
                None
            });
        }

        let head_spec = init.child(&[u64::MAX, 1]).with_gain(1.0);
        let p = init::init_dense(&head_spec, space.classes, d)?;
        let w = store.add("head.weight", ParamRole::Weight, p.shape, p.weights, true)?;
        let head = Dense {
            weight: w,
            bias: None,
            in_features: d,
            out_features: space.classes,
        };
        Ok(Supernet {
            space: new_space,
            init: init.clone(),
            store,
            stem,
            stem_bn,
            blocks,
            block_indicators,
            layer_indicators,
            head,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, l: usize, m: usize) -> &Block {
        &self.blocks[l][m]
    }

    pub fn block_indicator(&self, l: usize, m: usize) -> BnId {
        self.block_indicators[l][m].id
    }

    pub fn layer_indicator(&self, l: usize) -> Option<BnId> {
        self.layer_indicators[l].as_ref().map(|b| b.id)
    }

    pub fn block_indicator_count(&self) -> usize {
        self.block_indicators.iter().map(Vec::len).sum()
    }

    pub fn layer_indicator_count(&self) -> usize {
        self.layer_indicators.iter().flatten().count()
    }

    /// Stem output for a batch of images.
    pub fn stem(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.conv2d(&self.store, &self.stem, x)?;
        tape.batch_norm(&self.store, &self.stem_bn, h)
    }

    /// One layer of a path.
    pub fn layer(&self, tape: &mut Tape, l: usize, choice: Choice, x: Var) -> Result<Var> {
        match choice {
            Choice::Block(m) => {
                let y = self.blocks[l][m].forward(tape, &self.store, x)?;
                tape.batch_norm(&self.store, &self.block_indicators[l][m], y)
            }
            Choice::LayerId => {
                let ind = self.layer_indicators[l].as_ref().ok_or_else(|| {
                    Error::invalid(format!("layer {l} has no layer indicator"))
                })?;
                tape.batch_norm(&self.store, ind, x)
            }
        }
    }

    /// Logits for `images` along `path`.
    pub fn forward(&self, tape: &mut Tape, path: &PathSample, images: Var) -> Result<Var> {
        if path.choices.len() != self.num_layers() {
            return Err(Error::invalid(format!(
                "path has {} choices for {} layers",
                path.choices.len(),
                self.num_layers()
            )));
        }
        let mut h = self.stem(tape, images)?;
        for (l, &c) in path.choices.iter().enumerate() {
            h = self.layer(tape, l, c, h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        tape.dense(&self.store, &self.head, pooled)
    }

    /// Eval-mode logits.
    pub fn predict(&self, path: &PathSample, images: &Tensor4) -> Result<Tensor4> {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(images.clone());
        let y = self.forward(&mut tape, path, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn indicators(&self) -> IndicatorStore {
        let gamma = |id: BnId| self.store.param(self.store.bn(id).gamma).data.clone();
        IndicatorStore {
            block: self
                .block_indicators
                .iter()
                .map(|row| row.iter().map(|b| gamma(b.id)).collect())
                .collect(),
            layer: self
                .layer_indicators
                .iter()
                .map(|b| b.as_ref().map(|b| gamma(b.id)))
                .collect(),
        }
    }

    /// Zeroes the classifier so an untrained model predicts class 0.
    pub fn zero_head(&mut self) {
        self.store.param_mut(self.head.weight).data.fill(0.0);
    }

    pub fn activation(&self) -> Activation {
        self.init.activation
    }
}
