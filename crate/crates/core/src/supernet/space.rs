//! Search-space description: layers of candidate block templates.

use serde::{Deserialize, Serialize};

use crate::autograd::Activation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Mbconv,
    Shuffle,
    ShuffleXception,
    PlainConv,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockTemplate {
    pub kind: BlockKind,
    pub kernel: usize,
    /// Mbconv only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion: Option<usize>,
    pub stride: usize,
    #[serde(default = "tanh")]
    pub activation: Activation,
}

fn tanh() -> Activation {
    Activation::Tanh
}

impl BlockTemplate {
    pub fn mbconv(kernel: usize, expansion: usize, stride: usize) -> Self {
        BlockTemplate {
            kind: BlockKind::Mbconv,
            kernel,
            expansion: Some(expansion),
            stride,
            activation: Activation::Tanh,
        }
    }

    pub fn shuffle(kernel: usize, stride: usize) -> Self {
        BlockTemplate {
            kind: BlockKind::Shuffle,
            kernel,
            expansion: None,
            stride,
            activation: Activation::Tanh,
        }
    }

    pub fn shuffle_xception(stride: usize) -> Self {
        BlockTemplate {
            kind: BlockKind::ShuffleXception,
            kernel: 3,
            expansion: None,
            stride,
            activation: Activation::Tanh,
        }
    }

    pub fn plain(kernel: usize, stride: usize) -> Self {
        BlockTemplate {
            kind: BlockKind::PlainConv,
            kernel,
            expansion: None,
            stride,
            activation: Activation::Tanh,
        }
    }

    /// Short human-readable name such as `mbconv_k3_e6_s1`.
    pub fn label(&self) -> String {
        let kind = match self.kind {
            BlockKind::Mbconv => "mbconv",
            BlockKind::Shuffle => "shuffle",
            BlockKind::ShuffleXception => "xception",
            BlockKind::PlainConv => "conv",
        };
        match self.expansion {
            Some(e) => format!("{kind}_k{}_e{e}_s{}", self.kernel, self.stride),
            None => format!("{kind}_k{}_s{}", self.kernel, self.stride),
        }
    }

    pub fn validate(&self, channels: usize) -> std::result::Result<(), String> {
        if ![3, 5, 7].contains(&self.kernel) {
            return Err(format!("kernel {} not in {{3, 5, 7}}", self.kernel));
        }
        if ![1, 2].contains(&self.stride) {
            return Err(format!("stride {} not in {{1, 2}}", self.stride));
        }
        match (self.kind, self.expansion) {
            (BlockKind::Mbconv, Some(3 | 6)) => {}
            (BlockKind::Mbconv, e) => return Err(format!("mbconv expansion {e:?} not in {{3, 6}}")),
            (_, Some(e)) => return Err(format!("expansion {e} is only valid for mbconv")),
            _ => {}
        }
        if matches!(self.kind, BlockKind::Shuffle | BlockKind::ShuffleXception) && channels % 2 != 0 {
            return Err(format!("shuffle blocks need an even channel count, got {channels}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSlot {
    pub is_reduction: bool,
    pub candidates: Vec<BlockTemplate>,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub input_channels: usize,
    pub image_size: usize,
    pub classes: usize,
    pub layers: Vec<LayerSlot>,
}

impl SearchSpace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Candidates per layer (uniform across layers after validation).
    pub fn num_candidates(&self) -> usize {
        self.layers.first().map_or(0, |l| l.candidates.len())
    }

    pub fn channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.channels)
    }

    /// Number of distinct subnets, saturating at `u64::MAX`.
    pub fn size(&self) -> u64 {
        self.layers
            .iter()
            .fold(1u64, |acc, l| acc.saturating_mul(l.candidates.len() as u64))
    }

    pub fn normal_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_reduction)
            .map(|(i, _)| i)
    }

    /// Spatial size entering each layer, plus the final size at index `L`.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut n = self.image_size;
        let mut out = vec![n];
        for l in &self.layers {
            if l.is_reduction {
                n = n.div_ceil(2);
            }
            out.push(n);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |slot: usize, msg: String| Error::Config(format!("layer slot {slot}: {msg}"));
        if self.layers.is_empty() {
            return Err(Error::Config("search space has no layers".into()));
        }
        if self.input_channels == 0 || self.classes < 2 || self.image_size == 0 {
            return Err(Error::Config(
                "input_channels and image_size must be positive and classes at least 2".into(),
            ));
        }
        if self.layers.iter().all(|l| l.is_reduction) {
            return Err(Error::Config("search space needs at least one normal layer".into()));
        }
        let m = self.layers[0].candidates.len();
        let d = self.layers[0].channels;
        let sizes = self.spatial_sizes();
        for (i, slot) in self.layers.iter().enumerate() {
            if slot.candidates.is_empty() {
                return Err(bad(i, "no candidates".into()));
            }
            if slot.candidates.len() != m {
                return Err(bad(
                    i,
                    format!("{} candidates but layer 0 has {m}", slot.candidates.len()),
                ));
            }
            if slot.channels != d || d == 0 {
                return Err(bad(
                    i,
                    format!("channel count {} conflicts with {d} of the previous layers", slot.channels),
                ));
            }
            let n = sizes[i];
            if slot.is_reduction && n % 2 != 0 {
                return Err(bad(i, format!("reduction on odd feature map {n}")));
            }
            for (j, t) in slot.candidates.iter().enumerate() {
                t.validate(slot.channels)
                    .map_err(|e| bad(i, format!("candidate {j}: {e}")))?;
                let want = if slot.is_reduction { 2 } else { 1 };
                if t.stride != want {
                    return Err(bad(
                        i,
                        format!("candidate {j} has stride {} in a {} layer", t.stride, if slot.is_reduction { "reduction" } else { "normal" }),
                    ));
                }
                if t.kernel >= n {
                    return Err(bad(i, format!("candidate {j}: kernel {} not below feature map {n}", t.kernel)));
                }
            }
        }
        Ok(())
    }

    /// Builds a space from a pattern such as `"NNRN"` with the same
    /// candidate list (strides adjusted per layer) everywhere.
    pub fn uniform(
        pattern: &str,
        candidates: &[BlockTemplate],
        channels: usize,
        input_channels: usize,
        image_size: usize,
        classes: usize,
    ) -> Result<Self> {
        let layers = pattern
            .chars()
            .map(|c| {
                let is_reduction = match c {
                    'N' | 'n' => false,
                    'R' | 'r' => true,
                    other => return Err(Error::Config(format!("bad layer pattern char `{other}`"))),
                };
                let stride = if is_reduction { 2 } else { 1 };
                Ok(LayerSlot {
                    is_reduction,
                    candidates: candidates
                        .iter()
                        .map(|t| BlockTemplate {
                            stride,
                            ..t.clone()
                        })
                        .collect(),
                    channels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let s = SearchSpace {
            input_channels,
            image_size,
            classes,
            layers,
        };
        s.validate()?;
        Ok(s)
    }

    /// Eight layers (six normal, two reduction), four candidates, width 32.
    pub fn desk_default(input_channels: usize, image_size: usize, classes: usize) -> Result<Self> {
        Self::uniform(
            "NNRNNRNN",
            &[
                BlockTemplate::mbconv(3, 3, 1),
                BlockTemplate::mbconv(5, 6, 1),
                BlockTemplate::shuffle(3, 1),
                BlockTemplate::shuffle_xception(1),
            ],
            32,
            input_channels,
            image_size,
            classes,
        )
    }
}

/// One layer's choice on a sampled path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Block(usize),
    /// The identity branch followed by the layer indicator.
    LayerId,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PathSample {
    pub choices: Vec<Choice>,
}

impl PathSample {
    pub fn from_blocks(blocks: &[usize]) -> Self {
        PathSample {
            choices: blocks.iter().map(|&m| Choice::Block(m)).collect(),
        }
    }

    /// Block indices, or `None` if the path uses a layer indicator.
    pub fn blocks(&self) -> Option<Vec<usize>> {
        self.choices
            .iter()
            .map(|c| match c {
                Choice::Block(m) => Some(*m),
                Choice::LayerId => None,
            })
            .collect()
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        if self.choices.len() != space.num_layers() {
            return Err(Error::invalid(format!(
                "path has {} choices for {} layers",
                self.choices.len(),
                space.num_layers()
            )));
        }
        for (l, (c, slot)) in self.choices.iter().zip(&space.layers).enumerate() {
            match c {
                Choice::Block(m) if *m >= slot.candidates.len() => {
                    return Err(Error::invalid(format!("layer {l}: candidate {m} out of range")))
                }
                Choice::LayerId if slot.is_reduction => {
                    return Err(Error::invalid(format!(
                        "layer {l}: reduction layers cannot take the layer indicator"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for PathSample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .choices
            .iter()
            .map(|c| match c {
                Choice::Block(m) => m.to_string(),
                Choice::LayerId => "U".to_string(),
            })
            .collect();
        write!(f, "[{}]", parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_space_counts() {
        let s = SearchSpace::desk_default(1, 28, 10).unwrap();
        assert_eq!(s.num_layers(), 8);
        assert_eq!(s.normal_layers().count(), 6);
        assert_eq!(s.size(), 4u64.pow(8));
        assert_eq!(s.spatial_sizes(), vec![28, 28, 28, 14, 14, 14, 7, 7, 7]);
    }

    #[test]
    fn rejects_channel_conflict_naming_slot() {
        let mut s = SearchSpace::uniform("NN", &[BlockTemplate::plain(3, 1)], 8, 1, 8, 2).unwrap();
        s.layers[1].channels = 16;
        let msg = s.validate().unwrap_err().to_string();
        assert!(msg.contains("layer slot 1"), "{msg}");
    }

    #[test]
    fn rejects_stride_mismatch_and_big_kernel() {
        let mut s = SearchSpace::uniform("NR", &[BlockTemplate::plain(3, 1)], 8, 1, 8, 2).unwrap();
        s.layers[1].candidates[0].stride = 1;
        assert!(s.validate().is_err());
        assert!(SearchSpace::uniform("N", &[BlockTemplate::plain(7, 1)], 8, 1, 6, 2).is_err());
    }

    #[test]
    fn template_parses_from_toml() {
        let t: BlockTemplate = toml::from_str("kind = \"mbconv\"\nkernel = 5\nexpansion = 6\nstride = 1\n").unwrap();
        assert_eq!(t, BlockTemplate::mbconv(5, 6, 1));
        let t: BlockTemplate = toml::from_str("kind = \"shuffle-xception\"\nkernel = 3\nstride = 2\n").unwrap();
        assert_eq!(t, BlockTemplate::shuffle_xception(2));
    }

    #[test]
    fn layer_id_not_allowed_in_reduction() {
        let s = SearchSpace::uniform("NR", &[BlockTemplate::plain(3, 1)], 8, 1, 8, 2).unwrap();
        let p = PathSample {
            choices: vec![Choice::LayerId, Choice::LayerId],
        };
        assert!(p.validate(&s).is_err());
    }
}
