//! Per-block Jacobian spectra at initialization.

use serde::{Deserialize, Serialize};

use crate::autograd::{jacobian_of, BatchNorm, Mode, ParamStore, Tape};
use crate::error::Result;
use crate::init::InitSpec;
use crate::linalg::Matrix;
use crate::meanfield::{check_isometry, spectral_stats, IsometryVerdict, SpectralStats, DEFAULT_TOL};
use crate::rng::child_rng;
use crate::tensor::{Dims, Tensor4};

use super::blocks::build_block;
use super::space::{BlockTemplate, SearchSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockIsometry {
    pub label: String,
    pub template: BlockTemplate,
    pub channels: usize,
    pub size: usize,
    pub stats: SpectralStats,
    pub verdict: IsometryVerdict,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IsometryReport {
    pub blocks: Vec<BlockIsometry>,
}

impl IsometryReport {
    /// Every distinct template of `space`, each at its layer's input size.
    pub fn for_space(space: &SearchSpace, init: &InitSpec, seed: u64) -> Result<Self> {
        let sizes = space.spatial_sizes();
        let mut seen = Vec::new();
        let mut blocks = Vec::new();
        for (l, slot) in space.layers.iter().enumerate() {
            for t in &slot.candidates {
                if seen.contains(&(t.clone(), sizes[l])) {
                    continue;
                }
                seen.push((t.clone(), sizes[l]));
                blocks.push(block_isometry(t, slot.channels, sizes[l], init, seed)?);
            }
        }
        Ok(IsometryReport { blocks })
    }

    pub fn all_pass(&self) -> bool {
        self.blocks.iter().all(|b| b.verdict.pass)
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "block,channels,size,phi,phi2,trace_var,pass")?;
        for b in &self.blocks {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                b.label, b.channels, b.size, b.stats.phi, b.stats.phi2, b.stats.trace_var, b.verdict.pass
            )?;
        }
        Ok(())
    }
}

/// Calibration batch for the indicator's running statistics.
const CALIBRATION_BATCH: usize = 32;

/// Builds `template` followed by its indicator BN on `channels × size ×
/// size` unit-Gaussian inputs, sets the indicator's running statistics
/// from a calibration batch, and measures the Jacobian spectrum at a fresh
/// input.
pub fn block_isometry(
    template: &BlockTemplate,
    channels: usize,
    size: usize,
    init: &InitSpec,
    seed: u64,
) -> Result<BlockIsometry> {
    let mut store = ParamStore::new();
    let block = build_block(&mut store, "b", template, channels, &init.child(&[seed]))?;
    let ind = BatchNorm {
        id: store.add_bn("b.ind", channels, true),
        channels,
    };
    let mut rng = child_rng(seed, &[1]);
    let calib = Tensor4::randn(Dims::new(CALIBRATION_BATCH, channels, size, size), 1.0, &mut rng);
    let mut tape = Tape::new(Mode::Train);
    let x = tape.input(calib);
    let y = block.forward(&mut tape, &store, x)?;
    tape.batch_norm(&store, &ind, y)?;
    tape.calibrate_running_stats(&mut store);

    let probe = Tensor4::randn(Dims::new(1, channels, size, size), 1.0, &mut rng);
    let j = jacobian_of(&store, &probe, |t, v| {
        let y = block.forward(t, &store, v)?;
        t.batch_norm(&store, &ind, y)
    })?;
    let stats = spectral_stats(&j)?;
    Ok(BlockIsometry {
        label: template.label(),
        template: template.clone(),
        channels,
        size,
        stats,
        verdict: check_isometry(&stats, DEFAULT_TOL, DEFAULT_TOL),
    })
}

/// Jacobian of a freshly initialized identity-plus-BN branch in eval mode.
pub fn layer_indicator_jacobian(channels: usize, size: usize, seed: u64) -> Result<Matrix> {
    let mut store = ParamStore::new();
    let ind = BatchNorm {
        id: store.add_bn("u", channels, true),
        channels,
    };
    let mut rng = child_rng(seed, &[2]);
    let x = Tensor4::randn(Dims::new(1, channels, size, size), 1.0, &mut rng);
    jacobian_of(&store, &x, |t, v| t.batch_norm(&store, &ind, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::BN_EPS;

    #[test]
    fn layer_indicator_is_scaled_identity() {
        let j = layer_indicator_jacobian(4, 3, 0).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        assert_eq!(j, Matrix::identity(36).scale(s));
    }

    #[test]
    fn small_blocks_are_near_isometric() {
        for t in [BlockTemplate::plain(3, 1), BlockTemplate::mbconv(3, 3, 2), BlockTemplate::shuffle(3, 2)] {
            let r = block_isometry(&t, 16, 4, &InitSpec::orthogonal(1), 0).unwrap();
            assert!((r.stats.phi - 1.0).abs() < 0.1, "{} {:?}", r.label, r.stats);
        }
    }
}
