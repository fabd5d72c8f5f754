//! Weight-sharing supernet over a layered search space.

mod blocks;
mod isometry;
mod net;
mod sampler;
mod space;
mod train;

pub use blocks::{build_block, conv_cost, template_cost, Block, Step, Topology};
pub use isometry::{block_isometry, layer_indicator_jacobian, BlockIsometry, IsometryReport};
pub use net::{IndicatorStore, Supernet};
pub use sampler::{fair_sample_round, layer_path_period, plan_round, FairnessCounter, RoundPlan};
pub use space::{BlockKind, BlockTemplate, Choice, LayerSlot, PathSample, SearchSpace};
pub use train::{evaluate, path_gradients, train_indicators, MetricLine, TrainConfig, TrainReport};
