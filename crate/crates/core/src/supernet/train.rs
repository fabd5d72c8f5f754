//! Indicator-only training: every frozen weight stays put, only the BN
//! indicators move.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::{backward_bn_only, softmax_cross_entropy, Gradients, Mode, ParamId, Sgd, SgdConfig, Tape};
use crate::data::{Augment, Dataset, DatasetStream};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::net::Supernet;
use super::sampler::{plan_round, FairnessCounter};
use super::space::PathSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            sgd: SgdConfig::default(),
            seed: 0,
            augment: Augment::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricLine {
    pub step: usize,
    pub path: String,
    pub layer_path: bool,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean block-path loss per step.
    pub losses: Vec<f64>,
    pub fairness: FairnessCounter,
    pub layer_path_updates: usize,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
}

/// Forward and backward of one path; returns the loss and BN gradients.
pub fn path_gradients(net: &Supernet, path: &PathSample, images: &Tensor4, labels: &[usize]) -> Result<(f64, Gradients, Tape)> {
    let mut tape = Tape::new(Mode::Train);
    let x = tape.input(images.clone());
    let logits = net.forward(&mut tape, path, x)?;
    let (loss, g) = softmax_cross_entropy(tape.value(logits), labels)?;
    let grads = backward_bn_only(&tape, &net.store, logits, &g)?;
    Ok((loss, grads, tape))
}

fn diverged(step: usize, path: &PathSample, e: impl std::fmt::Display) -> Error {
    Error::Diverged {
        step,
        path: path.to_string(),
        hint: format!("{e}; lower the learning rate"),
    }
}

pub fn train_indicators(
    net: &mut Supernet,
    data: &Dataset,
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    let stream = DatasetStream::new(data, cfg.batch_size, cfg.seed, cfg.augment)?;
    let total = cfg.epochs * stream.batches_per_epoch();
    let layer_params: BTreeSet<ParamId> = (0..net.num_layers())
        .filter_map(|l| net.layer_indicator(l))
        .flat_map(|id| {
            let st = net.store.bn(id);
            [st.gamma, st.beta]
        })
        .collect();
    let before = net.store.frozen_digest();
    let mut sgd = Sgd::new(cfg.sgd.clone());
    let mut fairness = FairnessCounter::new(&net.space);
    let mut losses = Vec::with_capacity(total);
    let mut layer_path_updates = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in stream.epoch(epoch as u64) {
            let lr = cfg.sgd.lr_at(step, total);
            let plan = plan_round(&net.space, cfg.seed, step as u64);
            let mut acc = Gradients::default();
            let mut sum = 0.0;
            for (i, path) in plan.paths().enumerate() {
                let is_layer = i >= plan.block_paths.len();
                let (loss, mut g, tape) = path_gradients(net, path, &batch.images, &batch.labels)
                    .map_err(|e| match e {
                        Error::NumericOverflow { .. } => diverged(step, path, e),
                        other => other,
                    })?;
                if !loss.is_finite() {
                    return Err(diverged(step, path, "loss is not finite"));
                }
                if is_layer {
                    g.retain(|id| layer_params.contains(&id));
                    layer_path_updates += 1;
                } else {
                    fairness.record(path);
                    sum += loss;
                }
                acc.accumulate(&g);
                tape.commit_running_stats(&mut net.store);
                if let Some(w) = metrics.as_deref_mut() {
                    let line = MetricLine {
                        step,
                        path: path.to_string(),
                        layer_path: is_layer,
                        loss,
                        lr,
                    };
                    writeln!(w, "{}", serde_json::to_string(&line)?)?;
                }
            }
            sgd.step(&mut net.store, &acc, lr);
            losses.push(sum / plan.block_paths.len() as f64);
            step += 1;
        }
    }
    Ok(TrainReport {
        steps: step,
        losses,
        fairness,
        layer_path_updates,
        frozen_digest_before: before,
        frozen_digest_after: net.store.frozen_digest(),
    })
}

/// Accuracy of `path` on `data` in eval mode. Indicator running statistics
/// are averaged over every path that trained them, so this understates
/// what the path reaches with its own batch statistics.
pub fn evaluate(net: &Supernet, path: &PathSample, data: &Dataset, batch: usize) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let logits = net.predict(path, &data.images.gather(chunk))?;
        let pred = crate::autograd::argmax_rows(&logits);
        correct += chunk
            .iter()
            .zip(pred)
            .filter(|&(&i, p)| data.labels[i] == p)
            .count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticKind, SyntheticSpec};
    use crate::init::InitSpec;
    use crate::supernet::space::{BlockTemplate, SearchSpace};

    fn tiny() -> (Supernet, Dataset) {
        let s = SearchSpace::uniform("N", &[BlockTemplate::plain(3, 1)], 4, 1, 6, 2).unwrap();
        let net = Supernet::build(&s, &InitSpec::orthogonal(0)).unwrap();
        let d = SyntheticSpec {
            kind: SyntheticKind::Blobs,
            classes: 2,
            per_class: 8,
            channels: 1,
            size: 6,
            noise: 0.2,
            seed: 0,
        }
        .generate()
        .unwrap();
        (net, d)
    }

    #[test]
    fn zero_epochs_leave_indicators() {
        let (mut net, d) = tiny();
        let before = net.indicators();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let r = train_indicators(&mut net, &d, &cfg, None).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(net.indicators(), before);
        assert!(before.block[0][0].iter().all(|&g| g == 1.0));
    }

    #[test]
    fn metrics_are_json_lines() {
        let (mut net, d) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut buf = Vec::new();
        let r = train_indicators(&mut net, &d, &cfg, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<MetricLine> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), r.steps + r.layer_path_updates);
        assert_eq!(r.frozen_digest_before, r.frozen_digest_after);
    }
}
