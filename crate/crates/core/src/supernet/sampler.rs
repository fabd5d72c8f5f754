//! Strictly fair path sampling.
//!
//! A round draws an independent permutation of the `M` candidates for each
//! layer and reads off `M` paths, so every candidate of every layer is hit
//! exactly once per round. The layer-indicator branch joins as an extra
//! path every `⌈(M+1)/M⌉` rounds; it never displaces a block candidate, so
//! block counts stay strictly equal.

use rand::seq::SliceRandom;

use crate::rng::{child_rng, Rng};

use super::space::{Choice, PathSample, SearchSpace};

/// `M` paths covering each layer's candidates exactly once.
pub fn fair_sample_round(space: &SearchSpace, rng: &mut Rng) -> Vec<PathSample> {
    let m = space.num_candidates();
    let perms: Vec<Vec<usize>> = space
        .layers
        .iter()
        .map(|_| {
            let mut p: Vec<usize> = (0..m).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    (0..m)
        .map(|i| PathSample {
            choices: perms.iter().map(|p| Choice::Block(p[i])).collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundPlan {
    pub round: u64,
    pub block_paths: Vec<PathSample>,
    /// Identity branch in every normal layer; reduction layers reuse the
    /// first block path's choice.
    pub layer_path: Option<PathSample>,
}

impl RoundPlan {
    pub fn paths(&self) -> impl Iterator<Item = &PathSample> {
        self.block_paths.iter().chain(self.layer_path.iter())
    }
}

pub fn layer_path_period(m: usize) -> u64 {
    (m as u64 + 1).div_ceil(m.max(1) as u64)
}

/// The plan for round `round`, a pure function of `(seed, round)`.
pub fn plan_round(space: &SearchSpace, seed: u64, round: u64) -> RoundPlan {
    let mut rng = child_rng(seed, &[round]);
    let block_paths = fair_sample_round(space, &mut rng);
    let period = layer_path_period(space.num_candidates());
    let has_normal = space.normal_layers().next().is_some();
    let layer_path = (has_normal && (round + 1) % period == 0).then(|| PathSample {
        choices: space
            .layers
            .iter()
            .zip(&block_paths[0].choices)
            .map(|(slot, &c)| if slot.is_reduction { c } else { Choice::LayerId })
            .collect(),
    });
    RoundPlan {
        round,
        block_paths,
        layer_path,
    }
}

/// Per-layer selection counts for block paths.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FairnessCounter {
    pub counts: Vec<Vec<u64>>,
}

impl FairnessCounter {
    pub fn new(space: &SearchSpace) -> Self {
        FairnessCounter {
            counts: space
                .layers
                .iter()
                .map(|l| vec![0; l.candidates.len()])
                .collect(),
        }
    }

    pub fn record(&mut self, path: &PathSample) {
        for (l, c) in path.choices.iter().enumerate() {
            if let Choice::Block(m) = c {
                self.counts[l][*m] += 1;
            }
        }
    }

    /// `Some(E)` if every candidate in every layer has count `E`.
    pub fn uniform_count(&self) -> Option<u64> {
        let first = *self.counts.first()?.first()?;
        self.counts
            .iter()
            .flatten()
            .all(|&c| c == first)
            .then_some(first)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::space::BlockTemplate;

    fn space(m: usize) -> SearchSpace {
        let cands: Vec<BlockTemplate> = [3, 5, 7, 3]
            .iter()
            .take(m)
            .enumerate()
            .map(|(i, &k)| if i < 3 { BlockTemplate::plain(k, 1) } else { BlockTemplate::shuffle(3, 1) })
            .collect();
        SearchSpace::uniform("NNRN", &cands, 8, 1, 16, 2).unwrap()
    }

    #[test]
    fn single_candidate_gives_single_path() {
        let s = space(1);
        for r in 0..4 {
            let plan = plan_round(&s, 1, r);
            assert_eq!(plan.block_paths, vec![PathSample::from_blocks(&[0, 0, 0, 0])]);
        }
    }

    #[test]
    fn three_rounds_hit_each_candidate_three_times() {
        let s = space(4);
        let mut c = FairnessCounter::new(&s);
        for r in 0..3 {
            for p in &plan_round(&s, 9, r).block_paths {
                c.record(p);
            }
        }
        assert_eq!(c.uniform_count(), Some(3));
    }

    #[test]
    fn layer_path_every_second_round() {
        let s = space(4);
        assert_eq!(layer_path_period(4), 2);
        assert!(plan_round(&s, 0, 0).layer_path.is_none());
        let p = plan_round(&s, 0, 1).layer_path.unwrap();
        p.validate(&s).unwrap();
        assert_eq!(p.choices[0], Choice::LayerId);
        assert!(matches!(p.choices[2], Choice::Block(_)));
    }

    #[test]
    fn deterministic_in_seed_and_round() {
        let s = space(4);
        assert_eq!(plan_round(&s, 3, 17), plan_round(&s, 3, 17));
        assert_ne!(plan_round(&s, 3, 17), plan_round(&s, 4, 17));
    }
}
