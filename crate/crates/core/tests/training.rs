use isonas_core::autograd::SgdConfig;
use isonas_core::data::{Dataset, SyntheticKind, SyntheticSpec};
use isonas_core::init::InitSpec;
use isonas_core::stats::chi_square_sf;
use isonas_core::supernet::{plan_round, train_indicators, BlockTemplate, Choice, SearchSpace, Supernet, TrainConfig};

fn blobs(classes: usize, per_class: usize, size: usize, noise: f64, seed: u64) -> Dataset {
    SyntheticSpec {
        kind: SyntheticKind::Blobs,
        classes,
        per_class,
        channels: 1,
        size,
        noise,
        seed,
    }
    .generate()
    .unwrap()
}

#[test]
fn co_occurrence_is_uniform() {
    let m = 4;
    let cands: Vec<BlockTemplate> = [3, 5, 3, 5]
        .iter()
        .enumerate()
        .map(|(i, &k)| if i < 2 { BlockTemplate::plain(k, 1) } else { BlockTemplate::mbconv(k, 3, 1) })
        .collect();
    let space = SearchSpace::uniform("NNN", &cands, 8, 1, 16, 2).unwrap();
    let rounds = 1000u64;
    for (l1, l2) in [(0, 1), (0, 2), (1, 2)] {
        let mut counts = vec![vec![0.0f64; m]; m];
        for r in 0..rounds {
            for p in &plan_round(&space, 42, r).block_paths {
                let (Choice::Block(a), Choice::Block(b)) = (p.choices[l1], p.choices[l2]) else {
                    panic!("layer path among block paths");
                };
                counts[a][b] += 1.0;
            }
        }
        let expected = rounds as f64 / m as f64;
        let pearson: f64 = counts.iter().flatten().map(|c| (c - expected).powi(2) / expected).sum();
        // Each round pairs candidates through a permutation, so every cell is
        // Binomial(rounds, 1/M): its variance exceeds the fixed-margin
        // contingency value by M/(M−1). Rescale before the (M−1)² test.
        let stat = pearson * (m as f64 - 1.0) / m as f64;
        let dof = ((m - 1) * (m - 1)) as f64;
        let p = chi_square_sf(stat, dof);
        assert!(p > 0.01, "layers {l1},{l2}: stat {stat}, p {p}");
    }
}

#[test]
fn indicator_loss_decreases_on_separable_data() {
    let data = blobs(2, 16, 6, 0.05, 3);
    let space = SearchSpace::uniform("N", &[BlockTemplate::plain(3, 1)], 4, 1, 6, 2).unwrap();
    let mut net = Supernet::build(&space, &InitSpec::orthogonal(1)).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: data.len(),
        sgd: SgdConfig {
            lr: 0.01,
            ..SgdConfig::default()
        },
        ..TrainConfig::default()
    };
    let r = train_indicators(&mut net, &data, &cfg, None).unwrap();
    assert_eq!(r.losses.len(), 10);
    for w in r.losses.windows(2) {
        assert!(w[1] < w[0], "{:?}", r.losses);
    }
}

#[test]
fn training_leaves_frozen_weights_alone() {
    let data = blobs(3, 12, 8, 0.3, 4);
    let cands = [BlockTemplate::plain(3, 1), BlockTemplate::mbconv(3, 3, 1), BlockTemplate::shuffle(3, 1)];
    let space = SearchSpace::uniform("NRN", &cands, 8, 1, 8, 3).unwrap();
    let mut net = Supernet::build(&space, &InitSpec::orthogonal(2)).unwrap();
    let before = net.store.frozen_digest();
    let r = train_indicators(&mut net, &data, &TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() }, None).unwrap();
    assert_eq!(net.store.frozen_digest(), before);
    assert_eq!(r.frozen_digest_after, before);
    assert_eq!(r.fairness.uniform_count(), Some(r.steps as u64));
    assert!(net.indicators().block.iter().flatten().flatten().any(|&g| g != 1.0));
}
