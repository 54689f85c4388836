mod common;

use common::{full_sort_keep, ones_in};
use doss_core::data::{gen_domain, SyntheticTask, TaskKind};
use doss_core::mask::{capacity, create_domain_mask, magnitude_prune, overlap_stats, MaskSet, PruneSpec};
use doss_core::model::{build_model, ModelConfig, Region};
use doss_core::train::TrainConfig;
use proptest::prelude::*;

const GRID: [f64; 5] = [0.4, 0.5, 0.6, 0.8, 0.9];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn density_matches_full_sort(seed in any::<u64>(), scales in proptest::collection::vec(0.1f64..4.0, 8)) {
        let cfg = ModelConfig::mini();
        let (mut params, registry) = build_model(&cfg, seed).unwrap();
        // Rescale tensors so the global ranking mixes tensors unevenly.
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let s = scales[i % scales.len()];
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        for alpha in GRID {
            for beta in GRID {
                let spec = PruneSpec::new(alpha, beta).unwrap();
                let mask = magnitude_prune(&params, &registry, &spec).unwrap();
                for (region, frac) in [(Region::Encoder, alpha), (Region::Decoder, beta)] {
                    let pool = registry.pool_size(region);
                    let target = ((1.0 - frac) * pool as f64).round() as i64;
                    let ones = ones_in(&mask, &registry, region) as i64;
                    prop_assert!((ones - target).abs() <= 1, "{region} {alpha}/{beta}: {ones} vs {target}");
                    prop_assert_eq!(ones as usize, full_sort_keep(&params, &registry, &spec, region));
                }
            }
        }
    }
}

#[test]
fn capacity_over_the_grid() {
    // With α = k/10 the bound is 10/(10 − k); integer division is the oracle.
    for ka in [4u64, 5, 6, 8, 9] {
        for kb in [4u64, 5, 6, 8, 9] {
            let spec = PruneSpec::new(ka as f64 / 10.0, kb as f64 / 10.0).unwrap();
            let expected = (10 / (10 - ka)).min(10 / (10 - kb)) as usize;
            assert_eq!(capacity(&spec).unwrap(), expected, "alpha {ka}/10 beta {kb}/10");
        }
    }
}

fn domains() -> Vec<doss_core::data::DomainDataset> {
    [("copy", TaskKind::Copy), ("reverse", TaskKind::Reverse), ("shift", TaskKind::Shift(3))]
        .iter()
        .enumerate()
        .map(|(i, (id, kind))| {
            let task = SyntheticTask { kind: *kind, content_lo: 4, content_hi: 20, min_len: 4, max_len: 7, seed: 40 + i as u64 };
            gen_domain(id, &task, 96).unwrap()
        })
        .collect()
}

fn short_finetune() -> TrainConfig {
    let mut cfg = TrainConfig::finetune();
    cfg.learning_rate = 1e-2;
    cfg.batch_tokens = 256;
    cfg.warmup_steps = 2;
    cfg
}

#[test]
fn constrained_masks_are_pairwise_disjoint() {
    let cfg = ModelConfig::mini();
    let (base, registry) = build_model(&cfg, 3).unwrap();
    let spec = PruneSpec { ft_epochs: 1, ..PruneSpec::new(0.8, 0.8).unwrap() };
    let train = short_finetune();
    let mut set = MaskSet::new_disjoint();
    for d in domains() {
        let m = create_domain_mask(&base, &registry, &cfg, &d, spec, &train, Some(&set)).unwrap();
        set.push(m).unwrap();
    }
    let stats = overlap_stats(&set).unwrap();
    assert_eq!(stats.max_off_diagonal_shared(), 0);
    let masks: Vec<_> = set.iter().collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert_eq!(masks[i].shared_ones(masks[j]).unwrap(), 0);
        }
    }
    // The first mask is full density; later ones are not refilled.
    let nominal = masks[0].count_ones();
    assert!(masks[1].count_ones() < nominal && masks[2].count_ones() < nominal);
}

#[test]
fn unconstrained_masks_on_distinct_tasks_overlap() {
    let cfg = ModelConfig::mini();
    let (base, registry) = build_model(&cfg, 3).unwrap();
    let spec = PruneSpec { ft_epochs: 1, ..PruneSpec::new(0.6, 0.6).unwrap() };
    let train = short_finetune();
    let mut set = MaskSet::new();
    for d in domains() {
        set.push(create_domain_mask(&base, &registry, &cfg, &d, spec, &train, None).unwrap()).unwrap();
    }
    let masks: Vec<_> = set.iter().collect();
    for i in 0..3 {
        for j in i + 1..3 {
            let shared = masks[i].shared_ones(masks[j]).unwrap();
            assert!(shared > 0);
            assert!(shared < masks[i].count_ones(), "{} and {} are identical", masks[i].domain_id, masks[j].domain_id);
        }
    }
}

#[test]
fn zero_prune_fraction_keeps_everything() {
    let cfg = ModelConfig::mini();
    let (base, registry) = build_model(&cfg, 4).unwrap();
    let spec = PruneSpec { ft_epochs: 1, ..PruneSpec::new(0.0, 0.0).unwrap() };
    let d = &domains()[1];
    let m = create_domain_mask(&base, &registry, &cfg, d, spec, &short_finetune(), None).unwrap();
    let maskable: u64 = registry.maskable().map(|p| p.numel() as u64).sum();
    assert_eq!(m.count_ones(), maskable);
    assert_eq!(m.domain_id, "reverse");
}

#[test]
fn mask_creation_is_deterministic_and_leaves_base_alone() {
    let cfg = ModelConfig::mini();
    let (base, registry) = build_model(&cfg, 5).unwrap();
    let before = base.checksum();
    let spec = PruneSpec { ft_epochs: 1, ..PruneSpec::new(0.6, 0.6).unwrap() };
    let d = &domains()[0];
    let a = create_domain_mask(&base, &registry, &cfg, d, spec, &short_finetune(), None).unwrap();
    let b = create_domain_mask(&base, &registry, &cfg, d, spec, &short_finetune(), None).unwrap();
    assert_eq!(a, b);
    assert_eq!(base.checksum(), before);
}
