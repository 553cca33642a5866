mod common;

use ahem_core::data::sample_minibatch;
use ahem_core::imaging::{apply_augmentation, sample_augmentation, PolicyPreset};
use ahem_core::rng::{stream, tag};
use ahem_core::trainer::{train_iteration, IterationContext};
use ahem_core::{AugmentationPolicy, Image, ModelParams, TrainConfig, TrainMode};
use common::*;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

/// Replays one selection-mode iteration from the seed: input flips, input
/// dropout, exclusion softmax and identity/image draws, candidate
/// augmentation, hard dropout, argmax selection and both losses.
fn replay(params: &ModelParams, corpus: &ahem_core::Corpus, cfg: &TrainConfig, labels_refs: &[ahem_core::data::ImageRef], iteration: u64) -> (f64, f64, Vec<usize>) {
    let eps = cfg.smoothing;
    let d = params.embedding_dim();
    let n_h = cfg.n_h;
    let mut rng = stream(cfg.seed, &[tag::ITERATION, iteration]);

    let inputs: Vec<Image> = labels_refs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut s = stream(cfg.seed, &[tag::INPUT_AUG, iteration, i as u64]);
            let p = sample_augmentation(&AugmentationPolicy::FLIP_ONLY, &mut s);
            apply_augmentation(corpus.image(*r), &p).unwrap()
        })
        .collect();
    let labels: Vec<usize> = labels_refs.iter().map(|r| r.class).collect();
    let input_mask = dropout_mask(&mut rng, inputs.len() * d, cfg.dropout);
    let input_logits = batch_logits(params, &inputs.iter().collect::<Vec<_>>(), Some(&input_mask));
    let l_batch = smoothed_ce(&input_logits, &labels, eps);

    let mut sources = Vec::new();
    for (a, &y) in labels.iter().enumerate() {
        let row = &input_logits[a];
        let weights: Vec<f64> = row.iter().enumerate().map(|(k, v)| if k == y { 0.0 } else { v.exp() }).collect();
        let sum: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / sum).collect();
        let index = WeightedIndex::new(&probs).unwrap();
        let classes: Vec<usize> = (0..n_h).map(|_| index.sample(&mut rng)).collect();
        for c in classes {
            let count = corpus.images_of(c).unwrap().len();
            sources.push((c, rng.gen_range(0..count)));
        }
    }
    let policy = cfg.policy.policy();
    let hard: Vec<Image> = sources
        .iter()
        .enumerate()
        .map(|(j, &(c, i))| {
            let (a, k) = (j / n_h, j % n_h);
            let mut s = stream(cfg.seed, &[tag::CANDIDATE_AUG, iteration, a as u64, k as u64]);
            let p = if k == 0 { sample_augmentation(&AugmentationPolicy::FLIP_ONLY, &mut s) } else { sample_augmentation(&policy, &mut s) };
            apply_augmentation(&corpus.images_of(c).unwrap()[i], &p).unwrap()
        })
        .collect();
    let hard_mask = dropout_mask(&mut rng, hard.len() * d, cfg.dropout);
    let hard_logits = batch_logits(params, &hard.iter().collect::<Vec<_>>(), Some(&hard_mask));

    let mut picks = Vec::new();
    let mut rows = Vec::new();
    let mut sel_labels = Vec::new();
    for (a, &y) in labels.iter().enumerate() {
        let mut best = 0;
        for k in 1..n_h {
            if hard_logits[a * n_h + k][y] > hard_logits[a * n_h + best][y] {
                best = k;
            }
        }
        picks.push(best);
        rows.push(hard_logits[a * n_h + best].clone());
        sel_labels.push(sources[a * n_h + best].0);
    }
    let l_aug = smoothed_ce(&rows, &sel_labels, eps);
    (l_batch, l_aug, picks)
}

#[test]
fn one_iteration_matches_replay() {
    let cfg = TrainConfig {
        n_bs: 4,
        n_h: 4,
        mode: TrainMode::AugMiningSelect,
        policy: PolicyPreset::Moderate,
        height: 32,
        width: 24,
        embedding_dim: 10,
        seed: 21,
        ..TrainConfig::default()
    };
    let corpus = toy_corpus(8, 3, cfg.height, cfg.width, 2);
    let mut params = ModelParams::new(cfg.arch(), (cfg.height, cfg.width), 8, cfg.seed).unwrap();
    let batch = sample_minibatch(&corpus, 4, &mut stream(9, &[]));
    let (l_batch, l_aug, picks) = replay(&params, &corpus, &cfg, &batch.refs, 6);
    let ctx = IterationContext { iteration: 6, epoch: 0, lr: 0.01, parallel: false };
    let record = train_iteration(&mut params, &corpus, &batch, &cfg, ctx).unwrap();
    assert_eq!(record.selected, picks);
    assert!((record.l_batch as f64 - l_batch).abs() < 1e-5);
    assert!((record.l_aug.unwrap() as f64 - l_aug).abs() < 1e-5);
    assert!((record.l_total as f64 - (l_batch + l_aug) / 2.0).abs() < 1e-5, "{} vs {}", record.l_total, (l_batch + l_aug) / 2.0);
}

#[test]
fn sgd_step_applies_iteration_gradient() {
    use ahem_core::trainer::iteration_gradients;
    let cfg = TrainConfig { n_bs: 3, n_h: 2, height: 32, width: 24, embedding_dim: 6, seed: 4, ..TrainConfig::default() };
    let corpus = toy_corpus(5, 2, 32, 24, 3);
    let batch = sample_minibatch(&corpus, 3, &mut stream(1, &[]));
    let ctx = IterationContext { iteration: 0, epoch: 0, lr: 0.01, parallel: false };
    let mut grads_only = ModelParams::new(cfg.arch(), (32, 24), 5, 1).unwrap();
    let mut stepped = grads_only.clone();
    iteration_gradients(&mut grads_only, &corpus, &batch, &cfg, ctx).unwrap();
    train_iteration(&mut stepped, &corpus, &batch, &cfg, ctx).unwrap();
    // momentum starts at zero: p' = p - lr * (g + wd * p)
    for (before, after) in grads_only.blocks().iter().zip(stepped.blocks()) {
        for ((p, g), q) in before.values.iter().zip(&before.grads).zip(&after.values) {
            let want = p - 0.01f32 * (g + 0.0005f32 * p);
            assert_eq!(*q, want);
        }
    }
}
