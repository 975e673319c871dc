use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use emorl::data::{generate_synthetic, SyntheticConfig, Utterance};
use emorl::eval::truncation_baseline_eval;
use emorl::features::FeatureSeq;
use emorl::heads::{Emotion, SelectionMode};
use emorl::numerics::ParamSet;
use emorl::trainer::{
    accumulate_gradients, decode_checkpoint, encode_checkpoint, load_checkpoint, pretrain, rollout,
    save_checkpoint, train, LossTerms, PretrainConfig, TrainConfig,
};

/// Angry utterances sit at +1 on the first dimension, neutral ones at -1.
fn separable_corpus(seed: u64) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    (0..200)
        .map(|i| {
            let label = if i % 2 == 0 { Emotion::Angry } else { Emotion::Neutral };
            let sign = if label == Emotion::Angry { 1.0 } else { -1.0 };
            let len = rng.random_range(20..40);
            let data = (0..len * 4)
                .map(|k| noise.sample(&mut rng) + if k % 4 == 0 { sign } else { 0.0 })
                .collect();
            Utterance {
                id: format!("sep{i:03}"),
                speaker: format!("spk{}", i % 4),
                label,
                features: FeatureSeq::from_flat(4, data).unwrap(),
            }
        })
        .collect()
}

fn small_synthetic(seed: u64) -> Vec<Utterance> {
    generate_synthetic(&SyntheticConfig {
        utterances: 100,
        speakers: 4,
        min_frames: 40,
        max_frames: 80,
        dim: 6,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn pretraining_fits_a_separable_corpus() {
    let mut accs = Vec::new();
    let mut losses = Vec::new();
    for seed in 0..5 {
        let corpus = separable_corpus(100 + seed);
        let cfg = TrainConfig {
            hidden: 8,
            seed,
            pretrain: PretrainConfig {
                epochs: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let (ck, report) = pretrain(&corpus, &cfg).unwrap();
        assert!(report.train_loss.len() <= 20);
        let (_, m) = truncation_baseline_eval(&ck, &corpus, &[1.0]).unwrap().remove(0);
        accs.push(m.accuracy);
        losses.push(report.train_loss);
    }
    let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(mean_acc >= 0.95, "training accuracies {accs:?}");

    let epochs = losses.iter().map(Vec::len).min().unwrap();
    let first = median(losses.iter().map(|l| l[0]).collect());
    for k in 1..epochs {
        let at_k = median(losses.iter().map(|l| l[k]).collect());
        assert!(at_k <= first, "median loss at epoch {} = {at_k} > {first}", k + 1);
    }
}

#[test]
fn episode_reward_rises_over_training() {
    let corpus = small_synthetic(21);
    let cfg = TrainConfig {
        hidden: 16,
        decision_interval: 10,
        freeze_episodes: 500,
        seed: 21,
        ..Default::default()
    };
    let (mut ck, _) = pretrain(&corpus, &cfg).unwrap();
    let logs = train(&mut ck, &corpus, 4000).unwrap();
    let window = |w: &[emorl::trainer::EpisodeLog]| w.iter().map(|l| l.reward).sum::<f64>() / w.len() as f64;
    let first = window(&logs[..500]);
    let last = window(&logs[logs.len() - 500..]);
    assert!(last > first, "first window {first}, last window {last}");
}

#[test]
fn total_gradient_is_the_sum_of_its_parts() {
    let corpus = small_synthetic(3);
    let cfg = TrainConfig {
        hidden: 6,
        decision_interval: 7,
        seed: 3,
        ..Default::default()
    };
    let (ck, _) = pretrain(&corpus, &cfg).unwrap();
    let feats = ck.normalize(&corpus[0].features).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ro = rollout(&ck.model, &feats, corpus[0].label, &cfg, SelectionMode::Stochastic, &mut rng).unwrap();
    let n = ro.trace.steps.len();
    let adv: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 - 0.5).collect();
    let rets: Vec<f64> = (0..n).map(|i| 1.0 - 0.1 * i as f64).collect();

    let grads_for = |terms: LossTerms| {
        let mut m = ck.model.clone();
        m.zero_grad();
        accumulate_gradients(&mut m, &ro, &adv, &rets, terms).unwrap();
        m.tensors().iter().flat_map(|t| t.grad().to_vec()).collect::<Vec<f64>>()
    };
    let only = |actor, classifier, baseline| LossTerms {
        actor,
        classifier,
        baseline,
    };
    let total = grads_for(LossTerms::ALL);
    let parts = [
        grads_for(only(true, false, false)),
        grads_for(only(false, true, false)),
        grads_for(only(false, false, true)),
    ];
    for (i, g) in total.iter().enumerate() {
        let sum: f64 = parts.iter().map(|p| p[i]).sum();
        assert!((g - sum).abs() <= 1e-12 * (1.0 + g.abs()), "component {i}: {g} vs {sum}");
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let corpus = small_synthetic(5);
    let cfg = TrainConfig {
        hidden: 6,
        decision_interval: 8,
        freeze_episodes: 40,
        seed: 5,
        ..Default::default()
    };
    let (base, _) = pretrain(&corpus, &cfg).unwrap();

    let mut straight = base.clone();
    let straight_logs = train(&mut straight, &corpus, 100).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.ckpt");
    let mut first = base.clone();
    let mut logs = train(&mut first, &corpus, 50).unwrap();
    save_checkpoint(&path, &first).unwrap();
    let mut second = load_checkpoint(&path).unwrap();
    logs.extend(train(&mut second, &corpus, 100).unwrap());

    assert_eq!(encode_checkpoint(&second).unwrap(), encode_checkpoint(&straight).unwrap());
    assert_eq!(logs.len(), straight_logs.len());
    for (a, b) in logs.iter().zip(&straight_logs) {
        assert_eq!(a.to_string(), b.to_string());
    }
}

#[test]
fn damaged_checkpoints_fail_to_load() {
    let corpus = small_synthetic(6);
    let cfg = TrainConfig {
        hidden: 4,
        seed: 6,
        ..Default::default()
    };
    let (ck, _) = pretrain(&corpus, &cfg).unwrap();
    let bytes = encode_checkpoint(&ck).unwrap();
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 99;
    let err = decode_checkpoint(&wrong_version).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
    let mut wrong_magic = bytes;
    wrong_magic[0] = b'X';
    assert!(decode_checkpoint(&wrong_magic).is_err());
}
