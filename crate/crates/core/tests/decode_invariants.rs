//! Decoding rules on 10,000 random model outputs each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setpred::decode::*;
use setpred::engine::Tensor;
use setpred::predictors::{Model, PredictorConfig, Variant};

const OUTPUTS: usize = 10_000;

fn softmax(rng: &mut ChaCha8Rng, n: usize, temperature: f32) -> Vec<f32> {
    let logits: Vec<f32> = (0..n)
        .map(|_| rng.gen_range(-3.0..3.0) * temperature)
        .collect();
    let mx = logits.iter().cloned().fold(f32::MIN, f32::max);
    let e: Vec<f32> = logits.iter().map(|l| (l - mx).exp()).collect();
    let total: f32 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

fn assert_distinct(labels: &[usize]) {
    let mut s = labels.to_vec();
    s.sort_unstable();
    s.dedup();
    assert_eq!(s.len(), labels.len(), "duplicate labels in {labels:?}");
}

#[test]
fn autoregressive_loop_never_repeats_and_always_stops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut done = 0;
    let mut saw_full = false;
    while done < OUTPUTS {
        let n = rng.gen_range(1..=12);
        let batch = rng.gen_range(1..=16);
        let sampling = if rng.gen_bool(0.5) {
            Sampling::Greedy
        } else {
            Sampling::Stochastic
        };
        // A strong negative eos bias makes full-length sets common.
        let eos_bias: f32 = rng.gen_range(-20.0..2.0);
        let mut step_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut draw = ChaCha8Rng::seed_from_u64(rng.gen());
        let out = decode_steps(batch, n, n + 1, sampling, &mut draw, |prev, masks| {
            assert_eq!(prev.len(), batch);
            assert_eq!(masks.len(), batch);
            Ok((0..batch)
                .map(|_| {
                    let mut row: Vec<f32> =
                        (0..=n).map(|_| step_rng.gen_range(-4.0..4.0)).collect();
                    row[n] += eos_bias;
                    row
                })
                .collect())
        })
        .unwrap();
        for d in &out {
            assert_distinct(&d.labels);
            assert!(d.labels.iter().all(|&l| l < n));
            assert!(!d.truncated);
            assert!(d.steps <= n + 1);
            assert_eq!(d.steps, d.labels.len() + 1);
            saw_full |= d.labels.len() == n;
        }
        done += batch;
    }
    assert!(saw_full);
}

#[test]
fn step_limit_truncates_without_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = decode_steps(3, 5, 2, Sampling::Greedy, &mut rng, |_, _| {
        Ok(vec![vec![5.0, 4.0, 3.0, 2.0, 1.0, -9.0]; 3])
    })
    .unwrap();
    for d in out {
        assert!(d.truncated);
        assert_eq!(d.labels, [0, 1]);
        assert_eq!(d.steps, 2);
    }
}

#[test]
fn untrained_models_decode_valid_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 7;
    for variant in [Variant::Lstm, Variant::Tf] {
        let mut cfg = PredictorConfig::new(variant);
        cfg.embedding_size = 8;
        cfg.n_att = 2;
        let model = Model::build(cfg, n, 3, &mut rng).unwrap();
        for sampling in [Sampling::Greedy, Sampling::Stochastic] {
            let mut rule = DecodeRule::new(DecodeKind::Autoregressive);
            rule.sampling = sampling;
            let data: Vec<f32> = (0..64 * 2 * 2 * 3)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let features = Tensor::new(vec![64, 2, 2, 3], data).unwrap();
            for d in autoregressive_decode(&model, &features, &rule, &mut rng).unwrap() {
                assert_distinct(&d.labels);
                assert!(d.steps <= n + 1);
                assert!(!d.truncated);
            }
        }
    }
}

/// Smallest k such that the k largest probabilities sum to more than 0.5.
fn minimal_prefix(probs: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    for k in 1..=order.len() {
        let mass: f64 = order[..k].iter().map(|&i| probs[i] as f64).sum();
        if mass > 0.5 {
            let mut out = order[..k].to_vec();
            out.sort_unstable();
            return out;
        }
    }
    let mut all = order;
    all.sort_unstable();
    all
}

#[test]
fn cumulative_decode_is_the_minimal_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..OUTPUTS {
        let n = rng.gen_range(1..=20);
        let temperature = rng.gen_range(0.0..2.0);
        let probs = softmax(&mut rng, n, temperature);
        let got = cumulative_decode(&probs);
        assert!(!got.is_empty());
        assert_eq!(got, minimal_prefix(&probs));
        // dropping the weakest chosen label must bring the mass to at most 0.5
        let mass: f64 = got.iter().map(|&i| probs[i] as f64).sum();
        let weakest = got
            .iter()
            .map(|&i| probs[i] as f64)
            .fold(f64::MAX, f64::min);
        assert!(mass > 0.5 || got.len() == n);
        assert!(mass - weakest <= 0.5);
    }
}

#[test]
fn topk_size_is_the_argmax_cardinality() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..OUTPUTS {
        let n = rng.gen_range(1..=20);
        let probs: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
        let classes = rng.gen_range(1..=n + 1);
        let card: Vec<f32> = (0..classes).map(|_| rng.gen()).collect();
        let k = card
            .iter()
            .enumerate()
            .fold(0, |best, (i, &c)| if c > card[best] { i } else { best });
        let got = topk_decode(&probs, &card);
        assert_eq!(got.len(), k);
        assert!(got.windows(2).all(|w| w[0] < w[1]));
        let weakest_in = got.iter().map(|&i| probs[i]).fold(f32::MAX, f32::min);
        for l in (0..n).filter(|l| !got.contains(l)) {
            assert!(probs[l] <= weakest_in);
        }
    }
}

#[test]
fn threshold_decode_splits_at_the_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut saw_empty = false;
    for _ in 0..OUTPUTS {
        let n = rng.gen_range(1..=20);
        let t = rng.gen_range(0.05..0.95);
        let probs: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
        let got = threshold_decode(&probs, t);
        for (l, &p) in probs.iter().enumerate() {
            assert_eq!(got.contains(&l), p >= t);
        }
        saw_empty |= got.is_empty();
    }
    assert!(saw_empty);
}
