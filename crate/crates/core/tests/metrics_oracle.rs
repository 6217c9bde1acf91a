//! F1 metrics and cardinality error against a brute-force implementation
//! over indicator matrices.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setpred::metrics::{cardinality_error, f1_report};

struct Oracle {
    o_f1: f64,
    c_f1: f64,
    i_f1: f64,
    card_mean: f64,
    card_ci: f64,
    counts: Vec<(u64, u64, u64)>,
}

fn indicator(set: &[usize], n: usize) -> Vec<bool> {
    (0..n).map(|l| set.contains(&l)).collect()
}

fn oracle(gt: &[Vec<usize>], pred: &[Vec<usize>], n: usize) -> Oracle {
    let g: Vec<Vec<bool>> = gt.iter().map(|s| indicator(s, n)).collect();
    let p: Vec<Vec<bool>> = pred.iter().map(|s| indicator(s, n)).collect();
    let m = gt.len();

    let mut counts = vec![(0u64, 0u64, 0u64); n];
    for i in 0..m {
        for l in 0..n {
            match (g[i][l], p[i][l]) {
                (true, true) => counts[l].0 += 1,
                (false, true) => counts[l].1 += 1,
                (true, false) => counts[l].2 += 1,
                (false, false) => {}
            }
        }
    }
    let tp: u64 = counts.iter().map(|c| c.0).sum();
    let fp: u64 = counts.iter().map(|c| c.1).sum();
    let fn_: u64 = counts.iter().map(|c| c.2).sum();
    let o_f1 = if tp + fp + fn_ == 0 {
        1.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    };

    let mut class_sum = 0.0;
    let mut classes = 0;
    for &(t, f, n_) in &counts {
        if t + f + n_ > 0 {
            class_sum += (2 * t) as f64 / (2 * t + f + n_) as f64;
            classes += 1;
        }
    }
    let c_f1 = if classes == 0 {
        1.0
    } else {
        class_sum / classes as f64
    };

    let mut image_sum = 0.0;
    for i in 0..m {
        let gk = g[i].iter().filter(|&&b| b).count();
        let pk = p[i].iter().filter(|&&b| b).count();
        let hits = (0..n).filter(|&l| g[i][l] && p[i][l]).count();
        image_sum += if gk == 0 && pk == 0 {
            1.0
        } else {
            (2 * hits) as f64 / (gk + pk) as f64
        };
    }
    let i_f1 = if m == 0 { 1.0 } else { image_sum / m as f64 };

    let errs: Vec<f64> = (0..m)
        .map(|i| (gt[i].len() as f64 - pred[i].len() as f64).abs())
        .collect();
    let card_mean = if m == 0 {
        0.0
    } else {
        errs.iter().sum::<f64>() / m as f64
    };
    let card_ci = if m < 2 {
        0.0
    } else {
        let var = errs.iter().map(|e| (e - card_mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        1.96 * var.sqrt() / (m as f64).sqrt()
    };

    Oracle {
        o_f1,
        c_f1,
        i_f1,
        card_mean,
        card_ci,
        counts,
    }
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, p_empty: f64) -> Vec<usize> {
    if rng.gen_bool(p_empty) {
        return Vec::new();
    }
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(rng);
    labels.truncate(rng.gen_range(1..=n));
    labels
}

#[test]
fn thousand_random_instances_match_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut saw_all_empty = false;
    for case in 0..1000 {
        let n = rng.gen_range(1..=10);
        let m = rng.gen_range(1..=50);
        // every 50th case is entirely empty; otherwise a random empty rate
        let p_empty = if case % 50 == 0 {
            1.0
        } else {
            rng.gen_range(0.0..0.5)
        };
        let gt: Vec<Vec<usize>> = (0..m).map(|_| random_set(&mut rng, n, p_empty)).collect();
        let pred: Vec<Vec<usize>> = (0..m).map(|_| random_set(&mut rng, n, p_empty)).collect();
        saw_all_empty |= gt.iter().chain(&pred).all(Vec::is_empty);

        let got = f1_report(&gt, &pred, n).unwrap();
        let want = oracle(&gt, &pred, n);
        assert_eq!(got.o_f1, want.o_f1, "case {case} O-F1");
        assert_eq!(got.c_f1, want.c_f1, "case {case} C-F1");
        assert_eq!(got.i_f1, want.i_f1, "case {case} I-F1");
        assert_eq!(
            got.cardinality_error, want.card_mean,
            "case {case} cardinality error"
        );
        assert_eq!(
            got.cardinality_ci, want.card_ci,
            "case {case} cardinality CI"
        );
        let counts: Vec<_> = got.per_class.iter().map(|c| (c.tp, c.fp, c.fn_)).collect();
        assert_eq!(counts, want.counts, "case {case} per-class counts");
        assert_eq!(
            cardinality_error(&gt, &pred).unwrap(),
            (want.card_mean, want.card_ci)
        );
    }
    assert!(saw_all_empty);
}

#[test]
fn label_order_inside_a_set_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.gen_range(1..=10);
        let gt: Vec<Vec<usize>> = (0..20).map(|_| random_set(&mut rng, n, 0.2)).collect();
        let pred: Vec<Vec<usize>> = (0..20).map(|_| random_set(&mut rng, n, 0.2)).collect();
        let mut shuffled = pred.clone();
        for s in &mut shuffled {
            s.shuffle(&mut rng);
        }
        assert_eq!(
            f1_report(&gt, &pred, n).unwrap(),
            f1_report(&gt, &shuffled, n).unwrap()
        );
    }
}

#[test]
fn hand_worked_example() {
    // image 1: gt {0,1} pred {0}; image 2: gt {} pred {}; image 3: gt {2} pred {1}
    let gt = vec![vec![0, 1], vec![], vec![2]];
    let pred = vec![vec![0], vec![], vec![1]];
    let r = f1_report(&gt, &pred, 3).unwrap();
    // TP 1, FP 1, FN 2
    assert_eq!(r.o_f1, 2.0 / 5.0);
    // class 0: 1, class 1: 0, class 2: 0
    assert_eq!(r.c_f1, 1.0 / 3.0);
    // images: 2/3, 1, 0
    assert_eq!(r.i_f1, (2.0 / 3.0 + 1.0) / 3.0);
    assert_eq!(r.cardinality_error, 1.0 / 3.0);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(f1_report(&[vec![0]], &[], 1).is_err());
    assert!(f1_report(&[vec![3]], &[vec![]], 3).is_err());
}
