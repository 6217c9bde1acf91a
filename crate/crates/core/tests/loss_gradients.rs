//! Every loss against a closed-form f64 value and central differences.

mod common;

use common::{assert_gradcheck, random_tensor, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use setpred::engine::{Tape, Tensor, Var};
use setpred::losses::*;

const POINTS: u64 = 20;

fn binary_target(rng: &mut ChaCha8Rng, b: usize, n: usize, nonempty: bool) -> Tensor {
    let mut data: Vec<f32> = (0..b * n).map(|_| rng.gen_bool(0.4) as u8 as f32).collect();
    if nonempty {
        for row in data.chunks_mut(n) {
            row[rng.gen_range(0..n)] = 1.0;
        }
    }
    Tensor::new(vec![b, n], data).unwrap()
}

fn value(f: impl Fn(&mut Tape, Var) -> Var, x: &Tensor) -> f64 {
    let mut t = Tape::new();
    let v = t.input(x.clone());
    let l = f(&mut t, v);
    t.value(l).item().unwrap() as f64
}

fn assert_close(name: &str, got: f64, want: f64) {
    assert!(
        (got - want).abs() <= 1e-4 * want.abs().max(1.0),
        "{name}: {got} vs oracle {want}"
    );
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

#[test]
fn bce_matches_oracle_and_differences() {
    for seed in 0..POINTS {
        let mut r = rng(seed);
        let (b, n) = (r.gen_range(1..4), r.gen_range(2..7));
        let p = random_tensor(&mut r, &[b, n], 0.05, 0.95);
        let s = binary_target(&mut r, b, n, false);
        let want = f64s(&p)
            .iter()
            .zip(f64s(&s))
            .map(|(p, s)| -(s * p.ln() + (1.0 - s) * (1.0 - p).ln()))
            .sum::<f64>()
            / (b * n) as f64;
        assert_close("bce", value(|t, v| bce(t, v, &s).unwrap(), &p), want);
        assert_gradcheck("bce", &[p], |t, v| Ok(bce(t, v[0], &s).unwrap()));
    }
}

#[test]
fn siou_matches_oracle_and_differences() {
    for seed in 0..POINTS {
        let mut r = rng(100 + seed);
        let (b, n) = (r.gen_range(1..4), r.gen_range(2..7));
        let p = random_tensor(&mut r, &[b, n], 0.05, 0.95);
        let s = binary_target(&mut r, b, n, true);
        let (pd, sd) = (f64s(&p), f64s(&s));
        let mut want = 0.0;
        for i in 0..b {
            let row = i * n..(i + 1) * n;
            let inter: f64 = pd[row.clone()]
                .iter()
                .zip(&sd[row.clone()])
                .map(|(p, s)| p * s)
                .sum();
            let union = pd[row.clone()].iter().sum::<f64>() + sd[row].iter().sum::<f64>() - inter;
            want += 1.0 - inter / (union + SIOU_EPS as f64);
        }
        want /= b as f64;
        assert_close("siou", value(|t, v| siou(t, v, &s).unwrap(), &p), want);
        assert_gradcheck("siou", &[p], |t, v| Ok(siou(t, v[0], &s).unwrap()));
    }
}

#[test]
fn td_matches_oracle_and_differences() {
    for seed in 0..POINTS {
        let mut r = rng(200 + seed);
        let (b, n) = (r.gen_range(1..4), r.gen_range(2..7));
        let p = random_tensor(&mut r, &[b, n], 0.05, 0.95);
        let s = binary_target(&mut r, b, n, true);
        let (pd, sd) = (f64s(&p), f64s(&s));
        let mut want = 0.0;
        for i in 0..b {
            let k: f64 = sd[i * n..(i + 1) * n].iter().sum();
            for j in i * n..(i + 1) * n {
                want -= sd[j] / k * pd[j].ln();
            }
        }
        want /= b as f64;
        assert_close("td", value(|t, v| td(t, v, &s).unwrap(), &p), want);
        assert_gradcheck("td", &[p], |t, v| Ok(td(t, v[0], &s).unwrap()));
    }
}

#[test]
fn ce_steps_matches_oracle_and_differences() {
    for seed in 0..POINTS {
        let mut r = rng(300 + seed);
        let (b, steps, v) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(2..6));
        let logits = random_tensor(&mut r, &[b, steps, v], -2.0, 2.0);
        let tokens: Vec<Vec<usize>> = (0..b)
            .map(|_| {
                (0..r.gen_range(1..=steps))
                    .map(|_| r.gen_range(0..v))
                    .collect()
            })
            .collect();
        let ld = f64s(&logits);
        let mut want = 0.0;
        for (i, seq) in tokens.iter().enumerate() {
            let mut per = 0.0;
            for (s, &tok) in seq.iter().enumerate() {
                let row = &ld[(i * steps + s) * v..(i * steps + s + 1) * v];
                let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                per += lse - row[tok];
            }
            want += per / seq.len() as f64;
        }
        want /= b as f64;
        assert_close(
            "ce_steps",
            value(|t, x| ce_steps(t, x, &tokens).unwrap(), &logits),
            want,
        );
        assert_gradcheck("ce_steps", &[logits], |t, x| {
            Ok(ce_steps(t, x[0], &tokens).unwrap())
        });
    }
}

#[test]
fn pooled_bce_matches_oracle_and_differences() {
    for seed in 0..POINTS {
        let mut r = rng(400 + seed);
        let (b, steps, n) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(2..6));
        // Per label, steps get well separated values so that the maximum is
        // not within the difference step of a tie.
        let mut data = vec![0.0f32; b * steps * n];
        for i in 0..b {
            for j in 0..n {
                let mut slots: Vec<usize> = (0..steps).collect();
                slots.shuffle(&mut r);
                for (s, slot) in slots.into_iter().enumerate() {
                    let base = 0.1 + 0.8 * (slot as f32 + 0.5) / steps as f32;
                    data[(i * steps + s) * n + j] = base + r.gen_range(-0.02..0.02);
                }
            }
        }
        let x = Tensor::new(vec![b, steps, n], data).unwrap();
        let lengths: Vec<usize> = (0..b).map(|_| r.gen_range(1..=steps)).collect();
        let s = binary_target(&mut r, b, n, false);
        let (xd, sd) = (f64s(&x), f64s(&s));
        let mut want = 0.0;
        for i in 0..b {
            for j in 0..n {
                let m = (0..lengths[i])
                    .map(|st| xd[(i * steps + st) * n + j])
                    .fold(f64::MIN, f64::max);
                let y = sd[i * n + j];
                want -= y * m.ln() + (1.0 - y) * (1.0 - m).ln();
            }
        }
        want /= (b * n) as f64;
        assert_close(
            "pooled_bce",
            value(|t, v| pooled_bce(t, v, &lengths, &s).unwrap(), &x),
            want,
        );
        assert_gradcheck("pooled_bce", &[x], |t, v| {
            Ok(pooled_bce(t, v[0], &lengths, &s).unwrap())
        });
    }
}

#[test]
fn eos_bce_matches_oracle_and_differences() {
    for seed in 0..POINTS {
        let mut r = rng(500 + seed);
        let (b, steps) = (r.gen_range(1..4), r.gen_range(1..6));
        let p = random_tensor(&mut r, &[b, steps], 0.05, 0.95);
        let ks: Vec<usize> = (0..b).map(|_| r.gen_range(0..steps)).collect();
        let pd = f64s(&p);
        let mut want = 0.0;
        for (i, &k) in ks.iter().enumerate() {
            let mut per = 0.0;
            for s in 0..=k {
                let q = pd[i * steps + s];
                per -= if s == k { q.ln() } else { (1.0 - q).ln() };
            }
            want += per / (k + 1) as f64;
        }
        want /= b as f64;
        assert_close(
            "eos_bce",
            value(|t, v| eos_bce(t, v, &ks).unwrap(), &p),
            want,
        );
        assert_gradcheck("eos_bce", &[p], |t, v| Ok(eos_bce(t, v[0], &ks).unwrap()));
    }
}

#[test]
fn cardinality_ce_matches_oracle_and_differences() {
    for seed in 0..POINTS {
        let mut r = rng(600 + seed);
        let (b, c) = (r.gen_range(1..4), r.gen_range(2..7));
        let p = random_tensor(&mut r, &[b, c], 0.05, 1.0);
        let ks: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
        let pd = f64s(&p);
        let want = -ks
            .iter()
            .enumerate()
            .map(|(i, &k)| pd[i * c + k].ln())
            .sum::<f64>()
            / b as f64;
        assert_close(
            "cardinality_ce",
            value(|t, v| cardinality_ce(t, v, &ks).unwrap(), &p),
            want,
        );
        assert_gradcheck("cardinality_ce", &[p], |t, v| {
            Ok(cardinality_ce(t, v[0], &ks).unwrap())
        });
    }
}

#[test]
fn cardinality_dc_matches_oracle_and_differences() {
    for seed in 0..POINTS {
        let mut r = rng(700 + seed);
        let (b, c) = (r.gen_range(1..4), r.gen_range(2..7));
        let alpha = random_tensor(&mut r, &[b, c], 0.5, 3.0);
        let ks: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
        let ad = f64s(&alpha);
        let want = ks
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let row = &ad[i * c..(i + 1) * c];
                row.iter().sum::<f64>().ln() - row[k].ln()
            })
            .sum::<f64>()
            / b as f64;
        assert_close(
            "cardinality_dc",
            value(|t, v| cardinality_dc(t, v, &ks).unwrap(), &alpha),
            want,
        );
        assert_gradcheck("cardinality_dc", &[alpha], |t, v| {
            Ok(cardinality_dc(t, v[0], &ks).unwrap())
        });
    }
}

#[test]
fn weighted_total_matches_hand_sum() {
    let mut r = rng(800);
    for _ in 0..POINTS {
        let (lc, le) = (r.gen_range(0.0..5.0), r.gen_range(0.0..5.0));
        let mut spec = LossSpec::new(PrimaryLoss::PooledBce);
        spec.cardinality = CardinalityLoss::CategoricalCe;
        spec.lambda_c = lc;
        spec.lambda_eos = le;
        let parts = [
            r.gen_range(0.0..2.0f32),
            r.gen_range(0.0..2.0),
            r.gen_range(0.0..2.0),
        ];
        let x = Tensor::vector(parts.to_vec());
        let build = |t: &mut Tape, v: Var| {
            let mut pick = |i| {
                let n = t.narrow(v, i, 1).unwrap();
                t.sum(n).unwrap()
            };
            let c = LossComponents {
                primary: Some(pick(0)),
                cardinality: Some(pick(1)),
                eos: Some(pick(2)),
            };
            total_loss(t, &spec, c).unwrap()
        };
        let want = parts[0] as f64 + lc * parts[1] as f64 + le * parts[2] as f64;
        assert_close("total_loss", value(build, &x), want);
        assert_gradcheck("total_loss", &[x], |t, v| {
            let total = build(t, v[0]);
            Ok(total)
        });
    }
}
