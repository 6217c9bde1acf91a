use serde::{Deserialize, Serialize};

use crate::engine::{ParamGroup, ParameterSet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-group learning rates and decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr_head: f64,
    pub lr_adapter: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    fn lr(&self, group: ParamGroup) -> f32 {
        match group {
            ParamGroup::Head => self.lr_head as f32,
            ParamGroup::Adapter => self.lr_adapter as f32,
        }
    }
}

/// First and second moments, one buffer per parameter in set order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Shapes agree with `params`.
    pub fn matches(&self, params: &ParameterSet) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.value.numel() && v.len() == p.value.numel())
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`,
/// followed by decoupled weight decay `p -= lr * wd * p`.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState, hyper: &AdamHyper) {
    assert!(
        state.matches(params),
        "optimizer state does not match the parameters"
    );
    state.step += 1;
    let t = state.step as i32;
    let c1 = (1.0 - ADAM_BETA1.powi(t)) as f32;
    let c2 = (1.0 - ADAM_BETA2.powi(t)) as f32;
    let (b1, b2, eps) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32, ADAM_EPS as f32);
    let wd = hyper.weight_decay as f32;
    for (i, p) in params.iter_mut().enumerate() {
        let lr = hyper.lr(p.group);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(&p.grad).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    fn single(group: ParamGroup, value: f32, grad: f32) -> ParameterSet {
        let mut p = ParameterSet::new();
        let id = p.insert("w", group, Tensor::vector(vec![value])).unwrap();
        p.get_mut(id).grad[0] = grad;
        p
    }

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper {
            lr_head: lr,
            lr_adapter: lr * 0.1,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = single(ParamGroup::Head, 0.7, 0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, &hyper(0.1));
        assert_eq!(p.by_name("w").unwrap().value.data(), [0.7]);
    }

    #[test]
    fn constant_gradient_steps_by_lr_times_sign() {
        for g in [0.3f32, -2.0] {
            let mut p = single(ParamGroup::Head, 0.0, g);
            let mut s = AdamState::new(&p);
            let mut last = 0.0;
            for _ in 0..200 {
                let before = p.by_name("w").unwrap().value.data()[0];
                adam_step(&mut p, &mut s, &hyper(0.01));
                last = p.by_name("w").unwrap().value.data()[0] - before;
            }
            assert!((last + 0.01 * g.signum()).abs() < 1e-6, "{last}");
        }
    }

    #[test]
    fn adapter_group_uses_scaled_rate() {
        let mut head = single(ParamGroup::Head, 0.0, 1.0);
        let mut adapter = single(ParamGroup::Adapter, 0.0, 1.0);
        let mut sh = AdamState::new(&head);
        let mut sa = AdamState::new(&adapter);
        adam_step(&mut head, &mut sh, &hyper(0.01));
        adam_step(&mut adapter, &mut sa, &hyper(0.01));
        let h = head.by_name("w").unwrap().value.data()[0];
        let a = adapter.by_name("w").unwrap().value.data()[0];
        assert!((h + 0.01).abs() < 1e-6);
        assert!((a + 0.001).abs() < 1e-6);
    }

    #[test]
    fn zero_rate_freezes_exactly() {
        let mut p = single(ParamGroup::Adapter, 0.123, 5.0);
        let mut s = AdamState::new(&p);
        let h = AdamHyper {
            lr_head: 0.1,
            lr_adapter: 0.0,
            weight_decay: 0.01,
        };
        adam_step(&mut p, &mut s, &h);
        assert_eq!(
            p.by_name("w").unwrap().value.data()[0].to_bits(),
            0.123f32.to_bits()
        );
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = single(ParamGroup::Head, 2.0, 0.0);
        let mut s = AdamState::new(&p);
        let h = AdamHyper {
            lr_head: 0.1,
            lr_adapter: 0.1,
            weight_decay: 0.5,
        };
        adam_step(&mut p, &mut s, &h);
        assert!((p.by_name("w").unwrap().value.data()[0] - 1.9).abs() < 1e-6);
    }
}
