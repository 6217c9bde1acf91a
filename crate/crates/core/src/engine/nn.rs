//! Layers built from tape primitives.

use super::{EngineError, Tape, Var};

/// Mean over the spatial grid: `[.., w, h, d] -> [.., d]`.
pub fn global_avg_pool(tape: &mut Tape, r: Var) -> Result<Var, EngineError> {
    let shape = tape.shape(r).to_vec();
    if shape.len() < 3 {
        return Err(EngineError::Shape(format!(
            "global_avg_pool expects [.., w, h, d], got {shape:?}"
        )));
    }
    let n = shape.len();
    let mut merged = shape[..n - 3].to_vec();
    merged.push(shape[n - 3] * shape[n - 2]);
    merged.push(shape[n - 1]);
    let cells_axis = merged.len() - 2;
    let flat = tape.reshape(r, &merged)?;
    tape.mean_axis(flat, cells_axis)
}

/// Per-label maximum across time: `[T, N] -> [N]` (or `[B, T, N] -> [B, N]`).
pub fn max_over_steps(tape: &mut Tape, steps: Var) -> Result<Var, EngineError> {
    let shape = tape.shape(steps).to_vec();
    match shape.len() {
        2 => tape.max_axis(steps, 0),
        3 => tape.max_axis(steps, 1),
        _ => Err(EngineError::Shape(format!(
            "max_over_steps expects [T, N] or [B, T, N], got {shape:?}"
        ))),
    }
}

/// `x W + b` with `W: [in, out]`, `b: [out]`, over any leading axes.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, EngineError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Weights of one LSTM cell, gate blocks ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[input, 4 * hidden]`
    pub w_x: Var,
    /// `[hidden, 4 * hidden]`
    pub w_h: Var,
    /// `[4 * hidden]`
    pub bias: Var,
}

/// One step of a standard LSTM cell on `[batch, ..]` rows; returns `(h', c')`.
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    w: &LstmWeights,
) -> Result<(Var, Var), EngineError> {
    let hidden = *tape.shape(c).last().unwrap_or(&0);
    let wh_shape = tape.shape(w.w_h).to_vec();
    if wh_shape != [hidden, 4 * hidden] || tape.shape(h) != tape.shape(c) {
        return Err(EngineError::Shape(format!(
            "lstm_step: hidden {hidden} inconsistent with w_h {wh_shape:?}"
        )));
    }
    let xs = tape.matmul(x, w.w_x)?;
    let hs = tape.matmul(h, w.w_h)?;
    let pre = tape.add(xs, hs)?;
    let gates = tape.add(pre, w.bias)?;
    let i = tape.narrow(gates, 0, hidden)?;
    let f = tape.narrow(gates, hidden, hidden)?;
    let g = tape.narrow(gates, 2 * hidden, hidden)?;
    let o = tape.narrow(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Additive (Bahdanau) attention of a query over a grid of cells.
#[derive(Clone, Copy, Debug)]
pub struct AdditiveAttention {
    /// `[hidden, att]`
    pub w_query: Var,
    /// `[feat, att]`
    pub w_key: Var,
    /// `[att, 1]`
    pub v: Var,
}

impl AdditiveAttention {
    /// Projects grid features `[B, C, feat]` once per sequence.
    pub fn keys(&self, tape: &mut Tape, cells: Var) -> Result<Var, EngineError> {
        tape.matmul(cells, self.w_key)
    }

    /// Context vector `[B, feat]` and attention weights `[B, C]`.
    pub fn attend(
        &self,
        tape: &mut Tape,
        query: Var,
        keys: Var,
        cells: Var,
    ) -> Result<(Var, Var), EngineError> {
        let ks = tape.shape(keys).to_vec();
        let (b, c, att) = (ks[0], ks[1], ks[2]);
        let q = tape.matmul(query, self.w_query)?;
        let q = tape.reshape(q, &[b, 1, att])?;
        let e = tape.add(keys, q)?;
        let e = tape.tanh(e)?;
        let scores = tape.matmul(e, self.v)?;
        let scores = tape.reshape(scores, &[b, c])?;
        let alpha = tape.softmax(scores, 1)?;
        let a3 = tape.reshape(alpha, &[b, 1, c])?;
        let ctx = tape.matmul(a3, cells)?;
        let feat = *tape.shape(cells).last().unwrap();
        let ctx = tape.reshape(ctx, &[b, feat])?;
        Ok((ctx, alpha))
    }
}

/// Query/key/value/output projections, each `[dim, dim]` with a `[dim]` bias.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjections {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var, EngineError> {
    let s = tape.shape(x).to_vec();
    let (b, t, dim) = (s[0], s[1], s[2]);
    let dh = dim / heads;
    let x = tape.reshape(x, &[b, t, heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, t, dh])
}

/// Scaled dot-product attention with `heads` heads.
///
/// `query: [B, Tq, dim]`, `keys`/`values: [B, Tk, dim]`. `mask`, when given,
/// is added to the `[Tq, Tk]` scores before the softmax (use
/// [`MASK_SENTINEL`](super::MASK_SENTINEL) for blocked positions).
pub fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    values: Var,
    heads: usize,
    proj: &AttentionProjections,
    mask: Option<Var>,
) -> Result<Var, EngineError> {
    let qs = tape.shape(query).to_vec();
    if qs.len() != 3 {
        return Err(EngineError::Shape(format!(
            "attention query must be [B, T, dim], got {qs:?}"
        )));
    }
    let (b, tq, dim) = (qs[0], qs[1], qs[2]);
    if heads == 0 || dim % heads != 0 {
        return Err(EngineError::Invalid(format!(
            "model dimension {dim} not divisible by {heads} heads"
        )));
    }
    let dh = dim / heads;
    let q = linear(tape, query, proj.w_q, proj.b_q)?;
    let k = linear(tape, keys, proj.w_k, proj.b_k)?;
    let v = linear(tape, values, proj.w_v, proj.b_v)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.reshape(ctx, &[b, heads, tq, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, tq, dim])?;
    linear(tape, ctx, proj.w_o, proj.b_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    #[test]
    fn pooling_averages_each_channel() {
        let mut t = Tape::new();
        // 2x2 grid, one channel holding 1, 3, 5, 7.
        let r = t.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let p = global_avg_pool(&mut t, r).unwrap();
        assert_eq!(t.shape(p), [1]);
        assert_eq!(t.data(p), [4.0]);
    }

    #[test]
    fn max_over_steps_picks_per_label_maximum() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 2, vec![0.1, 0.9, 0.8, 0.2]).unwrap());
        let m = max_over_steps(&mut t, x).unwrap();
        assert_eq!(t.data(m), [0.8, 0.9]);
    }

    #[test]
    fn zero_lstm_cell_stays_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 3], 0.7));
        let h = t.constant(Tensor::zeros(&[1, 2]));
        let c = t.constant(Tensor::zeros(&[1, 2]));
        let w = LstmWeights {
            w_x: t.constant(Tensor::zeros(&[3, 8])),
            w_h: t.constant(Tensor::zeros(&[2, 8])),
            bias: t.constant(Tensor::zeros(&[8])),
        };
        let (h2, c2) = lstm_step(&mut t, x, h, c, &w).unwrap();
        assert!(t.data(h2).iter().all(|v| v.abs() < 1e-7));
        assert!(t.data(c2).iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell_state() {
        let mut t = Tape::new();
        let hidden = 2;
        let x = t.constant(Tensor::full(&[1, 1], 0.3));
        let h = t.constant(Tensor::zeros(&[1, hidden]));
        let c = t.constant(
            Tensor::vector(vec![0.4, -1.2])
                .reshaped(vec![1, 2])
                .unwrap(),
        );
        // input gate bias very negative, forget gate bias very positive
        let mut bias = vec![0.0; 4 * hidden];
        bias[..hidden].fill(-30.0);
        bias[hidden..2 * hidden].fill(30.0);
        let w = LstmWeights {
            w_x: t.constant(Tensor::full(&[1, 8], 0.5)),
            w_h: t.constant(Tensor::zeros(&[hidden, 8])),
            bias: t.constant(Tensor::vector(bias)),
        };
        let (_, c2) = lstm_step(&mut t, x, h, c, &w).unwrap();
        assert!((t.data(c2)[0] - 0.4).abs() < 1e-5);
        assert!((t.data(c2)[1] + 1.2).abs() < 1e-5);
    }

    fn identity_projections(t: &mut Tape, dim: usize) -> AttentionProjections {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        let mk = |t: &mut Tape| t.constant(Tensor::new(vec![dim, dim], eye.clone()).unwrap());
        let w_q = mk(t);
        let w_k = mk(t);
        let w_v = mk(t);
        let w_o = mk(t);
        let z = |t: &mut Tape| t.constant(Tensor::zeros(&[dim]));
        AttentionProjections {
            w_q,
            b_q: z(t),
            w_k,
            b_k: z(t),
            w_v,
            b_v: z(t),
            w_o,
            b_o: z(t),
        }
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut t = Tape::new();
        let proj = identity_projections(&mut t, 4);
        let q = t.constant(Tensor::new(vec![1, 1, 4], vec![0.3, -0.1, 2.0, 0.5]).unwrap());
        let kv = t.constant(Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = multi_head_attention(&mut t, q, kv, kv, 2, &proj, None).unwrap();
        assert_eq!(t.data(out), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut t = Tape::new();
        let proj = identity_projections(&mut t, 2);
        let q = t.constant(Tensor::new(vec![1, 1, 2], vec![0.7, -0.4]).unwrap());
        let k = t.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap());
        let v = t.constant(Tensor::new(vec![1, 3, 2], vec![0.0, 3.0, 3.0, 6.0, 6.0, 0.0]).unwrap());
        let out = multi_head_attention(&mut t, q, k, v, 1, &proj, None).unwrap();
        let d = t.data(out);
        assert!((d[0] - 3.0).abs() < 1e-5 && (d[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut t = Tape::new();
        let proj = identity_projections(&mut t, 4);
        let q = t.constant(Tensor::zeros(&[1, 1, 4]));
        let err = multi_head_attention(&mut t, q, q, q, 3, &proj, None).unwrap_err();
        assert!(matches!(err, EngineError::Invalid(_)));
    }
}
