//! Multi-head scaled dot-product attention and the pre-norm residual blocks
//! built from it.

use super::layers::{FeedForward, LayerNorm, Linear};
use super::params::Init;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            o: Linear::new(init, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// Output projection of the concatenated per-head
    /// `softmax(Q·Kᵀ/√d_head)·V`, without residual.
    pub fn attend(&self, t: &mut Tape<'_>, queries: Var, keys_values: Var) -> Result<Var> {
        if t.shape(keys_values).0 == 0 {
            return Err(Error::invalid("attention over an empty key/value set"));
        }
        let q = self.q.forward(t, queries)?;
        let k = self.k.forward(t, keys_values)?;
        let v = self.v.forward(t, keys_values)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                t.slice_cols(q, h * dh, dh),
                t.slice_cols(k, h * dh, dh),
                t.slice_cols(v, h * dh, dh),
            );
            let logits = t.matmul_t(qh, kh);
            let logits = t.scale(logits, scale);
            if !t.value(logits).is_finite() {
                return Err(Error::NonFinite(format!("attention logits, head {h}")));
            }
            let weights = t.softmax_rows(logits);
            outs.push(t.matmul(weights, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        self.o.forward(t, cat)
    }

    /// `queries + attend(queries, keys_values)`.
    pub fn cross_attention(&self, t: &mut Tape<'_>, queries: Var, keys_values: Var) -> Result<Var> {
        let a = self.attend(t, queries, keys_values)?;
        Ok(t.add(queries, a))
    }
}

/// `x ← x + attn(LN(x), LN(kv)); x ← x + FF(x)`
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln_q: LayerNorm::new(init, &format!("{name}.ln_q"), dim),
            ln_kv: LayerNorm::new(init, &format!("{name}.ln_kv"), dim),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, heads),
            ff: FeedForward::new(init, &format!("{name}.ff"), dim),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var, kv: Var) -> Result<Var> {
        let qn = self.ln_q.forward(t, x);
        let kvn = self.ln_kv.forward(t, kv);
        let a = self.attn.attend(t, qn, kvn)?;
        let h = t.add(x, a);
        self.ff.forward(t, h)
    }
}

/// `x ← x + attn(LN(x), LN(x)); x ← x + FF(x)`
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub ln: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln: LayerNorm::new(init, &format!("{name}.ln"), dim),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, heads),
            ff: FeedForward::new(init, &format!("{name}.ff"), dim),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = self.ln.forward(t, x);
        let a = self.attn.attend(t, n, n)?;
        let h = t.add(x, a);
        self.ff.forward(t, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use crate::model::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(dim: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mha = MultiHeadAttention::new(&mut Init { store: &mut store, rng: &mut rng }, "a", dim, heads);
        (store, mha)
    }

    fn set_biases(store: &mut ParamStore, mha: &MultiHeadAttention) {
        for (k, l) in [&mha.q, &mha.k, &mha.v, &mha.o].into_iter().enumerate() {
            let b = store.value_mut(l.b);
            for (j, v) in b.data.iter_mut().enumerate() {
                *v = 0.05 * (k as f64 + 1.0) - 0.03 * j as f64;
            }
        }
    }

    /// Dense attention computed head by head with explicit loops.
    fn oracle(store: &ParamStore, mha: &MultiHeadAttention, q_in: &Matrix, kv: &Matrix) -> Matrix {
        let proj = |x: &Matrix, l: &Linear| {
            let (w, b) = (store.value(l.w), store.value(l.b));
            let mut out = Matrix::zeros(x.rows, w.cols);
            for i in 0..x.rows {
                for j in 0..w.cols {
                    let mut s = b.get(0, j);
                    for k in 0..x.cols {
                        s += x.get(i, k) * w.get(k, j);
                    }
                    out.set(i, j, s);
                }
            }
            out
        };
        let (q, k, v) = (proj(q_in, &mha.q), proj(kv, &mha.k), proj(kv, &mha.v));
        let dh = mha.dim / mha.heads;
        let mut cat = Matrix::zeros(q_in.rows, mha.dim);
        for h in 0..mha.heads {
            for i in 0..q.rows {
                let logits: Vec<f64> = (0..k.rows)
                    .map(|j| (0..dh).map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    let s: f64 = (0..k.rows).map(|j| e[j] / z * v.get(j, h * dh + c)).sum();
                    cat.set(i, h * dh + c, s);
                }
            }
        }
        let mut out = proj(&cat, &mha.o);
        out.add_assign(q_in);
        out
    }

    #[test]
    fn matches_dense_oracle() {
        let (mut store, mha) = build(4, 2, 7);
        set_biases(&mut store, &mha);
        let q_in = Matrix::from_rows(&[[0.1, -0.2, 0.3, 0.05], [0.4, 0.0, -0.1, 0.2]]);
        let kv = Matrix::from_rows(&[[0.2, 0.1, 0.0, -0.3], [-0.1, 0.5, 0.2, 0.1], [0.3, -0.4, 0.1, 0.0]]);
        let mut t = Tape::with_params(&store);
        let (qv, kvv) = (t.constant(q_in.clone()), t.constant(kv.clone()));
        let out = mha.cross_attention(&mut t, qv, kvv).unwrap();
        let expected = oracle(&store, &mha, &q_in, &kv);
        assert!(t.value(out).max_abs_diff(&expected) < 1e-12);
        for a in t.softmax_outputs() {
            for i in 0..a.rows {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singleton_key_gets_full_weight() {
        let (mut store, mha) = build(4, 2, 3);
        set_biases(&mut store, &mha);
        let q_in = Matrix::from_rows(&[[0.3, -0.1, 0.2, 0.7], [1.0, 0.0, 0.0, 0.0]]);
        let kv = Matrix::from_rows(&[[0.5, 0.25, -0.5, 1.0]]);
        let mut t = Tape::with_params(&store);
        let (qv, kvv) = (t.constant(q_in.clone()), t.constant(kv.clone()));
        let out = mha.cross_attention(&mut t, qv, kvv).unwrap();
        for a in t.softmax_outputs() {
            assert!(a.data.iter().all(|w| *w == 1.0));
        }
        // out = q_in + O(V(kv)) on every row
        let mut t2 = Tape::with_params(&store);
        let kvv = t2.constant(kv);
        let v = mha.v.forward(&mut t2, kvv).unwrap();
        let o = mha.o.forward(&mut t2, v).unwrap();
        let ov = t2.value(o);
        for i in 0..2 {
            for c in 0..4 {
                assert!((t.value(out).get(i, c) - q_in.get(i, c) - ov.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_projections_average_values() {
        let (mut store, mha) = build(4, 2, 11);
        for l in [&mha.q, &mha.k] {
            store.value_mut(l.w).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let q_in = Matrix::from_rows(&[[0.3, -0.1, 0.2, 0.7]]);
        let kv = Matrix::from_rows(&[[0.5, 0.25, -0.5, 1.0], [0.1, 0.2, 0.3, 0.4], [-1.0, 0.0, 2.0, 0.5]]);
        let mut t = Tape::with_params(&store);
        let (qv, kvv) = (t.constant(q_in), t.constant(kv.clone()));
        let out = mha.attend(&mut t, qv, kvv).unwrap();
        for a in t.softmax_outputs() {
            assert!(a.data.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        }
        // mean over values commutes with the affine projections
        let mut t2 = Tape::with_params(&store);
        let kvv = t2.constant(kv);
        let mean = t2.mean_rows(kvv);
        let v = mha.v.forward(&mut t2, mean).unwrap();
        let o = mha.o.forward(&mut t2, v).unwrap();
        assert!(t.value(out).max_abs_diff(t2.value(o)) < 1e-12);
    }

    #[test]
    fn empty_keys_rejected() {
        let (store, mha) = build(4, 2, 1);
        let mut t = Tape::with_params(&store);
        let q = t.constant(Matrix::zeros(1, 4));
        let kv = t.constant(Matrix::zeros(0, 4));
        assert!(mha.attend(&mut t, q, kv).is_err());
    }
}
