//! Latent-bottleneck encoder: a learned latent array cross-attends once to
//! the position-encoded input tokens, then self-attends `n_layers` times.

use super::attention::{CrossAttentionBlock, SelfAttentionBlock};
use super::params::{Init, ParamId};
use super::tape::{Tape, Var};
use super::tensor::Matrix;
use crate::error::{Error, Result};

/// Standard deviation of learned latent arrays and decoder queries.
pub const LATENT_INIT_STD: f64 = 0.02;

/// Sinusoidal encoding of token indices `0..n`: column `2i` holds
/// `sin(p / 10000^(2i/d))`, column `2i+1` the matching cosine.
pub fn sinusoidal_encoding(n: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(n, dim);
    for p in 0..n {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            m.set(p, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct PerceiverEncoder {
    pub latents: ParamId,
    pub cross: CrossAttentionBlock,
    pub layers: Vec<SelfAttentionBlock>,
    pub dim: usize,
}

impl PerceiverEncoder {
    pub fn new(init: &mut Init<'_>, name: &str, n_latents: usize, dim: usize, n_layers: usize, heads: usize) -> Self {
        Self {
            latents: init.normal(&format!("{name}.latents"), n_latents, dim, LATENT_INIT_STD),
            cross: CrossAttentionBlock::new(init, &format!("{name}.cross"), dim, heads),
            layers: (0..n_layers)
                .map(|i| SelfAttentionBlock::new(init, &format!("{name}.self{i}"), dim, heads))
                .collect(),
            dim,
        }
    }

    /// `tokens` is N×dim; the result is always n_latents×dim.
    pub fn encode(&self, t: &mut Tape<'_>, tokens: Var) -> Result<Var> {
        let (n, d) = t.shape(tokens);
        if n == 0 {
            return Err(Error::invalid("perceiver input has no tokens"));
        }
        if d != self.dim {
            return Err(Error::Shape {
                op: "perceiver input",
                left: (n, d),
                right: (n, self.dim),
            });
        }
        let pe = t.constant(sinusoidal_encoding(n, d));
        let inputs = t.add(tokens, pe);
        let latents = t.param(self.latents);
        let mut x = self.cross.forward(t, latents, inputs)?;
        for layer in &self.layers {
            x = layer.forward(t, x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (ParamStore, PerceiverEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = PerceiverEncoder::new(&mut Init { store: &mut store, rng: &mut rng }, "p", 4, 8, 2, 2);
        (store, enc)
    }

    fn tokens(n: usize, dim: usize, phase: f64) -> Matrix {
        Matrix::from_vec(n, dim, (0..n * dim).map(|k| (k as f64 * 0.37 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn encoding_values() {
        let pe = sinusoidal_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(2, 3) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn output_shape_independent_of_length() {
        let (store, enc) = build();
        for n in [6, 600] {
            let mut t = Tape::with_params(&store);
            let x = t.constant(tokens(n, 8, 0.1));
            let y = enc.encode(&mut t, x).unwrap();
            assert_eq!(t.shape(y), (4, 8));
        }
    }

    #[test]
    fn zero_value_projection_decouples_inputs() {
        let (mut store, enc) = build();
        store.value_mut(enc.cross.attn.v.w).data.iter_mut().for_each(|v| *v = 0.0);
        let run = |x: Matrix| {
            let mut t = Tape::with_params(&store);
            let x = t.constant(x);
            let y = enc.encode(&mut t, x).unwrap();
            t.value(y).clone()
        };
        let a = run(Matrix::zeros(6, 8));
        let b = run(tokens(11, 8, 0.7));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn empty_and_misshapen_inputs_rejected() {
        let (store, enc) = build();
        let mut t = Tape::with_params(&store);
        let empty = t.constant(Matrix::zeros(0, 8));
        assert!(enc.encode(&mut t, empty).is_err());
        let wrong = t.constant(Matrix::zeros(3, 5));
        assert!(enc.encode(&mut t, wrong).is_err());
    }
}
