//! Standard building blocks on the autodiff tape.

use super::params::{Init, ParamId};
use super::tape::{Tape, Var};
use super::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, t: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => t.relu(x),
            Activation::Gelu => t.gelu(x),
        }
    }
}

/// `y = x·W + b` with `W` stored fan_in × fan_out.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: init.weight(&format!("{name}.w"), fan_in, fan_out),
            b: init.zeros(&format!("{name}.b"), 1, fan_out),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        let b = t.param(self.b);
        linear_on_tape(t, x, w, b)
    }
}

fn linear_on_tape(t: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (xs, ws, bs) = (t.shape(x), t.shape(w), t.shape(b));
    if xs.1 != ws.0 {
        return Err(Error::Shape {
            op: "linear",
            left: xs,
            right: ws,
        });
    }
    if bs != (1, ws.1) {
        return Err(Error::Shape {
            op: "linear bias",
            left: ws,
            right: bs,
        });
    }
    let xw = t.matmul(x, w);
    Ok(t.add_row(xw, b))
}

/// Layer normalisation with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.ones(&format!("{name}.gamma"), 1, dim),
            beta: init.zeros(&format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let n = t.layer_norm(x);
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        let scaled = t.mul_row(n, g);
        t.add_row(scaled, b)
    }
}

/// Stack of linear layers with an activation after each hidden layer and,
/// optionally, after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
    pub act_last: bool,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, widths: &[usize], act: Activation, act_last: bool) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, act, act_last }
    }

    pub fn forward(&self, t: &mut Tape<'_>, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(t, x)?;
            if i + 1 < n || self.act_last {
                x = self.act.apply(t, x);
            }
        }
        Ok(x)
    }
}

/// Pre-norm residual feed-forward: `x + W₂·gelu(W₁·LN(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub ln: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

pub const FF_MULT: usize = 2;

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            ln: LayerNorm::new(init, &format!("{name}.ln"), dim),
            up: Linear::new(init, &format!("{name}.up"), dim, dim * FF_MULT),
            down: Linear::new(init, &format!("{name}.down"), dim * FF_MULT, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = self.ln.forward(t, x);
        let h = self.up.forward(t, n)?;
        let h = t.gelu(h);
        let y = self.down.forward(t, h)?;
        Ok(t.add(x, y))
    }
}

/// `x·W + b` on plain matrices.
pub fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = linear_on_tape(&mut t, xv, wv, bv)?;
    Ok(t.value(y).clone())
}

/// Per-row standardisation without affine parameters.
pub fn layer_norm(x: &Matrix) -> Matrix {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.layer_norm(v);
    t.value(y).clone()
}

/// Applies `(W, b)` layers in order with `act` after each.
pub fn mlp(x: &Matrix, layers: &[(Matrix, Matrix)], act: Activation) -> Result<Matrix> {
    let mut t = Tape::new();
    let mut v = t.constant(x.clone());
    for (w, b) in layers {
        let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
        v = linear_on_tape(&mut t, v, wv, bv)?;
        v = act.apply(&mut t, v);
    }
    Ok(t.value(v).clone())
}
