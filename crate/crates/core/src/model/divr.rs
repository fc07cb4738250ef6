//! Configuration, variants and the assembled forward pass.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::CrossAttentionBlock;
use super::ecc::{ContextEncoder, EncodedGraph, GraphTyping};
use super::layers::{Activation, LayerNorm, Linear, Mlp};
use super::params::{Init, ParamId, ParamStore};
use super::perceiver::{sinusoidal_encoding, PerceiverEncoder, LATENT_INIT_STD};
use super::pointnet::GazeEncoder;
use super::tape::{Tape, Var};
use super::tensor::Matrix;
use crate::domain::{FUTURE_LEN, PAST_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Tiny,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::invalid(format!("unknown preset `{s}` (full, tiny)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub n_latents: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub gcn_hidden: usize,
    pub preset: Preset,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            latent_dim: 256,
            n_latents: 32,
            n_layers: 6,
            n_heads: 8,
            gcn_hidden: 64,
            preset: Preset::Full,
        }
    }

    pub fn tiny() -> Self {
        Self {
            latent_dim: 16,
            n_latents: 4,
            n_layers: 2,
            n_heads: 2,
            gcn_hidden: 8,
            preset: Preset::Tiny,
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::full(),
            Preset::Tiny => Self::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.latent_dim, self.n_latents, self.n_heads, self.gcn_hidden];
        if sizes.contains(&0) {
            return Err(Error::invalid("model sizes must be positive"));
        }
        if !self.latent_dim.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "latent_dim {} is not divisible by n_heads {}",
                self.latent_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    DivrHet,
    DivrHom,
    MotionGaze,
    Mlp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mlp, Variant::MotionGaze, Variant::DivrHom, Variant::DivrHet];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DivrHet => "divr-het",
            Variant::DivrHom => "divr-hom",
            Variant::MotionGaze => "motion-gaze",
            Variant::Mlp => "mlp",
        }
    }

    pub fn uses(self, branch: Branch) -> bool {
        !matches!((self, branch), (Variant::Mlp, _) | (Variant::MotionGaze, Branch::Graph))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}` (divr-het, divr-hom, motion-gaze, mlp)")))
    }
}

/// Input modality that can be zero-ablated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Graph,
    Gaze,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Graph => "graph",
            Branch::Gaze => "gaze",
        }
    }
}

impl FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(Branch::Graph),
            "gaze" => Ok(Branch::Gaze),
            _ => Err(Error::invalid(format!("unknown branch `{s}` (graph, gaze)"))),
        }
    }
}

/// Everything the model may consume for one window. Positions are metric.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    /// 6×2 observed positions, oldest first.
    pub past: &'a Matrix,
    /// n×4 gaze-weighted cloud.
    pub cloud: Option<&'a Matrix>,
    pub graph: Option<&'a EncodedGraph>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// 10×2 future positions.
    pub future: Matrix,
    /// 6×2 reconstruction of the observed positions.
    pub reconstruction: Matrix,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub future: Var,
    pub reconstruction: Var,
}

const QUERIES: usize = FUTURE_LEN + PAST_LEN;

#[derive(Debug, Clone)]
struct Attentive {
    motion_embed: Linear,
    motion: PerceiverEncoder,
    gaze: GazeEncoder,
    context: Option<ContextEncoder>,
    fuse_gaze: CrossAttentionBlock,
    fuse_context: Option<CrossAttentionBlock>,
    queries: ParamId,
    decode: CrossAttentionBlock,
    out_norm: LayerNorm,
    head: Linear,
}

#[derive(Debug, Clone)]
enum Net {
    Attentive(Box<Attentive>),
    Mlp(Mlp),
}

#[derive(Debug, Clone)]
pub struct DivrModel {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParamStore,
    net: Net,
}

impl DivrModel {
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut params, rng: &mut rng };
        let ModelConfig { latent_dim: d, n_latents: l, n_layers, n_heads: heads, gcn_hidden: hid, .. } = config;
        let net = match variant {
            Variant::Mlp => Net::Mlp(Mlp::new(
                &mut init,
                "mlp",
                &[PAST_LEN * 2, 4 * d, 4 * d, QUERIES * 2],
                Activation::Relu,
                false,
            )),
            _ => {
                let motion_embed = Linear::new(&mut init, "motion.embed", 2, d);
                let motion = PerceiverEncoder::new(&mut init, "motion.perceiver", l, d, n_layers, heads);
                let gaze_perceiver = PerceiverEncoder::new(&mut init, "gaze.perceiver", l, d, n_layers, heads);
                let gaze = GazeEncoder::new(&mut init, "gaze", hid, gaze_perceiver, l);
                let typing = match variant {
                    Variant::DivrHet => Some(GraphTyping::Heterogeneous),
                    Variant::DivrHom => Some(GraphTyping::Homogeneous),
                    _ => None,
                };
                let context = typing.map(|ty| ContextEncoder::new(&mut init, "context", ty, hid, PAST_LEN, d, l));
                let fuse_gaze = CrossAttentionBlock::new(&mut init, "fuse.gaze", d, heads);
                let fuse_context = typing.map(|_| CrossAttentionBlock::new(&mut init, "fuse.context", d, heads));
                Net::Attentive(Box::new(Attentive {
                    motion_embed,
                    motion,
                    gaze,
                    context,
                    fuse_gaze,
                    fuse_context,
                    queries: init.normal("decode.queries", QUERIES, d, LATENT_INIT_STD),
                    decode: CrossAttentionBlock::new(&mut init, "decode.attn", d, heads),
                    out_norm: LayerNorm::new(&mut init, "decode.norm", d),
                    head: Linear::new(&mut init, "decode.head", d, 2),
                }))
            }
        };
        Ok(Self { config, variant, params, net })
    }

    /// Records the forward pass on `t`, which must be bound to `self.params`.
    pub fn forward(&self, t: &mut Tape<'_>, input: &ModelInput<'_>) -> Result<ForwardVars> {
        if input.past.shape() != (PAST_LEN, 2) {
            return Err(Error::Shape {
                op: "past trajectory",
                left: input.past.shape(),
                right: (PAST_LEN, 2),
            });
        }
        if !input.past.is_finite() {
            return Err(Error::NonFinite("past trajectory".into()));
        }
        let last = Matrix::from_rows(&[input.past.row(PAST_LEN - 1)]);
        let raw = match &self.net {
            Net::Mlp(mlp) => {
                let x = t.constant(Matrix { rows: 1, cols: PAST_LEN * 2, data: input.past.data.clone() });
                let y = mlp.forward(t, x)?;
                // 1×32 → 16×2 by row slices
                let rows: Vec<Var> = (0..QUERIES).map(|q| t.slice_cols(y, 2 * q, 2)).collect();
                t.concat_rows(&rows)
            }
            Net::Attentive(net) => net.decode_offsets(t, input, self.variant)?,
        };
        let anchor = t.constant(last);
        let out = t.add_row(raw, anchor);
        Ok(ForwardVars {
            future: t.slice_rows(out, 0, FUTURE_LEN),
            reconstruction: t.slice_rows(out, FUTURE_LEN, PAST_LEN),
        })
    }

    pub fn predict(&self, input: &ModelInput<'_>) -> Result<Prediction> {
        let mut t = Tape::with_params(&self.params);
        let v = self.forward(&mut t, input)?;
        let p = Prediction {
            future: t.value(v.future).clone(),
            reconstruction: t.value(v.reconstruction).clone(),
        };
        if !p.future.is_finite() || !p.reconstruction.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(p)
    }
}

impl Attentive {
    fn decode_offsets(&self, t: &mut Tape<'_>, input: &ModelInput<'_>, variant: Variant) -> Result<Var> {
        let cloud = input
            .cloud
            .ok_or_else(|| Error::invalid(format!("variant {variant} needs a gaze cloud")))?;
        let past = t.constant(input.past.clone());
        let tokens = self.motion_embed.forward(t, past)?;
        let f_motion = self.motion.encode(t, tokens)?;
        let f_gaze = self.gaze.encode(t, cloud)?;
        let mut fused = self.fuse_gaze.forward(t, f_motion, f_gaze)?;
        if let (Some(ctx), Some(fuse)) = (&self.context, &self.fuse_context) {
            let graph = input
                .graph
                .ok_or_else(|| Error::invalid(format!("variant {variant} needs a scene graph")))?;
            let f_context = ctx.encode(t, graph)?;
            fused = fuse.forward(t, fused, f_context)?;
        }
        let q = t.param(self.queries);
        let (n, d) = t.shape(q);
        let pe = t.constant(sinusoidal_encoding(n, d));
        let q = t.add(q, pe);
        let decoded = self.decode.forward(t, q, fused)?;
        let normed = self.out_norm.forward(t, decoded);
        self.head.forward(t, normed)
    }
}
