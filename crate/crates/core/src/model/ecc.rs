//! Edge-conditioned graph convolution and the temporal context encoder.

use super::layers::{Activation, Linear, Mlp};
use super::params::{Init, ParamId};
use super::perceiver::LATENT_INIT_STD;
use super::tape::{Tape, Var};
use super::tensor::Matrix;
use crate::error::{Error, Result};
use crate::scenegraph::{
    encode_edge, encode_node, NodeType, TemporalHeteroGraph, EDGE_FEATURES, NODE_FEATURES,
};

/// One graph frame as dense feature matrices with index-based edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub node_types: Vec<NodeType>,
    /// N × 19
    pub node_features: Matrix,
    /// (source row, target row)
    pub edges: Vec<(usize, usize)>,
    /// E × 9, relation one-hot first
    pub edge_features: Matrix,
}

impl EncodedFrame {
    pub fn num_nodes(&self) -> usize {
        self.node_types.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.node_features.rows != n || self.edge_features.rows != self.edges.len() {
            return Err(Error::invalid("encoded frame row counts disagree"));
        }
        if let Some((s, d)) = self.edges.iter().find(|(s, d)| *s >= n || *d >= n) {
            return Err(Error::invalid(format!("edge {s}->{d} dangles in a {n}-node graph")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGraph {
    pub frames: Vec<EncodedFrame>,
}

impl EncodedGraph {
    pub fn from_temporal(g: &TemporalHeteroGraph) -> Result<Self> {
        let frames = g
            .frames
            .iter()
            .map(|f| {
                let ids: Vec<u32> = f.nodes.keys().copied().collect();
                let row_of = |id: u32| {
                    ids.binary_search(&id)
                        .map_err(|_| Error::invalid(format!("edge references unknown node {id}")))
                };
                let mut node_features = Matrix::zeros(ids.len(), NODE_FEATURES);
                let mut node_types = Vec::with_capacity(ids.len());
                for (r, node) in f.nodes.values().enumerate() {
                    node_types.push(node.ty);
                    node_features.row_mut(r).copy_from_slice(&encode_node(node.ty, &node.attr));
                }
                let mut edges = Vec::with_capacity(f.edges.len());
                let mut edge_features = Matrix::zeros(f.edges.len(), EDGE_FEATURES);
                for (r, e) in f.edges.iter().enumerate() {
                    edges.push((row_of(e.src)?, row_of(e.dst)?));
                    edge_features.row_mut(r).copy_from_slice(&encode_edge(e.rel, &e.attr)?);
                }
                Ok(EncodedFrame { node_types, node_features, edges, edge_features })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frames })
    }

    /// Same topology and node types, every feature zero.
    pub fn zeroed(&self) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|f| EncodedFrame {
                node_types: f.node_types.clone(),
                node_features: Matrix::zeros(f.node_features.rows, f.node_features.cols),
                edges: f.edges.clone(),
                edge_features: Matrix::zeros(f.edge_features.rows, f.edge_features.cols),
            })
            .collect();
        Self { frames }
    }
}

/// `h'_i = act(W_root·h_i + b + mean_{j→i} Θ(e_ji)·h_j)` where `Θ` is an MLP
/// producing an F_out×F_in matrix per edge.
#[derive(Debug, Clone)]
pub struct EccConv {
    pub root: Linear,
    pub edge_net: Mlp,
    pub act: Activation,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl EccConv {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        edge_features: usize,
        edge_hidden: usize,
        act: Activation,
    ) -> Self {
        Self {
            root: Linear::new(init, &format!("{name}.root"), fan_in, fan_out),
            edge_net: Mlp::new(
                init,
                &format!("{name}.edge"),
                &[edge_features, edge_hidden, fan_out * fan_in],
                Activation::Relu,
                false,
            ),
            act,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, h: Var, edges: &[(usize, usize)], edge_features: Var) -> Result<Var> {
        let n = t.shape(h).0;
        if let Some((s, d)) = edges.iter().find(|(s, d)| *s >= n || *d >= n) {
            return Err(Error::invalid(format!("edge {s}->{d} dangles in a {n}-node graph")));
        }
        let root = self.root.forward(t, h)?;
        let out = if edges.is_empty() {
            root
        } else {
            let theta = self.edge_net.forward(t, edge_features)?;
            let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
            let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
            let xs = t.gather_rows(h, &src);
            let msgs = t.edge_matvec(theta, xs);
            let agg = t.scatter_mean(msgs, &dst, n);
            t.add(root, agg)
        };
        Ok(self.act.apply(t, out))
    }
}

/// Whether node types get their own input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphTyping {
    Heterogeneous,
    Homogeneous,
}

impl GraphTyping {
    /// Edge feature width seen by the convolution; the untyped view drops the
    /// relation one-hot.
    pub fn edge_width(self) -> usize {
        match self {
            GraphTyping::Heterogeneous => EDGE_FEATURES,
            GraphTyping::Homogeneous => EDGE_FEATURES - 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub typing: GraphTyping,
    pub input_proj: Vec<Linear>,
    pub conv: [EccConv; 2],
    pub temporal: Linear,
    pub offsets: ParamId,
    pub frames: usize,
}

impl ContextEncoder {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        typing: GraphTyping,
        hidden: usize,
        frames: usize,
        dim: usize,
        n_latents: usize,
    ) -> Self {
        let input_proj = match typing {
            GraphTyping::Heterogeneous => NodeType::ALL
                .iter()
                .map(|ty| Linear::new(init, &format!("{name}.in.{}", ty.name()), NODE_FEATURES, hidden))
                .collect(),
            GraphTyping::Homogeneous => vec![Linear::new(init, &format!("{name}.in"), NODE_FEATURES, hidden)],
        };
        let ew = typing.edge_width();
        let conv = [
            EccConv::new(init, &format!("{name}.conv0"), hidden, hidden, ew, hidden, Activation::Relu),
            EccConv::new(init, &format!("{name}.conv1"), hidden, hidden, ew, hidden, Activation::Relu),
        ];
        Self {
            typing,
            input_proj,
            conv,
            temporal: Linear::new(init, &format!("{name}.temporal"), frames * hidden, dim),
            offsets: init.normal(&format!("{name}.offsets"), n_latents, dim, LATENT_INIT_STD),
            frames,
        }
    }

    fn project_nodes(&self, t: &mut Tape<'_>, f: &EncodedFrame) -> Result<Var> {
        let x = t.constant(f.node_features.clone());
        match self.typing {
            GraphTyping::Homogeneous => self.input_proj[0].forward(t, x),
            GraphTyping::Heterogeneous => {
                let mut parts = Vec::new();
                let mut order = Vec::with_capacity(f.num_nodes());
                for ty in NodeType::ALL {
                    let rows: Vec<usize> = (0..f.num_nodes()).filter(|&r| f.node_types[r] == ty).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let sub = t.gather_rows(x, &rows);
                    parts.push(self.input_proj[ty.index()].forward(t, sub)?);
                    order.extend(rows);
                }
                let stacked = t.concat_rows(&parts);
                // back to node order
                let mut inverse = vec![0; order.len()];
                for (pos, &r) in order.iter().enumerate() {
                    inverse[r] = pos;
                }
                Ok(t.gather_rows(stacked, &inverse))
            }
        }
    }

    /// Mean-pooled node embedding of one frame after both convolutions.
    pub fn frame_embedding(&self, t: &mut Tape<'_>, f: &EncodedFrame) -> Result<Var> {
        f.validate()?;
        if f.num_nodes() == 0 {
            return Err(Error::invalid("graph frame has no nodes"));
        }
        let ef = match self.typing {
            GraphTyping::Heterogeneous => f.edge_features.clone(),
            GraphTyping::Homogeneous => {
                let w = self.typing.edge_width();
                let mut m = Matrix::zeros(f.edge_features.rows, w);
                for r in 0..m.rows {
                    m.row_mut(r).copy_from_slice(&f.edge_features.row(r)[EDGE_FEATURES - w..]);
                }
                m
            }
        };
        let ef = t.constant(ef);
        let mut h = self.project_nodes(t, f)?;
        for conv in &self.conv {
            h = conv.forward(t, h, &f.edges, ef)?;
        }
        Ok(t.mean_rows(h))
    }

    pub fn encode(&self, t: &mut Tape<'_>, g: &EncodedGraph) -> Result<Var> {
        if g.frames.len() != self.frames {
            return Err(Error::invalid(format!(
                "context encoder expects {} frames, got {}",
                self.frames,
                g.frames.len()
            )));
        }
        let per_frame = g
            .frames
            .iter()
            .map(|f| self.frame_embedding(t, f))
            .collect::<Result<Vec<_>>>()?;
        let cat = t.concat_cols(&per_frame);
        let z = self.temporal.forward(t, cat)?;
        let offsets = t.param(self.offsets);
        let n = t.shape(offsets).0;
        let tiled = t.repeat_rows(z, n);
        Ok(t.add(tiled, offsets))
    }
}
