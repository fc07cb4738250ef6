//! Two-level set-abstraction encoder for the gaze-weighted point cloud.
//!
//! Farthest-point sampling here is canonical: it depends only on the set of
//! points, never on their order, so the whole encoder is exactly invariant
//! to permutations of the cloud.

use std::cmp::Ordering;

use super::layers::{Activation, Linear, Mlp};
use super::params::{Init, ParamId};
use super::perceiver::{PerceiverEncoder, LATENT_INIT_STD};
use super::tape::{Tape, Var};
use super::tensor::Matrix;
use crate::error::{Error, Result};

pub const LEVEL1_CENTROIDS: usize = 32;
pub const LEVEL2_CENTROIDS: usize = 8;
pub const LEVEL1_RADIUS: f64 = 0.5;
pub const LEVEL2_RADIUS: f64 = 1.5;
/// Columns of a cloud row: x, y, z, gaze weight.
pub const CLOUD_COLS: usize = 4;

fn xyz(m: &Matrix, r: usize) -> [f64; 3] {
    [m.get(r, 0), m.get(r, 1), m.get(r, 2)]
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn lex(m: &Matrix, a: usize, b: usize) -> Ordering {
    m.row(a)
        .iter()
        .zip(m.row(b))
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Picks `k` rows of an N×4 cloud. The first is the highest-weight point,
/// each next one the point farthest (in xyz) from those already chosen.
/// Ties go to the lexicographically smallest row, which makes the chosen
/// coordinates independent of row order.
pub fn farthest_point_sample(cloud: &Matrix, k: usize) -> Result<Vec<usize>> {
    if cloud.rows < k {
        return Err(Error::invalid(format!(
            "cloud has {} points, fewer than {k} centroids",
            cloud.rows
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let first = (0..cloud.rows)
        .min_by(|&a, &b| cloud.get(b, 3).total_cmp(&cloud.get(a, 3)).then_with(|| lex(cloud, a, b)))
        .expect("non-empty cloud");
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..cloud.rows)
        .map(|r| dist_sq(xyz(cloud, r), xyz(cloud, first)))
        .collect();
    while chosen.len() < k {
        let next = (0..cloud.rows)
            .min_by(|&a, &b| nearest[b].total_cmp(&nearest[a]).then_with(|| lex(cloud, a, b)))
            .expect("non-empty cloud");
        chosen.push(next);
        let c = xyz(cloud, next);
        for (r, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist_sq(xyz(cloud, r), c));
        }
    }
    Ok(chosen)
}

/// For each centroid row, every row of `cloud` within `radius` (inclusive).
pub fn ball_groups(cloud: &Matrix, centroids: &[usize], radius: f64) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    centroids
        .iter()
        .map(|&c| {
            let cp = xyz(cloud, c);
            (0..cloud.rows).filter(|&r| dist_sq(xyz(cloud, r), cp) <= r2).collect()
        })
        .collect()
}

/// Flattened (member row, group) pairs with contiguous pooling groups.
struct Grouping {
    members: Vec<usize>,
    offsets: Matrix,
    pools: Vec<Vec<usize>>,
}

fn grouping(points: &Matrix, centroids: &[usize], radius: f64) -> Grouping {
    let groups = ball_groups(points, centroids, radius);
    let total: usize = groups.iter().map(Vec::len).sum();
    let mut members = Vec::with_capacity(total);
    let mut offsets = Matrix::zeros(total, 3);
    let mut pools = Vec::with_capacity(groups.len());
    for (g, &c) in groups.iter().zip(centroids) {
        let cp = xyz(points, c);
        let start = members.len();
        for &r in g {
            let p = xyz(points, r);
            for k in 0..3 {
                offsets.set(members.len(), k, p[k] - cp[k]);
            }
            members.push(r);
        }
        pools.push((start..members.len()).collect());
    }
    Grouping { members, offsets, pools }
}

#[derive(Debug, Clone)]
pub struct GazeEncoder {
    pub mlp1: Mlp,
    pub mlp2: Mlp,
    pub proj: Linear,
    pub offsets: ParamId,
    pub perceiver: PerceiverEncoder,
}

impl GazeEncoder {
    pub fn new(init: &mut Init<'_>, name: &str, hidden: usize, perceiver: PerceiverEncoder, n_latents: usize) -> Self {
        let dim = perceiver.dim;
        Self {
            mlp1: Mlp::new(init, &format!("{name}.sa1"), &[CLOUD_COLS, hidden, hidden], Activation::Relu, true),
            mlp2: Mlp::new(init, &format!("{name}.sa2"), &[hidden + 3, hidden, hidden], Activation::Relu, true),
            proj: Linear::new(init, &format!("{name}.proj"), hidden, dim),
            offsets: init.normal(&format!("{name}.offsets"), n_latents, dim, LATENT_INIT_STD),
            perceiver,
        }
    }

    /// Global point-cloud feature (1×hidden) before projection.
    pub fn global_feature(&self, t: &mut Tape<'_>, cloud: &Matrix) -> Result<Var> {
        if cloud.cols != CLOUD_COLS {
            return Err(Error::Shape {
                op: "gaze cloud",
                left: cloud.shape(),
                right: (cloud.rows, CLOUD_COLS),
            });
        }
        if !cloud.is_finite() {
            return Err(Error::NonFinite("gaze cloud".into()));
        }
        let c1 = farthest_point_sample(cloud, LEVEL1_CENTROIDS)?;
        let g1 = grouping(cloud, &c1, LEVEL1_RADIUS);
        let mut local = Matrix::zeros(g1.members.len(), CLOUD_COLS);
        for (i, &r) in g1.members.iter().enumerate() {
            local.row_mut(i)[..3].copy_from_slice(g1.offsets.row(i));
            local.set(i, 3, cloud.get(r, 3));
        }
        let x = t.constant(local);
        let h = self.mlp1.forward(t, x)?;
        let f1 = t.group_max(h, &g1.pools);

        // second level runs over the level-1 centroids
        let mut level1 = Matrix::zeros(c1.len(), CLOUD_COLS);
        for (i, &r) in c1.iter().enumerate() {
            level1.row_mut(i).copy_from_slice(cloud.row(r));
        }
        let c2 = farthest_point_sample(&level1, LEVEL2_CENTROIDS)?;
        let g2 = grouping(&level1, &c2, LEVEL2_RADIUS);
        let feats = t.gather_rows(f1, &g2.members);
        let rel = t.constant(g2.offsets);
        let x2 = t.concat_cols(&[feats, rel]);
        let h2 = self.mlp2.forward(t, x2)?;
        let f2 = t.group_max(h2, &g2.pools);
        Ok(t.group_max(f2, &[(0..LEVEL2_CENTROIDS).collect()]))
    }

    pub fn encode(&self, t: &mut Tape<'_>, cloud: &Matrix) -> Result<Var> {
        let g = self.global_feature(t, cloud)?;
        let p = self.proj.forward(t, g)?;
        let offsets = t.param(self.offsets);
        let n = t.shape(offsets).0;
        let tiled = t.repeat_rows(p, n);
        let tokens = t.add(tiled, offsets);
        self.perceiver.encode(t, tokens)
    }
}
