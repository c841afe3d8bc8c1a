//! Proposal encoder (positional embedding, per-frame MLP, pooling) and the
//! fully connected proposal graph.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PoolMode, Seq, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mlp};
use crate::params::{glorot, ParamId, ParamStore};
use crate::real::Real;

/// Sinusoidal embedding: `sin(t / 10000^(2j/d))` at even index `2j`,
/// the matching cosine at `2j + 1`.
pub fn positional_embedding(t: f64, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional embedding width must be even, got {d}"
        )));
    }
    let mut emb = vec![0.0; d];
    for j in 0..d / 2 {
        let angle = t / 10000f64.powf(2.0 * j as f64 / d as f64);
        emb[2 * j] = angle.sin();
        emb[2 * j + 1] = angle.cos();
    }
    Ok(emb)
}

/// Embedding rows for a list of frame indices.
pub fn positional_matrix<T: Real>(frame_index: &[usize], d: usize) -> Result<Array2<T>> {
    let mut m = Array2::zeros((frame_index.len(), d));
    for (r, &t) in frame_index.iter().enumerate() {
        for (c, v) in positional_embedding(t as f64, d)?.into_iter().enumerate() {
            m[[r, c]] = T::from_f64_lossy(v);
        }
    }
    Ok(m)
}

/// `[ṽ_t ; emb(t)]` for every packed frame; identity when `d == 0`.
pub fn augment_frames<T: Real>(
    tape: &mut Tape<T>,
    vtilde: Var,
    frame_index: &[usize],
    d: usize,
) -> Result<Var> {
    if d == 0 {
        return Ok(vtilde);
    }
    let pos = tape.constant(positional_matrix(frame_index, d)?);
    Ok(tape.concat_cols(&[vtilde, pos]))
}

/// `p = MLP₂(Pool(MLP₁(frames in span)))`.
#[derive(Clone, Debug)]
pub struct ProposalEncoder {
    mlp1: Mlp,
    mlp2: Mlp,
    pub pool: PoolMode,
}

impl ProposalEncoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, width: usize, pool: PoolMode, rng: &mut R) -> Self {
        ProposalEncoder {
            mlp1: Mlp::new(store, "prop.mlp1", &[width, width, width], rng),
            mlp2: Mlp::new(store, "prop.mlp2", &[width, width, width], rng),
            pool,
        }
    }

    /// MLP₁ on every augmented frame row.
    pub fn frame_features<T: Real>(&self, ctx: &mut Ctx<'_, T>, vprime: Var) -> Var {
        self.mlp1.forward(ctx, vprime)
    }

    /// Pools `frame_feats` over inclusive absolute row spans, then MLP₂.
    pub fn encode<T: Real>(&self, ctx: &mut Ctx<'_, T>, frame_feats: Var, spans: &[(usize, usize)]) -> Var {
        let pooled = ctx.tape.segment_pool(frame_feats, spans, self.pool);
        self.mlp2.forward(ctx, pooled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphVariant {
    #[default]
    EdgeConv,
    EdgeAttention,
}

#[derive(Clone, Debug)]
pub struct GraphLayer {
    pub theta1: ParamId,
    pub theta2: ParamId,
}

/// Edge convolution over the complete graph of each group of rows
/// (self-pairs included):
/// `p̂_t = max_t' ReLU(p_t θ₁ + (p_t' − p_t) θ₂)`.
///
/// Because ReLU is monotone and `p_t (θ₁ − θ₂)` does not depend on `t'`,
/// the max over pairs equals `ReLU(p_t θ₁ − p_t θ₂ + max_t' p_t' θ₂)`,
/// which costs `O(M)` instead of `O(M²)` rows.
pub fn edge_conv<T: Real>(tape: &mut Tape<T>, p: Var, theta1: Var, theta2: Var, groups: &[Seq]) -> Var {
    let x1 = tape.matmul(p, theta1);
    let x2 = tape.matmul(p, theta2);
    let own = tape.sub(x1, x2);
    let best = tape.group_max(x2, groups);
    let pre = tape.add(own, best);
    tape.relu(pre)
}

/// Similarity-weighted variant: the max over neighbours is replaced by a
/// softmax(p_t · p_t' / √C)-weighted sum of `(p_t' − p_t) θ₂`.
pub fn edge_attention<T: Real>(
    tape: &mut Tape<T>,
    p: Var,
    theta1: Var,
    theta2: Var,
    groups: &[Seq],
) -> Var {
    let width = tape.value(p).ncols();
    let scale = T::one() / T::from_usize(width).unwrap().sqrt();
    let x1 = tape.matmul(p, theta1);
    let x2 = tape.matmul(p, theta2);
    let mut parts = Vec::with_capacity(groups.len());
    for &(start, len) in groups {
        let pg = tape.slice_rows(p, start, len);
        let sim = tape.matmul_t(pg, false, pg, true);
        let sim = tape.scale(sim, scale);
        let w = tape.softmax_rows(sim);
        let x2g = tape.slice_rows(x2, start, len);
        parts.push(tape.matmul(w, x2g));
    }
    let agg = tape.concat_rows(&parts);
    let own = tape.sub(x1, x2);
    let pre = tape.add(own, agg);
    tape.relu(pre)
}

/// `k` stacked graph layers of width `C`.
#[derive(Clone, Debug)]
pub struct ProposalGraph {
    pub layers: Vec<GraphLayer>,
    pub variant: GraphVariant,
}

impl ProposalGraph {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        width: usize,
        depth: usize,
        variant: GraphVariant,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| GraphLayer {
                theta1: store.insert(format!("graph.{l}.theta1"), glorot(width, width, rng)),
                theta2: store.insert(format!("graph.{l}.theta2"), glorot(width, width, rng)),
            })
            .collect();
        ProposalGraph { layers, variant }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, mut p: Var, groups: &[Seq]) -> Var {
        for layer in &self.layers {
            let (t1, t2) = (ctx.p(layer.theta1), ctx.p(layer.theta2));
            p = match self.variant {
                GraphVariant::EdgeConv => edge_conv(&mut ctx.tape, p, t1, t2, groups),
                GraphVariant::EdgeAttention => edge_attention(&mut ctx.tape, p, t1, t2, groups),
            };
        }
        p
    }
}

/// One edge-convolution layer on a single complete graph.
pub fn edge_conv_layer<T: Real>(p: &Array2<T>, theta1: &Array2<T>, theta2: &Array2<T>) -> Array2<T> {
    consolidate(p, &[(theta1.clone(), theta2.clone())])
}

/// Sequential edge-convolution layers on a single complete graph.
pub fn consolidate<T: Real>(p: &Array2<T>, layers: &[(Array2<T>, Array2<T>)]) -> Array2<T> {
    let mut tape = Tape::new();
    let mut x = tape.constant(p.clone());
    let groups = [(0, p.nrows())];
    for (t1, t2) in layers {
        let (a, b) = (tape.constant(t1.clone()), tape.constant(t2.clone()));
        x = edge_conv(&mut tape, x, a, b, &groups);
    }
    tape.value(x).clone()
}
