//! Video and query encoders and their co-attention fusion.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Seq, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{BiGru, Ctx, Linear, SelfAttention};
use crate::params::{glorot, ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
}

/// Valid frames and tokens of a batch, packed back to back.
#[derive(Clone, Debug)]
pub struct Packed<T> {
    /// `[R × F]` valid frames of every video.
    pub frames: Array2<T>,
    pub frame_seqs: Vec<Seq>,
    /// Original frame index of every packed row.
    pub frame_index: Vec<usize>,
    pub tokens: Vec<usize>,
    pub token_seqs: Vec<Seq>,
}

impl<T: Real> Packed<T> {
    pub fn from_batch(batch: &Batch) -> Result<Self> {
        let (b, t_max, f) = batch.features.dim();
        let mut rows = Vec::new();
        let mut frame_seqs = Vec::with_capacity(b);
        let mut frame_index = Vec::new();
        let mut tokens = Vec::new();
        let mut token_seqs = Vec::with_capacity(b);
        for i in 0..b {
            let start = frame_index.len();
            for t in 0..t_max {
                if batch.frame_mask[[i, t]] {
                    rows.push((i, t));
                    frame_index.push(t);
                }
            }
            let len = frame_index.len() - start;
            if len == 0 {
                return Err(Error::Validation(format!(
                    "sample {} has no valid frames",
                    batch.ids[i]
                )));
            }
            frame_seqs.push((start, len));

            let tstart = tokens.len();
            for (j, &tok) in batch.tokens.row(i).iter().enumerate() {
                if batch.token_mask[[i, j]] {
                    tokens.push(tok as usize);
                }
            }
            if tokens.len() == tstart {
                return Err(Error::Validation(format!(
                    "sample {} has no valid tokens",
                    batch.ids[i]
                )));
            }
            token_seqs.push((tstart, tokens.len() - tstart));
        }
        let frames = Array2::from_shape_fn((rows.len(), f), |(r, c)| {
            let (i, t) = rows[r];
            T::from_f64_lossy(batch.features[[i, t, c]] as f64)
        });
        Ok(Packed {
            frames,
            frame_seqs,
            frame_index,
            tokens,
            token_seqs,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.frame_seqs.len()
    }
}

/// Per-video co-attention intermediates.
#[derive(Clone, Copy, Debug)]
pub struct CoAttention {
    pub similarity: Var,
    pub row_softmax: Var,
    pub col_softmax: Var,
    pub a: Var,
    pub b: Var,
}

#[derive(Clone, Debug)]
pub struct Fused {
    pub v: Var,
    pub q: Var,
    /// `[R × D]` query-guided video features.
    pub vtilde: Var,
    pub per_video: Vec<CoAttention>,
}

#[derive(Clone, Debug)]
pub struct Encoders {
    pub dims: EncoderDims,
    token_embedding: ParamId,
    video_proj: Linear,
    video_attn: SelfAttention,
    video_gru: BiGru,
    query_attn: SelfAttention,
    query_gru: BiGru,
    w_s: ParamId,
    fusion_gru: BiGru,
}

impl Encoders {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, dims: EncoderDims, rng: &mut R) -> Self {
        let EncoderDims {
            feature_dim,
            vocab_size,
            input_dim,
            model_dim,
            heads,
        } = dims;
        let half = model_dim / 2;
        Encoders {
            dims,
            token_embedding: store.insert("query.embedding", glorot(vocab_size, input_dim, rng)),
            video_proj: Linear::new(store, "video.proj", feature_dim, input_dim, true, rng),
            video_attn: SelfAttention::new(store, "video.attn", input_dim, heads, rng),
            video_gru: BiGru::new(store, "video.gru", input_dim, half, rng),
            query_attn: SelfAttention::new(store, "query.attn", input_dim, heads, rng),
            query_gru: BiGru::new(store, "query.gru", input_dim, half, rng),
            w_s: store.insert("fuse.w_s", glorot(model_dim, model_dim, rng)),
            fusion_gru: BiGru::new(store, "fuse.gru", 4 * model_dim, half, rng),
        }
    }

    /// `V = BiGRU(SelfAttn(Proj(features)))`, `[R × D]`.
    pub fn encode_video<T: Real>(&self, ctx: &mut Ctx<'_, T>, frames: Var, seqs: &[Seq]) -> Result<Var> {
        let x = ctx.value(frames);
        if x.ncols() != self.dims.feature_dim {
            return Err(Error::Validation(format!(
                "features have {} columns, model expects {}",
                x.ncols(),
                self.dims.feature_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("video features contain non-finite values".into()));
        }
        let h = self.video_proj.forward(ctx, frames);
        let h = self.video_attn.forward(ctx, h, seqs);
        Ok(self.video_gru.forward(ctx, h, seqs))
    }

    /// Same pipeline over embedded tokens, `[ΣN × D]`.
    pub fn encode_query<T: Real>(&self, ctx: &mut Ctx<'_, T>, tokens: &[usize], seqs: &[Seq]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.dims.vocab_size) {
            return Err(Error::Validation(format!(
                "token {bad} outside vocabulary of {}",
                self.dims.vocab_size
            )));
        }
        let table = ctx.p(self.token_embedding);
        let h = ctx.tape.gather_rows(table, tokens);
        let h = self.query_attn.forward(ctx, h, seqs);
        Ok(self.query_gru.forward(ctx, h, seqs))
    }

    /// Co-attention fusion followed by the fusion BiGRU.
    pub fn fuse<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        v: Var,
        q: Var,
        vseqs: &[Seq],
        qseqs: &[Seq],
    ) -> Result<Fused> {
        let d = self.dims.model_dim;
        if ctx.value(v).ncols() != d || ctx.value(q).ncols() != d {
            return Err(Error::Validation(format!(
                "fusion expects width {d}, got video {} and query {}",
                ctx.value(v).ncols(),
                ctx.value(q).ncols()
            )));
        }
        if vseqs.len() != qseqs.len() {
            return Err(Error::Validation("video and query batch sizes differ".into()));
        }
        let ws = ctx.p(self.w_s);
        let qw_all = ctx.tape.matmul(q, ws);
        let mut rows = Vec::with_capacity(vseqs.len());
        let mut per_video = Vec::with_capacity(vseqs.len());
        for (&(vs, vl), &(qs, ql)) in vseqs.iter().zip(qseqs) {
            let tape = &mut ctx.tape;
            let vb = tape.slice_rows(v, vs, vl);
            let qw = tape.slice_rows(qw_all, qs, ql);
            let s = tape.matmul_t(vb, false, qw, true);
            let s_r = tape.softmax_rows(s);
            let s_c = tape.softmax_cols(s);
            let a = tape.matmul(s_r, qw);
            // S_r S_cᵀ V, associated as S_r (S_cᵀ V).
            let sc_v = tape.matmul_t(s_c, true, vb, false);
            let b = tape.matmul(s_r, sc_v);
            let va = tape.mul(vb, a);
            let vbb = tape.mul(vb, b);
            rows.push(tape.concat_cols(&[vb, va, vbb]));
            per_video.push(CoAttention {
                similarity: s,
                row_softmax: s_r,
                col_softmax: s_c,
                a,
                b,
            });
        }
        // The fusion input is [V; A; V⊙A; V⊙B]. Its A block goes through the
        // input layer as S_r (Q W_s W_A), which has query-length rows only.
        let rest = ctx.tape.concat_rows(&rows);
        let mut projected = Vec::with_capacity(2);
        for layer in self.fusion_gru.input_layers() {
            let w = ctx.p(layer.w);
            let bias = ctx.p(layer.b.expect("GRU input layers have a bias"));
            let tape = &mut ctx.tape;
            let w_v = tape.slice_rows(w, 0, d);
            let w_a = tape.slice_rows(w, d, d);
            let w_prod = tape.slice_rows(w, 2 * d, 2 * d);
            let w_rest = tape.concat_rows(&[w_v, w_prod]);
            let base = tape.affine(rest, w_rest, bias);
            let qwa = tape.matmul(qw_all, w_a);
            let parts: Vec<Var> = per_video
                .iter()
                .zip(qseqs)
                .map(|(co, &(qs, ql))| {
                    let block = tape.slice_rows(qwa, qs, ql);
                    tape.matmul(co.row_softmax, block)
                })
                .collect();
            let from_a = tape.concat_rows(&parts);
            projected.push(tape.add(base, from_a));
        }
        let vtilde = self
            .fusion_gru
            .forward_projected(ctx, [projected[0], projected[1]], vseqs);
        Ok(Fused {
            v,
            q,
            vtilde,
            per_video,
        })
    }

    /// Full encoder stack on a packed batch.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, packed: &Packed<T>) -> Result<Fused> {
        let frames = ctx.tape.constant(packed.frames.clone());
        let v = self.encode_video(ctx, frames, &packed.frame_seqs)?;
        let q = self.encode_query(ctx, &packed.tokens, &packed.token_seqs)?;
        self.fuse(ctx, v, q, &packed.frame_seqs, &packed.token_seqs)
    }
}
