//! The full grounding network: encoders, frame heads, proposal encoder,
//! proposal graph and localization head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PoolMode, Seq, Var};
use crate::consolidation::{augment_frames, GraphVariant, ProposalEncoder, ProposalGraph};
use crate::data::Batch;
use crate::encoders::{EncoderDims, Encoders, Packed};
use crate::error::{Error, Result};
use crate::head::{
    alignment_loss_var, alignment_targets, assemble_predictions, boundary_loss_var, compute_offset_targets,
    AssemblyStatus, LocalizationHead, Prediction,
};
use crate::losses;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::proposal::{
    class_weights, generate_proposals, select_foreground, sliding_windows, BoundaryRegressor, FrameClassifier,
    FrameLabels, ProposalTuple, Segment,
};
use crate::real::Real;

/// Component switches. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Drop the classification loss and take every frame as an anchor.
    pub no_classification: bool,
    /// Replace adaptive proposals with pre-defined sliding windows.
    pub no_adaptive_proposals: bool,
    pub no_position: bool,
    pub no_graph: bool,
    pub mean_pool: bool,
    pub edge_attention: bool,
    /// Uniform instead of inverse-frequency class weights.
    pub unbalanced_loss: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `F`
    pub feature_dim: usize,
    pub vocab_size: usize,
    /// `D_in`
    pub input_dim: usize,
    /// `D`
    pub model_dim: usize,
    /// `d`
    pub pos_dim: usize,
    /// `H`
    pub heads: usize,
    /// `k`
    pub graph_layers: usize,
    pub fg_threshold: f64,
    pub window_scales: Vec<usize>,
    pub window_stride: f64,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            vocab_size: 32,
            input_dim: 64,
            model_dim: 128,
            pos_dim: 32,
            heads: 4,
            graph_layers: 2,
            fg_threshold: 0.5,
            window_scales: vec![8, 16, 32],
            window_stride: 0.5,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.feature_dim == 0 || self.vocab_size == 0 {
            return bad("feature_dim and vocab_size must be positive".into());
        }
        if self.model_dim < 4 || self.model_dim % 4 != 0 {
            return bad(format!("model_dim must be a positive multiple of 4, got {}", self.model_dim));
        }
        if self.heads == 0 || self.input_dim == 0 || self.input_dim % self.heads != 0 {
            return bad(format!(
                "input_dim {} must be a positive multiple of heads {}",
                self.input_dim, self.heads
            ));
        }
        if self.pos_dim % 2 != 0 {
            return bad(format!("pos_dim must be even, got {}", self.pos_dim));
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return bad(format!("fg_threshold must lie in (0, 1), got {}", self.fg_threshold));
        }
        if !(self.window_stride > 0.0) || self.window_scales.iter().any(|&s| s == 0) {
            return bad("window scales and stride must be positive".into());
        }
        Ok(())
    }

    /// Width of the positional embedding actually used.
    pub fn effective_pos_dim(&self) -> usize {
        if self.ablations.no_position {
            0
        } else {
            self.pos_dim
        }
    }

    /// Proposal feature width `C = D + d`.
    pub fn proposal_dim(&self) -> usize {
        self.model_dim + self.effective_pos_dim()
    }

    pub fn uses_graph(&self) -> bool {
        !self.ablations.no_graph && self.graph_layers > 0
    }
}

/// Loss weights `λ₁..λ₄` for classification, regression, alignment and
/// boundary terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub [f64; 4]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([0.1, 1.0, 1.0, 1.0])
    }
}

/// Tape nodes of each batch-mean loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub class: Var,
    pub reg: Var,
    pub align: Var,
    pub boundary: Var,
    pub total: Var,
}

impl LossTerms {
    pub const NAMES: [&'static str; 5] = ["class", "reg", "align", "boundary", "total"];

    pub fn get(&self, name: &str) -> Var {
        match name {
            "class" => self.class,
            "reg" => self.reg,
            "align" => self.align,
            "boundary" => self.boundary,
            _ => self.total,
        }
    }

    pub fn all(&self) -> [Var; 5] {
        [self.class, self.reg, self.align, self.boundary, self.total]
    }
}

/// Inference output for one video.
#[derive(Clone, Debug)]
pub struct VideoOutput {
    pub id: String,
    pub predictions: Vec<Prediction>,
    pub status: AssemblyStatus,
    pub proposal_count: usize,
    /// No frame cleared the foreground threshold, so the top-scoring frame
    /// was used alone.
    pub fallback: bool,
    pub foreground_prob: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Proposals {
    tuples: Vec<ProposalTuple>,
    groups: Vec<Seq>,
}

/// Proposals and their detached targets from one loss evaluation. Passing
/// them back in holds them fixed, which is what the analytic gradient
/// assumes.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTargets {
    proposals: Proposals,
    o: Vec<f64>,
    delta_hat: Vec<(f64, f64)>,
}

impl FrozenTargets {
    pub fn proposals(&self) -> &[ProposalTuple] {
        &self.proposals.tuples
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    encoders: Encoders,
    classifier: FrameClassifier,
    regressor: BoundaryRegressor,
    proposal_encoder: ProposalEncoder,
    graph: Option<ProposalGraph>,
    head: LocalizationHead,
}

impl Model {
    /// Builds the network and draws its initial parameters from `seed`.
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = EncoderDims {
            feature_dim: config.feature_dim,
            vocab_size: config.vocab_size,
            input_dim: config.input_dim,
            model_dim: config.model_dim,
            heads: config.heads,
        };
        let c = config.proposal_dim();
        let pool = if config.ablations.mean_pool {
            PoolMode::Mean
        } else {
            PoolMode::Max
        };
        let variant = if config.ablations.edge_attention {
            GraphVariant::EdgeAttention
        } else {
            GraphVariant::EdgeConv
        };
        let encoders = Encoders::new(&mut store, dims, &mut rng);
        let classifier = FrameClassifier::new(&mut store, config.model_dim, &mut rng);
        let regressor = BoundaryRegressor::new(&mut store, config.model_dim, &mut rng);
        let proposal_encoder = ProposalEncoder::new(&mut store, c, pool, &mut rng);
        let graph = config
            .uses_graph()
            .then(|| ProposalGraph::new(&mut store, c, config.graph_layers, variant, &mut rng));
        let head = LocalizationHead::new(&mut store, c, &mut rng);
        let model = Model {
            config,
            encoders,
            classifier,
            regressor,
            proposal_encoder,
            graph,
            head,
        };
        Ok((model, store))
    }

    /// Shared trunk: fused frames, foreground logits and `(l_s, l_e)`.
    fn trunk<T: Real>(&self, ctx: &mut Ctx<'_, T>, packed: &Packed<T>) -> Result<(Var, Var, Var)> {
        let fused = self.encoders.forward(ctx, packed)?;
        let logits = self.classifier.logits(ctx, fused.vtilde);
        let dist = self.regressor.forward(ctx, fused.vtilde, &packed.frame_seqs);
        Ok((fused.vtilde, logits, dist))
    }

    /// Proposal features `P̂` for proposals given per video; spans are
    /// offset into the packed frame rows.
    fn refine<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        vtilde: Var,
        packed: &Packed<T>,
        props: &Proposals,
    ) -> Result<Var> {
        let vprime = augment_frames(&mut ctx.tape, vtilde, &packed.frame_index, self.config.effective_pos_dim())?;
        let frame_feats = self.proposal_encoder.frame_features(ctx, vprime);
        let mut spans = Vec::with_capacity(props.tuples.len());
        for (&(start, len), &(row0, frames)) in props.groups.iter().zip(&packed.frame_seqs) {
            for p in &props.tuples[start..start + len] {
                let (lo, hi) = p.frame_span(frames);
                spans.push((row0 + lo, row0 + hi));
            }
        }
        let p = self.proposal_encoder.encode(ctx, frame_feats, &spans);
        Ok(match &self.graph {
            Some(graph) => graph.forward(ctx, p, &props.groups),
            None => p,
        })
    }

    fn distances<T: Real>(ctx: &Ctx<'_, T>, dist: Var, (row0, frames): Seq) -> (Vec<f64>, Vec<f64>) {
        let d = ctx.value(dist);
        let col = |c: usize| (0..frames).map(|t| d[[row0 + t, c]].to_f64_lossy()).collect();
        (col(0), col(1))
    }

    fn windows(&self, frames: usize) -> Vec<ProposalTuple> {
        sliding_windows(frames, &self.config.window_scales, self.config.window_stride)
    }

    /// Batch-mean losses. Proposals are anchored at ground-truth
    /// foreground frames with the current (detached) boundary distances.
    pub fn loss<T: Real>(&self, ctx: &mut Ctx<'_, T>, batch: &Batch, lambda: LossWeights) -> Result<LossTerms> {
        Ok(self.loss_with_targets(ctx, batch, lambda, None)?.0)
    }

    /// [`Model::loss`], optionally reusing proposals and targets from an
    /// earlier evaluation on the same batch.
    pub fn loss_with_targets<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        batch: &Batch,
        lambda: LossWeights,
        frozen: Option<&FrozenTargets>,
    ) -> Result<(LossTerms, FrozenTargets)> {
        let packed = Packed::<T>::from_batch(batch)?;
        let (vtilde, logits, dist) = self.trunk(ctx, &packed)?;
        let b = T::from_usize(packed.batch_size()).unwrap();

        let rows = ctx.value(logits).nrows();
        let mut cls_targets = vec![T::zero(); rows];
        let mut cls_weights = vec![T::zero(); rows];
        let mut reg_rows = Vec::new();
        let mut reg_targets = Vec::new();
        let mut reg_weights = Vec::new();
        let mut props = Proposals {
            tuples: Vec::new(),
            groups: Vec::new(),
        };
        let mut gts = Vec::new();
        for (i, &(row0, frames)) in packed.frame_seqs.iter().enumerate() {
            let (gs, ge) = batch.segments[i];
            let gt = Segment::new(gs, ge)?;
            let labels = FrameLabels::from_segment(frames, gs, ge);
            let fore: Vec<usize> = labels.foreground().collect();
            if fore.is_empty() {
                return Err(Error::Validation(format!(
                    "sample {} has no foreground frame",
                    batch.ids[i]
                )));
            }
            let weights = class_weights(&labels, !self.config.ablations.unbalanced_loss);
            for t in 0..frames {
                cls_targets[row0 + t] = if labels.is_foreground[t] { T::one() } else { T::zero() };
                cls_weights[row0 + t] = T::from_f64_lossy(weights[t]) / b;
            }
            let w_reg = T::one() / (T::from_usize(fore.len()).unwrap() * b);
            for &t in &fore {
                reg_rows.push(row0 + t);
                reg_targets.push((T::from_f64_lossy(labels.g_s[t]), T::from_f64_lossy(labels.g_e[t])));
                reg_weights.push(w_reg);
            }

            let tuples = if self.config.ablations.no_adaptive_proposals {
                self.windows(frames)
            } else {
                let (ls, le) = Self::distances(ctx, dist, (row0, frames));
                generate_proposals(&fore, &ls, &le, frames)
            };
            if tuples.is_empty() {
                return Err(Error::Validation(format!("sample {} yields no proposals", batch.ids[i])));
            }
            props.groups.push((props.tuples.len(), tuples.len()));
            props.tuples.extend(tuples);
            gts.push(gt);
        }

        let class = losses::bce_with_logits(&mut ctx.tape, logits, &cls_targets, &cls_weights);
        let reg = losses::iou_distance_loss(&mut ctx.tape, dist, &reg_rows, &reg_targets, &reg_weights);

        let targets = match frozen {
            Some(f) => {
                if f.proposals.groups.len() != props.groups.len() {
                    return Err(Error::Validation("frozen targets belong to a different batch".into()));
                }
                f.clone()
            }
            None => {
                let mut o = Vec::with_capacity(props.tuples.len());
                let mut delta_hat = Vec::with_capacity(props.tuples.len());
                for (&(start, len), &gt) in props.groups.iter().zip(&gts) {
                    let group = &props.tuples[start..start + len];
                    o.extend(alignment_targets(group, gt));
                    delta_hat.extend(compute_offset_targets(group, gt));
                }
                FrozenTargets {
                    proposals: props,
                    o,
                    delta_hat,
                }
            }
        };
        let groups = &targets.proposals.groups;
        let refined = self.refine(ctx, vtilde, &packed, &targets.proposals)?;
        let score = self.head.score_logits(ctx, refined);
        let offsets = self.head.offsets(ctx, refined);
        let align = alignment_loss_var(&mut ctx.tape, score, &targets.o, groups);
        let boundary = boundary_loss_var(&mut ctx.tape, offsets, &targets.delta_hat, groups);

        let mut lam = lambda.0.map(T::from_f64_lossy);
        if self.config.ablations.no_classification {
            lam[0] = T::zero();
        }
        let total = ctx
            .tape
            .weighted_sum(&[(class, lam[0]), (reg, lam[1]), (align, lam[2]), (boundary, lam[3])]);
        let terms = LossTerms {
            class,
            reg,
            align,
            boundary,
            total,
        };
        Ok((terms, targets))
    }

    /// Inference on a batch: adaptive proposals from predicted foreground
    /// frames, refined, scored and offset.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, batch: &Batch) -> Result<Vec<VideoOutput>> {
        let mut ctx = Ctx::new(store);
        let packed = Packed::<T>::from_batch(batch)?;
        let (vtilde, logits, dist) = self.trunk(&mut ctx, &packed)?;
        let mut props = Proposals {
            tuples: Vec::new(),
            groups: Vec::new(),
        };
        let mut probs = Vec::with_capacity(packed.batch_size());
        let mut fallbacks = Vec::with_capacity(packed.batch_size());
        for &(row0, frames) in &packed.frame_seqs {
            let lg = ctx.value(logits);
            let y: Vec<f64> = (0..frames).map(|t| lg[[row0 + t, 0]].to_f64_lossy().sigmoid()).collect();
            let adaptive = !self.config.ablations.no_adaptive_proposals && !self.config.ablations.no_classification;
            fallbacks.push(adaptive && y.iter().all(|&p| p <= self.config.fg_threshold));
            let tuples = if self.config.ablations.no_adaptive_proposals {
                self.windows(frames)
            } else {
                let picked = if self.config.ablations.no_classification {
                    (0..frames).collect()
                } else {
                    select_foreground(&y, self.config.fg_threshold, 1, frames)
                };
                let (ls, le) = Self::distances(&ctx, dist, (row0, frames));
                generate_proposals(&picked, &ls, &le, frames)
            };
            props.groups.push((props.tuples.len(), tuples.len()));
            props.tuples.extend(tuples);
            probs.push(y);
        }

        let nonempty = props.tuples.len() > 0;
        let (scores, offsets) = if nonempty {
            let refined = self.refine(&mut ctx, vtilde, &packed, &props)?;
            let s = self.head.score_logits(&mut ctx, refined);
            let o = self.head.offsets(&mut ctx, refined);
            let s: Vec<f64> = ctx.value(s).iter().map(|x| x.to_f64_lossy().sigmoid()).collect();
            let o = ctx.value(o);
            let o: Vec<(f64, f64)> = (0..o.nrows())
                .map(|r| (o[[r, 0]].to_f64_lossy(), o[[r, 1]].to_f64_lossy()))
                .collect();
            (s, o)
        } else {
            (Vec::new(), Vec::new())
        };

        let mut out = Vec::with_capacity(packed.batch_size());
        for (i, (&(start, len), y)) in props.groups.iter().zip(probs).enumerate() {
            let range = start..start + len;
            let frames = packed.frame_seqs[i].1;
            let (predictions, status) = assemble_predictions(
                &props.tuples[range.clone()],
                &offsets[range.clone()],
                &scores[range],
                frames,
            );
            out.push(VideoOutput {
                id: batch.ids[i].clone(),
                predictions,
                status,
                proposal_count: len,
                fallback: fallbacks[i],
                foreground_prob: y,
            });
        }
        Ok(out)
    }
}
