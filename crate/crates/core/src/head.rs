//! Proposal scoring, boundary offsets and final segment assembly.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Seq, Tape, Var};
use crate::losses;
use crate::nn::{Ctx, Mlp};
use crate::params::ParamStore;
use crate::proposal::{iou_1d, ProposalTuple, Segment};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub segment: Segment,
    pub score: f64,
    pub anchor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyStatus {
    Ok,
    /// No proposals reached the head.
    Empty,
}

/// Score head `MLP₃` (`C → C → 1`, sigmoid applied by callers) and offset
/// head `MLP₄` (`C → C → 2`).
#[derive(Clone, Debug)]
pub struct LocalizationHead {
    score: Mlp,
    offset: Mlp,
}

impl LocalizationHead {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, width: usize, rng: &mut R) -> Self {
        LocalizationHead {
            score: Mlp::new(store, "head.score", &[width, width, 1], rng),
            offset: Mlp::new(store, "head.offset", &[width, width, 2], rng),
        }
    }

    /// Score logits `[M × 1]`.
    pub fn score_logits<T: Real>(&self, ctx: &mut Ctx<'_, T>, refined: Var) -> Var {
        self.score.forward(ctx, refined)
    }

    /// Offsets `(δ_s, δ_e)` as `[M × 2]`.
    pub fn offsets<T: Real>(&self, ctx: &mut Ctx<'_, T>, refined: Var) -> Var {
        self.offset.forward(ctx, refined)
    }
}

/// `δ̂ = (τ_s − start, τ_e − end)` so that the offset proposal lands on
/// the ground truth exactly.
pub fn compute_offset_targets(proposals: &[ProposalTuple], gt: Segment) -> Vec<(f64, f64)> {
    proposals
        .iter()
        .map(|p| (gt.start - p.start, gt.end - p.end))
        .collect()
}

/// IoU of every pre-offset proposal with the ground truth.
pub fn alignment_targets(proposals: &[ProposalTuple], gt: Segment) -> Vec<f64> {
    proposals.iter().map(|p| iou_1d(p.segment(), gt)).collect()
}

/// `−(1/M) Σ o log r + (1 − o) log(1 − r)`.
pub fn alignment_loss(r: &[f64], o: &[f64]) -> f64 {
    let m = r.len() as f64;
    -r.iter()
        .zip(o)
        .map(|(&r, &o)| o * r.ln() + (1.0 - o) * (1.0 - r).ln())
        .sum::<f64>()
        / m
}

/// `(1/M) Σ SL₁(δ̂_s − δ_s) + SL₁(δ̂_e − δ_e)`.
pub fn boundary_loss(delta: &[(f64, f64)], target: &[(f64, f64)]) -> f64 {
    let m = delta.len() as f64;
    delta
        .iter()
        .zip(target)
        .map(|(d, t)| losses::smooth_l1(t.0 - d.0) + losses::smooth_l1(t.1 - d.1))
        .sum::<f64>()
        / m
}

/// Per-row weights `1 / (|group| · groups)`: each group's mean, averaged
/// over groups.
fn group_mean_weights<T: Real>(rows: usize, groups: &[Seq]) -> Vec<T> {
    let mut w = vec![T::zero(); rows];
    let g = T::from_usize(groups.len()).unwrap();
    for &(start, len) in groups {
        let v = T::one() / (T::from_usize(len).unwrap() * g);
        w[start..start + len].fill(v);
    }
    w
}

/// Alignment loss on score logits with `o` held constant, averaged per
/// group then over groups.
pub fn alignment_loss_var<T: Real>(tape: &mut Tape<T>, logits: Var, o: &[f64], groups: &[Seq]) -> Var {
    let targets: Vec<T> = o.iter().map(|&x| T::from_f64_lossy(x)).collect();
    let w = group_mean_weights(o.len(), groups);
    losses::bce_with_logits(tape, logits, &targets, &w)
}

/// Boundary loss on the `[M × 2]` offset output, grouped like
/// [`alignment_loss_var`].
pub fn boundary_loss_var<T: Real>(tape: &mut Tape<T>, offsets: Var, target: &[(f64, f64)], groups: &[Seq]) -> Var {
    let t = Array2::from_shape_fn((target.len(), 2), |(i, j)| {
        T::from_f64_lossy(if j == 0 { target[i].0 } else { target[i].1 })
    });
    let w = group_mean_weights(target.len(), groups);
    losses::smooth_l1_loss(tape, offsets, &t, &w)
}

/// Applies offsets to proposals: swap an inverted segment, then clamp to
/// `[0, frames − 1]`.
pub fn assemble_predictions(
    proposals: &[ProposalTuple],
    offsets: &[(f64, f64)],
    scores: &[f64],
    frames: usize,
) -> (Vec<Prediction>, AssemblyStatus) {
    assert_eq!(proposals.len(), offsets.len());
    assert_eq!(proposals.len(), scores.len());
    if proposals.is_empty() {
        return (Vec::new(), AssemblyStatus::Empty);
    }
    let last = frames.saturating_sub(1) as f64;
    let preds = proposals
        .iter()
        .zip(offsets)
        .zip(scores)
        .map(|((p, &(ds, de)), &score)| {
            let (mut s, mut e) = (p.start + ds, p.end + de);
            if s > e {
                std::mem::swap(&mut s, &mut e);
            }
            Prediction {
                segment: Segment {
                    start: s.clamp(0.0, last),
                    end: e.clamp(0.0, last),
                },
                score,
                anchor: p.anchor,
            }
        })
        .collect();
    (preds, AssemblyStatus::Ok)
}
