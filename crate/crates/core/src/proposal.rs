//! Foreground classification, boundary regression and adaptive proposals.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Seq, Var};
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{Conv1d, Ctx, Mlp};
use crate::params::ParamStore;
use crate::real::Real;

/// Closed interval on the frame axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start <= end) {
            return Err(Error::Validation(format!(
                "segment start {start} is after end {end}"
            )));
        }
        Ok(Segment { start, end })
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

/// Intersection over union of two segments on the real line.
pub fn iou_1d(a: Segment, b: Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Per-frame foreground labels and ground-truth boundary distances.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabels {
    pub is_foreground: Vec<bool>,
    pub g_s: Vec<f64>,
    pub g_e: Vec<f64>,
}

impl FrameLabels {
    pub fn from_segment(frames: usize, start: f64, end: f64) -> Self {
        let mut labels = FrameLabels {
            is_foreground: vec![false; frames],
            g_s: vec![0.0; frames],
            g_e: vec![0.0; frames],
        };
        for t in 0..frames {
            let tf = t as f64;
            if start <= tf && tf <= end {
                labels.is_foreground[t] = true;
                labels.g_s[t] = tf - start;
                labels.g_e[t] = end - tf;
            }
        }
        labels
    }

    pub fn frames(&self) -> usize {
        self.is_foreground.len()
    }

    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.is_foreground
            .iter()
            .enumerate()
            .filter_map(|(t, &f)| f.then_some(t))
    }

    pub fn fore_count(&self) -> usize {
        self.is_foreground.iter().filter(|&&f| f).count()
    }

    pub fn back_count(&self) -> usize {
        self.frames() - self.fore_count()
    }
}

/// Per-frame weights of the classification loss.
///
/// Balanced: foreground frames weigh `T_back / T` and background frames
/// `T_fore / T`. A video with a single class falls back to unit weights.
/// Unbalanced: one uniform weight with the same total mass.
pub fn class_weights(labels: &FrameLabels, balanced: bool) -> Vec<f64> {
    let t = labels.frames() as f64;
    let (fore, back) = (labels.fore_count() as f64, labels.back_count() as f64);
    if fore == 0.0 || back == 0.0 {
        log::warn!("single-class video: classification loss falls back to plain BCE");
        return vec![1.0; labels.frames()];
    }
    if !balanced {
        return vec![2.0 * fore * back / (t * t); labels.frames()];
    }
    labels
        .is_foreground
        .iter()
        .map(|&f| if f { back / t } else { fore / t })
        .collect()
}

/// Balanced binary cross-entropy over foreground probabilities `y`.
pub fn balanced_class_loss(y: &[f64], labels: &FrameLabels) -> f64 {
    class_weights(labels, true)
        .iter()
        .zip(y)
        .zip(&labels.is_foreground)
        .map(|((&w, &p), &f)| if f { -w * p.ln() } else { -w * (1.0 - p).ln() })
        .sum()
}

/// Mean `1 − IoU` between predicted and true anchored segments over the
/// foreground frames.
pub fn regression_loss(l_s: &[f64], l_e: &[f64], labels: &FrameLabels) -> Result<f64> {
    let fore: Vec<usize> = labels.foreground().collect();
    if fore.is_empty() {
        return Err(Error::Validation(
            "regression loss needs at least one foreground frame".into(),
        ));
    }
    let total: f64 = fore
        .iter()
        .map(|&t| 1.0 - losses::anchored_iou((l_s[t], l_e[t]), (labels.g_s[t], labels.g_e[t])).0)
        .sum();
    Ok(total / fore.len() as f64)
}

/// Frames with `y > threshold`, topped up to `min_count` and capped at
/// `max_count` by descending score (lower index wins ties). Returned in
/// ascending frame order.
pub fn select_foreground(y: &[f64], threshold: f64, min_count: usize, max_count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| {
        y[b].partial_cmp(&y[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let above = order.iter().take_while(|&&t| y[t] > threshold).count();
    let keep = above.max(min_count).min(max_count).min(y.len());
    let mut picked = order[..keep].to_vec();
    picked.sort_unstable();
    picked
}

/// Segment `[t − l_s, t + l_e]` generated at anchor frame `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalTuple {
    pub anchor: usize,
    pub start: f64,
    pub end: f64,
}

impl ProposalTuple {
    pub fn segment(&self) -> Segment {
        Segment {
            start: self.start,
            end: self.end,
        }
    }

    /// Inclusive frame span `[⌈start⌉, ⌊end⌋]`; a span that rounds to
    /// nothing collapses onto the anchor frame.
    pub fn frame_span(&self, frames: usize) -> (usize, usize) {
        let last = frames.saturating_sub(1) as f64;
        let lo = self.start.ceil().clamp(0.0, last);
        let hi = self.end.floor().clamp(0.0, last);
        if lo > hi {
            (self.anchor, self.anchor)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// One proposal per selected frame, clamped to `[0, frames − 1]`.
pub fn generate_proposals(indices: &[usize], l_s: &[f64], l_e: &[f64], frames: usize) -> Vec<ProposalTuple> {
    let last = frames.saturating_sub(1) as f64;
    indices
        .iter()
        .map(|&t| {
            let tf = t as f64;
            ProposalTuple {
                anchor: t,
                start: (tf - l_s[t]).clamp(0.0, last),
                end: (tf + l_e[t]).clamp(0.0, last),
            }
        })
        .collect()
}

/// Pre-defined windows of `scale` frames every `stride · scale` frames,
/// for each scale that fits in the video. Each window is anchored at its
/// middle frame.
pub fn sliding_windows(frames: usize, scales: &[usize], stride: f64) -> Vec<ProposalTuple> {
    let mut out = Vec::new();
    for &scale in scales {
        if scale == 0 || scale > frames {
            continue;
        }
        let step = (stride * scale as f64).max(1.0);
        let count = ((frames - scale) as f64 / step).floor() as usize + 1;
        for k in 0..count {
            let start = (k as f64 * step).floor();
            let end = start + scale as f64 - 1.0;
            out.push(ProposalTuple {
                anchor: ((start + end) / 2.0).floor() as usize,
                start,
                end,
            });
        }
    }
    out
}

/// Three per-frame affine layers `D → D/2 → D/4 → 1`; emits logits.
#[derive(Clone, Debug)]
pub struct FrameClassifier {
    mlp: Mlp,
}

impl FrameClassifier {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) -> Self {
        FrameClassifier {
            mlp: Mlp::new(store, "cls", &[dim, dim / 2, dim / 4, 1], rng),
        }
    }

    /// Foreground logits `[R × 1]`; probabilities are their sigmoid.
    pub fn logits<T: Real>(&self, ctx: &mut Ctx<'_, T>, vtilde: Var) -> Var {
        self.mlp.forward(ctx, vtilde)
    }
}

/// Three kernel-3 temporal convolutions `D → D/2 → D/4 → 2` with a
/// softplus on the output, giving `(l_s, l_e) ≥ 0` per frame.
#[derive(Clone, Debug)]
pub struct BoundaryRegressor {
    convs: [Conv1d; 3],
}

impl BoundaryRegressor {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) -> Self {
        BoundaryRegressor {
            convs: [
                Conv1d::new(store, "reg.c1", dim, dim / 2, rng),
                Conv1d::new(store, "reg.c2", dim / 2, dim / 4, rng),
                Conv1d::new(store, "reg.c3", dim / 4, 2, rng),
            ],
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, vtilde: Var, seqs: &[Seq]) -> Var {
        let mut x = vtilde;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(ctx, x, seqs);
            x = ctx.tape.act(
                x,
                if i < 2 {
                    Activation::Relu
                } else {
                    Activation::Softplus
                },
            );
        }
        x
    }
}
