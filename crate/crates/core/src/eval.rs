//! Ranking, "R@n, IoU=m" recall, throughput and proposal-count reports.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, VideoSample};
use crate::error::{Error, Result};
use crate::head::Prediction;
use crate::model::{Model, VideoOutput};
use crate::params::ParamStore;
use crate::proposal::{iou_1d, Segment};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_values: Vec<usize>,
    pub m_values: Vec<f64>,
    /// `false` ranks the raw top `n` without suppression.
    pub nms: bool,
    pub nms_threshold: f64,
    /// Candidates considered before suppression; 0 keeps all.
    pub top_pool: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_values: vec![1, 5],
            m_values: vec![0.5, 0.7],
            nms: true,
            nms_threshold: 0.55,
            top_pool: 0,
            batch_size: 32,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(Error::Config("n values must be at least 1".into()));
        }
        if self.m_values.is_empty() || self.m_values.iter().any(|&m| !(m > 0.0 && m <= 1.0)) {
            return Err(Error::Config("m values must lie in (0, 1]".into()));
        }
        let t = self.nms_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("NMS threshold must lie in (0, 1], got {t}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Threshold in effect, `None` when suppression is off.
    pub fn suppression(&self) -> Option<f64> {
        self.nms.then_some(self.nms_threshold)
    }

    fn max_n(&self) -> usize {
        self.n_values.iter().copied().max().unwrap_or(1)
    }
}

/// Score descending, then smaller anchor first.
pub fn rank(predictions: &[Prediction]) -> Vec<Prediction> {
    let mut sorted = predictions.to_vec();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.anchor.cmp(&b.anchor))
    });
    sorted
}

/// Top `n` after greedy suppression of predictions overlapping a kept one
/// by more than `nms_threshold`.
pub fn rank_and_select(predictions: &[Prediction], n: usize, nms_threshold: Option<f64>) -> Vec<Prediction> {
    let mut kept: Vec<Prediction> = Vec::with_capacity(n);
    for p in rank(predictions) {
        if kept.len() == n {
            break;
        }
        let suppressed = nms_threshold.is_some_and(|t| kept.iter().any(|k| iou_1d(k.segment, p.segment) > t));
        if !suppressed {
            kept.push(p);
        }
    }
    kept
}

/// Percentage of videos whose first `n` segments include one with IoU
/// strictly above `m`; a video without predictions is a miss.
pub fn recall_at_n_iou(top: &[Vec<Segment>], gts: &[Segment], n: usize, m: f64) -> f64 {
    assert_eq!(top.len(), gts.len());
    if gts.is_empty() {
        return 0.0;
    }
    let hits = top
        .iter()
        .zip(gts)
        .filter(|(preds, &gt)| preds.iter().take(n).any(|&p| iou_1d(p, gt) > m))
        .count();
    100.0 * hits as f64 / gts.len() as f64
}

/// `Σ_s ⌊(T − s) / (stride · s)⌋ + 1` over scales that fit.
pub fn baseline_proposal_count(frames: usize, scales: &[usize], stride: f64) -> usize {
    scales
        .iter()
        .filter(|&&s| s > 0 && s <= frames)
        .map(|&s| ((frames - s) as f64 / (stride * s as f64).max(1.0)).floor() as usize + 1)
        .sum()
}

/// Mean proposal count over inference outputs.
pub fn adaptive_proposal_count(outputs: &[VideoOutput]) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    outputs.iter().map(|o| o.proposal_count as f64).sum::<f64>() / outputs.len() as f64
}

/// Adaptive proposal count against the sliding-window baseline on the same
/// videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalComparison {
    pub adaptive_mean: f64,
    pub baseline_mean: f64,
    /// `adaptive_mean / baseline_mean`
    pub ratio: f64,
}

pub fn proposal_comparison(outputs: &[VideoOutput], frames: &[usize], scales: &[usize], stride: f64) -> ProposalComparison {
    let adaptive_mean = adaptive_proposal_count(outputs);
    let baseline_mean = if frames.is_empty() {
        0.0
    } else {
        frames
            .iter()
            .map(|&t| baseline_proposal_count(t, scales, stride) as f64)
            .sum::<f64>()
            / frames.len() as f64
    };
    ProposalComparison {
        adaptive_mean: sig6(adaptive_mean),
        baseline_mean: sig6(baseline_mean),
        ratio: sig6(if baseline_mean > 0.0 { adaptive_mean / baseline_mean } else { f64::NAN }),
    }
}

/// Rounds to six significant digits for stable reports.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let digits = 5 - x.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits);
    (x * scale).round() / scale
}

/// Key of a recall cell, e.g. `R@1,IoU=0.5`.
pub fn recall_key(n: usize, m: f64) -> String {
    format!("R@{n},IoU={m}")
}

/// Inference over a dataset in batches, spread over the rayon pool. Output
/// order follows `samples` whatever the thread count.
pub fn infer<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[VideoSample],
    batch_size: usize,
) -> Result<Vec<VideoOutput>> {
    let batches: Vec<Vec<VideoOutput>> = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&VideoSample> = chunk.iter().collect();
            model.predict(store, &Batch::from_samples(&refs)?)
        })
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub videos: usize,
    pub nms_threshold: Option<f64>,
    /// Keyed by [`recall_key`].
    pub recall: BTreeMap<String, f64>,
    pub mean_proposals: f64,
    pub empty_videos: usize,
}

/// Recall table for precomputed outputs.
pub fn recall_report(outputs: &[VideoOutput], gts: &[Segment], config: &EvalConfig) -> Result<RecallReport> {
    config.validate()?;
    let pool = |preds: &[Prediction]| -> Vec<Prediction> {
        let ranked = rank(preds);
        if config.top_pool == 0 {
            ranked
        } else {
            ranked.into_iter().take(config.top_pool).collect()
        }
    };
    let top: Vec<Vec<Segment>> = outputs
        .iter()
        .map(|o| {
            rank_and_select(&pool(&o.predictions), config.max_n(), config.suppression())
                .iter()
                .map(|p| p.segment)
                .collect()
        })
        .collect();
    let mut recall = BTreeMap::new();
    for &n in &config.n_values {
        for &m in &config.m_values {
            recall.insert(recall_key(n, m), sig6(recall_at_n_iou(&top, gts, n, m)));
        }
    }
    Ok(RecallReport {
        videos: outputs.len(),
        nms_threshold: config.suppression(),
        recall,
        mean_proposals: sig6(adaptive_proposal_count(outputs)),
        empty_videos: outputs.iter().filter(|o| o.predictions.is_empty()).count(),
    })
}

/// Runs inference and scores it against the samples' annotations.
pub fn evaluate<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[VideoSample],
    config: &EvalConfig,
) -> Result<RecallReport> {
    config.validate()?;
    let outputs = infer(model, store, samples, config.batch_size)?;
    let gts = samples
        .iter()
        .map(|s| Segment::new(s.gt_start, s.gt_end))
        .collect::<Result<Vec<_>>>()?;
    recall_report(&outputs, &gts, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// Median videos per second over the timed repeats.
    pub vps: f64,
    pub param_count: usize,
    pub repeats: usize,
    pub videos: usize,
}

/// Times the full inference path after one warm-up pass.
pub fn benchmark_throughput<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[VideoSample],
    repeats: usize,
    batch_size: usize,
) -> Result<ThroughputReport> {
    if samples.is_empty() || repeats == 0 {
        return Err(Error::Validation("benchmark needs samples and at least one repeat".into()));
    }
    infer(model, store, samples, batch_size)?;
    let mut rates = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = infer(model, store, samples, batch_size)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        rates.push(out.len() as f64 / secs);
    }
    rates.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mid = rates.len() / 2;
    let vps = if rates.len() % 2 == 1 {
        rates[mid]
    } else {
        0.5 * (rates[mid - 1] + rates[mid])
    };
    Ok(ThroughputReport {
        vps: sig6(vps),
        param_count: store.scalar_count(),
        repeats,
        videos: samples.len(),
    })
}
