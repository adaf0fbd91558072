//! Global Average Precision at k, exactly as the competition scores it,
//! plus a deliberately naive quadratic oracle for cross-checking.
//!
//! All predictions are pooled into one list, sorted by confidence with a
//! deterministic tie-break, and scanned once:
//! `gap = Σ p(i)·Δr(i)` where `p(i)` is precision at pooled rank i and
//! `Δr(i) = 1/total_positives` at each correct prediction.

use std::collections::{BTreeSet, HashMap};

use rayon::slice::ParallelSliceMut;

use crate::datamodel::{Example, PredictionList};

pub const DEFAULT_K: usize = 20;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction for unknown video {0:?}")]
    UnknownVideo(String),
    #[error("duplicate prediction for video {0:?} label {1}")]
    DuplicatePrediction(String, u32),
}

#[derive(Clone, Debug)]
pub struct GapReport {
    pub gap: f64,
    /// N: pooled predictions after per-video truncation to k.
    pub num_predictions_pooled: usize,
    /// Σ over ground-truth videos of their label-set size (uncapped).
    pub total_positives: usize,
    /// (p(i), r(i)) at every pooled rank, when requested.
    pub precision_recall_points: Option<Vec<(f64, f64)>>,
}

/// The k highest-scoring `(label, confidence)` pairs of one score row,
/// confidence descending, ties broken by label ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(u32, f64)> {
    assert!(k >= 1, "k must be ≥ 1");
    let mut pairs: Vec<(u32, f64)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (i as u32, s))
        .collect();
    pairs.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.truncate(k);
    pairs
}

/// Ground-truth map from an example slice.
pub fn truth_from_examples(examples: &[Example]) -> HashMap<String, BTreeSet<u32>> {
    examples
        .iter()
        .map(|e| (e.video_id.clone(), e.labels.clone()))
        .collect()
}

pub fn gap_at_k(
    predictions: &[PredictionList],
    ground_truth: &HashMap<String, BTreeSet<u32>>,
    k: usize,
) -> Result<GapReport, MetricsError> {
    gap_at_k_detailed(predictions, ground_truth, k, false)
}

pub fn gap_at_k_detailed(
    predictions: &[PredictionList],
    ground_truth: &HashMap<String, BTreeSet<u32>>,
    k: usize,
    record_curve: bool,
) -> Result<GapReport, MetricsError> {
    let pooled = pool(predictions, ground_truth, k)?;
    let total_positives: usize = ground_truth.values().map(BTreeSet::len).sum();

    let mut gap = 0.0;
    let mut hits = 0usize;
    let mut points = record_curve.then(|| Vec::with_capacity(pooled.len()));
    for (i, t) in pooled.iter().enumerate() {
        if t.correct {
            hits += 1;
            gap += hits as f64 / (i + 1) as f64 / total_positives.max(1) as f64;
        }
        if let Some(points) = points.as_mut() {
            let p = hits as f64 / (i + 1) as f64;
            let r = hits as f64 / total_positives.max(1) as f64;
            points.push((p, r));
        }
    }
    Ok(GapReport {
        gap,
        num_predictions_pooled: pooled.len(),
        total_positives,
        precision_recall_points: points,
    })
}

/// Reference implementation: recomputes precision from scratch at every
/// hit, O(N²). Exists to cross-check [`gap_at_k`] in tests.
pub fn gap_oracle(
    predictions: &[PredictionList],
    ground_truth: &HashMap<String, BTreeSet<u32>>,
    k: usize,
) -> Result<f64, MetricsError> {
    let pooled = pool(predictions, ground_truth, k)?;
    let total_positives: usize = ground_truth.values().map(BTreeSet::len).sum();
    if total_positives == 0 {
        return Ok(0.0);
    }
    let mut gap = 0.0;
    for i in 0..pooled.len() {
        if pooled[i].correct {
            let correct_up_to = pooled[..=i].iter().filter(|t| t.correct).count();
            let precision = correct_up_to as f64 / (i + 1) as f64;
            gap += precision / total_positives as f64;
        }
    }
    Ok(gap)
}

struct PooledTriple {
    // Rank of the video id in ascending string order; the tie-break needs
    // string ordering and comparing interned ranks is cheaper than strings.
    video_rank: u32,
    label: u32,
    confidence: f64,
    correct: bool,
}

fn pool(
    predictions: &[PredictionList],
    ground_truth: &HashMap<String, BTreeSet<u32>>,
    k: usize,
) -> Result<Vec<PooledTriple>, MetricsError> {
    assert!(k >= 1, "k must be ≥ 1");
    let mut ids: Vec<&str> = predictions.iter().map(|p| p.video_id()).collect();
    ids.sort_unstable();
    ids.dedup();
    let rank: HashMap<&str, u32> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i as u32))
        .collect();

    let mut seen: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); ids.len()];
    let mut pooled = Vec::new();
    for list in predictions {
        let truth = ground_truth
            .get(list.video_id())
            .ok_or_else(|| MetricsError::UnknownVideo(list.video_id().to_string()))?;
        let video_rank = rank[list.video_id()];
        for &(label, confidence) in &list.pairs()[..list.len().min(k)] {
            if !seen[video_rank as usize].insert(label) {
                return Err(MetricsError::DuplicatePrediction(
                    list.video_id().to_string(),
                    label,
                ));
            }
            pooled.push(PooledTriple {
                video_rank,
                label,
                confidence,
                correct: truth.contains(&label),
            });
        }
    }
    // (video, label) pairs are unique, so the key is total and the
    // parallel unstable sort is still deterministic.
    pooled.par_sort_unstable_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.video_rank.cmp(&b.video_rank))
            .then(a.label.cmp(&b.label))
    });
    Ok(pooled)
}
