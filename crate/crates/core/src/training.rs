//! Cross-entropy losses, the mini-batch training loop, and GAP monitoring.
//!
//! The loop is fully seeded: epoch shuffles derive from `shuffle_seed`,
//! dropout masks from the step index, so one `(graph seed, shuffle seed,
//! config)` triple reproduces a run bit for bit.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;

use crate::datamodel::Example;
use crate::metrics::{self, MetricsError};
use crate::nncore::{
    save_checkpoint, CheckpointError, Gradients, Mode, ModelGraph, NnError, OptimizerConfig,
    OptimizerState, Scalar, Tensor2, Workspace,
};
use crate::rng::{derive, SplitMix64};

/// Fixed number of examples the loop monitors training GAP on.
const MONITOR_SLICE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SigmoidCe,
    SoftmaxCe,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub loss: LossKind,
    /// Fold the validation set into the training pool.
    pub include_validation: bool,
    /// Evaluate training GAP every this many steps.
    pub eval_every: u64,
    pub shuffle_seed: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            loss: LossKind::SigmoidCe,
            include_validation: false,
            eval_every: 100,
            shuffle_seed: 0,
            checkpoint_path: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps_run: u64,
    pub loss_curve: Vec<(u64, f64)>,
    pub train_gap_curve: Vec<(u64, f64)>,
}

impl TrainReport {
    /// One row per step: `step,loss,gap`, the gap column filled only at
    /// evaluation steps.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "step,loss,gap")?;
        let mut gaps = self.train_gap_curve.iter().peekable();
        for &(step, loss) in &self.loss_curve {
            match gaps.peek() {
                Some(&&(gstep, gap)) if gstep == step => {
                    gaps.next();
                    writeln!(w, "{step},{loss},{gap}")?;
                }
                _ => writeln!(w, "{step},{loss},")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64, partial: TrainReport },
    #[error("softmax cross-entropy needs at least one label, row {0} has none")]
    EmptyLabelRow(usize),
    #[error("bad training input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("gap monitoring failed: {0}")]
    Metrics(#[from] MetricsError),
    #[error("checkpoint write failed: {0}")]
    Checkpoint(#[from] CheckpointError),
}

const CLIP: f64 = 1e-12;

/// Loss and its gradient with respect to the scores (post-activation).
///
/// `sigmoid_ce` averages the per-class binary cross-entropy over every
/// (example, class) cell; `softmax_ce` normalizes each multi-hot row to a
/// distribution and averages the row cross-entropies over the batch.
/// Scores are clipped to `[1e-12, 1 − 1e-12]` before the logarithms.
pub fn loss_and_grad<E: Scalar>(
    scores: &Tensor2<E>,
    targets: &Tensor2<E>,
    kind: LossKind,
) -> Result<(f64, Tensor2<E>), TrainError> {
    if scores.shape() != targets.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "scores shape {:?} vs targets shape {:?}",
            scores.shape(),
            targets.shape()
        ))
        .into());
    }
    let (rows, cols) = scores.shape();
    let mut grad = Tensor2::<E>::zeros(rows, cols);
    let mut loss = 0.0;
    match kind {
        LossKind::SigmoidCe => {
            let scale = 1.0 / (rows * cols) as f64;
            for r in 0..rows {
                for c in 0..cols {
                    let s = scores.get(r, c).to_f64().clamp(CLIP, 1.0 - CLIP);
                    let y = targets.get(r, c).to_f64();
                    loss -= scale * (y * s.ln() + (1.0 - y) * (1.0 - s).ln());
                    grad.set(r, c, E::from_f64(scale * (-y / s + (1.0 - y) / (1.0 - s))));
                }
            }
        }
        LossKind::SoftmaxCe => {
            let scale = 1.0 / rows as f64;
            for r in 0..rows {
                let positives: f64 = (0..cols).map(|c| targets.get(r, c).to_f64()).sum();
                if positives == 0.0 {
                    return Err(TrainError::EmptyLabelRow(r));
                }
                for c in 0..cols {
                    let t = targets.get(r, c).to_f64() / positives;
                    if t == 0.0 {
                        continue;
                    }
                    let s = scores.get(r, c).to_f64().clamp(CLIP, 1.0 - CLIP);
                    loss -= scale * t * s.ln();
                    grad.set(r, c, E::from_f64(-scale * t / s));
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Score examples in batches and keep each row's top-k pairs.
pub fn score_examples<E: Scalar>(
    graph: &ModelGraph<E>,
    examples: &[Example],
    k: usize,
    batch_size: usize,
) -> Result<Vec<crate::datamodel::PredictionList>, TrainError> {
    let mut out = Vec::with_capacity(examples.len());
    let mut ws = Workspace::new();
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = features_tensor::<E>(chunk, graph.input_dim())?;
        let scores = graph.forward(&batch, Mode::Infer, &mut ws)?;
        for (i, e) in chunk.iter().enumerate() {
            let row: Vec<f64> = scores.row(i).iter().map(|&v| v.to_f64()).collect();
            let pairs = metrics::top_k(&row, k);
            out.push(
                crate::datamodel::PredictionList::new(e.video_id.clone(), pairs)
                    .expect("top_k emits unique labels and finite confidences"),
            );
        }
    }
    Ok(out)
}

pub fn train<E: Scalar>(
    graph: &mut ModelGraph<E>,
    data: &[Example],
    val_data: Option<&[Example]>,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if cfg.eval_every == 0 {
        return Err(TrainError::BadInput("eval_every must be ≥ 1".into()));
    }
    cfg.optimizer.validate()?;
    if data.is_empty() {
        return Err(TrainError::BadInput("training dataset is empty".into()));
    }

    let mut pool: Vec<&Example> = data.iter().collect();
    if cfg.include_validation {
        pool.extend(val_data.unwrap_or_default());
    }
    let input_dim = graph.input_dim();
    let num_classes = graph.output_dim();
    for e in &pool {
        if e.features.len() != input_dim {
            return Err(TrainError::BadInput(format!(
                "example {:?} has {} features, model expects {input_dim}",
                e.video_id,
                e.features.len()
            )));
        }
        if let Some(&l) = e.labels.iter().next_back() {
            if l as usize >= num_classes {
                return Err(TrainError::BadInput(format!(
                    "example {:?} label {l} outside model's {num_classes} classes",
                    e.video_id
                )));
            }
        }
    }

    // Fixed monitoring slice: the first examples of the pool in input
    // order, unaffected by shuffling (they still train).
    let monitor: Vec<Example> = pool[..pool.len().min(MONITOR_SLICE)]
        .iter()
        .map(|&e| e.clone())
        .collect();
    let monitor_truth = metrics::truth_from_examples(&monitor);

    let mut report = TrainReport::default();
    let mut opt = OptimizerState::new(cfg.optimizer, graph);
    let mut ws = Workspace::new();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut pos = pool.len(); // forces a shuffle before the first batch
    let mut epoch: u64 = 0;

    for step in 1..=cfg.optimizer.max_steps {
        if pos >= order.len() {
            SplitMix64::new(derive(cfg.shuffle_seed, epoch)).shuffle(&mut order);
            epoch += 1;
            pos = 0;
        }
        let end = (pos + cfg.optimizer.batch_size).min(order.len());
        let batch_refs: Vec<&Example> = order[pos..end].iter().map(|&i| pool[i]).collect();
        pos = end;

        let batch = features_tensor_refs::<E>(&batch_refs, input_dim);
        let targets = targets_tensor::<E>(&batch_refs, num_classes);

        ws.set_mask_salt(step);
        let scores = match graph.forward(&batch, Mode::Train, &mut ws) {
            Ok(s) => s,
            Err(NnError::NonFiniteValue { .. }) => {
                report.steps_run = step - 1;
                return Err(TrainError::NonFiniteLoss {
                    step,
                    partial: report,
                });
            }
            Err(e) => return Err(e.into()),
        };
        let (loss, grad) = loss_and_grad(scores, &targets, cfg.loss)?;
        if !loss.is_finite() {
            report.steps_run = step - 1;
            return Err(TrainError::NonFiniteLoss {
                step,
                partial: report,
            });
        }
        report.loss_curve.push((step, loss));

        let grads: Gradients<E> = graph.backward(&ws, &grad)?;
        opt.step(graph, &grads)?;
        report.steps_run = step;

        if step % cfg.eval_every == 0 {
            let preds = score_examples(graph, &monitor, metrics::DEFAULT_K, 256)?;
            let gap = metrics::gap_at_k(&preds, &monitor_truth, metrics::DEFAULT_K)?;
            report.train_gap_curve.push((step, gap.gap));
        }
    }

    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(graph, path)?;
    }
    Ok(report)
}

pub(crate) fn features_tensor<E: Scalar>(
    examples: &[Example],
    input_dim: usize,
) -> Result<Tensor2<E>, TrainError> {
    let refs: Vec<&Example> = examples.iter().collect();
    for e in &refs {
        if e.features.len() != input_dim {
            return Err(TrainError::BadInput(format!(
                "example {:?} has {} features, model expects {input_dim}",
                e.video_id,
                e.features.len()
            )));
        }
    }
    Ok(features_tensor_refs(&refs, input_dim))
}

pub(crate) fn features_tensor_refs<E: Scalar>(
    examples: &[&Example],
    input_dim: usize,
) -> Tensor2<E> {
    let mut data = Vec::with_capacity(examples.len() * input_dim);
    for e in examples {
        data.extend(e.features.concat().map(|f| E::from_f64(f as f64)));
    }
    Tensor2::from_vec(examples.len(), input_dim, data)
}

pub(crate) fn targets_tensor<E: Scalar>(examples: &[&Example], num_classes: usize) -> Tensor2<E> {
    let mut t = Tensor2::zeros(examples.len(), num_classes);
    for (r, e) in examples.iter().enumerate() {
        for &l in &e.labels {
            t.set(r, l as usize, E::one());
        }
    }
    t
}

/// Ground truth in the shape [`metrics::gap_at_k`] expects.
pub fn truth_map(examples: &[Example]) -> std::collections::HashMap<String, BTreeSet<u32>> {
    metrics::truth_from_examples(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::FeatureVector;
    use crate::modelzoo::{build, ArchName, ArchitectureSpec};

    fn t(rows: usize, cols: usize, vals: &[f64]) -> Tensor2<f64> {
        Tensor2::from_f64(rows, cols, vals)
    }

    #[test]
    fn sigmoid_ce_at_half_is_ln_two() {
        let scores = t(2, 3, &[0.5; 6]);
        let targets = t(2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let (loss, _) = loss_and_grad(&scores, &targets, LossKind::SigmoidCe).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_scores_have_negligible_loss() {
        let eps = 1e-12;
        let scores = t(1, 3, &[1.0 - eps, eps, 1.0 - eps]);
        let targets = t(1, 3, &[1.0, 0.0, 1.0]);
        let (loss, _) = loss_and_grad(&scores, &targets, LossKind::SigmoidCe).unwrap();
        assert!(loss <= 1e-11, "loss {loss}");
    }

    #[test]
    fn softmax_ce_normalizes_multihot_targets() {
        // Two positives out of four, scores uniform: loss = −Σ ½ ln ¼ = ln 4.
        let scores = t(1, 4, &[0.25; 4]);
        let targets = t(1, 4, &[1.0, 0.0, 1.0, 0.0]);
        let (loss, _) = loss_and_grad(&scores, &targets, LossKind::SoftmaxCe).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_ce_rejects_empty_label_rows() {
        let scores = t(2, 3, &[0.3; 6]);
        let targets = t(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let err = loss_and_grad(&scores, &targets, LossKind::SoftmaxCe).unwrap_err();
        assert!(matches!(err, TrainError::EmptyLabelRow(1)));
    }

    #[test]
    fn loss_shapes_must_agree() {
        let scores = t(2, 3, &[0.5; 6]);
        let targets = t(3, 2, &[0.0; 6]);
        assert!(matches!(
            loss_and_grad(&scores, &targets, LossKind::SigmoidCe),
            Err(TrainError::Nn(NnError::ShapeMismatch(_)))
        ));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(77);
        for kind in [LossKind::SigmoidCe, LossKind::SoftmaxCe] {
            let scores_v: Vec<f64> = (0..20).map(|_| 0.05 + 0.9 * rng.next_f64()).collect();
            let targets_v: Vec<f64> = {
                // Guarantee at least one positive per row for softmax_ce.
                let mut t = vec![0.0; 20];
                for r in 0..4 {
                    t[r * 5 + (rng.next_u64() % 5) as usize] = 1.0;
                    for c in 0..5 {
                        if rng.next_f64() < 0.3 {
                            t[r * 5 + c] = 1.0;
                        }
                    }
                }
                t
            };
            let scores = t(4, 5, &scores_v);
            let targets = t(4, 5, &targets_v);
            let (_, grad) = loss_and_grad(&scores, &targets, kind).unwrap();
            let h = 1e-6;
            for i in 0..20 {
                let mut plus = scores_v.clone();
                plus[i] += h;
                let mut minus = scores_v.clone();
                minus[i] -= h;
                let (lp, _) = loss_and_grad(&t(4, 5, &plus), &targets, kind).unwrap();
                let (lm, _) = loss_and_grad(&t(4, 5, &minus), &targets, kind).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grad.data()[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-12);
                assert!(
                    ((analytic - numeric).abs() / denom) < 1e-6,
                    "{kind:?} coord {i}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    fn toy_set(prefix: &str, n: usize, dim: usize, classes: u32, seed: u64) -> Vec<Example> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|i| {
                let rgb: Vec<f32> = (0..dim)
                    .map(|_| (rng.next_f64() * 2.0 - 1.0) as f32)
                    .collect();
                let mut labels = BTreeSet::new();
                labels.insert((rng.next_u64() % classes as u64) as u32);
                Example {
                    video_id: format!("{prefix}{i:05}"),
                    labels,
                    features: FeatureVector { rgb, audio: vec![] },
                }
            })
            .collect()
    }

    fn toy_examples(n: usize, dim: usize, classes: u32, seed: u64) -> Vec<Example> {
        toy_set("toy", n, dim, classes, seed)
    }

    fn toy_graph(seed: u64) -> ModelGraph<f64> {
        build(&ArchitectureSpec::new(ArchName::Logreg), 8, 4, seed).unwrap()
    }

    fn quick_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig {
                batch_size: 16,
                max_steps: steps,
                ..Default::default()
            },
            eval_every: 10,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let mut g = toy_graph(3);
        let snapshot: Vec<f64> = g.node_params(1).unwrap().weight.data().to_vec();
        let data = toy_examples(40, 8, 4, 1);
        let report = train(&mut g, &data, None, &quick_cfg(0)).unwrap();
        assert_eq!(report.steps_run, 0);
        assert!(report.loss_curve.is_empty());
        assert!(report.train_gap_curve.is_empty());
        assert_eq!(g.node_params(1).unwrap().weight.data(), snapshot);
    }

    #[test]
    fn same_seed_reproduces_the_report_bit_for_bit() {
        let data = toy_examples(60, 8, 4, 2);
        let run = || {
            let mut g = toy_graph(5);
            train(&mut g, &data, None, &quick_cfg(25)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tiny_learning_rate_keeps_loss_flat() {
        let data = toy_examples(40, 8, 4, 3);
        let mut g = toy_graph(1);
        let cfg = TrainConfig {
            optimizer: OptimizerConfig {
                kind: crate::nncore::OptimizerKind::Sgd,
                base_learning_rate: 1e-12,
                batch_size: 40,
                max_steps: 20,
            },
            ..Default::default()
        };
        let report = train(&mut g, &data, None, &cfg).unwrap();
        let first = report.loss_curve.first().unwrap().1;
        for &(_, l) in &report.loss_curve {
            assert!((l - first).abs() < 1e-9);
        }
    }

    #[test]
    fn training_lowers_the_loss_endpoint() {
        let data = toy_examples(120, 8, 4, 4);
        let mut g = toy_graph(2);
        let report = train(&mut g, &data, None, &quick_cfg(120)).unwrap();
        let first = report.loss_curve.first().unwrap().1;
        let last = report.loss_curve.last().unwrap().1;
        assert!(last < first, "loss went {first} → {last}");
        assert!(!report.train_gap_curve.is_empty());
    }

    #[test]
    fn empty_validation_set_is_a_no_op() {
        let data = toy_examples(50, 8, 4, 5);
        let mut cfg = quick_cfg(30);
        cfg.include_validation = true;
        let mut a = toy_graph(9);
        let with_empty = train(&mut a, &data, Some(&[]), &cfg).unwrap();
        cfg.include_validation = false;
        let mut b = toy_graph(9);
        let without = train(&mut b, &data, None, &cfg).unwrap();
        assert_eq!(with_empty, without);
        assert_eq!(
            a.node_params(1).unwrap().weight.data(),
            b.node_params(1).unwrap().weight.data()
        );
    }

    #[test]
    fn include_validation_changes_the_pool() {
        let data = toy_examples(50, 8, 4, 6);
        let val = toy_set("val", 30, 8, 4, 7);
        let mut cfg = quick_cfg(30);
        cfg.include_validation = true;
        let mut a = toy_graph(4);
        let merged = train(&mut a, &data, Some(&val), &cfg).unwrap();
        cfg.include_validation = false;
        let mut b = toy_graph(4);
        let plain = train(&mut b, &data, Some(&val), &cfg).unwrap();
        assert_ne!(merged, plain);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut g = toy_graph(0);
        assert!(matches!(
            train(&mut g, &[], None, &quick_cfg(5)),
            Err(TrainError::BadInput(_))
        ));
    }

    #[test]
    fn feature_width_mismatch_is_rejected() {
        let mut g = toy_graph(0);
        let data = toy_examples(10, 6, 4, 8);
        assert!(matches!(
            train(&mut g, &data, None, &quick_cfg(5)),
            Err(TrainError::BadInput(_))
        ));
    }

    #[test]
    fn non_finite_loss_aborts_with_partial_report() {
        let data = toy_examples(40, 8, 4, 9);
        let mut g = toy_graph(1);
        // A nonsensically large learning rate blows the logits up until an
        // activation or the loss stops being finite.
        let cfg = TrainConfig {
            optimizer: OptimizerConfig {
                kind: crate::nncore::OptimizerKind::Sgd,
                base_learning_rate: 1e18,
                batch_size: 40,
                max_steps: 50,
            },
            ..Default::default()
        };
        match train(&mut g, &data, None, &cfg) {
            Err(TrainError::NonFiniteLoss { step, partial }) => {
                assert!(step >= 1);
                assert_eq!(partial.steps_run, step - 1);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn csv_export_interleaves_gap_rows() {
        let report = TrainReport {
            steps_run: 3,
            loss_curve: vec![(1, 0.5), (2, 0.25), (3, 0.125)],
            train_gap_curve: vec![(2, 0.75)],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,loss,gap\n1,0.5,\n2,0.25,0.75\n3,0.125,\n");
    }

    #[test]
    fn checkpoint_is_written_when_requested() {
        let dir = std::env::temp_dir().join(format!("train-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.ytck");
        let data = toy_examples(30, 8, 4, 10);
        let mut g = toy_graph(6);
        let mut cfg = quick_cfg(10);
        cfg.checkpoint_path = Some(path.clone());
        train(&mut g, &data, None, &cfg).unwrap();
        let loaded: ModelGraph<f64> = crate::nncore::load_checkpoint(&path).unwrap();
        assert_eq!(
            loaded.node_params(1).unwrap(),
            g.node_params(1).unwrap(),
            "checkpoint holds the trained parameters"
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
