//! Three fusion strategies: in-graph output averaging, stacking with a
//! meta network, and submission-file averaging.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::datamodel::PredictionList;
use crate::modelzoo::ArchitectureSpec;
use crate::nncore::{
    init_params, GraphBuilder, Mode, ModelGraph, NnError, Scalar, Tensor2, Workspace,
};
use crate::submission::{parse_submission, SubmissionError, SubmissionWriter};

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least two members, got {0}")]
    TooFewMembers(usize),
    #[error("bad ensemble spec: {0}")]
    BadSpec(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: SubmissionError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleKind {
    AverageModels,
    StackModels,
    AverageFiles,
}

/// One ensemble member: either a trained model on disk or an
/// architecture to build and train in place.
#[derive(Clone, Debug)]
pub enum MemberSource {
    File(PathBuf),
    Architecture(ArchitectureSpec),
}

#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub kind: EnsembleKind,
    pub members: Vec<MemberSource>,
    pub meta: Option<ArchitectureSpec>,
    pub k: usize,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.members.len() < 2 {
            return Err(EnsembleError::TooFewMembers(self.members.len()));
        }
        if self.k == 0 {
            return Err(EnsembleError::BadSpec("k must be ≥ 1".into()));
        }
        if self.kind == EnsembleKind::AverageFiles
            && self
                .members
                .iter()
                .any(|m| !matches!(m, MemberSource::File(_)))
        {
            return Err(EnsembleError::BadSpec(
                "file averaging takes submission files, not architectures".into(),
            ));
        }
        if self.meta.is_some() && self.kind != EnsembleKind::StackModels {
            return Err(EnsembleError::BadSpec(
                "only stacking uses a meta architecture".into(),
            ));
        }
        Ok(())
    }
}

/// Arithmetic mean of the members' forward outputs (sum × 1/n).
///
/// With a power-of-two member count the mean of identical members is
/// bit-identical to a single member; odd counts can round in the last ulp.
pub fn average_models<E: Scalar>(
    graphs: &[ModelGraph<E>],
    batch: &Tensor2<E>,
) -> Result<Tensor2<E>, NnError> {
    let first = graphs
        .first()
        .ok_or_else(|| NnError::ShapeMismatch("average of zero models".into()))?;
    let (in_dim, out_dim) = (first.input_dim(), first.output_dim());
    if graphs
        .iter()
        .any(|g| g.input_dim() != in_dim || g.output_dim() != out_dim)
    {
        return Err(NnError::ShapeMismatch(
            "ensemble members must share input and output widths".into(),
        ));
    }
    let mut sum = first.infer(batch)?;
    for g in &graphs[1..] {
        let y = g.infer(batch)?;
        for (a, &b) in sum.data_mut().iter_mut().zip(y.data()) {
            *a += b;
        }
    }
    let inv = E::from_f64(1.0 / graphs.len() as f64);
    for v in sum.data_mut() {
        *v *= inv;
    }
    Ok(sum)
}

/// Mean-of-members analogue of [`crate::training::score_examples`]:
/// batches the examples, averages the members' scores, and keeps each
/// video's top-k pairs.
pub fn score_averaged<E: Scalar>(
    graphs: &[ModelGraph<E>],
    examples: &[crate::datamodel::Example],
    k: usize,
    batch_size: usize,
) -> Result<Vec<PredictionList>, crate::training::TrainError> {
    let input_dim = graphs
        .first()
        .map(|g| g.input_dim())
        .ok_or_else(|| NnError::ShapeMismatch("average of zero models".into()))?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = crate::training::features_tensor::<E>(chunk, input_dim)?;
        let scores = average_models(graphs, &batch)?;
        for (i, e) in chunk.iter().enumerate() {
            let row: Vec<f64> = scores.row(i).iter().map(|&v| v.to_f64()).collect();
            let pairs = crate::metrics::top_k(&row, k);
            out.push(
                PredictionList::new(e.video_id.clone(), pairs)
                    .expect("top_k emits unique labels and finite confidences"),
            );
        }
    }
    Ok(out)
}

/// Fuse members and a meta network into one trainable graph: shared
/// input, member outputs concatenated and fed to the meta. Member node
/// names gain an `m{i}.` prefix, meta names a `meta.` prefix; all
/// parameters are copied in, so trained members keep their weights.
/// Gradients flow end to end unless `freeze_members` pins the member
/// parameters. The fused graph takes its rng seed and regularization
/// from the meta.
pub fn stack_graphs<E: Scalar>(
    members: &[ModelGraph<E>],
    meta: &ModelGraph<E>,
    freeze_members: bool,
) -> Result<ModelGraph<E>, EnsembleError> {
    let first = members.first().ok_or(EnsembleError::TooFewMembers(0))?;
    let input_dim = first.input_dim();
    if members.iter().any(|m| m.input_dim() != input_dim) {
        return Err(NnError::ShapeMismatch("members must share input width".into()).into());
    }
    let concat_dim: usize = members.iter().map(|m| m.output_dim()).sum();
    if meta.input_dim() != concat_dim {
        return Err(NnError::ShapeMismatch(format!(
            "meta expects input width {}, member outputs concatenate to {concat_dim}",
            meta.input_dim()
        ))
        .into());
    }
    let mut b = GraphBuilder::new(input_dim);
    let x = b.input();
    let mut outs = Vec::with_capacity(members.len());
    for (i, m) in members.iter().enumerate() {
        outs.push(b.splice(m, x, &format!("m{i}."))?);
    }
    let fed = if outs.len() == 1 {
        outs[0]
    } else {
        b.concat(&outs)?
    };
    let out = b.splice(meta, fed, "meta.")?;
    let mut g = b.finish(out)?;
    g.set_rng_seed(meta.rng_seed());
    g.set_reg(meta.reg());
    if freeze_members {
        for i in 0..members.len() {
            g.freeze_by_prefix(&format!("m{i}."));
        }
    }
    Ok(g)
}

/// One stacked forward pass: concatenate member outputs, run the meta.
pub fn stack_models<E: Scalar>(
    members: &[ModelGraph<E>],
    meta: &ModelGraph<E>,
    batch: &Tensor2<E>,
    mode: Mode,
) -> Result<Tensor2<E>, EnsembleError> {
    let g = stack_graphs(members, meta, false)?;
    let mut ws = Workspace::new();
    Ok(g.forward(batch, mode, &mut ws)?.clone())
}

/// The published meta network: one dense+ReLU hidden layer of 2048,
/// dropout keep 0.5, sigmoid output.
pub fn default_meta<E: Scalar>(
    concat_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph<E>, NnError> {
    default_meta_with(concat_dim, num_classes, 2048, 0.5, seed)
}

pub fn default_meta_with<E: Scalar>(
    concat_dim: usize,
    num_classes: usize,
    hidden: usize,
    keep_prob: f64,
    seed: u64,
) -> Result<ModelGraph<E>, NnError> {
    let mut b = GraphBuilder::new(concat_dim);
    let x = b.input();
    let h = b.dense(x, hidden)?;
    let r = b.relu(h)?;
    let d = b.dropout(r, keep_prob)?;
    let o = b.dense(d, num_classes)?;
    let s = b.sigmoid(o)?;
    let mut g = b.finish(s)?;
    g.set_rng_seed(seed);
    init_params(&mut g, seed);
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AverageFilesReport {
    pub rows_written: usize,
    pub files: usize,
    /// The files did not cover the same video set (union semantics
    /// applied). A warning, never an error.
    pub video_set_mismatch: bool,
}

/// Average n submission files label-wise: a label missing from a file
/// counts as confidence 0 there, the denominator is always n. Emits the
/// union of all videos, each re-truncated to its top-k, in ascending
/// video-id order.
pub fn average_files(
    paths: &[PathBuf],
    k: usize,
    out_path: &Path,
) -> Result<AverageFilesReport, EnsembleError> {
    if paths.len() < 2 {
        return Err(EnsembleError::TooFewMembers(paths.len()));
    }
    if k == 0 {
        return Err(EnsembleError::BadSpec("k must be ≥ 1".into()));
    }
    let attr = |path: &Path| {
        let path = path.to_path_buf();
        move |source: SubmissionError| EnsembleError::File {
            path: path.clone(),
            source,
        }
    };

    struct Acc {
        seen_in: usize,
        pairs: Vec<(u32, f64)>,
    }
    let mut map: BTreeMap<String, Acc> = BTreeMap::new();
    for path in paths {
        let err = attr(path);
        let reader = parse_submission(path, None).map_err(&err)?;
        for row in reader {
            let row = row.map_err(&err)?;
            let acc = map.entry(row.video_id().to_string()).or_insert(Acc {
                seen_in: 0,
                pairs: Vec::new(),
            });
            acc.seen_in += 1;
            acc.pairs.extend_from_slice(row.pairs());
        }
    }
    let video_set_mismatch = map.values().any(|a| a.seen_in != paths.len());

    let inv_n = 1.0 / paths.len() as f64;
    let err = attr(out_path);
    let out = BufWriter::new(File::create(out_path).map_err(|e| err(e.into()))?);
    let mut w = SubmissionWriter::new(out).map_err(&err)?;
    for (video, mut acc) in map {
        // Summation order is pinned (label, then confidence) so the
        // result is exactly invariant to file-argument order.
        acc.pairs
            .sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut averaged: Vec<(u32, f64)> = Vec::new();
        for &(label, conf) in &acc.pairs {
            match averaged.last_mut() {
                Some(last) if last.0 == label => last.1 += conf,
                _ => averaged.push((label, conf)),
            }
        }
        for p in averaged.iter_mut() {
            p.1 *= inv_n;
        }
        let list = PredictionList::new(video, averaged)
            .expect("grouped labels are unique and confidences finite")
            .truncated(k);
        w.write_list(&list).map_err(&err)?;
    }
    let rows_written = w.finish().map_err(&err)?;
    Ok(AverageFilesReport {
        rows_written,
        files: paths.len(),
        video_set_mismatch,
    })
}
