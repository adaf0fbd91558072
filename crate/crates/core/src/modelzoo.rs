//! Named network architectures, built declaratively as [`ModelGraph`]s.
//!
//! Every model the experiments report lives here under a stable name, so
//! a training run is reproducible from `(architecture, seed, data)` alone.
//! Builders are pure: the same spec and seed yield bit-identical graphs.

use crate::nncore::{init_params, GraphBuilder, ModelGraph, NnError, RegConfig, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum ModelZooError {
    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
    #[error("bad architecture spec: {0}")]
    BadSpec(String),
}

impl From<NnError> for ModelZooError {
    fn from(e: NnError) -> Self {
        ModelZooError::BadSpec(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchName {
    Logreg,
    Moe,
    MoeC,
    Mlp2000,
    Mlp3000,
    Mlp512x256,
    MlpRes5,
    MlpA,
    MlpE,
    AeClf,
    Cnn1,
}

pub const ALL_ARCHITECTURES: [ArchName; 11] = [
    ArchName::Logreg,
    ArchName::Moe,
    ArchName::MoeC,
    ArchName::Mlp2000,
    ArchName::Mlp3000,
    ArchName::Mlp512x256,
    ArchName::MlpRes5,
    ArchName::MlpA,
    ArchName::MlpE,
    ArchName::AeClf,
    ArchName::Cnn1,
];

impl ArchName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchName::Logreg => "logreg",
            ArchName::Moe => "moe",
            ArchName::MoeC => "moe_c",
            ArchName::Mlp2000 => "mlp2000",
            ArchName::Mlp3000 => "mlp3000",
            ArchName::Mlp512x256 => "mlp512_256",
            ArchName::MlpRes5 => "mlp_res5",
            ArchName::MlpA => "mlp_a",
            ArchName::MlpE => "mlp_e",
            ArchName::AeClf => "ae_clf",
            ArchName::Cnn1 => "cnn1",
        }
    }
}

impl std::fmt::Display for ArchName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ArchName {
    type Err = ModelZooError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_ARCHITECTURES
            .iter()
            .find(|a| a.as_str() == s)
            .copied()
            .ok_or_else(|| ModelZooError::UnknownArchitecture(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
}

/// A buildable architecture description. [`ArchitectureSpec::new`] fills
/// in the published defaults for a name; fields may then be overridden
/// before calling [`build`].
#[derive(Clone, Debug)]
pub struct ArchitectureSpec {
    pub name: ArchName,
    /// Experts per class (mixture-of-experts family only).
    pub num_mixtures: usize,
    /// Hidden layer widths. Empty means "use the architecture default";
    /// when overridden, the length must match the architecture's layout.
    pub hidden_sizes: Vec<usize>,
    pub keep_prob: f64,
    /// Final activation; ignored by the moe family, whose output is the
    /// gated mixture itself.
    pub output_activation: OutputActivation,
    pub reg: RegConfig,
}

impl ArchitectureSpec {
    pub fn new(name: ArchName) -> Self {
        let output_activation = match name {
            ArchName::Mlp2000 | ArchName::Mlp3000 | ArchName::Cnn1 => OutputActivation::Softmax,
            _ => OutputActivation::Sigmoid,
        };
        let reg = match name {
            // Published default for the linear baseline.
            ArchName::Logreg => RegConfig::l2(1e-8),
            _ => RegConfig::none(),
        };
        ArchitectureSpec {
            name,
            num_mixtures: 2,
            hidden_sizes: Vec::new(),
            keep_prob: 0.5,
            output_activation,
            reg,
        }
    }

    /// Default hidden widths for architectures that have them.
    pub fn default_hidden_sizes(name: ArchName) -> Vec<usize> {
        match name {
            ArchName::Logreg | ArchName::Moe => vec![],
            ArchName::MoeC => vec![2048],
            ArchName::Mlp2000 => vec![2000, 2000],
            ArchName::Mlp3000 => vec![3000, 3000],
            ArchName::Mlp512x256 => vec![512, 256],
            ArchName::MlpRes5 => vec![784, 512, 512, 512, 256],
            ArchName::MlpA => vec![1536, 1024, 1024, 1024, 1024, 1024, 1024, 1024, 1024],
            ArchName::MlpE => vec![4096, 4096, 4096],
            ArchName::AeClf => vec![1152, 300],
            ArchName::Cnn1 => vec![6000],
        }
    }

    /// Skip pairs `(source, destination)` where 0 is the raw input and
    /// `i ≥ 1` is hidden layer i. The source is layer `a`'s output, the
    /// destination is layer `b`'s pre-activation.
    pub fn skip_pairs(name: ArchName) -> &'static [(usize, usize)] {
        match name {
            ArchName::MlpRes5 => &[(0, 3), (2, 4)],
            ArchName::MlpA => &[(0, 3), (2, 4), (4, 6), (6, 8)],
            _ => &[],
        }
    }

    fn resolved_hidden_sizes(&self) -> Result<Vec<usize>, ModelZooError> {
        let default = Self::default_hidden_sizes(self.name);
        if self.hidden_sizes.is_empty() {
            return Ok(default);
        }
        if self.hidden_sizes.len() != default.len() {
            return Err(ModelZooError::BadSpec(format!(
                "{} takes {} hidden sizes, got {}",
                self.name,
                default.len(),
                self.hidden_sizes.len()
            )));
        }
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(ModelZooError::BadSpec(
                "hidden sizes must be positive".into(),
            ));
        }
        Ok(self.hidden_sizes.clone())
    }

    fn validate(&self) -> Result<(), ModelZooError> {
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(ModelZooError::BadSpec(format!(
                "keep_prob must be in (0, 1], got {}",
                self.keep_prob
            )));
        }
        let is_moe = matches!(self.name, ArchName::Moe | ArchName::MoeC);
        if is_moe && self.num_mixtures == 0 {
            return Err(ModelZooError::BadSpec("num_mixtures must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Build and initialize the named architecture.
pub fn build<E: Scalar>(
    spec: &ArchitectureSpec,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph<E>, ModelZooError> {
    if input_dim == 0 || num_classes == 0 {
        return Err(ModelZooError::BadSpec(format!(
            "input_dim and num_classes must be positive, got {input_dim} and {num_classes}"
        )));
    }
    spec.validate()?;
    let hiddens = spec.resolved_hidden_sizes()?;
    let mut graph = match spec.name {
        ArchName::Logreg => {
            let mut b = GraphBuilder::new(input_dim);
            let logits = b.dense(b.input(), num_classes)?;
            let out = activate(&mut b, logits, spec.output_activation, num_classes)?;
            b.finish(out)?
        }
        ArchName::Moe => build_moe(input_dim, num_classes, spec.num_mixtures, None)?,
        ArchName::MoeC => build_moe(input_dim, num_classes, spec.num_mixtures, Some(hiddens[0]))?,
        ArchName::Mlp2000 | ArchName::Mlp3000 | ArchName::Mlp512x256 => {
            build_plain_mlp(input_dim, num_classes, &hiddens, spec.output_activation)?
        }
        ArchName::MlpRes5 | ArchName::MlpA => build_residual_mlp(
            input_dim,
            num_classes,
            &hiddens,
            ArchitectureSpec::skip_pairs(spec.name),
            spec.output_activation,
        )?,
        ArchName::MlpE => build_mlp_e(
            input_dim,
            num_classes,
            &hiddens,
            spec.keep_prob,
            spec.output_activation,
        )?,
        ArchName::AeClf => {
            build_plain_mlp(input_dim, num_classes, &hiddens, spec.output_activation)?
        }
        ArchName::Cnn1 => build_cnn1(
            input_dim,
            num_classes,
            hiddens[0],
            spec.keep_prob,
            spec.output_activation,
        )?,
    };
    graph.set_reg(spec.reg);
    graph.set_rng_seed(seed);
    init_params(&mut graph, seed);
    Ok(graph)
}

fn activate<E: Scalar>(
    b: &mut GraphBuilder<E>,
    logits: usize,
    activation: OutputActivation,
    num_classes: usize,
) -> Result<usize, NnError> {
    match activation {
        OutputActivation::Sigmoid => b.sigmoid(logits),
        OutputActivation::Softmax => b.softmax(logits, num_classes),
    }
}

/// Mixture of experts. Per class c there are M expert sigmoids and M+1
/// softmax gates; the extra gate routes to an implicit always-zero expert.
/// When `expert_hidden` is set, expert logits are computed from a
/// dense+ReLU hidden layer while the gates still read the raw input.
fn build_moe<E: Scalar>(
    input_dim: usize,
    num_classes: usize,
    mixtures: usize,
    expert_hidden: Option<usize>,
) -> Result<ModelGraph<E>, NnError> {
    let mut b = GraphBuilder::new(input_dim);
    let x = b.input();
    let gate_logits = b.dense_named(x, num_classes * (mixtures + 1), "gates")?;
    let gates = b.softmax(gate_logits, mixtures + 1)?;
    let expert_src = match expert_hidden {
        Some(h) => {
            let hid = b.dense_named(x, h, "expert_hidden")?;
            b.relu(hid)?
        }
        None => x,
    };
    let expert_logits = b.dense_named(expert_src, num_classes * mixtures, "experts")?;
    let experts = b.sigmoid(expert_logits)?;
    let out = b.moe_combine(gates, experts, mixtures)?;
    b.finish(out)
}

fn build_plain_mlp<E: Scalar>(
    input_dim: usize,
    num_classes: usize,
    hiddens: &[usize],
    activation: OutputActivation,
) -> Result<ModelGraph<E>, NnError> {
    let mut b = GraphBuilder::new(input_dim);
    let mut cur = b.input();
    for &h in hiddens {
        let pre = b.dense(cur, h)?;
        cur = b.relu(pre)?;
    }
    let logits = b.dense(cur, num_classes)?;
    let out = activate(&mut b, logits, activation, num_classes)?;
    b.finish(out)
}

/// MLP with projected skip connections. Every skip runs through a no-bias
/// linear projection (even when widths already match) so that zeroing the
/// projection weights reproduces the skip-free network exactly.
fn build_residual_mlp<E: Scalar>(
    input_dim: usize,
    num_classes: usize,
    hiddens: &[usize],
    skips: &[(usize, usize)],
    activation: OutputActivation,
) -> Result<ModelGraph<E>, NnError> {
    for &(a, dst) in skips {
        if dst == 0 || dst > hiddens.len() || a >= dst {
            return Err(NnError::BadGraph(format!(
                "skip ({a}, {dst}) does not fit {} hidden layers",
                hiddens.len()
            )));
        }
    }
    let mut b = GraphBuilder::new(input_dim);
    // outs[i] = output of layer i, with layer 0 = the raw input.
    let mut outs = vec![b.input()];
    for (i, &h) in hiddens.iter().enumerate() {
        let mut pre = b.dense(outs[i], h)?;
        for &(a, dst) in skips {
            if dst == i + 1 {
                let proj = b.projection(outs[a], h, false)?;
                pre = b.add(&[pre, proj])?;
            }
        }
        outs.push(b.relu(pre)?);
    }
    let logits = b.dense(*outs.last().expect("at least the input"), num_classes)?;
    let out = activate(&mut b, logits, activation, num_classes)?;
    b.finish(out)
}

/// Three wide ReLU layers with dropout after each; a single trainable
/// noise-initialized projection of the input is added to the outputs of
/// hidden layers 2 and 3 (after ReLU, before dropout).
fn build_mlp_e<E: Scalar>(
    input_dim: usize,
    num_classes: usize,
    hiddens: &[usize],
    keep_prob: f64,
    activation: OutputActivation,
) -> Result<ModelGraph<E>, NnError> {
    let [h1, h2, h3]: [usize; 3] = hiddens
        .try_into()
        .map_err(|_| NnError::BadGraph("mlp_e takes exactly three hidden sizes".into()))?;
    if h2 != h3 {
        return Err(NnError::BadGraph(
            "mlp_e shares one input projection across layers 2 and 3, so their widths must match"
                .into(),
        ));
    }
    let mut b = GraphBuilder::new(input_dim);
    let x = b.input();
    let noise = b.projection(x, h2, true)?;

    let a1 = b.dense(x, h1)?;
    let r1 = b.relu(a1)?;
    let d1 = b.dropout(r1, keep_prob)?;

    let a2 = b.dense(d1, h2)?;
    let r2 = b.relu(a2)?;
    let s2 = b.add(&[r2, noise])?;
    let d2 = b.dropout(s2, keep_prob)?;

    let a3 = b.dense(d2, h3)?;
    let r3 = b.relu(a3)?;
    let s3 = b.add(&[r3, noise])?;
    let d3 = b.dropout(s3, keep_prob)?;

    let logits = b.dense(d3, num_classes)?;
    let out = activate(&mut b, logits, activation, num_classes)?;
    b.finish(out)
}

/// 1×1 convolution over a (features, 1) layout: per-feature dense map to
/// 32 channels, degenerate max-pool kept as an explicit node, flatten,
/// one wide ReLU layer with dropout, softmax output.
fn build_cnn1<E: Scalar>(
    input_dim: usize,
    num_classes: usize,
    hidden: usize,
    keep_prob: f64,
    activation: OutputActivation,
) -> Result<ModelGraph<E>, NnError> {
    let mut b = GraphBuilder::new(input_dim);
    let x = b.input();
    let conv = b.conv1x1(x, 1, 32)?;
    let pool = b.maxpool1(conv)?;
    let flat = b.flatten(pool)?;
    let fc = b.dense(flat, hidden)?;
    let r = b.relu(fc)?;
    let d = b.dropout(r, keep_prob)?;
    let logits = b.dense(d, num_classes)?;
    let out = activate(&mut b, logits, activation, num_classes)?;
    b.finish(out)
}
