//! SGD and bias-corrected Adam.

use super::{Gradients, ModelGraph, NnError, Scalar, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.base_learning_rate > 0.0) {
            return Err(NnError::BadGraph(format!(
                "base_learning_rate must be positive, got {}",
                self.base_learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::BadGraph("batch_size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::adam_default(),
            base_learning_rate: 0.01,
            batch_size: 128,
            max_steps: 1000,
        }
    }
}

struct Moments<E> {
    m_weight: Tensor2<E>,
    v_weight: Tensor2<E>,
    m_bias: Vec<E>,
    v_bias: Vec<E>,
}

/// Per-parameter optimizer state. Adam moments are allocated lazily on the
/// first step so SGD carries no memory cost.
pub struct OptimizerState<E> {
    cfg: OptimizerConfig,
    t: u64,
    moments: Vec<Option<Moments<E>>>,
}

impl<E: Scalar> OptimizerState<E> {
    pub fn new(cfg: OptimizerConfig, graph: &ModelGraph<E>) -> Self {
        OptimizerState {
            cfg,
            t: 0,
            moments: (0..graph.nodes().len()).map(|_| None).collect(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. Frozen nodes are skipped entirely.
    pub fn step(&mut self, graph: &mut ModelGraph<E>, grads: &Gradients<E>) -> Result<(), NnError> {
        if grads.per_node.len() != graph.nodes().len() {
            return Err(NnError::ShapeMismatch(
                "gradient set does not match graph".into(),
            ));
        }
        self.t += 1;
        let eta = self.cfg.base_learning_rate;
        for id in 0..graph.nodes().len() {
            if graph.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.per_node[id].as_ref() else {
                continue;
            };
            let moments = &mut self.moments[id];
            let Some(p) = graph.node_params_mut(id) else {
                continue;
            };
            if p.weight.shape() != g.weight.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "gradient shape {:?} vs parameter shape {:?} at node {id}",
                    g.weight.shape(),
                    p.weight.shape()
                )));
            }
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    sgd_update(p.weight.data_mut(), g.weight.data(), eta);
                    if let (Some(b), Some(gb)) = (p.bias.as_mut(), g.bias.as_ref()) {
                        sgd_update(b, gb, eta);
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let mom = moments.get_or_insert_with(|| Moments {
                        m_weight: Tensor2::zeros(p.weight.rows(), p.weight.cols()),
                        v_weight: Tensor2::zeros(p.weight.rows(), p.weight.cols()),
                        m_bias: vec![E::zero(); p.bias.as_ref().map_or(0, Vec::len)],
                        v_bias: vec![E::zero(); p.bias.as_ref().map_or(0, Vec::len)],
                    });
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    adam_update(
                        p.weight.data_mut(),
                        g.weight.data(),
                        mom.m_weight.data_mut(),
                        mom.v_weight.data_mut(),
                        eta,
                        beta1,
                        beta2,
                        epsilon,
                        bc1,
                        bc2,
                    );
                    if let (Some(b), Some(gb)) = (p.bias.as_mut(), g.bias.as_ref()) {
                        adam_update(
                            b,
                            gb,
                            &mut mom.m_bias,
                            &mut mom.v_bias,
                            eta,
                            beta1,
                            beta2,
                            epsilon,
                            bc1,
                            bc2,
                        );
                    }
                }
            }
        }
        Ok(())
    }
}

fn sgd_update<E: Scalar>(params: &mut [E], grads: &[E], eta: f64) {
    let eta = E::from_f64(eta);
    for (w, g) in params.iter_mut().zip(grads) {
        *w = *w - eta * *g;
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update<E: Scalar>(
    params: &mut [E],
    grads: &[E],
    m: &mut [E],
    v: &mut [E],
    eta: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    bias_correction1: f64,
    bias_correction2: f64,
) {
    let b1 = E::from_f64(beta1);
    let b2 = E::from_f64(beta2);
    let one_minus_b1 = E::from_f64(1.0 - beta1);
    let one_minus_b2 = E::from_f64(1.0 - beta2);
    let eps = E::from_f64(epsilon);
    let eta = E::from_f64(eta);
    let bc1 = E::from_f64(bias_correction1);
    let bc2 = E::from_f64(bias_correction2);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + one_minus_b1 * g;
        v[i] = b2 * v[i] + one_minus_b2 * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] = params[i] - eta * m_hat / (v_hat.sqrt() + eps);
    }
}
