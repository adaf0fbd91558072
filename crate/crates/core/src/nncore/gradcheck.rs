//! Central-difference gradient checking.
//!
//! The caller supplies the analytic gradients and a deterministic scalar
//! objective over the graph's current parameters (data loss plus
//! regularization penalty, with dropout masks pinned by a fixed salt).
//! Each sampled parameter coordinate is nudged ±step and the symmetric
//! difference quotient is compared against the analytic entry.

use super::graph::{Gradients, ModelGraph};
use super::Scalar;
use crate::rng::{derive, fnv1a, SplitMix64};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Differences below this are treated as zero regardless of scale,
    /// so near-zero analytic/numeric pairs do not blow up the ratio.
    pub abs_floor: f64,
    /// Cap on coordinates checked per tensor; larger tensors are sampled.
    pub max_coords_per_tensor: usize,
    /// Seed for the coordinate sampler.
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-8,
            max_coords_per_tensor: 48,
            sample_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    Weight,
    Bias,
}

/// The single worst coordinate seen during a check.
#[derive(Clone, Debug)]
pub struct WorstCoord {
    pub node: usize,
    pub name: String,
    pub slot: ParamSlot,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub worst: Option<WorstCoord>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck: {} coords, max rel err {:.3e} (tol {:.1e})",
            self.coords_checked, self.max_rel_err, self.tolerance
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst at node {} ({}) {:?}[{}]: analytic {:.6e} vs numeric {:.6e}",
                w.node, w.name, w.slot, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Sample up to `cap` distinct indices out of `len`, in ascending order.
fn sample_indices(len: usize, cap: usize, seed: u64) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    let mut rng = SplitMix64::new(seed);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < cap {
        picked.insert((rng.next_u64() % len as u64) as usize);
    }
    picked.into_iter().collect()
}

fn read_coord<E: Scalar>(graph: &ModelGraph<E>, id: usize, slot: ParamSlot, index: usize) -> f64 {
    let p = graph.node_params(id).expect("parameterized node");
    match slot {
        ParamSlot::Weight => p.weight.data()[index].to_f64(),
        ParamSlot::Bias => p.bias.as_ref().expect("bias present")[index].to_f64(),
    }
}

fn write_coord<E: Scalar>(
    graph: &mut ModelGraph<E>,
    id: usize,
    slot: ParamSlot,
    index: usize,
    value: f64,
) {
    let p = graph.node_params_mut(id).expect("parameterized node");
    match slot {
        ParamSlot::Weight => p.weight.data_mut()[index] = E::from_f64(value),
        ParamSlot::Bias => p.bias.as_mut().expect("bias present")[index] = E::from_f64(value),
    }
}

/// Compare `analytic` against central finite differences of `objective`.
///
/// `objective` must be a pure function of the graph's parameters: same
/// batch, same dropout salt, regularization penalty included if and only
/// if `analytic` includes the regularization gradient. The graph's
/// parameters are restored exactly after every probe.
pub fn check_gradients<E, F>(
    graph: &mut ModelGraph<E>,
    analytic: &Gradients<E>,
    mut objective: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    E: Scalar,
    F: FnMut(&mut ModelGraph<E>) -> f64,
{
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        tolerance: opts.tolerance,
        worst: None,
    };
    let param_nodes: Vec<usize> = graph.params().map(|(id, _)| id).collect();
    for id in param_nodes {
        let name = graph.node(id).name.clone();
        let node_seed = derive(opts.sample_seed, fnv1a(name.as_bytes()));
        let (w_len, b_len) = {
            let p = graph.node_params(id).expect("parameterized node");
            (p.weight.data().len(), p.bias.as_ref().map_or(0, Vec::len))
        };
        let slots = [
            (ParamSlot::Weight, w_len, 0u64),
            (ParamSlot::Bias, b_len, 1u64),
        ];
        for (slot, len, salt) in slots {
            if len == 0 {
                continue;
            }
            for index in sample_indices(len, opts.max_coords_per_tensor, derive(node_seed, salt)) {
                let orig = read_coord(graph, id, slot, index);
                write_coord(graph, id, slot, index, orig + opts.step);
                let f_plus = objective(graph);
                write_coord(graph, id, slot, index, orig - opts.step);
                let f_minus = objective(graph);
                write_coord(graph, id, slot, index, orig);

                let numeric = (f_plus - f_minus) / (2.0 * opts.step);
                let a = analytic.get(id).map_or(0.0, |g| match slot {
                    ParamSlot::Weight => g.weight.data()[index].to_f64(),
                    ParamSlot::Bias => g.bias.as_ref().map_or(0.0, |b| b[index].to_f64()),
                });
                let err = rel_err(a, numeric, opts.abs_floor);
                report.coords_checked += 1;
                report.max_rel_err = report.max_rel_err.max(err);
                if report.worst.as_ref().map_or(true, |w| err > w.rel_err) {
                    report.worst = Some(WorstCoord {
                        node: id,
                        name: name.clone(),
                        slot,
                        index,
                        analytic: a,
                        numeric,
                        rel_err: err,
                    });
                }
            }
        }
    }
    report
}
