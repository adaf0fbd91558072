//! Deterministic parameter initialization.
//!
//! Every parameterized node draws from its own stream keyed by the node
//! *name*, so two graphs that build the same layers in the same order get
//! bit-identical parameters even when their node ids differ (e.g. a
//! residual net and its skip-free twin).

use super::{LayerKind, ModelGraph, Scalar};
use crate::rng::{derive, fnv1a, SplitMix64};

/// Fill all parameters in place and store `seed` as the graph's RNG seed
/// (which also keys dropout masks).
///
/// Dense and conv weights are Glorot-uniform in ±sqrt(6/(fan_in+fan_out));
/// biases are zero; projections marked `noisy` use N(0, 0.01²) instead.
pub fn init_params<E: Scalar>(graph: &mut ModelGraph<E>, seed: u64) {
    graph.set_rng_seed(seed);
    let init_tag = fnv1a(b"init");
    for id in 0..graph.nodes().len() {
        let node = graph.node(id);
        let kind = node.kind;
        let name_hash = fnv1a(node.name.as_bytes());
        let Some(params) = graph.node_params_mut(id) else {
            continue;
        };
        let mut rng = SplitMix64::new(derive(derive(seed, init_tag), name_hash));
        let (rows, cols) = params.weight.shape();
        let noisy = matches!(kind, LayerKind::Projection { noisy: true, .. });
        if noisy {
            for w in params.weight.data_mut() {
                *w = E::from_f64(0.01 * rng.next_normal());
            }
        } else {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            for w in params.weight.data_mut() {
                *w = E::from_f64((2.0 * rng.next_f64() - 1.0) * bound);
            }
        }
        if let Some(bias) = params.bias.as_mut() {
            for b in bias.iter_mut() {
                *b = E::zero();
            }
        }
    }
}
