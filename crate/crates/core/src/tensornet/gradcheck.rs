//! Finite-difference verification of analytic gradients.
//!
//! Perturbs parameter coordinates one at a time, reevaluates the loss, and
//! compares the central difference against the backward pass. Intended for
//! `f64` graphs; single precision cannot resolve the differences these
//! checks rely on.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::scalar::Scalar;

use super::{Graph, Mode, Tensor, ValueId};

/// Summary of one gradient check run.
#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    /// Parameter coordinates compared.
    pub checked_coords: usize,
    /// Largest relative error observed.
    pub max_rel_err: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
}

/// Compares analytic parameter gradients against central differences.
///
/// Every parameter is visited; within a parameter at most
/// `max_coords_per_param` coordinates are sampled (deterministically from
/// `seed`). The relative error of a coordinate is
/// `|fd - analytic| / (max(|fd|, |analytic|) + 1e-8)`; coordinates whose
/// absolute difference is below `1e-8` count as exact.
pub fn check_param_gradients<S: Scalar>(
    graph: &mut Graph<S>,
    feeds: &[(ValueId, Tensor<S>)],
    loss: ValueId,
    eps: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckOutcome> {
    let tape = graph.forward(feeds, Mode::GradCheck)?;
    let grads = graph.backward(&tape, loss)?;
    let analytic: Vec<Option<Vec<f64>>> = graph
        .param_grads(&grads)
        .into_iter()
        .map(|g| g.map(|t| t.data().iter().map(|v| v.to_f64_lossy()).collect()))
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut outcome = GradCheckOutcome {
        checked_coords: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
    };

    for p in 0..graph.param_count() {
        let Some(grad) = &analytic[p] else { continue };
        let numel = graph.param_tensor(p).numel();
        let coords: Vec<usize> = if numel <= max_coords_per_param {
            (0..numel).collect()
        } else {
            // Sample without replacement so no coordinate is double-counted.
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < max_coords_per_param {
                seen.insert(rng.random_range(0..numel));
            }
            seen.into_iter().collect()
        };

        for &j in &coords {
            let original = graph.param_tensor(p).data()[j];
            let h = S::from_f64_lossy(eps);

            graph.param_tensor_mut(p).data_mut()[j] = original + h;
            let plus = loss_value(graph, feeds, loss)?;
            graph.param_tensor_mut(p).data_mut()[j] = original - h;
            let minus = loss_value(graph, feeds, loss)?;
            graph.param_tensor_mut(p).data_mut()[j] = original;

            let fd = (plus - minus) / (2.0 * eps);
            let an = grad[j];
            let diff = (fd - an).abs();
            let rel = if diff <= 1e-8 {
                0.0
            } else {
                diff / (fd.abs().max(an.abs()) + 1e-8)
            };
            outcome.checked_coords += 1;
            if rel > outcome.max_rel_err {
                outcome.max_rel_err = rel;
                outcome.worst_param = graph.param_name(p).to_string();
            }
        }
    }
    Ok(outcome)
}

fn loss_value<S: Scalar>(
    graph: &mut Graph<S>,
    feeds: &[(ValueId, Tensor<S>)],
    loss: ValueId,
) -> Result<f64> {
    let tape = graph.forward(feeds, Mode::GradCheck)?;
    Ok(tape.value(loss).scalar_value().to_f64_lossy())
}
