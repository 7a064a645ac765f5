//! Gradient-checking helpers shared by unit and integration tests.
//!
//! Compiled only for tests (or under the `test-utils` feature), never into
//! the release library.

use rand::Rng;

use crate::error::Result;
use crate::nn::{backward, forward, GraphSpec, Mode, ParamSet};
use crate::optim::{one_hot, softmax_cross_entropy};
use crate::rng::{substream, tags};
use crate::tensor::Tensor;

/// Symmetric relative error with an absolute floor so near-zero pairs
/// compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Random batch in [0,1] plus alternating labels, for gradient checks.
pub fn random_batch(n: usize, h: usize, w: usize, c: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = substream(seed, &[0xbeef]);
    let data: Vec<f64> = (0..n * h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
    let batch = Tensor::new(vec![n, h, w, c], data).expect("length matches shape");
    let labels = (0..n).map(|i| i % 2).collect();
    (batch, labels)
}

/// Central-difference gradient check over a whole graph.
///
/// Initializes parameters from `seed`, computes analytic gradients of the
/// cross-entropy loss once, then compares them against central differences
/// at up to `samples_per_entry` randomly chosen coordinates of every
/// trainable parameter tensor. Returns the worst relative error.
///
/// Each loss evaluation re-creates the same dropout substream, so the loss
/// is a deterministic function of the parameters even through dropout.
pub fn fd_check_graph(
    spec: &GraphSpec,
    batch: &Tensor,
    labels: &[usize],
    seed: u64,
    samples_per_entry: usize,
    h: f64,
) -> Result<f64> {
    fd_check_graph_ladder(spec, batch, labels, seed, samples_per_entry, &[h], 0.0)
}

/// Variant of [`fd_check_graph`] that scores each coordinate by its best
/// step size in `hs`, moving to the next step only while the error is
/// still at or above `tol`.
///
/// One step size cannot serve every coordinate of a deep graph: a large
/// step gets corrupted whenever the perturbation carries some activation
/// across a ReLU kink or flips a near-tied max selection (the chance of
/// which scales with both h and spatial extent), while a small step sinks
/// low-magnitude gradients into the ulp(loss)/2h roundoff floor. A wrong
/// analytic gradient disagrees at every step size, so the per-coordinate
/// minimum stays sharp without false alarms from either end.
pub fn fd_check_graph_ladder(
    spec: &GraphSpec,
    batch: &Tensor,
    labels: &[usize],
    seed: u64,
    samples_per_entry: usize,
    hs: &[f64],
    tol: f64,
) -> Result<f64> {
    let graph = spec.compile()?;
    let mut params = ParamSet::init(&graph, &mut substream(seed, &[tags::INIT]));
    let targets = one_hot(labels, 2)?;

    let loss_at = |params: &ParamSet| -> Result<f64> {
        let mut rng = substream(seed, &[tags::DROPOUT]);
        let trace = forward(&graph, params, batch, Mode::Train, &mut rng)?;
        Ok(softmax_cross_entropy(trace.logits(), &targets)?.0)
    };

    let analytic = {
        let mut rng = substream(seed, &[tags::DROPOUT]);
        let trace = forward(&graph, &params, batch, Mode::Train, &mut rng)?;
        let (_, d_logits) = softmax_cross_entropy(trace.logits(), &targets)?;
        backward(&graph, &params, &trace, batch, &d_logits)?
    };

    let mut pick = substream(seed, &[0xfd]);
    let mut worst = 0.0f64;
    for entry_idx in 0..params.entries().len() {
        if !params.entries()[entry_idx].role.is_trainable() {
            continue;
        }
        let len = params.entries()[entry_idx].value.len();
        let indices: Vec<usize> = if len <= samples_per_entry {
            (0..len).collect()
        } else {
            (0..samples_per_entry).map(|_| pick.gen_range(0..len)).collect()
        };
        for idx in indices {
            let orig = params.entries()[entry_idx].value.data()[idx];
            let a = analytic.grads()[entry_idx].data()[idx];
            let mut best = f64::INFINITY;
            for &h in hs {
                params.entries_mut()[entry_idx].value.data_mut()[idx] = orig + h;
                let plus = loss_at(&params)?;
                params.entries_mut()[entry_idx].value.data_mut()[idx] = orig - h;
                let minus = loss_at(&params)?;
                params.entries_mut()[entry_idx].value.data_mut()[idx] = orig;
                let fd = (plus - minus) / (2.0 * h);
                // Central differences bottom out at ulp(loss)/2h. A
                // coordinate whose true gradient is zero, such as a conv
                // bias feeding batch norm, reads as rounding noise on both
                // sides; agreement in magnitude is all it can show.
                best = if a.abs().max(fd.abs()) < 1e-8 {
                    0.0
                } else {
                    best.min(rel_err(a, fd))
                };
                if best < tol {
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}
