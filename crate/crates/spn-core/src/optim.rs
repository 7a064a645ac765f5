//! Loss, regularization penalties, first-order optimizers, and metrics.

use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamSet};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;
pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPSILON: f64 = 1e-7;

/// One-hot encodes class labels into an `[n, classes]` tensor.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::invalid("one_hot", "needs at least one label"));
    }
    let mut out = Tensor::zeros(vec![labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(
                "one_hot",
                format!("label {y} out of range for {classes} classes"),
            ));
        }
        out.data_mut()[i * classes + y] = 1.0;
    }
    Ok(out)
}

/// Mean softmax cross-entropy over a batch, with the gradient at the logits.
///
/// Log-probabilities come from the log-sum-exp form `z_y - lse(z)`, so the
/// loss stays finite for arbitrarily large logit magnitudes. The returned
/// gradient is `(softmax(z) - y) / n`, i.e. it already includes the batch
/// mean.
pub fn softmax_cross_entropy(logits: &Tensor, one_hot_labels: &Tensor) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape() != one_hot_labels.shape() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!(
                "logits {:?} vs labels {:?}",
                logits.shape(),
                one_hot_labels.shape()
            ),
        ));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let nf = n as f64;
    let mut d_logits = Tensor::zeros(vec![n, k]);
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let y = &one_hot_labels.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        for j in 0..k {
            let log_p = row[j] - lse;
            loss -= y[j] * log_p;
            d_logits.data_mut()[i * k + j] = (log_p.exp() - y[j]) / nf;
        }
    }
    Ok((loss / nf, d_logits))
}

/// Weight-decay penalty applied to kernels only; biases and batch-norm
/// parameters are never regularized. The penalty enters the gradient, not
/// the reported loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regularizer {
    None,
    L1 { lambda: f64 },
    L2 { lambda: f64 },
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        let lambda = match *self {
            Regularizer::None => return Ok(()),
            Regularizer::L1 { lambda } | Regularizer::L2 { lambda } => lambda,
        };
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid(
                "regularizer",
                format!("penalty must be a nonnegative finite value, got {lambda}"),
            ));
        }
        Ok(())
    }
}

/// Adds the regularizer's gradient addend onto kernel gradients in place and
/// returns the scalar penalty. L2: penalty `lambda*sum(w^2)`, addend
/// `2*lambda*w`. L1: penalty `lambda*sum(|w|)`, addend `lambda*sign(w)` with
/// `sign(0) = 0`.
pub fn apply_regularizer(params: &ParamSet, reg: &Regularizer, grads: &mut ParamGrads) -> f64 {
    let (l1, l2) = match *reg {
        Regularizer::None => return 0.0,
        Regularizer::L1 { lambda } => (lambda, 0.0),
        Regularizer::L2 { lambda } => (0.0, lambda),
    };
    let mut penalty = 0.0;
    for (entry, grad) in params.entries().iter().zip(grads.grads_mut()) {
        if !entry.role.is_kernel() {
            continue;
        }
        for (&w, g) in entry.value.data().iter().zip(grad.data_mut()) {
            if l2 > 0.0 {
                penalty += l2 * w * w;
                *g += 2.0 * l2 * w;
            }
            if l1 > 0.0 {
                penalty += l1 * w.abs();
                // Rust's signum(0.0) is 1.0; the subgradient choice here is 0.
                if w != 0.0 {
                    *g += l1 * w.signum();
                }
            }
        }
    }
    penalty
}

/// Penalty and a standalone gradient addend (zeros everywhere except
/// kernels). Convenience form of `apply_regularizer` for inspection.
pub fn regularizer_penalty(params: &ParamSet, reg: &Regularizer) -> (f64, ParamGrads) {
    let mut grads = ParamGrads::zeros_like(params);
    let penalty = apply_regularizer(params, reg, &mut grads);
    (penalty, grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adadelta,
}

impl OptimizerKind {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 0.01,
            OptimizerKind::Adam => 0.001,
            OptimizerKind::Adadelta => 1.0,
        }
    }
}

enum Slot {
    None,
    Adam { m: Vec<f64>, v: Vec<f64> },
    Adadelta { acc_grad: Vec<f64>, acc_update: Vec<f64> },
}

/// Optimizer state sized for one ParamSet. Slots align with parameter
/// entries; non-trainable entries (batch-norm running stats) are skipped.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParamSet) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate <= 0.0 {
            return Err(Error::invalid(
                "optimizer",
                format!("learning rate must be positive, got {learning_rate}"),
            ));
        }
        let slots = params
            .entries()
            .iter()
            .map(|e| {
                if !e.role.is_trainable() {
                    return Slot::None;
                }
                match kind {
                    OptimizerKind::Sgd => Slot::None,
                    OptimizerKind::Adam => Slot::Adam {
                        m: vec![0.0; e.value.len()],
                        v: vec![0.0; e.value.len()],
                    },
                    OptimizerKind::Adadelta => Slot::Adadelta {
                        acc_grad: vec![0.0; e.value.len()],
                        acc_update: vec![0.0; e.value.len()],
                    },
                }
            })
            .collect();
        Ok(Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            slots,
        })
    }

    pub fn with_default_lr(kind: OptimizerKind, params: &ParamSet) -> Self {
        Optimizer::new(kind, kind.default_learning_rate(), params)
            .expect("default learning rates are positive")
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Applies one update. Gradients must align with the ParamSet the
    /// optimizer was built for.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        if grads.grads().len() != params.entries().len()
            || self.slots.len() != params.entries().len()
        {
            return Err(Error::invalid(
                "optimizer",
                "gradient/parameter layout mismatch",
            ));
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        let t = self.step_count as i32;
        for ((entry, grad), slot) in params
            .entries_mut()
            .iter_mut()
            .zip(grads.grads())
            .zip(&mut self.slots)
        {
            if !entry.role.is_trainable() {
                continue;
            }
            if entry.value.shape() != grad.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!(
                        "gradient for `{}`: {:?} vs {:?}",
                        entry.name,
                        grad.shape(),
                        entry.value.shape()
                    ),
                ));
            }
            let w = entry.value.data_mut();
            let g = grad.data();
            match (self.kind, slot) {
                (OptimizerKind::Sgd, _) => {
                    for (wi, &gi) in w.iter_mut().zip(g) {
                        *wi -= lr * gi;
                    }
                }
                (OptimizerKind::Adam, Slot::Adam { m, v }) => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    for i in 0..w.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
                (OptimizerKind::Adadelta, Slot::Adadelta { acc_grad, acc_update }) => {
                    for i in 0..w.len() {
                        acc_grad[i] =
                            ADADELTA_RHO * acc_grad[i] + (1.0 - ADADELTA_RHO) * g[i] * g[i];
                        let update = -((acc_update[i] + ADADELTA_EPSILON).sqrt()
                            / (acc_grad[i] + ADADELTA_EPSILON).sqrt())
                            * g[i];
                        acc_update[i] =
                            ADADELTA_RHO * acc_update[i] + (1.0 - ADADELTA_RHO) * update * update;
                        w[i] += lr * update;
                    }
                }
                _ => unreachable!("slots are built for the optimizer kind"),
            }
        }
        Ok(())
    }
}

/// Fraction of matching predictions.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid(
            "accuracy",
            format!(
                "needs equal nonempty slices, got {} and {}",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// 2x2 confusion matrix indexed `[actual][predicted]`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize]) -> Result<[[usize; 2]; 2]> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid(
            "confusion_matrix",
            format!(
                "needs equal nonempty slices, got {} and {}",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    let mut m = [[0usize; 2]; 2];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p > 1 || y > 1 {
            return Err(Error::invalid(
                "confusion_matrix",
                format!("classes must be 0 or 1, got prediction {p}, label {y}"),
            ));
        }
        m[y][p] += 1;
    }
    Ok(m)
}
