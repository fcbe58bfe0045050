//! Student cross-entropy, tempered distillation and their weighted combination.
//!
//! All losses are batch means. The representation term is built in
//! [`crate::repmem`] and only combined here.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::NUM_CLASSES;
use crate::scalar::Scalar;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Multiply the distillation term by `tau²` (classic Hinton scaling). Off by default.
    pub distill_tau_squared: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0, tau: 20.0, distill_tau_squared: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Parameter(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Scalar values of each loss term for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub student: f64,
    pub distillation: f64,
    pub representation: f64,
    /// Strategy-specific extra term (the L2-SP penalty, already weighted); zero otherwise.
    #[serde(default)]
    pub penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.student, self.distillation, self.representation, self.penalty, self.total].iter().all(|v| v.is_finite())
    }
}

/// Mean over rows of `-Σ_c t_c ln clamp(softmax(logits / T))_c`.
pub fn soft_cross_entropy<S: Scalar>(tape: &mut Tape<S>, targets: Var, logits: Var, temperature: S) -> Result<Var> {
    let (n, c) = tape.value(logits).dims2()?;
    if tape.value(targets).shape() != tape.value(logits).shape() {
        return Err(Error::Dimension(format!(
            "targets {:?} do not match logits {:?}",
            tape.value(targets).shape(),
            tape.value(logits).shape()
        )));
    }
    if n == 0 || c == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let p = tape.softmax(logits, temperature)?;
    let floor = S::of(PROB_FLOOR);
    let p = tape.clamp(p, floor, S::one() - floor);
    let logp = tape.ln(p);
    let weighted = tape.mul(targets, logp)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -S::one() / S::of(n as f64)))
}

/// One-hot `N×2` targets from hard labels (0 = real, 1 = fake).
pub fn one_hot<S: Scalar>(labels: &[u8]) -> Result<Tensor<S>> {
    let mut data = vec![S::zero(); labels.len() * NUM_CLASSES];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= NUM_CLASSES {
            return Err(Error::Data(format!("label {y} at index {i} is not 0 (real) or 1 (fake)")));
        }
        data[i * NUM_CLASSES + y as usize] = S::one();
    }
    Tensor::new(vec![labels.len(), NUM_CLASSES], data)
}

/// Cross-entropy of the student against hard labels, softmax at temperature 1.
pub fn student_loss<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[u8]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Parameter("student loss on an empty batch".into()));
    }
    if tape.value(logits).dims2()?.0 != labels.len() {
        return Err(Error::Dimension(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            tape.value(logits).shape()
        )));
    }
    let targets = tape.constant(one_hot(labels)?);
    soft_cross_entropy(tape, targets, logits, S::one())
}

/// Cross-entropy against soft (e.g. CutMix-mixed) label rows.
pub fn student_loss_soft<S: Scalar>(tape: &mut Tape<S>, logits: Var, targets: &Tensor<S>) -> Result<Var> {
    let tol = S::of(1e-6);
    for i in 0..targets.dims2()?.0 {
        let row = targets.row(i);
        let s: S = row.iter().copied().sum();
        if (s - S::one()).abs() > tol || row.iter().any(|&v| v < S::zero()) {
            return Err(Error::Data(format!("soft label row {i} is not a distribution")));
        }
    }
    let t = tape.constant(targets.clone());
    soft_cross_entropy(tape, t, logits, S::one())
}

/// Soft-target cross-entropy from tempered teacher to tempered student.
/// Teacher logits are detached, so no gradient reaches the teacher.
pub fn distillation_loss<S: Scalar>(
    tape: &mut Tape<S>,
    teacher_logits: Var,
    student_logits: Var,
    tau: S,
) -> Result<Var> {
    if !(tau > S::zero()) {
        return Err(Error::Parameter(format!("distillation temperature must be positive, got {tau}")));
    }
    if tape.value(teacher_logits).shape() != tape.value(student_logits).shape() {
        return Err(Error::Dimension(format!(
            "teacher logits {:?} and student logits {:?} differ",
            tape.value(teacher_logits).shape(),
            tape.value(student_logits).shape()
        )));
    }
    let frozen = tape.detach(teacher_logits);
    let soft_targets = tape.softmax(frozen, tau)?;
    soft_cross_entropy(tape, soft_targets, student_logits, tau)
}

/// Loss terms computed on one batch; absent terms count as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub student: Option<Var>,
    pub distillation: Option<Var>,
    pub representation: Option<Var>,
    /// Already-weighted extra penalty added to the total as is.
    pub penalty: Option<Var>,
}

/// `total = α·L_S + β·L_D + γ·L_R (+ penalty)` as one differentiable scalar.
///
/// Terms with zero weight are left out of the graph entirely, so a configuration
/// with `γ = 0` records exactly the same operations as one that never computed
/// `L_R`.
pub fn combine<S: Scalar>(tape: &mut Tape<S>, terms: LossTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let value = |tape: &Tape<S>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
    let tau_sq = if weights.distill_tau_squared { weights.tau * weights.tau } else { 1.0 };
    let distillation = match terms.distillation {
        Some(d) if tau_sq != 1.0 => Some(tape.scale(d, S::of(tau_sq))),
        d => d,
    };

    let mut breakdown = LossBreakdown {
        student: value(tape, terms.student),
        distillation: value(tape, distillation),
        representation: value(tape, terms.representation),
        penalty: value(tape, terms.penalty),
        total: 0.0,
    };

    let mut total: Option<Var> = None;
    let weighted = [
        (terms.student, weights.alpha),
        (distillation, weights.beta),
        (terms.representation, weights.gamma),
        (terms.penalty, 1.0),
    ];
    for (term, w) in weighted {
        let Some(term) = term else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { term } else { tape.scale(term, S::of(w)) };
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(S::zero())),
    };
    breakdown.total = tape.value(total).item().as_f64();
    Ok((total, breakdown))
}
