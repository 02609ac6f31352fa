//! Knowledge-distillation losses: tempered softmax, frame-wise
//! cross-entropy to a frozen teacher, the interpolated teacher+CTC
//! objective, and the tempered-KL adaptation variant.
//!
//! The temperature applies to both the teacher and the student
//! distributions. No T^2 gradient rescaling is applied; lambda weights the
//! teacher term directly against the CTC term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{ctc_loss_grad, Alphabet, CtcError, LabelSequence};
use crate::numcore::Tensor;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("teacher/student frame mismatch: targets have {targets} frames, student {student}")]
    FrameMismatch { targets: usize, student: usize },
    #[error("targets generated at temperature {targets}, loss asked for {requested}")]
    TemperatureMismatch { targets: f64, requested: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

/// Interpolation weight and temperature of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> DistillConfig {
        DistillConfig {
            lambda: 0.9,
            temperature: 4.0,
        }
    }
}

impl DistillConfig {
    pub fn new(lambda: f64, temperature: f64) -> Result<DistillConfig, DistillError> {
        let cfg = DistillConfig {
            lambda,
            temperature,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(DistillError::Config(format!(
                "lambda {} not in [0,1]",
                self.lambda
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(DistillError::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Frozen teacher posteriors for one utterance: tempered, row-stochastic,
/// one row per student frame.
#[derive(Debug, Clone)]
pub struct SoftTargets {
    pub probs: Tensor,
    pub teacher_id: String,
    pub temperature: f64,
}

impl SoftTargets {
    pub fn new(probs: Tensor, teacher_id: &str, temperature: f64) -> Result<SoftTargets, DistillError> {
        if probs.dims().len() != 2 {
            return Err(DistillError::Shape(format!(
                "targets must be rank 2, got {:?}",
                probs.dims()
            )));
        }
        for r in 0..probs.rows() {
            let sum: f64 = probs.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(DistillError::Shape(format!("target row {r} sums to {sum}")));
            }
        }
        Ok(SoftTargets {
            probs,
            teacher_id: teacher_id.to_string(),
            temperature,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.probs.rows()
    }

    /// Total Shannon entropy summed over frames, in nats.
    pub fn entropy(&self) -> f64 {
        self.probs
            .data()
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum()
    }
}

/// Row-wise softmax of `logits / T`.
pub fn tempered_softmax(logits: &Tensor, temperature: f64) -> Result<Tensor, DistillError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(DistillError::Config(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    let mut scaled = logits.clone();
    for v in scaled.data_mut() {
        *v /= temperature;
    }
    crate::numcore::softmax_rows(&scaled).map_err(|e| DistillError::Shape(e.to_string()))
}

/// Cross-entropy of the student's tempered distribution against frozen
/// teacher targets, summed over frames.
///
/// Returns the loss and its gradient (O' - O'_ref)/T w.r.t. the student
/// logits.
pub fn ce_to_teacher(
    student_logits: &Tensor,
    targets: &SoftTargets,
    temperature: f64,
) -> Result<(f64, Tensor), DistillError> {
    if targets.temperature != temperature {
        return Err(DistillError::TemperatureMismatch {
            targets: targets.temperature,
            requested: temperature,
        });
    }
    if student_logits.dims().len() != 2 {
        return Err(DistillError::Shape(format!(
            "student logits must be rank 2, got {:?}",
            student_logits.dims()
        )));
    }
    if student_logits.rows() != targets.n_frames() {
        return Err(DistillError::FrameMismatch {
            targets: targets.n_frames(),
            student: student_logits.rows(),
        });
    }
    if student_logits.cols() != targets.probs.cols() {
        return Err(DistillError::Shape(format!(
            "student {} symbols vs targets {}",
            student_logits.cols(),
            targets.probs.cols()
        )));
    }

    let n = student_logits.rows();
    let student = tempered_softmax(student_logits, temperature)?;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(student_logits.dims());
    for t in 0..n {
        // Stable CE via the tempered log-softmax.
        let scaled: Vec<f64> = student_logits.row(t).iter().map(|v| v / temperature).collect();
        let log_student = crate::numcore::log_softmax_row(&scaled);
        for (k, (&p_ref, &ls)) in targets.probs.row(t).iter().zip(log_student.iter()).enumerate() {
            loss -= p_ref * ls;
            grad.set(t, k, (student.at(t, k) - p_ref) / temperature);
        }
    }
    Ok((loss, grad))
}

fn add_scaled(acc: &mut Tensor, other: &Tensor, scale: f64) {
    for (a, &o) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += scale * o;
    }
}

/// lambda * CE(teacher) + (1 - lambda) * CTC. The endpoints reduce exactly
/// (bit-for-bit) to the single-term losses.
pub fn combined_loss(
    student_logits: &Tensor,
    targets: &SoftTargets,
    label: &LabelSequence,
    alphabet: &Alphabet,
    cfg: &DistillConfig,
) -> Result<(f64, Tensor), DistillError> {
    cfg.validate()?;
    if cfg.lambda == 0.0 {
        return Ok(ctc_loss_grad(student_logits, label, alphabet)?);
    }
    if cfg.lambda == 1.0 {
        return ce_to_teacher(student_logits, targets, cfg.temperature);
    }
    let (ce, ce_grad) = ce_to_teacher(student_logits, targets, cfg.temperature)?;
    let (ctc, ctc_grad) = ctc_loss_grad(student_logits, label, alphabet)?;
    let loss = cfg.lambda * ce + (1.0 - cfg.lambda) * ctc;
    let mut grad = Tensor::zeros(student_logits.dims());
    add_scaled(&mut grad, &ce_grad, cfg.lambda);
    add_scaled(&mut grad, &ctc_grad, 1.0 - cfg.lambda);
    Ok((loss, grad))
}

/// lambda * KL(teacher || student) + (1 - lambda) * CTC.
///
/// KL is CE minus the (constant) teacher entropy, so gradients are exactly
/// those of [`combined_loss`]; only the loss value differs.
pub fn kl_adaptation_loss(
    student_logits: &Tensor,
    targets: &SoftTargets,
    label: &LabelSequence,
    alphabet: &Alphabet,
    cfg: &DistillConfig,
) -> Result<(f64, Tensor), DistillError> {
    cfg.validate()?;
    if cfg.lambda == 0.0 {
        return Ok(ctc_loss_grad(student_logits, label, alphabet)?);
    }
    let (combined, grad) = combined_loss(student_logits, targets, label, alphabet, cfg)?;
    Ok((combined - cfg.lambda * targets.entropy(), grad))
}
