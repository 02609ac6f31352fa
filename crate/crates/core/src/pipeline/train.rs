//! The mini-batch training loop: seeded shuffling, gradient accumulation
//! over utterances, global-norm clipping, Adam, and dev-CER early stopping
//! that keeps the best checkpoint seen.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss_grad, min_frames, PosteriorMatrix};
use crate::decode::{best_path_decode, cer};
use crate::distill::{combined_loss, kl_adaptation_loss, DistillConfig};
use crate::model::{backward, forward, ModelParams};
use crate::numcore::SeededRng;

use super::adam::{adam_step_flat, AdamState};
use super::{Dataset, PipelineError, TargetStore};

/// Which objective drives the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ctc,
    Distill,
    KlAdapt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip_norm: f64,
    pub distill: Option<DistillConfig>,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 8,
            max_epochs: 30,
            patience: 4,
            grad_clip_norm: 5.0,
            distill: None,
            loss: LossKind::Ctc,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.learning_rate > 0.0) {
            return Err(PipelineError::Config(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(PipelineError::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(PipelineError::Config(
                "batch_size and max_epochs must be >= 1".into(),
            ));
        }
        if self.loss != LossKind::Ctc && self.distill.is_none() {
            return Err(PipelineError::Config(
                "distill/kl_adapt training needs a DistillConfig".into(),
            ));
        }
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub dev_cer: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_cer: f64,
    pub skipped_utterances: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
}

/// Stop after `patience` epochs without strict dev improvement; the first
/// epoch reaching the minimum is the kept checkpoint.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_improvement: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// Returns (improved, stop).
    pub fn observe(&mut self, epoch: usize, dev_cer: f64) -> (bool, bool) {
        if dev_cer < self.best {
            self.best = dev_cer;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            (true, false)
        } else {
            self.since_improvement += 1;
            (false, self.since_improvement >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

fn utterance_loss_grad(
    params: &ModelParams,
    data: &Dataset,
    index: usize,
    cfg: &TrainConfig,
    targets: Option<&TargetStore>,
) -> Result<(f64, Vec<f64>), PipelineError> {
    let utt = &data.utterances[index];
    let (logits, trace) = forward(params, &utt.feats)?;
    let (loss, grad_logits) = match cfg.loss {
        LossKind::Ctc => ctc_loss_grad(&logits, &utt.label, &data.alphabet)?,
        LossKind::Distill | LossKind::KlAdapt => {
            let store = targets.expect("validated by train()");
            let dcfg = cfg.distill.as_ref().expect("validated by train()");
            let soft = store.get(&utt.id).ok_or_else(|| {
                PipelineError::Data(format!("no soft targets for utterance {}", utt.id))
            })?;
            if cfg.loss == LossKind::Distill {
                combined_loss(&logits, soft, &utt.label, &data.alphabet, dcfg)?
            } else {
                kl_adaptation_loss(&logits, soft, &utt.label, &data.alphabet, dcfg)?
            }
        }
    };
    if !loss.is_finite() {
        return Err(PipelineError::Numeric(format!(
            "non-finite loss on utterance {}",
            utt.id
        )));
    }
    let grads = backward(params, &trace, &grad_logits)?;
    let mut flat = Vec::with_capacity(params.param_count());
    grads.for_each_param(|g| flat.push(g));
    Ok((loss, flat))
}

/// Greedy-decode CER over a selector; the early-stopping metric.
pub fn greedy_cer(
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
) -> Result<f64, PipelineError> {
    let pairs: Vec<_> = indices
        .par_iter()
        .map(|&i| -> Result<_, PipelineError> {
            let utt = &data.utterances[i];
            let (logits, _) = forward(params, &utt.feats)?;
            let post = PosteriorMatrix::from_logits(&logits)?;
            Ok((best_path_decode(&post, &data.alphabet), utt.label.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(cer(&pairs)?)
}

/// Train from `init`, accumulating gradients over `batch_size` utterances
/// per Adam step. One epoch is a full seeded-shuffle pass; after each
/// epoch the dev selector is greedy-decoded and the best checkpoint kept.
/// Infeasible utterances (too few frames for their transcript) are skipped
/// and counted.
pub fn train(
    init: ModelParams,
    data: &Dataset,
    train_idx: &[usize],
    dev_idx: &[usize],
    cfg: &TrainConfig,
    targets: Option<&TargetStore>,
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(PipelineError::Data("empty training selector".into()));
    }
    if dev_idx.is_empty() {
        return Err(PipelineError::Data("empty dev selector".into()));
    }
    if cfg.loss != LossKind::Ctc {
        let store =
            targets.ok_or_else(|| PipelineError::Config("teacher targets required".into()))?;
        for &i in train_idx {
            let id = &data.utterances[i].id;
            if store.get(id).is_none() {
                return Err(PipelineError::Data(format!(
                    "teacher {} provides no targets for utterance {id}",
                    store.teacher_id
                )));
            }
        }
    }

    let feasible: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| {
            let u = &data.utterances[i];
            u.feats.n_frames() >= min_frames(&u.label)
        })
        .collect();
    let skipped = train_idx.len() - feasible.len();
    if skipped > 0 {
        eprintln!("warning: skipping {skipped} utterances with too few frames");
    }
    if feasible.is_empty() {
        return Err(PipelineError::Data(
            "every training utterance is infeasible for its transcript".into(),
        ));
    }

    let mut params = init;
    let n_params = params.param_count();
    let mut state = AdamState::new(n_params);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params = params.clone();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev_cer: f64::INFINITY,
        skipped_utterances: skipped,
    };
    let rng_root = SeededRng::new(cfg.seed);
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order = feasible.clone();
        rng_root.derive_str(&format!("epoch/{epoch}")).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut grads = vec![0.0f64; n_params];
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| utterance_loss_grad(&params, data, i, cfg, targets))
                .collect::<Result<_, _>>()?;
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g = 0.0);
            for (loss, g) in &results {
                loss_sum += loss;
                for (acc, &v) in grads.iter_mut().zip(g) {
                    *acc += scale * v;
                }
            }
            let norm: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm {
                let s = cfg.grad_clip_norm / norm;
                grads.iter_mut().for_each(|g| *g *= s);
            }
            step += 1;
            adam_step_flat(&mut params, &grads, &mut state, step, cfg.learning_rate)?;
        }

        let dev_cer = greedy_cer(&params, data, dev_idx)?;
        let (improved, stop) = stopper.observe(epoch, dev_cer);
        if improved {
            best_params = params.clone();
            history.best_epoch = epoch;
            history.best_dev_cer = dev_cer;
        }
        history.epochs.push(EpochStats {
            epoch,
            mean_train_loss: loss_sum / order.len() as f64,
            dev_cer,
            improved,
        });
        if stop {
            break;
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        history,
    })
}
