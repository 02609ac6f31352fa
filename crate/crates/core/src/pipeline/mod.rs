//! Training and experiment orchestration: Adam, the mini-batch training
//! loop with early stopping, soft-target generation, multi-generation
//! experiment plans, evaluation, and report emission.

pub mod adam;
pub mod plan;
pub mod report;
pub mod train;

pub use adam::{adam_step, adam_step_flat, adam_update, AdamState};
pub use plan::{
    prepare_dataset, preset_plan, run_plan, ArchChoice, CorpusSource, CsoProbe, ExperimentPlan, InitSpec,
    PlanStage, RunConfig, TeacherAssignment, TrainParams,
};
pub use report::{
    render_markdown, write_reports, AdaptationRow, CerRow, CorpusSummary, CsoRow, GenerationGain,
    Report, StageReport,
};
pub use train::{train, EarlyStopper, EpochStats, LossKind, TrainConfig, TrainHistory, TrainOutcome};

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::corpus::{CorpusError, Manifest, Split};
use crate::ctc::{Alphabet, CtcError, LabelSequence};
use crate::decode::{beam_search_decode, cer, DecodeConfig, DecodeError, SpikeSequence};
use crate::distill::{tempered_softmax, DistillError, SoftTargets};
use crate::frontend::{FeatureSequence, FrontendConfig, FrontendError};
use crate::model::{forward, ModelError, ModelParams};
use crate::numcore::NumError;
use crate::ErrorClass;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(String),
}

impl PipelineError {
    /// Maps every failure to one of the three CLI exit classes.
    pub fn class(&self) -> ErrorClass {
        match self {
            PipelineError::Config(_) => ErrorClass::Config,
            PipelineError::Numeric(_) => ErrorClass::Numeric,
            PipelineError::Num(NumError::NonFinite(_)) => ErrorClass::Numeric,
            PipelineError::Num(_) => ErrorClass::Config,
            PipelineError::Model(ModelError::BadArch(_)) => ErrorClass::Config,
            PipelineError::Corpus(CorpusError::Config(_)) => ErrorClass::Config,
            PipelineError::Distill(DistillError::Config(_)) => ErrorClass::Config,
            PipelineError::Decode(DecodeError::Config(_)) => ErrorClass::Config,
            _ => ErrorClass::Data,
        }
    }
}

/// One corpus utterance with its frontend-processed features, ready for
/// the model.
#[derive(Debug, Clone)]
pub struct LoadedUtterance {
    pub id: String,
    pub speaker: String,
    pub accent: String,
    pub split: Split,
    pub transcript: String,
    pub label: LabelSequence,
    pub feats: FeatureSequence,
}

/// The corpus in memory after stacking and decimation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub alphabet: Alphabet,
    pub utterances: Vec<LoadedUtterance>,
    pub accents: Vec<String>,
    pub input_dim: usize,
}

impl Dataset {
    /// Load a generated corpus directory and push every utterance through
    /// the frontend.
    pub fn load(dir: &Path, frontend: &FrontendConfig) -> Result<Dataset, PipelineError> {
        let manifest = Manifest::load(dir)?;
        Dataset::from_manifest(&manifest, dir, frontend)
    }

    pub fn from_manifest(
        manifest: &Manifest,
        dir: &Path,
        frontend: &FrontendConfig,
    ) -> Result<Dataset, PipelineError> {
        let utterances: Vec<LoadedUtterance> = manifest
            .records
            .par_iter()
            .map(|record| -> Result<LoadedUtterance, PipelineError> {
                let raw = crate::corpus::load_features(dir, record)?;
                let feats = frontend.apply(&raw)?;
                let label = LabelSequence::from_text(&record.transcript, &manifest.alphabet)?;
                Ok(LoadedUtterance {
                    id: record.id.clone(),
                    speaker: record.speaker.clone(),
                    accent: record.accent.clone(),
                    split: record.split,
                    transcript: record.transcript.clone(),
                    label,
                    feats,
                })
            })
            .collect::<Result<_, _>>()?;
        let input_dim = utterances
            .first()
            .map(|u| u.feats.dim())
            .ok_or_else(|| PipelineError::Data("corpus has no utterances".into()))?;
        Ok(Dataset {
            alphabet: manifest.alphabet.clone(),
            utterances,
            accents: manifest.accent_names(),
            input_dim,
        })
    }

    /// Indices of utterances in `split` whose accent is listed.
    pub fn select(&self, split: Split, accents: &[String]) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.split == split && accents.iter().any(|a| *a == u.accent))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Frozen per-utterance soft targets from one (or several per-accent)
/// teachers.
#[derive(Debug, Clone)]
pub struct TargetStore {
    pub teacher_id: String,
    pub temperature: f64,
    targets: BTreeMap<String, SoftTargets>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetMeta {
    teacher_id: String,
    temperature: f64,
    utterances: usize,
}

impl TargetStore {
    pub fn new(teacher_id: &str, temperature: f64) -> TargetStore {
        TargetStore {
            teacher_id: teacher_id.to_string(),
            temperature,
            targets: BTreeMap::new(),
        }
    }

    pub fn get(&self, utterance_id: &str) -> Option<&SoftTargets> {
        self.targets.get(utterance_id)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn merge(&mut self, other: TargetStore) {
        self.targets.extend(other.targets);
    }

    /// Persist one container per utterance (tensor "soft_targets") plus a
    /// metadata.json describing the teacher and temperature.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        for (id, t) in &self.targets {
            let mut c = Container::new();
            c.push("soft_targets", t.probs.clone());
            c.save(&dir.join(format!("{id}.acdm")))?;
        }
        let meta = TargetMeta {
            teacher_id: self.teacher_id.clone(),
            temperature: self.temperature,
            utterances: self.targets.len(),
        };
        std::fs::write(
            dir.join("metadata.json"),
            serde_json::to_string_pretty(&meta).map_err(|e| PipelineError::Json(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<TargetStore, PipelineError> {
        let meta: TargetMeta = serde_json::from_str(
            &std::fs::read_to_string(dir.join("metadata.json"))
                .map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?,
        )
        .map_err(|e| PipelineError::Json(e.to_string()))?;
        let mut store = TargetStore::new(&meta.teacher_id, meta.temperature);
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("acdm") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| PipelineError::Data(format!("bad target file {path:?}")))?
                .to_string();
            let c = Container::load(&path)?;
            let probs = c.get("soft_targets")?.clone();
            store.targets.insert(
                id,
                SoftTargets::new(probs, &meta.teacher_id, meta.temperature)?,
            );
        }
        Ok(store)
    }
}

/// Run a frozen teacher over the selected utterances and keep its tempered
/// posteriors.
pub fn gen_soft_targets(
    teacher: &ModelParams,
    teacher_id: &str,
    data: &Dataset,
    indices: &[usize],
    temperature: f64,
) -> Result<TargetStore, PipelineError> {
    let produced: Vec<(String, SoftTargets)> = indices
        .par_iter()
        .map(|&i| -> Result<(String, SoftTargets), PipelineError> {
            let utt = &data.utterances[i];
            let (logits, _) = forward(teacher, &utt.feats)?;
            let probs = tempered_softmax(&logits, temperature)?;
            Ok((
                utt.id.clone(),
                SoftTargets::new(probs, teacher_id, temperature)?,
            ))
        })
        .collect::<Result<_, _>>()?;
    let mut store = TargetStore::new(teacher_id, temperature);
    store.targets.extend(produced);
    Ok(store)
}

/// Per-accent and pooled CER of one model over the selected utterances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_accent: Vec<(String, f64)>,
    /// Unweighted mean of the per-accent CERs.
    pub average: f64,
    /// Pooled CER over all selected utterances.
    pub overall: f64,
}

impl EvalResult {
    pub fn accent_cer(&self, accent: &str) -> Option<f64> {
        self.per_accent
            .iter()
            .find(|(a, _)| a == accent)
            .map(|(_, c)| *c)
    }
}

/// Beam-search decode every selected utterance and pool CER per accent;
/// the summary average is the unweighted mean over accents.
pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    cfg: &DecodeConfig,
) -> Result<EvalResult, PipelineError> {
    let decoded: Vec<(String, LabelSequence, LabelSequence)> = indices
        .par_iter()
        .map(|&i| -> Result<_, PipelineError> {
            let utt = &data.utterances[i];
            let (logits, _) = forward(params, &utt.feats)?;
            let post = crate::ctc::PosteriorMatrix::from_logits(&logits)?;
            let hyp = beam_search_decode(&post, &data.alphabet, cfg);
            Ok((utt.accent.clone(), hyp, utt.label.clone()))
        })
        .collect::<Result<_, _>>()?;

    let mut by_accent: BTreeMap<String, Vec<(LabelSequence, LabelSequence)>> = BTreeMap::new();
    let mut all = Vec::with_capacity(decoded.len());
    for (accent, hyp, reference) in decoded {
        all.push((hyp.clone(), reference.clone()));
        by_accent.entry(accent).or_default().push((hyp, reference));
    }
    let mut per_accent = Vec::new();
    for (accent, pairs) in &by_accent {
        per_accent.push((accent.clone(), cer(pairs)?));
    }
    let average = per_accent.iter().map(|(_, c)| c).sum::<f64>() / per_accent.len().max(1) as f64;
    Ok(EvalResult {
        per_accent,
        average,
        overall: cer(&all)?,
    })
}

/// Per-frame argmax spike sequences of one model over selected utterances.
pub fn spike_sequences(
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
) -> Result<Vec<SpikeSequence>, PipelineError> {
    indices
        .par_iter()
        .map(|&i| -> Result<SpikeSequence, PipelineError> {
            let utt = &data.utterances[i];
            let (logits, _) = forward(params, &utt.feats)?;
            let post = crate::ctc::PosteriorMatrix::from_logits(&logits)?;
            Ok(SpikeSequence::from_posteriors(&post))
        })
        .collect()
}
