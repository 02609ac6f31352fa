//! Multi-generation experiment plans and their execution.
//!
//! The preset plan trains, in order: a pooled multi-accent baseline
//! (ma_nt); accent-specific students under that single teacher (acc_sp_*),
//! plus a no-teacher and a lambda=0.5 student of one study accent for the
//! spike-overlap table; a multi-teacher pooled student (ma_mt); a second
//! generation of accent students (acc_sp1_*); the final pooled student
//! (ma_mt1); and two tempered-KL adaptations of ma_mt1 to the adaptation
//! accent, one regularized by ma_mt1's own outputs and one by the
//! accent-specific student's outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{gen_corpus, CorpusConfig, Split};
use crate::decode::{cso, DecodeConfig};
use crate::distill::DistillConfig;
use crate::frontend::FrontendConfig;
use crate::model::{init_params, save_checkpoint, ArchSpec, ModelParams};
use crate::numcore::SeededRng;

use super::report::{
    write_reports, AdaptationRow, CerRow, CorpusSummary, CsoRow, GenerationGain, Report,
    StageReport, StageTiming,
};
use super::train::{train, LossKind, TrainConfig};
use super::{evaluate, gen_soft_targets, spike_sequences, Dataset, PipelineError, TargetStore};

/// How a stage's starting weights are obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    Scratch,
    From(String),
}

/// Which earlier model supplies soft targets for which accent's data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherAssignment {
    pub accent: String,
    pub teacher: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanStage {
    pub model_id: String,
    pub phase: usize,
    pub data_accents: Vec<String>,
    pub teachers: Vec<TeacherAssignment>,
    pub loss: LossKind,
    pub init: InitSpec,
    /// Stage-specific override of the run's default distillation config.
    pub distill: Option<DistillConfig>,
}

/// A spike-overlap measurement to run after training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsoProbe {
    pub model_a: String,
    pub model_b: String,
    pub accent: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub stages: Vec<PlanStage>,
    pub cso_probes: Vec<CsoProbe>,
    /// The accent whose adaptation pair is compared in the report.
    pub adapt_accent: String,
}

impl ExperimentPlan {
    /// Stage ordering must form a DAG: teachers and init sources refer to
    /// models trained by strictly earlier stages.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut seen: Vec<&str> = Vec::new();
        for stage in &self.stages {
            if seen.contains(&stage.model_id.as_str()) {
                return Err(PipelineError::Config(format!(
                    "duplicate model id {:?}",
                    stage.model_id
                )));
            }
            for t in &stage.teachers {
                if !seen.contains(&t.teacher.as_str()) {
                    return Err(PipelineError::Config(format!(
                        "stage {:?} references teacher {:?} not trained earlier",
                        stage.model_id, t.teacher
                    )));
                }
            }
            if let InitSpec::From(src) = &stage.init {
                if !seen.contains(&src.as_str()) {
                    return Err(PipelineError::Config(format!(
                        "stage {:?} initializes from {:?} not trained earlier",
                        stage.model_id, src
                    )));
                }
            }
            if stage.loss != LossKind::Ctc && stage.teachers.is_empty() {
                return Err(PipelineError::Config(format!(
                    "stage {:?} uses a teacher loss without teachers",
                    stage.model_id
                )));
            }
            seen.push(&stage.model_id);
        }
        for probe in &self.cso_probes {
            for m in [&probe.model_a, &probe.model_b] {
                if !seen.contains(&m.as_str()) {
                    return Err(PipelineError::Config(format!(
                        "cso probe references unknown model {m:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn phase_count(&self) -> usize {
        self.stages.iter().map(|s| s.phase).max().unwrap_or(0)
    }

    pub fn model_count(&self) -> usize {
        self.stages.len()
    }
}

/// Build the six-phase preset plan over the given accents.
///
/// `cso_accent` names the accent whose teacher/no-teacher/lambda students
/// feed the spike-overlap table; `adapt_accent` names the accent adapted
/// in the final phase.
pub fn preset_plan(
    accents: &[String],
    cso_accent: &str,
    adapt_accent: &str,
    distill: &DistillConfig,
) -> ExperimentPlan {
    let all = accents.to_vec();
    let mut stages = Vec::new();
    let stage = |model_id: &str,
                 phase: usize,
                 data: &[String],
                 teachers: Vec<TeacherAssignment>,
                 loss: LossKind,
                 init: InitSpec,
                 dcfg: Option<DistillConfig>| PlanStage {
        model_id: model_id.to_string(),
        phase,
        data_accents: data.to_vec(),
        teachers,
        loss,
        init,
        distill: dcfg,
    };
    let teach = |accent: &str, teacher: &str| TeacherAssignment {
        accent: accent.to_string(),
        teacher: teacher.to_string(),
    };

    // Phase 1: pooled baseline without a teacher.
    stages.push(stage("ma_nt", 1, &all, vec![], LossKind::Ctc, InitSpec::Scratch, None));

    // Phase 2: accent students of the single pooled teacher, plus the
    // study accent's no-teacher and lambda=0.5 variants.
    for a in accents {
        stages.push(stage(
            &format!("acc_sp_{a}"),
            2,
            std::slice::from_ref(a),
            vec![teach(a, "ma_nt")],
            LossKind::Distill,
            InitSpec::Scratch,
            None,
        ));
    }
    stages.push(stage(
        &format!("acc_sp0_{cso_accent}"),
        2,
        &[cso_accent.to_string()],
        vec![],
        LossKind::Ctc,
        InitSpec::Scratch,
        None,
    ));
    stages.push(stage(
        &format!("acc_sp_l05_{cso_accent}"),
        2,
        &[cso_accent.to_string()],
        vec![teach(cso_accent, "ma_nt")],
        LossKind::Distill,
        InitSpec::Scratch,
        Some(DistillConfig {
            lambda: 0.5,
            temperature: distill.temperature,
        }),
    ));

    // Phase 3: pooled student of the aligned accent teachers.
    stages.push(stage(
        "ma_mt",
        3,
        &all,
        accents.iter().map(|a| teach(a, &format!("acc_sp_{a}"))).collect(),
        LossKind::Distill,
        InitSpec::Scratch,
        None,
    ));

    // Phase 4: second-generation accent students.
    for a in accents {
        stages.push(stage(
            &format!("acc_sp1_{a}"),
            4,
            std::slice::from_ref(a),
            vec![teach(a, "ma_mt")],
            LossKind::Distill,
            InitSpec::Scratch,
            None,
        ));
    }

    // Phase 5: final pooled student.
    stages.push(stage(
        "ma_mt1",
        5,
        &all,
        accents.iter().map(|a| teach(a, &format!("acc_sp1_{a}"))).collect(),
        LossKind::Distill,
        InitSpec::Scratch,
        None,
    ));

    // Phase 6: tempered-KL adaptation of ma_mt1 to the adaptation accent,
    // regularized by its own outputs and by the accent student's outputs.
    stages.push(stage(
        "ma_mt1_adpt",
        6,
        &[adapt_accent.to_string()],
        vec![teach(adapt_accent, "ma_mt1")],
        LossKind::KlAdapt,
        InitSpec::From("ma_mt1".to_string()),
        None,
    ));
    stages.push(stage(
        "ma_mt1_adpt1",
        6,
        &[adapt_accent.to_string()],
        vec![teach(adapt_accent, &format!("acc_sp1_{adapt_accent}"))],
        LossKind::KlAdapt,
        InitSpec::From("ma_mt1".to_string()),
        None,
    ));

    let cso_probes = vec![
        (format!("acc_sp0_{cso_accent}"), Split::Train),
        (format!("acc_sp0_{cso_accent}"), Split::Test),
        (format!("acc_sp_l05_{cso_accent}"), Split::Train),
        (format!("acc_sp_l05_{cso_accent}"), Split::Test),
        (format!("acc_sp_{cso_accent}"), Split::Train),
        (format!("acc_sp_{cso_accent}"), Split::Test),
    ]
    .into_iter()
    .map(|(model_b, split)| CsoProbe {
        model_a: "ma_nt".to_string(),
        model_b,
        accent: cso_accent.to_string(),
        split,
    })
    .collect();

    ExperimentPlan {
        stages,
        cso_probes,
        adapt_accent: adapt_accent.to_string(),
    }
}

/// Where the corpus comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Generate under `<out_dir>/corpus` with the run seed.
    Generate(CorpusConfig),
    /// Use an existing generated corpus directory.
    Dir(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchChoice {
    Desk,
    Paper,
}

impl ArchChoice {
    pub fn build(self, input_dim: usize, out_dim: usize) -> ArchSpec {
        match self {
            ArchChoice::Desk => ArchSpec::desk(input_dim, out_dim),
            ArchChoice::Paper => ArchSpec::paper(input_dim, out_dim),
        }
    }
}

/// Optimizer and schedule settings shared by every stage of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip_norm: f64,
}

impl Default for TrainParams {
    fn default() -> TrainParams {
        let base = TrainConfig::default();
        TrainParams {
            learning_rate: base.learning_rate,
            batch_size: base.batch_size,
            max_epochs: base.max_epochs,
            patience: base.patience,
            grad_clip_norm: base.grad_clip_norm,
        }
    }
}

/// The single JSON config of a `plan run`; echoed into the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    pub arch: ArchChoice,
    pub train: TrainParams,
    pub distill: DistillConfig,
    pub frontend: FrontendConfig,
    pub eval_beam_width: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 1,
            corpus: CorpusSource::Generate(CorpusConfig::default()),
            arch: ArchChoice::Desk,
            train: TrainParams::default(),
            distill: DistillConfig::default(),
            frontend: FrontendConfig::default(),
            eval_beam_width: 100,
        }
    }
}

impl RunConfig {
    fn train_config(&self, stage: &PlanStage, default_distill: &DistillConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            grad_clip_norm: self.train.grad_clip_norm,
            distill: match stage.loss {
                LossKind::Ctc => None,
                _ => Some(stage.distill.unwrap_or(*default_distill)),
            },
            loss: stage.loss,
            seed,
        }
    }
}

/// Load the dataset named by the config, generating it first if required.
pub fn prepare_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<(Dataset, std::path::PathBuf), PipelineError> {
    let corpus_dir = match &cfg.corpus {
        CorpusSource::Generate(corpus_cfg) => {
            let dir = out_dir.join("corpus");
            let mut c = corpus_cfg.clone();
            c.seed = cfg.seed;
            gen_corpus(&c, &dir)?;
            dir
        }
        CorpusSource::Dir(path) => std::path::PathBuf::from(path),
    };
    let dataset = Dataset::load(&corpus_dir, &cfg.frontend)?;
    Ok((dataset, corpus_dir))
}

/// Execute every stage of a plan, then assemble CER, CSO and adaptation
/// tables plus the generation-gain summary. Writes models, targets and
/// reports under `out_dir` and returns the report.
pub fn run_plan(
    plan: &ExperimentPlan,
    cfg: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<Report, PipelineError> {
    plan.validate()?;
    let root_rng = SeededRng::new(cfg.seed);
    let arch = cfg.arch.build(dataset.input_dim, dataset.alphabet.len());
    let eval_cfg = DecodeConfig::new(cfg.eval_beam_width)?;

    let mut trained: BTreeMap<String, ModelParams> = BTreeMap::new();
    let mut stage_reports = Vec::new();
    let mut timings = Vec::new();
    let mut cer_rows = Vec::new();

    for stage in &plan.stages {
        let start = Instant::now();
        let train_idx = dataset.select(Split::Train, &stage.data_accents);
        let dev_idx = dataset.select(Split::Dev, &stage.data_accents);

        let init = match &stage.init {
            InitSpec::Scratch => init_params(
                &arch,
                &mut root_rng.derive_str(&format!("init/{}", stage.model_id)),
            )?,
            InitSpec::From(src) => trained
                .get(src)
                .ok_or_else(|| PipelineError::Config(format!("missing init source {src}")))?
                .clone(),
        };

        // Teachers are frozen: their tempered posteriors are generated once
        // and persisted before the student trains.
        let targets = if stage.teachers.is_empty() {
            None
        } else {
            let dcfg = stage.distill.unwrap_or(cfg.distill);
            let mut store = TargetStore::new(
                &stage
                    .teachers
                    .iter()
                    .map(|t| t.teacher.as_str())
                    .collect::<Vec<_>>()
                    .join("+"),
                dcfg.temperature,
            );
            for assignment in &stage.teachers {
                let teacher = trained.get(&assignment.teacher).ok_or_else(|| {
                    PipelineError::Config(format!("missing teacher {}", assignment.teacher))
                })?;
                let idx = dataset.select(Split::Train, std::slice::from_ref(&assignment.accent));
                store.merge(gen_soft_targets(
                    teacher,
                    &assignment.teacher,
                    dataset,
                    &idx,
                    dcfg.temperature,
                )?);
            }
            store.save(&out_dir.join("targets").join(&stage.model_id))?;
            Some(store)
        };

        let train_cfg = cfg.train_config(
            stage,
            &cfg.distill,
            root_rng
                .derive_str(&format!("train/{}", stage.model_id))
                .next_u64(),
        );
        let outcome = train(init, dataset, &train_idx, &dev_idx, &train_cfg, targets.as_ref())?;

        save_checkpoint(
            &outcome.params,
            &dataset.alphabet,
            &out_dir.join("models").join(format!("{}.acdm", stage.model_id)),
        )?;

        let test_idx = dataset.select(Split::Test, &dataset.accents);
        let eval = evaluate(&outcome.params, dataset, &test_idx, &eval_cfg)?;
        cer_rows.push(CerRow {
            model_id: stage.model_id.clone(),
            per_accent: eval.per_accent.clone(),
            average: eval.average,
        });

        stage_reports.push(StageReport {
            model_id: stage.model_id.clone(),
            phase: stage.phase,
            loss: stage.loss,
            data_accents: stage.data_accents.clone(),
            teachers: stage.teachers.clone(),
            init: stage.init.clone(),
            epochs_ran: outcome.history.epochs.len(),
            best_epoch: outcome.history.best_epoch,
            best_dev_cer: outcome.history.best_dev_cer,
            skipped_utterances: outcome.history.skipped_utterances,
            test_cer: eval,
        });
        timings.push(StageTiming {
            model_id: stage.model_id.clone(),
            seconds: start.elapsed().as_secs_f64(),
        });
        trained.insert(stage.model_id.clone(), outcome.params);
    }

    // Spike-overlap probes between trained model pairs.
    let mut cso_rows = Vec::new();
    for probe in &plan.cso_probes {
        let idx = dataset.select(probe.split, std::slice::from_ref(&probe.accent));
        let a = spike_sequences(&trained[&probe.model_a], dataset, &idx)?;
        let b = spike_sequences(&trained[&probe.model_b], dataset, &idx)?;
        let report = cso(&a, &b, (probe.model_a.clone(), probe.model_b.clone()))?;
        cso_rows.push(CsoRow {
            model_a: probe.model_a.clone(),
            model_b: probe.model_b.clone(),
            accent: probe.accent.clone(),
            split: probe.split,
            mean_pct: 100.0 * report.mean,
            utterances: report.per_utterance.len(),
        });
    }

    // Adaptation summary: each kl_adapt stage against its unadapted base.
    let mut adaptation = Vec::new();
    for stage in plan.stages.iter().filter(|s| s.loss == LossKind::KlAdapt) {
        let accent = stage.data_accents[0].clone();
        let base_model = match &stage.init {
            InitSpec::From(src) => src.clone(),
            InitSpec::Scratch => continue,
        };
        let base_cer = cer_rows
            .iter()
            .find(|r| r.model_id == base_model)
            .and_then(|r| r.per_accent.iter().find(|(a, _)| *a == accent))
            .map(|(_, c)| *c)
            .ok_or_else(|| PipelineError::Data(format!("no base CER for {base_model}")))?;
        let adapted_cer = cer_rows
            .iter()
            .find(|r| r.model_id == stage.model_id)
            .and_then(|r| r.per_accent.iter().find(|(a, _)| *a == accent))
            .map(|(_, c)| *c)
            .ok_or_else(|| PipelineError::Data(format!("no CER for {}", stage.model_id)))?;
        adaptation.push(AdaptationRow {
            accent,
            base_model,
            base_cer,
            adapted_model: stage.model_id.clone(),
            adapted_cer,
            reference_targets: stage
                .teachers
                .iter()
                .map(|t| t.teacher.clone())
                .collect::<Vec<_>>()
                .join("+"),
        });
    }

    // Generation gain of the final pooled student over the baseline; the
    // reference value is the full-scale result this pipeline mirrors.
    let generation_gain = match (
        cer_rows.iter().find(|r| r.model_id == "ma_nt"),
        cer_rows.iter().find(|r| r.model_id == "ma_mt1"),
    ) {
        (Some(base), Some(improved)) => Some(GenerationGain {
            baseline: base.model_id.clone(),
            improved: improved.model_id.clone(),
            baseline_avg_cer: base.average,
            improved_avg_cer: improved.average,
            measured_rel_gain_pct: 100.0 * (base.average - improved.average)
                / base.average.max(1e-12),
            reference_rel_gain_pct: 20.1,
        }),
        _ => None,
    };

    let mut per_split = Vec::new();
    for (name, split) in [
        ("train", Split::Train),
        ("dev", Split::Dev),
        ("test", Split::Test),
    ] {
        per_split.push((
            name.to_string(),
            dataset.select(split, &dataset.accents).len(),
        ));
    }
    let report = Report {
        config: cfg.clone(),
        corpus: CorpusSummary {
            accents: dataset.accents.clone(),
            utterances: dataset.utterances.len(),
            per_split,
            input_dim: dataset.input_dim,
            alphabet_size: dataset.alphabet.len(),
        },
        stages: stage_reports,
        cer_table: cer_rows,
        cso_table: cso_rows,
        adaptation,
        generation_gain,
    };

    write_reports(&report, &timings, out_dir)?;
    Ok(report)
}
