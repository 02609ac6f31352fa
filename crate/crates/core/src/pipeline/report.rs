//! Report assembly and rendering: a deterministic report.json, wall-clock
//! timings in a separate timings.json (so rerunning an identical config
//! reproduces report.json byte-for-byte), a Markdown rendering, and CSV
//! exports of the CER and CSO tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Split;

use super::plan::{InitSpec, RunConfig, TeacherAssignment};
use super::train::LossKind;
use super::{EvalResult, PipelineError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub accents: Vec<String>,
    pub utterances: usize,
    pub per_split: Vec<(String, usize)>,
    pub input_dim: usize,
    pub alphabet_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub model_id: String,
    pub phase: usize,
    pub loss: LossKind,
    pub data_accents: Vec<String>,
    pub teachers: Vec<TeacherAssignment>,
    pub init: InitSpec,
    pub epochs_ran: usize,
    pub best_epoch: usize,
    pub best_dev_cer: f64,
    pub skipped_utterances: usize,
    pub test_cer: EvalResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CerRow {
    pub model_id: String,
    pub per_accent: Vec<(String, f64)>,
    pub average: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsoRow {
    pub model_a: String,
    pub model_b: String,
    pub accent: String,
    pub split: Split,
    pub mean_pct: f64,
    pub utterances: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationRow {
    pub accent: String,
    pub base_model: String,
    pub base_cer: f64,
    pub adapted_model: String,
    pub adapted_cer: f64,
    pub reference_targets: String,
}

/// The final pooled student vs the baseline, with the full-scale reference
/// value recorded (not asserted) alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationGain {
    pub baseline: String,
    pub improved: String,
    pub baseline_avg_cer: f64,
    pub improved_avg_cer: f64,
    pub measured_rel_gain_pct: f64,
    pub reference_rel_gain_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub corpus: CorpusSummary,
    pub stages: Vec<StageReport>,
    pub cer_table: Vec<CerRow>,
    pub cso_table: Vec<CsoRow>,
    pub adaptation: Vec<AdaptationRow>,
    pub generation_gain: Option<GenerationGain>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub model_id: String,
    pub seconds: f64,
}

impl Report {
    pub fn load(path: &Path) -> Result<Report, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Json(e.to_string()))
    }

    pub fn cer_of(&self, model_id: &str, accent: &str) -> Option<f64> {
        self.cer_table
            .iter()
            .find(|r| r.model_id == model_id)
            .and_then(|r| r.per_accent.iter().find(|(a, _)| a == accent))
            .map(|(_, c)| *c)
    }

    pub fn average_cer_of(&self, model_id: &str) -> Option<f64> {
        self.cer_table
            .iter()
            .find(|r| r.model_id == model_id)
            .map(|r| r.average)
    }

    pub fn cso_mean(&self, model_a: &str, model_b: &str, split: Split) -> Option<f64> {
        self.cso_table
            .iter()
            .find(|r| r.model_a == model_a && r.model_b == model_b && r.split == split)
            .map(|r| r.mean_pct)
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

/// Markdown rendering with the CSO, adaptation and per-model CER tables.
pub fn render_markdown(report: &Report, timings: &[StageTiming]) -> String {
    let mut md = String::new();
    md.push_str("# Experiment report\n\n");
    md.push_str(&format!(
        "Corpus: {} utterances over accents [{}]; input dim {}, alphabet {} symbols.\n\n",
        report.corpus.utterances,
        report.corpus.accents.join(", "),
        report.corpus.input_dim,
        report.corpus.alphabet_size,
    ));

    if !report.cso_table.is_empty() {
        md.push_str("## Spike overlap (CSO %) against the pooled baseline\n\n");
        md.push_str("| model pair | accent | split | CSO % |\n|---|---|---|---|\n");
        for row in &report.cso_table {
            md.push_str(&format!(
                "| {} vs {} | {} | {} | {:.1} |\n",
                row.model_a,
                row.model_b,
                row.accent,
                split_name(row.split),
                row.mean_pct
            ));
        }
        md.push('\n');
    }

    if !report.adaptation.is_empty() {
        md.push_str("## Adaptation (CER % on the target accent)\n\n");
        md.push_str(
            "| accent | unadapted | adapted model | reference targets | adapted CER |\n|---|---|---|---|---|\n",
        );
        for row in &report.adaptation {
            md.push_str(&format!(
                "| {} | {} ({:.2}) | {} | {} | {:.2} |\n",
                row.accent,
                row.base_model,
                row.base_cer,
                row.adapted_model,
                row.reference_targets,
                row.adapted_cer
            ));
        }
        md.push('\n');
    }

    md.push_str("## Test CER % per model\n\n");
    md.push_str("| model |");
    for accent in &report.corpus.accents {
        md.push_str(&format!(" {accent} |"));
    }
    md.push_str(" ave |\n|---|");
    for _ in &report.corpus.accents {
        md.push_str("---|");
    }
    md.push_str("---|\n");
    for row in &report.cer_table {
        md.push_str(&format!("| {} |", row.model_id));
        for accent in &report.corpus.accents {
            match row.per_accent.iter().find(|(a, _)| a == accent) {
                Some((_, c)) => md.push_str(&format!(" {c:.2} |")),
                None => md.push_str(" - |"),
            }
        }
        md.push_str(&format!(" {:.2} |\n", row.average));
    }
    md.push('\n');

    if let Some(gain) = &report.generation_gain {
        md.push_str(&format!(
            "Relative average-CER gain of {} over {}: {:.1}% (reference full-scale value: {:.1}%).\n\n",
            gain.improved, gain.baseline, gain.measured_rel_gain_pct, gain.reference_rel_gain_pct
        ));
    }

    if !timings.is_empty() {
        md.push_str("## Stage timings\n\n| stage | seconds |\n|---|---|\n");
        for t in timings {
            md.push_str(&format!("| {} | {:.1} |\n", t.model_id, t.seconds));
        }
        md.push('\n');
    }
    md
}

pub fn cer_csv(report: &Report) -> String {
    let mut csv = String::from("model");
    for accent in &report.corpus.accents {
        csv.push_str(&format!(",{accent}"));
    }
    csv.push_str(",ave\n");
    for row in &report.cer_table {
        csv.push_str(&row.model_id);
        for accent in &report.corpus.accents {
            match row.per_accent.iter().find(|(a, _)| a == accent) {
                Some((_, c)) => csv.push_str(&format!(",{c:.4}")),
                None => csv.push(','),
            }
        }
        csv.push_str(&format!(",{:.4}\n", row.average));
    }
    csv
}

pub fn cso_csv(report: &Report) -> String {
    let mut csv = String::from("model_a,model_b,accent,split,cso_pct,utterances\n");
    for row in &report.cso_table {
        csv.push_str(&format!(
            "{},{},{},{},{:.4},{}\n",
            row.model_a,
            row.model_b,
            row.accent,
            split_name(row.split),
            row.mean_pct,
            row.utterances
        ));
    }
    csv
}

/// Write report.json (deterministic), timings.json (wall-clock), report.md
/// and the CSV exports under `<out_dir>/reports/`.
pub fn write_reports(
    report: &Report,
    timings: &[StageTiming],
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let dir = out_dir.join("reports");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report).map_err(|e| PipelineError::Json(e.to_string()))?,
    )?;
    std::fs::write(
        dir.join("timings.json"),
        serde_json::to_string_pretty(timings).map_err(|e| PipelineError::Json(e.to_string()))?,
    )?;
    std::fs::write(dir.join("report.md"), render_markdown(report, timings))?;
    std::fs::write(dir.join("cer.csv"), cer_csv(report))?;
    std::fs::write(dir.join("cso.csv"), cso_csv(report))?;
    Ok(())
}
