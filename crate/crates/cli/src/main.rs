//! Command-line front end: corpus generation, training, soft-target
//! generation, decoding, evaluation, spike-overlap measurement, preset
//! plan runs, and report rendering.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use accentkd::corpus::{gen_corpus, oracle_separability_check, CorpusConfig, Split};
use accentkd::decode::{beam_search_decode, cso, edit_distance, DecodeConfig, SpikeSequence};
use accentkd::distill::DistillConfig;
use accentkd::frontend::{waveform_features, FrontendConfig, Waveform};
use accentkd::model::{forward, init_params, load_checkpoint, save_checkpoint};
use accentkd::numcore::SeededRng;
use accentkd::pipeline::{
    evaluate, gen_soft_targets, prepare_dataset, preset_plan, render_markdown, report::cer_csv,
    report::cso_csv, run_plan, spike_sequences, train, ArchChoice, Dataset, ExperimentPlan,
    LossKind, PipelineError, Report, RunConfig, TargetStore, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "accentkd",
    about = "CTC acoustic models with accent-aware knowledge distillation on a synthetic corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-accent corpus.
    GenCorpus(GenCorpusArgs),
    /// Train one model on a corpus.
    Train(TrainArgs),
    /// Produce tempered soft targets from a trained model.
    SoftTargets(SoftTargetsArgs),
    /// Decode a corpus split (or one WAV file) with a trained model.
    Decode(DecodeArgs),
    /// Report per-accent CER of a model on a split.
    Evaluate(EvaluateArgs),
    /// Character-spike overlap between two models.
    Cso(CsoArgs),
    /// Experiment plan execution.
    Plan(PlanArgs),
    /// Report rendering.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generation seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Speakers per accent.
    #[arg(long, default_value_t = 12)]
    speakers: usize,
    /// Utterances per speaker.
    #[arg(long, default_value_t = 40)]
    utts: usize,
    /// JSON file overriding the whole corpus config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run the nearest-template separability check after generation.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint output path (.acdm).
    #[arg(long)]
    out: PathBuf,
    /// Accents to train on (comma separated; default all).
    #[arg(long, value_delimiter = ',')]
    accents: Vec<String>,
    /// Objective: ctc, distill, or kl-adapt.
    #[arg(long, default_value = "ctc")]
    loss: String,
    /// Soft-target directory (required for distill / kl-adapt).
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Interpolation weight toward the teacher term.
    #[arg(long, default_value_t = 0.9)]
    lambda: f64,
    /// Softmax temperature for teacher and student.
    #[arg(long, default_value_t = 4.0)]
    temperature: f64,
    /// Initialize from an existing checkpoint instead of from scratch.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Network preset: desk or paper.
    #[arg(long, default_value = "desk")]
    arch: String,
    #[arg(long, default_value_t = 30)]
    max_epochs: usize,
    #[arg(long, default_value_t = 4)]
    patience: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
}

#[derive(Args)]
struct SoftTargetsArgs {
    /// Teacher checkpoint (.acdm).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Accents to cover (default all).
    #[arg(long, value_delimiter = ',')]
    accents: Vec<String>,
    #[arg(long, default_value_t = 4.0)]
    temperature: f64,
    /// Output directory for the per-utterance target containers.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory (decode a split)...
    #[arg(long, conflicts_with = "wav")]
    corpus: Option<PathBuf>,
    /// ...or a single 16-bit PCM mono WAV file.
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_delimiter = ',')]
    accents: Vec<String>,
    #[arg(long, default_value_t = 100)]
    beam: usize,
    /// JSON-lines output path (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_delimiter = ',')]
    accents: Vec<String>,
    #[arg(long, default_value_t = 100)]
    beam: usize,
}

#[derive(Args)]
struct CsoArgs {
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, value_delimiter = ',')]
    accents: Vec<String>,
    /// JSON report output path (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(subcommand)]
    command: PlanCommand,
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Execute a plan (the built-in preset unless --plan is given).
    Run(PlanRunArgs),
}

#[derive(Args)]
struct PlanRunArgs {
    /// Run config JSON (defaults are used and echoed when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for corpus, models, targets and reports.
    #[arg(long)]
    out: PathBuf,
    /// Custom plan JSON instead of the built-in preset.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(subcommand)]
    command: ReportCommand,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Re-render report.md and CSV exports from a report.json.
    Render(ReportRenderArgs),
}

#[derive(Args)]
struct ReportRenderArgs {
    /// Path to report.json.
    #[arg(long)]
    report: PathBuf,
    /// Output directory (defaults to the report's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}

fn parse_split(name: &str) -> Result<Split, PipelineError> {
    match name {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(PipelineError::Config(format!(
            "unknown split {other:?} (expected train, dev, or test)"
        ))),
    }
}

fn parse_loss(name: &str) -> Result<LossKind, PipelineError> {
    match name {
        "ctc" => Ok(LossKind::Ctc),
        "distill" => Ok(LossKind::Distill),
        "kl-adapt" | "kl_adapt" => Ok(LossKind::KlAdapt),
        other => Err(PipelineError::Config(format!(
            "unknown loss {other:?} (expected ctc, distill, or kl-adapt)"
        ))),
    }
}

fn parse_arch(name: &str) -> Result<ArchChoice, PipelineError> {
    match name {
        "desk" => Ok(ArchChoice::Desk),
        "paper" => Ok(ArchChoice::Paper),
        other => Err(PipelineError::Config(format!(
            "unknown arch {other:?} (expected desk or paper)"
        ))),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

fn selected_accents(data: &Dataset, requested: &[String]) -> Result<Vec<String>, PipelineError> {
    if requested.is_empty() {
        return Ok(data.accents.clone());
    }
    for a in requested {
        if !data.accents.contains(a) {
            return Err(PipelineError::Config(format!(
                "accent {a:?} not in corpus (available: {:?})",
                data.accents
            )));
        }
    }
    Ok(requested.to_vec())
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string()
}

fn dispatch(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::GenCorpus(args) => {
            let mut cfg = match &args.config {
                Some(path) => read_json::<CorpusConfig>(path)?,
                None => CorpusConfig {
                    speakers_per_accent: args.speakers,
                    utts_per_speaker: args.utts,
                    ..CorpusConfig::default()
                },
            };
            cfg.seed = args.seed;
            let manifest = gen_corpus(&cfg, &args.out)?;
            println!(
                "generated {} utterances over {:?} into {}",
                manifest.records.len(),
                manifest.accent_names(),
                args.out.display()
            );
            if args.check {
                let report = oracle_separability_check(&manifest, &args.out)?;
                for (accent, cer) in &report.matched {
                    println!("oracle matched {accent}: {cer:.2}% CER");
                }
            }
            Ok(())
        }
        Command::Train(args) => {
            let data = Dataset::load(&args.corpus, &FrontendConfig::default())?;
            let accents = selected_accents(&data, &args.accents)?;
            let loss = parse_loss(&args.loss)?;
            let targets = match (&args.targets, loss) {
                (_, LossKind::Ctc) => None,
                (Some(dir), _) => Some(TargetStore::load(dir)?),
                (None, _) => {
                    return Err(PipelineError::Config(
                        "--targets is required for distill / kl-adapt".into(),
                    ))
                }
            };
            let init = match &args.init {
                Some(path) => load_checkpoint(path)?.0,
                None => {
                    let arch = parse_arch(&args.arch)?.build(data.input_dim, data.alphabet.len());
                    init_params(&arch, &mut SeededRng::new(args.seed).derive_str("init"))?
                }
            };
            let cfg = TrainConfig {
                learning_rate: args.learning_rate,
                batch_size: args.batch_size,
                max_epochs: args.max_epochs,
                patience: args.patience,
                distill: match loss {
                    LossKind::Ctc => None,
                    _ => Some(DistillConfig::new(args.lambda, args.temperature)?),
                },
                loss,
                seed: args.seed,
                ..TrainConfig::default()
            };
            let train_idx = data.select(Split::Train, &accents);
            let dev_idx = data.select(Split::Dev, &accents);
            let outcome = train(init, &data, &train_idx, &dev_idx, &cfg, targets.as_ref())?;
            save_checkpoint(&outcome.params, &data.alphabet, &args.out)?;
            println!(
                "trained {} epochs (best epoch {}, dev CER {:.2}%) -> {}",
                outcome.history.epochs.len(),
                outcome.history.best_epoch,
                outcome.history.best_dev_cer,
                args.out.display()
            );
            Ok(())
        }
        Command::SoftTargets(args) => {
            let data = Dataset::load(&args.corpus, &FrontendConfig::default())?;
            let accents = selected_accents(&data, &args.accents)?;
            let (teacher, _) = load_checkpoint(&args.model)?;
            let idx = data.select(parse_split(&args.split)?, &accents);
            let teacher_id = model_name(&args.model);
            let store = gen_soft_targets(&teacher, &teacher_id, &data, &idx, args.temperature)?;
            store.save(&args.out)?;
            println!(
                "wrote {} target files (teacher {teacher_id}, T={}) to {}",
                store.len(),
                args.temperature,
                args.out.display()
            );
            Ok(())
        }
        Command::Decode(args) => {
            let (params, alphabet) = load_checkpoint(&args.model)?;
            let decode_cfg = DecodeConfig::new(args.beam)?;
            if let Some(wav_path) = &args.wav {
                let wave = Waveform::read_wav(wav_path)?;
                let raw = waveform_features(&wave, 25.0, 10.0, 26)?;
                let feats = FrontendConfig::default().apply(&raw)?;
                let (logits, _) = forward(&params, &feats)?;
                let post = accentkd::ctc::PosteriorMatrix::from_logits(&logits)?;
                let hyp = beam_search_decode(&post, &alphabet, &decode_cfg);
                println!("{}", hyp.render(&alphabet));
                return Ok(());
            }
            let corpus = args
                .corpus
                .ok_or_else(|| PipelineError::Config("decode needs --corpus or --wav".into()))?;
            let data = Dataset::load(&corpus, &FrontendConfig::default())?;
            let accents = selected_accents(&data, &args.accents)?;
            let idx = data.select(parse_split(&args.split)?, &accents);
            let mut lines = String::new();
            for &i in &idx {
                let utt = &data.utterances[i];
                let (logits, _) = forward(&params, &utt.feats)?;
                let post = accentkd::ctc::PosteriorMatrix::from_logits(&logits)?;
                let hyp = beam_search_decode(&post, &alphabet, &decode_cfg);
                let record = serde_json::json!({
                    "id": utt.id,
                    "hyp": hyp.render(&alphabet),
                    "ref": utt.transcript,
                    "edit_distance": edit_distance(&hyp, &utt.label),
                });
                lines.push_str(&record.to_string());
                lines.push('\n');
            }
            match &args.out {
                Some(path) => std::fs::write(path, lines)?,
                None => print!("{lines}"),
            }
            Ok(())
        }
        Command::Evaluate(args) => {
            let (params, _) = load_checkpoint(&args.model)?;
            let data = Dataset::load(&args.corpus, &FrontendConfig::default())?;
            let accents = selected_accents(&data, &args.accents)?;
            let idx = data.select(parse_split(&args.split)?, &accents);
            let result = evaluate(&params, &data, &idx, &DecodeConfig::new(args.beam)?)?;
            for (accent, cer) in &result.per_accent {
                println!("{accent}: {cer:.2}% CER");
            }
            println!(
                "ave: {:.2}% CER (pooled {:.2}%)",
                result.average, result.overall
            );
            Ok(())
        }
        Command::Cso(args) => {
            let (a, _) = load_checkpoint(&args.model_a)?;
            let (b, _) = load_checkpoint(&args.model_b)?;
            let data = Dataset::load(&args.corpus, &FrontendConfig::default())?;
            let accents = selected_accents(&data, &args.accents)?;
            let idx = data.select(parse_split(&args.split)?, &accents);
            let spikes_a: Vec<SpikeSequence> = spike_sequences(&a, &data, &idx)?;
            let spikes_b: Vec<SpikeSequence> = spike_sequences(&b, &data, &idx)?;
            let report = cso(
                &spikes_a,
                &spikes_b,
                (model_name(&args.model_a), model_name(&args.model_b)),
            )?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| PipelineError::Json(e.to_string()))?;
            match &args.out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Plan(plan_args) => match plan_args.command {
            PlanCommand::Run(args) => {
                let mut cfg = match &args.config {
                    Some(path) => read_json::<RunConfig>(path)?,
                    None => RunConfig::default(),
                };
                if let Some(seed) = args.seed {
                    cfg.seed = seed;
                }
                let (data, _) = prepare_dataset(&cfg, &args.out)?;
                let plan: ExperimentPlan = match &args.plan {
                    Some(path) => read_json(path)?,
                    None => {
                        // Study accent for the spike-overlap table is the
                        // first accent; the adaptation target prefers the
                        // substitution-carrying "ind" preset when present.
                        let adapt = data
                            .accents
                            .iter()
                            .find(|a| *a == "ind")
                            .unwrap_or_else(|| data.accents.last().expect("non-empty"))
                            .clone();
                        preset_plan(&data.accents, &data.accents[0], &adapt, &cfg.distill)
                    }
                };
                let report = run_plan(&plan, &cfg, &data, &args.out)?;
                println!(
                    "ran {} stages; reports under {}",
                    report.stages.len(),
                    args.out.join("reports").display()
                );
                if let Some(gain) = &report.generation_gain {
                    println!(
                        "{} {:.2}% -> {} {:.2}% average CER ({:+.1}% relative)",
                        gain.baseline,
                        gain.baseline_avg_cer,
                        gain.improved,
                        gain.improved_avg_cer,
                        gain.measured_rel_gain_pct
                    );
                }
                Ok(())
            }
        },
        Command::Report(report_args) => match report_args.command {
            ReportCommand::Render(args) => {
                let report = Report::load(&args.report)?;
                let dir = args.out.unwrap_or_else(|| {
                    args.report
                        .parent()
                        .map(Path::to_path_buf)
                        .unwrap_or_else(|| PathBuf::from("."))
                });
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.md"), render_markdown(&report, &[]))?;
                std::fs::write(dir.join("cer.csv"), cer_csv(&report))?;
                std::fs::write(dir.join("cso.csv"), cso_csv(&report))?;
                println!("rendered into {}", dir.display());
                Ok(())
            }
        },
    }
}
