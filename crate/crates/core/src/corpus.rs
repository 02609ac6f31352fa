//! Deterministic synthetic multi-accent corpus generator.
//!
//! Each character of a small alphabet owns a fixed template vector in raw
//! feature space. An utterance emits, per character, a run of jittered
//! template frames; accents perturb the templates systematically
//! (substitution blends and vowel shifts) and speakers add a constant
//! offset. Everything derives from `(seed, utterance id)` so generation is
//! order-independent and byte-reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::ctc::{min_frames, Alphabet, CtcError, LabelSequence};
use crate::frontend::{FeatureSequence, Provenance};
use crate::numcore::{SeededRng, Tensor};

/// Raw feature dimension of the synthetic streams, matching the mel
/// frontend width.
pub const RAW_DIM: usize = 26;

/// Seed of the fixed base-template bank; independent of the corpus seed so
/// every corpus shares the same underlying acoustics.
const TEMPLATE_SEED: u64 = 0xACD0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("container error: {0}")]
    Container(#[from] ContainerError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

/// Systematic per-accent perturbation of the template bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccentSpec {
    pub name: String,
    /// character -> (target character, blend weight in [0,1]); the
    /// character's template moves `weight` of the way toward the target's.
    pub substitution_map: BTreeMap<char, (char, f64)>,
    /// character -> additive feature offset.
    pub template_shift: BTreeMap<char, Vec<f64>>,
    /// Scales every character's mean duration; in [0.5, 2].
    pub duration_scale: f64,
}

impl AccentSpec {
    pub fn identity(name: &str) -> AccentSpec {
        AccentSpec {
            name: name.to_string(),
            substitution_map: BTreeMap::new(),
            template_shift: BTreeMap::new(),
            duration_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for (c, (to, w)) in &self.substitution_map {
            if !(0.0..=1.0).contains(w) {
                return Err(CorpusError::Config(format!(
                    "blend weight {w} for {c:?}->{to:?} not in [0,1]"
                )));
            }
        }
        if !(0.5..=2.0).contains(&self.duration_scale) {
            return Err(CorpusError::Config(format!(
                "duration_scale {} not in [0.5, 2]",
                self.duration_scale
            )));
        }
        for (c, shift) in &self.template_shift {
            if shift.len() != RAW_DIM {
                return Err(CorpusError::Config(format!(
                    "template shift for {c:?} has dim {}, expected {RAW_DIM}",
                    shift.len()
                )));
            }
        }
        Ok(())
    }
}

/// The mean feature vector and duration statistics of one character.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterTemplate {
    pub character: char,
    pub mean: Vec<f64>,
    pub duration_mean: f64,
    pub duration_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One synthetic utterance's metadata; features live in a separate file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub accent: String,
    pub transcript: String,
    pub split: Split,
    pub n_raw_frames: usize,
    pub feature_file: String,
}

/// Generator settings; the defaults are the desk-scale corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub accents: Vec<AccentSpec>,
    pub speakers_per_accent: usize,
    pub utts_per_speaker: usize,
    pub seed: u64,
    pub min_transcript_len: usize,
    pub max_transcript_len: usize,
    /// How many of the eight letters transcripts draw from (1..=8); small
    /// values make trivially separable toy corpora.
    pub n_letters: usize,
    /// Per-frame, per-dimension Gaussian jitter.
    pub jitter_sigma: f64,
    /// Gaussian offset drawn once per character occurrence and shared by
    /// all of its frames; unlike per-frame jitter it does not average out
    /// under context stacking.
    pub char_jitter_sigma: f64,
    /// Per-speaker constant offset scale.
    pub speaker_sigma: f64,
    /// Scale of the fixed base templates.
    pub template_scale: f64,
    pub frame_shift_ms: f64,
}

impl Default for CorpusConfig {
    fn default() -> CorpusConfig {
        CorpusConfig {
            accents: default_accents(),
            speakers_per_accent: 12,
            utts_per_speaker: 40,
            seed: 1,
            min_transcript_len: 3,
            max_transcript_len: 10,
            n_letters: 8,
            jitter_sigma: 0.3,
            char_jitter_sigma: 1.6,
            speaker_sigma: 0.5,
            template_scale: 1.5,
            frame_shift_ms: 10.0,
        }
    }
}

/// The three built-in accents: an identity accent, a vowel-shifted accent,
/// and an accent that blends its 't' template 0.6 of the way toward 'd'
/// with a smaller vowel shift of its own.
pub fn default_accents() -> Vec<AccentSpec> {
    let shift_vec = |tag: &str, scale: f64| -> Vec<f64> {
        let mut rng = SeededRng::new(TEMPLATE_SEED).derive_str(tag);
        rng.normal_vec(RAW_DIM).iter().map(|v| v * scale).collect()
    };
    let us = AccentSpec::identity("us");
    let mut his = AccentSpec::identity("his");
    for vowel in ['a', 'e', 'o'] {
        his.template_shift
            .insert(vowel, shift_vec("shift-his", 0.55));
    }
    his.duration_scale = 1.15;
    let mut ind = AccentSpec::identity("ind");
    ind.substitution_map.insert('t', ('d', 0.6));
    for vowel in ['a', 'e', 'o'] {
        ind.template_shift
            .insert(vowel, shift_vec("shift-ind", 0.4));
    }
    ind.duration_scale = 0.9;
    vec![us, his, ind]
}

/// Fixed base templates for every non-blank symbol.
pub fn base_templates(template_scale: f64) -> BTreeMap<char, CharacterTemplate> {
    let alphabet = Alphabet::default_synthetic();
    let mut out = BTreeMap::new();
    for &c in alphabet.symbols() {
        if c == alphabet.symbol(alphabet.blank()) {
            continue;
        }
        let mut rng = SeededRng::new(TEMPLATE_SEED).derive_str(&format!("template/{c}"));
        let mean = rng
            .normal_vec(RAW_DIM)
            .iter()
            .map(|v| v * template_scale)
            .collect();
        let (duration_mean, duration_std) = if c == ' ' {
            (8.0, 2.0)
        } else if c == '~' {
            (5.0, 1.5)
        } else {
            (6.0, 1.5)
        };
        out.insert(
            c,
            CharacterTemplate {
                character: c,
                mean,
                duration_mean,
                duration_std,
            },
        );
    }
    out
}

/// Templates after applying an accent's substitution blends and shifts.
pub fn effective_templates(
    accent: &AccentSpec,
    base: &BTreeMap<char, CharacterTemplate>,
) -> BTreeMap<char, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (&c, template) in base {
        let mut mean = template.mean.clone();
        if let Some((target, w)) = accent.substitution_map.get(&c) {
            if let Some(target_t) = base.get(target) {
                for (m, &tv) in mean.iter_mut().zip(&target_t.mean) {
                    *m = (1.0 - w) * *m + w * tv;
                }
            }
        }
        if let Some(shift) = accent.template_shift.get(&c) {
            for (m, &s) in mean.iter_mut().zip(shift) {
                *m += s;
            }
        }
        out.insert(c, mean);
    }
    out
}

/// Corpus-level index: generation config, alphabet, and one record per
/// utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: CorpusConfig,
    pub alphabet: Alphabet,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest, CorpusError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))
    }

    pub fn records_for(&self, split: Split, accents: &[String]) -> Vec<&UtteranceRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && accents.iter().any(|a| *a == r.accent))
            .collect()
    }

    pub fn accent_names(&self) -> Vec<String> {
        self.config.accents.iter().map(|a| a.name.clone()).collect()
    }
}

fn sample_transcript(cfg: &CorpusConfig, alphabet: &Alphabet, rng: &mut SeededRng) -> String {
    let letters: Vec<char> = alphabet
        .symbols()
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            *i != alphabet.blank() && *i != alphabet.space() && *i != alphabet.noise()
        })
        .map(|(_, &c)| c)
        .collect();
    let letters = &letters[..cfg.n_letters.min(letters.len())];
    let space = alphabet.symbol(alphabet.space());
    let noise = alphabet.symbol(alphabet.noise());
    let len = cfg.min_transcript_len + rng.below(cfg.max_transcript_len - cfg.min_transcript_len + 1);
    let mut out = String::new();
    let mut prev: Option<char> = None;
    for pos in 0..len {
        let interior = pos > 0 && pos + 1 < len;
        loop {
            let roll = rng.next_f64();
            let c = if interior && roll < 0.10 {
                space
            } else if interior && roll < 0.14 {
                noise
            } else {
                letters[rng.below(letters.len())]
            };
            // No adjacent repeats: keeps min_frames == transcript length, so
            // three raw frames per character guarantee feasibility after
            // 3x decimation.
            if prev != Some(c) {
                out.push(c);
                prev = Some(c);
                break;
            }
        }
    }
    out
}

fn speaker_offset(cfg: &CorpusConfig, speaker: &str) -> Vec<f64> {
    let mut rng = SeededRng::new(cfg.seed).derive_str(&format!("speaker/{speaker}"));
    rng.normal_vec(RAW_DIM)
        .iter()
        .map(|v| v * cfg.speaker_sigma)
        .collect()
}

fn split_of(speaker_index: usize, speakers_per_accent: usize) -> Split {
    // Mirrors a 28h/5h/5h corpus layout: the trailing speakers form the
    // dev and test partitions.
    let dev = ((speakers_per_accent as f64 * 5.0 / 38.0).round() as usize).max(1);
    let test = dev;
    let train = speakers_per_accent - dev - test;
    if speaker_index < train {
        Split::Train
    } else if speaker_index < train + dev {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Generate one utterance's raw feature stream.
fn emit_utterance(
    cfg: &CorpusConfig,
    accent: &AccentSpec,
    templates: &BTreeMap<char, Vec<f64>>,
    base: &BTreeMap<char, CharacterTemplate>,
    transcript: &str,
    spk_offset: &[f64],
    rng: &mut SeededRng,
) -> FeatureSequence {
    let mut frames: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for c in transcript.chars() {
        let template = &base[&c];
        let mean = &templates[&c];
        let duration = (template.duration_mean * accent.duration_scale
            + template.duration_std * rng.normal())
        .round()
        .max(3.0) as usize;
        let run_offset: Vec<f64> = (0..RAW_DIM)
            .map(|_| cfg.char_jitter_sigma * rng.normal())
            .collect();
        for _ in 0..duration {
            for d in 0..RAW_DIM {
                frames.push(
                    mean[d] + spk_offset[d] + run_offset[d] + cfg.jitter_sigma * rng.normal(),
                );
            }
            n += 1;
        }
    }
    FeatureSequence::new(
        Tensor::from_vec(&[n, RAW_DIM], frames).expect("at least 3 frames per character"),
        cfg.frame_shift_ms,
        Provenance::Raw,
    )
}

/// Generate the corpus under `out_dir`: `manifest.json` plus one
/// `feats/<id>.acdm` container per utterance (tensor "features").
pub fn gen_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Manifest, CorpusError> {
    if cfg.accents.is_empty() {
        return Err(CorpusError::Config("at least one accent required".into()));
    }
    if cfg.speakers_per_accent < 3 {
        return Err(CorpusError::Config(
            "at least 3 speakers per accent needed for disjoint train/dev/test splits".into(),
        ));
    }
    if cfg.utts_per_speaker == 0 {
        return Err(CorpusError::Config("utts_per_speaker must be >= 1".into()));
    }
    if cfg.n_letters == 0 || cfg.n_letters > 8 {
        return Err(CorpusError::Config(format!(
            "n_letters {} not in 1..=8",
            cfg.n_letters
        )));
    }
    if cfg.min_transcript_len == 0 || cfg.min_transcript_len > cfg.max_transcript_len {
        return Err(CorpusError::Config(format!(
            "bad transcript length range [{}, {}]",
            cfg.min_transcript_len, cfg.max_transcript_len
        )));
    }
    let mut names = std::collections::BTreeSet::new();
    for accent in &cfg.accents {
        accent.validate()?;
        if !names.insert(accent.name.clone()) {
            return Err(CorpusError::Config(format!(
                "duplicate accent name {:?}",
                accent.name
            )));
        }
    }

    let alphabet = Alphabet::default_synthetic();
    let base = base_templates(cfg.template_scale);
    let root = SeededRng::new(cfg.seed);
    std::fs::create_dir_all(out_dir.join("feats"))?;

    let mut records = Vec::new();
    for accent in &cfg.accents {
        let templates = effective_templates(accent, &base);
        for spk in 0..cfg.speakers_per_accent {
            let speaker = format!("{}-s{spk:02}", accent.name);
            let offset = speaker_offset(cfg, &speaker);
            let split = split_of(spk, cfg.speakers_per_accent);
            for utt in 0..cfg.utts_per_speaker {
                let id = format!("{speaker}-u{utt:03}");
                let mut rng = root.derive_str(&format!("utt/{id}"));
                let transcript = sample_transcript(cfg, &alphabet, &mut rng);
                let feats =
                    emit_utterance(cfg, accent, &templates, &base, &transcript, &offset, &mut rng);
                let label = LabelSequence::from_text(&transcript, &alphabet)?;
                debug_assert!(feats.n_frames().div_ceil(3) >= min_frames(&label));
                let feature_file = format!("feats/{id}.acdm");
                let mut c = Container::new();
                c.push("features", feats.frames.clone());
                c.save(&out_dir.join(&feature_file))?;
                records.push(UtteranceRecord {
                    id,
                    speaker: speaker.clone(),
                    accent: accent.name.clone(),
                    transcript,
                    split,
                    n_raw_frames: feats.n_frames(),
                    feature_file,
                });
            }
        }
    }

    let manifest = Manifest {
        config: cfg.clone(),
        alphabet,
        records,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CorpusError::Manifest(e.to_string()))?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Read one utterance's raw features back from disk.
pub fn load_features(dir: &Path, record: &UtteranceRecord) -> Result<FeatureSequence, CorpusError> {
    let c = Container::load(&dir.join(&record.feature_file))?;
    let frames = c.get("features")?.clone();
    Ok(FeatureSequence::new(
        frames,
        10.0,
        Provenance::Raw,
    ))
}

/// Matched vs mismatched nearest-template decoding quality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparabilityReport {
    /// (data accent, CER% with that accent's own templates)
    pub matched: Vec<(String, f64)>,
    /// (data accent, template accent, CER%)
    pub mismatched: Vec<(String, String, f64)>,
}

impl SeparabilityReport {
    pub fn matched_cer(&self, accent: &str) -> Option<f64> {
        self.matched
            .iter()
            .find(|(a, _)| a == accent)
            .map(|(_, c)| *c)
    }

    pub fn mismatched_cer(&self, data_accent: &str, template_accent: &str) -> Option<f64> {
        self.mismatched
            .iter()
            .find(|(d, t, _)| d == data_accent && t == template_accent)
            .map(|(_, _, c)| *c)
    }
}

/// Frame-wise nearest-template classification followed by adjacent-repeat
/// collapse, scored as CER against the transcripts. Guards that the
/// synthetic task is learnable and that accents matter.
pub fn oracle_separability_check(
    manifest: &Manifest,
    dir: &Path,
) -> Result<SeparabilityReport, CorpusError> {
    let base = base_templates(manifest.config.template_scale);
    let alphabet = &manifest.alphabet;
    let accent_templates: BTreeMap<String, BTreeMap<char, Vec<f64>>> = manifest
        .config
        .accents
        .iter()
        .map(|a| (a.name.clone(), effective_templates(a, &base)))
        .collect();

    let decode_with = |record: &UtteranceRecord,
                       templates: &BTreeMap<char, Vec<f64>>|
     -> Result<(LabelSequence, LabelSequence), CorpusError> {
        let feats = load_features(dir, record)?;
        let chars: Vec<char> = templates.keys().cloned().collect();
        let mut path: Vec<usize> = Vec::with_capacity(feats.n_frames());
        for t in 0..feats.n_frames() {
            let frame = feats.frames.row(t);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, c) in chars.iter().enumerate() {
                let mean = &templates[c];
                let d: f64 = frame
                    .iter()
                    .zip(mean.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            path.push(alphabet.index_of(chars[best])?);
        }
        // Merge adjacent repeats; nearest-template paths contain no blanks.
        let mut hyp = Vec::new();
        for &s in &path {
            if hyp.last() != Some(&s) {
                hyp.push(s);
            }
        }
        Ok((
            LabelSequence::from_indices_unchecked(hyp),
            LabelSequence::from_text(&record.transcript, alphabet)?,
        ))
    };

    let mut matched = Vec::new();
    let mut mismatched = Vec::new();
    for data_accent in manifest.accent_names() {
        let records: Vec<&UtteranceRecord> = manifest
            .records
            .iter()
            .filter(|r| r.accent == data_accent)
            .collect();
        for (template_accent, templates) in &accent_templates {
            let mut pairs = Vec::with_capacity(records.len());
            for r in &records {
                pairs.push(decode_with(r, templates)?);
            }
            let cer = crate::decode::cer(&pairs)
                .map_err(|e| CorpusError::Manifest(e.to_string()))?;
            if *template_accent == data_accent {
                matched.push((data_accent.clone(), cer));
            } else {
                mismatched.push((data_accent.clone(), template_accent.clone(), cer));
            }
        }
    }
    Ok(SeparabilityReport {
        matched,
        mismatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> CorpusConfig {
        CorpusConfig {
            speakers_per_accent: 4,
            utts_per_speaker: 3,
            seed,
            ..CorpusConfig::default()
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                    out.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_corpus(&tiny_config(7), a.path()).unwrap();
        gen_corpus(&tiny_config(7), b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn different_seed_differs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_corpus(&tiny_config(7), a.path()).unwrap();
        gen_corpus(&tiny_config(8), b.path()).unwrap();
        assert_ne!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn identity_accent_zero_noise_emits_exact_templates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            accents: vec![AccentSpec::identity("flat")],
            speakers_per_accent: 3,
            utts_per_speaker: 2,
            jitter_sigma: 0.0,
            char_jitter_sigma: 0.0,
            speaker_sigma: 0.0,
            ..tiny_config(3)
        };
        let manifest = gen_corpus(&cfg, dir.path()).unwrap();
        let base = base_templates(cfg.template_scale);
        for record in &manifest.records {
            let feats = load_features(dir.path(), record).unwrap();
            let mut t = 0usize;
            for c in record.transcript.chars() {
                let mean = &base[&c].mean;
                // Every frame of this character's run equals the template.
                while t < feats.n_frames() {
                    let frame = feats.frames.row(t);
                    let d: f64 = frame
                        .iter()
                        .zip(mean.iter())
                        .map(|(a, b)| (a - b).abs())
                        .sum();
                    if d > 1e-12 {
                        break;
                    }
                    t += 1;
                }
            }
            assert_eq!(t, feats.n_frames(), "{}: non-template frames", record.id);
        }
    }

    #[test]
    fn speakers_are_disjoint_across_splits() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_corpus(&tiny_config(5), dir.path()).unwrap();
        let mut by_split: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
        for r in &manifest.records {
            let split = match r.split {
                Split::Train => "train",
                Split::Dev => "dev",
                Split::Test => "test",
            };
            by_split.entry(split).or_default().insert(&r.speaker);
        }
        let train = &by_split["train"];
        let dev = &by_split["dev"];
        let test = &by_split["test"];
        assert!(train.is_disjoint(dev));
        assert!(train.is_disjoint(test));
        assert!(dev.is_disjoint(test));
        assert!(!train.is_empty() && !dev.is_empty() && !test.is_empty());
    }

    #[test]
    fn every_utterance_is_feasible_after_decimation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_corpus(&tiny_config(11), dir.path()).unwrap();
        for r in &manifest.records {
            let label = LabelSequence::from_text(&r.transcript, &manifest.alphabet).unwrap();
            assert!(
                r.n_raw_frames.div_ceil(3) >= min_frames(&label),
                "{}: {} raw frames for {:?}",
                r.id,
                r.n_raw_frames,
                r.transcript
            );
            assert!(!r.transcript.is_empty());
        }
    }

    #[test]
    fn zero_jitter_oracle_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            jitter_sigma: 0.0,
            char_jitter_sigma: 0.0,
            speaker_sigma: 0.0,
            ..tiny_config(13)
        };
        let manifest = gen_corpus(&cfg, dir.path()).unwrap();
        let report = oracle_separability_check(&manifest, dir.path()).unwrap();
        for (accent, cer) in &report.matched {
            assert_eq!(*cer, 0.0, "accent {accent}");
        }
    }

    #[test]
    fn matched_templates_beat_mismatched() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(17);
        let manifest = gen_corpus(&cfg, dir.path()).unwrap();
        let report = oracle_separability_check(&manifest, dir.path()).unwrap();
        let has_subs: BTreeMap<&str, bool> = cfg
            .accents
            .iter()
            .map(|a| (a.name.as_str(), !a.substitution_map.is_empty()))
            .collect();
        for (data, templates, cer) in &report.mismatched {
            let matched = report.matched_cer(data).unwrap();
            if has_subs[data.as_str()] {
                // Substitution-heavy data decoded with foreign templates
                // must be strictly worse.
                assert!(
                    matched < *cer,
                    "{data} data: matched {matched} vs {templates} templates {cer}"
                );
            } else {
                // Shift-only mismatches may tie at low noise but can never
                // beat the matched templates.
                assert!(
                    matched <= *cer,
                    "{data} data: matched {matched} vs {templates} templates {cer}"
                );
            }
        }
    }

    #[test]
    fn default_corpus_oracle_under_15_percent() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_corpus(&tiny_config(19), dir.path()).unwrap();
        let report = oracle_separability_check(&manifest, dir.path()).unwrap();
        for (accent, cer) in &report.matched {
            assert!(*cer < 15.0, "accent {accent}: oracle CER {cer}");
        }
    }

    #[test]
    fn oracle_degrades_monotonically_with_jitter() {
        let mut last = -1.0;
        for (i, jitter) in [0.0, 2.0, 6.0, 20.0].iter().enumerate() {
            let dir = tempfile::tempdir().unwrap();
            let cfg = CorpusConfig {
                jitter_sigma: *jitter,
                ..tiny_config(23)
            };
            let manifest = gen_corpus(&cfg, dir.path()).unwrap();
            let report = oracle_separability_check(&manifest, dir.path()).unwrap();
            let mean: f64 = report.matched.iter().map(|(_, c)| c).sum::<f64>()
                / report.matched.len() as f64;
            assert!(mean >= last, "step {i}: {mean} < {last}");
            last = mean;
        }
        // Extreme jitter approaches chance-level garbage output.
        assert!(last > 50.0, "extreme jitter CER {last}");
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(1);
        cfg.accents.clear();
        assert!(matches!(
            gen_corpus(&cfg, dir.path()),
            Err(CorpusError::Config(_))
        ));
        let mut cfg = tiny_config(1);
        cfg.speakers_per_accent = 2;
        assert!(matches!(
            gen_corpus(&cfg, dir.path()),
            Err(CorpusError::Config(_))
        ));
        let mut cfg = tiny_config(1);
        cfg.accents[0].duration_scale = 3.0;
        assert!(matches!(
            gen_corpus(&cfg, dir.path()),
            Err(CorpusError::Config(_))
        ));
    }

    #[test]
    fn manifest_roundtrip_and_selectors() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_corpus(&tiny_config(29), dir.path()).unwrap();
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(manifest.records.len(), loaded.records.len());
        let train_us = loaded.records_for(Split::Train, &["us".to_string()]);
        assert!(!train_us.is_empty());
        assert!(train_us.iter().all(|r| r.accent == "us"));
        let ids: std::collections::BTreeSet<&String> =
            loaded.records.iter().map(|r| &r.id).collect();
        assert_eq!(ids.len(), loaded.records.len(), "ids must be unique");
    }
}
