//! End-to-end training behaviour on small generated corpora: loss-endpoint
//! identities, learnability of the noiseless task, soft-target generation,
//! and decoder agreement on trained (spiky) outputs.

use accentkd::corpus::{gen_corpus, CorpusConfig, Split};
use accentkd::decode::{best_path_decode, beam_search_decode, DecodeConfig};
use accentkd::distill::DistillConfig;
use accentkd::frontend::FrontendConfig;
use accentkd::model::{forward, init_params, ArchSpec, Layer};
use accentkd::numcore::SeededRng;
use accentkd::pipeline::{
    evaluate, gen_soft_targets, train, Dataset, LossKind, TrainConfig,
};

fn toy_corpus(seed: u64, noiseless: bool, n_letters: usize) -> (tempfile::TempDir, Dataset) {
    toy_corpus_accented(seed, noiseless, n_letters, 3)
}

fn toy_corpus_accented(
    seed: u64,
    noiseless: bool,
    n_letters: usize,
    n_accents: usize,
) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let mut accents = accentkd::corpus::default_accents();
    accents.truncate(n_accents);
    let cfg = CorpusConfig {
        accents,
        speakers_per_accent: 4,
        utts_per_speaker: if n_accents == 1 { 18 } else { 6 },
        seed,
        n_letters,
        jitter_sigma: if noiseless { 0.0 } else { 0.3 },
        char_jitter_sigma: if noiseless { 0.0 } else { 1.6 },
        speaker_sigma: if noiseless { 0.0 } else { 0.5 },
        ..CorpusConfig::default()
    };
    gen_corpus(&cfg, dir.path()).unwrap();
    let data = Dataset::load(dir.path(), &FrontendConfig::default()).unwrap();
    (dir, data)
}

fn small_arch(data: &Dataset) -> ArchSpec {
    ArchSpec {
        input_dim: data.input_dim,
        ff_pre: vec![32],
        blstm: vec![24],
        ff_post: vec![32],
        out_dim: data.alphabet.len(),
    }
}

#[test]
fn noiseless_two_letter_task_reaches_zero_train_cer() {
    let (_dir, data) = toy_corpus_accented(5, true, 2, 1);
    let arch = small_arch(&data);
    let all = data.accents.clone();
    let train_idx = data.select(Split::Train, &all);
    let dev_idx = data.select(Split::Dev, &all);
    let cfg = TrainConfig {
        max_epochs: 40,
        patience: 10,
        seed: 9,
        ..TrainConfig::default()
    };
    let init = init_params(&arch, &mut SeededRng::new(3)).unwrap();
    let out = train(init, &data, &train_idx, &dev_idx, &cfg, None).unwrap();
    let eval = evaluate(
        &out.params,
        &data,
        &train_idx,
        &DecodeConfig::default(),
    )
    .unwrap();
    assert_eq!(eval.overall, 0.0, "train CER should reach zero: {eval:?}");
}

#[test]
fn lambda_zero_distill_trajectory_is_bit_identical_to_ctc() {
    let (_dir, data) = toy_corpus(7, false, 4);
    let arch = small_arch(&data);
    let all = data.accents.clone();
    let train_idx = data.select(Split::Train, &all);
    let dev_idx = data.select(Split::Dev, &all);

    let init = init_params(&arch, &mut SeededRng::new(11)).unwrap();
    let teacher = init_params(&arch, &mut SeededRng::new(12)).unwrap();
    let targets = gen_soft_targets(&teacher, "teacher", &data, &train_idx, 4.0).unwrap();

    let base = TrainConfig {
        max_epochs: 3,
        patience: 3,
        seed: 21,
        ..TrainConfig::default()
    };
    let ctc_cfg = TrainConfig {
        loss: LossKind::Ctc,
        ..base.clone()
    };
    let distill_cfg = TrainConfig {
        loss: LossKind::Distill,
        distill: Some(DistillConfig::new(0.0, 4.0).unwrap()),
        ..base
    };

    let a = train(init.clone(), &data, &train_idx, &dev_idx, &ctc_cfg, None).unwrap();
    let b = train(init, &data, &train_idx, &dev_idx, &distill_cfg, Some(&targets)).unwrap();

    assert_eq!(a.params.to_flat(), b.params.to_flat(), "parameter trajectories diverged");
    assert_eq!(a.history.epochs.len(), b.history.epochs.len());
    for (ea, eb) in a.history.epochs.iter().zip(&b.history.epochs) {
        assert_eq!(
            ea.mean_train_loss.to_bits(),
            eb.mean_train_loss.to_bits(),
            "epoch {} loss differs",
            ea.epoch
        );
        assert_eq!(ea.dev_cer.to_bits(), eb.dev_cer.to_bits());
    }
}

#[test]
fn soft_targets_at_t1_equal_softmax_and_regenerate_identically() {
    let (_dir, data) = toy_corpus(13, false, 8);
    let arch = small_arch(&data);
    let teacher = init_params(&arch, &mut SeededRng::new(14)).unwrap();
    let idx = data.select(Split::Train, &data.accents.clone());

    let store = gen_soft_targets(&teacher, "t", &data, &idx[..4], 1.0).unwrap();
    for &i in &idx[..4] {
        let utt = &data.utterances[i];
        let (logits, _) = forward(&teacher, &utt.feats).unwrap();
        let sm = accentkd::numcore::softmax_rows(&logits).unwrap();
        let targets = store.get(&utt.id).unwrap();
        assert_eq!(&targets.probs, &sm, "T=1 targets must equal the softmax");
        for r in 0..targets.probs.rows() {
            let sum: f64 = targets.probs.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    // Regeneration writes byte-identical files.
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    store.save(d1.path()).unwrap();
    gen_soft_targets(&teacher, "t", &data, &idx[..4], 1.0)
        .unwrap()
        .save(d2.path())
        .unwrap();
    let mut names: Vec<String> = std::fs::read_dir(d1.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(names.len() >= 5); // 4 targets + metadata
    for name in names {
        let a = std::fs::read(d1.path().join(&name)).unwrap();
        let b = std::fs::read(d2.path().join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between regenerations");
    }
}

#[test]
fn all_blank_model_scores_cer_100() {
    let (_dir, data) = toy_corpus(17, false, 8);
    let arch = small_arch(&data);
    let mut params = init_params(&arch, &mut SeededRng::new(15)).unwrap();
    params.for_each_param_mut(|v| *v = 0.0);
    // Push the output bias hard toward blank. The bias is the last out_dim
    // parameters in canonical order.
    let total = params.param_count();
    let blank = data.alphabet.blank();
    let out_dim = data.alphabet.len();
    let mut i = 0;
    params.for_each_param_mut(|v| {
        if i == total - out_dim + blank {
            *v = 50.0;
        }
        i += 1;
    });
    let idx = data.select(Split::Test, &data.accents.clone());
    let eval = evaluate(&params, &data, &idx, &DecodeConfig::default()).unwrap();
    assert_eq!(eval.overall, 100.0, "{eval:?}");
}

#[test]
fn beam_width_one_matches_best_path_on_trained_model() {
    // Trained models emit spiky posteriors, where greedy and width-1 beam
    // coincide.
    let (_dir, data) = toy_corpus(19, true, 3);
    let arch = small_arch(&data);
    let all = data.accents.clone();
    let train_idx = data.select(Split::Train, &all);
    let dev_idx = data.select(Split::Dev, &all);
    let cfg = TrainConfig {
        max_epochs: 15,
        patience: 5,
        seed: 23,
        ..TrainConfig::default()
    };
    let init = init_params(&arch, &mut SeededRng::new(29)).unwrap();
    let out = train(init, &data, &train_idx, &dev_idx, &cfg, None).unwrap();

    let test_idx = data.select(Split::Test, &all);
    let beam1 = DecodeConfig::new(1).unwrap();
    for &i in &test_idx {
        let utt = &data.utterances[i];
        let (logits, _) = forward(&out.params, &utt.feats).unwrap();
        let post = accentkd::ctc::PosteriorMatrix::from_logits(&logits).unwrap();
        let greedy = best_path_decode(&post, &data.alphabet);
        let beam = beam_search_decode(&post, &data.alphabet, &beam1);
        assert_eq!(
            greedy.indices(),
            beam.indices(),
            "utterance {} disagrees",
            utt.id
        );
    }
}

#[test]
fn training_is_deterministic_for_fixed_seed() {
    let (_dir, data) = toy_corpus(23, false, 6);
    let arch = small_arch(&data);
    let all = data.accents.clone();
    let train_idx = data.select(Split::Train, &all);
    let dev_idx = data.select(Split::Dev, &all);
    let cfg = TrainConfig {
        max_epochs: 2,
        patience: 2,
        seed: 31,
        ..TrainConfig::default()
    };
    let init = init_params(&arch, &mut SeededRng::new(37)).unwrap();
    let a = train(init.clone(), &data, &train_idx, &dev_idx, &cfg, None).unwrap();
    let b = train(init, &data, &train_idx, &dev_idx, &cfg, None).unwrap();
    assert_eq!(a.params.to_flat(), b.params.to_flat());
}

#[test]
fn distill_without_target_coverage_is_a_data_error() {
    let (_dir, data) = toy_corpus(29, false, 6);
    let arch = small_arch(&data);
    let all = data.accents.clone();
    let train_idx = data.select(Split::Train, &all);
    let dev_idx = data.select(Split::Dev, &all);
    let teacher = init_params(&arch, &mut SeededRng::new(41)).unwrap();
    // Cover only half of the training utterances.
    let half = &train_idx[..train_idx.len() / 2];
    let targets = gen_soft_targets(&teacher, "partial", &data, half, 4.0).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        loss: LossKind::Distill,
        distill: Some(DistillConfig::default()),
        seed: 43,
        ..TrainConfig::default()
    };
    let init = init_params(&arch, &mut SeededRng::new(47)).unwrap();
    let err = train(init, &data, &train_idx, &dev_idx, &cfg, Some(&targets)).unwrap_err();
    assert_eq!(err.class(), accentkd::ErrorClass::Data, "{err}");
}
