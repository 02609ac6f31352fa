use accentkd::corpus::*;
use accentkd::frontend::FrontendConfig;
use accentkd::model::{init_params, ArchSpec};
use accentkd::numcore::SeededRng;
use accentkd::pipeline::*;
use std::time::Instant;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig::default();
    gen_corpus(&cfg, dir.path()).unwrap();
    let t0 = Instant::now();
    let data = Dataset::load(dir.path(), &FrontendConfig::default()).unwrap();
    println!("dataset loaded in {:?}; {} utts, input_dim {}", t0.elapsed(), data.utterances.len(), data.input_dim);
    let frames: Vec<usize> = data.utterances.iter().map(|u| u.feats.n_frames()).collect();
    println!("decimated frames: min {} max {} mean {:.1}", frames.iter().min().unwrap(), frames.iter().max().unwrap(), frames.iter().sum::<usize>() as f64 / frames.len() as f64);

    let arch = ArchSpec::desk(data.input_dim, data.alphabet.len());
    println!("param count: {}", arch.param_count());
    let all: Vec<String> = data.accents.clone();
    let train_idx = data.select(Split::Train, &all);
    let dev_idx = data.select(Split::Dev, &all);
    let test_idx = data.select(Split::Test, &all);
    println!("train {} dev {} test {}", train_idx.len(), dev_idx.len(), test_idx.len());

    let tcfg = TrainConfig { max_epochs: 30, patience: 4, seed: 7, ..TrainConfig::default() };
    let init = init_params(&arch, &mut SeededRng::new(5)).unwrap();
    let t0 = Instant::now();
    let out = train(init, &data, &train_idx, &dev_idx, &tcfg, None).unwrap();
    println!("trained {} epochs in {:?} (best epoch {}, best dev CER {:.2})", out.history.epochs.len(), t0.elapsed(), out.history.best_epoch, out.history.best_dev_cer);
    for e in &out.history.epochs {
        println!("  epoch {:2}: loss {:7.3} dev CER {:6.2}{}", e.epoch, e.mean_train_loss, e.dev_cer, if e.improved { " *" } else { "" });
    }
    let eval = evaluate(&out.params, &data, &test_idx, &accentkd::decode::DecodeConfig::default()).unwrap();
    println!("test: {:?} ave {:.2} overall {:.2}", eval.per_accent, eval.average, eval.overall);
}
