use accentkd::corpus::*;
use accentkd::frontend::FrontendConfig;
use accentkd::model::{init_params, ArchSpec};
use accentkd::numcore::SeededRng;
use accentkd::pipeline::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let fj: f64 = args[1].parse().unwrap();
    let cj: f64 = args[2].parse().unwrap();
    let ss: f64 = args[3].parse().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig { jitter_sigma: fj, char_jitter_sigma: cj, speaker_sigma: ss, ..CorpusConfig::default() };
    let manifest = gen_corpus(&cfg, dir.path()).unwrap();
    let report = oracle_separability_check(&manifest, dir.path()).unwrap();
    print!("fj={fj} cj={cj} ss={ss} | oracle matched:");
    for (a, c) in &report.matched { print!(" {a} {c:.1}"); }
    println!();
    let data = Dataset::load(dir.path(), &FrontendConfig::default()).unwrap();
    let arch = ArchSpec::desk(data.input_dim, data.alphabet.len());
    let all = data.accents.clone();
    let train_idx = data.select(Split::Train, &all);
    let dev_idx = data.select(Split::Dev, &all);
    let test_idx = data.select(Split::Test, &all);
    let tcfg = TrainConfig { max_epochs: 30, patience: 4, seed: 7, ..TrainConfig::default() };
    let init = init_params(&arch, &mut SeededRng::new(5)).unwrap();
    let t0 = Instant::now();
    let out = train(init, &data, &train_idx, &dev_idx, &tcfg, None).unwrap();
    let train_cer = {
        let eval = evaluate(&out.params, &data, &train_idx, &accentkd::decode::DecodeConfig::default()).unwrap();
        eval.overall
    };
    let eval = evaluate(&out.params, &data, &test_idx, &accentkd::decode::DecodeConfig::default()).unwrap();
    println!("  MA_NT: {} epochs {:.0}s | train CER {:.2} | test {:?} ave {:.2}",
        out.history.epochs.len(), t0.elapsed().as_secs_f64(), train_cer, eval.per_accent, eval.average);
}
