use accentkd::decode::DecodeConfig;
use accentkd::distill::DistillConfig;
use accentkd::frontend::FrontendConfig;
use accentkd::model::load_checkpoint;
use accentkd::pipeline::*;
use accentkd::corpus::Split;

fn main() {
    let run_dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap());
    let data = Dataset::load(&run_dir.join("corpus"), &FrontendConfig::default()).unwrap();
    let (ma_mt1, _) = load_checkpoint(&run_dir.join("models/ma_mt1.acdm")).unwrap();
    let (acc_ind, _) = load_checkpoint(&run_dir.join("models/acc_sp1_ind.acdm")).unwrap();
    let ind = vec!["ind".to_string()];
    let train_idx = data.select(Split::Train, &ind);
    let dev_idx = data.select(Split::Dev, &ind);
    let test_idx = data.select(Split::Test, &ind);
    let beam = DecodeConfig::default();
    let base = evaluate(&ma_mt1, &data, &test_idx, &beam).unwrap().overall;
    println!("unadapted ma_mt1 on ind test: {base:.2}");
    for lambda in [0.3, 0.5, 0.7, 0.9] {
        for (tag, anchor) in [("self", &ma_mt1), ("accent", &acc_ind)] {
            let targets = gen_soft_targets(anchor, tag, &data, &train_idx, 4.0).unwrap();
            let cfg = TrainConfig {
                loss: LossKind::KlAdapt,
                distill: Some(DistillConfig::new(lambda, 4.0).unwrap()),
                max_epochs: 30, patience: 4, seed: 77,
                ..TrainConfig::default()
            };
            let out = train(ma_mt1.clone(), &data, &train_idx, &dev_idx, &cfg, Some(&targets)).unwrap();
            let cer = evaluate(&out.params, &data, &test_idx, &beam).unwrap().overall;
            println!("lambda {lambda} anchor {tag:6}: ind test {cer:.2} ({} epochs)", out.history.epochs.len());
        }
    }
}
