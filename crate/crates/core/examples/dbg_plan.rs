use accentkd::distill::DistillConfig;
use accentkd::pipeline::*;
use std::time::Instant;

fn main() {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let out_path = std::env::args().nth(2).map(std::path::PathBuf::from);
    let tmp;
    let out = match &out_path {
        Some(p) => { std::fs::create_dir_all(p).unwrap(); p.clone() }
        None => { tmp = tempfile::tempdir().unwrap(); tmp.path().to_path_buf() }
    };
    let cfg = RunConfig { seed, ..RunConfig::default() };
    let t0 = Instant::now();
    let (data, _) = prepare_dataset(&cfg, &out).unwrap();
    let plan = preset_plan(&data.accents, "us", "ind", &cfg.distill);
    let report = run_plan(&plan, &cfg, &data, &out).unwrap();
    println!("seed {seed}: full plan in {:.0}s", t0.elapsed().as_secs_f64());
    for row in &report.cer_table {
        print!("  {:16}", row.model_id);
        for (a, c) in &row.per_accent { print!(" {a} {c:6.2}"); }
        println!("  ave {:6.2}", row.average);
    }
    for row in &report.cso_table {
        println!("  CSO {} vs {:16} {} {:?}: {:.1}%", row.model_a, row.model_b, row.accent, row.split, row.mean_pct);
    }
    for row in &report.adaptation {
        println!("  adapt {} ({}df): base {} {:.2} -> {} {:.2}", row.accent, row.reference_targets, row.base_model, row.base_cer, row.adapted_model, row.adapted_cer);
    }
    if let Some(g) = &report.generation_gain {
        println!("  gain: {} {:.2} -> {} {:.2} = {:.1}% rel", g.baseline, g.baseline_avg_cer, g.improved, g.improved_avg_cer, g.measured_rel_gain_pct);
    }
}
