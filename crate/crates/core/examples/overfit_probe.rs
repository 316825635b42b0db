use lmdepth_core::config::ModelConfig;
use lmdepth_core::dataset::{generate_synthetic, ingest_dataset};
use lmdepth_core::model::LmDepth;
use lmdepth_core::train::{evaluate_model, mean_reg_loss, train, TrainOptions};
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2e-4);
    let cfg = ModelConfig::lmdepth();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(dir.path(), 8, &cfg, 42).unwrap();
    let samples = ingest_dataset(&manifest, &cfg).unwrap();
    let mut model = LmDepth::new(&cfg, 42).unwrap();
    println!("params: {}", model.param_count());
    let t0 = Instant::now();
    let before = mean_reg_loss(&model, &samples).unwrap();
    println!("initial reg: {before:.4} (eval took {:?})", t0.elapsed());

    let opt = TrainOptions { steps, lr, batch_size: 4, seed: 42, ..TrainOptions::default() };
    let t1 = Instant::now();
    let report = train(&mut model, &samples, &opt).unwrap();
    let dt = t1.elapsed();
    println!("train {} steps in {:?} ({:?}/step)", steps, dt, dt / steps as u32);
    for row in report.rows.iter().step_by((steps / 12).max(1)) {
        println!("  {}", row.to_line());
    }
    if let Some(last) = report.rows.last() {
        println!("  {}", last.to_line());
    }
    let after = mean_reg_loss(&model, &samples).unwrap();
    let (_, agg) = evaluate_model(&model, &samples, None).unwrap();
    println!("final reg: {after:.4} ratio {:.3}", after / before);
    println!("metrics: {}", agg.to_kv());
}
