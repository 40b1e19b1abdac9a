//! Writes per-epoch metrics for two fine-tuning runs, then aligns them into a
//! convergence table with epochs-to-fraction-of-final summaries.
//!
//!     cargo run --release --example convergence_report -- [epochs]

use mimforge::backbone::{BackboneConfig, BackboneWeights};
use mimforge::cli::convergence_report;
use mimforge::data::generate_shapes_dataset;
use mimforge::pipeline::{finetune, write_metrics_csv, FinetuneConfig};

fn main() -> mimforge::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let train = generate_shapes_dataset(400, 32, 8, 0);
    let eval = generate_shapes_dataset(200, 32, 8, 1);
    let root = std::env::temp_dir().join("mimforge-convergence");

    let mut paths = Vec::new();
    for (label, lr) in [("lr_1e-3", 1e-3), ("lr_3e-4", 3e-4)] {
        let init = BackboneWeights::init(&BackboneConfig::default(), 0)?;
        let cfg = FinetuneConfig {
            epochs,
            peak_lr: lr,
            ..Default::default()
        };
        let out = finetune(&init, &train, &eval, 8, &cfg)?;
        let dir = root.join(label);
        std::fs::create_dir_all(&dir).expect("run dir");
        let path = dir.join("metrics.csv");
        write_metrics_csv(&path, &out.metrics)?;
        paths.push(path);
    }
    let report = convergence_report(&paths, "eval", "accuracy", &[0.5, 0.9])?;
    print!("{}", report.to_csv());
    Ok(())
}
