//! Runs the five pre-training variants (full, no blockwise masking, no visual
//! tokens, neither, all positions) at a small shared budget, fine-tunes each
//! for classification and segmentation, and prints the comparison table.
//!
//!     cargo run --release --example ablation_suite -- [pretrain_steps] [finetune_epochs]

use mimforge::backbone::BackboneConfig;
use mimforge::data::generate_shapes_dataset;
use mimforge::pipeline::{format_ablation_table, run_ablation_suite, AblationConfig};
use mimforge::tokenizer::{train_tokenizer, TokenizerConfig, TokenizerTrainConfig};

fn main() -> mimforge::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let train = generate_shapes_dataset(500, 32, 8, 0);
    let eval = generate_shapes_dataset(200, 32, 8, 1);
    let images: Vec<_> = train.iter().map(|e| e.image.clone()).collect();

    let tcfg = TokenizerTrainConfig {
        steps: 400,
        ..Default::default()
    };
    let (tokenizer, _) = train_tokenizer(&images, &TokenizerConfig::default(), &tcfg)?;

    let mut cfg = AblationConfig::default();
    cfg.pretrain.steps = steps;
    cfg.pretrain.warmup_steps = steps / 10;
    cfg.classify.epochs = epochs;
    cfg.segment.epochs = epochs;
    let (rows, _) = run_ablation_suite(&images, &train, &eval, 8, &tokenizer, &BackboneConfig::default(), &cfg)?;
    print!("{}", format_ablation_table(&rows));
    Ok(())
}
