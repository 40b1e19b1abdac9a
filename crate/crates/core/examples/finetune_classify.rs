//! Fine-tunes a pre-trained backbone and a randomly initialized one for shape
//! classification with identical hyperparameters and compares convergence.
//!
//!     cargo run --release --example finetune_classify -- [backbone.ckpt] [epochs]
//!
//! Without a checkpoint a short tokenizer + MIM pre-training run is done first.

use std::path::Path;

use mimforge::backbone::{BackboneConfig, BackboneWeights};
use mimforge::data::generate_shapes_dataset;
use mimforge::pipeline::{epochs_to_fraction, finetune, pretrain_mim, series, FinetuneConfig, PretrainConfig};
use mimforge::store::load_backbone;
use mimforge::tokenizer::{train_tokenizer, TokenizerConfig, TokenizerTrainConfig};

fn main() -> mimforge::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().filter(|a| a != "-");
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let train = generate_shapes_dataset(1000, 32, 8, 0);
    let eval = generate_shapes_dataset(500, 32, 8, 1);

    let pretrained = match ckpt {
        Some(p) => load_backbone(Path::new(&p))?,
        None => {
            let images: Vec<_> = train.iter().map(|e| e.image.clone()).collect();
            let tcfg = TokenizerTrainConfig {
                steps: 500,
                ..Default::default()
            };
            let (tok, _) = train_tokenizer(&images, &TokenizerConfig::default(), &tcfg)?;
            let pcfg = PretrainConfig {
                steps: 500,
                warmup_steps: 50,
                ..Default::default()
            };
            println!("no checkpoint given; pre-training 500 steps");
            pretrain_mim(&images, &tok, &BackboneConfig::default(), &pcfg)?.weights
        }
    };
    let scratch = BackboneWeights::init(&pretrained.config, 0)?;

    let cfg = FinetuneConfig {
        epochs,
        ..Default::default()
    };
    let mut curves = Vec::new();
    for (name, init) in [("pre-trained", &pretrained), ("scratch", &scratch)] {
        let out = finetune(init, &train, &eval, 8, &cfg)?;
        let curve = series(&out.metrics, "eval", "accuracy");
        let text: Vec<String> = curve.iter().map(|(_, a)| format!("{a:.3}")).collect();
        println!("{name:>11}: {}", text.join(" "));
        curves.push((name, curve));
    }
    for (name, curve) in &curves {
        println!(
            "{name:>11}: final {:.4}, epochs to 90% of final {:?}",
            curve.last().map_or(f64::NAN, |p| p.1),
            epochs_to_fraction(curve, 0.9)
        );
    }
    Ok(())
}
