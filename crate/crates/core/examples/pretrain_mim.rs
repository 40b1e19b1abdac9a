//! Trains a tokenizer, then pre-trains the backbone with masked image
//! modeling and reports held-out masked-token accuracy.
//!
//!     cargo run --release --example pretrain_mim -- [mim_steps] [tokenizer_steps] [batch]

use std::time::Instant;

use mimforge::backbone::BackboneConfig;
use mimforge::data::{generate_shapes_dataset, Image};
use mimforge::masking::BlockMaskConfig;
use mimforge::pipeline::{evaluate_mim, pretrain_mim, series, PretrainConfig};
use mimforge::tokenizer::{train_tokenizer, TemperatureSchedule, TokenizerConfig, TokenizerTrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> mimforge::Result<()> {
    let (steps, tok_steps, batch) = (arg(1, 3000), arg(2, 2000), arg(3, 32));
    let images = |n, seed| -> Vec<Image> {
        generate_shapes_dataset(n, 32, 8, seed).into_iter().map(|e| e.image).collect()
    };
    let train = images(4000, 1);
    let held_out = images(256, 2);

    let t0 = Instant::now();
    let tcfg = TokenizerTrainConfig {
        steps: tok_steps,
        temperature: TemperatureSchedule {
            anneal_steps: tok_steps,
            ..Default::default()
        },
        ..Default::default()
    };
    let (tokenizer, _) = train_tokenizer(&train, &TokenizerConfig::default(), &tcfg)?;
    println!("tokenizer: {tok_steps} steps in {:.1}s", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let cfg = PretrainConfig {
        steps,
        batch,
        log_every: 50,
        ..Default::default()
    };
    let out = pretrain_mim(&train, &tokenizer, &BackboneConfig::default(), &cfg)?;
    let secs = t1.elapsed().as_secs_f64();
    let loss = series(&out.metrics, "train", "loss");
    let acc = series(&out.metrics, "train", "accuracy");
    for ((s, l), (_, a)) in loss.iter().zip(&acc).step_by(((steps / 50) / 10).max(1)) {
        println!("step {s:5}  loss {l:.4}  masked acc {a:.4}");
    }
    println!("pre-trained {steps} steps in {secs:.1}s ({:.3}s/step)", secs / steps.max(1) as f64);
    let eval = evaluate_mim(&out.weights, &tokenizer, &held_out, &BlockMaskConfig::default(), 99)?;
    println!(
        "held-out masked-token loss {:.4}, top-1 {:.4} (chance {:.4})",
        eval.loss,
        eval.accuracy,
        1.0 / 128.0
    );
    Ok(())
}
