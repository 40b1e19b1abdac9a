//! Trains the dVAE tokenizer on procedural shapes and reports reconstruction
//! error and codebook usage on held-out images.
//!
//!     cargo run --release --example train_tokenizer -- [steps]

use std::time::Instant;

use mimforge::data::{generate_shapes_dataset, Image};
use mimforge::tokenizer::{codebook_usage, mean_mse, train_tokenizer, TokenizerConfig, TokenizerTrainConfig};

fn main() -> mimforge::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let images = |n, seed| -> Vec<Image> {
        generate_shapes_dataset(n, 32, 8, seed).into_iter().map(|e| e.image).collect()
    };
    let train = images(4000, 1);
    let held_out = images(256, 2);

    let cfg = TokenizerConfig::default();
    let tcfg = TokenizerTrainConfig {
        steps,
        temperature: mimforge::tokenizer::TemperatureSchedule {
            anneal_steps: steps,
            ..Default::default()
        },
        ..Default::default()
    };
    let t0 = Instant::now();
    let (weights, trace) = train_tokenizer(&train, &cfg, &tcfg)?;
    for s in trace.iter().step_by((steps / 10).max(1)) {
        println!(
            "step {:5}  loss {:.5}  recon {:.5}  kl {:.3}  tau {:.3}",
            s.step, s.loss, s.recon_mse, s.kl, s.tau
        );
    }
    let grids = weights.tokenize_batch(&held_out)?;
    let recon = weights.decode_batch(&grids)?;
    let first = trace.first().map_or(f64::NAN, |s| s.recon_mse);
    let last: f64 = trace.iter().rev().take(50).map(|s| s.recon_mse).sum::<f64>() / 50.0;
    println!("trained {steps} steps in {:.1}s", t0.elapsed().as_secs_f64());
    println!("train recon mse: step 0 {first:.5}, last-50 mean {last:.5}");
    println!("held-out hard-token recon mse {:.5}", mean_mse(&recon, &held_out));
    println!(
        "codebook usage {}/{}",
        codebook_usage(&grids, cfg.vocab),
        cfg.vocab
    );
    Ok(())
}
