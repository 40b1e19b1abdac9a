//! Evaluates the two-stage variational bound on held-out images: the
//! tokenizer's Gaussian reconstruction term plus the backbone's masked-token
//! log-likelihood. Compares freshly initialized and trained backbones.
//!
//!     cargo run --release --example elbo_bound -- [tokenizer.ckpt backbone.ckpt]

use std::path::Path;

use mimforge::backbone::{BackboneConfig, BackboneWeights, Head};
use mimforge::data::{generate_shapes_dataset, Image};
use mimforge::masking::BlockMaskConfig;
use mimforge::pipeline::{evaluate_elbo, pretrain_mim, ElboReport, PretrainConfig};
use mimforge::store::{load_backbone, load_tokenizer};
use mimforge::tokenizer::{train_tokenizer, TokenizerConfig, TokenizerTrainConfig};

fn show(name: &str, r: &ElboReport) {
    println!(
        "{name:>8}: stage1 {:10.2}  stage2 {:8.2}  total {:10.2}  ({:.1} masked/image, {:.4} nats/token)",
        r.stage1_term,
        r.stage2_term,
        r.total(),
        r.mean_masked,
        r.loss_per_token
    );
}

fn main() -> mimforge::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let images = |n, seed| -> Vec<Image> {
        generate_shapes_dataset(n, 32, 8, seed).into_iter().map(|e| e.image).collect()
    };
    let held_out = images(64, 1);
    let (tokenizer, trained) = if let [t, b] = args.as_slice() {
        (load_tokenizer(Path::new(t))?, load_backbone(Path::new(b))?)
    } else {
        let train = images(1000, 0);
        let tcfg = TokenizerTrainConfig {
            steps: 500,
            ..Default::default()
        };
        let (tok, _) = train_tokenizer(&train, &TokenizerConfig::default(), &tcfg)?;
        let pcfg = PretrainConfig {
            steps: 300,
            warmup_steps: 30,
            ..Default::default()
        };
        let w = pretrain_mim(&train, &tok, &BackboneConfig::default(), &pcfg)?.weights;
        (tok, w)
    };

    let mut initial = BackboneWeights::init(&trained.config, 0)?;
    initial.attach_head(Head::Mim, tokenizer.config.vocab);
    let mask = BlockMaskConfig::default();
    let before = evaluate_elbo(&held_out, &tokenizer, &initial, &mask, 7)?;
    let after = evaluate_elbo(&held_out, &tokenizer, &trained, &mask, 7)?;
    show("initial", &before);
    show("trained", &after);
    println!(
        "uniform prediction would give {:.2} nats/token",
        (tokenizer.config.vocab as f64).ln()
    );
    Ok(())
}
