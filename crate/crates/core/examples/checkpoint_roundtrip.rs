//! Saves backbone and tokenizer weights, inspects the checkpoint header, loads
//! them back, and checks that outputs are bit-identical.
//!
//!     cargo run --release --example checkpoint_roundtrip

use mimforge::backbone::{BackboneConfig, BackboneWeights, Head};
use mimforge::data::generate_shapes_dataset;
use mimforge::store::{load_backbone, load_checkpoint, load_tokenizer, save_backbone, save_tokenizer};
use mimforge::tokenizer::{TokenizerConfig, TokenizerWeights};

fn main() -> mimforge::Result<()> {
    let dir = std::env::temp_dir().join("mimforge-ckpt-example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let images: Vec<_> = generate_shapes_dataset(8, 32, 8, 5).into_iter().map(|e| e.image).collect();

    let mut backbone = BackboneWeights::init(&BackboneConfig::default(), 11)?;
    backbone.attach_head(Head::Cls, 8);
    let path = dir.join("backbone.ckpt");
    save_backbone(&backbone, 11, 0, &path)?;
    let ckpt = load_checkpoint(&path)?;
    println!(
        "{}: kind {}, {} tensors, {} scalars, {} bytes on disk",
        path.display(),
        ckpt.kind.name(),
        ckpt.tensors.len(),
        ckpt.tensors.num_scalars(),
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0)
    );
    for (name, t) in ckpt.tensors.iter().take(5) {
        println!("  {name:24} {:?}", t.shape());
    }
    let back = load_backbone(&path)?;
    let same = backbone.classify(&images)?.data() == back.classify(&images)?.data();
    println!("backbone logits identical after reload: {same}");

    let tokenizer = TokenizerWeights::init(&TokenizerConfig::default(), 12)?;
    let path = dir.join("tokenizer.ckpt");
    save_tokenizer(&tokenizer, 12, 0, &path)?;
    let back = load_tokenizer(&path)?;
    let same = tokenizer.tokenize_batch(&images)? == back.tokenize_batch(&images)?;
    println!("tokenizer tokens identical after reload: {same}");

    match load_tokenizer(&dir.join("backbone.ckpt")) {
        Ok(_) => println!("unexpected: loaded a backbone as a tokenizer"),
        Err(e) => println!("loading the wrong kind fails: {e}"),
    }
    Ok(())
}
