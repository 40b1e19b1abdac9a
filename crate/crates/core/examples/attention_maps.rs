//! Renders self-attention maps of one image as graymaps: for each head and
//! each chosen reference patch, where that patch attends over the grid.
//!
//!     cargo run --release --example attention_maps -- [backbone.ckpt] [out_dir]

use std::path::{Path, PathBuf};

use mimforge::backbone::{BackboneConfig, BackboneWeights};
use mimforge::cli::render::write_image_pgm;
use mimforge::cli::{render_attention, Reference};
use mimforge::data::generate_shapes_dataset;
use mimforge::store::load_backbone;

fn main() -> mimforge::Result<()> {
    let mut args = std::env::args().skip(1);
    let weights = match args.next().filter(|a| a != "-") {
        Some(p) => load_backbone(Path::new(&p))?,
        None => BackboneWeights::init(&BackboneConfig::default(), 0)?,
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/attention".into()));
    let image = generate_shapes_dataset(1, 32, 8, 3).remove(0).image;

    let layer = weights.config.layers;
    let maps = weights.attention_maps(&image, layer)?;
    let worst = (0..maps.rows())
        .map(|r| (maps.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("layer {layer}: attention {:?}, max |row sum - 1| = {worst:.2e}", maps.shape());

    let g = weights.config.grid();
    let centre = (g / 2) * g + g / 2;
    let paths = render_attention(&weights, &image, &Reference::Patches(vec![0, centre]), layer, &out)?;
    write_image_pgm(&image, &out.join("input.pgm"))?;
    println!("wrote {} maps and input.pgm to {}", paths.len(), out.display());
    Ok(())
}
