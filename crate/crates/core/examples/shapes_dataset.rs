//! Generates the procedural shapes dataset, writes it in the binary layout,
//! reads it back, and dumps a few images and masks as PGM files.
//!
//!     cargo run --release --example shapes_dataset -- [out_dir]

use std::path::PathBuf;

use mimforge::cli::render::{encode_pgm, write_image_pgm};
use mimforge::data::{
    generate_shapes_dataset, read_binary_dataset, read_seg_maps, write_binary_dataset, write_seg_maps, BinaryLayout,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/shapes".into()));
    std::fs::create_dir_all(&out)?;
    let data = generate_shapes_dataset(256, 32, 8, 7);

    let mut counts = [0usize; 8];
    for ex in &data {
        counts[ex.label] += 1;
    }
    println!("class histogram {counts:?}");

    let layout = BinaryLayout {
        height: 32,
        width: 32,
        channels: 3,
        num_classes: 8,
    };
    let images: Vec<_> = data.iter().map(|e| e.labeled()).collect();
    let segs: Vec<_> = data.iter().map(|e| e.seg.clone()).collect();
    write_binary_dataset(&out.join("train.bin"), &images)?;
    write_seg_maps(&out.join("train.seg"), &data)?;
    let back = read_binary_dataset(&out.join("train.bin"), &layout)?;
    let back_seg = read_seg_maps(&out.join("train.seg"), 32, 32, 9)?;
    let labels_ok = back.iter().zip(&images).all(|(a, b)| a.label == b.label) && back_seg == segs;
    let max_err = back
        .iter()
        .zip(&images)
        .flat_map(|(a, b)| a.image.data.iter().zip(&b.image.data).map(|(x, y)| (x - y).abs()))
        .fold(0.0f32, f32::max);
    println!("binary round trip: labels and masks exact {labels_ok}, max pixel error {max_err:.5} (8-bit)");

    for (i, ex) in data.iter().take(4).enumerate() {
        write_image_pgm(&ex.image, &out.join(format!("image_{i}.pgm")))?;
        let mask: Vec<u8> = ex.seg.iter().map(|&c| c.saturating_mul(30)).collect();
        std::fs::write(out.join(format!("seg_{i}.pgm")), encode_pgm(32, 32, &mask))?;
        println!("image {i}: class {}", ex.label);
    }
    println!("wrote {}", out.display());
    Ok(())
}
