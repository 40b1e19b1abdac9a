//! Draws blockwise and random masks on the 8x8 patch grid, prints them as
//! ASCII, and summarizes masked-fraction statistics over many draws.
//!
//!     cargo run --release --example blockwise_masking -- [ratio] [min_block]

use mimforge::masking::{blockwise_mask_blocks, draw_mask, BlockMaskConfig, MaskSet, MaskStrategy};
use mimforge::rng::substream;

fn show(m: &MaskSet) {
    for i in 0..m.h {
        let row: String = (0..m.w).map(|j| if m.contains(i * m.w + j) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

fn main() {
    let mut args = std::env::args().skip(1);
    let ratio = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.4);
    let min_block = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let cfg = BlockMaskConfig {
        ratio,
        min_block,
        ..Default::default()
    };
    let (h, w) = (8, 8);

    let mut rng = substream(3, "example-mask", 0);
    let (mask, blocks) = blockwise_mask_blocks(h, w, &cfg, &mut rng);
    println!("blockwise, {} blocks, |M| = {}", blocks.len(), mask.len());
    for b in &blocks {
        println!(
            "  s={:2} r={:.2} -> {}x{} at ({}, {})",
            b.s, b.r, b.rows, b.cols, b.top, b.left
        );
    }
    show(&mask);

    let random = BlockMaskConfig {
        strategy: MaskStrategy::Random,
        ..cfg.clone()
    };
    let m = draw_mask(h, w, &random, &mut rng);
    println!("random, |M| = {}", m.len());
    show(&m);

    let draws = 10_000;
    let mut sizes: Vec<usize> = (0..draws)
        .map(|i| draw_mask(h, w, &cfg, &mut substream(3, "example-stats", i)).len())
        .collect();
    sizes.sort_unstable();
    let mean = sizes.iter().sum::<usize>() as f64 / draws as f64;
    println!(
        "{draws} blockwise draws: mean fraction {:.4} (target {:.4}), min {}, median {}, max {}",
        mean / (h * w) as f64,
        cfg.target(h * w) as f64 / (h * w) as f64,
        sizes[0],
        sizes[sizes.len() / 2],
        sizes[sizes.len() - 1]
    );
}
