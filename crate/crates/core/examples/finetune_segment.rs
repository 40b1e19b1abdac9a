//! Fine-tunes a backbone for per-pixel shape segmentation and reports mIoU,
//! pixel accuracy, and per-class IoU.
//!
//!     cargo run --release --example finetune_segment -- [backbone.ckpt] [epochs]

use std::path::Path;

use mimforge::backbone::{BackboneConfig, BackboneWeights};
use mimforge::data::generate_shapes_dataset;
use mimforge::pipeline::{evaluate, finetune, series, EvalResult, FinetuneConfig, Task};
use mimforge::store::load_backbone;

fn main() -> mimforge::Result<()> {
    let mut args = std::env::args().skip(1);
    let init = match args.next().filter(|a| a != "-") {
        Some(p) => load_backbone(Path::new(&p))?,
        None => BackboneWeights::init(&BackboneConfig::default(), 0)?,
    };
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let train = generate_shapes_dataset(1000, 32, 8, 0);
    let eval = generate_shapes_dataset(200, 32, 8, 1);

    let cfg = FinetuneConfig {
        task: Task::Segment,
        epochs,
        label_smoothing: 0.0,
        ..Default::default()
    };
    let out = finetune(&init, &train, &eval, 9, &cfg)?;
    for ((e, loss), (_, miou)) in series(&out.metrics, "train", "loss")
        .iter()
        .zip(&series(&out.metrics, "eval", "miou"))
    {
        println!("epoch {e:2}  train loss {loss:.4}  eval mIoU {miou:.4}");
    }
    if let EvalResult::Segment { pixel_accuracy, iou } = evaluate(&out.weights, &eval, Task::Segment)? {
        println!("pixel accuracy {pixel_accuracy:.4}, mIoU {:.4}", iou.miou);
        for (c, v) in iou.per_class.iter().enumerate() {
            let label = if c == 0 { "background".to_string() } else { format!("shape {}", c - 1) };
            match v {
                Some(v) => println!("  {label:>10}: {v:.4}"),
                None => println!("  {label:>10}: absent"),
            }
        }
    }
    Ok(())
}
