//! Parses a run configuration with dotted overrides, prints the resolved
//! document, and shows how invalid keys and values are reported.
//!
//!     cargo run --release --example run_config -- [key=value ...]

use mimforge::store::parse_config;

fn main() {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let doc = r#"{ "pretrain": { "steps": 500, "mask": { "ratio": 0.3 } } }"#;
    match parse_config(doc, &overrides) {
        Ok(cfg) => println!("{}", cfg.to_json()),
        Err(e) => println!("error: {e}"),
    }
    for bad in ["pretrain.mask.ratio=1.5", "backbone.heads=5", "pretrain.stepz=3", "finetune.task=\"detect\""] {
        match parse_config(doc, &[bad.to_string()]) {
            Ok(_) => println!("{bad}: accepted"),
            Err(e) => println!("{bad}: {e}"),
        }
    }
}
