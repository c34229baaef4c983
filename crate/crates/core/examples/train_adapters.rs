//! Trains the adapters on top of a pretrained base through the three
//! curriculum stages, with optional ablation switches.
//!
//! `cargo run --release --example train_adapters -- BASE_CKPT OUT_DIR [no-diptych|no-bias|no-dynamic]...`

use std::path::PathBuf;

use routed_dit::data::{generate_corpus, Extents};
use routed_dit::model::load_checkpoint;
use routed_dit::trainer::{train, TrainConfig};

fn main() -> routed_dit::Result<()> {
    let mut args = std::env::args().skip(1);
    let base = PathBuf::from(args.next().unwrap_or_else(|| "runs/base/base.ckpt".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/full".into()));
    let mut config = TrainConfig::default();
    for switch in args {
        match switch.as_str() {
            "no-diptych" => config.diptych = false,
            "no-bias" => {
                config.static_routing = false;
                config.dual_lora = false;
            }
            "no-dynamic" => config.dynamic_routing = false,
            other => panic!("unknown switch {other}"),
        }
    }

    let corpus = generate_corpus(512, 4, 0, Extents::default());
    let model = load_checkpoint(&base)?.model;
    let (_, report) = train(&config, &corpus, model, Some(&out))?;
    for stage in 1..=3u8 {
        let losses: Vec<f32> = report.losses.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect();
        let tail = &losses[losses.len().saturating_sub(100)..];
        if !tail.is_empty() {
            println!("stage {stage}: mean loss of last {} iterations {:.4}", tail.len(), tail.iter().sum::<f32>() / tail.len() as f32);
        }
    }
    println!("condition counts per sample {:?}", report.condition_counts);
    Ok(())
}
