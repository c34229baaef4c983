//! Generates multi-subject images from a trained checkpoint for one, two and
//! three conditions, with routing on and off.
//!
//! `cargo run --release --example sample_subjects -- CKPT [OUT_DIR]`

use std::path::PathBuf;

use routed_dit::data::{detokenize, generate_test_cases, Extents, Scenario};
use routed_dit::metrics::{attribute_match, RegionMode};
use routed_dit::model::{load_checkpoint, RoutingOptions};
use routed_dit::sampler::{sample, SampleRequest};

fn main() -> routed_dit::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "runs/full/stage3.ckpt".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/samples".into()));
    std::fs::create_dir_all(&out).map_err(|e| routed_dit::Error::io(&out, e))?;
    let model = load_checkpoint(&ckpt)?.model;

    let cases = generate_test_cases(1, 11, Extents::default());
    for (i, case) in cases.iter().enumerate() {
        for (tag, dynamic) in [("routed", true), ("unrouted", false)] {
            let mut req = SampleRequest::new(case.conditions.clone(), case.prompt.clone(), case.spans.clone());
            req.routing = RoutingOptions {
                dynamic_routing: dynamic,
                ..RoutingOptions::default()
            };
            let (img, _) = sample(&model, &req)?;
            let report = attribute_match(&img, &case.specs, RegionMode::Blobs);
            println!(
                "{:<10} {tag:<8} match {:.2} \"{}\"",
                case.scenario.name(),
                report.match_rate(),
                detokenize(&case.prompt)?
            );
            img.save_png(out.join(format!("case{i}_{tag}.png")))?;
        }
        if case.scenario == Scenario::Triple {
            for (k, c) in case.conditions.iter().enumerate() {
                c.image.save_png(out.join(format!("case{i}_cond{k}.png")))?;
            }
        }
    }
    Ok(())
}
