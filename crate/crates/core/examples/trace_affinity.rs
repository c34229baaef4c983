//! Records noise-to-condition affinity at every denoising step and layer and
//! exports one heatmap per (step, layer, condition).
//!
//! `cargo run --release --example trace_affinity -- CKPT [OUT_DIR]`

use std::path::PathBuf;

use routed_dit::data::{generate_test_cases, Extents, Scenario};
use routed_dit::model::load_checkpoint;
use routed_dit::sampler::{export_trace, sample, SampleRequest};

fn main() -> routed_dit::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "runs/full/stage3.ckpt".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/trace".into()));
    let model = load_checkpoint(&ckpt)?.model;

    let case = generate_test_cases(1, 5, Extents::default())
        .into_iter()
        .find(|c| c.scenario == Scenario::SameCategoryPair)
        .expect("scenario present");
    let mut req = SampleRequest::new(case.conditions, case.prompt, case.spans);
    req.steps = 10;
    req.trace_every = Some(1);
    let (img, trace) = sample(&model, &req)?;
    let trace = trace.expect("tracing requested");
    let files = export_trace(&trace, &out)?;
    img.save_png(out.join("sample.png"))?;

    let last = trace.entries.iter().filter(|e| e.step == req.steps - 1);
    for e in last {
        let share = e.assignment.as_slice().iter().filter(|&&a| a == 0).count() as f32 / e.assignment.len() as f32;
        println!("layer {}: {:.0}% of noise tokens routed to condition 0", e.layer, 100.0 * share);
    }
    println!("{} heatmaps in {}", files.len(), out.display());
    Ok(())
}
