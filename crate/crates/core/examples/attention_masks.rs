//! Static and dynamic attention-flow masks for a small layout, written as PGM
//! images with per-block counts.
//!
//! `cargo run --example attention_masks -- [OUT_DIR]`

use std::path::PathBuf;

use routed_dit::layout::SequenceLayout;
use routed_dit::routing::{build_dynamic_mask, build_static_mask, combine, RoutingAssignment};

fn main() -> routed_dit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/masks".into()));
    std::fs::create_dir_all(&out).map_err(|e| routed_dit::Error::io(&out, e))?;

    // two conditions of 2 image + 1 text tokens, a 2-token prompt, 3 noise tokens
    let layout = SequenceLayout::new(2, 2, 1, 2, 3);
    for i in 0..layout.total() {
        println!("{i:>2}: {:?}", layout.classify(i)?);
    }

    let stat = build_static_mask(&layout);
    let dynamic = build_dynamic_mask(&RoutingAssignment(vec![0, 1, 0]), &layout)?;
    let both = combine(&stat, &dynamic)?;
    both.audit_bijective()?;
    for (name, mask) in [("static", &stat), ("dynamic", &dynamic), ("combined", &both)] {
        println!("{name}: {} blocked", mask.blocked_count());
        for b in mask.block_summary() {
            println!("  {} -> {}: {}", b.rows, b.cols, b.blocked);
        }
        mask.to_pgm().save(out.join(format!("{name}.pgm")))?;
    }

    let default = SequenceLayout::new(2, 16, 4, 16, 64);
    println!("default layout: L = {}, static blocked = {}", default.total(), build_static_mask(&default).blocked_count());
    Ok(())
}
