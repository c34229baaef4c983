//! Noise-to-prompt similarity, span-averaged affinity and the resulting
//! token-to-condition assignment on hand-made query/key matrices.
//!
//! `cargo run --example affinity_routing`

use routed_dit::layout::{PromptSpan, PromptSpanTable};
use routed_dit::numerics::Tensor;
use routed_dit::routing::{compute_affinity, compute_similarity, route};

fn main() -> routed_dit::Result<()> {
    // prompt "a red ball and a blue cup": spans cover tokens 0..3 and 4..7
    let d = 4;
    let keys = Tensor::from_rows(&[
        vec![0.1, 0.0, 0.0, 0.0],
        vec![2.0, 0.0, 0.0, 0.0],
        vec![1.5, 0.5, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.1],
        vec![0.1, 0.0, 0.0, 0.0],
        vec![0.0, 2.0, 0.0, 0.0],
        vec![0.5, 1.5, 0.0, 0.0],
    ])?;
    let queries = Tensor::from_rows(&[
        vec![3.0, 0.0, 0.0, 0.0],
        vec![0.0, 3.0, 0.0, 0.0],
        vec![1.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0],
    ])?;
    let spans = PromptSpanTable::new(vec![PromptSpan::new(0, 3), PromptSpan::new(4, 3)], 7)?;

    let s = compute_similarity(&queries, &keys, d)?;
    let aff = compute_affinity(&s, &spans, 2)?;
    let assign = route(&aff);
    for i in 0..aff.noise_tokens() {
        println!("noise {i}: affinity {:?} -> condition {}", aff.row(i), assign.as_slice()[i]);
    }
    println!("{}", aff.to_json_rows());
    Ok(())
}
