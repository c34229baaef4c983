//! Compares reverse-mode gradients of a masked attention block against
//! central finite differences in 64-bit precision.
//!
//! `cargo run --example gradient_check`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routed_dit::layout::SequenceLayout;
use routed_dit::model::masked_attention;
use routed_dit::numerics::{Graph, Tensor};
use routed_dit::routing::build_static_mask;

fn loss(x: &[f32], heads: usize, mask: &Tensor, rows: usize, d: usize) -> (f64, Vec<f64>) {
    let mut g = Graph::<f64>::new();
    let v = g.variable(&Tensor::matrix(rows, d, x.to_vec()).expect("sized"));
    let att = masked_attention(&mut g, v, v, v, heads, std::slice::from_ref(mask)).expect("attention");
    let sq = g.mul(att, att).expect("same shape");
    let total = g.sum(sq);
    let value = g.value(total)[0];
    let grads = g.backward(total).expect("backward");
    (value, grads.wrt(v).expect("variable").to_vec())
}

fn main() {
    let layout = SequenceLayout::new(2, 2, 1, 2, 3);
    let mask = build_static_mask(&layout).to_additive();
    let (rows, d, heads) = (layout.total(), 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f32> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, analytic) = loss(&x, heads, &mask, rows, d);
    let h = 1e-3f32;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (mut up, mut down) = (x.clone(), x.clone());
        up[i] += h;
        down[i] -= h;
        let fd = (loss(&up, heads, &mask, rows, d).0 - loss(&down, heads, &mask, rows, d).0) / (2.0 * h as f64);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    println!("{} inputs checked, worst relative error {worst:.2e}", x.len());
}
