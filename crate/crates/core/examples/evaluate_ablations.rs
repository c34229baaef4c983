//! Scores the full model and its ablations on held-out test cases and prints
//! the identity / attribute table.
//!
//! `cargo run --release --example evaluate_ablations -- FULL_CKPT NO_DIPTYCH_CKPT [NO_BIAS_CKPT] [CASES_PER_SCENARIO]`

use routed_dit::data::{generate_test_cases, Extents};
use routed_dit::metrics::{eval_suite, summarize, SuiteOptions, Variant};
use routed_dit::model::{load_checkpoint, RoutingOptions};

fn main() -> routed_dit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full = load_checkpoint(args.first().map_or("runs/full/stage3.ckpt", String::as_str))?.model;
    let no_diptych = load_checkpoint(args.get(1).map_or("runs/no-diptych/stage3.ckpt", String::as_str))?.model;
    let no_bias = args.get(2).map(load_checkpoint).transpose()?.map(|c| c.model);
    let per_scenario = args.get(3).map_or(8, |s| s.parse().expect("case count"));

    let on = RoutingOptions::default();
    let mut variants = vec![
        Variant { name: "full".into(), model: &full, routing: on },
        Variant { name: "no-diptych".into(), model: &no_diptych, routing: on },
        Variant {
            name: "no-dynamic-routing".into(),
            model: &full,
            routing: RoutingOptions { dynamic_routing: false, ..on },
        },
    ];
    if let Some(m) = &no_bias {
        variants.push(Variant {
            name: "no-bias-mitigation".into(),
            model: m,
            routing: RoutingOptions { static_routing: false, ..on },
        });
    }
    let cases = generate_test_cases(per_scenario, 1, Extents::default());
    let rows = eval_suite(&variants, &cases, &SuiteOptions::default())?;
    for r in summarize(&rows) {
        println!("{:<20} {:<10} identity {:.4} attr {:.4}", r.variant, r.scenario, r.identity_sim, r.attr_match);
    }
    Ok(())
}
