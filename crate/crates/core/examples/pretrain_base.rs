//! Pretrains the text-to-image base on multi-subject scenes, then checks how
//! often single-subject prompts come out in the right color.
//!
//! `cargo run --release --example pretrain_base -- OUT_DIR [ITERS]`

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use routed_dit::data::diptych::{random_specs, subject_prompt};
use routed_dit::data::{generate_corpus, Extents};
use routed_dit::layout::PromptSpanTable;
use routed_dit::metrics::{attribute_match, RegionMode};
use routed_dit::sampler::{sample, SampleRequest};
use routed_dit::trainer::{pretrain, PretrainConfig};

fn main() -> routed_dit::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/base".into()));
    let iters = args.next().map_or(PretrainConfig::default().iters, |s| s.parse().expect("iters"));
    std::fs::create_dir_all(&out).map_err(|e| routed_dit::Error::io(&out, e))?;

    let corpus = generate_corpus(512, 4, 0, Extents::default());
    let config = PretrainConfig { iters, ..PretrainConfig::default() };
    let (model, losses) = pretrain(&config, &corpus, Some(&out))?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    println!("final loss {:.4}", tail.iter().map(|r| r.loss).sum::<f32>() / tail.len() as f32);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let specs = random_specs(16, &mut rng);
    let mut hits = 0;
    for (i, spec) in specs.iter().enumerate() {
        let req = SampleRequest {
            seed: i as u64,
            ..SampleRequest::new(vec![], subject_prompt(spec), PromptSpanTable::default())
        };
        let (img, _) = sample(&model, &req)?;
        img.save_png(out.join(format!("sample_{i:02}.png")))?;
        let report = attribute_match(&img, std::slice::from_ref(spec), RegionMode::Blobs);
        hits += report.entries[0].matched as usize;
    }
    println!("color match {hits}/{}", specs.len());
    Ok(())
}
