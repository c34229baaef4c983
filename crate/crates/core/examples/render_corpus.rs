//! Builds a small on-disk dataset and writes a contact sheet of single,
//! diptych and multi-subject scene renders.
//!
//! `cargo run --example render_corpus -- [OUT_DIR]`

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use routed_dit::data::{build_dataset, detokenize, curriculum_batch, pretrain_scene, DatasetInfo};

fn main() -> routed_dit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/corpus".into()));
    let info = DatasetInfo {
        test_per_scenario: 2,
        ..DatasetInfo::new(16, 7)
    };
    let corpus = build_dataset(&out.join("dataset"), &info)?;
    println!("{} training renders in {}", corpus.len(), out.join("dataset").display());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for stage in 1..=3u8 {
        let s = curriculum_batch(stage, &corpus, &mut rng, true)?;
        println!("stage {stage}: {:?} \"{}\"", s.pairing, detokenize(&s.target_prompt)?);
        s.target.save_png(out.join(format!("stage{stage}_target.png")))?;
        for (k, c) in s.conditions.iter().enumerate() {
            c.image.save_png(out.join(format!("stage{stage}_cond{k}.png")))?;
        }
    }
    let scene = pretrain_scene(&corpus, &mut rng)?;
    println!("scene: \"{}\"", detokenize(&scene.prompt)?);
    scene.image.save_png(out.join("scene.png"))?;
    Ok(())
}
