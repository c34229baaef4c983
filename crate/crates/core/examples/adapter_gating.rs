//! Which token rows each adapter branch touches, and how many parameters the
//! adapters add to the default model.
//!
//! `cargo run --example adapter_gating`

use routed_dit::layout::SequenceLayout;
use routed_dit::lora::{gate, GateMode, GateRows};
use routed_dit::model::{Model, ModelConfig};

fn main() -> routed_dit::Result<()> {
    let layout = SequenceLayout::new(2, 2, 1, 2, 3);
    let labels = layout.labels();
    for mode in [GateMode::Dual, GateMode::Uniform] {
        println!("{mode:?}");
        for (i, kind) in labels.iter().enumerate() {
            println!("  {i:>2} {kind:?} -> {:?}", gate(*kind, mode));
        }
        let rows = GateRows::new(&labels, mode);
        println!("  subject rows {:?}, image rows {:?}", rows.subject, rows.image);
    }

    let model = Model::new(ModelConfig::default(), 0)?;
    let adapters = model.lora.trainable_parameters();
    let base = model.base_parameters();
    println!(
        "adapters: {} tensors, {} values; base: {} tensors, {} values",
        adapters.len(),
        model.params.numel(&adapters),
        base.len(),
        model.params.numel(&base)
    );
    Ok(())
}
