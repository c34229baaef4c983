//! Property tests over layouts, masks, affinity, adapters, metrics and storage formats.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use routed_dit::data::diptych::{random_specs, render_target};
use routed_dit::data::Image;
use routed_dit::data::{detokenize, tokenize, Token};
use routed_dit::layout::{PromptSpan, PromptSpanTable, SegmentKind, SequenceLayout};
use routed_dit::lora::{gated_project, GateMode, GateRows};
use routed_dit::metrics::identity_similarity;
use routed_dit::model::patch::{patchify, unpatchify};
use routed_dit::model::{decode_checkpoint, encode_checkpoint, Model, ModelConfig};
use routed_dit::numerics::{Graph, Tensor};
use routed_dit::routing::{
    build_dynamic_mask, build_static_mask, combine, compute_affinity, compute_similarity, route, RoutingAssignment,
};

fn layout_strategy() -> impl Strategy<Value = SequenceLayout> {
    (0usize..5, 1usize..7, 1usize..5, 1usize..8, 1usize..10)
        .prop_map(|(c, np, mp, m, n)| SequenceLayout::new(c, np, mp, m, n))
}

fn assignment(layout: &SequenceLayout, seed: u64) -> RoutingAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RoutingAssignment((0..layout.n).map(|_| rng.gen_range(0..layout.c.max(1))).collect())
}

/// Spans tiling the prompt front to back: `c` spans then `tail` uncovered tokens.
fn tiled_spans(lengths: &[usize], tail: usize) -> (PromptSpanTable, usize) {
    let mut start = 0;
    let mut spans = Vec::new();
    for &l in lengths {
        spans.push(PromptSpan::new(start, l));
        start += l;
    }
    let m = start + tail;
    (PromptSpanTable::new(spans, m).unwrap(), m)
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn condition_of_column_agrees_with_classify(layout in layout_strategy()) {
        for j in 0..layout.total() {
            let kind = layout.classify(j).unwrap();
            match layout.condition_of_column(j) {
                Ok(k) => prop_assert_eq!(kind.condition(), Some(k)),
                Err(_) => prop_assert!(kind.condition().is_none()),
            }
        }
    }

    #[test]
    fn routed_rows_see_exactly_one_block(layout in layout_strategy(), seed in any::<u64>()) {
        let mask = combine(&build_static_mask(&layout), &build_dynamic_mask(&assignment(&layout, seed), &layout).unwrap()).unwrap();
        prop_assert!(mask.audit_bijective().is_ok());
        for i in 0..layout.total() {
            prop_assert!(!mask.is_blocked(i, i));
        }
    }

    #[test]
    fn static_mask_is_symmetric_and_dynamic_is_one_way(layout in layout_strategy(), seed in any::<u64>()) {
        let stat = build_static_mask(&layout);
        let dynamic = build_dynamic_mask(&assignment(&layout, seed), &layout).unwrap();
        for i in 0..layout.total() {
            for j in 0..layout.total() {
                prop_assert_eq!(stat.is_blocked(i, j), stat.is_blocked(j, i));
                if dynamic.is_blocked(i, j) {
                    prop_assert_eq!(layout.classify(i).unwrap(), SegmentKind::Noise);
                    prop_assert!(layout.classify(j).unwrap().condition().is_some());
                    prop_assert!(!dynamic.is_blocked(j, i));
                }
            }
        }
        if layout.c == 1 {
            prop_assert!(dynamic.is_empty());
        }
        for i in layout.noise() {
            prop_assert_eq!(stat.open_condition_columns(i).len(), layout.c * layout.l_prime());
        }
    }

    #[test]
    fn similarity_rows_are_distributions(n in 1usize..8, m in 1usize..8, d in 1usize..6, seed in any::<u64>()) {
        let s = compute_similarity(&random_matrix(n, d, seed), &random_matrix(m, d, seed ^ 1), d).unwrap();
        for i in 0..n {
            let total: f32 = s.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn weighted_affinity_is_at_most_one(lengths in prop::collection::vec(1usize..4, 1..4), tail in 0usize..3, seed in any::<u64>()) {
        let (spans, m) = tiled_spans(&lengths, tail);
        let n = 5;
        let s = compute_similarity(&random_matrix(n, 4, seed), &random_matrix(m, 4, seed ^ 2), 4).unwrap();
        let aff = compute_affinity(&s, &spans, lengths.len()).unwrap();
        for i in 0..n {
            let weighted: f32 = lengths.iter().enumerate().map(|(k, &l)| l as f32 * aff.get(i, k)).sum();
            prop_assert!(weighted <= 1.0 + 1e-5);
            if tail == 0 {
                prop_assert!((weighted - 1.0).abs() < 1e-5);
            } else {
                prop_assert!(weighted < 1.0);
            }
            prop_assert!(aff.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn route_picks_the_first_maximum(rows in prop::collection::vec(prop::collection::vec(0u8..4, 3), 1..20)) {
        let values: Vec<f32> = rows.iter().flatten().map(|&v| v as f32 / 4.0).collect();
        let aff = routed_dit::routing::AffinityMatrix::new(rows.len(), 3, values).unwrap();
        let a = route(&aff);
        for (i, row) in rows.iter().enumerate() {
            let max = *row.iter().max().unwrap();
            prop_assert_eq!(a.as_slice()[i], row.iter().position(|&v| v == max).unwrap());
        }
    }

    #[test]
    fn prompt_rows_ignore_adapters(seed in any::<u64>(), c in 0usize..4) {
        let cfg = ModelConfig::tiny();
        let mut model = Model::new(cfg, seed).unwrap();
        let layout = SequenceLayout::new(c, 4, 2, 3, 16);
        let rows = GateRows::new(&layout.labels(), GateMode::Dual);
        let site = model.lora.sites[0].clone();
        let x = random_matrix(layout.total(), site.d_in, seed);
        let project = |m: &Model| {
            let mut g = Graph::<f32>::new();
            let xv = g.constant(&x);
            let y = gated_project(&mut g, &m.params, &site, xv, &rows).unwrap();
            g.tensor(y)
        };
        let before = project(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        for id in model.lora.trainable_parameters() {
            model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let after = project(&model);
        for i in layout.prompt() {
            prop_assert_eq!(before.row(i), after.row(i));
        }
    }

    #[test]
    fn identity_similarity_symmetric_and_reflexive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = random_specs(2, &mut rng);
        let a = render_target(&specs[0], 32, seed % 4);
        let b = render_target(&specs[1], 32, seed % 3);
        prop_assert!((identity_similarity(&a, &a) - 1.0).abs() < 1e-5);
        prop_assert_eq!(identity_similarity(&a, &b), identity_similarity(&b, &a));
        let s = identity_similarity(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn patchify_round_trips(edge in 1usize..5, patch in 1usize..4, seed in any::<u64>()) {
        let w = edge * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::new(w, w, (0..w * w * 3).map(|_| rng.gen()).collect()).unwrap();
        let tokens = patchify(&img, patch).unwrap();
        prop_assert_eq!(tokens.rows(), edge * edge);
        prop_assert_eq!(unpatchify(&tokens, w, w, patch).unwrap(), img);
    }

    #[test]
    fn prompts_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<String> = (0..rng.gen_range(1..8))
            .map(|_| Token::all()[rng.gen_range(0..Token::all().len())].word())
            .collect();
        let text = words.join(" ");
        prop_assert_eq!(detokenize(&tokenize(&text).unwrap()).unwrap(), text);
    }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut model = Model::new(ModelConfig::tiny(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen());
    }
    let bytes = encode_checkpoint(&model, 3, "2", serde_json::json!({})).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back.model, 3, "2", serde_json::json!({})).unwrap(), bytes);
}
