mod common;

use common::{cache_equivalence_diff, random_tokens, tiny_config};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use desklm::model::{Model, PositionRule, Variant};

#[test]
fn infused_positions_make_two_passes_equal_one() {
    for seed in 0..12u64 {
        let l = [4, 8, 16][seed as usize % 3];
        let model: Model = Model::init(tiny_config(Variant::Pia, l, l, 23), seed).unwrap();
        let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(100 + seed), 2 * l, 23);
        let diff = cache_equivalence_diff(&model, &tokens, PositionRule::Infused);
        assert!(diff <= 1e-5, "seed {seed} L={l}: {diff}");
    }
}

#[test]
fn embedded_positions_break_the_equivalence() {
    for seed in 0..6u64 {
        let l = [4, 8, 16][seed as usize % 3];
        let model: Model = Model::init(tiny_config(Variant::Baseline, l, l, 23), seed).unwrap();
        let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(200 + seed), 2 * l, 23);
        let diff = cache_equivalence_diff(&model, &tokens, PositionRule::Embedding);
        assert!(diff > 1e-3, "seed {seed} L={l}: {diff}");
    }
}

#[test]
fn forward_pia_returns_the_next_cache() {
    let l = 8;
    let model: Model = Model::init(tiny_config(Variant::Pia, l, l, 23), 5).unwrap();
    let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(5), 3 * l, 23);
    let mut cache = model.empty_cache(1);
    let full = model.forward_with(&tokens, 1, None, PositionRule::Infused).unwrap();
    for piece in 0..3 {
        let (out, next) = model.forward_pia(&tokens[piece * l..(piece + 1) * l], &cache).unwrap();
        if piece < 2 {
            // within two pieces every token sees exactly what the one-shot pass shows it
            let v = 23;
            let diff = common::max_abs_diff(out.logits.data(), &full.logits.data()[piece * l * v..(piece + 1) * l * v]);
            assert!(diff <= 1e-5, "piece {piece}: {diff}");
        }
        assert_eq!(next.token_count(), l);
        for (layer, inputs) in out.layer_inputs.iter().enumerate() {
            assert_eq!(next.layer(layer).data(), inputs.data());
        }
        cache = next;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn equivalence_holds_for_shorter_caches(seed in 0u64..1000, l in 2usize..10, extra in 0usize..3) {
        // a cache of L′ ≤ L rows equals a one-shot pass over those rows and the new piece
        let lc = l.saturating_sub(extra).max(1);
        let model: Model = Model::init(tiny_config(Variant::Pia, l, lc, 11), seed).unwrap();
        let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(seed), lc + l, 11);
        let empty = model.empty_cache(1);
        let first = model.forward_with(&tokens[..lc], 1, Some(&empty), PositionRule::Infused).unwrap();
        let cache = empty.append(&first.layer_inputs, lc).unwrap();
        let second = model.forward_with(&tokens[lc..], 1, Some(&cache), PositionRule::Infused).unwrap();
        let full = model.forward_with(&tokens, 1, None, PositionRule::Infused).unwrap();
        let diff = common::max_abs_diff(second.logits.data(), &full.logits.data()[lc * 11..]);
        prop_assert!(diff <= 1e-5, "diff {}", diff);
    }
}
