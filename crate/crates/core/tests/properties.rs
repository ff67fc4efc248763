mod common;

use common::{random_tokens, tiny_config};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use desklm::analysis::{attention_dims, ctxwin_brute_force, ctxwin_stats, CostMode};
use desklm::data::{segment, BatchPlan, TokenMode, TokenStream, Vocab};
use desklm::model::{checkpoint, parameter_count, Activation, Cache, Model, ModelConfig, NormPlacement, Variant};
use desklm::tensor::Tensor;

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 1usize..5, 1usize..5, 1usize..40, 2usize..50, 1usize..20, any::<bool>(), any::<bool>(), any::<bool>())
        .prop_map(|(layers, heads, dh, d_ff, vocab, l, tie, post, gelu)| {
            let mut cfg = ModelConfig::desk(vocab);
            cfg.n_layers = layers;
            cfg.n_heads = heads;
            cfg.d_model = heads * dh;
            cfg.d_ff = d_ff;
            cfg.seq_len = l;
            cfg.tie_embeddings = tie;
            cfg.norm = if post { NormPlacement::Post } else { NormPlacement::Pre };
            cfg.activation = if gelu { Activation::Gelu } else { Activation::Relu };
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ctxwin_closed_form_matches_enumeration(l in 1u64..=4096, k in 0u64..4200, inclusive in any::<bool>()) {
        prop_assert_eq!(ctxwin_stats(l, k, inclusive).unwrap(), ctxwin_brute_force(l, k, inclusive).unwrap());
    }

    #[test]
    fn infused_positions_add_no_parameters(cfg in arb_config()) {
        let pia = ModelConfig { variant: Variant::Pia, ..cfg.clone() };
        prop_assert_eq!(parameter_count(&pia), parameter_count(&cfg));
        let m: Model = Model::init(pia, 0).unwrap();
        prop_assert_eq!(m.params().count(), parameter_count(&cfg));
    }

    #[test]
    fn predictions_never_see_the_future(cfg in arb_config(), seed in 0u64..1000, pia in any::<bool>()) {
        let cfg = ModelConfig { variant: if pia { Variant::Pia } else { Variant::Baseline }, ..cfg };
        let m: Model = Model::init(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = random_tokens(&mut rng, cfg.seq_len, cfg.vocab_size);
        let j = seed as usize % cfg.seq_len;
        let mut changed = tokens.clone();
        changed[j] = (changed[j] + 1) % cfg.vocab_size as u32;
        let a = m.forward(&tokens, None).unwrap().0.logits;
        let b = m.forward(&changed, None).unwrap().0.logits;
        let v = cfg.vocab_size;
        prop_assert_eq!(&a.data()[..j * v], &b.data()[..j * v]);
    }

    #[test]
    fn counters_equal_analytic_dims(cfg in arb_config(), seed in 0u64..100, cached in any::<bool>()) {
        let cfg = ModelConfig {
            variant: Variant::Pia,
            use_cache: cached,
            cache_len: if cached { cfg.seq_len + 1 } else { 0 },
            ..cfg
        };
        let m: Model = Model::init(cfg.clone(), seed).unwrap();
        let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(seed), cfg.seq_len, cfg.vocab_size);
        let mut cache = m.empty_cache(1);
        if cached {
            // fill the cache to its capacity first
            let fill = random_tokens(&mut ChaCha8Rng::seed_from_u64(seed + 1), cfg.cache_len, cfg.vocab_size);
            let out = m.forward_with(&fill, 1, Some(&cache), m.position_rule()).unwrap();
            cache = cache.append(&out.layer_inputs, fill.len()).unwrap();
        }
        let out = m.forward_with(&tokens, 1, cached.then_some(&cache), m.position_rule()).unwrap();
        let dims = attention_dims(&cfg, if cached { CostMode::Cached } else { CostMode::Nonoverlapping }).unwrap();
        prop_assert_eq!(out.dot_products, dims.dot_products);
    }

    #[test]
    fn segmentation_covers_every_position_once(n in 2usize..600, l in 1usize..20, bs in 1usize..6, shuffle in any::<bool>(), seed in 0u64..50) {
        prop_assume!(n >= l * bs);
        let stream = TokenStream::new((0..n as u32).collect());
        let plan = BatchPlan { seq_len: l, batch_size: bs, shuffle };
        let batches = segment(&stream, &plan, seed).unwrap();
        let mut seen = vec![0u8; n - 1];
        for b in &batches {
            prop_assert!(b.rows.len() <= bs);
            for r in &b.rows {
                prop_assert!(r.inputs.len() <= l && !r.inputs.is_empty());
                for (i, (&x, &y)) in r.inputs.iter().zip(&r.targets).enumerate() {
                    prop_assert_eq!(x as usize, r.start + i);
                    prop_assert_eq!(y, x + 1);
                    seen[x as usize] += 1;
                }
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        if !shuffle {
            for w in batches.windows(2) {
                for (a, b) in w[0].rows.iter().zip(&w[1].rows) {
                    prop_assert_eq!(a.row, b.row);
                    prop_assert_eq!(a.start + a.inputs.len(), b.start);
                }
            }
        }
    }

    #[test]
    fn cache_keeps_the_newest_rows(cap in 1usize..10, pushes in proptest::collection::vec(1usize..6, 1..6)) {
        let d = 2;
        let mut cache: Cache<f32> = Cache::empty(1, 1, d, cap);
        let mut all = Vec::new();
        let mut next = 0.0f32;
        for n in pushes {
            let rows: Vec<f32> = (0..n * d).map(|_| { next += 1.0; next }).collect();
            all.extend_from_slice(&rows);
            cache = cache.append(&[Tensor::new(vec![n, d], rows).unwrap()], n).unwrap();
            let keep = (all.len() / d).min(cap);
            prop_assert_eq!(cache.token_count(), keep);
            prop_assert_eq!(cache.layer(0).data(), &all[all.len() - keep * d..]);
        }
    }

    #[test]
    fn checkpoints_round_trip(cfg in arb_config(), seed in 0u64..1000) {
        let m: Model = Model::init(cfg, seed).unwrap();
        let mut bytes = Vec::new();
        checkpoint::write_model(&mut bytes, &m).unwrap();
        let back = checkpoint::read_model(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back.config(), m.config());
        prop_assert_eq!(back.params(), m.params());
    }

    #[test]
    fn char_vocab_round_trips(text in "[a-zA-Z .,\n]{1,200}") {
        let v = Vocab::build(&text, TokenMode::Char, None).unwrap();
        prop_assert_eq!(v.decode(&v.encode(&text)), text.clone());
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let back = Vocab::read(buf.as_slice(), TokenMode::Char).unwrap();
        prop_assert_eq!(back.encode(&text), v.encode(&text));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::from_fn(&[rows, cols], |_| rand::Rng::gen_range(&mut rng, -30.0..30.0));
        let s = t.softmax(1).unwrap();
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn cached_dims_with_tiny_config() {
    let cfg = tiny_config(Variant::Pia, 8, 8, 5);
    assert_eq!(attention_dims(&cfg, CostMode::Cached).unwrap().dims(), "8x16");
}
