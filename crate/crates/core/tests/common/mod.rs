#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use desklm::model::{Cache, Model, ModelConfig, PositionRule, Variant};
use desklm::tensor::Tensor;

pub fn tiny_config(variant: Variant, seq_len: usize, cache_len: usize, vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::desk(vocab);
    cfg.seq_len = seq_len;
    cfg.cache_len = cache_len;
    cfg.use_cache = cache_len > 0;
    cfg.variant = variant;
    cfg
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Deterministic pseudo-text over `vocab` symbols with some local structure.
pub fn toy_stream(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut prev = 0u32;
    for _ in 0..n {
        let next = if rng.gen_bool(0.7) {
            (prev * 3 + 1) % vocab as u32
        } else {
            rng.gen_range(0..vocab as u32)
        };
        out.push(next);
        prev = next;
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

/// Largest logit difference between a two-pass cached forward over pieces
/// of `L` tokens and one uncached forward over all `2L`, restricted to the
/// second piece.
pub fn cache_equivalence_diff(model: &Model<f32>, tokens: &[u32], rule: PositionRule) -> f64 {
    let l = model.config().seq_len;
    assert_eq!(tokens.len(), 2 * l);
    let empty = model.empty_cache(1);
    let first = model.forward_with(&tokens[..l], 1, Some(&empty), rule).unwrap();
    let cache = empty.append(&first.layer_inputs, l).unwrap();
    let second = model.forward_with(&tokens[l..], 1, Some(&cache), rule).unwrap();
    let full = model.forward_with(tokens, 1, None, rule).unwrap();
    let v = model.config().vocab_size;
    max_abs_diff(second.logits.data(), &full.logits.data()[l * v..])
}

/// Norm below which a gradient counts as identically zero.
pub const ZERO_GRAD: f64 = 1e-6;

pub struct TensorCheck {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Compares every parameter gradient of a 64-bit model against central
/// differences with step `h`. The history is held constant.
pub fn gradcheck(
    model: &Model<f64>,
    tokens: &[u32],
    targets: &[u32],
    groups: usize,
    history: Option<&Cache<f64>>,
    h: f64,
) -> Vec<TensorCheck> {
    let rule = model.position_rule();
    let analytic = model
        .loss_and_grads(tokens, targets, groups, history, rule, None)
        .unwrap()
        .grads;
    let names: Vec<String> = model.params().names().iter().map(|s| s.to_string()).collect();
    let mut work = model.clone();
    let mut out = Vec::new();
    for (ti, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0f64; grad.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work.params().tensors()[ti].data()[j];
            let mut loss_at = |v: f64| {
                work.params_mut().tensors_mut()[ti].data_mut()[j] = v;
                work.loss_and_grads(tokens, targets, groups, history, rule, None).unwrap().loss
            };
            let plus = loss_at(orig + h);
            let minus = loss_at(orig - h);
            work.params_mut().tensors_mut()[ti].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        out.push(compare(&names[ti], grad, &numeric));
    }
    out
}

fn compare(name: &str, analytic: &Tensor<f64>, numeric: &[f64]) -> TensorCheck {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let a = norm(&mut analytic.data().iter().copied());
    let n = norm(&mut numeric.iter().copied());
    let d = norm(&mut analytic.data().iter().zip(numeric).map(|(x, y)| x - y));
    // gradients that vanish identically (the key bias shifts every score of
    // a query equally) are compared absolutely against FD noise
    let scale = a.max(n);
    TensorCheck {
        name: name.to_string(),
        relative_error: if scale < ZERO_GRAD { d / ZERO_GRAD } else { d / scale },
        analytic_norm: a,
    }
}

/// Tiny 64-bit model for finite-difference checks.
pub fn gradcheck_model(variant: Variant, cache: bool, seed: u64) -> Model<f64> {
    let mut cfg = tiny_config(variant, 4, if cache { 3 } else { 0 }, 7);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    let m: Model<f32> = Model::init(cfg, seed).unwrap();
    // larger weights than the init so the checks exercise nonlinear regimes
    let mut m = m.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    m
}

/// Runs [`gradcheck`] on two streams of four tokens, with a history of
/// three rows per stream when `cache` is set.
pub fn gradcheck_case(variant: Variant, cache: bool, seed: u64) -> Vec<TensorCheck> {
    let model = gradcheck_model(variant, cache, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = 2;
    let stream = random_tokens(&mut rng, groups * 8, 7);
    let (tokens, targets): (Vec<u32>, Vec<u32>) = (0..groups)
        .flat_map(|g| (0..4).map(move |i| g * 8 + 3 + i))
        .map(|i| (stream[i], stream[i + 1]))
        .unzip();
    let history = cache.then(|| {
        let prev: Vec<u32> = (0..groups).flat_map(|g| stream[g * 8..g * 8 + 3].to_vec()).collect();
        let empty = model.empty_cache(groups);
        let out = model
            .forward_with(&prev, groups, Some(&empty), model.position_rule())
            .unwrap();
        empty.append(&out.layer_inputs, 3).unwrap()
    });
    gradcheck(&model, &tokens, &targets, groups, history.as_ref(), 1e-5)
}
