//! Inference regimes: nonoverlapping, sliding-window and cached evaluation,
//! token-by-token decoding, and effective context-window bounds.
//!
//! A stream of `N` tokens has `N − 1` predictions; prediction `p` reads
//! input position `p` and is scored against token `p + 1`. Every mode
//! scores each prediction exactly once.

use std::fmt;
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Cache, Model};
use crate::tensor::{log_softmax_at, Scalar, Tensor};

/// Environment variable holding the evaluation thread count.
pub const THREADS_ENV: &str = "DESKLM_THREADS";

/// Windows evaluated together in one batched forward.
const EVAL_GROUP: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Nonoverlapping,
    Sliding { stride: usize },
    Cached,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Nonoverlapping => write!(f, "nonoverlapping"),
            EvalMode::Sliding { stride } => write!(f, "sliding:{stride}"),
            EvalMode::Cached => write!(f, "cached"),
        }
    }
}

/// Loss accumulated at one index within the evaluation window.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PositionLoss {
    pub sum: f64,
    pub count: usize,
}

impl PositionLoss {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub total_loss: f64,
    pub tokens_scored: usize,
    /// Indexed by a prediction's offset within its forward window.
    pub position_loss: Vec<PositionLoss>,
    pub dot_products: u64,
    pub wall_seconds: f64,
}

impl EvalReport {
    fn new(mode: EvalMode, width: usize) -> Self {
        Self {
            mode,
            total_loss: 0.0,
            tokens_scored: 0,
            position_loss: vec![PositionLoss::default(); width],
            dot_products: 0,
            wall_seconds: 0.0,
        }
    }

    fn record(&mut self, offset: usize, loss: f64) {
        self.total_loss += loss;
        self.tokens_scored += 1;
        if offset >= self.position_loss.len() {
            self.position_loss.resize(offset + 1, PositionLoss::default());
        }
        self.position_loss[offset].sum += loss;
        self.position_loss[offset].count += 1;
    }

    pub fn mean_loss(&self) -> f64 {
        self.total_loss / self.tokens_scored as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_loss().exp()
    }

    pub fn csv_header() -> &'static str {
        "mode,perplexity,tokens_scored,total_loss,attention_dot_products,wall_seconds"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.mode,
            self.perplexity(),
            self.tokens_scored,
            self.total_loss,
            self.dot_products,
            self.wall_seconds
        )
    }
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1usize);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("evaluation thread pool")
    })
}

/// A forward window over inputs `start..start+len` whose predictions from
/// offset `score_from` on are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Window {
    start: usize,
    len: usize,
    score_from: usize,
}

fn check_stream(stream: &[u32]) -> Result<()> {
    if stream.len() < 2 {
        return Err(Error::contract("evaluation needs at least two tokens"));
    }
    Ok(())
}

/// Consecutive independent pieces of `L` inputs.
pub fn eval_nonoverlapping<T: Scalar>(model: &Model<T>, stream: &[u32]) -> Result<EvalReport> {
    check_stream(stream)?;
    let l = model.config().seq_len;
    let p = stream.len() - 1;
    let windows: Vec<Window> = (0..p)
        .step_by(l)
        .map(|s| Window {
            start: s,
            len: l.min(p - s),
            score_from: 0,
        })
        .collect();
    score_windows(model, stream, &windows, EvalMode::Nonoverlapping)
}

/// Sliding-window evaluation with stride `S`: the first window scores all
/// its predictions, every later window re-encodes `L − S` earlier tokens and
/// scores its final `S` predictions.
pub fn eval_sliding<T: Scalar>(model: &Model<T>, stream: &[u32], stride: usize) -> Result<EvalReport> {
    check_stream(stream)?;
    let l = model.config().seq_len;
    if stride == 0 || stride > l {
        return Err(Error::contract(format!("stride {stride} outside 1..={l}")));
    }
    score_windows(model, stream, &sliding_windows(stream.len() - 1, l, stride), EvalMode::Sliding { stride })
}

fn sliding_windows(predictions: usize, l: usize, stride: usize) -> Vec<Window> {
    let first = l.min(predictions);
    let mut windows = vec![Window {
        start: 0,
        len: first,
        score_from: 0,
    }];
    let mut a = first;
    while a < predictions {
        let b = (a + stride).min(predictions);
        let start = a - (l - stride);
        windows.push(Window {
            start,
            len: b - start,
            score_from: a - start,
        });
        a = b;
    }
    windows
}

/// Offsets and conditioning lengths of every scored prediction under
/// sliding-window evaluation, without running a model: `(p, context)` where
/// `context` counts the tokens prediction `p` conditions on.
pub fn sliding_contexts(predictions: usize, l: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 || stride > l {
        return Err(Error::contract(format!("stride {stride} outside 1..={l}")));
    }
    let mut out = Vec::with_capacity(predictions);
    for w in sliding_windows(predictions, l, stride) {
        for off in w.score_from..w.len {
            out.push((w.start + off, off + 1));
        }
    }
    Ok(out)
}

fn score_windows<T: Scalar>(model: &Model<T>, stream: &[u32], windows: &[Window], mode: EvalMode) -> Result<EvalReport> {
    let started = Instant::now();
    let rule = model.position_rule();
    // batch runs of equal-length windows
    let mut groups: Vec<&[Window]> = Vec::new();
    let mut i = 0;
    while i < windows.len() {
        let mut j = i + 1;
        while j < windows.len() && j - i < EVAL_GROUP && windows[j].len == windows[i].len {
            j += 1;
        }
        groups.push(&windows[i..j]);
        i = j;
    }
    let results: Vec<Result<(Vec<Vec<(usize, f64)>>, u64)>> = pool().install(|| {
        groups
            .par_iter()
            .map(|g| {
                let len = g[0].len;
                let tokens: Vec<u32> = g.iter().flat_map(|w| stream[w.start..w.start + len].iter().copied()).collect();
                let out = model.forward_with(&tokens, g.len(), None, rule)?;
                let losses = g
                    .iter()
                    .enumerate()
                    .map(|(gi, w)| {
                        (w.score_from..len)
                            .map(|off| {
                                let row = out.logits.row(gi * len + off);
                                let target = stream[w.start + off + 1] as usize;
                                (off, -log_softmax_at(row, target).as_f64())
                            })
                            .collect()
                    })
                    .collect();
                Ok((losses, out.dot_products))
            })
            .collect()
    });
    let width = windows.iter().map(|w| w.len).max().unwrap_or(0);
    let mut report = EvalReport::new(mode, width);
    for r in results {
        let (losses, dots) = r?;
        report.dot_products += dots;
        for (off, loss) in losses.into_iter().flatten() {
            report.record(off, loss);
        }
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Consecutive pieces of `L` inputs, each attending to the cache left by
/// the previous piece.
pub fn eval_cached<T: Scalar>(model: &Model<T>, stream: &[u32]) -> Result<EvalReport> {
    check_stream(stream)?;
    if !model.config().use_cache {
        return Err(Error::contract("cached evaluation needs a model configured with use_cache"));
    }
    let started = Instant::now();
    let l = model.config().seq_len;
    let p = stream.len() - 1;
    let mut report = EvalReport::new(EvalMode::Cached, l);
    let mut cache = model.empty_cache(1);
    for s in (0..p).step_by(l) {
        let e = (s + l).min(p);
        let (out, next) = model.forward(&stream[s..e], Some(&cache))?;
        cache = next.expect("cache returned for cached forward");
        report.dot_products += out.dot_products;
        for off in 0..e - s {
            let loss = -log_softmax_at(out.logits.row(off), stream[s + off + 1] as usize).as_f64();
            report.record(off, loss);
        }
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// One-token-at-a-time decoding state for a cached model.
///
/// History holds the previous piece's `L′` cached rows followed by the rows
/// of the current piece so far; every `L` tokens the newest `L′` rows become
/// the cache of the next piece, exactly as in [`eval_cached`].
pub struct IncrementalDecoder<'m, T: Scalar = f32> {
    model: &'m Model<T>,
    history: Cache<T>,
    in_piece: usize,
    dot_products: u64,
}

impl<'m, T: Scalar> IncrementalDecoder<'m, T> {
    pub fn new(model: &'m Model<T>) -> Result<Self> {
        let cfg = model.config();
        if !cfg.use_cache {
            return Err(Error::contract("incremental decoding needs a model configured with use_cache"));
        }
        Ok(Self {
            model,
            history: Cache::empty(cfg.n_layers, 1, cfg.d_model, cfg.cache_len + cfg.seq_len),
            in_piece: 0,
            dot_products: 0,
        })
    }

    /// Offset of the next token within its piece.
    pub fn offset(&self) -> usize {
        self.in_piece
    }

    pub fn history_len(&self) -> usize {
        self.history.token_count()
    }

    pub fn dot_products(&self) -> u64 {
        self.dot_products
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<T>> {
        let cfg = self.model.config();
        let out = self
            .model
            .forward_with(&[token], 1, Some(&self.history), self.model.position_rule())?;
        self.dot_products += out.dot_products;
        self.history = self.history.append(&out.layer_inputs, 1)?;
        self.in_piece += 1;
        if self.in_piece == cfg.seq_len {
            self.history = self
                .history
                .with_capacity(cfg.cache_len)
                .with_capacity(cfg.cache_len + cfg.seq_len);
            self.in_piece = 0;
        }
        Ok(out.logits.into_data())
    }
}

/// Teacher-forced token-by-token scoring of `stream` through an
/// [`IncrementalDecoder`].
pub fn score_token_by_token<T: Scalar>(model: &Model<T>, stream: &[u32]) -> Result<EvalReport> {
    check_stream(stream)?;
    let started = Instant::now();
    let mut dec = IncrementalDecoder::new(model)?;
    let mut report = EvalReport::new(EvalMode::Cached, model.config().seq_len);
    for p in 0..stream.len() - 1 {
        let off = dec.offset();
        let logits = dec.step(stream[p])?;
        report.record(off, -log_softmax_at(&logits, stream[p + 1] as usize).as_f64());
    }
    report.dot_products = dec.dot_products();
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct GenerateOptions<'a> {
    /// Reuse cached representations (requires `use_cache`); otherwise the
    /// context window is re-encoded for every token.
    pub cached: bool,
    /// Ground-truth continuation fed back instead of the model's choices.
    pub teacher: Option<&'a [u32]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Greedy prediction at every generation step.
    pub predicted: Vec<u32>,
    /// Next-token logits of every generation step.
    pub logits: Vec<Vec<f32>>,
    /// Loss of the teacher tokens, when teacher forcing.
    pub teacher_loss: Option<f64>,
    /// Attention dot products spent on the generation steps only.
    pub dot_products: u64,
    /// Attention dot products of each generation step.
    pub step_dot_products: Vec<u64>,
}

fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy generation of `n_tokens` after `prompt`.
pub fn generate<T: Scalar>(model: &Model<T>, prompt: &[u32], n_tokens: usize, opts: &GenerateOptions) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::contract("generation needs a nonempty prompt"));
    }
    if let Some(t) = opts.teacher {
        if t.len() < n_tokens {
            return Err(Error::contract(format!(
                "teacher continuation has {} tokens, {n_tokens} requested",
                t.len()
            )));
        }
    }
    let mut gen = Generation {
        predicted: Vec::with_capacity(n_tokens),
        logits: Vec::with_capacity(n_tokens),
        teacher_loss: opts.teacher.map(|_| 0.0),
        dot_products: 0,
        step_dot_products: Vec::with_capacity(n_tokens),
    };
    let record = |gen: &mut Generation, logits: Vec<T>, dots: u64, i: usize| -> u32 {
        let pick = argmax(&logits);
        let next = match opts.teacher {
            Some(t) => {
                let loss = -log_softmax_at(&logits, t[i] as usize).as_f64();
                *gen.teacher_loss.as_mut().expect("teacher loss") += loss;
                t[i]
            }
            None => pick,
        };
        gen.predicted.push(pick);
        gen.logits.push(logits.iter().map(|v| v.as_f64() as f32).collect());
        gen.dot_products += dots;
        gen.step_dot_products.push(dots);
        next
    };

    if opts.cached {
        let mut dec = IncrementalDecoder::new(model)?;
        let mut before = 0;
        let mut logits = Vec::new();
        for &t in prompt {
            before = dec.dot_products();
            logits = dec.step(t)?;
        }
        for i in 0..n_tokens {
            let spent = dec.dot_products() - before;
            let next = record(&mut gen, std::mem::take(&mut logits), spent, i);
            if i + 1 < n_tokens {
                before = dec.dot_products();
                logits = dec.step(next)?;
            }
        }
        return Ok(gen);
    }

    let mut context: Vec<u32> = prompt.to_vec();
    for i in 0..n_tokens {
        let window = context_window(model, context.len());
        let out = model.forward_with(&context[window.clone()], 1, None, model.position_rule())?;
        let last = out.logits.shape()[0] - 1;
        let logits = out.logits.row(last).to_vec();
        let next = record(&mut gen, logits, out.dot_products, i);
        context.push(next);
    }
    Ok(gen)
}

/// Inputs re-encoded by non-cached generation when the context holds `t`
/// tokens. Cached models see the previous piece and the current piece so
/// far; others see the last `L` tokens.
pub fn context_window<T: Scalar>(model: &Model<T>, t: usize) -> std::ops::Range<usize> {
    let cfg = model.config();
    if cfg.use_cache {
        let piece_start = (t - 1) / cfg.seq_len * cfg.seq_len;
        piece_start.saturating_sub(cfg.cache_len)..t
    } else {
        t.saturating_sub(cfg.seq_len)..t
    }
}

/// Minimum and maximum number of tokens a prediction can condition on.
pub fn context_window_bounds(seq_len: usize, cache_len: usize, mode: EvalMode) -> Result<(usize, usize)> {
    if seq_len == 0 {
        return Err(Error::contract("L must be positive"));
    }
    match mode {
        EvalMode::Nonoverlapping => Ok((1, seq_len)),
        EvalMode::Sliding { stride } => {
            if stride == 0 || stride > seq_len {
                return Err(Error::contract(format!("stride {stride} outside 1..={seq_len}")));
            }
            Ok((seq_len - stride + 1, seq_len))
        }
        EvalMode::Cached => Ok((cache_len + 1, cache_len + seq_len)),
    }
}

/// Logit row helper for tests and tools: the logits a full forward gives at
/// its last position.
pub fn last_logits<T: Scalar>(logits: &Tensor<T>) -> Vec<T> {
    let rows = logits.shape()[0];
    logits.row(rows - 1).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn tiny(variant: Variant, cache: usize) -> Model<f32> {
        let mut cfg = ModelConfig::desk(11);
        cfg.d_model = 16;
        cfg.d_ff = 32;
        cfg.n_heads = 2;
        cfg.seq_len = 8;
        cfg.variant = variant;
        cfg.use_cache = cache > 0;
        cfg.cache_len = cache;
        Model::init(cfg, 3).unwrap()
    }

    fn stream(n: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 7 + i / 3) % 11) as u32).collect()
    }

    #[test]
    fn sliding_scores_each_prediction_once() {
        for (p, l, s) in [(1, 4, 1), (10, 4, 1), (10, 4, 3), (33, 8, 8), (7, 8, 2), (100, 16, 5)] {
            let ctx = sliding_contexts(p, l, s).unwrap();
            assert_eq!(ctx.iter().map(|c| c.0).collect::<Vec<_>>(), (0..p).collect::<Vec<_>>());
            for &(pos, c) in &ctx {
                assert!(c <= l);
                if pos >= l {
                    assert!(c > l - s, "p={pos} context {c}");
                }
            }
        }
        assert!(sliding_contexts(10, 4, 0).is_err());
        assert!(sliding_contexts(10, 4, 5).is_err());
    }

    #[test]
    fn window_bounds() {
        assert_eq!(
            context_window_bounds(3072, 0, EvalMode::Sliding { stride: 512 }).unwrap(),
            (2561, 3072)
        );
        assert_eq!(context_window_bounds(512, 512, EvalMode::Cached).unwrap(), (513, 1024));
        assert_eq!(context_window_bounds(64, 0, EvalMode::Nonoverlapping).unwrap(), (1, 64));
        assert!(context_window_bounds(8, 0, EvalMode::Sliding { stride: 9 }).is_err());
    }

    #[test]
    fn modes_score_every_prediction() {
        let m = tiny(Variant::Baseline, 0);
        let s = stream(45);
        for r in [
            eval_nonoverlapping(&m, &s).unwrap(),
            eval_sliding(&m, &s, 3).unwrap(),
            eval_sliding(&m, &s, 1).unwrap(),
        ] {
            assert_eq!(r.tokens_scored, 44);
            assert_eq!(r.position_loss.iter().map(|p| p.count).sum::<usize>(), 44);
            assert!((r.position_loss.iter().map(|p| p.sum).sum::<f64>() - r.total_loss).abs() < 1e-9);
        }
        let c = tiny(Variant::Pia, 8);
        assert_eq!(eval_cached(&c, &s).unwrap().tokens_scored, 44);
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let r = eval_nonoverlapping(&tiny(Variant::Pia, 0), &stream(200)).unwrap();
        assert!((r.perplexity() / 11.0 - 1.0).abs() < 0.05, "{}", r.perplexity());
    }

    #[test]
    fn contract_errors() {
        let m = tiny(Variant::Baseline, 0);
        assert!(matches!(eval_cached(&m, &stream(20)), Err(Error::Contract(_))));
        assert!(matches!(eval_sliding(&m, &stream(20), 0), Err(Error::Contract(_))));
        assert!(matches!(eval_nonoverlapping(&m, &[3]), Err(Error::Contract(_))));
        assert!(IncrementalDecoder::new(&m).is_err());
        assert!(generate(&m, &[], 3, &GenerateOptions::default()).is_err());
    }

    #[test]
    fn decoder_rolls_history_every_piece() {
        let m = tiny(Variant::Pia, 5);
        let mut dec = IncrementalDecoder::new(&m).unwrap();
        for (i, t) in stream(20).into_iter().enumerate() {
            dec.step(t).unwrap();
            let done = i + 1;
            let expect = if done % 8 == 0 { 5 } else { 5.min(done / 8 * 8) + done % 8 };
            assert_eq!(dec.history_len(), expect, "after {done} tokens");
        }
    }
}
