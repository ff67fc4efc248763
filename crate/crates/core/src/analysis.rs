//! Analytic statistics, cost accounting and experiment recipes.

use std::fmt;
use std::time::Instant;

use crate::data::{Corpus, TokenMode};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::inference::{eval_cached, eval_nonoverlapping, eval_sliding, EvalReport};
use crate::model::{parameter_count, Model, ModelConfig, Variant};
use crate::training::{Curriculum, TrainConfig, Trainer};

/// An exact nonnegative fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Equality as rationals, regardless of reduction.
    pub fn same_value(&self, other: &Fraction) -> bool {
        self.num as u128 * other.den as u128 == other.num as u128 * self.den as u128
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Fraction of the `L` positions of a window whose prediction sees at least
/// `k` preceding tokens (`inclusive`) or more than `k` of them.
pub fn ctxwin_stats(seq_len: u64, k: u64, inclusive: bool) -> Result<Fraction> {
    if seq_len == 0 {
        return Err(Error::contract("L must be at least 1"));
    }
    let num = if inclusive {
        seq_len.saturating_sub(k)
    } else {
        seq_len.saturating_sub(k + 1)
    };
    Ok(Fraction { num, den: seq_len })
}

/// [`ctxwin_stats`] by enumerating positions.
pub fn ctxwin_brute_force(seq_len: u64, k: u64, inclusive: bool) -> Result<Fraction> {
    if seq_len == 0 {
        return Err(Error::contract("L must be at least 1"));
    }
    // position i is preceded by i tokens of its window
    let num = (0..seq_len).filter(|&i| if inclusive { i >= k } else { i > k }).count() as u64;
    Ok(Fraction { num, den: seq_len })
}

/// Forward shape whose attention cost is being counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostMode {
    /// One subsequence of `L` tokens with no history.
    Nonoverlapping,
    /// `L` new tokens attending to the `L′` cached ones and themselves
    /// (plain `L × L` when the model does not cache).
    Cached,
    /// One generated token at offset `offset` of a piece, after `history`
    /// cached rows.
    GenerationStep { history: usize, offset: usize },
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostMode::Nonoverlapping => write!(f, "nonoverlapping"),
            CostMode::Cached => write!(f, "cached"),
            CostMode::GenerationStep { history, offset } => write!(f, "generation:{history}:{offset}"),
        }
    }
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    /// `nonoverlapping`, `cached`, or `generation[:history[:offset]]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let mut num = |name: &str| -> Result<usize> {
            parts.next().map_or(Ok(0), |p| {
                p.parse()
                    .map_err(|_| Error::config(format!("bad {name} {p:?} in cost mode {s:?}")))
            })
        };
        match head {
            "nonoverlapping" | "baseline" => Ok(CostMode::Nonoverlapping),
            "cached" => Ok(CostMode::Cached),
            "generation" => Ok(CostMode::GenerationStep {
                history: num("history")?,
                offset: num("offset")?,
            }),
            _ => Err(Error::config(format!("unknown cost mode {s:?}"))),
        }
    }
}

/// Analytic cost of one forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub queries: usize,
    pub keys: usize,
    /// Query·key products over all heads and layers.
    pub dot_products: u64,
    /// Attention score entries alive at once in one layer.
    pub score_floats: u64,
    pub parameters: usize,
}

impl CostReport {
    pub fn dims(&self) -> String {
        format!("{}x{}", self.queries, self.keys)
    }
}

/// Attention matrix dimensions and counts for `mode`.
pub fn attention_dims(config: &ModelConfig, mode: CostMode) -> Result<CostReport> {
    config.validate()?;
    let l = config.seq_len;
    let (queries, keys) = match mode {
        CostMode::Nonoverlapping => (l, l),
        CostMode::Cached => (l, config.effective_cache_len() + l),
        CostMode::GenerationStep { history, offset } => {
            if offset >= l {
                return Err(Error::contract(format!("offset {offset} outside a piece of {l}")));
            }
            (1, history + offset + 1)
        }
    };
    let per_layer = (config.n_heads * queries * keys) as u64;
    Ok(CostReport {
        queries,
        keys,
        dot_products: per_layer * config.n_layers as u64,
        score_floats: per_layer,
        parameters: parameter_count(config),
    })
}

/// Attention dot products of generating `n` tokens after a prompt of
/// `prompt_len`, counting for each generated token the forward that
/// produced its logits.
///
/// Cached decoding reads each token once against the cache of the previous
/// piece plus the current piece so far. Without caching, every step
/// re-encodes the window that cached decoding would see (caching models)
/// or the last `L` tokens.
pub fn generation_dot_products(config: &ModelConfig, prompt_len: usize, n: usize, cached: bool) -> Result<u64> {
    config.validate()?;
    if prompt_len == 0 {
        return Err(Error::contract("generation needs a nonempty prompt"));
    }
    let (l, lc) = (config.seq_len, config.effective_cache_len());
    if cached && !config.use_cache {
        return Err(Error::contract("cached generation needs a model configured with use_cache"));
    }
    let per = (config.n_heads * config.n_layers) as u64;
    let mut total = 0u64;
    for i in 0..n {
        // the logits of step i come from reading position p
        let p = prompt_len + i - 1;
        let offset = p % l;
        let history = lc.min(p - offset);
        total += if cached {
            per * (history + offset + 1) as u64
        } else {
            let w = if config.use_cache { history + offset + 1 } else { (p + 1).min(l) } as u64;
            per * w * w
        };
    }
    Ok(total)
}

/// A CSV table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

pub const RECIPES: [&str; 4] = ["length-sweep", "staged-grid", "cache-sweep", "cached-vs-baseline"];

/// Desk-scale knobs shared by all recipes.
#[derive(Clone, Debug, PartialEq)]
pub struct RecipeSettings {
    /// Dimensions and variant-independent options; `L` is overridden per cell.
    pub model: ModelConfig,
    pub lengths: Vec<usize>,
    pub epochs: usize,
    pub tokens_per_batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub dev_frac: f64,
    pub mode: TokenMode,
    /// Cap on dev tokens scored, keeping sliding evaluation affordable.
    pub max_dev_tokens: usize,
}

impl Default for RecipeSettings {
    fn default() -> Self {
        let mut model = ModelConfig::desk(2);
        model.d_model = 32;
        model.d_ff = 128;
        Self {
            model,
            lengths: vec![16, 32, 64],
            epochs: 2,
            tokens_per_batch: 1024,
            lr: 3e-3,
            seed: 1,
            dev_frac: 0.1,
            mode: TokenMode::Char,
            max_dev_tokens: 4096,
        }
    }
}

impl RecipeSettings {
    /// Reads overrides from `kv`: model keys (`n_layers`, `d_model`, ...),
    /// `lengths` as a comma list, `epochs`, `tokens_per_batch`, `lr`,
    /// `seed`, `dev_frac`, `tokenize` and `max_dev_tokens`.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let model = ModelConfig::from_key_values(kv, &d.model)?;
        let lengths = match kv.raw("lengths") {
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::config(format!("bad length {p:?} in lengths")))
                })
                .collect::<Result<_>>()?,
            None => d.lengths,
        };
        Ok(Self {
            model,
            lengths,
            epochs: kv.get_or("epochs", d.epochs)?,
            tokens_per_batch: kv.get_or("tokens_per_batch", d.tokens_per_batch)?,
            lr: kv.get_or("lr", d.lr)?,
            seed: kv.get_or("seed", d.seed)?,
            dev_frac: kv.get_or("dev_frac", d.dev_frac)?,
            mode: kv.get_or("tokenize", d.mode)?,
            max_dev_tokens: kv.get_or("max_dev_tokens", d.max_dev_tokens)?,
        })
    }
}

struct Cell {
    model: Model<f32>,
    dev_ppl: f64,
    eval: EvalReport,
    train_tokens_per_sec: f64,
    train_dot_products: u64,
}

fn run_cell(settings: &RecipeSettings, corpus: &Corpus, model: ModelConfig, curriculum: Curriculum) -> Result<Cell> {
    let mut cfg = TrainConfig::new(model)?;
    cfg.curriculum = curriculum;
    cfg.optimizer.lr = settings.lr;
    cfg.seed = settings.seed;
    cfg.eval_dev = false;
    let started = Instant::now();
    let mut trainer = Trainer::new(cfg, corpus)?;
    let metrics = trainer.run(&mut ())?;
    let secs = started.elapsed().as_secs_f64().max(1e-9);
    let tokens: usize = metrics.iter().map(|m| m.tokens).sum();
    let dots = metrics.iter().map(|m| m.attention_dot_products).sum();
    let model = trainer.into_state().model;
    let eval = if model.config().use_cache {
        eval_cached(&model, dev_slice(settings, corpus))?
    } else {
        eval_nonoverlapping(&model, dev_slice(settings, corpus))?
    };
    Ok(Cell {
        model,
        dev_ppl: eval.perplexity(),
        eval,
        train_tokens_per_sec: tokens as f64 / secs,
        train_dot_products: dots,
    })
}

fn dev_slice<'c>(settings: &RecipeSettings, corpus: &'c Corpus) -> &'c [u32] {
    let ids = corpus.dev.ids();
    &ids[..ids.len().min(settings.max_dev_tokens)]
}

fn tokens_per_sec(report: &EvalReport) -> f64 {
    report.tokens_scored as f64 / report.wall_seconds.max(1e-9)
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

/// Runs a named sweep on `text` and returns one row per cell.
pub fn run_recipe(name: &str, text: &str, settings: &RecipeSettings) -> Result<Table> {
    if !RECIPES.contains(&name) {
        return Err(Error::config(format!(
            "unknown recipe {name:?}; expected one of {}",
            RECIPES.join(", ")
        )));
    }
    if text.trim().is_empty() {
        return Err(Error::config("recipe corpus is empty"));
    }
    if settings.lengths.is_empty() {
        return Err(Error::config("recipe needs at least one subsequence length"));
    }
    let corpus = Corpus::from_single_text(text, settings.mode, settings.dev_frac, 0.0)?;
    let mut base = settings.model.clone();
    base.vocab_size = corpus.vocab.len();
    let tpb = settings.tokens_per_batch;
    let longest = *settings.lengths.iter().max().expect("nonempty lengths");
    let with_len = |variant: Variant, l: usize, cache: usize| ModelConfig {
        variant,
        seq_len: l,
        cache_len: cache,
        use_cache: cache > 0,
        ..base.clone()
    };

    match name {
        "length-sweep" => {
            let mut t = Table::new(&[
                "L",
                "train_tokens_per_sec",
                "train_attention_dot_products",
                "nonoverlapping_ppl",
                "nonoverlapping_tokens_per_sec",
                "sliding_s1_ppl",
                "sliding_s1_tokens_per_sec",
            ]);
            for &l in &settings.lengths {
                let cell = run_cell(
                    settings,
                    &corpus,
                    with_len(Variant::Baseline, l, 0),
                    Curriculum::single(l, settings.epochs, tpb)?,
                )?;
                let sliding = eval_sliding(&cell.model, dev_slice(settings, &corpus), 1)?;
                t.push(vec![
                    l.to_string(),
                    f(cell.train_tokens_per_sec),
                    cell.train_dot_products.to_string(),
                    f(cell.dev_ppl),
                    f(tokens_per_sec(&cell.eval)),
                    f(sliding.perplexity()),
                    f(tokens_per_sec(&sliding)),
                ]);
            }
            Ok(t)
        }
        "staged-grid" => {
            let mut t = Table::new(&["initial_L", "switch_epoch", "final_L", "dev_ppl", "train_attention_dot_products"]);
            let mut cells = vec![(longest, 0, Curriculum::single(longest, settings.epochs, tpb)?)];
            for &l1 in settings.lengths.iter().filter(|&&l| l < longest) {
                for switch in 1..settings.epochs {
                    cells.push((l1, switch, Curriculum::two_stage(l1, switch, longest, settings.epochs, tpb)?));
                }
            }
            for (l1, switch, curriculum) in cells {
                let cell = run_cell(settings, &corpus, with_len(Variant::Baseline, longest, 0), curriculum)?;
                t.push(vec![
                    l1.to_string(),
                    switch.to_string(),
                    longest.to_string(),
                    f(cell.dev_ppl),
                    cell.train_dot_products.to_string(),
                ]);
            }
            Ok(t)
        }
        "cache-sweep" => {
            let mut t = Table::new(&[
                "L",
                "L_cache",
                "train_tokens_per_sec",
                "train_attention_dot_products",
                "cached_ppl",
                "eval_tokens_per_sec",
                "eval_attention_dot_products",
            ]);
            for &l in &settings.lengths {
                let cell = run_cell(
                    settings,
                    &corpus,
                    with_len(Variant::Pia, l, l),
                    Curriculum::single(l, settings.epochs, tpb)?,
                )?;
                t.push(vec![
                    l.to_string(),
                    l.to_string(),
                    f(cell.train_tokens_per_sec),
                    cell.train_dot_products.to_string(),
                    f(cell.dev_ppl),
                    f(tokens_per_sec(&cell.eval)),
                    cell.eval.dot_products.to_string(),
                ]);
            }
            Ok(t)
        }
        _ => {
            let shortest = *settings.lengths.iter().min().expect("nonempty lengths");
            let mut t = Table::new(&[
                "model",
                "L",
                "L_cache",
                "train_tokens_per_sec",
                "train_attention_dot_products",
                "dev_ppl",
                "eval_tokens_per_sec",
                "eval_attention_dot_products",
            ]);
            let baseline = run_cell(
                settings,
                &corpus,
                with_len(Variant::Baseline, longest, 0),
                Curriculum::single(longest, settings.epochs, tpb)?,
            )?;
            let short_cfg = with_len(Variant::Pia, shortest, shortest);
            let curriculum = if settings.epochs > 1 && shortest > 2 {
                Curriculum::two_stage((shortest / 2).max(2), settings.epochs / 2, shortest, settings.epochs, tpb)?
            } else {
                Curriculum::single(shortest, settings.epochs, tpb)?
            };
            let short = run_cell(settings, &corpus, short_cfg, curriculum)?;
            for (label, l, lc, c) in [
                ("baseline", longest, 0, &baseline),
                ("short-cached", shortest, shortest, &short),
            ] {
                t.push(vec![
                    label.to_string(),
                    l.to_string(),
                    lc.to_string(),
                    f(c.train_tokens_per_sec),
                    c.train_dot_products.to_string(),
                    f(c.dev_ppl),
                    f(tokens_per_sec(&c.eval)),
                    c.eval.dot_products.to_string(),
                ]);
            }
            Ok(t)
        }
    }
}
