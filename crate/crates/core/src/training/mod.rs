//! Training loop with a staged subsequence-length curriculum, constant
//! tokens per batch, and Adam state carried across stage boundaries.

mod curriculum;
mod optim;
mod state;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use curriculum::{Curriculum, Stage};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, LrSchedule, OptimizerState};
pub use state::{load_state, read_state, save_state, write_state, TrainState};

use crate::data::{segment, BatchPlan, Corpus, TokenStream};
use crate::error::{Error, Result};
use crate::inference::eval_nonoverlapping;
use crate::kv::KeyValues;
use crate::model::{Cache, Model, ModelConfig};
use crate::tensor::Tensor;

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub curriculum: Curriculum,
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Score the dev stream after every epoch.
    pub eval_dev: bool,
}

impl TrainConfig {
    /// Defaults around `model`: one stage of 5 epochs at the model's `L`,
    /// 16 rows per batch, shuffling unless the model caches.
    pub fn new(model: ModelConfig) -> Result<Self> {
        let curriculum = Curriculum::single(model.seq_len, 5, model.seq_len * 16)?;
        Ok(Self {
            shuffle: !model.use_cache,
            model,
            curriculum,
            optimizer: AdamConfig::default(),
            schedule: LrSchedule::Constant,
            clip_norm: 1.0,
            seed: 1,
            eval_dev: true,
        })
    }

    /// Reads a run configuration. Model keys start from the `preset`
    /// (default `desk`); `stages` is `L:epochs,...` or else one stage of
    /// `epochs` at `L`.
    pub fn from_key_values(kv: &KeyValues, vocab_size: usize) -> Result<Self> {
        let preset: String = kv.get_or("preset", "desk".to_string())?;
        let base = ModelConfig::preset(&preset, vocab_size)
            .ok_or_else(|| Error::config(format!("unknown preset {preset:?}")))?;
        let mut base_kv = kv.clone();
        base_kv.insert("vocab_size", vocab_size);
        let model = ModelConfig::from_key_values(&base_kv, &base)?;
        let tpb: usize = kv.get_or("tokens_per_batch", model.seq_len * 16)?;
        let curriculum = match kv.raw("stages") {
            Some(s) => Curriculum::parse(s, tpb)?,
            None => Curriculum::single(model.seq_len, kv.get_or("epochs", 5)?, tpb)?,
        };
        let defaults = AdamConfig::default();
        let cfg = Self {
            optimizer: AdamConfig {
                lr: kv.get_or("lr", defaults.lr)?,
                beta1: kv.get_or("beta1", defaults.beta1)?,
                beta2: kv.get_or("beta2", defaults.beta2)?,
                eps: kv.get_or("adam_eps", defaults.eps)?,
            },
            schedule: kv.get_or("schedule", LrSchedule::Constant)?,
            clip_norm: kv.get_or("clip_norm", 1.0)?,
            seed: kv.get_or("seed", 1)?,
            shuffle: kv.get_bool("shuffle")?.unwrap_or(!model.use_cache),
            eval_dev: kv.get_bool("eval_dev")?.unwrap_or(true),
            model,
            curriculum,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.model.to_key_values();
        kv.insert("stages", self.curriculum.render());
        kv.insert("tokens_per_batch", self.curriculum.tokens_per_batch());
        kv.insert("lr", self.optimizer.lr);
        kv.insert("beta1", self.optimizer.beta1);
        kv.insert("beta2", self.optimizer.beta2);
        kv.insert("adam_eps", self.optimizer.eps);
        kv.insert("schedule", self.schedule);
        kv.insert("clip_norm", self.clip_norm);
        kv.insert("seed", self.seed);
        kv.insert("shuffle", self.shuffle);
        kv.insert("eval_dev", self.eval_dev);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.use_cache && self.shuffle {
            return Err(Error::config(
                "cached training needs contiguous unshuffled batches; set shuffle=false",
            ));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} must be positive", self.optimizer.lr)));
        }
        Ok(())
    }
}

/// Summary of one finished epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// 0-based stage index.
    pub stage: usize,
    pub seq_len: usize,
    /// Mean per-token training loss (nats).
    pub train_loss: f64,
    pub dev_ppl: Option<f64>,
    pub wall_seconds: f64,
    /// Attention dot products spent on training forwards.
    pub attention_dot_products: u64,
    pub tokens: usize,
    pub steps: usize,
}

pub const METRICS_HEADER: &str = "epoch,stage,L,train_loss,dev_ppl,wall_seconds,attention_dot_products";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{}",
            self.epoch,
            self.stage,
            self.seq_len,
            self.train_loss,
            self.dev_ppl.map(|p| p.to_string()).unwrap_or_default(),
            self.wall_seconds,
            self.attention_dot_products
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("metrics row {line:?} has {} fields", f.len())));
        }
        let bad = |what: &str| Error::Format(format!("metrics row {line:?}: bad {what}"));
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad("epoch"))?,
            stage: f[1].parse().map_err(|_| bad("stage"))?,
            seq_len: f[2].parse().map_err(|_| bad("L"))?,
            train_loss: f[3].parse().map_err(|_| bad("train_loss"))?,
            dev_ppl: if f[4].is_empty() {
                None
            } else {
                Some(f[4].parse().map_err(|_| bad("dev_ppl"))?)
            },
            wall_seconds: f[5].parse().map_err(|_| bad("wall_seconds"))?,
            attention_dot_products: f[6].parse().map_err(|_| bad("attention_dot_products"))?,
            tokens: 0,
            steps: 0,
        })
    }
}

/// Appends rows to a metrics CSV, writing the header only to a new file.
pub fn append_metrics(path: impl AsRef<Path>, rows: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// What a training step exposes to observers.
pub struct StepInfo<'a> {
    /// 0-based epoch.
    pub epoch: usize,
    pub stage: usize,
    /// Index of the step within the epoch.
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Cache the step attended to, for cached models.
    pub cache_in: Option<&'a Cache<f32>>,
    /// Layer inputs of the step's new tokens.
    pub layer_inputs: &'a [Tensor<f32>],
    /// Gradients after clipping.
    pub grads: &'a [Tensor<f32>],
}

pub trait TrainObserver {
    fn on_step(&mut self, _info: &StepInfo<'_>) {}
    fn on_epoch_end(&mut self, _metrics: &EpochMetrics, _optimizer: &OptimizerState) {}
}

impl TrainObserver for () {}

/// Per-epoch seed for shuffling and dropout.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Drives a curriculum epoch by epoch.
pub struct Trainer<'c> {
    config: TrainConfig,
    corpus: &'c Corpus,
    state: TrainState,
}

impl<'c> Trainer<'c> {
    /// Fresh run with weights initialised from `config.seed`.
    pub fn new(config: TrainConfig, corpus: &'c Corpus) -> Result<Self> {
        let model = Model::init(config.model.clone(), config.seed)?;
        Self::with_model(config, corpus, model)
    }

    /// Fresh optimizer state around existing weights.
    pub fn with_model(config: TrainConfig, corpus: &'c Corpus, model: Model<f32>) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::config("model configuration differs from the training configuration"));
        }
        if corpus.vocab.len() != config.model.vocab_size {
            return Err(Error::config(format!(
                "vocabulary has {} entries, model expects {}",
                corpus.vocab.len(),
                config.model.vocab_size
            )));
        }
        let optimizer = OptimizerState::new(model.params().tensors());
        Ok(Self {
            config,
            corpus,
            state: TrainState {
                model,
                optimizer,
                next_epoch: 0,
                metrics: Vec::new(),
            },
        })
    }

    /// Continues a saved run at its next epoch.
    pub fn resume(config: TrainConfig, corpus: &'c Corpus, state: TrainState) -> Result<Self> {
        let mut t = Self::with_model(config, corpus, state.model.clone())?;
        if state.optimizer.m.len() != state.model.params().len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        t.state = state;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn model(&self) -> &Model<f32> {
        &self.state.model
    }

    pub fn is_finished(&self) -> bool {
        self.state.next_epoch >= self.config.curriculum.total_epochs()
    }

    /// Runs the next epoch. Returns `None` once the curriculum is done.
    pub fn run_epoch(&mut self, observer: &mut dyn TrainObserver) -> Result<Option<EpochMetrics>> {
        let epoch = self.state.next_epoch;
        let Some((stage_idx, stage)) = self.config.curriculum.stage_at(epoch) else {
            return Ok(None);
        };
        let stage = *stage;
        if epoch > 0 {
            if let Some((prev, _)) = self.config.curriculum.stage_at(epoch - 1) {
                if prev != stage_idx {
                    log::info!(
                        "epoch {}: switching to stage {stage_idx} (L={}, batch {})",
                        epoch + 1,
                        stage.seq_len,
                        stage.batch_size
                    );
                }
            }
        }
        let started = Instant::now();
        let seed = epoch_seed(self.config.seed, epoch);
        let plan = BatchPlan {
            seq_len: stage.seq_len,
            batch_size: stage.batch_size,
            shuffle: self.config.shuffle,
        };
        let batches = segment(&self.corpus.train, &plan, seed)?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let use_dropout = self.config.model.dropout > 0.0;
        let use_cache = self.config.model.use_cache;
        let rule = self.state.model.position_rule();
        // a fresh cache at every epoch, hence at every stage switch too
        let mut cache = self.state.model.empty_cache(stage.batch_size);

        let (mut loss_sum, mut tokens, mut dots, mut steps) = (0.0f64, 0usize, 0u64, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            if !batch.is_full(&plan) {
                continue;
            }
            let inputs = batch.flat_inputs();
            let targets = batch.flat_targets();
            let out = self.state.model.loss_and_grads(
                &inputs,
                &targets,
                stage.batch_size,
                use_cache.then_some(&cache),
                rule,
                use_dropout.then_some(&mut dropout_rng),
            )?;
            let loss = out.loss as f64;
            let mut grads = out.grads;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "epoch {} step {bi}: loss {loss}, gradients finite: {}",
                    epoch + 1,
                    grads.iter().all(Tensor::all_finite)
                )));
            }
            let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm);
            observer.on_step(&StepInfo {
                epoch,
                stage: stage_idx,
                step: steps,
                loss,
                grad_norm,
                cache_in: use_cache.then_some(&cache),
                layer_inputs: &out.layer_inputs,
                grads: &grads,
            });
            let lr = self
                .config
                .schedule
                .lr_at(self.config.optimizer.lr, self.state.optimizer.step);
            adam_step(
                self.state.model.params_mut().tensors_mut(),
                &grads,
                &mut self.state.optimizer,
                lr,
                &self.config.optimizer,
            )?;
            if !self.state.model.params().all_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {} step {bi}: parameters became non-finite (loss {loss}, grad norm {grad_norm})",
                    epoch + 1
                )));
            }
            if use_cache {
                cache = cache.append(&out.layer_inputs, stage.seq_len)?;
            }
            loss_sum += loss * inputs.len() as f64;
            tokens += inputs.len();
            dots += out.dot_products;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::contract(format!(
                "training stream yields no full batch of {} tokens",
                plan.tokens_per_batch()
            )));
        }

        let dev_ppl = if self.config.eval_dev && self.corpus.dev.len() >= 2 {
            Some(eval_nonoverlapping(&self.state.model, self.corpus.dev.ids())?.perplexity())
        } else {
            None
        };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            stage: stage_idx,
            seq_len: stage.seq_len,
            train_loss: loss_sum / tokens as f64,
            dev_ppl,
            wall_seconds: started.elapsed().as_secs_f64(),
            attention_dot_products: dots,
            tokens,
            steps,
        };
        log::info!(
            "epoch {} stage {} L={} train_loss {:.4} dev_ppl {}",
            metrics.epoch,
            metrics.stage,
            metrics.seq_len,
            metrics.train_loss,
            metrics.dev_ppl.map(|p| format!("{p:.3}")).unwrap_or_else(|| "-".into())
        );
        self.state.next_epoch += 1;
        self.state.metrics.push(metrics.clone());
        observer.on_epoch_end(&metrics, &self.state.optimizer);
        Ok(Some(metrics))
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while let Some(m) = self.run_epoch(observer)? {
            out.push(m);
        }
        Ok(out)
    }
}

/// Trains a fresh model through the whole curriculum.
pub fn train(config: TrainConfig, corpus: &Corpus) -> Result<(Model<f32>, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(config, corpus)?;
    let metrics = t.run(&mut ())?;
    Ok((t.into_state().model, metrics))
}

/// Dev perplexity of a model before any training step.
pub fn untrained_dev_ppl(config: &TrainConfig, dev: &TokenStream) -> Result<f64> {
    let model: Model<f32> = Model::init(config.model.clone(), config.seed)?;
    Ok(eval_nonoverlapping(&model, dev.ids())?.perplexity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenMode;
    use crate::model::Variant;

    fn toy_corpus() -> Corpus {
        let text = "the quick brown fox jumps over the lazy dog. ".repeat(240);
        Corpus::from_single_text(&text, TokenMode::Char, 0.1, 0.0).unwrap()
    }

    fn tiny(corpus: &Corpus, variant: Variant, cache: bool) -> TrainConfig {
        let mut model = ModelConfig::desk(corpus.vocab.len());
        model.d_model = 32;
        model.d_ff = 64;
        model.seq_len = 16;
        model.variant = variant;
        model.use_cache = cache;
        model.cache_len = if cache { 16 } else { 0 };
        let mut cfg = TrainConfig::new(model).unwrap();
        cfg.curriculum = Curriculum::single(16, 2, 128).unwrap();
        cfg.optimizer.lr = 3e-3;
        cfg
    }

    #[test]
    fn loss_decreases_over_two_epochs() {
        let corpus = toy_corpus();
        for (variant, cache) in [(Variant::Baseline, false), (Variant::Pia, true)] {
            let (_, m) = train(tiny(&corpus, variant, cache), &corpus).unwrap();
            assert_eq!(m.len(), 2);
            assert!(m[1].train_loss < m[0].train_loss, "{variant}: {m:?}");
        }
    }

    #[test]
    fn cache_with_shuffle_is_a_config_error() {
        let corpus = toy_corpus();
        let mut cfg = tiny(&corpus, Variant::Pia, true);
        cfg.shuffle = true;
        assert!(matches!(Trainer::new(cfg, &corpus), Err(Error::Config(_))));
    }

    #[test]
    fn nan_learning_rate_aborts() {
        let corpus = toy_corpus();
        let mut cfg = tiny(&corpus, Variant::Baseline, false);
        cfg.optimizer.lr = f64::INFINITY;
        let mut t = Trainer::new(cfg, &corpus).unwrap();
        assert!(matches!(t.run_epoch(&mut ()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let corpus = toy_corpus();
        let mut cfg = tiny(&corpus, Variant::Pia, true);
        cfg.shuffle = false;
        cfg.schedule = LrSchedule::Cosine { total_steps: 100 };
        let kv = KeyValues::parse(&cfg.to_key_values().render()).unwrap();
        let back = TrainConfig::from_key_values(&kv, corpus.vocab.len()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn metrics_rows_parse_back() {
        let m = EpochMetrics {
            epoch: 3,
            stage: 1,
            seq_len: 64,
            train_loss: 1.25,
            dev_ppl: Some(3.5),
            wall_seconds: 0.5,
            attention_dot_products: 99,
            tokens: 0,
            steps: 0,
        };
        assert_eq!(EpochMetrics::parse_csv_row(&m.csv_row()).unwrap(), m);
        let none = EpochMetrics { dev_ppl: None, ..m };
        assert_eq!(EpochMetrics::parse_csv_row(&none.csv_row()).unwrap(), none);
    }
}
