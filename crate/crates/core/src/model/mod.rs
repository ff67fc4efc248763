//! Transformer language model with the baseline and position-infused
//! attention paths, optional previous-subsequence cache, and checkpoints.

mod cache;
pub mod checkpoint;
mod config;
mod params;
mod position;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use cache::Cache;
pub use config::{Activation, ModelConfig, NormPlacement, Variant, PRESET_VOCAB};
pub use params::{parameter_count, LayerIds, ParamLayout, Parameters};
pub use position::{sinusoidal_pe, PositionTable};

use crate::autograd::{Mask, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Where position embeddings are added during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionRule {
    /// Added once to the word embeddings of the new tokens, indices
    /// `0..n` regardless of any history.
    Embedding,
    /// Added to queries and keys at every layer. History rows take indices
    /// `0..c` and new tokens `c..c+n`.
    Infused,
    /// No position embeddings anywhere.
    Omitted,
}

/// Result of one forward pass over `groups` streams of `n` new tokens.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar = f32> {
    /// `[groups·n × V]`
    pub logits: Tensor<T>,
    /// Input of every layer for the new tokens, `[groups·n × d]` each.
    pub layer_inputs: Vec<Tensor<T>>,
    /// Attention query·key products computed.
    pub dot_products: u64,
}

/// Loss, parameter gradients and side outputs of one training step.
pub struct StepOutput<T: Scalar = f32> {
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
    pub layer_inputs: Vec<Tensor<T>>,
    pub dot_products: u64,
}

/// A configured model with its weights. Immutable during inference, so one
/// instance can serve several evaluation threads.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    params: Parameters<T>,
    layout: ParamLayout,
    positions: PositionTable<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        let layout = ParamLayout::new(&config);
        let positions = PositionTable::new(config.seq_len + config.cache_len, config.d_model);
        Ok(Self {
            config,
            params,
            layout,
            positions,
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Replaces the sinusoidal table, e.g. with [`PositionTable::zeros`].
    pub fn with_positions(mut self, positions: PositionTable<T>) -> Self {
        self.positions = positions;
        self
    }

    /// Same weights and architecture at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model::new(self.config.clone(), self.params.cast()).expect("layout unchanged by cast")
    }

    /// Same weights under a different configuration (variant, cache, lengths).
    pub fn reconfigured(&self, config: ModelConfig) -> Result<Self> {
        Model::new(config, self.params.clone())
    }

    /// Empty cache for `groups` streams holding up to `L′` rows.
    pub fn empty_cache(&self, groups: usize) -> Cache<T> {
        Cache::empty(self.config.n_layers, groups, self.config.d_model, self.config.cache_len)
    }

    /// Position rule implied by the configured variant.
    pub fn position_rule(&self) -> PositionRule {
        match self.config.variant {
            Variant::Baseline => PositionRule::Embedding,
            Variant::Pia => PositionRule::Infused,
        }
    }

    /// Baseline forward: word embeddings plus positions `0..n`, causal
    /// attention over the `n ≤ L` tokens only.
    pub fn forward_baseline(&self, tokens: &[u32]) -> Result<ForwardOutput<T>> {
        self.check_len(tokens.len())?;
        self.forward_with(tokens, 1, None, PositionRule::Embedding)
    }

    /// Position-infused forward over `n ≤ L` new tokens attending to `cache`.
    /// Returns the logits and the cache for the next subsequence.
    pub fn forward_pia(&self, tokens: &[u32], cache: &Cache<T>) -> Result<(ForwardOutput<T>, Cache<T>)> {
        self.check_len(tokens.len())?;
        self.forward_cached(tokens, cache, PositionRule::Infused)
    }

    /// Baseline position handling with a cache attached: stored rows carry
    /// the positions they were encoded with, new tokens restart at `0`.
    pub fn forward_cache_no_pia(
        &self,
        tokens: &[u32],
        cache: &Cache<T>,
    ) -> Result<(ForwardOutput<T>, Cache<T>)> {
        self.check_len(tokens.len())?;
        self.forward_cached(tokens, cache, PositionRule::Embedding)
    }

    /// Forward with the configured variant, consuming and returning a cache
    /// when the model uses one.
    pub fn forward(&self, tokens: &[u32], cache: Option<&Cache<T>>) -> Result<(ForwardOutput<T>, Option<Cache<T>>)> {
        self.check_len(tokens.len())?;
        match cache {
            Some(c) => {
                let (out, next) = self.forward_cached(tokens, c, self.position_rule())?;
                Ok((out, Some(next)))
            }
            None => Ok((self.forward_with(tokens, 1, None, self.position_rule())?, None)),
        }
    }

    fn forward_cached(
        &self,
        tokens: &[u32],
        cache: &Cache<T>,
        rule: PositionRule,
    ) -> Result<(ForwardOutput<T>, Cache<T>)> {
        if cache.token_count() > cache.capacity() {
            return Err(Error::contract("cache holds more rows than its capacity"));
        }
        let groups = cache.groups();
        let out = self.forward_with(tokens, groups, Some(cache), rule)?;
        let next = cache.append(&out.layer_inputs, tokens.len() / groups)?;
        Ok((out, next))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.config.seq_len {
            return Err(Error::contract(format!(
                "expected 1..={} tokens, got {n}",
                self.config.seq_len
            )));
        }
        Ok(())
    }

    /// Forward over `groups` equal-length streams laid out back to back in
    /// `tokens`, with optional history and no length limit.
    pub fn forward_with(
        &self,
        tokens: &[u32],
        groups: usize,
        history: Option<&Cache<T>>,
        rule: PositionRule,
    ) -> Result<ForwardOutput<T>> {
        let tape = Tape::new();
        let vars = self.param_vars(&tape, false);
        let (logits, layer_inputs) = self.forward_tape(&tape, &vars, tokens, groups, history, rule, None)?;
        let logits = (*logits.value()).clone();
        Ok(ForwardOutput {
            logits,
            layer_inputs,
            dot_products: tape.dot_products(),
        })
    }

    /// Mean next-token loss of `targets` and its gradient for every
    /// parameter. History rows are constants: no gradient flows into them.
    pub fn loss_and_grads(
        &self,
        tokens: &[u32],
        targets: &[u32],
        groups: usize,
        history: Option<&Cache<T>>,
        rule: PositionRule,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<T>> {
        let tape = Tape::new();
        let vars = self.param_vars(&tape, true);
        let (logits, layer_inputs) = self.forward_tape(&tape, &vars, tokens, groups, history, rule, dropout_rng)?;
        let loss = logits.cross_entropy(targets)?;
        let loss_value = loss.value().data()[0];
        let grads = tape.backward(loss)?;
        let grads = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
        Ok(StepOutput {
            loss: loss_value,
            grads,
            layer_inputs,
            dot_products: tape.dot_products(),
        })
    }

    /// Leaves for every parameter tensor, in layout order.
    pub fn param_vars<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Records the forward pass on `tape` using `vars` as the weights.
    /// Returns the logits node and the per-layer inputs of the new tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        vars: &[Var<'t, T>],
        tokens: &[u32],
        groups: usize,
        history: Option<&Cache<T>>,
        rule: PositionRule,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t, T>, Vec<Tensor<T>>)> {
        let cfg = &self.config;
        if groups == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(groups) {
            return Err(Error::contract(format!(
                "{} tokens cannot be split into {groups} equal streams",
                tokens.len()
            )));
        }
        if vars.len() != self.params.len() {
            return Err(Error::contract("parameter variable count does not match layout"));
        }
        let n = tokens.len() / groups;
        let c = match history {
            Some(h) => {
                if h.n_layers() != cfg.n_layers {
                    return Err(Error::contract(format!(
                        "cache has {} layers, model has {}",
                        h.n_layers(),
                        cfg.n_layers
                    )));
                }
                if h.groups() != groups {
                    return Err(Error::contract(format!(
                        "cache has {} streams, batch has {groups}",
                        h.groups()
                    )));
                }
                h.token_count()
            }
            None => 0,
        };
        let eps = T::lit(cfg.layer_norm_eps);
        let dropout = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };
        let mask = Mask::causal_with_cache(n, c);

        let mut x = tape.embedding(vars[self.layout.embed], tokens)?;
        if rule == PositionRule::Embedding {
            let p = tape.constant(self.positions.tiled(0, n, groups)?);
            x = x.add(p)?;
        }
        if let Some(rng) = dropout_rng.as_deref_mut() {
            x = apply_dropout(x, dropout, rng)?;
        }
        let (p_new, p_all) = if rule == PositionRule::Infused {
            (
                Some(self.positions.tiled(c, n, groups)?),
                Some(self.positions_with_history(c, n, groups)?),
            )
        } else {
            (None, None)
        };

        let mut layer_inputs = Vec::with_capacity(cfg.n_layers);
        for (l, ids) in self.layout.layers.iter().enumerate() {
            layer_inputs.push((*x.value()).clone());
            let hist = match history {
                Some(h) if c > 0 => Some(tape.constant(h.layer(l).clone())),
                _ => None,
            };
            let pre = cfg.norm == NormPlacement::Pre;
            let norm = |v: Var<'t, T>| -> Result<Var<'t, T>> {
                if pre {
                    v.layer_norm(vars[ids.attn_norm_gain], vars[ids.attn_norm_bias], eps)
                } else {
                    Ok(v)
                }
            };
            let h_new = norm(x)?;
            let h_all = match hist {
                Some(hv) => tape.concat_groups(norm(hv)?, h_new, groups)?,
                None => h_new,
            };
            let (q_in, k_in) = match (&p_new, &p_all) {
                (Some(pn), Some(pa)) => (
                    h_new.add(tape.constant(pn.clone()))?,
                    h_all.add(tape.constant(pa.clone()))?,
                ),
                _ => (h_new, h_all),
            };
            let q = q_in.matmul(vars[ids.wq])?.add_row(vars[ids.bq])?;
            let k = k_in.matmul(vars[ids.wk])?.add_row(vars[ids.bk])?;
            let v = h_all.matmul(vars[ids.wv])?.add_row(vars[ids.bv])?;
            let attn = tape.attention(q, k, v, &mask, groups, cfg.n_heads)?;
            let mut o = attn.matmul(vars[ids.wo])?.add_row(vars[ids.bo])?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                o = apply_dropout(o, dropout, rng)?;
            }
            x = x.add(o)?;
            if !pre {
                x = x.layer_norm(vars[ids.attn_norm_gain], vars[ids.attn_norm_bias], eps)?;
            }

            let h = if pre {
                x.layer_norm(vars[ids.ff_norm_gain], vars[ids.ff_norm_bias], eps)?
            } else {
                x
            };
            let hidden = h.matmul(vars[ids.w1])?.add_row(vars[ids.b1])?;
            let hidden = match cfg.activation {
                Activation::Relu => hidden.relu(),
                Activation::Gelu => hidden.gelu(),
            };
            let mut f = hidden.matmul(vars[ids.w2])?.add_row(vars[ids.b2])?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = apply_dropout(f, dropout, rng)?;
            }
            x = x.add(f)?;
            if !pre {
                x = x.layer_norm(vars[ids.ff_norm_gain], vars[ids.ff_norm_bias], eps)?;
            }
        }
        if let Some((g, b)) = self.layout.final_norm {
            x = x.layer_norm(vars[g], vars[b], eps)?;
        }
        let logits = x.matmul_nt(vars[self.layout.softmax_weight()])?;
        Ok((logits, layer_inputs))
    }

    /// Positions `0..c+n` laid out per group: history rows then new rows.
    fn positions_with_history(&self, c: usize, n: usize, groups: usize) -> Result<Tensor<T>> {
        self.positions.tiled(0, c + n, groups)
    }
}

fn apply_dropout<'t, T: Scalar>(x: Var<'t, T>, p: f32, rng: &mut ChaCha8Rng) -> Result<Var<'t, T>> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p as f64));
    let shape = x.shape();
    let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f32>() < p { T::zero() } else { keep });
    x.mul_const(mask)
}
