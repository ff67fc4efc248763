use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, NormPlacement};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Uniform bound for embedding (and untied output) rows. Kept small so an
/// untrained model predicts close to uniformly.
const EMBED_INIT: f64 = 0.02;

/// Indices of one layer's tensors within [`Parameters`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub attn_norm_gain: usize,
    pub attn_norm_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ff_norm_gain: usize,
    pub ff_norm_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Where every named tensor lives; a pure function of the configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub embed: usize,
    pub layers: Vec<LayerIds>,
    pub final_norm: Option<(usize, usize)>,
    pub output: Option<usize>,
    pub specs: Vec<(String, Vec<usize>)>,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            specs.push((name, shape));
            specs.len() - 1
        };
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let embed = add("embed.weight".into(), vec![v, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIds {
                attn_norm_gain: add(p("attn_norm.gain"), vec![d]),
                attn_norm_bias: add(p("attn_norm.bias"), vec![d]),
                wq: add(p("attn.q.weight"), vec![d, d]),
                bq: add(p("attn.q.bias"), vec![d]),
                wk: add(p("attn.k.weight"), vec![d, d]),
                bk: add(p("attn.k.bias"), vec![d]),
                wv: add(p("attn.v.weight"), vec![d, d]),
                bv: add(p("attn.v.bias"), vec![d]),
                wo: add(p("attn.out.weight"), vec![d, d]),
                bo: add(p("attn.out.bias"), vec![d]),
                ff_norm_gain: add(p("ff_norm.gain"), vec![d]),
                ff_norm_bias: add(p("ff_norm.bias"), vec![d]),
                w1: add(p("ff.in.weight"), vec![d, ff]),
                b1: add(p("ff.in.bias"), vec![ff]),
                w2: add(p("ff.out.weight"), vec![ff, d]),
                b2: add(p("ff.out.bias"), vec![d]),
            });
        }
        let final_norm = match cfg.norm {
            NormPlacement::Pre => Some((
                add("final_norm.gain".into(), vec![d]),
                add("final_norm.bias".into(), vec![d]),
            )),
            NormPlacement::Post => None,
        };
        let output = (!cfg.tie_embeddings).then(|| add("output.weight".into(), vec![v, d]));
        Self {
            embed,
            layers,
            final_norm,
            output,
            specs,
        }
    }

    /// Index of the matrix used for the output softmax.
    pub fn softmax_weight(&self) -> usize {
        self.output.unwrap_or(self.embed)
    }
}

/// Total trainable scalars for `cfg`, computed without allocating.
///
/// The attention variant does not enter: position-infused attention reuses
/// the baseline's weights unchanged.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let per_layer = 4 * (d * d + d) + 2 * d * ff + ff + d + 4 * d;
    let final_norm = if cfg.norm == NormPlacement::Pre { 2 * d } else { 0 };
    let output = if cfg.tie_embeddings { 0 } else { v * d };
    v * d + cfg.n_layers * per_layer + final_norm + output
}

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    /// Scaled-uniform initialisation: weights `U(±1/√fan_in)`, biases zero,
    /// norm gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let layout = ParamLayout::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(layout.specs.len());
        let mut tensors = Vec::with_capacity(layout.specs.len());
        for (name, shape) in &layout.specs {
            let t = if name.ends_with(".gain") {
                Tensor::full(shape, T::one())
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let bound = if name == "embed.weight" || name == "output.weight" {
                    EMBED_INIT
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
            };
            names.push(name.clone());
            tensors.push(t);
        }
        Self { names, tensors }
    }

    pub fn from_named(named: Vec<(String, Tensor<T>)>) -> Self {
        let (names, tensors) = named.into_iter().unzip();
        Self { names, tensors }
    }

    /// Checks names and shapes against the layout for `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = ParamLayout::new(cfg);
        if layout.specs.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, found {}",
                layout.specs.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (have_name, t)) in layout.specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::Dimension {
                    op: "parameters",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Variant;

    #[test]
    fn count_matches_allocation() {
        for tie in [true, false] {
            for norm in [NormPlacement::Pre, NormPlacement::Post] {
                let mut cfg = ModelConfig::desk(11);
                cfg.tie_embeddings = tie;
                cfg.norm = norm;
                let p = Parameters::<f32>::init(&cfg, 0);
                assert_eq!(p.count(), parameter_count(&cfg));
                p.check_layout(&cfg).unwrap();
            }
        }
    }

    #[test]
    fn variant_does_not_change_parameters() {
        let mut cfg = ModelConfig::desk(9);
        let base = Parameters::<f32>::init(&cfg, 3);
        cfg.variant = Variant::Pia;
        cfg.use_cache = true;
        cfg.cache_len = 64;
        assert_eq!(Parameters::<f32>::init(&cfg, 3), base);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::desk(9);
        assert_eq!(Parameters::<f32>::init(&cfg, 1), Parameters::<f32>::init(&cfg, 1));
        assert_ne!(Parameters::<f32>::init(&cfg, 1), Parameters::<f32>::init(&cfg, 2));
    }
}
