use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Stored layer inputs of previously processed tokens, one block per layer.
///
/// Each layer tensor is `[groups·token_count × d_model]`, grouped by stream.
/// Rows never contain position embeddings under position-infused attention,
/// so they can be re-positioned on every pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Cache<T: Scalar = f32> {
    layers: Vec<Tensor<T>>,
    groups: usize,
    d_model: usize,
    token_count: usize,
    capacity: usize,
}

impl<T: Scalar> Cache<T> {
    pub fn empty(n_layers: usize, groups: usize, d_model: usize, capacity: usize) -> Self {
        Self {
            layers: (0..n_layers).map(|_| Tensor::zeros(&[0, d_model])).collect(),
            groups,
            d_model,
            token_count: 0,
            capacity,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.token_count == 0
    }

    pub fn layer(&self, l: usize) -> &Tensor<T> {
        &self.layers[l]
    }

    /// Same contents with a different capacity, keeping the newest rows if
    /// the new capacity is smaller.
    pub fn with_capacity(&self, capacity: usize) -> Self {
        let keep = self.token_count.min(capacity);
        let mut out = self.extended(&vec![Tensor::zeros(&[0, self.d_model]); self.layers.len()], 0, keep)
            .expect("shapes already consistent");
        out.capacity = capacity;
        out
    }

    /// Appends `n_new` rows per group from `inputs` (one tensor per layer)
    /// and keeps the newest `capacity` rows of every group.
    pub fn append(&self, inputs: &[Tensor<T>], n_new: usize) -> Result<Self> {
        let keep = (self.token_count + n_new).min(self.capacity);
        let mut out = self.extended(inputs, n_new, keep)?;
        out.capacity = self.capacity;
        Ok(out)
    }

    fn extended(&self, inputs: &[Tensor<T>], n_new: usize, keep: usize) -> Result<Self> {
        if inputs.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "cache has {} layers, got {}",
                self.layers.len(),
                inputs.len()
            )));
        }
        let (g, d, c) = (self.groups, self.d_model, self.token_count);
        let total = c + n_new;
        let drop = total - keep;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (old, new) in self.layers.iter().zip(inputs) {
            if new.shape() != [g * n_new, d] {
                return Err(Error::Dimension {
                    op: "cache append",
                    lhs: vec![g * n_new, d],
                    rhs: new.shape().to_vec(),
                });
            }
            let mut data = Vec::with_capacity(g * keep * d);
            for gi in 0..g {
                for r in drop..total {
                    let row = if r < c {
                        &old.data()[(gi * c + r) * d..(gi * c + r + 1) * d]
                    } else {
                        let r = r - c;
                        &new.data()[(gi * n_new + r) * d..(gi * n_new + r + 1) * d]
                    };
                    data.extend_from_slice(row);
                }
            }
            layers.push(Tensor::new(vec![g * keep, d], data)?);
        }
        Ok(Self {
            layers,
            groups: g,
            d_model: d,
            token_count: keep,
            capacity: self.capacity,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Cache<U> {
        Cache {
            layers: self.layers.iter().map(Tensor::cast).collect(),
            groups: self.groups,
            d_model: self.d_model,
            token_count: self.token_count,
            capacity: self.capacity,
        }
    }
}
