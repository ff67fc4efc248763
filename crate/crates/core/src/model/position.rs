use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Sinusoidal embedding of `position`: even channel `2i` holds
/// `sin(p / 10000^(2i/d))`, odd channel `2i+1` the matching cosine.
pub fn sinusoidal_pe(position: usize, d_model: usize) -> Vec<f64> {
    let p = position as f64;
    (0..d_model)
        .map(|c| {
            let pair = (c / 2 * 2) as f64;
            let angle = p / 10000f64.powf(pair / d_model as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Precomputed sinusoidal rows. Positions past the table are computed on
/// demand, so any index is valid.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTable<T: Scalar = f32> {
    d_model: usize,
    table: Tensor<T>,
    zero: bool,
}

impl<T: Scalar> PositionTable<T> {
    pub fn new(max_pos: usize, d_model: usize) -> Self {
        let mut data = Vec::with_capacity(max_pos * d_model);
        for p in 0..max_pos {
            data.extend(sinusoidal_pe(p, d_model).into_iter().map(T::lit));
        }
        Self {
            d_model,
            table: Tensor::new(vec![max_pos, d_model], data).expect("table shape"),
            zero: false,
        }
    }

    /// A table whose every row is zero.
    pub fn zeros(d_model: usize) -> Self {
        Self {
            d_model,
            table: Tensor::zeros(&[0, d_model]),
            zero: true,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Rows `start..start+count` as `[count×d]`.
    pub fn rows(&self, start: usize, count: usize) -> Result<Tensor<T>> {
        let d = self.d_model;
        if self.zero {
            return Ok(Tensor::zeros(&[count, d]));
        }
        let cached = self.table.shape()[0];
        let mut data = Vec::with_capacity(count * d);
        for p in start..start + count {
            if p < cached {
                data.extend_from_slice(self.table.row(p));
            } else {
                data.extend(sinusoidal_pe(p, d).into_iter().map(T::lit));
            }
        }
        Tensor::new(vec![count, d], data)
    }

    /// `rows(start, count)` repeated once per group.
    pub(crate) fn tiled(&self, start: usize, count: usize, groups: usize) -> Result<Tensor<T>> {
        let block = self.rows(start, count)?;
        let mut data = Vec::with_capacity(block.len() * groups);
        for _ in 0..groups {
            data.extend_from_slice(block.data());
        }
        Tensor::new(vec![groups * count, self.d_model], data)
    }
}
