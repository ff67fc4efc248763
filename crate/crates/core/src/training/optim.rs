use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update with bias correction; `lr` overrides `cfg.lr` so a
/// schedule can drive it.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam got {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "adam",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv as f64 / c1;
            let v_hat = *vv as f64 / c2;
            *pv -= (lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| (*v as f64) * (*v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Learning rate as a function of the optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over `total_steps`.
    Cosine { total_steps: u64 },
    /// Linear warmup for `warmup` steps, then `∝ 1/√step`.
    InverseSqrt { warmup: u64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_steps } => {
                let frac = (step as f64 / total_steps.max(1) as f64).min(1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            LrSchedule::InverseSqrt { warmup } => {
                let s = (step + 1) as f64;
                let w = warmup.max(1) as f64;
                if s < w {
                    base * s / w
                } else {
                    base * (w / s).sqrt()
                }
            }
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant => write!(f, "constant"),
            LrSchedule::Cosine { total_steps } => write!(f, "cosine:{total_steps}"),
            LrSchedule::InverseSqrt { warmup } => write!(f, "inverse_sqrt:{warmup}"),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = || {
            arg.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("schedule {s:?} needs a step count")))
        };
        match name.trim() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine { total_steps: num()? }),
            "inverse_sqrt" => Ok(LrSchedule::InverseSqrt { warmup: num()? }),
            _ => Err(Error::config(format!("unknown schedule {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[3])];
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-2, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_on_square() {
        // f(x) = x², x = 1 → g = 2; m = 0.2, v = 0.004, m̂ = 2, v̂ = 4
        let cfg = AdamConfig::default();
        let lr = 0.1;
        let mut p = vec![Tensor::new(vec![1], vec![1.0f32]).unwrap()];
        let g = vec![Tensor::new(vec![1], vec![2.0f32]).unwrap()];
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut st, lr, &cfg).unwrap();
        let expect = 1.0 - lr * 2.0 / (2.0 + cfg.eps);
        assert!((p[0].data()[0] as f64 - expect).abs() < 1e-6);
        assert!((st.m[0].data()[0] - 0.2).abs() < 1e-7);
        // f32 moments: 1 − β2 carries ~1e-4 relative rounding
        assert!((st.v[0].data()[0] - 0.004).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-6);
        let mut g = vec![Tensor::new(vec![2], vec![0.3f32, 0.4]).unwrap()];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.lr_at(0.1, 99), 0.1);
        let cos = LrSchedule::Cosine { total_steps: 10 };
        assert!((cos.lr_at(1.0, 5) - 0.5).abs() < 1e-12);
        assert!(cos.lr_at(1.0, 10).abs() < 1e-12);
        let inv = LrSchedule::InverseSqrt { warmup: 4 };
        assert!((inv.lr_at(1.0, 1) - 0.5).abs() < 1e-12);
        assert!((inv.lr_at(1.0, 15) - 0.5).abs() < 1e-12);
        for s in ["constant", "cosine:100", "inverse_sqrt:8"] {
            assert_eq!(s.parse::<LrSchedule>().unwrap().to_string(), s);
        }
        assert!("cosine".parse::<LrSchedule>().is_err());
    }
}
