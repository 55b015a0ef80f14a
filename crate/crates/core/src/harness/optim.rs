//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, kept in 64-bit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub steps: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Element>(params: &[Tensor<T>]) -> Self {
        AdamState {
            steps: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One AdamW update. Returns fresh trainable leaves; `grads[i] = None`
/// is treated as a zero gradient.
///
/// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step<T: Element>(
    params: &[Tensor<T>],
    grads: &[Option<Vec<T>>],
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> Result<Vec<Tensor<T>>> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut out = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.numel() {
            return Err(Error::shape(format!("moment buffer {i} has {} entries for {:?}", m.len(), p.shape())));
        }
        if let Some(g) = &grads[i] {
            if g.len() != p.numel() {
                return Err(Error::shape(format!("gradient {i} has {} entries for {:?}", g.len(), p.shape())));
            }
        }
        let data: Vec<T> = p
            .data()
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j].as_f64());
                let x = x.as_f64();
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                T::of(x - cfg.lr * cfg.weight_decay * x - cfg.lr * step)
            })
            .collect();
        out.push(Tensor::from_vec(data, p.shape())?.requires_grad());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[v], &[1]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let p = vec![scalar(1.5)];
        let mut s = AdamState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let q = adamw_step(&p, &[Some(vec![0.0])], &mut s, &cfg).unwrap();
        assert_eq!(q[0].to_vec(), [1.5]);
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd() {
        let p = vec![scalar(2.0)];
        let mut s = AdamState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let q = adamw_step(&p, &[None], &mut s, &cfg).unwrap();
        assert_eq!(q[0].to_vec(), [2.0 - 0.1 * 0.5 * 2.0]);
    }

    #[test]
    fn hand_computed_two_steps() {
        let cfg = AdamWConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let p = vec![scalar(1.0)];
        let mut s = AdamState::new(&p);
        let p1 = adamw_step(&p, &[Some(vec![0.5])], &mut s, &cfg).unwrap();
        // m = 0.05, v = 0.0025; bias-corrected 0.5 and 0.25
        let want1 = 1.0 - 0.01 * 0.1 * 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p1[0].to_vec()[0] - want1).abs() < 1e-12);
        let p2 = adamw_step(&p1, &[Some(vec![-0.2])], &mut s, &cfg).unwrap();
        let m = 0.9 * 0.05 + 0.1 * -0.2;
        let v = 0.99 * 0.0025 + 0.01 * 0.04;
        let step = (m / (1.0 - 0.81)) / ((v / (1.0 - 0.9801f64)).sqrt() + 1e-8);
        let want2 = want1 - 0.01 * 0.1 * want1 - 0.01 * step;
        assert!((p2[0].to_vec()[0] - want2).abs() < 1e-12);
    }
}
