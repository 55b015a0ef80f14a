//! Central finite-difference gradient checking in 64-bit.
//!
//! Derivatives are estimated with the fourth-order five-point stencil
//! `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
//!
//! A coordinate whose estimate at `h` disagrees with the estimate at `h / 4`
//! has a kink inside the stencil. It is scored against the `h / 4` estimate
//! and counted in [`GradReport::nonsmooth`].

use crate::error::Result;
use crate::tensor::{no_grad, SeedStream, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Coordinates probed per input; `None` probes every coordinate.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` among
    /// coordinates where the relative tolerance, not the floor, is binding.
    pub max_rel_err: f64,
    pub failures: Vec<GradMismatch>,
    /// Coordinates scored at the finer step because of a kink.
    pub nonsmooth: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks the gradient of `f` with respect to each tensor in `inputs`.
///
/// Non-scalar outputs are contracted with a fixed random cotangent, so every
/// output component participates. Inputs are treated as leaves: copies with
/// gradient tracking are fed to `f`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig, rng: &mut SeedStream) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.requires_grad()).collect();
    let out = f(&leaves)?;
    let cot = Tensor::<f64>::randn(out.shape(), 1.0, rng);
    let objective = |o: &Tensor<f64>| -> Result<f64> { o.mul(&cot)?.sum_all().item() };
    out.mul(&cot)?.sum_all().backward()?;

    let mut report = GradReport::default();
    for (ii, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = inputs[ii].to_vec();
                data[c] += delta;
                let bumped = Tensor::from_vec(data, inputs[ii].shape())?;
                let args: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == ii { bumped.clone() } else { t.clone() })
                    .collect();
                no_grad(|| f(&args).and_then(|o| objective(&o)))
            };
            let stencil = |h: f64| -> Result<f64> { Ok((8.0 * (eval(h)? - eval(-h)?) - (eval(2.0 * h)? - eval(-2.0 * h)?)) / (12.0 * h)) };
            let mismatch = |a: f64, n: f64| (a - n).abs() > cfg.abs_floor.max(cfg.rel_tol * a.abs().max(n.abs()));
            let a = analytic[c];
            let mut numeric = stencil(cfg.step)?;
            if mismatch(a, numeric) {
                let fine = stencil(cfg.step / 4.0)?;
                if mismatch(numeric, fine) {
                    report.nonsmooth += 1;
                    numeric = fine;
                }
            }
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if cfg.rel_tol * scale > cfg.abs_floor {
                report.max_rel_err = report.max_rel_err.max(err / scale);
            }
            report.checked += 1;
            if mismatch(a, numeric) {
                report.failures.push(GradMismatch {
                    input: ii,
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
