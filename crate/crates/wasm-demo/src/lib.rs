//! WebAssembly exports for the static page in `www/`.
//!
//! Each export wraps a plain Rust function so the same code runs under
//! `cargo test` on the host.

use hcma::losses::{FrRegions, LossConfig, VoxelMask};
use hcma::ssm::{scan_orders, selective_scan, SelectiveScanParams};
use hcma::{SeedStream, Tensor};
use wasm_bindgen::prelude::*;

pub const FOREGROUND: u8 = 1;
pub const BOUNDARY: u8 = 2;
pub const HARD_NEGATIVE: u8 = 4;
pub const SEED: u8 = 8;

const FEATURE_CHANNELS: usize = 3;

/// Region flags for a painted `h x w` mask. Every pixel gets a bitwise OR of
/// [`FOREGROUND`], [`BOUNDARY`], [`HARD_NEGATIVE`] and [`SEED`].
///
/// Features are drawn per pixel: foreground pixels share a mean offset and
/// all pixels get Gaussian noise of standard deviation `noise`, so the
/// hard negatives are the background pixels that look most like foreground.
pub fn region_flags(
    mask: &[u8],
    h: usize,
    w: usize,
    boundary_dilations: usize,
    negative_dilations: usize,
    num_negatives: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<u8>, String> {
    if mask.len() != h * w {
        return Err(format!("mask has {} pixels, expected {}", mask.len(), h * w));
    }
    let label = VoxelMask::new([1, h, w], mask.iter().map(|&m| m != 0).collect()).map_err(|e| e.to_string())?;
    let mut rng = SeedStream::new(seed);
    let offset: Vec<f64> = (0..FEATURE_CHANNELS).map(|_| rng.normal()).collect();
    let mut data = vec![0.0; FEATURE_CHANNELS * h * w];
    for (c, chunk) in data.chunks_mut(h * w).enumerate() {
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = noise * rng.normal() + if label.bits()[i] { offset[c] } else { 0.0 };
        }
    }
    let features = Tensor::<f64>::from_vec(data, &[FEATURE_CHANNELS, 1, h, w]).map_err(|e| e.to_string())?;
    let cfg = LossConfig {
        boundary_dilations,
        negative_dilations,
        num_negatives,
        ..Default::default()
    };
    let mut flags: Vec<u8> = mask.iter().map(|&m| if m != 0 { FOREGROUND } else { 0 }).collect();
    if let Some(r) = FrRegions::compute(&features, &label, &cfg).map_err(|e| e.to_string())? {
        for (i, f) in flags.iter_mut().enumerate() {
            if r.boundary.bits()[i] {
                *f |= BOUNDARY;
            }
            if r.hard.bits()[i] {
                *f |= HARD_NEGATIVE;
            }
        }
        for &s in &r.seeds {
            flags[s] |= SEED;
        }
    }
    Ok(flags)
}

/// The four traversal orders of an `h x w` grid, concatenated: entry
/// `k * h * w + t` is the pixel visited at step `t` of order `k`.
pub fn traversal_orders(h: usize, w: usize) -> Vec<u32> {
    scan_orders(h, w).iter().flatten().map(|&i| i as u32).collect()
}

/// Output of a one-channel selective scan with four state slots, driven by a
/// constant input of 1 and then by the same input with `amplitude` added at
/// `impulse_at`. Returns both series concatenated.
///
/// `step_bias` sets the step size through softplus; `decay` scales the
/// per-slot decay rates `decay * (1, 2, 3, 4)`.
pub fn impulse_response(len: usize, impulse_at: usize, amplitude: f64, step_bias: f64, decay: f64) -> Result<Vec<f64>, String> {
    if len == 0 || impulse_at >= len {
        return Err(format!("impulse position {impulse_at} outside a sequence of length {len}"));
    }
    if !(decay > 0.0) {
        return Err("decay must be positive".into());
    }
    let t = |v: Vec<f64>, s: &[usize]| Tensor::<f64>::from_vec(v, s).map_err(|e| e.to_string());
    let params = SelectiveScanParams {
        a_log: t((1..=4).map(|k| (decay * k as f64).ln()).collect(), &[1, 4])?,
        proj_b: t(vec![1.0; 4], &[1, 4])?,
        proj_c: t(vec![0.25; 4], &[1, 4])?,
        proj_delta: t(vec![0.0], &[1, 1])?,
        delta_bias: t(vec![step_bias], &[1])?,
        d_skip: t(vec![0.0], &[1])?,
    };
    let base = vec![1.0; len];
    let mut bumped = base.clone();
    bumped[impulse_at] += amplitude;
    let mut out = Vec::with_capacity(2 * len);
    for u in [base, bumped] {
        out.extend(selective_scan(&t(u, &[len, 1])?, &params).map_err(|e| e.to_string())?.to_vec());
    }
    Ok(out)
}

#[wasm_bindgen(js_name = regionFlags)]
pub fn region_flags_js(
    mask: &[u8],
    h: usize,
    w: usize,
    boundary_dilations: usize,
    negative_dilations: usize,
    num_negatives: usize,
    noise: f64,
    seed: u32,
) -> Result<Vec<u8>, JsError> {
    region_flags(mask, h, w, boundary_dilations, negative_dilations, num_negatives, noise, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = traversalOrders)]
pub fn traversal_orders_js(h: usize, w: usize) -> Vec<u32> {
    traversal_orders(h, w)
}

#[wasm_bindgen(js_name = impulseResponse)]
pub fn impulse_response_js(len: usize, impulse_at: usize, amplitude: f64, step_bias: f64, decay: f64) -> Result<Vec<f64>, JsError> {
    impulse_response(len, impulse_at, amplitude, step_bias, decay).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_regions() {
        let (h, w) = (9, 9);
        let mut mask = vec![0u8; h * w];
        mask[4 * w + 4] = 1;
        let flags = region_flags(&mask, h, w, 1, 0, 3, 0.5, 7).unwrap();
        assert_eq!(flags[4 * w + 4], FOREGROUND);
        assert_eq!(flags.iter().filter(|&&f| f & BOUNDARY != 0).count(), 8);
        assert_eq!(flags.iter().filter(|&&f| f & SEED != 0).count(), 3);
        assert!(flags.iter().all(|&f| f & FOREGROUND == 0 || f == FOREGROUND));
    }

    #[test]
    fn empty_mask_has_no_regions() {
        assert!(region_flags(&[0; 16], 4, 4, 2, 2, 5, 1.0, 0).unwrap().iter().all(|&f| f == 0));
        assert!(region_flags(&[0; 15], 4, 4, 2, 2, 5, 1.0, 0).is_err());
    }

    #[test]
    fn orders_on_two_by_two() {
        assert_eq!(traversal_orders(2, 2), vec![0, 1, 2, 3, 0, 2, 1, 3, 3, 2, 1, 0, 3, 1, 2, 0]);
    }

    #[test]
    fn impulse_is_causal_and_decays() {
        let (len, at) = (32, 10);
        let y = impulse_response(len, at, 2.0, 0.0, 0.5).unwrap();
        let diff: Vec<f64> = (0..len).map(|i| y[len + i] - y[i]).collect();
        assert!(diff[..at].iter().all(|&d| d == 0.0));
        assert!(diff[at] > 0.0);
        assert!(diff[len - 1].abs() < diff[at + 1].abs());
    }
}
