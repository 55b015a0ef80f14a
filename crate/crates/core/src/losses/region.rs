//! Feature-guided region-aware loss on penultimate feature maps.
//!
//! Three terms pull foreground features toward their mean (the foreground
//! center) and push features near the lesion border and the most
//! center-like background features away from it.

use super::mask::VoxelMask;
use super::LossConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean foreground feature `[C]` and the number of voxels averaged.
#[derive(Debug, Clone)]
pub struct ForegroundCenter<T: Element> {
    pub center: Tensor<T>,
    pub n_pos: usize,
}

/// Flattens per-sample features `[C, D, H, W]` to `[C, V]`.
fn flatten<T: Element>(features: &Tensor<T>) -> Result<Tensor<T>> {
    match features.ndim() {
        2 => Ok(features.clone()),
        4 => {
            let c = features.dim(0);
            features.reshape(&[c, features.numel() / c])
        }
        _ => Err(Error::shape(format!("features must be [C, D, H, W], got {:?}", features.shape()))),
    }
}

fn check_mask<T: Element>(features: &Tensor<T>, mask: &VoxelMask) -> Result<()> {
    let v = features.numel() / features.dim(0);
    if v != mask.len() || (features.ndim() == 4 && features.shape()[1..] != mask.dims()) {
        return Err(Error::shape(format!(
            "mask {:?} does not match features {:?}",
            mask.dims(),
            features.shape()
        )));
    }
    Ok(())
}

pub fn foreground_center<T: Element>(features: &Tensor<T>, pos: &VoxelMask) -> Result<ForegroundCenter<T>> {
    check_mask(features, pos)?;
    let idx = pos.indices();
    if idx.is_empty() {
        return Err(Error::NoForeground);
    }
    let center = flatten(features)?.index_select(1, &idx)?.mean_axis(1, false)?;
    Ok(ForegroundCenter {
        center,
        n_pos: idx.len(),
    })
}

/// Cosine similarity between the features at `voxels` and `center`:
/// `<f, c> / sqrt(max(|f|^2 |c|^2, eps^2))`. Returns `[voxels.len()]`.
pub fn cosine_similarity<T: Element>(features: &Tensor<T>, voxels: &[usize], center: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let flat = flatten(features)?;
    let c = flat.dim(0);
    if center.shape() != [c] {
        return Err(Error::shape(format!("center {:?} for {c} channels", center.shape())));
    }
    let picked = flat.index_select(1, voxels)?;
    let col = center.reshape(&[c, 1])?;
    let dot = picked.mul(&col)?.sum_axis(0, false)?;
    let norms = picked.mul(&picked)?.sum_axis(0, false)?;
    let center_norm = center.mul(center)?.sum_all();
    let denom = norms.mul(&center_norm)?.clamp_min(eps * eps).sqrt();
    dot.div(&denom)
}

/// Plain-number similarities used for mining, in voxel order of `voxels`.
fn similarity_values<T: Element>(features: &Tensor<T>, voxels: &[usize], center: &[f64], eps: f64) -> Vec<f64> {
    let c = features.dim(0);
    let v = features.numel() / c;
    let data = features.data();
    let cn: f64 = center.iter().map(|x| x * x).sum();
    voxels
        .iter()
        .map(|&i| {
            let (mut dot, mut nn) = (0.0, 0.0);
            for (k, ck) in center.iter().enumerate() {
                let f = data[k * v + i].as_f64();
                dot += f * ck;
                nn += f * f;
            }
            dot / (nn * cn).max(eps * eps).sqrt()
        })
        .collect()
}

fn relu_mean<T: Element>(features: &Tensor<T>, region: &VoxelMask, center: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let idx = region.indices();
    if idx.is_empty() {
        return Ok(Tensor::scalar(T::zero()));
    }
    Ok(cosine_similarity(features, &idx, center, eps)?.relu().mean_all())
}

/// Mean of `1 - sim(f_i, center)` over the foreground.
pub fn positive_compactness<T: Element>(features: &Tensor<T>, pos: &VoxelMask, center: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    check_mask(features, pos)?;
    let idx = pos.indices();
    if idx.is_empty() {
        return Err(Error::NoForeground);
    }
    Ok(cosine_similarity(features, &idx, center, eps)?.neg().add_scalar(1.0).mean_all())
}

/// Background voxels within `dilations` 3x3x3 dilations of the foreground.
pub fn boundary_region(pos: &VoxelMask, neg: &VoxelMask, dilations: usize) -> VoxelMask {
    pos.dilate(dilations).and(neg)
}

/// Mean positive similarity to the center over the boundary region; 0 if the region is empty.
pub fn boundary_loss<T: Element>(
    features: &Tensor<T>,
    pos: &VoxelMask,
    neg: &VoxelMask,
    center: &Tensor<T>,
    dilations: usize,
    eps: f64,
) -> Result<Tensor<T>> {
    check_mask(features, pos)?;
    relu_mean(features, &boundary_region(pos, neg, dilations), center, eps)
}

/// Selects the `n` background voxels most similar to the center (ties by
/// ascending linear index) and grows them by `dilations` within the background.
/// Returns the seeds and the resulting region.
pub fn mine_hard_negatives<T: Element>(
    features: &Tensor<T>,
    neg: &VoxelMask,
    center: &Tensor<T>,
    n: usize,
    dilations: usize,
    eps: f64,
) -> Result<(Vec<usize>, VoxelMask)> {
    check_mask(features, neg)?;
    let candidates = neg.indices();
    let centre: Vec<f64> = center.to_f64_vec();
    let sims = similarity_values(features, &candidates, &centre, eps);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(candidates[a].cmp(&candidates[b])));
    let mut seeds: Vec<usize> = order.iter().take(n).map(|&k| candidates[k]).collect();
    seeds.sort_unstable();
    let region = VoxelMask::from_indices(neg.dims(), &seeds).dilate(dilations).and(neg);
    Ok((seeds, region))
}

/// Mean positive similarity to the center over the mined hard-negative region.
pub fn hard_negative_loss<T: Element>(
    features: &Tensor<T>,
    neg: &VoxelMask,
    center: &Tensor<T>,
    n: usize,
    dilations: usize,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, region) = mine_hard_negatives(features, neg, center, n, dilations, eps)?;
    relu_mean(features, &region, center, eps)
}

/// Voxel sets used by the three terms for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrRegions {
    pub pos: VoxelMask,
    pub neg: VoxelMask,
    pub boundary: VoxelMask,
    pub seeds: Vec<usize>,
    pub hard: VoxelMask,
}

impl FrRegions {
    /// `None` when the sample has no foreground.
    pub fn compute<T: Element>(features: &Tensor<T>, pos: &VoxelMask, cfg: &LossConfig) -> Result<Option<Self>> {
        check_mask(features, pos)?;
        if pos.count() == 0 {
            return Ok(None);
        }
        let neg = pos.complement();
        let center = foreground_center(&features.detach(), pos)?.center;
        let boundary = boundary_region(pos, &neg, cfg.boundary_dilations);
        let (seeds, hard) = mine_hard_negatives(features, &neg, &center, cfg.num_negatives, cfg.negative_dilations, cfg.eps)?;
        Ok(Some(FrRegions {
            pos: pos.clone(),
            neg,
            boundary,
            seeds,
            hard,
        }))
    }
}

/// The three region terms for one sample.
#[derive(Debug, Clone)]
pub struct FrTerms<T: Element> {
    pub positive: Tensor<T>,
    pub boundary: Tensor<T>,
    pub negative: Tensor<T>,
}

impl<T: Element> FrTerms<T> {
    pub fn sum(&self) -> Result<Tensor<T>> {
        self.positive.add(&self.boundary)?.add(&self.negative)
    }

    /// Sum of the terms switched on in `cfg`.
    pub fn sum_enabled(&self, cfg: &LossConfig) -> Result<Tensor<T>> {
        let mut total = Tensor::scalar(T::zero());
        for (on, t) in [
            (cfg.use_positive, &self.positive),
            (cfg.use_boundary, &self.boundary),
            (cfg.use_negative, &self.negative),
        ] {
            if on {
                total = total.add(t)?;
            }
        }
        Ok(total)
    }
}

/// Evaluates the three terms on fixed regions; gradients flow through the
/// features and, when `cfg.fp_grad` is set, through the center.
pub fn fr_terms_with_regions<T: Element>(features: &Tensor<T>, regions: &FrRegions, cfg: &LossConfig) -> Result<FrTerms<T>> {
    let mut center = foreground_center(features, &regions.pos)?.center;
    if !cfg.fp_grad {
        center = center.detach();
    }
    fr_terms_with_center(features, regions, &center, cfg.eps)
}

/// The three terms on fixed regions against a given center.
pub fn fr_terms_with_center<T: Element>(
    features: &Tensor<T>,
    regions: &FrRegions,
    center: &Tensor<T>,
    eps: f64,
) -> Result<FrTerms<T>> {
    Ok(FrTerms {
        positive: positive_compactness(features, &regions.pos, center, eps)?,
        boundary: relu_mean(features, &regions.boundary, center, eps)?,
        negative: relu_mean(features, &regions.hard, center, eps)?,
    })
}

/// Per-sample terms, or `None` for a sample without foreground.
pub fn fr_terms<T: Element>(features: &Tensor<T>, pos: &VoxelMask, cfg: &LossConfig) -> Result<Option<FrTerms<T>>> {
    match FrRegions::compute(features, pos, cfg)? {
        Some(r) => fr_terms_with_regions(features, &r, cfg).map(Some),
        None => Ok(None),
    }
}

/// Batch loss over features `[B, C, D, H, W]`: per-sample sum of the three
/// terms, samples without foreground contributing 0, averaged over the batch.
pub fn fr_loss<T: Element>(features: &Tensor<T>, labels: &[VoxelMask], cfg: &LossConfig) -> Result<Tensor<T>> {
    if features.ndim() != 5 || features.dim(0) != labels.len() {
        return Err(Error::shape(format!(
            "features {:?} for {} label volumes",
            features.shape(),
            labels.len()
        )));
    }
    let b = features.dim(0);
    let mut total = Tensor::scalar(T::zero());
    for (i, label) in labels.iter().enumerate() {
        let f = features.narrow(0, i, 1)?.reshape(&features.shape()[1..])?;
        if let Some(terms) = fr_terms(&f, label, cfg)? {
            total = total.add(&terms.sum_enabled(cfg)?)?;
        }
    }
    Ok(total.scale(1.0 / b as f64))
}
