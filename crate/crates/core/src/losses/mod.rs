//! Segmentation losses: soft Dice, cross-entropy and the region-aware
//! feature loss, combined into the training objective.

mod mask;
mod region;

pub use mask::{dilate, VoxelMask};
pub use region::{
    boundary_loss, boundary_region, cosine_similarity, foreground_center, fr_loss, fr_terms, fr_terms_with_center,
    fr_terms_with_regions,
    hard_negative_loss, mine_hard_negatives, positive_compactness, ForegroundCenter, FrRegions, FrTerms,
};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Dilations growing the foreground into the boundary region.
    pub boundary_dilations: usize,
    /// Dilations growing mined negatives into the hard-negative region.
    pub negative_dilations: usize,
    /// Number of background voxels mined per sample.
    pub num_negatives: usize,
    /// Weight of the region-aware term; 0 trains on Dice + CE alone.
    pub fr_weight: f64,
    /// Floor for cosine and Dice denominators.
    pub eps: f64,
    /// Let gradients flow through the foreground center.
    pub fp_grad: bool,
    /// Which region terms enter the loss.
    pub use_positive: bool,
    pub use_boundary: bool,
    pub use_negative: bool,
    pub ce_weight: f64,
    pub dice_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            boundary_dilations: 10,
            negative_dilations: 10,
            num_negatives: 250,
            fr_weight: 5.0,
            eps: 1e-8,
            fp_grad: true,
            use_positive: true,
            use_boundary: true,
            use_negative: true,
            ce_weight: 1.0,
            dice_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_negatives == 0 {
            return Err(Error::config("loss.num_negatives", "must be at least 1"));
        }
        for (name, v) in [
            ("loss.fr_weight", self.fr_weight),
            ("loss.ce_weight", self.ce_weight),
            ("loss.dice_weight", self.dice_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("loss.eps", "must be positive"));
        }
        if self.fr_weight > 0.0 && !(self.use_positive || self.use_boundary || self.use_negative) {
            return Err(Error::config("loss.fr_weight", "is positive but every region term is switched off"));
        }
        Ok(())
    }
}

fn check_labels<T: Element>(t: &Tensor<T>, labels: &[VoxelMask]) -> Result<()> {
    if t.ndim() != 5 || t.dim(0) != labels.len() || t.dim(1) < 2 {
        return Err(Error::shape(format!("class map {:?} for {} label volumes", t.shape(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|l| l.dims() != t.shape()[2..]) {
        return Err(Error::shape(format!("label {:?} does not match {:?}", l.dims(), t.shape())));
    }
    Ok(())
}

fn foreground_targets<T: Element>(labels: &[VoxelMask]) -> Result<Tensor<T>> {
    let v = labels[0].len();
    let data = labels
        .iter()
        .flat_map(|l| l.bits().iter().map(|&b| if b { T::one() } else { T::zero() }))
        .collect();
    Tensor::from_vec(data, &[labels.len(), v])
}

/// Soft Dice on the foreground channel of `probs` `[B, K, D, H, W]`,
/// averaged over the batch.
pub fn dice_loss<T: Element>(probs: &Tensor<T>, labels: &[VoxelMask], eps: f64) -> Result<Tensor<T>> {
    check_labels(probs, labels)?;
    let b = labels.len();
    let v = labels[0].len();
    let p = probs.narrow(1, 1, 1)?.reshape(&[b, v])?;
    let y = foreground_targets::<T>(labels)?;
    let inter = p.mul(&y)?.sum_axis(1, false)?;
    let denom = p.sum_axis(1, false)?.add(&y.sum_axis(1, false)?)?.add_scalar(eps);
    inter.scale(2.0).add_scalar(eps).div(&denom)?.neg().add_scalar(1.0).mean_axis(0, false)
}

/// Mean voxel-wise negative log-likelihood of the label class.
pub fn ce_loss<T: Element>(logits: &Tensor<T>, labels: &[VoxelMask]) -> Result<Tensor<T>> {
    check_labels(logits, labels)?;
    let k = logits.dim(1);
    let v = labels[0].len();
    let mut onehot = vec![T::zero(); labels.len() * k * v];
    for (b, l) in labels.iter().enumerate() {
        for (i, &fg) in l.bits().iter().enumerate() {
            onehot[(b * k + usize::from(fg)) * v + i] = T::one();
        }
    }
    let target = Tensor::from_vec(onehot, logits.shape())?;
    let n = (labels.len() * v) as f64;
    Ok(logits.log_softmax(1)?.mul(&target)?.sum_all().scale(-1.0 / n))
}

/// Loss terms of one training step.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T: Element> {
    pub total: Tensor<T>,
    pub ce: Tensor<T>,
    pub dice: Tensor<T>,
    /// Unweighted region-aware term; zero when its weight is zero.
    pub fr: Tensor<T>,
}

/// `ce_weight * CE + dice_weight * Dice + fr_weight * FR`.
pub fn total_loss<T: Element>(
    logits: &Tensor<T>,
    features: &Tensor<T>,
    labels: &[VoxelMask],
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    let ce = ce_loss(logits, labels)?;
    let dice = dice_loss(&logits.softmax(1)?, labels, cfg.eps)?;
    let fr = if cfg.fr_weight > 0.0 {
        fr_loss(features, labels, cfg)?
    } else {
        Tensor::scalar(T::zero())
    };
    let total = ce
        .scale(cfg.ce_weight)
        .add(&dice.scale(cfg.dice_weight))?
        .add(&fr.scale(cfg.fr_weight))?;
    Ok(LossBreakdown { total, ce, dice, fr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeedStream;
    use crate::verify::gradcheck::{check_gradients, GradCheckConfig};

    fn masks(bits: &[&[bool]], dims: [usize; 3]) -> Vec<VoxelMask> {
        bits.iter().map(|b| VoxelMask::new(dims, b.to_vec()).unwrap()).collect()
    }

    fn two_class_probs(fg: &[f64], dims: [usize; 3]) -> Tensor<f64> {
        let mut data: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
        data.extend_from_slice(fg);
        Tensor::from_vec(data, &[1, 2, dims[0], dims[1], dims[2]]).unwrap()
    }

    #[test]
    fn dice_edge_cases() {
        let dims = [1, 2, 2];
        let y = [true, false, true, false];
        let l = masks(&[&y], dims);
        let exact = dice_loss(&two_class_probs(&[1.0, 0.0, 1.0, 0.0], dims), &l, 1e-8).unwrap();
        assert!(exact.item().unwrap().abs() < 1e-8);
        let disjoint = dice_loss(&two_class_probs(&[0.0, 1.0, 0.0, 1.0], dims), &l, 1e-8).unwrap();
        assert!((disjoint.item().unwrap() - 1.0).abs() < 1e-8);
        let empty = masks(&[&[false; 4]], dims);
        let none = dice_loss(&two_class_probs(&[0.0; 4], dims), &empty, 1e-8).unwrap();
        assert_eq!(none.item().unwrap(), 0.0);
    }

    #[test]
    fn ce_of_uniform_logits_is_ln2() {
        let l = masks(&[&[true, false, false]], [1, 1, 3]);
        let ce = ce_loss(&Tensor::<f64>::zeros(&[1, 2, 1, 1, 3]), &l).unwrap();
        assert!((ce.item().unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_matches_direct_formula() {
        let mut rng = SeedStream::new(1);
        let logits = Tensor::<f64>::randn(&[2, 2, 1, 2, 3], 3.0, &mut rng);
        let bits: Vec<Vec<bool>> = (0..2).map(|_| (0..6).map(|_| rng.uniform() < 0.5).collect()).collect();
        let l: Vec<VoxelMask> = bits.iter().map(|b| VoxelMask::new([1, 2, 3], b.clone()).unwrap()).collect();
        let x = logits.data();
        let mut want = 0.0;
        for b in 0..2 {
            for i in 0..6 {
                let (z0, z1) = (x[b * 12 + i], x[b * 12 + 6 + i]);
                let lse = z0.max(z1) + ((z0 - z0.max(z1)).exp() + (z1 - z0.max(z1)).exp()).ln();
                want += lse - if bits[b][i] { z1 } else { z0 };
            }
        }
        want /= 12.0;
        assert!((ce_loss(&logits, &l).unwrap().item().unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn hand_worked_centre_and_compactness() {
        // two voxels with features [1, 0] and [0, 1]
        let f = Tensor::<f64>::from_f64(&[1.0, 0.0, 0.0, 1.0], &[2, 1, 1, 2]).unwrap();
        let pos = VoxelMask::new([1, 1, 2], vec![true, true]).unwrap();
        let c = foreground_center(&f, &pos).unwrap();
        assert_eq!(c.center.to_vec(), [0.5, 0.5]);
        let lp = positive_compactness(&f, &pos, &c.center, 1e-8).unwrap().item().unwrap();
        assert!((lp - (1.0 - 0.5f64.sqrt())).abs() < 1e-12, "{lp}");

        let g = Tensor::<f64>::from_f64(&[1.0, 3.0, 0.0, 2.0], &[2, 1, 1, 2]).unwrap();
        assert_eq!(foreground_center(&g, &pos).unwrap().center.to_vec(), [2.0, 1.0]);
        let none = VoxelMask::empty([1, 1, 2]);
        assert!(matches!(foreground_center(&g, &none), Err(Error::NoForeground)));
    }

    #[test]
    fn boundary_of_single_voxel_is_its_neighbourhood() {
        let mut pos = VoxelMask::empty([4, 4, 4]);
        pos.set(1, 1, 1, true);
        assert_eq!(boundary_region(&pos, &pos.complement(), 1).count(), 26);
    }

    #[test]
    fn saturated_mining_covers_background() {
        let mut rng = SeedStream::new(2);
        let f = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let mut pos = VoxelMask::empty([3, 3, 3]);
        pos.set(1, 1, 1, true);
        let neg = pos.complement();
        let c = foreground_center(&f, &pos).unwrap().center;
        let (seeds, region) = mine_hard_negatives(&f, &neg, &c, 1000, 0, 1e-8).unwrap();
        assert_eq!(seeds.len(), 26);
        assert_eq!(region, neg);
    }

    #[test]
    fn separated_features_give_zero_fr() {
        // foreground features [1, 0], background [-1, 0]
        let dims = [2, 2, 2];
        let pos = VoxelMask::from_indices(dims, &[0, 1, 2]);
        let mut data = vec![0.0f64; 16];
        for i in 0..8 {
            data[i] = if pos.bits()[i] { 1.0 } else { -1.0 };
        }
        let f = Tensor::from_vec(data, &[1, 2, 2, 2, 2]).unwrap();
        let fr = fr_loss(&f, &[pos], &LossConfig::default()).unwrap();
        assert!(fr.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn no_foreground_batch_gives_zero() {
        let f = Tensor::<f64>::ones(&[2, 3, 2, 2, 2]);
        let l = vec![VoxelMask::empty([2, 2, 2]); 2];
        assert_eq!(fr_loss(&f, &l, &LossConfig::default()).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn fr_gradients_with_fixed_regions() {
        let mut rng = SeedStream::new(3);
        let dims = [3, 3, 3];
        let f = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let pos = VoxelMask::from_indices(dims, &[4, 13, 14]);
        let cfg = LossConfig {
            boundary_dilations: 1,
            negative_dilations: 1,
            num_negatives: 3,
            ..Default::default()
        };
        let regions = FrRegions::compute(&f, &pos, &cfg).unwrap().unwrap();
        let rep = check_gradients(
            |v| fr_terms_with_regions(&v[0], &regions, &cfg)?.sum(),
            std::slice::from_ref(&f),
            GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);

        // with the center cut from the graph, the gradient is that of the
        // loss against a constant center
        let center = foreground_center(&f, &pos).unwrap().center;
        let rep = check_gradients(
            |v| fr_terms_with_center(&v[0], &regions, &center, cfg.eps)?.sum(),
            std::slice::from_ref(&f),
            GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
        let leaf = f.requires_grad();
        let stopped = LossConfig { fp_grad: false, ..cfg };
        fr_terms_with_regions(&leaf, &regions, &stopped).unwrap().sum().unwrap().backward().unwrap();
        let fixed = f.requires_grad();
        fr_terms_with_center(&fixed, &regions, &center, cfg.eps).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(leaf.grad(), fixed.grad());
    }

    #[test]
    fn total_is_affine_in_fr_weight() {
        let mut rng = SeedStream::new(4);
        let logits = Tensor::<f64>::randn(&[1, 2, 2, 2, 2], 1.0, &mut rng);
        let feats = Tensor::<f64>::randn(&[1, 3, 2, 2, 2], 1.0, &mut rng);
        let l = vec![VoxelMask::from_indices([2, 2, 2], &[0, 5])];
        let at = |w: f64| {
            let cfg = LossConfig {
                fr_weight: w,
                num_negatives: 2,
                boundary_dilations: 1,
                negative_dilations: 1,
                ..Default::default()
            };
            total_loss(&logits, &feats, &l, &cfg).unwrap().total.item().unwrap()
        };
        let (t0, t5, t10) = (at(0.0), at(5.0), at(10.0));
        assert!((t10 - t0 - 2.0 * (t5 - t0)).abs() < 1e-7);
    }

    #[test]
    fn switched_off_terms_leave_the_loss() {
        let mut rng = SeedStream::new(5);
        let f = Tensor::<f64>::randn(&[1, 3, 3, 3, 3], 1.0, &mut rng);
        let l = vec![VoxelMask::from_indices([3, 3, 3], &[4, 13, 14])];
        let base = LossConfig {
            boundary_dilations: 1,
            negative_dilations: 1,
            num_negatives: 3,
            ..Default::default()
        };
        let terms = fr_terms(&f.narrow(0, 0, 1).unwrap().reshape(&[3, 3, 3, 3]).unwrap(), &l[0], &base).unwrap().unwrap();
        let parts = [&terms.positive, &terms.boundary, &terms.negative].map(|t| t.item().unwrap());
        for mask in 0..8u8 {
            let cfg = LossConfig {
                use_positive: mask & 1 != 0,
                use_boundary: mask & 2 != 0,
                use_negative: mask & 4 != 0,
                ..base
            };
            let want: f64 = (0..3).filter(|k| mask & (1 << k) != 0).map(|k| parts[k]).sum();
            assert!((fr_loss(&f, &l, &cfg).unwrap().item().unwrap() - want).abs() < 1e-12);
        }
        let none = LossConfig { use_positive: false, use_boundary: false, use_negative: false, ..base };
        assert!(none.validate().is_err());
        assert!(LossConfig { fr_weight: 0.0, ..none }.validate().is_ok());
    }
}
