//! Synthetic volumes and patch sampling.

use crate::error::{Error, Result};
use crate::losses::VoxelMask;
use crate::tensor::{Element, SeedStream, Tensor};

/// An image volume with its binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    /// `[D, H, W]`
    pub dims: [usize; 3],
    /// Row-major intensities.
    pub image: Vec<f32>,
    pub label: VoxelMask,
    /// Voxel spacing, carried as metadata only.
    pub spacing: [f64; 3],
}

impl VolumeRecord {
    pub fn new(id: impl Into<String>, image: Vec<f32>, label: VoxelMask, spacing: [f64; 3]) -> Result<Self> {
        let dims = label.dims();
        if image.len() != label.len() {
            return Err(Error::shape(format!("image has {} voxels, label {dims:?}", image.len())));
        }
        Ok(VolumeRecord {
            id: id.into(),
            dims,
            image,
            label,
            spacing,
        })
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.label.count() as f64 / self.label.len() as f64
    }
}

/// Settings for [`gen_synthetic_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub extent: [usize; 3],
    /// 0 gives noise-free volumes with full contrast; 1 gives low contrast and strong noise.
    pub difficulty: f64,
    pub seed: u64,
}

/// `count` cubic volumes of side `extent` at the default difficulty of 0.25.
pub fn gen_synthetic(count: usize, extent: usize, seed: u64) -> Vec<VolumeRecord> {
    gen_synthetic_with(&SyntheticSpec {
        count,
        extent: [extent; 3],
        difficulty: 0.25,
        seed,
    })
}

/// Volumes holding the union of 1 to 3 randomly placed, sized and rotated
/// ellipsoids. Semi-axes lie in `[0.15, 0.25]` of each extent and every
/// ellipsoid lies fully inside the volume, so the foreground covers between
/// roughly 1.4% and 20% of the voxels.
pub fn gen_synthetic_with(spec: &SyntheticSpec) -> Vec<VolumeRecord> {
    (0..spec.count)
        .map(|i| {
            let mut rng = SeedStream::derived(spec.seed, i as u64);
            phantom(format!("case-{i:03}"), spec.extent, spec.difficulty.clamp(0.0, 1.0), &mut rng)
        })
        .collect()
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    /// Rows are the ellipsoid's axes in volume coordinates.
    axes: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn random(extent: [usize; 3], rng: &mut SeedStream) -> Self {
        let e = extent.map(|x| x as f64);
        let semi = [0, 1, 2].map(|k| e[k] * (0.15 + 0.10 * rng.uniform()));
        let reach = semi.iter().cloned().fold(0.0, f64::max);
        // keep the rotated body inside the volume
        let center = [0, 1, 2].map(|k| {
            let lo = reach.min(e[k] / 2.0);
            let hi = (e[k] - reach).max(lo);
            lo + (hi - lo) * rng.uniform()
        });
        // uniform random rotation from a normalised quaternion
        let q: [f64; 4] = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let [w, x, y, z] = q.map(|v| v / n);
        let axes = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Ellipsoid { center, semi, axes }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|k| p[k] - self.center[k]);
        let mut s = 0.0;
        for (axis, semi) in self.axes.iter().zip(self.semi) {
            let proj = axis[0] * d[0] + axis[1] * d[1] + axis[2] * d[2];
            s += (proj / semi).powi(2);
        }
        s <= 1.0
    }
}

fn phantom(id: String, extent: [usize; 3], difficulty: f64, rng: &mut SeedStream) -> VolumeRecord {
    let [d, h, w] = extent;
    let count = 1 + rng.below(3);
    let bodies: Vec<Ellipsoid> = (0..count).map(|_| Ellipsoid::random(extent, rng)).collect();
    let mut label = VoxelMask::empty(extent);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                if bodies.iter().any(|b| b.contains(p)) {
                    label.set(z, y, x, true);
                }
            }
        }
    }
    let contrast = 1.0 - 0.8 * difficulty;
    let noise_std = 0.6 * difficulty;
    let raw: Vec<f64> = (0..d * h * w).map(|_| rng.normal() * noise_std).collect();
    let noise = box_smooth(&raw, extent);
    let image = label
        .bits()
        .iter()
        .zip(&noise)
        .map(|(&fg, n)| ((if fg { contrast } else { 0.0 }) + n) as f32)
        .collect();
    VolumeRecord::new(id, image, label, [1.0; 3]).expect("consistent extents")
}

/// 3x3x3 mean filter with the window clipped at the border.
fn box_smooth(x: &[f64], [d, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for z in 0..d {
        for y in 0..h {
            for xx in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for zz in z.saturating_sub(1)..(z + 2).min(d) {
                    for yy in y.saturating_sub(1)..(y + 2).min(h) {
                        for xw in xx.saturating_sub(1)..(xx + 2).min(w) {
                            s += x[(zz * h + yy) * w + xw];
                            n += 1.0;
                        }
                    }
                }
                out[(z * h + y) * w + xx] = s / n;
            }
        }
    }
    out
}

/// A cropped image and label pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub corner: [usize; 3],
    pub image: Vec<f32>,
    pub label: VoxelMask,
}

/// Crops a patch of `extent`. With probability `fg_bias` (and when the
/// record has foreground) the patch is centred on a uniformly chosen
/// foreground voxel, clamped to the volume; otherwise its corner is uniform
/// over all valid corners.
pub fn sample_patch(record: &VolumeRecord, extent: [usize; 3], fg_bias: f64, rng: &mut SeedStream) -> Result<Patch> {
    if (0..3).any(|k| extent[k] == 0 || extent[k] > record.dims[k]) {
        return Err(Error::InvalidArgument(format!(
            "patch {extent:?} does not fit volume {:?}",
            record.dims
        )));
    }
    let room = [0, 1, 2].map(|k| record.dims[k] - extent[k]);
    let pick_fg = rng.uniform() < fg_bias;
    let fg = if pick_fg { record.label.indices() } else { Vec::new() };
    let corner = if !fg.is_empty() {
        let i = fg[rng.below(fg.len())];
        let [_, h, w] = record.dims;
        let centre = [i / (h * w), (i / w) % h, i % w];
        [0, 1, 2].map(|k| centre[k].saturating_sub(extent[k] / 2).min(room[k]))
    } else {
        room.map(|r| rng.below(r + 1))
    };
    Ok(crop(record, corner, extent))
}

fn crop(record: &VolumeRecord, corner: [usize; 3], extent: [usize; 3]) -> Patch {
    let [_, h, w] = record.dims;
    let mut image = Vec::with_capacity(extent.iter().product());
    let mut bits = Vec::with_capacity(extent.iter().product());
    for z in corner[0]..corner[0] + extent[0] {
        for y in corner[1]..corner[1] + extent[1] {
            let start = (z * h + y) * w + corner[2];
            image.extend_from_slice(&record.image[start..start + extent[2]]);
            bits.extend_from_slice(&record.label.bits()[start..start + extent[2]]);
        }
    }
    Patch {
        corner,
        image,
        label: VoxelMask::new(extent, bits).expect("cropped extents"),
    }
}

/// Stacks patches into an input tensor `[B, 1, D, H, W]` and their labels.
pub fn stack_patches<T: Element>(patches: &[Patch]) -> Result<(Tensor<T>, Vec<VoxelMask>)> {
    let first = patches
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
        .label
        .dims();
    let data: Vec<T> = patches.iter().flat_map(|p| p.image.iter().map(|&v| T::of(v as f64))).collect();
    let x = Tensor::from_vec(data, &[patches.len(), 1, first[0], first[1], first[2]])?;
    Ok((x, patches.iter().map(|p| p.label.clone()).collect()))
}

/// Whole-volume input tensor `[1, 1, D, H, W]`.
pub fn volume_tensor<T: Element>(record: &VolumeRecord) -> Result<Tensor<T>> {
    let [d, h, w] = record.dims;
    Tensor::from_vec(record.image.iter().map(|&v| T::of(v as f64)).collect(), &[1, 1, d, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(3, 16, 5);
        let b = gen_synthetic(3, 16, 5);
        assert_eq!(a, b);
        assert_ne!(a[0].image, gen_synthetic(1, 16, 6)[0].image);
    }

    #[test]
    fn easy_volumes_are_separable() {
        let r = &gen_synthetic_with(&SyntheticSpec {
            count: 1,
            extent: [16; 3],
            difficulty: 0.0,
            seed: 1,
        })[0];
        for (v, &fg) in r.image.iter().zip(r.label.bits()) {
            assert_eq!(*v, if fg { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn full_extent_patch_is_the_volume() {
        let r = &gen_synthetic(1, 8, 2)[0];
        let mut rng = SeedStream::new(0);
        let p = sample_patch(r, [8; 3], 0.5, &mut rng).unwrap();
        assert_eq!(p.image, r.image);
        assert_eq!(p.label, r.label);
        assert!(sample_patch(r, [9, 8, 8], 0.5, &mut rng).is_err());
    }

    #[test]
    fn foreground_bias_hits_foreground() {
        let r = &gen_synthetic(1, 16, 3)[0];
        let mut rng = SeedStream::new(1);
        for _ in 0..50 {
            assert!(sample_patch(r, [4; 3], 1.0, &mut rng).unwrap().label.count() > 0);
        }
    }
}
