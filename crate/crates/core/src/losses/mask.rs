use crate::error::{Error, Result};

/// Binary mask over a `[D, H, W]` volume, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VoxelMask {
    dims: [usize; 3],
    bits: Vec<bool>,
}

impl VoxelMask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != bits.len() {
            return Err(Error::shape(format!("mask {dims:?} needs {} voxels, got {}", dims.iter().product::<usize>(), bits.len())));
        }
        Ok(VoxelMask { dims, bits })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        VoxelMask {
            dims,
            bits: vec![false; dims.iter().product()],
        }
    }

    /// Foreground wherever `labels` is nonzero.
    pub fn from_labels(labels: &[u8], dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, labels.iter().map(|&l| l != 0).collect())
    }

    pub fn from_indices(dims: [usize; 3], indices: &[usize]) -> Self {
        let mut m = Self::empty(dims);
        for &i in indices {
            m.bits[i] = true;
        }
        m
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn linear(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.bits[self.linear(d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, v: bool) {
        let i = self.linear(d, h, w);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Linear indices of set voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn complement(&self) -> Self {
        VoxelMask {
            dims: self.dims,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        assert_eq!(self.dims, other.dims, "mask extents differ");
        VoxelMask {
            dims: self.dims,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn and(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a || b)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// `iterations`-fold binary dilation with the full 3x3x3 structuring
    /// element, clipped at the volume border.
    pub fn dilate(&self, iterations: usize) -> Self {
        let mut cur = self.clone();
        for _ in 0..iterations {
            // the 3x3x3 cube is separable into three 3-tap lines
            for axis in 0..3 {
                cur = cur.dilate_axis(axis);
            }
        }
        cur
    }

    fn dilate_axis(&self, axis: usize) -> Self {
        let [d, h, w] = self.dims;
        let stride = [h * w, w, 1][axis];
        let extent = self.dims[axis];
        let mut out = self.bits.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let pos = [z, y, x][axis];
                    let i = (z * h + y) * w + x;
                    if self.bits[i] {
                        continue;
                    }
                    let before = pos > 0 && self.bits[i - stride];
                    let after = pos + 1 < extent && self.bits[i + stride];
                    out[i] = before || after;
                }
            }
        }
        VoxelMask { dims: self.dims, bits: out }
    }
}

/// `iterations`-fold 3x3x3 dilation of `mask`.
pub fn dilate(mask: &VoxelMask, iterations: usize) -> VoxelMask {
    mask.dilate(iterations)
}
