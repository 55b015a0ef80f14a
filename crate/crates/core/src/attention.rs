//! Single-head self-attention along one spatial axis of a 3-D volume.
//!
//! Every line of voxels parallel to the chosen axis attends only within
//! itself, so the cost is `O(L1 * L2 * L3 * L * C)` for axis length `L`
//! rather than quadratic in the full volume.

use crate::error::{Error, Result};
use crate::module::{constant, impl_module, kaiming};
use crate::tensor::{Element, SeedStream, Tensor};

/// Spatial axis of a `[B, C, L1, L2, L3]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis3 {
    L1,
    L2,
    L3,
}

impl Axis3 {
    /// Permutation moving this axis to position 3 and channels last.
    fn to_lines(self) -> [usize; 5] {
        match self {
            Axis3::L1 => [0, 3, 4, 2, 1],
            Axis3::L2 => [0, 2, 4, 3, 1],
            Axis3::L3 => [0, 2, 3, 4, 1],
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Query, key and value projections (channel-mixing, i.e. 1x1x1
/// convolutions) plus an optional output projection.
#[derive(Debug, Clone)]
pub struct AxialAttention<T: Element> {
    /// `[C, C]` projections applied to channel-last tokens.
    pub query: Tensor<T>,
    pub query_bias: Tensor<T>,
    pub key: Tensor<T>,
    pub key_bias: Tensor<T>,
    pub value: Tensor<T>,
    pub value_bias: Tensor<T>,
    pub out: Option<Tensor<T>>,
    pub out_bias: Option<Tensor<T>>,
}

impl_module!(AxialAttention {
    query,
    query_bias,
    key,
    key_bias,
    value,
    value_bias,
    out,
    out_bias
});

struct Lines<T: Element> {
    tokens: Tensor<T>,
    grid: [usize; 5],
    perm: [usize; 5],
}

impl<T: Element> AxialAttention<T> {
    pub fn init(channels: usize, out_proj: bool, rng: &mut SeedStream) -> Self {
        let mut proj = || kaiming(&[channels, channels], channels, rng);
        let (query, key, value) = (proj(), proj(), proj());
        let out = out_proj.then(proj);
        AxialAttention {
            query,
            query_bias: constant(&[channels], 0.0),
            key,
            key_bias: constant(&[channels], 0.0),
            value,
            value_bias: constant(&[channels], 0.0),
            out,
            out_bias: out_proj.then(|| constant(&[channels], 0.0)),
        }
    }

    pub fn channels(&self) -> usize {
        self.query.dim(0)
    }

    fn lines(&self, x: &Tensor<T>, axis: Axis3) -> Result<Lines<T>> {
        if x.ndim() != 5 || x.dim(1) != self.channels() {
            return Err(Error::shape(format!(
                "axial attention with {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let perm = axis.to_lines();
        let moved = x.permute(&perm)?;
        let s = moved.shape();
        let grid = [s[0], s[1], s[2], s[3], s[4]];
        let tokens = moved.reshape(&[s[0] * s[1] * s[2], s[3], s[4]])?;
        Ok(Lines { tokens, grid, perm })
    }

    fn scores(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let q = tokens.matmul(&self.query)?.add(&self.query_bias)?;
        let k = tokens.matmul(&self.key)?.add(&self.key_bias)?;
        let scale = 1.0 / (self.channels() as f64).sqrt();
        q.matmul(&k.transpose(1, 2)?)?.scale(scale).softmax(2)
    }

    /// Attention weights `[lines, L, L]`; each row sums to one.
    pub fn weights(&self, x: &Tensor<T>, axis: Axis3) -> Result<Tensor<T>> {
        let lines = self.lines(x, axis)?;
        self.scores(&lines.tokens)
    }

    /// The attention contribution before the residual connection.
    pub fn update(&self, x: &Tensor<T>, axis: Axis3) -> Result<Tensor<T>> {
        let Lines { tokens, grid, perm } = self.lines(x, axis)?;
        let v = tokens.matmul(&self.value)?.add(&self.value_bias)?;
        let mut y = self.scores(&tokens)?.matmul(&v)?;
        if let (Some(w), Some(b)) = (&self.out, &self.out_bias) {
            y = y.matmul(w)?.add(b)?;
        }
        y.reshape(&grid)?.permute(&inverse_perm(&perm))
    }

    /// `x + update(x, axis)`.
    pub fn forward(&self, x: &Tensor<T>, axis: Axis3) -> Result<Tensor<T>> {
        x.add(&self.update(x, axis)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::Module;
    use crate::verify::gradcheck::{check_gradients, GradCheckConfig};

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = SeedStream::new(1);
        let att = AxialAttention::<f64>::init(3, false, &mut rng);
        let x = Tensor::randn(&[1, 3, 2, 4, 5], 1.0, &mut rng);
        for axis in [Axis3::L1, Axis3::L2, Axis3::L3] {
            let w = att.weights(&x, axis).unwrap();
            let l = w.dim(2);
            for row in w.data().chunks(l) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lines_do_not_interact() {
        let mut rng = SeedStream::new(2);
        let att = AxialAttention::<f64>::init(2, true, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 2, 3, 3, 3], 1.0, &mut rng);
        let y0 = att.update(&x, Axis3::L3).unwrap().to_vec();
        // perturb the line at (l1=0, l2=0); every other line must be unchanged
        let mut d = x.to_vec();
        d[1] += 1.0;
        let y1 = att.update(&Tensor::from_vec(d, x.shape()).unwrap(), Axis3::L3).unwrap().to_vec();
        for (i, (a, b)) in y0.iter().zip(&y1).enumerate() {
            let (l1, l2) = ((i / 9) % 3, (i / 3) % 3);
            if (l1, l2) != (0, 0) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn gradients_along_each_axis() {
        let mut rng = SeedStream::new(3);
        let att = AxialAttention::<f64>::init(2, true, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 2, 2, 3, 2], 1.0, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(att.named_params().into_iter().map(|(_, p)| p));
        for axis in [Axis3::L1, Axis3::L2, Axis3::L3] {
            let rep = check_gradients(
                |v| {
                    let mut a = att.clone();
                    let mut it = v[1..].iter();
                    a.visit_params_mut("", &mut |_, p| *p = it.next().unwrap().clone());
                    a.forward(&v[0], axis)
                },
                &inputs,
                GradCheckConfig::default(),
                &mut rng,
            )
            .unwrap();
            assert!(rep.passed(), "{axis:?}: {:?}", rep.failures);
        }
    }

    #[test]
    fn rejects_wrong_channels() {
        let mut rng = SeedStream::new(4);
        let att = AxialAttention::<f32>::init(4, false, &mut rng);
        let x = Tensor::<f32>::zeros(&[1, 3, 2, 2, 2]);
        assert!(att.forward(&x, Axis3::L1).is_err());
    }
}
