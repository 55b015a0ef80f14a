//! Softmax and normalisation layers.

use super::structural::split_at_axis;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// How affine parameters index into a normalised group.
#[derive(Clone, Copy)]
enum Affine {
    /// One scale/shift per group, cycling with period `channels` (instance norm).
    PerGroup { channels: usize },
    /// One scale/shift per position inside the group (layer norm).
    PerPosition,
}

impl Affine {
    fn index(self, group: usize, pos: usize) -> usize {
        match self {
            Affine::PerGroup { channels } => group % channels,
            Affine::PerPosition => pos,
        }
    }
}

fn normalise<T: Element>(
    x: &Tensor<T>,
    group: usize,
    eps: f64,
    affine: Affine,
    gamma: Option<&Tensor<T>>,
    beta: Option<&Tensor<T>>,
    op: &'static str,
) -> Tensor<T> {
    let xd = x.data();
    let groups = xd.len() / group;
    let eps = T::of(eps);
    let n = T::of(group as f64);
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); groups];
    for gi in 0..groups {
        let src = &xd[gi * group..(gi + 1) * group];
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[gi] = is;
        for (d, &v) in xhat[gi * group..(gi + 1) * group].iter_mut().zip(src) {
            *d = (v - mean) * is;
        }
    }
    let mut out = xhat.clone();
    if gamma.is_some() || beta.is_some() {
        for gi in 0..groups {
            for p in 0..group {
                let a = affine.index(gi, p);
                let i = gi * group + p;
                if let Some(g) = gamma {
                    out[i] = out[i] * g.data()[a];
                }
                if let Some(b) = beta {
                    out[i] = out[i] + b.data()[a];
                }
            }
        }
    }

    let mut parents = vec![x.clone()];
    parents.extend(gamma.cloned());
    parents.extend(beta.cloned());
    let (has_gamma, has_beta) = (gamma.is_some(), beta.is_some());
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        parents,
        op,
        Box::new(move |ctx| {
            let g = ctx.grad;
            let gamma = has_gamma.then(|| ctx.parents[1].data());
            let mut gx = vec![T::zero(); g.len()];
            let mut ggamma = gamma.map(|gm| vec![T::zero(); gm.len()]);
            let mut gbeta = has_beta.then(|| vec![T::zero(); ctx.parents[ctx.parents.len() - 1].numel()]);
            let mut gxhat = vec![T::zero(); group];
            for gi in 0..groups {
                let base = gi * group;
                let mut mean_g = T::zero();
                let mut mean_gx = T::zero();
                for p in 0..group {
                    let a = affine.index(gi, p);
                    let i = base + p;
                    if let Some(gg) = ggamma.as_mut() {
                        gg[a] = gg[a] + g[i] * xhat[i];
                    }
                    if let Some(gb) = gbeta.as_mut() {
                        gb[a] = gb[a] + g[i];
                    }
                    let v = match gamma {
                        Some(gm) => g[i] * gm[a],
                        None => g[i],
                    };
                    gxhat[p] = v;
                    mean_g = mean_g + v;
                    mean_gx = mean_gx + v * xhat[i];
                }
                mean_g = mean_g / n;
                mean_gx = mean_gx / n;
                for p in 0..group {
                    let i = base + p;
                    gx[i] = inv_std[gi] * (gxhat[p] - mean_g - xhat[i] * mean_gx);
                }
            }
            let mut grads = vec![Some(gx)];
            if has_gamma {
                grads.push(ggamma);
            }
            if has_beta {
                grads.push(gbeta);
            }
            grads
        }),
    )
}

impl<T: Element> Tensor<T> {
    /// Softmax along `axis`, shifted by the row maximum. NaN inputs propagate.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::shape(format!("softmax axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = x[at(0)];
                for l in 1..len {
                    // NaN-propagating max
                    let v = x[at(l)];
                    if v > m || v.is_nan() {
                        m = v;
                    }
                }
                let mut s = T::zero();
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    out[at(l)] = e;
                    s = s + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / s;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            "softmax",
            Box::new(move |ctx| {
                let (g, y) = (ctx.grad, ctx.out);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::shape(format!("log_softmax axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..len).map(|l| (x[at(l)] - m).exp()).sum::<T>().ln();
                for l in 0..len {
                    out[at(l)] = x[at(l)] - lse;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            "log_softmax",
            Box::new(move |ctx| {
                let (g, y) = (ctx.grad, ctx.out);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gs: T = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = g[at(l)] - y[at(l)].exp() * gs;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Per-(batch, channel) normalisation over all spatial positions of
    /// `[B, C, ...]`, followed by an optional per-channel affine map.
    pub fn instance_norm(&self, gamma: Option<&Tensor<T>>, beta: Option<&Tensor<T>>, eps: f64) -> Result<Tensor<T>> {
        if self.ndim() < 3 {
            return Err(Error::shape(format!("instance_norm needs [B, C, ...], got {:?}", self.shape())));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("instance_norm eps must be positive".into()));
        }
        let c = self.dim(1);
        for p in gamma.iter().chain(beta.iter()) {
            if p.shape() != [c] {
                return Err(Error::shape(format!("instance_norm affine shape {:?}, want [{c}]", p.shape())));
            }
        }
        let group = self.shape()[2..].iter().product();
        Ok(normalise(self, group, eps, Affine::PerGroup { channels: c }, gamma, beta, "instance_norm"))
    }

    /// Normalisation over the trailing `normalized` axes of each token.
    pub fn layer_norm(
        &self,
        normalized: usize,
        gamma: Option<&Tensor<T>>,
        beta: Option<&Tensor<T>>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        if normalized == 0 || normalized > self.ndim() {
            return Err(Error::shape(format!("layer_norm over {normalized} axes of {:?}", self.shape())));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let tail = &self.shape()[self.ndim() - normalized..];
        for p in gamma.iter().chain(beta.iter()) {
            if p.shape() != tail {
                return Err(Error::shape(format!("layer_norm affine shape {:?}, want {tail:?}", p.shape())));
            }
        }
        let group = tail.iter().product();
        Ok(normalise(self, group, eps, Affine::PerPosition, gamma, beta, "layer_norm"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeedStream;

    #[test]
    fn softmax_basic_cases() {
        let one = Tensor::<f64>::from_vec(vec![3.7], &[1]).unwrap();
        assert_eq!(one.softmax(0).unwrap().data(), &[1.0]);
        let flat = Tensor::<f64>::zeros(&[3]).softmax(0).unwrap();
        for &v in flat.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::<f64>::from_vec(vec![1000.0, 0.0], &[2]).unwrap().softmax(0).unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-12);
        assert!(big.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_propagates_nan() {
        let x = Tensor::<f64>::from_vec(vec![f64::NAN, 0.0], &[2]).unwrap();
        assert!(x.softmax(0).unwrap().data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn softmax_rows_sum_to_one_on_inner_axis() {
        let mut rng = SeedStream::new(9);
        let x = Tensor::<f64>::randn(&[2, 4, 3], 3.0, &mut rng);
        let y = x.softmax(1).unwrap();
        let s = y.sum_axis(1, false).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut rng = SeedStream::new(4);
        let x = Tensor::<f64>::randn(&[3, 5], 2.0, &mut rng);
        let a = x.log_softmax(1).unwrap();
        let b = x.softmax(1).unwrap().ln();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_constant_input_gives_zero() {
        let x = Tensor::<f64>::full(&[1, 2, 2, 2, 2], 5.0);
        let y = x.instance_norm(None, None, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_moments() {
        let mut rng = SeedStream::new(8);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4, 4], 2.5, &mut rng).add_scalar(1.5);
        let y = x.instance_norm(None, None, 1e-12).unwrap();
        for chunk in y.data().chunks(64) {
            let mean: f64 = chunk.iter().sum::<f64>() / 64.0;
            let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_leaves_normalized_vector() {
        // zero mean, unit (biased) variance already
        let v = [1.0, -1.0, 1.0, -1.0];
        let x = Tensor::<f64>::from_vec(v.to_vec(), &[1, 4]).unwrap();
        let y = x.layer_norm(1, None, None, 1e-10).unwrap();
        for (a, b) in y.data().iter().zip(v) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_eps_and_affine() {
        let x = Tensor::<f64>::ones(&[1, 2, 3]);
        assert!(x.instance_norm(None, None, 0.0).is_err());
        let g = Tensor::<f64>::ones(&[3]);
        assert!(x.instance_norm(Some(&g), None, 1e-5).is_err());
        assert!(x.layer_norm(1, Some(&g), None, 1e-5).is_ok());
    }
}
