//! Shape-changing and reducing operations. All are linear, so each backward
//! pass is the matching scatter or gather.

use super::{numel_of, strides_of, Element, Tensor};
use crate::error::{Error, Result};

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let nd = out_shape.len();
    if nd == 0 {
        return (data.to_vec(), out_shape);
    }
    let inner = out_shape[nd - 1];
    let step = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        let mut s = base;
        for _ in 0..inner {
            out.push(data[s]);
            s += step;
        }
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            "reshape",
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`. Materialises a copy.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for rank {nd}")));
        }
        let (data, out_shape) = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0; nd];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            "permute",
            Box::new(move |ctx| vec![Some(permute_data(ctx.grad, &grad_shape, &inverse).0)]),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), a)?;
        check_axis(self.shape(), b)?;
        let mut perm: Vec<usize> = (0..self.ndim()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        check_axis(first.shape(), axis)?;
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(Tensor::from_op(
            data,
            shape,
            parts.to_vec(),
            "concat",
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &len) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&ctx.grad[pos..pos + len * inner]);
                        pos += len * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        if len == 0 || start + len > self.dim(axis) {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            "narrow",
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    g[base..base + len * inner].copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        check_axis(self.shape(), axis)?;
        if sizes.iter().sum::<usize>() != self.dim(axis) {
            return Err(Error::shape(format!("split sizes {sizes:?} do not cover axis {axis} of {:?}", self.shape())));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = self.narrow(axis, start, s);
                start += s;
                t
            })
            .collect()
    }

    /// Gathers `indices` along `axis`; repeated indices accumulate in backward.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        if indices.is_empty() {
            return Err(Error::shape("index_select with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::shape(format!("index {bad} out of range for axis {axis} of {:?}", self.shape())));
        }
        let n = indices.len();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                data.extend_from_slice(&self.data()[base..base + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = n;
        let indices = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            "index_select",
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); outer * len * inner];
                let mut pos = 0;
                for o in 0..outer {
                    for &i in &indices {
                        let base = (o * len + i) * inner;
                        for (dst, &src) in g[base..base + inner].iter_mut().zip(&ctx.grad[pos..pos + inner]) {
                            *dst = *dst + src;
                        }
                        pos += inner;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Sum over `axis`; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        let x = self.data();
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            "sum_axis",
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        g.extend_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let n = self.dim(axis) as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            Vec::new(),
            vec![self.clone()],
            "sum_all",
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeedStream;

    #[test]
    fn permute_roundtrip() {
        let mut rng = SeedStream::new(1);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let y = x.permute(&[2, 0, 3, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 5, 3]);
        let back = y.permute(&[1, 3, 0, 2]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn permute_moves_elements() {
        let x = Tensor::<f64>::from_vec((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        assert_eq!(x.transpose(0, 1).unwrap().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn concat_of_split_is_identity() {
        let mut rng = SeedStream::new(2);
        let x = Tensor::<f64>::randn(&[2, 7, 3], 1.0, &mut rng);
        let parts = x.split(1, &[3, 2, 2]).unwrap();
        let y = Tensor::concat(&parts, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn reduce_sum_of_ones() {
        let x = Tensor::<f64>::ones(&[3, 5]);
        assert_eq!(x.sum_axis(1, false).unwrap().data(), &[5.0, 5.0, 5.0]);
        assert_eq!(x.sum_axis(0, true).unwrap().shape(), &[1, 5]);
        assert_eq!(x.mean_all().item().unwrap(), 1.0);
    }

    #[test]
    fn index_select_backward_scatters() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap().requires_grad();
        let y = x.index_select(0, &[2, 0, 2]).unwrap();
        assert_eq!(y.data(), &[3.0, 1.0, 3.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn bad_extents_are_shape_errors() {
        let x = Tensor::<f64>::ones(&[2, 3]);
        assert!(x.reshape(&[4]).is_err());
        assert!(x.permute(&[0, 0]).is_err());
        assert!(x.narrow(1, 2, 2).is_err());
        assert!(x.index_select(0, &[2]).is_err());
        assert!(Tensor::concat(&[x.clone(), Tensor::ones(&[2, 2])], 0).is_err());
    }
}
