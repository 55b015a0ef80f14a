use super::elementwise::{broadcast_shape, for_each_broadcast};
use super::{numel_of, strides_of, Element, Tensor};
use crate::error::{Error, Result};

/// Placement of a matrix inside a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(off: usize, cols: usize) -> Self {
        Layout { off, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` block.
    pub fn transposed(off: usize, cols: usize) -> Self {
        Layout { off, rs: 1, cs: cols }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.off + rows.saturating_sub(1) * self.rs + cols.saturating_sub(1) * self.cs
    }
}

/// `C[m x n] = alpha * A[m x k] B[k x n] + beta * C` with bounds-checked layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || la.last(m, k) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || lb.last(k, n) < b.len(), "gemm: B out of bounds");
    assert!(lc.last(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access in bounds, and `c`
    // is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.off),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.off),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.off),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

impl<T: Element> Tensor<T> {
    /// Batched matrix product `[..., m, k] @ [..., k, n]` with broadcast batch axes.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul inner extents differ: {sa:?} @ {sb:?}")));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);

        let pairs = batch_pairs(batch_a, batch_b, &batch);
        let mut out = vec![T::zero(); numel_of(&out_shape)];
        let (ad, bd) = (self.data(), other.data());
        if batch_b.is_empty() {
            // fold the batch into the row count: one large product
            let rows = numel_of(batch_a) * m;
            gemm(rows, k, n, T::one(), ad, Layout::row_major(0, k), bd, Layout::row_major(0, n), T::zero(), &mut out, Layout::row_major(0, n));
        } else {
            for &(o, ia, ib) in &pairs {
                gemm(m, k, n, T::one(), ad, Layout::row_major(ia * m * k, k), bd, Layout::row_major(ib * k * n, n), T::zero(), &mut out, Layout::row_major(o * m * n, n));
            }
        }

        let fold = batch_b.is_empty();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            "matmul",
            Box::new(move |ctx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let (ad, bd, g) = (a.data(), b.data(), ctx.grad);
                let mut ga = a.is_tracked().then(|| vec![T::zero(); a.numel()]);
                let mut gb = b.is_tracked().then(|| vec![T::zero(); b.numel()]);
                if fold {
                    let rows = a.numel() / k;
                    if let Some(ga) = ga.as_mut() {
                        gemm(rows, n, k, T::one(), g, Layout::row_major(0, n), bd, Layout::transposed(0, n), T::zero(), ga, Layout::row_major(0, k));
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm(k, rows, n, T::one(), ad, Layout::transposed(0, k), g, Layout::row_major(0, n), T::zero(), gb, Layout::row_major(0, n));
                    }
                } else {
                    for &(o, ia, ib) in &pairs {
                        if let Some(ga) = ga.as_mut() {
                            gemm(m, n, k, T::one(), g, Layout::row_major(o * m * n, n), bd, Layout::transposed(ib * k * n, n), T::one(), ga, Layout::row_major(ia * m * k, k));
                        }
                        if let Some(gb) = gb.as_mut() {
                            gemm(k, m, n, T::one(), ad, Layout::transposed(ia * m * k, k), g, Layout::row_major(o * m * n, n), T::one(), gb, Layout::row_major(ib * k * n, n));
                        }
                    }
                }
                vec![ga, gb]
            }),
        ))
    }
}

/// `(out_batch, a_batch, b_batch)` matrix indices under broadcasting.
fn batch_pairs(ba: &[usize], bb: &[usize], out: &[usize]) -> Vec<(usize, usize, usize)> {
    if out.is_empty() {
        return vec![(0, 0, 0)];
    }
    let sa = batch_strides(ba, out);
    let sb = batch_strides(bb, out);
    let mut pairs = Vec::with_capacity(numel_of(out));
    for_each_broadcast(out, &sa, &sb, |o, i, j| pairs.push((o, i, j)));
    pairs
}

fn batch_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { own[i - lead] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeedStream;

    #[test]
    fn identity_product() {
        let eye = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
    }

    #[test]
    fn selector_row() {
        let sel = Tensor::<f64>::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap();
        let col = Tensor::<f64>::from_vec(vec![7.5, -3.0], &[2, 1]).unwrap();
        assert_eq!(sel.matmul(&col).unwrap().data(), &[7.5]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = SeedStream::new(11);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for l in 0..4 {
                    s += a.data()[i * 4 + l] * b.data()[l * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_broadcast() {
        let mut rng = SeedStream::new(5);
        let a = Tensor::<f64>::randn(&[2, 1, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 5]);
        let a1 = a.narrow(0, 1, 1).unwrap().reshape(&[3, 4]).unwrap();
        let b2 = b.narrow(0, 2, 1).unwrap().reshape(&[4, 5]).unwrap();
        let want = a1.matmul(&b2).unwrap();
        let got = c.narrow(0, 1, 1).unwrap().narrow(1, 2, 1).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_mismatch_is_shape_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }
}
