//! Unary maps, scalar maps and broadcasting binary arithmetic.

use super::{numel_of, strides_of, Element, Tensor};
use crate::error::{Error, Result};

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every output position.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel_of(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let nd = out.len();
    let inner = out[nd - 1];
    let (ia_step, ib_step) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut ia, mut ib) = (oa, ob);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // odometer over the outer axes
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn binary<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: fn(T, T) -> T,
    da: fn(T, T) -> T,
    db: fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut data = vec![T::zero(); numel_of(&out_shape)];
        for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
        data
    };
    let shape_out = out_shape.clone();
    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        op,
        Box::new(move |ctx| {
            let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut ga = a.is_tracked().then(|| vec![T::zero(); a.numel()]);
            let mut gb = b.is_tracked().then(|| vec![T::zero(); b.numel()]);
            let sa = broadcast_strides(a.shape(), &shape_out);
            let sb = broadcast_strides(b.shape(), &shape_out);
            for_each_broadcast(&shape_out, &sa, &sb, |o, i, j| {
                let g = ctx.grad[o];
                if let Some(ga) = ga.as_mut() {
                    ga[i] = ga[i] + g * da(ad[i], bd[j]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] = gb[j] + g * db(ad[i], bd[j]);
                }
            });
            vec![ga, gb]
        }),
    ))
}

impl<T: Element> Tensor<T> {
    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map_unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            op,
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(x.iter().zip(ctx.out))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, "add", |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, "sub", |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, "div", |x, y| x / y, |_, y| T::one() / y, |x, y| -x / (y * y))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.map_unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.map_unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.map_unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    /// `max(x, 0)`; the derivative at exactly zero is zero.
    pub fn relu(&self) -> Tensor<T> {
        self.map_unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map_unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.map_unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map_unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.map_unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.map_unary("sqrt", |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor<T> {
        self.map_unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// `max(x, c)`; gradient passes only where `x > c`.
    pub fn clamp_min(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.map_unary(
            "clamp_min",
            move |x| if x > c { x } else { c },
            move |x, _| if x > c { T::one() } else { T::zero() },
        )
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec(), s).unwrap()
    }

    #[test]
    fn relu_and_silu_values() {
        assert_eq!(t(&[-2.0], &[1]).relu().data(), &[0.0]);
        assert_eq!(t(&[0.0], &[1]).silu().data(), &[0.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let x = t(&[0.0, 1.0, -1.0], &[3]).requires_grad();
        x.relu().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn add_same_shape() {
        assert_eq!(t(&[1.0, 2.0], &[2]).add(&t(&[3.0, 4.0], &[2])).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcasting_matches_explicit_tiling() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let row = t(&[10.0, 20.0, 30.0], &[3]);
        let col = t(&[100.0, 200.0], &[2, 1]);
        assert_eq!(a.add(&row).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        assert_eq!(a.mul(&col).unwrap().data(), &[100.0, 200.0, 300.0, 800.0, 1000.0, 1200.0]);
        let outer = col.sub(&row).unwrap();
        assert_eq!(outer.shape(), &[2, 3]);
        assert_eq!(outer.data(), &[90.0, 80.0, 70.0, 190.0, 180.0, 170.0]);
    }

    #[test]
    fn incompatible_broadcast_is_shape_error() {
        let err = t(&[1.0, 2.0], &[2]).add(&t(&[1.0, 2.0, 3.0], &[3])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn broadcast_gradient_sums_over_tiled_axes() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).requires_grad();
        let b = t(&[1.0, 2.0, 3.0], &[3]).requires_grad();
        a.mul(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn softplus_is_stable() {
        let y = t(&[-800.0, 0.0, 800.0], &[3]).softplus();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y.data()[2], 800.0);
    }
}
