//! 3-D convolution, transposed convolution and average pooling over
//! `[B, C, D, H, W]` volumes.
//!
//! Dense convolutions (`groups == 1`) lower to im2col + GEMM over chunks of
//! output planes; grouped and depthwise convolutions run as direct loops over
//! contiguous runs of the innermost axis.

use super::linalg::{gemm, Layout};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Geometry of a convolution in the forward (large input -> small output) sense.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Output indices `o` along `axis` with `0 <= o*s + k - p < in`, as `[lo, hi)`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (n, s, p, o) = (self.input[axis], self.stride[axis], self.padding[axis], self.output[axis]);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if n + p > k { ((n - 1 + p - k) / s + 1).min(o) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(kidx, out_offset, in_offset, len)` for every contiguous run of
    /// output positions along W whose tap `kidx` lands inside the input. The
    /// input index advances by `stride[2]` per output step. Only output planes
    /// in `planes` are visited.
    fn for_each_run(&self, planes: std::ops::Range<usize>, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        for kz in 0..kd {
            let (z0, z1) = self.valid(0, kz);
            for ky in 0..kh {
                let (y0, y1) = self.valid(1, ky);
                for kx in 0..kw {
                    let (x0, x1) = self.valid(2, kx);
                    if x1 <= x0 {
                        continue;
                    }
                    let kidx = (kz * kh + ky) * kw + kx;
                    let len = x1 - x0;
                    for oz in z0.max(planes.start)..z1.min(planes.end) {
                        let iz = oz * self.stride[0] + kz - self.padding[0];
                        for oy in y0..y1 {
                            let iy = oy * self.stride[1] + ky - self.padding[1];
                            let ix = x0 * self.stride[2] + kx - self.padding[2];
                            f(kidx, (oz * oh + oy) * ow + x0, (iz * ih + iy) * iw + ix, len);
                        }
                    }
                }
            }
        }
    }
}

/// Output planes per im2col chunk, keeping the column buffer near 4M entries.
fn planes_per_chunk(rows: usize, plane: usize, depth: usize) -> usize {
    (4_000_000 / (rows * plane).max(1)).clamp(1, depth)
}

/// Fills `col[(c, k), p]` for output planes `planes` of one batch item.
fn im2col<T: Element>(x: &[T], channels: usize, geo: &Geometry, planes: std::ops::Range<usize>, col: &mut [T]) {
    let kv = geo.kernel_volume();
    let plane = geo.output[1] * geo.output[2];
    let width = planes.len() * plane;
    let first = planes.start * plane;
    col[..channels * kv * width].fill(T::zero());
    let sx = geo.stride[2];
    let vin = geo.in_volume();
    for c in 0..channels {
        let xc = &x[c * vin..(c + 1) * vin];
        let base = c * kv;
        geo.for_each_run(planes.clone(), |kidx, o, i, len| {
            let row = &mut col[(base + kidx) * width + o - first..];
            for j in 0..len {
                row[j] = xc[i + j * sx];
            }
        });
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into `gx`.
fn col2im<T: Element>(col: &[T], channels: usize, geo: &Geometry, planes: std::ops::Range<usize>, gx: &mut [T]) {
    let kv = geo.kernel_volume();
    let plane = geo.output[1] * geo.output[2];
    let width = planes.len() * plane;
    let first = planes.start * plane;
    let sx = geo.stride[2];
    let vin = geo.in_volume();
    for c in 0..channels {
        let gc = &mut gx[c * vin..(c + 1) * vin];
        let base = c * kv;
        geo.for_each_run(planes.clone(), |kidx, o, i, len| {
            let row = &col[(base + kidx) * width + o - first..];
            for j in 0..len {
                gc[i + j * sx] = gc[i + j * sx] + row[j];
            }
        });
    }
}

fn dims5(t: &Tensor<impl Element>, what: &str) -> Result<[usize; 5]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::shape(format!("{what} must be rank 5, got {:?}", t.shape())))
}

fn add_bias<T: Element>(out: &mut [T], bias: Option<&Tensor<T>>, batch: usize, channels: usize, vol: usize) {
    if let Some(b) = bias {
        for (i, plane) in out.chunks_mut(vol).enumerate().take(batch * channels) {
            let v = b.data()[i % channels];
            plane.iter_mut().for_each(|o| *o = *o + v);
        }
    }
}

fn bias_grad<T: Element>(g: &[T], batch: usize, channels: usize, vol: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * vol;
            gb[c] = gb[c] + g[base..base + vol].iter().copied().sum::<T>();
        }
    }
    gb
}

/// Stride, padding and grouping of a [`Tensor::conv3d`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            stride: [stride; 3],
            padding: [padding; 3],
            groups,
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec::new(1, 0, 1)
    }
}

impl<T: Element> Tensor<T> {
    /// Cross-correlation of `[B, Cin, D, H, W]` with weights
    /// `[Cout, Cin / groups, kd, kh, kw]`.
    pub fn conv3d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
        let [batch, cin, d, h, w] = dims5(self, "conv3d input")?;
        let [cout, cin_g, kd, kh, kw] = dims5(weight, "conv3d weight")?;
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape(format!(
                "conv3d channels: input {cin}, weight {:?}, groups {groups}",
                weight.shape()
            )));
        }
        if spec.stride.contains(&0) {
            return Err(Error::shape("conv3d stride must be positive"));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(format!("conv3d bias {:?}, want [{cout}]", b.shape())));
            }
        }
        let input = [d, h, w];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * spec.padding[a];
            if padded < kernel[a] {
                return Err(Error::shape(format!("conv3d kernel {kernel:?} larger than padded input {input:?}")));
            }
            output[a] = (padded - kernel[a]) / spec.stride[a] + 1;
        }
        let geo = Geometry {
            input,
            output,
            kernel,
            stride: spec.stride,
            padding: spec.padding,
        };
        let (vin, vout, kv) = (geo.in_volume(), geo.out_volume(), geo.kernel_volume());
        let pointwise = groups == 1 && kv == 1 && spec.stride == [1; 3] && spec.padding == [0; 3];
        let x = self.data();
        let wd = weight.data();
        let mut out = vec![T::zero(); batch * cout * vout];

        if pointwise {
            for b in 0..batch {
                gemm(cout, cin, vout, T::one(), wd, Layout::row_major(0, cin), x, Layout::row_major(b * cin * vin, vin), T::zero(), &mut out, Layout::row_major(b * cout * vout, vout));
            }
        } else if groups == 1 {
            let rows = cin * kv;
            let plane = output[1] * output[2];
            let chunk = planes_per_chunk(rows, plane, output[0]);
            let mut col = vec![T::zero(); rows * chunk * plane];
            for b in 0..batch {
                let xb = &x[b * cin * vin..(b + 1) * cin * vin];
                for p0 in (0..output[0]).step_by(chunk) {
                    let planes = p0..(p0 + chunk).min(output[0]);
                    let width = planes.len() * plane;
                    im2col(xb, cin, &geo, planes.clone(), &mut col);
                    let lc = Layout { off: b * cout * vout + p0 * plane, rs: vout, cs: 1 };
                    gemm(cout, rows, width, T::one(), wd, Layout::row_major(0, rows), &col, Layout::row_major(0, width), T::zero(), &mut out, lc);
                }
            }
        } else {
            let (cout_g, sx) = (cout / groups, spec.stride[2]);
            for b in 0..batch {
                for co in 0..cout {
                    let g = co / cout_g;
                    let dst = &mut out[(b * cout + co) * vout..(b * cout + co + 1) * vout];
                    for cl in 0..cin_g {
                        let ci = g * cin_g + cl;
                        let src = &x[(b * cin + ci) * vin..(b * cin + ci + 1) * vin];
                        let wk = &wd[(co * cin_g + cl) * kv..(co * cin_g + cl + 1) * kv];
                        geo.for_each_run(0..output[0], |kidx, o, i, len| {
                            let wv = wk[kidx];
                            for j in 0..len {
                                dst[o + j] = dst[o + j] + wv * src[i + j * sx];
                            }
                        });
                    }
                }
            }
        }
        add_bias(&mut out, bias, batch, cout, vout);

        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Tensor::from_op(
            out,
            vec![batch, cout, output[0], output[1], output[2]],
            parents,
            "conv3d",
            Box::new(move |ctx| {
                let (xt, wt) = (&ctx.parents[0], &ctx.parents[1]);
                let (x, wd, g) = (xt.data(), wt.data(), ctx.grad);
                let mut gx = xt.is_tracked().then(|| vec![T::zero(); x.len()]);
                let mut gw = wt.is_tracked().then(|| vec![T::zero(); wd.len()]);
                if pointwise {
                    for b in 0..batch {
                        let lg = Layout::row_major(b * cout * vout, vout);
                        if let Some(gx) = gx.as_mut() {
                            gemm(cin, cout, vout, T::one(), wd, Layout::transposed(0, cin), g, lg, T::zero(), gx, Layout::row_major(b * cin * vin, vin));
                        }
                        if let Some(gw) = gw.as_mut() {
                            gemm(cout, vout, cin, T::one(), g, lg, x, Layout::transposed(b * cin * vin, vin), T::one(), gw, Layout::row_major(0, cin));
                        }
                    }
                } else if groups == 1 {
                    let rows = cin * kv;
                    let plane = output[1] * output[2];
                    let chunk = planes_per_chunk(rows, plane, output[0]);
                    let mut col = vec![T::zero(); rows * chunk * plane];
                    let mut gcol = vec![T::zero(); rows * chunk * plane];
                    for b in 0..batch {
                        let xb = &x[b * cin * vin..(b + 1) * cin * vin];
                        for p0 in (0..output[0]).step_by(chunk) {
                            let planes = p0..(p0 + chunk).min(output[0]);
                            let width = planes.len() * plane;
                            let lg = Layout { off: b * cout * vout + p0 * plane, rs: vout, cs: 1 };
                            if let Some(gw) = gw.as_mut() {
                                im2col(xb, cin, &geo, planes.clone(), &mut col);
                                gemm(cout, width, rows, T::one(), g, lg, &col, Layout::transposed(0, width), T::one(), gw, Layout::row_major(0, rows));
                            }
                            if let Some(gx) = gx.as_mut() {
                                gemm(rows, cout, width, T::one(), wd, Layout::transposed(0, rows), g, lg, T::zero(), &mut gcol, Layout::row_major(0, width));
                                col2im(&gcol, cin, &geo, planes, &mut gx[b * cin * vin..(b + 1) * cin * vin]);
                            }
                        }
                    }
                } else {
                    let (cout_g, sx) = (cout / groups, geo.stride[2]);
                    for b in 0..batch {
                        for co in 0..cout {
                            let grp = co / cout_g;
                            let go = &g[(b * cout + co) * vout..(b * cout + co + 1) * vout];
                            for cl in 0..cin_g {
                                let ci = grp * cin_g + cl;
                                let xs = (b * cin + ci) * vin;
                                let wo = (co * cin_g + cl) * kv;
                                geo.for_each_run(0..output[0], |kidx, o, i, len| {
                                    if let Some(gx) = gx.as_mut() {
                                        let wv = wd[wo + kidx];
                                        for j in 0..len {
                                            gx[xs + i + j * sx] = gx[xs + i + j * sx] + wv * go[o + j];
                                        }
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        let mut acc = T::zero();
                                        for j in 0..len {
                                            acc = acc + go[o + j] * x[xs + i + j * sx];
                                        }
                                        gw[wo + kidx] = gw[wo + kidx] + acc;
                                    }
                                });
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if ctx.parents.len() == 3 {
                    grads.push(ctx.parents[2].is_tracked().then(|| bias_grad(g, batch, cout, vout)));
                }
                grads
            }),
        ))
    }

    /// Transposed convolution with weights `[Cin, Cout, kd, kh, kw]`, no
    /// padding. Each output extent is `(in - 1) * stride + k`. This is the
    /// adjoint of [`Tensor::conv3d`] with the same kernel and stride.
    pub fn conv_transpose3d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: [usize; 3]) -> Result<Tensor<T>> {
        let [batch, cin, d, h, w] = dims5(self, "conv_transpose3d input")?;
        let [cin_w, cout, kd, kh, kw] = dims5(weight, "conv_transpose3d weight")?;
        if cin_w != cin {
            return Err(Error::shape(format!("conv_transpose3d weight {:?} for {cin} input channels", weight.shape())));
        }
        if stride.contains(&0) {
            return Err(Error::shape("conv_transpose3d stride must be positive"));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(format!("conv_transpose3d bias {:?}, want [{cout}]", b.shape())));
            }
        }
        let small = [d, h, w];
        let kernel = [kd, kh, kw];
        let big: [usize; 3] = std::array::from_fn(|a| (small[a] - 1) * stride[a] + kernel[a]);
        // the adjoint conv maps `big` to `small`
        let geo = Geometry {
            input: big,
            output: small,
            kernel,
            stride,
            padding: [0; 3],
        };
        let (vs, vb, kv) = (geo.out_volume(), geo.in_volume(), geo.kernel_volume());
        let rows = cout * kv;
        let x = self.data();
        let wd = weight.data();
        let mut out = vec![T::zero(); batch * cout * vb];
        let mut col = vec![T::zero(); rows * vs];
        for b in 0..batch {
            // col[(co, k), v] = sum_ci W[ci, (co, k)] x[ci, v]
            gemm(rows, cin, vs, T::one(), wd, Layout::transposed(0, rows), x, Layout::row_major(b * cin * vs, vs), T::zero(), &mut col, Layout::row_major(0, vs));
            col2im(&col, cout, &geo, 0..small[0], &mut out[b * cout * vb..(b + 1) * cout * vb]);
        }
        add_bias(&mut out, bias, batch, cout, vb);

        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Tensor::from_op(
            out,
            vec![batch, cout, big[0], big[1], big[2]],
            parents,
            "conv_transpose3d",
            Box::new(move |ctx| {
                let (xt, wt) = (&ctx.parents[0], &ctx.parents[1]);
                let (x, wd, g) = (xt.data(), wt.data(), ctx.grad);
                let mut gx = xt.is_tracked().then(|| vec![T::zero(); x.len()]);
                let mut gw = wt.is_tracked().then(|| vec![T::zero(); wd.len()]);
                let mut col = vec![T::zero(); rows * vs];
                for b in 0..batch {
                    im2col(&g[b * cout * vb..(b + 1) * cout * vb], cout, &geo, 0..small[0], &mut col);
                    if let Some(gx) = gx.as_mut() {
                        gemm(cin, rows, vs, T::one(), wd, Layout::row_major(0, rows), &col, Layout::row_major(0, vs), T::zero(), gx, Layout::row_major(b * cin * vs, vs));
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(cin, vs, rows, T::one(), x, Layout::row_major(b * cin * vs, vs), &col, Layout::transposed(0, vs), T::one(), gw, Layout::row_major(0, rows));
                    }
                }
                let mut grads = vec![gx, gw];
                if ctx.parents.len() == 3 {
                    grads.push(ctx.parents[2].is_tracked().then(|| bias_grad(g, batch, cout, vb)));
                }
                grads
            }),
        ))
    }

    /// Non-overlapping `k^3` mean pooling; every spatial extent must divide by `k`.
    pub fn avg_pool3d(&self, k: usize) -> Result<Tensor<T>> {
        let [batch, c, d, h, w] = dims5(self, "avg_pool3d input")?;
        if k == 0 || d % k != 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!("avg_pool3d({k}) needs extents divisible by {k}, got {:?}", self.shape())));
        }
        let (od, oh, ow) = (d / k, h / k, w / k);
        let scale = T::one() / T::of((k * k * k) as f64);
        let x = self.data();
        let mut out = vec![T::zero(); batch * c * od * oh * ow];
        let planes = batch * c;
        let src_at = move |p: usize, z: usize, y: usize, xx: usize| ((p * d + z) * h + y) * w + xx;
        for p in 0..planes {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((p * od + z / k) * oh + y / k) * ow + xx / k;
                        out[o] = out[o] + x[src_at(p, z, y, xx)] * scale;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, c, od, oh, ow],
            vec![self.clone()],
            "avg_pool3d",
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); planes * d * h * w];
                for p in 0..planes {
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                let o = ((p * od + z / k) * oh + y / k) * ow + xx / k;
                                gx[src_at(p, z, y, xx)] = ctx.grad[o] * scale;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeedStream;

    /// Direct 7-deep loop reference.
    fn conv_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize, groups: usize) -> Vec<f64> {
        let [bn, cin, d, h, ww] = <[usize; 5]>::try_from(x.shape()).unwrap();
        let [cout, cg, kd, kh, kw] = <[usize; 5]>::try_from(w.shape()).unwrap();
        let od = (d + 2 * p - kd) / s + 1;
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (ww + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; bn * cout * od * oh * ow];
        let cout_g = cout / groups;
        for n in 0..bn {
            for co in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b.map(|b| b.data()[co]).unwrap_or(0.0);
                            for cl in 0..cg {
                                let ci = (co / cout_g) * cg + cl;
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let iz = (z * s + a) as isize - p as isize;
                                            let iy = (y * s + bb) as isize - p as isize;
                                            let ix = (xx * s + c) as isize - p as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= ww as isize {
                                                continue;
                                            }
                                            let xi = (((n * cin + ci) * d + iz as usize) * h + iy as usize) * ww + ix as usize;
                                            let wi = (((co * cg + cl) * kd + a) * kh + bb) * kw + c;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out[(((n * cout + co) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn pointwise_identity_kernel() {
        let mut rng = SeedStream::new(1);
        let x = Tensor::<f64>::randn(&[1, 3, 2, 3, 4], 1.0, &mut rng);
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = Tensor::from_vec(w, &[3, 3, 1, 1, 1]).unwrap();
        let y = x.conv3d(&w, Some(&Tensor::zeros(&[3])), ConvSpec::default()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_ones_spreads_indicator() {
        let mut x = vec![0.0; 125];
        x[2 * 25 + 2 * 5 + 2] = 1.0;
        let x = Tensor::<f64>::from_vec(x, &[1, 1, 5, 5, 5]).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3, 3]);
        let y = x.conv3d(&w, None, ConvSpec::new(1, 1, 1)).unwrap();
        for z in 0..5 {
            for yy in 0..5 {
                for xx in 0..5 {
                    let inside = (1..=3).contains(&z) && (1..=3).contains(&yy) && (1..=3).contains(&xx);
                    assert_eq!(y.data()[z * 25 + yy * 5 + xx], if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn all_paths_match_loop_reference() {
        let mut rng = SeedStream::new(7);
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
        let cases: &[(usize, usize, usize, usize, usize)] = &[
            // (cout, k, stride, pad, groups)
            (3, 3, 1, 1, 1),
            (2, 3, 2, 1, 2),
            (4, 1, 1, 0, 1),
            (3, 2, 2, 0, 1),
            (4, 3, 1, 0, 2),
        ];
        for &(cout, k, s, p, g) in cases {
            let w = Tensor::<f64>::randn(&[cout, 2 / g, k, k, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[cout], 1.0, &mut rng);
            let y = x.conv3d(&w, Some(&b), ConvSpec::new(s, p, g)).unwrap();
            close(y.data(), &conv_ref(&x, &w, Some(&b), s, p, g), 1e-10);
        }
    }

    #[test]
    fn transpose_of_ones_tiles_disjointly() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]);
        let w = Tensor::ones(&[1, 1, 2, 2, 2]);
        let y = x.conv_transpose3d(&w, Some(&Tensor::zeros(&[1])), [2; 3]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 1.0));
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2])
            .conv_transpose3d(&w, Some(&Tensor::full(&[1], 0.25)), [2; 3])
            .unwrap();
        assert!(z.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = SeedStream::new(3);
        let w = Tensor::<f64>::randn(&[3, 2, 2, 2, 2], 1.0, &mut rng);
        let small = Tensor::<f64>::randn(&[2, 3, 2, 3, 2], 1.0, &mut rng);
        let big = Tensor::<f64>::randn(&[2, 2, 4, 6, 4], 1.0, &mut rng);
        // conv maps big (2 ch) -> small (3 ch) with weight [3, 2, k]
        let lhs: f64 = big.conv3d(&w, None, ConvSpec::new(2, 0, 1)).unwrap().mul(&small).unwrap().sum_all().item().unwrap();
        let rhs: f64 = small.conv_transpose3d(&w, None, [2; 3]).unwrap().mul(&big).unwrap().sum_all().item().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn group_mismatch_is_shape_error() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2, 2]);
        let w = Tensor::<f64>::zeros(&[3, 1, 1, 1, 1]);
        assert!(x.conv3d(&w, None, ConvSpec::new(1, 0, 2)).is_err());
    }

    #[test]
    fn avg_pool_halves_and_averages() {
        let x = Tensor::<f64>::full(&[1, 2, 4, 4, 4], 3.0);
        let y = x.avg_pool3d(2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
        assert!(Tensor::<f64>::zeros(&[1, 1, 3, 4, 4]).avg_pool3d(2).is_err());
    }
}
