//! Input-dependent (selective) state-space scan, four-way cross scan over 2-D
//! grids, and the visual state-space block built on them.

use crate::error::{Error, Result};
use crate::module::{constant, impl_module, kaiming, normal};
use crate::tensor::{ConvSpec, Element, SeedStream, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Zero-order-hold discretisation of one diagonal state entry:
/// returns `(exp(delta * a), delta * b)`.
pub fn discretize<T: Element>(a: T, b: T, delta: T) -> (T, T) {
    ((delta * a).exp(), delta * b)
}

/// Learnable parameters of one selective scan over `d_inner` channels with
/// `d_state` hidden states per channel.
#[derive(Debug, Clone)]
pub struct SelectiveScanParams<T: Element> {
    /// `[d_inner, d_state]`; the state matrix is `-exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `[d_inner, d_state]` input-to-B projection.
    pub proj_b: Tensor<T>,
    /// `[d_inner, d_state]` input-to-C projection.
    pub proj_c: Tensor<T>,
    /// `[d_inner, d_inner]` input-to-step projection.
    pub proj_delta: Tensor<T>,
    /// `[d_inner]`
    pub delta_bias: Tensor<T>,
    /// `[d_inner]` direct input-to-output skip.
    pub d_skip: Tensor<T>,
}

impl_module!(SelectiveScanParams {
    a_log,
    proj_b,
    proj_c,
    proj_delta,
    delta_bias,
    d_skip
});

impl<T: Element> SelectiveScanParams<T> {
    /// `a_log[c, s] = ln(s + 1)`, unit skip, and a step bias whose softplus is
    /// log-uniform on `[0.01, 0.1]`.
    pub fn init(d_inner: usize, d_state: usize, rng: &mut SeedStream) -> Self {
        let a_log: Vec<f64> = (0..d_inner)
            .flat_map(|_| (1..=d_state).map(|s| (s as f64).ln()))
            .collect();
        let (lo, hi) = (0.01f64.ln(), 0.1f64.ln());
        let delta_bias: Vec<f64> = (0..d_inner)
            .map(|_| {
                let dt = (lo + (hi - lo) * rng.uniform()).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let proj_std = 1.0 / (d_inner as f64).sqrt();
        SelectiveScanParams {
            a_log: Tensor::from_f64(&a_log, &[d_inner, d_state]).unwrap().requires_grad(),
            proj_b: normal(&[d_inner, d_state], proj_std, rng),
            proj_c: normal(&[d_inner, d_state], proj_std, rng),
            proj_delta: normal(&[d_inner, d_inner], proj_std, rng),
            delta_bias: Tensor::from_f64(&delta_bias, &[d_inner]).unwrap().requires_grad(),
            d_skip: constant(&[d_inner], 1.0),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.a_log.dim(0)
    }

    pub fn d_state(&self) -> usize {
        self.a_log.dim(1)
    }
}

/// Runs the selective scan over `u` of shape `[N, L, d_inner]` (or `[L, d_inner]`).
///
/// Step sizes, B and C are computed from `u` itself, so the recurrence is
/// input dependent. The output at position `t` depends only on `u[..=t]`.
pub fn selective_scan<T: Element>(u: &Tensor<T>, p: &SelectiveScanParams<T>) -> Result<Tensor<T>> {
    let delta = u.matmul(&p.proj_delta)?.add(&p.delta_bias)?.softplus();
    let b = u.matmul(&p.proj_b)?;
    let c = u.matmul(&p.proj_c)?;
    let a = p.a_log.exp().neg();
    selective_scan_core(u, &delta, &a, &b, &c, &p.d_skip)
}

/// The scan recurrence with explicit per-step inputs:
///
/// `h_t = exp(delta_t * a) * h_{t-1} + delta_t * b_t * u_t`,
/// `y_t = <c_t, h_t> + d * u_t`, with `h_{-1} = 0`.
///
/// Shapes: `u`, `delta` are `[N, L, D]`, `a` is `[D, S]`, `b`, `c` are
/// `[N, L, S]`, `d` is `[D]`. Rank-2 inputs are read as `N = 1`.
pub fn selective_scan_core<T: Element>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, l, dim) = match *u.shape() {
        [l, dim] => (1, l, dim),
        [n, l, dim] => (n, l, dim),
        _ => return Err(Error::shape(format!("scan input must be rank 2 or 3, got {:?}", u.shape()))),
    };
    if a.ndim() != 2 || a.dim(0) != dim {
        return Err(Error::shape(format!("state matrix {:?} for {dim} channels", a.shape())));
    }
    let s = a.dim(1);
    let seq = |t: &Tensor<T>, w: usize, what: &str| -> Result<()> {
        if t.numel() != n * l * w || t.shape()[..t.ndim() - 1] != u.shape()[..u.ndim() - 1] {
            return Err(Error::shape(format!("{what} shape {:?} does not match input {:?}", t.shape(), u.shape())));
        }
        Ok(())
    };
    seq(delta, dim, "step")?;
    seq(b, s, "B")?;
    seq(c, s, "C")?;
    if d.shape() != [dim] {
        return Err(Error::shape(format!("skip shape {:?}, want [{dim}]", d.shape())));
    }

    let (ud, dd, ad, bd, cd, skip) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let mut y = vec![T::zero(); n * l * dim];
    // hidden states after every step, needed by the backward pass
    let mut hs = vec![T::zero(); n * l * dim * s];
    for bi in 0..n {
        for t in 0..l {
            let row = (bi * l + t) * dim;
            let brow = (bi * l + t) * s;
            for ch in 0..dim {
                let dt = dd[row + ch];
                let ut = ud[row + ch];
                let cur = (row + ch) * s;
                let mut acc = skip[ch] * ut;
                for k in 0..s {
                    let (abar, bbar) = discretize(ad[ch * s + k], bd[brow + k], dt);
                    let prev = if t == 0 { T::zero() } else { hs[cur - dim * s + k] };
                    let h = abar * prev + bbar * ut;
                    hs[cur + k] = h;
                    acc = acc + cd[brow + k] * h;
                }
                y[row + ch] = acc;
            }
        }
    }

    Ok(Tensor::from_op(
        y,
        u.shape().to_vec(),
        vec![u.clone(), delta.clone(), a.clone(), b.clone(), c.clone(), d.clone()],
        "selective_scan",
        Box::new(move |ctx| {
            let p = ctx.parents;
            let (ud, dd, ad, bd, cd, skip) = (p[0].data(), p[1].data(), p[2].data(), p[3].data(), p[4].data(), p[5].data());
            let gy = ctx.grad;
            let mut gu = vec![T::zero(); n * l * dim];
            let mut gdelta = vec![T::zero(); n * l * dim];
            let mut ga = vec![T::zero(); dim * s];
            let mut gb = vec![T::zero(); n * l * s];
            let mut gc = vec![T::zero(); n * l * s];
            let mut gd = vec![T::zero(); dim];
            let mut gh = vec![T::zero(); dim * s];
            for bi in 0..n {
                gh.iter_mut().for_each(|v| *v = T::zero());
                for t in (0..l).rev() {
                    let row = (bi * l + t) * dim;
                    let brow = (bi * l + t) * s;
                    for ch in 0..dim {
                        let dt = dd[row + ch];
                        let ut = ud[row + ch];
                        let g = gy[row + ch];
                        let cur = (row + ch) * s;
                        gd[ch] = gd[ch] + g * ut;
                        let mut g_u = g * skip[ch];
                        let mut g_dt = T::zero();
                        for k in 0..s {
                            let av = ad[ch * s + k];
                            let abar = (dt * av).exp();
                            let h = hs[cur + k];
                            let prev = if t == 0 { T::zero() } else { hs[cur - dim * s + k] };
                            gc[brow + k] = gc[brow + k] + g * h;
                            let ght = gh[ch * s + k] + g * cd[brow + k];
                            let g_abar = ght * prev;
                            g_dt = g_dt + g_abar * abar * av + ght * bd[brow + k] * ut;
                            ga[ch * s + k] = ga[ch * s + k] + g_abar * abar * dt;
                            gb[brow + k] = gb[brow + k] + ght * dt * ut;
                            g_u = g_u + ght * dt * bd[brow + k];
                            gh[ch * s + k] = ght * abar;
                        }
                        gu[row + ch] = g_u;
                        gdelta[row + ch] = g_dt;
                    }
                }
            }
            vec![Some(gu), Some(gdelta), Some(ga), Some(gb), Some(gc), Some(gd)]
        }),
    ))
}

/// The four traversal orders of an `h x w` grid stored row-major:
/// row-wise forward, column-wise forward, row-wise reversed, column-wise reversed.
/// Each entry lists the grid index visited at each sequence position.
pub fn scan_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
    let rows: Vec<usize> = (0..h * w).collect();
    let cols: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
    let rows_rev = rows.iter().rev().copied().collect();
    let cols_rev = cols.iter().rev().copied().collect();
    [rows, cols, rows_rev, cols_rev]
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &idx) in order.iter().enumerate() {
        inv[idx] = pos;
    }
    inv
}

/// Unfolds `[N, C, H, W]` into four token sequences `[N, H*W, C]`, one per
/// order of [`scan_orders`]. A rank-3 `[C, H, W]` input yields `[H*W, C]`.
pub fn cross_scan<T: Element>(x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (batched, x) = match x.ndim() {
        3 => (false, x.reshape(&[1, x.dim(0), x.dim(1), x.dim(2)])?),
        4 => (true, x.clone()),
        _ => return Err(Error::shape(format!("cross_scan expects [N, C, H, W], got {:?}", x.shape()))),
    };
    let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let tokens = x.permute(&[0, 2, 3, 1])?.reshape(&[n, h * w, c])?;
    scan_orders(h, w)
        .iter()
        .map(|ord| {
            let seq = tokens.index_select(1, ord)?;
            if batched {
                Ok(seq)
            } else {
                seq.reshape(&[h * w, c])
            }
        })
        .collect()
}

/// Inverse of [`cross_scan`]: restores each sequence to grid positions and
/// sums the four directions into `[N, C, H, W]` (or `[C, H, W]`).
pub fn cross_merge<T: Element>(seqs: &[Tensor<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    if seqs.len() != 4 {
        return Err(Error::shape(format!("cross_merge needs 4 sequences, got {}", seqs.len())));
    }
    let batched = seqs[0].ndim() == 3;
    let lifted: Vec<Tensor<T>> = seqs
        .iter()
        .map(|s| if batched { Ok(s.clone()) } else { s.reshape(&[1, s.dim(0), s.dim(1)]) })
        .collect::<Result<_>>()?;
    let merged = merge_tokens(&lifted, h, w)?;
    let [n, _, c] = [merged.dim(0), merged.dim(1), merged.dim(2)];
    let grid = merged.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])?;
    if batched {
        Ok(grid)
    } else {
        grid.reshape(&[c, h, w])
    }
}

fn merge_tokens<T: Element>(seqs: &[Tensor<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    let orders = scan_orders(h, w);
    let mut acc: Option<Tensor<T>> = None;
    for (seq, ord) in seqs.iter().zip(orders.iter()) {
        if seq.ndim() != 3 || seq.dim(1) != h * w {
            return Err(Error::shape(format!("sequence {:?} does not cover a {h}x{w} grid", seq.shape())));
        }
        let restored = seq.index_select(1, &inverse(ord))?;
        acc = Some(match acc {
            None => restored,
            Some(a) => a.add(&restored)?,
        });
    }
    Ok(acc.expect("four sequences"))
}

/// Hyper-parameters of a visual state-space block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VssConfig {
    pub d_state: usize,
    /// Inner width as a multiple of the block's channel count.
    pub expand: usize,
    /// Use one set of scan parameters for all four directions.
    pub shared_scan_params: bool,
}

impl Default for VssConfig {
    fn default() -> Self {
        VssConfig {
            d_state: 16,
            expand: 2,
            shared_scan_params: false,
        }
    }
}

/// Visual state-space block over `[N, C, H, W]` grids: layer norm, gated
/// projection, depthwise 3x3 convolution, four-direction selective scan,
/// output norm, gating and projection back to `C` channels.
#[derive(Debug, Clone)]
pub struct VssBlock<T: Element> {
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
    /// `[C, E*C]`
    pub in_proj: Tensor<T>,
    pub in_bias: Tensor<T>,
    /// `[C, E*C]`
    pub gate_proj: Tensor<T>,
    pub gate_bias: Tensor<T>,
    /// `[E*C, 1, 1, 3, 3]`
    pub dw_weight: Tensor<T>,
    pub dw_bias: Tensor<T>,
    /// Four direction-specific parameter sets, or one shared set.
    pub scans: Vec<SelectiveScanParams<T>>,
    pub out_norm_gamma: Tensor<T>,
    pub out_norm_beta: Tensor<T>,
    /// `[E*C, C]`
    pub out_proj: Tensor<T>,
    pub out_bias: Tensor<T>,
}

impl_module!(VssBlock {
    norm_gamma,
    norm_beta,
    in_proj,
    in_bias,
    gate_proj,
    gate_bias,
    dw_weight,
    dw_bias,
    scans,
    out_norm_gamma,
    out_norm_beta,
    out_proj,
    out_bias
});

impl<T: Element> VssBlock<T> {
    pub fn init(channels: usize, cfg: &VssConfig, rng: &mut SeedStream) -> Self {
        let inner = cfg.expand * channels;
        let sets = if cfg.shared_scan_params { 1 } else { 4 };
        VssBlock {
            norm_gamma: constant(&[channels], 1.0),
            norm_beta: constant(&[channels], 0.0),
            in_proj: kaiming(&[channels, inner], channels, rng),
            in_bias: constant(&[inner], 0.0),
            gate_proj: kaiming(&[channels, inner], channels, rng),
            gate_bias: constant(&[inner], 0.0),
            dw_weight: kaiming(&[inner, 1, 1, 3, 3], 9, rng),
            dw_bias: constant(&[inner], 0.0),
            scans: (0..sets).map(|_| SelectiveScanParams::init(inner, cfg.d_state, rng)).collect(),
            out_norm_gamma: constant(&[inner], 1.0),
            out_norm_beta: constant(&[inner], 0.0),
            out_proj: kaiming(&[inner, channels], inner, rng),
            out_bias: constant(&[channels], 0.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.in_proj.dim(0)
    }

    pub fn inner(&self) -> usize {
        self.in_proj.dim(1)
    }

    /// The block's contribution before the residual connection.
    pub fn update(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 4 || x.dim(1) != self.channels() {
            return Err(Error::shape(format!(
                "state-space block with {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
        let e = self.inner();
        let tokens = x.permute(&[0, 2, 3, 1])?.reshape(&[n, h * w, c])?;
        let normed = tokens.layer_norm(1, Some(&self.norm_gamma), Some(&self.norm_beta), NORM_EPS)?;
        let inner = normed.matmul(&self.in_proj)?.add(&self.in_bias)?;
        let gate = normed.matmul(&self.gate_proj)?.add(&self.gate_bias)?.silu();

        let spec = ConvSpec {
            stride: [1; 3],
            padding: [0, 1, 1],
            groups: e,
        };
        let local = inner
            .reshape(&[n, h, w, e])?
            .permute(&[0, 3, 1, 2])?
            .reshape(&[n, e, 1, h, w])?
            .conv3d(&self.dw_weight, Some(&self.dw_bias), spec)?
            .silu()
            .reshape(&[n, e, h, w])?
            .permute(&[0, 2, 3, 1])?
            .reshape(&[n, h * w, e])?;

        let orders = scan_orders(h, w);
        let mut outs = Vec::with_capacity(4);
        for (k, ord) in orders.iter().enumerate() {
            let params = &self.scans[k % self.scans.len()];
            outs.push(selective_scan(&local.index_select(1, ord)?, params)?);
        }
        let merged = merge_tokens(&outs, h, w)?;
        let y = merged
            .layer_norm(1, Some(&self.out_norm_gamma), Some(&self.out_norm_beta), NORM_EPS)?
            .mul(&gate)?
            .matmul(&self.out_proj)?
            .add(&self.out_bias)?;
        y.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])
    }

    /// `x + update(x)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.add(&self.update(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::Module;
    use crate::verify::gradcheck::{check_gradients, GradCheckConfig};

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn discretize_matches_closed_form() {
        let (abar, bbar) = discretize(-2.0f64, 3.0, 0.5);
        assert!((abar - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(bbar, 1.5);
    }

    #[test]
    fn hand_worked_recurrence() {
        // exp(delta * a) = 0.5 and delta * b = 1 for every step
        let a = t(&[0.5f64.ln()], &[1, 1]);
        let ones = t(&[1.0; 3], &[3, 1]);
        let y = selective_scan_core(&ones, &ones, &a, &ones, &ones, &t(&[0.0], &[1])).unwrap();
        let got = y.to_vec();
        for (g, w) in got.iter().zip([1.0, 1.5, 1.75]) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn scan_orders_on_two_by_two() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let seqs = cross_scan(&x).unwrap();
        let flat: Vec<Vec<f64>> = seqs.iter().map(|s| s.to_vec()).collect();
        assert_eq!(flat[0], [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flat[1], [1.0, 3.0, 2.0, 4.0]);
        assert_eq!(flat[2], [4.0, 3.0, 2.0, 1.0]);
        assert_eq!(flat[3], [4.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn merge_of_scan_is_four_times_input() {
        let mut rng = SeedStream::new(3);
        let x = Tensor::<f64>::randn(&[2, 3, 3, 5], 1.0, &mut rng);
        let back = cross_merge(&cross_scan(&x).unwrap(), 3, 5).unwrap();
        for (b, v) in back.to_vec().iter().zip(x.data()) {
            assert!((b - 4.0 * v).abs() < 1e-14);
        }
    }

    #[test]
    fn scan_is_causal() {
        let mut rng = SeedStream::new(4);
        let p = SelectiveScanParams::<f64>::init(3, 4, &mut rng);
        let u = Tensor::<f64>::randn(&[1, 6, 3], 1.0, &mut rng);
        let y0 = selective_scan(&u, &p).unwrap().to_vec();
        let mut bumped = u.to_vec();
        for v in &mut bumped[4 * 3..] {
            *v += 1.0;
        }
        let y1 = selective_scan(&t(&bumped, &[1, 6, 3]), &p).unwrap().to_vec();
        assert_eq!(y0[..12], y1[..12]);
        assert_ne!(y0[12..], y1[12..]);
    }

    #[test]
    fn scan_core_gradients() {
        let mut rng = SeedStream::new(5);
        let (n, l, d, s) = (2, 4, 3, 2);
        let inputs = vec![
            Tensor::randn(&[n, l, d], 1.0, &mut rng),
            Tensor::rand_uniform(&[n, l, d], 0.1, 0.8, &mut rng),
            Tensor::rand_uniform(&[d, s], -1.5, -0.2, &mut rng),
            Tensor::randn(&[n, l, s], 1.0, &mut rng),
            Tensor::randn(&[n, l, s], 1.0, &mut rng),
            Tensor::randn(&[d], 1.0, &mut rng),
        ];
        let rep = check_gradients(
            |v| selective_scan_core(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]),
            &inputs,
            GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn vss_block_gradients() {
        let mut rng = SeedStream::new(6);
        let cfg = VssConfig {
            d_state: 2,
            expand: 2,
            shared_scan_params: false,
        };
        let block = VssBlock::<f64>::init(2, &cfg, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 2, 3, 2], 1.0, &mut rng);
        let params: Vec<Tensor<f64>> = block.named_params().into_iter().map(|(_, p)| p).collect();
        let mut inputs = vec![x];
        inputs.extend(params);
        let rep = check_gradients(
            |v| {
                let mut b = block.clone();
                let mut it = v[1..].iter();
                b.visit_params_mut("", &mut |_, p| *p = it.next().unwrap().clone());
                b.forward(&v[0])
            },
            &inputs,
            GradCheckConfig {
                max_coords: Some(6),
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn zero_output_projection_gives_identity() {
        let mut rng = SeedStream::new(7);
        let mut block = VssBlock::<f64>::init(4, &VssConfig::default(), &mut rng);
        block.out_proj = constant(&[8, 4], 0.0);
        let x = Tensor::<f64>::randn(&[1, 4, 3, 3], 1.0, &mut rng);
        assert_eq!(block.forward(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn shared_parameters_shrink_block() {
        let mut rng = SeedStream::new(8);
        let own = VssBlock::<f32>::init(4, &VssConfig::default(), &mut rng);
        let shared = VssBlock::<f32>::init(
            4,
            &VssConfig {
                shared_scan_params: true,
                ..Default::default()
            },
            &mut rng,
        );
        let per_set = own.scans[0].num_params();
        assert_eq!(own.num_params() - shared.num_params(), 3 * per_set);
    }
}
