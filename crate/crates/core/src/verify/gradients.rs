//! Randomized finite-difference checks for every differentiable operation
//! and every composite block, all in 64-bit.

use super::gradcheck::{check_gradients, GradCheckConfig, GradReport};
use crate::attention::{AxialAttention, Axis3};
use crate::blocks::{ConvNormAct, DenseBlock, OutBlock, ResBlock, UpBlock};
use crate::error::Result;
use crate::losses::{ce_loss, dice_loss, fr_terms_with_regions, total_loss, FrRegions, LossConfig, VoxelMask};
use crate::mism::{MismBlock, MismConfig};
use crate::module::{params_of, with_params, Module};
use crate::network::{HcmaUNet, NetworkConfig};
use crate::ssm::{cross_merge, cross_scan, selective_scan, selective_scan_core, SelectiveScanParams, VssBlock, VssConfig};
use crate::tensor::{ConvSpec, SeedStream, Tensor};

type T64 = Tensor<f64>;

/// One randomized instance of an operation's gradient check.
pub type GradCase = fn(&mut SeedStream) -> Result<GradReport>;

fn check(f: impl Fn(&[T64]) -> Result<T64>, inputs: &[T64], coords: Option<usize>, rng: &mut SeedStream) -> Result<GradReport> {
    let cfg = GradCheckConfig {
        max_coords: coords,
        ..Default::default()
    };
    check_gradients(f, inputs, cfg, rng)
}

fn extent(rng: &mut SeedStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn shape(rng: &mut SeedStream, rank_lo: usize, rank_hi: usize, max: usize) -> Vec<usize> {
    let r = extent(rng, rank_lo, rank_hi);
    (0..r).map(|_| extent(rng, 1, max)).collect()
}

/// A shape that broadcasts against `s`: leading axes may be dropped and any
/// axis may collapse to 1.
fn broadcast_of(s: &[usize], rng: &mut SeedStream) -> Vec<usize> {
    let drop = rng.below(s.len() + 1).min(s.len() - 1);
    s[drop..].iter().map(|&d| if rng.uniform() < 0.3 { 1 } else { d }).collect()
}

fn randn(s: &[usize], rng: &mut SeedStream) -> T64 {
    Tensor::randn(s, 1.0, rng)
}

fn uniform(s: &[usize], lo: f64, hi: f64, rng: &mut SeedStream) -> T64 {
    Tensor::rand_uniform(s, lo, hi, rng)
}

/// Standard normal values kept at least `margin` away from `at`.
fn away_from(s: &[usize], at: f64, margin: f64, rng: &mut SeedStream) -> T64 {
    let n: usize = s.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| loop {
            let x = at + rng.normal();
            if (x - at).abs() > margin {
                break x;
            }
        })
        .collect();
    Tensor::from_vec(v, s).expect("shape matches")
}

fn jitter<M: Module<f64>>(m: &M, rng: &mut SeedStream) -> Vec<T64> {
    params_of(m)
        .iter()
        .map(|p| p.detach().add(&Tensor::randn(p.shape(), 0.1, rng)).expect("same shape"))
        .collect()
}

fn binary(rng: &mut SeedStream, op: fn(&T64, &T64) -> Result<T64>, positive_rhs: bool) -> Result<GradReport> {
    let s = shape(rng, 1, 4, 3);
    let bs = broadcast_of(&s, rng);
    let a = randn(&s, rng);
    let b = if positive_rhs {
        uniform(&bs, 0.5, 2.0, rng)
    } else {
        randn(&bs, rng)
    };
    // swap operands half the time so both sides get broadcast
    if rng.uniform() < 0.5 || positive_rhs {
        check(|x| op(&x[0], &x[1]), &[a, b], None, rng)
    } else {
        check(|x| op(&x[0], &x[1]), &[b, a], None, rng)
    }
}

fn unary(x: T64, op: fn(&T64) -> T64, rng: &mut SeedStream) -> Result<GradReport> {
    check(|x| Ok(op(&x[0])), &[x], None, rng)
}

fn small_shape(rng: &mut SeedStream) -> Vec<usize> {
    shape(rng, 1, 4, 3)
}

fn add(rng: &mut SeedStream) -> Result<GradReport> {
    binary(rng, |a, b| a.add(b), false)
}

fn sub(rng: &mut SeedStream) -> Result<GradReport> {
    binary(rng, |a, b| a.sub(b), false)
}

fn mul(rng: &mut SeedStream) -> Result<GradReport> {
    binary(rng, |a, b| a.mul(b), false)
}

fn div(rng: &mut SeedStream) -> Result<GradReport> {
    binary(rng, |a, b| a.div(b), true)
}

fn relu(rng: &mut SeedStream) -> Result<GradReport> {
    let s = small_shape(rng);
    unary(away_from(&s, 0.0, 1e-2, rng), |x| x.relu(), rng)
}

fn silu(rng: &mut SeedStream) -> Result<GradReport> {
    let s = small_shape(rng);
    unary(randn(&s, rng).scale(2.0), |x| x.silu(), rng)
}

fn sigmoid(rng: &mut SeedStream) -> Result<GradReport> {
    let s = small_shape(rng);
    unary(randn(&s, rng).scale(2.0), |x| x.sigmoid(), rng)
}

fn exp(rng: &mut SeedStream) -> Result<GradReport> {
    let s = small_shape(rng);
    unary(randn(&s, rng), |x| x.exp(), rng)
}

fn ln(rng: &mut SeedStream) -> Result<GradReport> {
    let s = small_shape(rng);
    unary(uniform(&s, 0.2, 3.0, rng), |x| x.ln(), rng)
}

fn sqrt(rng: &mut SeedStream) -> Result<GradReport> {
    let s = small_shape(rng);
    unary(uniform(&s, 0.2, 3.0, rng), |x| x.sqrt(), rng)
}

fn softplus(rng: &mut SeedStream) -> Result<GradReport> {
    let s = small_shape(rng);
    unary(randn(&s, rng).scale(3.0), |x| x.softplus(), rng)
}

fn clamp_min(rng: &mut SeedStream) -> Result<GradReport> {
    let s = small_shape(rng);
    unary(away_from(&s, 0.25, 1e-2, rng), |x| x.clamp_min(0.25), rng)
}

fn affine(rng: &mut SeedStream) -> Result<GradReport> {
    let s = small_shape(rng);
    let k = rng.normal();
    let c = rng.normal();
    check(move |x| Ok(x[0].scale(k).neg().add_scalar(c)), &[randn(&s, rng)], None, rng)
}

fn matmul(rng: &mut SeedStream) -> Result<GradReport> {
    let (m, k, n) = (extent(rng, 1, 4), extent(rng, 1, 4), extent(rng, 1, 4));
    let batch = shape(rng, 0, 2, 3);
    let bb = if batch.is_empty() { vec![] } else { broadcast_of(&batch, rng) };
    let a = randn(&[batch.clone(), vec![m, k]].concat(), rng);
    let b = randn(&[bb, vec![k, n]].concat(), rng);
    check(|x| x[0].matmul(&x[1]), &[a, b], None, rng)
}

fn conv3d(rng: &mut SeedStream) -> Result<GradReport> {
    let g = [1, 2][rng.below(2)];
    let cpg = extent(rng, 1, 2);
    let opg = extent(rng, 1, 2);
    let depthwise = rng.uniform() < 0.3;
    let (cin, cout, g) = if depthwise { (g * cpg, g * cpg, g * cpg) } else { (g * cpg, g * opg, g) };
    let k: usize = [1, 3][rng.below(2)];
    let stride = extent(rng, 1, 2);
    let pad = if k == 3 { rng.below(2) } else { 0 };
    let sp: Vec<usize> = (0..3).map(|_| extent(rng, k.saturating_sub(2 * pad).max(1), 4)).collect();
    let x = randn(&[extent(rng, 1, 2), cin, sp[0], sp[1], sp[2]], rng);
    let w = randn(&[cout, cin / g, k, k, k], rng);
    let b = randn(&[cout], rng);
    let spec = ConvSpec::new(stride, pad, g);
    check(|t| t[0].conv3d(&t[1], Some(&t[2]), spec), &[x, w, b], Some(24), rng)
}

fn conv_transpose3d(rng: &mut SeedStream) -> Result<GradReport> {
    let (cin, cout) = (extent(rng, 1, 3), extent(rng, 1, 3));
    let s: Vec<usize> = (0..3).map(|_| extent(rng, 1, 3)).collect();
    let x = randn(&[extent(rng, 1, 2), cin, s[0], s[1], s[2]], rng);
    let w = randn(&[cin, cout, 2, 2, 2], rng);
    let b = randn(&[cout], rng);
    check(|t| t[0].conv_transpose3d(&t[1], Some(&t[2]), [2; 3]), &[x, w, b], Some(24), rng)
}

fn avg_pool3d(rng: &mut SeedStream) -> Result<GradReport> {
    let s: Vec<usize> = (0..3).map(|_| 2 * extent(rng, 1, 2)).collect();
    let x = randn(&[extent(rng, 1, 2), extent(rng, 1, 3), s[0], s[1], s[2]], rng);
    check(|t| t[0].avg_pool3d(2), &[x], Some(24), rng)
}

fn instance_norm(rng: &mut SeedStream) -> Result<GradReport> {
    let c = extent(rng, 1, 3);
    let s: Vec<usize> = (0..3).map(|_| extent(rng, 1, 3)).collect();
    let n = s.iter().product::<usize>();
    let s0 = if n < 2 { 2 } else { s[0] };
    let x = randn(&[extent(rng, 1, 2), c, s0, s[1], s[2]], rng);
    let (g, b) = (randn(&[c], rng), randn(&[c], rng));
    check(|t| t[0].instance_norm(Some(&t[1]), Some(&t[2]), 1e-5), &[x, g, b], Some(24), rng)
}

fn layer_norm(rng: &mut SeedStream) -> Result<GradReport> {
    let mut s = shape(rng, 1, 3, 3);
    let c = extent(rng, 2, 4);
    s.push(c);
    let x = randn(&s, rng);
    let (g, b) = (randn(&[c], rng), randn(&[c], rng));
    check(|t| t[0].layer_norm(1, Some(&t[1]), Some(&t[2]), 1e-5), &[x, g, b], None, rng)
}

fn softmax(rng: &mut SeedStream) -> Result<GradReport> {
    let s = shape(rng, 1, 3, 4);
    let axis = rng.below(s.len());
    check(move |t| t[0].softmax(axis), &[randn(&s, rng).scale(2.0)], None, rng)
}

fn log_softmax(rng: &mut SeedStream) -> Result<GradReport> {
    let s = shape(rng, 1, 3, 4);
    let axis = rng.below(s.len());
    check(move |t| t[0].log_softmax(axis), &[randn(&s, rng).scale(2.0)], None, rng)
}

fn permute(rng: &mut SeedStream) -> Result<GradReport> {
    let s = shape(rng, 1, 5, 3);
    let mut perm: Vec<usize> = (0..s.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.below(i + 1));
    }
    check(move |t| t[0].permute(&perm), &[randn(&s, rng)], None, rng)
}

fn reshape_transpose(rng: &mut SeedStream) -> Result<GradReport> {
    let (a, b, c) = (extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 3));
    check(move |t| t[0].reshape(&[a * b, c])?.transpose(0, 1), &[randn(&[a, b, c], rng)], None, rng)
}

fn concat(rng: &mut SeedStream) -> Result<GradReport> {
    let s = shape(rng, 1, 4, 3);
    let axis = rng.below(s.len());
    let mut s2 = s.clone();
    s2[axis] = extent(rng, 1, 3);
    check(move |t| Tensor::concat(&[t[0].clone(), t[1].scale(2.0)], axis), &[randn(&s, rng), randn(&s2, rng)], None, rng)
}

fn split(rng: &mut SeedStream) -> Result<GradReport> {
    let mut s = shape(rng, 1, 4, 3);
    let axis = rng.below(s.len());
    let first = extent(rng, 1, 2);
    let second = extent(rng, 1, 2);
    s[axis] = first + second;
    check(
        move |t| {
            let parts = t[0].split(axis, &[first, second])?;
            parts[0].sum_all().add(&parts[1].exp().sum_all())
        },
        &[randn(&s, rng)],
        None,
        rng,
    )
}

fn narrow(rng: &mut SeedStream) -> Result<GradReport> {
    let s = shape(rng, 1, 4, 4);
    let axis = rng.below(s.len());
    let len = extent(rng, 1, s[axis]);
    let start = rng.below(s[axis] - len + 1);
    check(move |t| t[0].narrow(axis, start, len), &[randn(&s, rng)], None, rng)
}

fn index_select(rng: &mut SeedStream) -> Result<GradReport> {
    let s = shape(rng, 1, 3, 4);
    let axis = rng.below(s.len());
    let idx: Vec<usize> = (0..extent(rng, 1, 5)).map(|_| rng.below(s[axis])).collect();
    check(move |t| t[0].index_select(axis, &idx), &[randn(&s, rng)], None, rng)
}

fn reductions(rng: &mut SeedStream) -> Result<GradReport> {
    let s = shape(rng, 1, 4, 3);
    let axis = rng.below(s.len());
    let keep = rng.uniform() < 0.5;
    check(
        move |t| {
            let a = t[0].sum_axis(axis, keep)?.sum_all();
            let b = t[0].mean_axis(axis, keep)?.exp().mean_all();
            a.add(&b)
        },
        &[randn(&s, rng)],
        None,
        rng,
    )
}

fn scan_core(rng: &mut SeedStream) -> Result<GradReport> {
    let (n, l, d, s) = (extent(rng, 1, 2), extent(rng, 1, 6), extent(rng, 1, 3), extent(rng, 1, 3));
    let u = randn(&[n, l, d], rng);
    let delta = uniform(&[n, l, d], 0.05, 1.0, rng);
    let a = uniform(&[d, s], -2.0, -0.1, rng);
    let b = randn(&[n, l, s], rng);
    let c = randn(&[n, l, s], rng);
    let skip = randn(&[d], rng);
    check(|t| selective_scan_core(&t[0], &t[1], &t[2], &t[3], &t[4], &t[5]), &[u, delta, a, b, c, skip], Some(12), rng)
}

fn scan(rng: &mut SeedStream) -> Result<GradReport> {
    let (l, d, s) = (extent(rng, 1, 6), extent(rng, 1, 3), extent(rng, 1, 3));
    let p = SelectiveScanParams::<f64>::init(d, s, rng);
    let mut inputs = vec![randn(&[extent(rng, 1, 2), l, d], rng)];
    inputs.extend(jitter(&p, rng));
    check(|t| selective_scan(&t[0], &with_params(&p, &t[1..])), &inputs, Some(12), rng)
}

fn cross_scan_merge(rng: &mut SeedStream) -> Result<GradReport> {
    let (h, w) = (extent(rng, 1, 4), extent(rng, 1, 4));
    let x = randn(&[extent(rng, 1, 2), extent(rng, 1, 3), h, w], rng);
    check(
        move |t| {
            let seqs = cross_scan(&t[0])?;
            let weighted: Vec<T64> = seqs.iter().enumerate().map(|(k, s)| s.scale(0.25 * (k as f64 + 1.0)).exp()).collect();
            cross_merge(&weighted, h, w)
        },
        &[x],
        None,
        rng,
    )
}

fn volume(rng: &mut SeedStream, c: usize, even: bool) -> T64 {
    let s: Vec<usize> = (0..3).map(|_| if even { 2 * extent(rng, 1, 2) } else { extent(rng, 2, 3) }).collect();
    randn(&[extent(rng, 1, 2), c, s[0], s[1], s[2]], rng)
}

fn module_check<M: Module<f64> + Clone>(
    m: &M,
    extra: Vec<T64>,
    f: impl Fn(&M, &[T64]) -> Result<T64>,
    coords: usize,
    rng: &mut SeedStream,
) -> Result<GradReport> {
    let k = extra.len();
    let mut inputs = extra;
    inputs.extend(jitter(m, rng));
    check(|t| f(&with_params(m, &t[k..]), &t[..k]), &inputs, Some(coords), rng)
}

fn conv_norm_act(rng: &mut SeedStream) -> Result<GradReport> {
    let (cin, cout) = (extent(rng, 1, 3), extent(rng, 1, 3));
    let m = ConvNormAct::<f64>::init(cin, cout, rng);
    let x = volume(rng, cin, false);
    module_check(&m, vec![x], |m, x| m.forward(&x[0]), 6, rng)
}

fn res_block(rng: &mut SeedStream) -> Result<GradReport> {
    let c = extent(rng, 1, 3);
    let m = ResBlock::<f64>::init(c, rng);
    let x = volume(rng, c, true);
    module_check(&m, vec![x], |m, x| m.forward(&x[0]), 6, rng)
}

fn dense_block(rng: &mut SeedStream) -> Result<GradReport> {
    let (cin, cout) = (extent(rng, 1, 3), extent(rng, 1, 3));
    let m = DenseBlock::<f64>::init(cin, cout, rng);
    let x = volume(rng, cin, false);
    module_check(&m, vec![x], |m, x| m.forward(&x[0]), 6, rng)
}

fn vss_block(rng: &mut SeedStream) -> Result<GradReport> {
    let c = extent(rng, 1, 3);
    let cfg = VssConfig {
        d_state: extent(rng, 1, 3),
        expand: extent(rng, 1, 2),
        shared_scan_params: rng.uniform() < 0.5,
    };
    let m = VssBlock::<f64>::init(c, &cfg, rng);
    let x = randn(&[extent(rng, 1, 2), c, extent(rng, 1, 3), extent(rng, 1, 3)], rng);
    module_check(&m, vec![x], |m, x| m.forward(&x[0]), 4, rng)
}

fn axial_attention(rng: &mut SeedStream) -> Result<GradReport> {
    let c = extent(rng, 1, 3);
    let m = AxialAttention::<f64>::init(c, rng.uniform() < 0.5, rng);
    let axis = [Axis3::L1, Axis3::L2, Axis3::L3][rng.below(3)];
    let x = volume(rng, c, false);
    module_check(&m, vec![x], move |m, x| m.forward(&x[0], axis), 6, rng)
}

fn random_mism_config(rng: &mut SeedStream) -> MismConfig {
    let mut flag = || rng.uniform() < 0.75;
    let mut cfg = MismConfig {
        use_vssb: flag(),
        use_asa: flag(),
        use_asc: flag(),
        fuse: flag(),
        residual: flag(),
        attention_out_proj: flag(),
        ..Default::default()
    };
    cfg.vss.d_state = extent(rng, 1, 2);
    cfg.vss.expand = 1;
    cfg
}

fn mism_block(rng: &mut SeedStream) -> Result<GradReport> {
    let cfg = random_mism_config(rng);
    let m = MismBlock::<f64>::init(4, &cfg, rng)?;
    let x = volume(rng, 4, false);
    module_check(&m, vec![x], |m, x| m.forward(&x[0]), 3, rng)
}

fn up_block(rng: &mut SeedStream) -> Result<GradReport> {
    let (low, skip) = (extent(rng, 1, 3), extent(rng, 1, 3));
    let m = UpBlock::<f64>::init(low, skip, rng);
    let s: Vec<usize> = (0..3).map(|_| extent(rng, 1, 2)).collect();
    let b = extent(rng, 1, 2);
    let x = randn(&[b, low, s[0], s[1], s[2]], rng);
    let sk = randn(&[b, skip, 2 * s[0], 2 * s[1], 2 * s[2]], rng);
    module_check(&m, vec![x, sk], |m, x| m.forward(&x[0], &x[1]), 6, rng)
}

fn out_block(rng: &mut SeedStream) -> Result<GradReport> {
    let (cin, k) = (extent(rng, 1, 3), extent(rng, 2, 3));
    let m = OutBlock::<f64>::init(cin, k, rng);
    let x = volume(rng, cin, false);
    module_check(&m, vec![x], |m, x| m.forward(&x[0]), 8, rng)
}

fn random_labels(dims: [usize; 3], batch: usize, rng: &mut SeedStream) -> Vec<VoxelMask> {
    (0..batch)
        .map(|_| {
            let n = dims.iter().product();
            let p = 0.15 + 0.5 * rng.uniform();
            let mut bits: Vec<bool> = (0..n).map(|_| rng.uniform() < p).collect();
            bits[rng.below(n)] = true;
            VoxelMask::new(dims, bits).expect("dims match")
        })
        .collect()
}

fn seg_losses(rng: &mut SeedStream) -> Result<GradReport> {
    let dims = [extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 3)];
    let b = extent(rng, 1, 2);
    let labels = random_labels(dims, b, rng);
    let logits = randn(&[b, 2, dims[0], dims[1], dims[2]], rng);
    check(
        move |t| ce_loss(&t[0], &labels)?.add(&dice_loss(&t[0].softmax(1)?, &labels, 1e-8)?),
        &[logits],
        None,
        rng,
    )
}

fn region_terms(rng: &mut SeedStream) -> Result<GradReport> {
    let dims = [extent(rng, 2, 4), extent(rng, 2, 4), extent(rng, 2, 4)];
    let c = [2, 4][rng.below(2)];
    let label = random_labels(dims, 1, rng).remove(0);
    let features = randn(&[c, dims[0], dims[1], dims[2]], rng);
    let cfg = LossConfig {
        boundary_dilations: rng.below(3),
        negative_dilations: rng.below(3),
        num_negatives: extent(rng, 1, 6),
        fp_grad: true,
        ..Default::default()
    };
    // regions are piecewise constant in the features, so they are fixed at the base point
    let regions = FrRegions::compute(&features, &label, &cfg)?.expect("label has foreground");
    check(move |t| fr_terms_with_regions(&t[0], &regions, &cfg)?.sum(), &[features], None, rng)
}

fn network_with_loss(rng: &mut SeedStream) -> Result<GradReport> {
    let mut mism = random_mism_config(rng);
    mism.residual = true;
    let cfg = NetworkConfig {
        stage_widths: vec![4, 4],
        mism_stages: vec![2],
        mism,
        ..NetworkConfig::reference()
    };
    let net = HcmaUNet::<f64>::build(&cfg, rng.next_u64())?;
    let dims = [2 * extent(rng, 1, 2), 2 * extent(rng, 1, 2), 2];
    let b = extent(rng, 1, 2);
    let labels = random_labels(dims, b, rng);
    let x = randn(&[b, 1, dims[0], dims[1], dims[2]], rng);
    let loss_cfg = LossConfig {
        boundary_dilations: 1,
        negative_dilations: 1,
        // every background voxel is a seed, so the mined region cannot flip under perturbation
        num_negatives: 64,
        ..Default::default()
    };
    module_check(
        &net,
        vec![x],
        move |m, x| {
            let out = m.forward(&x[0])?;
            Ok(total_loss(&out.logits, &out.features, &labels, &loss_cfg)?.total)
        },
        2,
        rng,
    )
}

/// Every checked operation with its case generator.
pub fn cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("add", add),
        ("sub", sub),
        ("mul", mul),
        ("div", div),
        ("relu", relu),
        ("silu", silu),
        ("sigmoid", sigmoid),
        ("exp", exp),
        ("ln", ln),
        ("sqrt", sqrt),
        ("softplus", softplus),
        ("clamp_min", clamp_min),
        ("scale/neg/add_scalar", affine),
        ("matmul", matmul),
        ("conv3d", conv3d),
        ("conv_transpose3d", conv_transpose3d),
        ("avg_pool3d", avg_pool3d),
        ("instance_norm", instance_norm),
        ("layer_norm", layer_norm),
        ("softmax", softmax),
        ("log_softmax", log_softmax),
        ("permute", permute),
        ("reshape/transpose", reshape_transpose),
        ("concat", concat),
        ("split", split),
        ("narrow", narrow),
        ("index_select", index_select),
        ("sum/mean", reductions),
        ("selective_scan_core", scan_core),
        ("selective_scan", scan),
        ("cross_scan/cross_merge", cross_scan_merge),
        ("conv-norm-act block", conv_norm_act),
        ("res block", res_block),
        ("dense block", dense_block),
        ("vss block", vss_block),
        ("axial attention", axial_attention),
        ("mism block", mism_block),
        ("up block", up_block),
        ("out block", out_block),
        ("ce + dice", seg_losses),
        ("region terms", region_terms),
        ("network + total loss", network_with_loss),
    ]
}

/// Aggregate over all cases of one operation.
#[derive(Debug, Clone)]
pub struct OpSummary {
    pub name: &'static str,
    pub cases: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub failures: usize,
    /// Coordinates with a kink inside the coarse stencil.
    pub nonsmooth: usize,
    /// First failing case, if any.
    pub first_failure: Option<String>,
}

pub fn run_op(name: &'static str, case: GradCase, n: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary {
        name,
        cases: n,
        coords: 0,
        max_rel_err: 0.0,
        failures: 0,
        nonsmooth: 0,
        first_failure: None,
    };
    for i in 0..n {
        let mut rng = SeedStream::derived(seed, i as u64);
        match case(&mut rng) {
            Ok(r) => {
                s.coords += r.checked;
                s.nonsmooth += r.nonsmooth;
                s.max_rel_err = s.max_rel_err.max(r.max_rel_err);
                if !r.passed() {
                    s.failures += 1;
                    s.first_failure.get_or_insert_with(|| format!("case {i}: {:?}", r.failures[0]));
                }
            }
            Err(e) => {
                s.failures += 1;
                s.first_failure.get_or_insert_with(|| format!("case {i}: {e}"));
            }
        }
    }
    s
}
