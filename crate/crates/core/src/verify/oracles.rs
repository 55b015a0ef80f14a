//! Direct loop implementations used as reference values.
//!
//! Everything here works on plain `f64` slices in C order and shares no code
//! with the tensor kernels, the scan, the attention block or the losses.

/// `[m, k] x [k, n]` by three nested loops.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Grouped 3-D convolution of `x [B, Cin, D, H, W]` with `w [Cout, Cin/groups, K, K, K]`.
/// Returns the output and its shape.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [b, cin, d, h, wd] = xs;
    let [cout, cpg, kd, kh, kw] = ws;
    let od = (d + 2 * pad - kd) / stride + 1;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    let mut out = vec![0.0; b * cout * od * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            let g = co / opg;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb[co]);
                        for ci in 0..cpg {
                            let c = g * cpg + ci;
                            for a in 0..kd {
                                for bq in 0..kh {
                                    for e in 0..kw {
                                        let iz = (z * stride + a) as isize - pad as isize;
                                        let iy = (y * stride + bq) as isize - pad as isize;
                                        let ix = (xo * stride + e) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((n * cin + c) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((co * cpg + ci) * kd + a) * kh + bq) * kw + e;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((n * cout + co) * od + z) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
    }
    (out, [b, cout, od, oh, ow])
}

/// Transposed convolution with kernel equal to stride, `w [Cin, Cout, K, K, K]`:
/// every input voxel scatters one `K^3` block.
pub fn conv_transpose3d(x: &[f64], xs: [usize; 5], w: &[f64], ws: [usize; 5], bias: &[f64]) -> (Vec<f64>, [usize; 5]) {
    let [b, cin, d, h, wd] = xs;
    let [_, cout, k, _, _] = ws;
    let os = [b, cout, d * k, h * k, wd * k];
    let mut out = vec![0.0; os.iter().product()];
    for n in 0..b {
        for co in 0..cout {
            for z in 0..d * k {
                for y in 0..h * k {
                    for xo in 0..wd * k {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            let xi = (((n * cin + ci) * d + z / k) * h + y / k) * wd + xo / k;
                            let wi = (((ci * cout + co) * k + z % k) * k + y % k) * k + xo % k;
                            acc += x[xi] * w[wi];
                        }
                        out[(((n * cout + co) * os[2] + z) * os[3] + y) * os[4] + xo] = acc;
                    }
                }
            }
        }
    }
    (out, os)
}

/// Inputs of one selective-scan instance; all row-major.
pub struct ScanInstance {
    pub len: usize,
    pub dim: usize,
    pub state: usize,
    /// `[len, dim]`
    pub u: Vec<f64>,
    /// `[dim, dim]`
    pub proj_delta: Vec<f64>,
    pub delta_bias: Vec<f64>,
    /// `[dim, state]`
    pub proj_b: Vec<f64>,
    pub proj_c: Vec<f64>,
    /// `[dim, state]`
    pub a_log: Vec<f64>,
    pub d_skip: Vec<f64>,
}

/// The selective scan evaluated one time step at a time.
pub fn selective_scan(p: &ScanInstance) -> Vec<f64> {
    let (l, dim, s) = (p.len, p.dim, p.state);
    let mut h = vec![0.0; dim * s];
    let mut y = vec![0.0; l * dim];
    for t in 0..l {
        let ut = &p.u[t * dim..(t + 1) * dim];
        let mut delta = vec![0.0; dim];
        for (j, dj) in delta.iter_mut().enumerate() {
            let mut z = p.delta_bias[j];
            for i in 0..dim {
                z += ut[i] * p.proj_delta[i * dim + j];
            }
            *dj = if z > 30.0 { z } else { z.exp().ln_1p() };
        }
        let mut bt = vec![0.0; s];
        let mut ct = vec![0.0; s];
        for k in 0..s {
            for i in 0..dim {
                bt[k] += ut[i] * p.proj_b[i * s + k];
                ct[k] += ut[i] * p.proj_c[i * s + k];
            }
        }
        for ch in 0..dim {
            let mut acc = p.d_skip[ch] * ut[ch];
            for k in 0..s {
                let a = -p.a_log[ch * s + k].exp();
                let hk = &mut h[ch * s + k];
                *hk = (delta[ch] * a).exp() * *hk + delta[ch] * bt[k] * ut[ch];
                acc += ct[k] * *hk;
            }
            y[t * dim + ch] = acc;
        }
    }
    y
}

/// Weights of single-head attention along one axis.
pub struct AttentionWeights<'a> {
    pub query: &'a [f64],
    pub query_bias: &'a [f64],
    pub key: &'a [f64],
    pub key_bias: &'a [f64],
    pub value: &'a [f64],
    pub value_bias: &'a [f64],
}

/// Attention update of `x [B, C, L1, L2, L3]` along spatial axis `axis` (0, 1 or 2),
/// visiting every line and every query/key pair explicitly.
pub fn axial_attention(x: &[f64], shape: [usize; 5], axis: usize, p: &AttentionWeights) -> Vec<f64> {
    let [b, c, l1, l2, l3] = shape;
    let dims = [l1, l2, l3];
    let len = dims[axis];
    let at = |n: usize, ch: usize, pos: [usize; 3]| (((n * c + ch) * l1 + pos[0]) * l2 + pos[1]) * l3 + pos[2];
    let project = |w: &[f64], bias: &[f64], tok: &[f64]| -> Vec<f64> {
        (0..c).map(|o| bias[o] + (0..c).map(|i| tok[i] * w[i * c + o]).sum::<f64>()).collect()
    };
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for p0 in 0..dims[(axis + 1) % 3] {
            for p1 in 0..dims[(axis + 2) % 3] {
                let pos = |t: usize| {
                    let mut q = [0; 3];
                    q[axis] = t;
                    q[(axis + 1) % 3] = p0;
                    q[(axis + 2) % 3] = p1;
                    q
                };
                let tokens: Vec<Vec<f64>> = (0..len).map(|t| (0..c).map(|ch| x[at(n, ch, pos(t))]).collect()).collect();
                let q: Vec<Vec<f64>> = tokens.iter().map(|t| project(p.query, p.query_bias, t)).collect();
                let k: Vec<Vec<f64>> = tokens.iter().map(|t| project(p.key, p.key_bias, t)).collect();
                let v: Vec<Vec<f64>> = tokens.iter().map(|t| project(p.value, p.value_bias, t)).collect();
                for i in 0..len {
                    let scores: Vec<f64> = (0..len)
                        .map(|j| scale * (0..c).map(|ch| q[i][ch] * k[j][ch]).sum::<f64>())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for ch in 0..c {
                        out[at(n, ch, pos(i))] = (0..len).map(|j| e[j] / z * v[j][ch]).sum();
                    }
                }
            }
        }
    }
    out
}

/// Voxels within Chebyshev distance `t` of a set voxel.
pub fn chebyshev_dilate(bits: &[bool], dims: [usize; 3], t: usize) -> Vec<bool> {
    let [d, h, w] = dims;
    let set: Vec<[usize; 3]> = (0..d * h * w)
        .filter(|&i| bits[i])
        .map(|i| [i / (h * w), (i / w) % h, i % w])
        .collect();
    (0..d * h * w)
        .map(|i| {
            let p = [i / (h * w), (i / w) % h, i % w];
            set.iter().any(|s| (0..3).all(|a| s[a].abs_diff(p[a]) <= t))
        })
        .collect()
}

/// The three region-loss terms for one sample, recomputed from explicit voxel sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionTerms {
    pub positive: f64,
    pub boundary: f64,
    pub negative: f64,
}

/// `features` is `[C, V]`; returns `None` when there is no foreground.
pub fn region_terms(
    features: &[f64],
    channels: usize,
    dims: [usize; 3],
    label: &[bool],
    boundary_t: usize,
    negative_t: usize,
    num_negatives: usize,
    eps: f64,
) -> Option<RegionTerms> {
    use std::collections::BTreeSet;
    let v = dims.iter().product::<usize>();
    let pos: BTreeSet<usize> = (0..v).filter(|&i| label[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let neg: BTreeSet<usize> = (0..v).filter(|&i| !label[i]).collect();
    let feat = |i: usize| -> Vec<f64> { (0..channels).map(|c| features[c * v + i]).collect() };
    let mut center = vec![0.0; channels];
    for &i in &pos {
        for (c, f) in feat(i).iter().enumerate() {
            center[c] += f / pos.len() as f64;
        }
    }
    let sim = |i: usize| {
        let f = feat(i);
        let dot: f64 = f.iter().zip(&center).map(|(a, b)| a * b).sum();
        let nf: f64 = f.iter().map(|a| a * a).sum();
        let nc: f64 = center.iter().map(|a| a * a).sum();
        dot / (nf * nc).max(eps * eps).sqrt()
    };
    let mean_relu = |set: &BTreeSet<usize>| {
        if set.is_empty() {
            0.0
        } else {
            set.iter().map(|&i| sim(i).max(0.0)).sum::<f64>() / set.len() as f64
        }
    };
    let positive = pos.iter().map(|&i| 1.0 - sim(i)).sum::<f64>() / pos.len() as f64;

    let pos_bits: Vec<bool> = (0..v).map(|i| pos.contains(&i)).collect();
    let grown = chebyshev_dilate(&pos_bits, dims, boundary_t);
    let boundary_set: BTreeSet<usize> = neg.iter().copied().filter(|&i| grown[i]).collect();

    let mut ranked: Vec<(f64, usize)> = neg.iter().map(|&i| (sim(i), i)).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut seed_bits = vec![false; v];
    for &(_, i) in ranked.iter().take(num_negatives) {
        seed_bits[i] = true;
    }
    let hard_grown = chebyshev_dilate(&seed_bits, dims, negative_t);
    let hard_set: BTreeSet<usize> = neg.iter().copied().filter(|&i| hard_grown[i]).collect();

    Some(RegionTerms {
        positive,
        boundary: mean_relu(&boundary_set),
        negative: mean_relu(&hard_set),
    })
}

/// `(tp, fp, fn, tn)` by walking every voxel.
pub fn confusion(pred: &[bool], gt: &[bool]) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    c
}

/// Dice, IoU, precision, recall and volumetric similarity from voxel counts,
/// with both-empty scoring 1 and an empty side against a nonempty one scoring 0.
pub fn overlap_metrics(pred: &[bool], gt: &[bool]) -> [f64; 5] {
    let (tp, fp, fn_, _) = confusion(pred, gt);
    let n_pred = tp + fp;
    let n_gt = tp + fn_;
    if n_pred == 0 && n_gt == 0 {
        return [1.0; 5];
    }
    let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    [
        frac(2 * tp, n_pred + n_gt),
        frac(tp, tp + fp + fn_),
        frac(tp, n_pred),
        frac(tp, n_gt),
        1.0 - n_pred.abs_diff(n_gt) as f64 / (n_pred + n_gt) as f64,
    ]
}
