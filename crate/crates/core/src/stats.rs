//! Analytic parameter and FLOP accounting.
//!
//! FLOPs count one multiply-add as 2. Normalisation costs 8 per element,
//! SiLU 4, softplus 3, softmax 5, and elementwise add / multiply 1.

use crate::mism::MismConfig;
use crate::module::Module;
use crate::network::{HcmaUNet, NetworkConfig};
use crate::tensor::Element;

const NORM: u64 = 8;
const SILU: u64 = 4;
const SOFTPLUS: u64 = 3;
const SOFTMAX: u64 = 5;

/// Exact count of learnable scalars in a built model.
pub fn count_params<T: Element>(model: &HcmaUNet<T>) -> usize {
    model.num_params()
}

/// Parameters of a 3-D convolution with bias.
pub fn conv_params(cin: usize, cout: usize, k: usize, groups: usize) -> usize {
    cout * (cin / groups) * k * k * k + cout
}

/// Parameters of a dense matrix projection with bias.
pub fn linear_params(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

pub fn stem_params(cin: usize, cout: usize) -> usize {
    conv_params(cin, cout, 3, 1) + 2 * cout
}

pub fn res_params(c: usize) -> usize {
    conv_params(c, c, 3, c) + 2 * c + conv_params(c, c, 1, 1)
}

pub fn dense_params(cin: usize, cout: usize) -> usize {
    conv_params(cin, cin, 3, cin) + conv_params(2 * cin, cin, 1, 1) + conv_params(3 * cin, cout, 1, 1)
}

pub fn scan_params(d_inner: usize, d_state: usize) -> usize {
    3 * d_inner * d_state + d_inner * d_inner + 2 * d_inner
}

pub fn vss_params(c: usize, expand: usize, d_state: usize, shared: bool) -> usize {
    let e = expand * c;
    let sets = if shared { 1 } else { 4 };
    2 * c + 2 * linear_params(c, e) + (9 * e + e) + sets * scan_params(e, d_state) + 2 * e + linear_params(e, c)
}

pub fn attention_params(c: usize, out_proj: bool) -> usize {
    let n = if out_proj { 4 } else { 3 };
    n * linear_params(c, c)
}

fn view_widths(c: usize, cfg: &MismConfig) -> [usize; 3] {
    if cfg.use_asc {
        [c / 2, c / 4, c / 4]
    } else {
        [c; 3]
    }
}

pub fn mism_params(c: usize, cfg: &MismConfig) -> usize {
    let branch = |cv: usize| {
        let v = if cfg.use_vssb {
            vss_params(cv, cfg.vss.expand, cfg.vss.d_state, cfg.vss.shared_scan_params)
        } else {
            0
        };
        let a = if cfg.use_asa { attention_params(cv, cfg.attention_out_proj) } else { 0 };
        v + a
    };
    let fuse = if cfg.fuse { conv_params(c, c, 1, 1) } else { 0 };
    view_widths(c, cfg).iter().map(|&cv| branch(cv)).sum::<usize>() + fuse
}

pub fn up_params(low: usize, skip: usize) -> usize {
    low * skip * 8 + skip + stem_params(2 * skip, skip)
}

/// Parameter count of the network described by `cfg`, from the per-block
/// formulas alone (no model is built).
pub fn analytic_params(cfg: &NetworkConfig) -> usize {
    let w = &cfg.stage_widths;
    let mut total = stem_params(cfg.in_channels, w[0]);
    for k in 0..w.len() {
        let cin = cfg.hybrid_in(k);
        if k > 0 {
            total += res_params(cin);
        }
        if cfg.has_mism(k) {
            total += mism_params(cin, &cfg.mism);
        }
        total += dense_params(cin, w[k]);
    }
    for k in 0..w.len() - 1 {
        total += up_params(w[k + 1], w[k]);
    }
    total + conv_params(w[0], cfg.num_classes, 1, 1)
}

/// FLOP totals per block category.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopReport {
    pub stem: u64,
    pub downsample: u64,
    pub dense: u64,
    pub state_space: u64,
    pub attention: u64,
    pub fuse: u64,
    pub decoder: u64,
    pub head: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.stem + self.downsample + self.dense + self.state_space + self.attention + self.fuse + self.decoder + self.head
    }

    pub fn entries(&self) -> [(&'static str, u64); 8] {
        [
            ("stem", self.stem),
            ("downsample", self.downsample),
            ("dense", self.dense),
            ("state_space", self.state_space),
            ("attention", self.attention),
            ("fuse", self.fuse),
            ("decoder", self.decoder),
            ("head", self.head),
        ]
    }
}

/// FLOPs of a stride-1 (or strided) convolution producing `out_vox` voxels per channel.
pub fn conv_flops(cin: usize, cout: usize, k: usize, groups: usize, out_vox: usize) -> u64 {
    let (cin, cout, k, g, v) = (cin as u64, cout as u64, k as u64, groups as u64, out_vox as u64);
    2 * cout * (cin / g) * k * k * k * v + cout * v
}

fn linear_flops(tokens: u64, cin: u64, cout: u64) -> u64 {
    2 * tokens * cin * cout + tokens * cout
}

/// One selective scan over `seqs` sequences of `len` tokens with `d` channels.
pub fn scan_flops(seqs: usize, len: usize, d: usize, d_state: usize) -> u64 {
    let tokens = (seqs * len) as u64;
    let (d, s) = (d as u64, d_state as u64);
    let projections = linear_flops(tokens, d, d) + SOFTPLUS * tokens * d + 2 * 2 * tokens * d * s;
    // per state entry: step exponent (2), input term (2), update (2), readout (2)
    let recurrence = 8 * tokens * d * s + 2 * tokens * d;
    projections + recurrence
}

/// One state-space block applied to `n` grids of `h x w` with `c` channels.
pub fn vss_flops(n: usize, h: usize, w: usize, c: usize, expand: usize, d_state: usize) -> u64 {
    let t = (n * h * w) as u64;
    let e = (expand * c) as u64;
    let c64 = c as u64;
    NORM * t * c64
        + 2 * linear_flops(t, c64, e)
        + SILU * t * e
        + 2 * 9 * t * e
        + t * e
        + SILU * t * e
        + 4 * scan_flops(n, h * w, expand * c, d_state)
        + 3 * t * e
        + NORM * t * e
        + t * e
        + linear_flops(t, e, c64)
}

/// Axial attention over `vox` voxels with `c` channels along an axis of length `len`.
pub fn attention_flops(vox: usize, len: usize, c: usize, out_proj: bool) -> u64 {
    let (v, l, c) = (vox as u64, len as u64, c as u64);
    let lines = v / l;
    let projections = if out_proj { 4 } else { 3 } * linear_flops(v, c, c);
    let scores = 2 * lines * l * l * c + lines * l * l;
    projections + scores + SOFTMAX * lines * l * l + 2 * lines * l * l * c
}

/// Analytic forward FLOPs of `cfg` on an input of shape `[B, Cin, D, H, W]`.
pub fn count_flops(cfg: &NetworkConfig, input: [usize; 5]) -> FlopReport {
    let [b, _, d0, h0, w0] = input;
    let w = &cfg.stage_widths;
    let mut r = FlopReport::default();
    let vox_at = |k: usize| {
        let f = 1 << k;
        [d0 / f, h0 / f, w0 / f]
    };
    let full = b * d0 * h0 * w0;
    r.stem = conv_flops(cfg.in_channels, w[0], 3, 1, full) + (NORM + SILU) * (full * w[0]) as u64;

    for k in 0..w.len() {
        let cin = cfg.hybrid_in(k);
        let [d, h, wd] = vox_at(k);
        let vox = b * d * h * wd;
        if k > 0 {
            r.downsample += conv_flops(cin, cin, 3, cin, vox)
                + (NORM + SILU) * (vox * cin) as u64
                + conv_flops(cin, cin, 1, 1, vox)
                + 9 * (vox * cin) as u64
                + (vox * cin) as u64;
        }
        if cfg.has_mism(k) {
            let m = &cfg.mism;
            let views = [(d, h, wd, d), (h, d, wd, h), (wd, d, h, wd)];
            for (&cv, &(n, a, bb, len)) in view_widths(cin, m).iter().zip(views.iter()) {
                if m.use_vssb {
                    r.state_space += vss_flops(b * n, a, bb, cv, m.vss.expand, m.vss.d_state) + (vox * cv) as u64;
                }
                if m.use_asa {
                    r.attention += attention_flops(vox, len, cv, m.attention_out_proj) + (vox * cv) as u64;
                }
            }
            if m.fuse {
                r.fuse += conv_flops(cin, cin, 1, 1, vox);
            }
            if m.residual {
                r.fuse += (vox * cin) as u64;
            }
        }
        r.dense += conv_flops(cin, cin, 3, cin, vox) + conv_flops(2 * cin, cin, 1, 1, vox) + conv_flops(3 * cin, w[k], 1, 1, vox);
    }
    for k in 0..w.len() - 1 {
        let [d, h, wd] = vox_at(k);
        let vox = b * d * h * wd;
        let low_vox = vox / 8;
        let (low, skip) = (w[k + 1] as u64, w[k] as u64);
        r.decoder += 2 * low * skip * 8 * low_vox as u64
            + skip * vox as u64
            + conv_flops(2 * w[k], w[k], 3, 1, vox)
            + (NORM + SILU) * (vox * w[k]) as u64;
    }
    r.head = conv_flops(w[0], cfg.num_classes, 1, 1, full);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::VssConfig;

    #[test]
    fn golden_conv_counts() {
        assert_eq!(conv_params(4, 8, 1, 1), 40);
        assert_eq!(conv_params(16, 16, 3, 16), 448);
    }

    #[test]
    fn analytic_matches_built_model() {
        for cfg in [
            NetworkConfig::reference(),
            NetworkConfig {
                stage_widths: vec![8, 8, 16],
                mism_stages: vec![1, 3],
                mism: MismConfig {
                    use_asc: false,
                    fuse: false,
                    attention_out_proj: true,
                    vss: VssConfig {
                        shared_scan_params: true,
                        ..Default::default()
                    },
                    ..Default::default()
                },
                ..NetworkConfig::reference()
            },
        ] {
            let net = HcmaUNet::<f32>::build(&cfg, 0).unwrap();
            assert_eq!(count_params(&net), analytic_params(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn doubling_widths_roughly_quadruples() {
        let a = NetworkConfig::reference();
        let b = NetworkConfig {
            stage_widths: a.stage_widths.iter().map(|w| 2 * w).collect(),
            ..a.clone()
        };
        let ratio = analytic_params(&b) as f64 / analytic_params(&a) as f64;
        assert!((3.0..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn flops_scale_with_volume() {
        let cfg = NetworkConfig::reference();
        let small = count_flops(&cfg, [1, 1, 32, 32, 32]).total();
        let big = count_flops(&cfg, [2, 1, 32, 32, 32]).total();
        assert_eq!(big, 2 * small);
        assert!(small > 0);
    }
}
