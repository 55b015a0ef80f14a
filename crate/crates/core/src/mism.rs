//! Multi-view block: channels are split into three shares, each share is
//! processed as a stack of 2-D slices along one anatomical plane by a
//! state-space block followed by axial attention along the slice normal,
//! and the shares are recombined by a pointwise fuse.

use crate::attention::{inverse_perm, AxialAttention, Axis3};
use crate::error::{Error, Result};
use crate::module::{constant, impl_module, kaiming};
use crate::ssm::{VssBlock, VssConfig};
use crate::tensor::{ConvSpec, Element, SeedStream, Tensor};

/// Slicing plane; the named axis is the slice normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    /// Slices stacked along depth.
    Axial,
    /// Slices stacked along height.
    Coronal,
    /// Slices stacked along width.
    Sagittal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Coronal, View::Sagittal];

    /// Permutation of `[B, C, D, H, W]` that puts the slice normal next to the batch.
    fn stack_perm(self) -> [usize; 5] {
        match self {
            View::Axial => [0, 2, 1, 3, 4],
            View::Coronal => [0, 3, 1, 2, 4],
            View::Sagittal => [0, 4, 1, 2, 3],
        }
    }

    pub fn normal_axis(self) -> Axis3 {
        match self {
            View::Axial => Axis3::L1,
            View::Coronal => Axis3::L2,
            View::Sagittal => Axis3::L3,
        }
    }
}

/// Reshapes `[B, C, D, H, W]` into the view's slice stack `[B * n, C, a, b]`.
pub fn to_slices<T: Element>(x: &Tensor<T>, view: View) -> Result<Tensor<T>> {
    let m = x.permute(&view.stack_perm())?;
    let s = m.shape();
    m.reshape(&[s[0] * s[1], s[2], s[3], s[4]])
}

/// Inverse of [`to_slices`] for a volume of batch `batch` and spatial `dims`.
pub fn from_slices<T: Element>(s: &Tensor<T>, view: View, batch: usize, dims: [usize; 3]) -> Result<Tensor<T>> {
    let perm = view.stack_perm();
    let n = dims[perm[1] - 2];
    let stacked = s.reshape(&[batch, n, s.dim(1), s.dim(2), s.dim(3)])?;
    stacked.permute(&inverse_perm(&perm))
}

/// Channel shares `(C/2, C/4, C/4)` for the axial, coronal and sagittal views.
pub fn channel_shares(channels: usize) -> Result<[usize; 3]> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::config("channels", format!("{channels} is not a positive multiple of 4")));
    }
    Ok([channels / 2, channels / 4, channels / 4])
}

/// Splits `[B, C, D, H, W]` into the three view shares.
pub fn asc_split<T: Element>(x: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
    if x.ndim() != 5 {
        return Err(Error::shape(format!("expected [B, C, D, H, W], got {:?}", x.shape())));
    }
    let parts = x.split(1, &channel_shares(x.dim(1))?)?;
    let [a, c, s]: [Tensor<T>; 3] = parts.try_into().expect("three shares");
    Ok([a, c, s])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MismConfig {
    pub use_vssb: bool,
    pub use_asa: bool,
    /// Split channels across views; otherwise every view sees all channels.
    pub use_asc: bool,
    /// Pointwise convolution over the concatenated view outputs.
    pub fuse: bool,
    /// Add the block input to its output.
    pub residual: bool,
    pub attention_out_proj: bool,
    pub vss: VssConfig,
}

impl Default for MismConfig {
    fn default() -> Self {
        MismConfig {
            use_vssb: true,
            use_asa: true,
            use_asc: true,
            fuse: true,
            residual: true,
            attention_out_proj: false,
            vss: VssConfig::default(),
        }
    }
}

/// State-space and attention stages for one view.
#[derive(Debug, Clone)]
pub struct ViewBranch<T: Element> {
    pub vss: Option<VssBlock<T>>,
    pub attention: Option<AxialAttention<T>>,
}

impl_module!(ViewBranch { vss, attention });

impl<T: Element> ViewBranch<T> {
    pub fn init(channels: usize, cfg: &MismConfig, rng: &mut SeedStream) -> Self {
        ViewBranch {
            vss: cfg.use_vssb.then(|| VssBlock::init(channels, &cfg.vss, rng)),
            attention: cfg.use_asa.then(|| AxialAttention::init(channels, cfg.attention_out_proj, rng)),
        }
    }

    /// Residual-free change produced by this branch on `x` of shape `[B, Cv, D, H, W]`.
    pub fn update(&self, x: &Tensor<T>, view: View) -> Result<Tensor<T>> {
        let dims = [x.dim(2), x.dim(3), x.dim(4)];
        let mut total: Option<Tensor<T>> = None;
        if let Some(vss) = &self.vss {
            let slices = to_slices(x, view)?;
            total = Some(from_slices(&vss.update(&slices)?, view, x.dim(0), dims)?);
        }
        if let Some(att) = &self.attention {
            let seen = match &total {
                Some(u) => x.add(u)?,
                None => x.clone(),
            };
            let u2 = att.update(&seen, view.normal_axis())?;
            total = Some(match total {
                Some(u) => u.add(&u2)?,
                None => u2,
            });
        }
        Ok(total.unwrap_or_else(|| Tensor::zeros(x.shape())))
    }

    /// `x` after the state-space block and the axial attention, each with its residual.
    pub fn process(&self, x: &Tensor<T>, view: View) -> Result<Tensor<T>> {
        x.add(&self.update(x, view)?)
    }
}

#[derive(Debug, Clone)]
pub struct MismBlock<T: Element> {
    pub axial: ViewBranch<T>,
    pub coronal: ViewBranch<T>,
    pub sagittal: ViewBranch<T>,
    /// `[C, C, 1, 1, 1]`
    pub fuse_weight: Option<Tensor<T>>,
    pub fuse_bias: Option<Tensor<T>>,
    pub config: MismConfig,
}

impl_module!(MismBlock {
    axial,
    coronal,
    sagittal,
    fuse_weight,
    fuse_bias
});

impl<T: Element> MismBlock<T> {
    pub fn init(channels: usize, cfg: &MismConfig, rng: &mut SeedStream) -> Result<Self> {
        let shares = if cfg.use_asc {
            channel_shares(channels)?
        } else {
            [channels; 3]
        };
        Ok(MismBlock {
            axial: ViewBranch::init(shares[0], cfg, rng),
            coronal: ViewBranch::init(shares[1], cfg, rng),
            sagittal: ViewBranch::init(shares[2], cfg, rng),
            fuse_weight: cfg.fuse.then(|| kaiming(&[channels, channels, 1, 1, 1], channels, rng)),
            fuse_bias: cfg.fuse.then(|| constant(&[channels], 0.0)),
            config: *cfg,
        })
    }

    pub fn branches(&self) -> [(&ViewBranch<T>, View); 3] {
        [
            (&self.axial, View::Axial),
            (&self.coronal, View::Coronal),
            (&self.sagittal, View::Sagittal),
        ]
    }

    /// Combined branch updates before the fuse, shape `[B, C, D, H, W]`.
    pub fn branch_updates(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 5 {
            return Err(Error::shape(format!("expected [B, C, D, H, W], got {:?}", x.shape())));
        }
        if self.config.use_asc {
            let parts = asc_split(x)?;
            let ups = self
                .branches()
                .iter()
                .zip(parts.iter())
                .map(|((b, v), p)| b.update(p, *v))
                .collect::<Result<Vec<_>>>()?;
            Tensor::concat(&ups, 1)
        } else {
            let mut acc: Option<Tensor<T>> = None;
            for (b, v) in self.branches() {
                let u = b.update(x, v)?;
                acc = Some(match acc {
                    Some(a) => a.add(&u)?,
                    None => u,
                });
            }
            Ok(acc.expect("three branches"))
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = self.branch_updates(x)?;
        if let Some(w) = &self.fuse_weight {
            out = out.conv3d(w, self.fuse_bias.as_ref(), ConvSpec::default())?;
        }
        if self.config.residual {
            out = out.add(x)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::{zero_all, Module};
    use crate::verify::gradcheck::{check_gradients, GradCheckConfig};

    fn small_cfg() -> MismConfig {
        MismConfig {
            vss: VssConfig {
                d_state: 2,
                expand: 1,
                shared_scan_params: false,
            },
            attention_out_proj: true,
            ..Default::default()
        }
    }

    #[test]
    fn slicing_round_trips() {
        let mut rng = SeedStream::new(1);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 3, 4], 1.0, &mut rng);
        for v in View::ALL {
            let s = to_slices(&x, v).unwrap();
            let back = from_slices(&s, v, 2, [2, 3, 4]).unwrap();
            assert_eq!(back.shape(), x.shape());
            assert_eq!(back.to_vec(), x.to_vec());
        }
        assert_eq!(to_slices(&x, View::Coronal).unwrap().shape(), [6, 3, 2, 4]);
    }

    #[test]
    fn shares_follow_half_quarter_quarter() {
        assert_eq!(channel_shares(4).unwrap(), [2, 1, 1]);
        assert_eq!(channel_shares(64).unwrap(), [32, 16, 16]);
        assert!(channel_shares(6).is_err());
        let x = Tensor::<f32>::zeros(&[1, 8, 2, 2, 2]);
        let dims: Vec<usize> = asc_split(&x).unwrap().iter().map(|t| t.dim(1)).collect();
        assert_eq!(dims, [4, 2, 2]);
    }

    #[test]
    fn zero_weights_give_identity_with_or_without_fuse() {
        let mut rng = SeedStream::new(2);
        let x = Tensor::<f64>::randn(&[1, 4, 2, 2, 2], 1.0, &mut rng);
        for fuse in [true, false] {
            let cfg = MismConfig { fuse, ..small_cfg() };
            let mut m = MismBlock::<f64>::init(4, &cfg, &mut rng).unwrap();
            zero_all(&mut m);
            assert_eq!(m.forward(&x).unwrap().to_vec(), x.to_vec(), "fuse={fuse}");
        }
    }

    #[test]
    fn view_shares_stay_isolated_before_fuse() {
        let mut rng = SeedStream::new(3);
        let m = MismBlock::<f64>::init(4, &small_cfg(), &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[1, 4, 2, 3, 2], 1.0, &mut rng);
        let base = m.branch_updates(&x).unwrap().to_vec();
        let per_channel = 12;
        // channels 0..2 are the axial share
        let mut d = x.to_vec();
        for v in &mut d[..2 * per_channel] {
            *v += 0.5;
        }
        let moved = m.branch_updates(&Tensor::from_vec(d, x.shape()).unwrap()).unwrap().to_vec();
        assert_ne!(base[..2 * per_channel], moved[..2 * per_channel]);
        assert_eq!(base[2 * per_channel..], moved[2 * per_channel..]);
    }

    #[test]
    fn ablations_build_and_run() {
        let mut rng = SeedStream::new(4);
        let x = Tensor::<f32>::randn(&[1, 4, 2, 2, 2], 1.0, &mut rng);
        for (vssb, asa, asc) in [(false, true, true), (true, false, true), (true, true, false), (false, false, true)] {
            let cfg = MismConfig {
                use_vssb: vssb,
                use_asa: asa,
                use_asc: asc,
                ..small_cfg()
            };
            let m = MismBlock::<f32>::init(4, &cfg, &mut rng).unwrap();
            assert_eq!(m.forward(&x).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn block_gradients() {
        let mut rng = SeedStream::new(5);
        let m = MismBlock::<f64>::init(4, &small_cfg(), &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[1, 4, 2, 2, 3], 1.0, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(m.named_params().into_iter().map(|(_, p)| p));
        let rep = check_gradients(
            |v| {
                let mut b = m.clone();
                let mut it = v[1..].iter();
                b.visit_params_mut("", &mut |_, p| *p = it.next().unwrap().clone());
                b.forward(&v[0])
            },
            &inputs,
            GradCheckConfig {
                max_coords: Some(4),
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
    }
}
