//! Convolutional building blocks of the encoder-decoder.

use crate::error::{Error, Result};
use crate::mism::{MismBlock, MismConfig};
use crate::module::{constant, impl_module, kaiming};
use crate::tensor::{ConvSpec, Element, SeedStream, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

fn conv_weight<T: Element>(cout: usize, cin_per_group: usize, k: usize, rng: &mut SeedStream) -> Tensor<T> {
    kaiming(&[cout, cin_per_group, k, k, k], cin_per_group * k * k * k, rng)
}

fn expect_channels<T: Element>(x: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if x.ndim() != 5 || x.dim(1) != c {
        return Err(Error::shape(format!("{what} expects [B, {c}, D, H, W], got {:?}", x.shape())));
    }
    Ok(())
}

/// 3x3x3 convolution, instance norm and SiLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
}

impl_module!(ConvNormAct {
    weight,
    bias,
    norm_gamma,
    norm_beta
});

impl<T: Element> ConvNormAct<T> {
    pub fn init(cin: usize, cout: usize, rng: &mut SeedStream) -> Self {
        ConvNormAct {
            weight: conv_weight(cout, cin, 3, rng),
            bias: constant(&[cout], 0.0),
            norm_gamma: constant(&[cout], 1.0),
            norm_beta: constant(&[cout], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_channels(x, self.weight.dim(1), "conv block")?;
        x.conv3d(&self.weight, Some(&self.bias), ConvSpec::new(1, 1, 1))?
            .instance_norm(Some(&self.norm_gamma), Some(&self.norm_beta), NORM_EPS)
            .map(|t| t.silu())
    }
}

/// Downsampling residual block: strided depthwise 3x3x3, instance norm,
/// SiLU and pointwise mixing, plus a 2x2x2 average-pooled shortcut.
#[derive(Debug, Clone)]
pub struct ResBlock<T: Element> {
    pub dw_weight: Tensor<T>,
    pub dw_bias: Tensor<T>,
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
    pub pw_weight: Tensor<T>,
    pub pw_bias: Tensor<T>,
}

impl_module!(ResBlock {
    dw_weight,
    dw_bias,
    norm_gamma,
    norm_beta,
    pw_weight,
    pw_bias
});

impl<T: Element> ResBlock<T> {
    pub fn init(channels: usize, rng: &mut SeedStream) -> Self {
        ResBlock {
            dw_weight: conv_weight(channels, 1, 3, rng),
            dw_bias: constant(&[channels], 0.0),
            norm_gamma: constant(&[channels], 1.0),
            norm_beta: constant(&[channels], 0.0),
            pw_weight: conv_weight(channels, channels, 1, rng),
            pw_bias: constant(&[channels], 0.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.dw_weight.dim(0)
    }

    /// Halves every spatial extent; all extents must be even.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.channels();
        expect_channels(x, c, "residual block")?;
        if x.shape()[2..].iter().any(|d| d % 2 != 0) {
            return Err(Error::shape(format!("residual block needs even extents, got {:?}", x.shape())));
        }
        let main = x
            .conv3d(&self.dw_weight, Some(&self.dw_bias), ConvSpec::new(2, 1, c))?
            .instance_norm(Some(&self.norm_gamma), Some(&self.norm_beta), NORM_EPS)?
            .silu()
            .conv3d(&self.pw_weight, Some(&self.pw_bias), ConvSpec::default())?;
        main.add(&x.avg_pool3d(2)?)
    }
}

/// Densely connected block:
/// `x1 = dw(x)`, `x2 = pw1([x, x1])`, `out = pw2([x, x1, x2])`.
#[derive(Debug, Clone)]
pub struct DenseBlock<T: Element> {
    pub dw_weight: Tensor<T>,
    pub dw_bias: Tensor<T>,
    /// `[Cin, 2 Cin, 1, 1, 1]`
    pub mix_weight: Tensor<T>,
    pub mix_bias: Tensor<T>,
    /// `[Cout, 3 Cin, 1, 1, 1]`
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
}

impl_module!(DenseBlock {
    dw_weight,
    dw_bias,
    mix_weight,
    mix_bias,
    out_weight,
    out_bias
});

/// Intermediate maps of a [`DenseBlock`] pass.
#[derive(Debug, Clone)]
pub struct DenseTrace<T: Element> {
    pub local: Tensor<T>,
    pub mixed: Tensor<T>,
    pub out: Tensor<T>,
}

impl<T: Element> DenseBlock<T> {
    pub fn init(cin: usize, cout: usize, rng: &mut SeedStream) -> Self {
        DenseBlock {
            dw_weight: conv_weight(cin, 1, 3, rng),
            dw_bias: constant(&[cin], 0.0),
            mix_weight: conv_weight(cin, 2 * cin, 1, rng),
            mix_bias: constant(&[cin], 0.0),
            out_weight: conv_weight(cout, 3 * cin, 1, rng),
            out_bias: constant(&[cout], 0.0),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.dw_weight.dim(0)
    }

    pub fn out_channels(&self) -> usize {
        self.out_weight.dim(0)
    }

    pub fn trace(&self, x: &Tensor<T>) -> Result<DenseTrace<T>> {
        let c = self.in_channels();
        expect_channels(x, c, "dense block")?;
        let local = x.conv3d(&self.dw_weight, Some(&self.dw_bias), ConvSpec::new(1, 1, c))?;
        let mixed = Tensor::concat(&[x.clone(), local.clone()], 1)?.conv3d(
            &self.mix_weight,
            Some(&self.mix_bias),
            ConvSpec::default(),
        )?;
        let out = Tensor::concat(&[x.clone(), local.clone(), mixed.clone()], 1)?.conv3d(
            &self.out_weight,
            Some(&self.out_bias),
            ConvSpec::default(),
        )?;
        Ok(DenseTrace { local, mixed, out })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.trace(x)?.out)
    }
}

/// Optional multi-view block followed by a dense block.
#[derive(Debug, Clone)]
pub struct HybridBlock<T: Element> {
    pub mism: Option<MismBlock<T>>,
    pub dense: DenseBlock<T>,
}

impl_module!(HybridBlock { mism, dense });

impl<T: Element> HybridBlock<T> {
    pub fn init(cin: usize, cout: usize, mism: Option<&MismConfig>, rng: &mut SeedStream) -> Result<Self> {
        Ok(HybridBlock {
            mism: mism.map(|cfg| MismBlock::init(cin, cfg, rng)).transpose()?,
            dense: DenseBlock::init(cin, cout, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.mism {
            Some(m) => self.dense.forward(&m.forward(x)?),
            None => self.dense.forward(x),
        }
    }
}

/// Decoder step: 2x transposed convolution, concatenation with the skip
/// connection, then 3x3x3 convolution, instance norm and SiLU.
#[derive(Debug, Clone)]
pub struct UpBlock<T: Element> {
    /// `[C_low, C_skip, 2, 2, 2]`
    pub up_weight: Tensor<T>,
    pub up_bias: Tensor<T>,
    pub fuse: ConvNormAct<T>,
}

impl_module!(UpBlock {
    up_weight,
    up_bias,
    fuse
});

impl<T: Element> UpBlock<T> {
    pub fn init(low: usize, skip: usize, rng: &mut SeedStream) -> Self {
        UpBlock {
            up_weight: kaiming(&[low, skip, 2, 2, 2], low, rng),
            up_bias: constant(&[skip], 0.0),
            fuse: ConvNormAct::init(2 * skip, skip, rng),
        }
    }

    pub fn forward(&self, low: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        expect_channels(low, self.up_weight.dim(0), "up block")?;
        let up = low.conv_transpose3d(&self.up_weight, Some(&self.up_bias), [2; 3])?;
        if up.shape() != skip.shape() {
            return Err(Error::shape(format!(
                "upsampled {:?} does not match skip {:?}",
                up.shape(),
                skip.shape()
            )));
        }
        self.fuse.forward(&Tensor::concat(&[up, skip.clone()], 1)?)
    }
}

/// Pointwise projection to class logits.
#[derive(Debug, Clone)]
pub struct OutBlock<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl_module!(OutBlock { weight, bias });

impl<T: Element> OutBlock<T> {
    pub fn init(cin: usize, classes: usize, rng: &mut SeedStream) -> Self {
        OutBlock {
            weight: conv_weight(classes, cin, 1, rng),
            bias: constant(&[classes], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_channels(x, self.weight.dim(1), "output block")?;
        x.conv3d(&self.weight, Some(&self.bias), ConvSpec::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::Module;
    use crate::verify::gradcheck::{check_gradients, GradCheckConfig};

    fn gradcheck_module<M: Module<f64> + Clone>(m: &M, x: Tensor<f64>, f: impl Fn(&M, &Tensor<f64>) -> Result<Tensor<f64>>) {
        let mut rng = SeedStream::new(99);
        let mut inputs = vec![x];
        inputs.extend(m.named_params().into_iter().map(|(_, p)| p));
        let rep = check_gradients(
            |v| {
                let mut b = m.clone();
                let mut it = v[1..].iter();
                b.visit_params_mut("", &mut |_, p| *p = it.next().unwrap().clone());
                f(&b, &v[0])
            },
            &inputs,
            GradCheckConfig {
                max_coords: Some(8),
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn dense_block_parameter_count() {
        let mut rng = SeedStream::new(1);
        for (cin, cout) in [(4, 8), (16, 32), (3, 3)] {
            let b = DenseBlock::<f32>::init(cin, cout, &mut rng);
            let want = 27 * cin + cin + 2 * cin * cin + cin + 3 * cin * cout + cout;
            assert_eq!(b.num_params(), want);
        }
    }

    #[test]
    fn res_block_halves_extents() {
        let mut rng = SeedStream::new(2);
        let b = ResBlock::<f32>::init(3, &mut rng);
        let x = Tensor::<f32>::randn(&[2, 3, 4, 6, 8], 1.0, &mut rng);
        assert_eq!(b.forward(&x).unwrap().shape(), [2, 3, 2, 3, 4]);
        assert!(b.forward(&Tensor::zeros(&[1, 3, 3, 4, 4])).is_err());
    }

    #[test]
    fn up_block_restores_skip_shape() {
        let mut rng = SeedStream::new(3);
        let b = UpBlock::<f32>::init(8, 4, &mut rng);
        let low = Tensor::<f32>::randn(&[1, 8, 2, 2, 2], 1.0, &mut rng);
        let skip = Tensor::<f32>::randn(&[1, 4, 4, 4, 4], 1.0, &mut rng);
        assert_eq!(b.forward(&low, &skip).unwrap().shape(), [1, 4, 4, 4, 4]);
    }

    #[test]
    fn block_gradients() {
        let mut rng = SeedStream::new(4);
        let x = Tensor::<f64>::randn(&[1, 2, 2, 2, 4], 1.0, &mut rng);
        gradcheck_module(&ResBlock::init(2, &mut rng), x.clone(), |m, x| m.forward(x));
        gradcheck_module(&DenseBlock::init(2, 3, &mut rng), x.clone(), |m, x| m.forward(x));
        gradcheck_module(&ConvNormAct::init(2, 3, &mut rng), x.clone(), |m, x| m.forward(x));
        gradcheck_module(&OutBlock::init(2, 2, &mut rng), x.clone(), |m, x| m.forward(x));
        let skip = Tensor::<f64>::randn(&[1, 2, 4, 4, 8], 1.0, &mut rng);
        gradcheck_module(&UpBlock::init(2, 2, &mut rng), x, move |m, x| m.forward(x, &skip));
    }
}
