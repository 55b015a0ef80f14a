//! The assembled encoder-decoder segmentation network.

use crate::blocks::{ConvNormAct, HybridBlock, OutBlock, ResBlock, UpBlock};
use crate::error::{Error, Result};
use crate::mism::MismConfig;
use crate::module::{impl_module, Module};
use crate::tensor::{Element, SeedStream, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channel width of each encoder stage, shallowest first.
    pub stage_widths: Vec<usize>,
    /// 1-based indices of the stages whose hybrid block contains a multi-view block.
    pub mism_stages: Vec<usize>,
    pub mism: MismConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::reference()
    }
}

impl NetworkConfig {
    /// Desk-scale configuration used for training and the acceptance checks.
    pub fn reference() -> Self {
        NetworkConfig {
            in_channels: 1,
            num_classes: 2,
            stage_widths: vec![16, 32, 64, 128],
            mism_stages: vec![2, 3, 4],
            mism: MismConfig::default(),
        }
    }

    /// Larger configuration used only for parameter and FLOP reporting.
    pub fn full_scale() -> Self {
        NetworkConfig {
            stage_widths: vec![16, 32, 64, 160, 320],
            mism_stages: vec![3, 4, 5],
            ..NetworkConfig::reference()
        }
    }

    /// Named preset: `hcma-ref` or `full-scale`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "hcma-ref" => Some(Self::reference()),
            "full-scale" => Some(Self::full_scale()),
            _ => None,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn has_mism(&self, stage: usize) -> bool {
        self.mism_stages.contains(&(stage + 1))
    }

    /// Channels entering the hybrid block of stage `stage` (0-based).
    pub fn hybrid_in(&self, stage: usize) -> usize {
        self.stage_widths[stage.saturating_sub(1)]
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.num_stages().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages() < 2 {
            return Err(Error::config("stage_widths", "at least two stages are required"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if let Some(i) = self.stage_widths.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("stage_widths[{i}]"), "must be positive"));
        }
        for &s in &self.mism_stages {
            if s == 0 || s > self.num_stages() {
                return Err(Error::config("mism_stages", format!("stage {s} is outside 1..={}", self.num_stages())));
            }
            if self.mism.use_asc {
                for (i, w) in [(s - 1, self.stage_widths[s - 1]), (s.saturating_sub(2), self.hybrid_in(s - 1))] {
                    if w % 4 != 0 {
                        return Err(Error::config(
                            format!("stage_widths[{i}]"),
                            format!("width {w} at a multi-view stage is not a multiple of 4"),
                        ));
                    }
                }
            }
        }
        if self.mism.vss.d_state == 0 || self.mism.vss.expand == 0 {
            return Err(Error::config("mism.vss", "d_state and expand must be positive"));
        }
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.in_channels {
            return Err(Error::shape(format!(
                "network expects [B, {}, D, H, W], got {shape:?}",
                self.in_channels
            )));
        }
        let m = self.size_multiple();
        if shape[2..].iter().any(|d| d % m != 0) {
            return Err(Error::shape(format!("spatial extents {:?} are not multiples of {m}", &shape[2..])));
        }
        Ok(())
    }
}

/// One encoder stage: an optional downsampling block then a hybrid block.
#[derive(Debug, Clone)]
pub struct EncoderStage<T: Element> {
    pub down: Option<ResBlock<T>>,
    pub hybrid: HybridBlock<T>,
}

impl_module!(EncoderStage { down, hybrid });

#[derive(Debug, Clone)]
pub struct HcmaUNet<T: Element> {
    pub stem: ConvNormAct<T>,
    pub encoder: Vec<EncoderStage<T>>,
    /// `decoder[k]` lifts stage `k + 1` back to stage `k`.
    pub decoder: Vec<UpBlock<T>>,
    pub head: OutBlock<T>,
    pub config: NetworkConfig,
}

impl_module!(HcmaUNet {
    stem,
    encoder,
    decoder,
    head
});

/// Logits `[B, classes, D, H, W]` and the last decoder features `[B, w0, D, H, W]`.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Element> {
    pub logits: Tensor<T>,
    pub features: Tensor<T>,
}

impl<T: Element> HcmaUNet<T> {
    /// Builds the network with parameters drawn from `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStream::new(seed);
        let w = &config.stage_widths;
        let stem = ConvNormAct::init(config.in_channels, w[0], &mut rng);
        let mut encoder = Vec::with_capacity(w.len());
        for k in 0..w.len() {
            let cin = config.hybrid_in(k);
            let down = (k > 0).then(|| ResBlock::init(cin, &mut rng));
            let mism = config.has_mism(k).then_some(&config.mism);
            encoder.push(EncoderStage {
                down,
                hybrid: HybridBlock::init(cin, w[k], mism, &mut rng)?,
            });
        }
        let decoder = (0..w.len() - 1).map(|k| UpBlock::init(w[k + 1], w[k], &mut rng)).collect();
        let head = OutBlock::init(w[0], config.num_classes, &mut rng);
        Ok(HcmaUNet {
            stem,
            encoder,
            decoder,
            head,
            config: config.clone(),
        })
    }

    /// Encoder outputs, shallowest first.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.config.check_input(x.shape())?;
        let mut h = self.stem.forward(x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            if let Some(d) = &stage.down {
                h = d.forward(&h)?;
            }
            h = stage.hybrid.forward(&h)?;
            skips.push(h.clone());
        }
        Ok(skips)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let skips = self.encode(x)?;
        let mut h = skips.last().expect("at least two stages").clone();
        for k in (0..self.decoder.len()).rev() {
            h = self.decoder[k].forward(&h, &skips[k])?;
        }
        Ok(ForwardOutput {
            logits: self.head.forward(&h)?,
            features: h,
        })
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Replaces parameters in visiting order.
    pub fn set_parameters(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        let n = self.named_params().len();
        if params.len() != n {
            return Err(Error::InvalidArgument(format!("expected {n} parameter tensors, got {}", params.len())));
        }
        let mut bad = None;
        let mut it = params.into_iter();
        self.visit_params_mut("", &mut |name, slot| {
            let p = it.next().expect("counted");
            if p.shape() != slot.shape() {
                bad.get_or_insert(format!("{name}: shape {:?}, want {:?}", p.shape(), slot.shape()));
            } else {
                *slot = p;
            }
        });
        match bad {
            Some(msg) => Err(Error::shape(msg)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::VssConfig;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            stage_widths: vec![4, 8],
            mism_stages: vec![2],
            mism: MismConfig {
                vss: VssConfig {
                    d_state: 2,
                    expand: 1,
                    shared_scan_params: false,
                },
                ..Default::default()
            },
            ..NetworkConfig::reference()
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::reference().validate().is_ok());
        assert!(NetworkConfig::full_scale().validate().is_ok());
        let one = NetworkConfig {
            stage_widths: vec![16],
            mism_stages: vec![],
            ..NetworkConfig::reference()
        };
        assert!(matches!(one.validate(), Err(Error::Config { .. })));
        let six = NetworkConfig {
            stage_widths: vec![16, 6, 64, 128],
            ..NetworkConfig::reference()
        };
        match six.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "stage_widths[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shapes_through_the_network() {
        let net = HcmaUNet::<f32>::build(&tiny(), 1).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 1, 4, 4, 6]);
        let out = net.forward(&x).unwrap();
        assert_eq!(out.logits.shape(), [2, 2, 4, 4, 6]);
        assert_eq!(out.features.shape(), [2, 4, 4, 4, 6]);
        assert!(net.forward(&Tensor::zeros(&[1, 1, 4, 4, 5])).is_err());
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let a = HcmaUNet::<f32>::build(&tiny(), 7).unwrap();
        let b = HcmaUNet::<f32>::build(&tiny(), 7).unwrap();
        let c = HcmaUNet::<f32>::build(&tiny(), 8).unwrap();
        let flat = |n: &HcmaUNet<f32>| -> Vec<u32> {
            n.parameters().iter().flat_map(|p| p.to_vec()).map(f32::to_bits).collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }
}
