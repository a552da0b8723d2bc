use std::fmt;
use std::str::FromStr;

use crate::data::KeyValues;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Layer, LayerStack};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    Cdae,
    DilatedCnn,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Cdae => "cdae",
            BackboneKind::DilatedCnn => "dilated_cnn",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cdae" => Ok(BackboneKind::Cdae),
            "dilated_cnn" => Ok(BackboneKind::DilatedCnn),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

/// Backbone shape hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub kind: BackboneKind,
    pub kernel: usize,
    /// Dilation of the dilated layers (1 for the autoencoder).
    pub dilation: usize,
    /// Per-conv output channels of the encoder.
    pub channels: Vec<usize>,
    /// Per-conv strides (all 1 for the dilated CNN).
    pub strides: Vec<usize>,
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
}

impl Architecture {
    pub const CDAE_CHANNELS: [usize; 4] = [8, 16, 16, 16];
    pub const CDAE_STRIDES: [usize; 4] = [1, 1, 1, 1];
    pub const DILATED_CHANNELS: [usize; 6] = [8, 8, 16, 16, 16, 16];
    /// 1-based indices of the dilated CNN layers that use dilation.
    pub const DILATED_LAYERS: [usize; 3] = [4, 5, 6];

    pub fn cdae(kernel: usize, channels: &[usize], strides: &[usize], input: [usize; 3]) -> Result<Self> {
        let a = Architecture {
            kind: BackboneKind::Cdae,
            kernel,
            dilation: 1,
            channels: channels.to_vec(),
            strides: strides.to_vec(),
            input,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn dilated(kernel: usize, dilation: usize, channels: &[usize], input: [usize; 3]) -> Result<Self> {
        let a = Architecture {
            kind: BackboneKind::DilatedCnn,
            kernel,
            dilation,
            channels: channels.to_vec(),
            strides: vec![1; channels.len()],
            input,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let convs = match self.kind {
            BackboneKind::Cdae => 4,
            BackboneKind::DilatedCnn => 6,
        };
        if self.channels.len() != convs || self.strides.len() != convs {
            return Err(Error::Config(format!(
                "{} needs {convs} channel and stride entries, got {:?} / {:?}",
                self.kind, self.channels, self.strides
            )));
        }
        if !ConvSpec::KERNELS.contains(&self.kernel) || self.dilation == 0 || self.channels.contains(&0) {
            return Err(Error::Config(format!("bad {} hyperparameters {self:?}", self.kind)));
        }
        if self.strides.iter().any(|s| *s != 1 && *s != 2) {
            return Err(Error::Config(format!("strides must be 1 or 2, got {:?}", self.strides)));
        }
        if self.kind == BackboneKind::DilatedCnn && self.strides.iter().any(|&s| s != 1) {
            return Err(Error::Config("the dilated CNN keeps stride 1".into()));
        }
        if self.kind == BackboneKind::Cdae && self.dilation != 1 {
            return Err(Error::Config("the autoencoder is undilated".into()));
        }
        let total = self.total_stride();
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 || h % total != 0 || w % total != 0 {
            return Err(Error::Shape(format!(
                "input {h}×{w} not divisible by the total stride {total}"
            )));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    fn dilation_of(&self, layer: usize) -> usize {
        match self.kind {
            BackboneKind::DilatedCnn if Self::DILATED_LAYERS.contains(&(layer + 1)) => self.dilation,
            _ => 1,
        }
    }

    fn encoder_specs(&self) -> Vec<ConvSpec> {
        let mut inp = self.input[0];
        self.channels
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let s = ConvSpec::same(inp, out, self.kernel)
                    .with_stride(self.strides[i])
                    .with_dilation(self.dilation_of(i));
                inp = out;
                s
            })
            .collect()
    }

    /// Encoder: conv (+ batch norm for the autoencoder) + ReLU per layer.
    pub fn build_encoder(&self, rng: &mut Rng) -> Result<LayerStack> {
        self.validate()?;
        let mut layers = Vec::new();
        for spec in self.encoder_specs() {
            layers.push(Layer::Conv(Conv2d::new(spec, rng)?));
            if self.kind == BackboneKind::Cdae {
                layers.push(Layer::BatchNorm(BatchNorm2d::new(spec.out_channels)?));
            }
            layers.push(Layer::Relu);
        }
        LayerStack::new(layers, &self.input)
    }

    /// Mirror image of the encoder ending in a sigmoid map with the input's channel count.
    ///
    /// Encoder layer `j` (`c_in → c_out`, stride `s`) is mirrored by an
    /// optional ×2 upsample (when `s = 2`) followed by a `c_out → c_in` conv.
    /// Hidden decoder convs are followed by batch norm (autoencoder only) and
    /// ReLU; the last one by a sigmoid.
    pub fn build_decoder(&self, rng: &mut Rng) -> Result<LayerStack> {
        self.validate()?;
        let specs = self.encoder_specs();
        let mut layers = Vec::new();
        for (j, enc) in specs.iter().enumerate().rev() {
            if enc.stride == 2 {
                layers.push(Layer::Upsample);
            }
            let spec = ConvSpec::same(enc.out_channels, enc.in_channels, self.kernel).with_dilation(enc.dilation);
            layers.push(Layer::Conv(Conv2d::new(spec, rng)?));
            if j == 0 {
                layers.push(Layer::Sigmoid);
            } else {
                if self.kind == BackboneKind::Cdae {
                    layers.push(Layer::BatchNorm(BatchNorm2d::new(spec.out_channels)?));
                }
                layers.push(Layer::Relu);
            }
        }
        LayerStack::new(layers, &self.latent_shape())
    }

    /// `[C, H, W]` of the deepest encoder feature map.
    pub fn latent_shape(&self) -> Vec<usize> {
        let s = self.total_stride();
        vec![*self.channels.last().unwrap(), self.input[1] / s, self.input[2] / s]
    }

    /// Receptive field of the last encoder conv, in input pixels.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for spec in self.encoder_specs() {
            rf += spec.dilation * (spec.kernel - 1) * jump;
            jump *= spec.stride;
        }
        rf
    }

    pub fn write_keys(&self, kv: &mut KeyValues) {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        kv.set("arch", self.kind.to_string());
        kv.set("arch.kernel", self.kernel.to_string());
        kv.set("arch.dilation", self.dilation.to_string());
        kv.set("arch.channels", join(&self.channels));
        kv.set("arch.strides", join(&self.strides));
        kv.set("arch.input", join(&self.input));
    }

    pub fn from_keys(kv: &mut KeyValues) -> Result<Self> {
        let missing = |k: &str| Error::Config(format!("missing key {k}"));
        let kind: BackboneKind = kv.take("arch")?.ok_or_else(|| missing("arch"))?;
        let kernel = kv.take("arch.kernel")?.ok_or_else(|| missing("arch.kernel"))?;
        let dilation = kv.take("arch.dilation")?.ok_or_else(|| missing("arch.dilation"))?;
        let channels = kv.take_list("arch.channels")?.ok_or_else(|| missing("arch.channels"))?;
        let strides = kv.take_list("arch.strides")?.ok_or_else(|| missing("arch.strides"))?;
        let input: Vec<usize> = kv.take_list("arch.input")?.ok_or_else(|| missing("arch.input"))?;
        let input: [usize; 3] = input
            .try_into()
            .map_err(|v| Error::Config(format!("arch.input needs 3 entries, got {v:?}")))?;
        let a = Architecture {
            kind,
            kernel,
            dilation,
            channels,
            strides,
            input,
        };
        a.validate()?;
        Ok(a)
    }
}

/// Full autoencoder (encoder then decoder) as one stack.
pub fn build_cdae(arch: &Architecture, rng: &mut Rng) -> Result<LayerStack> {
    if arch.kind != BackboneKind::Cdae {
        return Err(Error::Contract("build_cdae needs an autoencoder architecture".into()));
    }
    let mut layers = arch.build_encoder(rng)?.layers().to_vec();
    layers.extend(arch.build_decoder(rng)?.layers().iter().cloned());
    LayerStack::new(layers, &arch.input)
}

/// The six-layer dilated CNN.
pub fn build_dilated_cnn(arch: &Architecture, rng: &mut Rng) -> Result<LayerStack> {
    if arch.kind != BackboneKind::DilatedCnn {
        return Err(Error::Contract("build_dilated_cnn needs a dilated architecture".into()));
    }
    arch.build_encoder(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerKind, PassOptions};
    use crate::tensor::{Graph, Init, Tensor};

    fn convs(stack: &LayerStack) -> Vec<ConvSpec> {
        stack
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.spec),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn cdae_shapes_and_symmetry() {
        let a = Architecture::cdae(3, &[4, 8, 8, 16], &[2, 2, 1, 1], [1, 32, 32]).unwrap();
        assert_eq!(a.latent_shape(), vec![16, 8, 8]);
        let mut rng = Rng::new(1);
        let net = build_cdae(&a, &mut rng).unwrap();
        assert_eq!(net.output_shape(&[1, 32, 32]).unwrap(), vec![1, 32, 32]);

        let enc = convs(&a.build_encoder(&mut rng).unwrap());
        let dec = convs(&a.build_decoder(&mut rng).unwrap());
        assert_eq!(enc.len(), dec.len());
        for (e, d) in enc.iter().zip(dec.iter().rev()) {
            assert_eq!((e.in_channels, e.out_channels), (d.out_channels, d.in_channels));
            assert_eq!(e.kernel, d.kernel);
        }
        let ups = net.kinds().iter().filter(|k| **k == LayerKind::Upsample).count();
        assert_eq!(ups, a.strides.iter().filter(|&&s| s == 2).count());

        let x = Tensor::create(&[2, 1, 32, 32], Init::Uniform(0.0, 1.0, &mut rng)).unwrap();
        let g = Graph::new();
        let (y, _) = net.forward(&g, g.constant(x), &mut PassOptions::infer()).unwrap();
        let y = y.value();
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));

        assert!(matches!(
            Architecture::cdae(3, &[4, 8, 8, 16], &[2, 2, 2, 2], [1, 40, 40]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dilated_cnn_structure() {
        let a = Architecture::dilated(3, 2, &Architecture::DILATED_CHANNELS, [1, 64, 64]).unwrap();
        let net = build_dilated_cnn(&a, &mut Rng::new(0)).unwrap();
        assert_eq!(net.output_shape(&[1, 64, 64]).unwrap(), vec![16, 64, 64]);
        let specs = convs(&net);
        assert_eq!(specs.len(), 6);
        let dil: Vec<usize> = specs.iter().map(|s| s.dilation).collect();
        assert_eq!(dil, vec![1, 1, 1, 2, 2, 2]);
        // Receptive field: 1 + Σ d·(k−1).
        assert_eq!(a.receptive_field(), 1 + 3 * 2 + 3 * 4);
        let plain = Architecture::dilated(3, 1, &Architecture::DILATED_CHANNELS, [1, 64, 64]).unwrap();
        assert!(a.receptive_field() > plain.receptive_field());
    }

    #[test]
    fn keys_round_trip() {
        let a = Architecture::cdae(
            5,
            &Architecture::CDAE_CHANNELS,
            &Architecture::CDAE_STRIDES,
            [1, 64, 64],
        )
        .unwrap();
        let mut kv = KeyValues::default();
        a.write_keys(&mut kv);
        assert_eq!(Architecture::from_keys(&mut kv).unwrap(), a);
        kv.finish().unwrap();
    }
}
