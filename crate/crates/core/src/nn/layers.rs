use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Element, Graph, Init, Rng, Tensor, Var};

use super::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Square 2-D convolution hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub const KERNELS: [usize; 4] = [1, 3, 5, 7];

    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !Self::KERNELS.contains(&self.kernel) {
            return Err(Error::Contract(format!(
                "kernel size {} not in {:?}",
                self.kernel,
                Self::KERNELS
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Contract(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    pub fn geom(&self) -> ConvGeom {
        let pad = match self.padding {
            Padding::Same => self.dilation * (self.kernel - 1) / 2,
            Padding::Valid => 0,
        };
        ConvGeom {
            stride: self.stride,
            dilation: self.dilation,
            pad,
        }
    }

    /// Spatial output extent, `None` when the input is smaller than the dilated kernel.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        self.geom().out_extent(input, self.kernel)
    }
}

/// Convolve `x` with `spec`, checking channels against `spec`.
pub fn conv2d<'g, F: Element>(
    x: Var<'g, F>,
    spec: &ConvSpec,
    weight: Var<'g, F>,
    bias: Option<Var<'g, F>>,
) -> Result<Var<'g, F>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got shape {shape:?}",
            spec.in_channels
        )));
    }
    x.conv2d(weight, bias, spec.geom())
}

fn he_uniform<F: Element>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<F>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::create(shape, Init::Uniform(-bound, bound, rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<F: Element = f32> {
    pub spec: ConvSpec,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Element> Conv2d<F> {
    /// He-uniform weights, zero bias.
    pub fn new(spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        Ok(Conv2d {
            spec,
            weight: he_uniform(
                &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
                fan_in,
                rng,
            )?,
            bias: Tensor::zeros(&[spec.out_channels])?,
        })
    }
}

/// Per-channel batch normalisation with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<F: Element = f32> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch moments observed during a training pass, applied to running stats afterwards.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub biased_var: Vec<F>,
    pub count: usize,
}

impl<F: Element> BatchNorm2d<F> {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: Tensor::full(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Train mode normalises by batch moments; infer mode by running statistics.
    pub fn forward<'g>(
        &self,
        x: Var<'g, F>,
        gamma: Var<'g, F>,
        beta: Var<'g, F>,
        mode: Mode,
    ) -> Result<(Var<'g, F>, Option<BatchStats<F>>)> {
        let shape = x.shape();
        match mode {
            Mode::Train => {
                if shape.first().copied().unwrap_or(0) < 2 {
                    return Err(Error::Contract(format!(
                        "batch norm in train mode needs batch size ≥ 2, got shape {shape:?}"
                    )));
                }
                let (y, stats) = x.batch_norm(gamma, beta, None, self.eps)?;
                let (mean, biased_var) = stats.expect("batch moments");
                let count = shape[0] * shape[2] * shape[3];
                Ok((
                    y,
                    Some(BatchStats {
                        mean,
                        biased_var,
                        count,
                    }),
                ))
            }
            Mode::Infer => {
                let (y, _) = x.batch_norm(
                    gamma,
                    beta,
                    Some((self.running_mean.data(), self.running_var.data())),
                    self.eps,
                )?;
                Ok((y, None))
            }
        }
    }

    /// Fold batch moments into the running statistics (unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats<F>) {
        let m = F::of(self.momentum);
        let keep = F::one() - m;
        let correction = if stats.count > 1 {
            F::of(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            F::one()
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.biased_var) {
            *r = (keep * *r + m * v * correction).max(F::zero());
        }
    }
}

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F: Element = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Element> Dense<F> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Dense {
            weight: he_uniform(&[inputs, outputs], inputs, rng)?,
            bias: Tensor::zeros(&[1, outputs])?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `x·W + 1·b`, broadcasting the bias row over the batch.
pub fn dense<'g, F: Element>(x: Var<'g, F>, weight: Var<'g, F>, bias: Var<'g, F>) -> Result<Var<'g, F>> {
    let rows = x.shape()[0];
    let ones = x.graph().constant(Tensor::full(&[rows, 1], 1.0)?);
    x.matmul(weight)?.add(ones.matmul(bias)?)
}

/// Inverted dropout: survivors are scaled by `1/(1−rate)`; identity in infer mode.
pub fn dropout<'g, F: Element>(x: Var<'g, F>, rate: f64, mode: Mode, rng: Option<&mut Rng>) -> Result<Var<'g, F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let rng = rng.ok_or_else(|| Error::Contract("dropout in train mode needs an rng".into()))?;
    let shape = x.shape();
    let keep = F::of(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let mask: Vec<F> = (0..n)
        .map(|_| if rng.bernoulli(rate) { F::zero() } else { keep })
        .collect();
    let mask = x.graph().constant(Tensor::new(&shape, mask)?);
    x.mul(mask)
}

/// Add `N(0, σ²)` per pixel to an image in `[0, 1]` and clip back into range.
pub fn add_gaussian_noise<F: Element>(x: &Tensor<F>, sigma: f64, rng: &mut Rng) -> Result<Tensor<F>> {
    if x.data().iter().any(|&v| v < F::zero() || v > F::one()) {
        return Err(Error::Contract("noise injection expects values in [0, 1]".into()));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let data = x
        .data()
        .iter()
        .map(|&v| F::of((v.as_f64() + rng.gaussian(0.0, sigma)).clamp(0.0, 1.0)))
        .collect();
    Tensor::new(x.shape(), data)
}

/// Tape-free ×`factor` nearest-neighbour resize of a `[H, W]` map.
pub fn upsample_nearest_map(map: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = map[(i / factor) * w + j / factor];
        }
    }
    out
}

/// Insert a parameter into `g` as a trainable leaf or a constant.
pub(crate) fn bind<'g, F: Element>(g: &'g Graph<F>, t: &Tensor<F>, trainable: bool) -> Var<'g, F> {
    g.leaf(t.clone(), trainable)
}
