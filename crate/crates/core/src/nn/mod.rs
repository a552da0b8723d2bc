//! Layers shared by every backbone and head.
//!
//! A [`LayerStack`] owns its parameter tensors. Each forward pass binds them
//! into a fresh [`Graph`]; the returned [`StackPass`] records which graph
//! nodes hold the parameters (in [`LayerStack::params_mut`] order) and any
//! batch-norm moments to fold into running statistics once the step is taken.

mod layers;

pub use layers::{
    add_gaussian_noise, conv2d, dense, dropout, upsample_nearest_map, BatchNorm2d, BatchStats, Conv2d, ConvSpec, Dense,
    Padding,
};

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Graph, Rng, Tensor, Var, VarId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<F: Element = f32> {
    Conv(Conv2d<F>),
    BatchNorm(BatchNorm2d<F>),
    Relu,
    Sigmoid,
    Upsample,
    GlobalAvgPool,
    Dense(Dense<F>),
    Dropout(f64),
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Relu,
    Sigmoid,
    Upsample,
    GlobalAvgPool,
    Dense,
    Dropout,
    Softmax,
}

impl<F: Element> Layer<F> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu => LayerKind::Relu,
            Layer::Sigmoid => LayerKind::Sigmoid,
            Layer::Upsample => LayerKind::Upsample,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Dropout(_) => LayerKind::Dropout,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    fn params(&self) -> Vec<(&'static str, &Tensor<F>)> {
        match self {
            Layer::Conv(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::BatchNorm(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => vec![],
        }
    }

    /// Shape after this layer for a per-sample input shape (`[C, H, W]` or `[K]`).
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(Error::Shape(format!("{what} needs a [C,H,W] input, got {input:?}"))),
            }
        };
        match self {
            Layer::Conv(conv) => {
                let (c, h, w) = spatial("conv")?;
                if c != conv.spec.in_channels {
                    return Err(Error::Shape(format!(
                        "conv expects {} channels, previous layer yields {c}",
                        conv.spec.in_channels
                    )));
                }
                match (conv.spec.out_extent(h), conv.spec.out_extent(w)) {
                    (Some(oh), Some(ow)) => Ok(vec![conv.spec.out_channels, oh, ow]),
                    _ => Err(Error::Shape(format!("input {h}×{w} too small for {:?}", conv.spec))),
                }
            }
            Layer::BatchNorm(bn) => {
                let (c, _, _) = spatial("batch norm")?;
                if c != bn.channels() {
                    return Err(Error::Shape(format!(
                        "batch norm over {} channels fed {c}",
                        bn.channels()
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::Upsample => {
                let (c, h, w) = spatial("upsample")?;
                Ok(vec![c, 2 * h, 2 * w])
            }
            Layer::GlobalAvgPool => {
                let (c, _, _) = spatial("global average pooling")?;
                Ok(vec![c])
            }
            Layer::Dense(d) => match input {
                [k] if *k == d.inputs() => Ok(vec![d.outputs()]),
                _ => Err(Error::Shape(format!(
                    "dense layer expects [{}], got {input:?}",
                    d.inputs()
                ))),
            },
            Layer::Softmax => match input {
                [k] if *k >= 2 => Ok(input.to_vec()),
                _ => Err(Error::Shape(format!("softmax needs [K≥2], got {input:?}"))),
            },
            Layer::Relu | Layer::Sigmoid | Layer::Dropout(_) => Ok(input.to_vec()),
        }
    }
}

/// Options for one pass through a stack.
pub struct PassOptions<'r> {
    pub mode: Mode,
    /// Bind parameters as trainable leaves (otherwise as constants).
    pub trainable: bool,
    pub rng: Option<&'r mut Rng>,
}

impl<'r> PassOptions<'r> {
    pub fn train(rng: &'r mut Rng) -> Self {
        PassOptions {
            mode: Mode::Train,
            trainable: true,
            rng: Some(rng),
        }
    }

    pub fn infer() -> Self {
        PassOptions {
            mode: Mode::Infer,
            trainable: false,
            rng: None,
        }
    }
}

/// Bookkeeping from one forward pass.
pub struct StackPass<F> {
    pub params: Vec<VarId>,
    pub batch_stats: Vec<BatchStats<F>>,
}

impl<F: Element> StackPass<F> {
    /// Gradients aligned with [`LayerStack::params_mut`].
    pub fn grads<'a>(&self, grads: &'a Gradients<F>) -> Vec<Option<&'a Tensor<F>>> {
        self.params.iter().map(|&id| grads.by_id(id)).collect()
    }
}

/// Ordered layers with owned parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<F: Element = f32> {
    layers: Vec<Layer<F>>,
}

impl<F: Element> Default for LayerStack<F> {
    fn default() -> Self {
        LayerStack { layers: Vec::new() }
    }
}

impl<F: Element> LayerStack<F> {
    /// Build a stack, checking that layer shapes compose for `input` (`[C, H, W]`).
    pub fn new(layers: Vec<Layer<F>>, input: &[usize]) -> Result<Self> {
        let stack = LayerStack { layers };
        stack.output_shape(input)?;
        Ok(stack)
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().map(|(_, t)| t))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Every persistent tensor (parameters and running statistics) with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.params() {
                out.push((format!("{i}.{name}"), t));
            }
            if let Layer::BatchNorm(bn) = layer {
                out.push((format!("{i}.running_mean"), &bn.running_mean));
                out.push((format!("{i}.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("{i}.weight"), &mut c.weight));
                    out.push((format!("{i}.bias"), &mut c.bias));
                }
                Layer::Dense(d) => {
                    out.push((format!("{i}.weight"), &mut d.weight));
                    out.push((format!("{i}.bias"), &mut d.bias));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{i}.gamma"), &mut bn.gamma));
                    out.push((format!("{i}.beta"), &mut bn.beta));
                    out.push((format!("{i}.running_mean"), &mut bn.running_mean));
                    out.push((format!("{i}.running_var"), &mut bn.running_var));
                }
                _ => {}
            }
        }
        out
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph<F>,
        x: Var<'g, F>,
        opts: &mut PassOptions<'_>,
    ) -> Result<(Var<'g, F>, StackPass<F>)> {
        self.forward_range(g, x, 0..self.layers.len(), opts)
    }

    /// Run only `range` of the layers.
    pub fn forward_range<'g>(
        &self,
        g: &'g Graph<F>,
        mut x: Var<'g, F>,
        range: Range<usize>,
        opts: &mut PassOptions<'_>,
    ) -> Result<(Var<'g, F>, StackPass<F>)> {
        let mut pass = StackPass {
            params: Vec::new(),
            batch_stats: Vec::new(),
        };
        for layer in &self.layers[range] {
            x = match layer {
                Layer::Conv(c) => {
                    let w = layers::bind(g, &c.weight, opts.trainable);
                    let b = layers::bind(g, &c.bias, opts.trainable);
                    if opts.trainable {
                        pass.params.extend([w.id(), b.id()]);
                    }
                    conv2d(x, &c.spec, w, Some(b))?
                }
                Layer::BatchNorm(bn) => {
                    let gamma = layers::bind(g, &bn.gamma, opts.trainable);
                    let beta = layers::bind(g, &bn.beta, opts.trainable);
                    if opts.trainable {
                        pass.params.extend([gamma.id(), beta.id()]);
                    }
                    let (y, stats) = bn.forward(x, gamma, beta, opts.mode)?;
                    pass.batch_stats.extend(stats);
                    y
                }
                Layer::Dense(d) => {
                    let w = layers::bind(g, &d.weight, opts.trainable);
                    let b = layers::bind(g, &d.bias, opts.trainable);
                    if opts.trainable {
                        pass.params.extend([w.id(), b.id()]);
                    }
                    dense(x, w, b)?
                }
                Layer::Relu => x.relu()?,
                Layer::Sigmoid => x.sigmoid()?,
                Layer::Upsample => x.upsample2()?,
                Layer::GlobalAvgPool => x.global_avg_pool()?,
                Layer::Dropout(rate) => dropout(x, *rate, opts.mode, opts.rng.as_deref_mut())?,
                Layer::Softmax => x.softmax()?,
            };
        }
        Ok((x, pass))
    }

    /// Fold the batch moments of a training pass into running statistics.
    pub fn apply_batch_stats(&mut self, pass: &StackPass<F>) {
        let mut stats = pass.batch_stats.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                match stats.next() {
                    Some(s) => bn.update_running(s),
                    None => return,
                }
            }
        }
    }

    /// Convert every tensor to another element type.
    pub fn cast<G: Element>(&self) -> LayerStack<G> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2d {
                    spec: c.spec,
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                }),
                Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm2d {
                    gamma: b.gamma.cast(),
                    beta: b.beta.cast(),
                    running_mean: b.running_mean.cast(),
                    running_var: b.running_var.cast(),
                    momentum: b.momentum,
                    eps: b.eps,
                }),
                Layer::Dense(d) => Layer::Dense(Dense {
                    weight: d.weight.cast(),
                    bias: d.bias.cast(),
                }),
                Layer::Relu => Layer::Relu,
                Layer::Sigmoid => Layer::Sigmoid,
                Layer::Upsample => Layer::Upsample,
                Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                Layer::Dropout(r) => Layer::Dropout(*r),
                Layer::Softmax => Layer::Softmax,
            })
            .collect();
        LayerStack { layers }
    }

    /// Set the rate of every dropout layer.
    pub fn set_dropout(&mut self, rate: f64) {
        for l in &mut self.layers {
            if let Layer::Dropout(r) = l {
                *r = rate;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::create(shape, crate::tensor::Init::Uniform(-1.0, 1.0, rng)).unwrap()
    }

    #[test]
    fn same_padding_stride_two_halves() {
        let spec = ConvSpec::same(1, 4, 3).with_stride(2);
        assert_eq!(spec.out_extent(32), Some(16));
        for k in [3, 5, 7] {
            for d in [1, 2, 3] {
                let s = ConvSpec::same(2, 2, k).with_dilation(d);
                assert_eq!(s.out_extent(17), Some(17), "k={k} d={d}");
            }
        }
    }

    #[test]
    fn kernel_outside_grid_rejected() {
        assert!(ConvSpec::same(1, 1, 4).validate().is_err());
    }

    #[test]
    fn stack_shape_mismatch_caught_at_build() {
        let mut rng = Rng::new(0);
        let conv = Conv2d::<f32>::new(ConvSpec::same(1, 4, 3), &mut rng).unwrap();
        let bn = BatchNorm2d::new(3).unwrap();
        let err = LayerStack::new(vec![Layer::Conv(conv), Layer::BatchNorm(bn)], &[1, 8, 8]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn batch_norm_train_standardises() {
        let mut rng = Rng::new(3);
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::create(&[4, 2, 3, 3], crate::tensor::Init::Gaussian(5.0, 3.0, &mut rng)).unwrap());
        let bn = BatchNorm2d::<f64>::new(2).unwrap();
        let (y, stats) = bn
            .forward(
                x,
                g.constant(bn.gamma.clone()),
                g.constant(bn.beta.clone()),
                Mode::Train,
            )
            .unwrap();
        assert!(stats.is_some());
        let y = y.value();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 2 + ch) * 9..(b * 2 + ch + 1) * 9].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_affine_law() {
        // Standardised input: per channel mean 0, biased variance 1.
        let data = [-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0];
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 1, 2, 2], &data).unwrap());
        let mut bn = BatchNorm2d::<f64>::new(1).unwrap();
        bn.eps = 0.0;
        let gamma = g.constant(Tensor::full(&[1], 2.0).unwrap());
        let beta = g.constant(Tensor::full(&[1], 3.0).unwrap());
        let (y, _) = bn.forward(x, gamma, beta, Mode::Train).unwrap();
        let y = y.value();
        let m = y.data().iter().sum::<f64>() / 8.0;
        let sd = (y.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0).sqrt();
        assert!((m - 3.0).abs() < 1e-12);
        assert!((sd - 2.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_infer_hand_computed() {
        let mut bn = BatchNorm2d::<f64>::new(2).unwrap();
        bn.running_mean = Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap();
        bn.running_var = Tensor::from_f64(&[2], &[4.0, 0.25]).unwrap();
        bn.gamma = Tensor::from_f64(&[2], &[0.5, 2.0]).unwrap();
        bn.beta = Tensor::from_f64(&[2], &[0.1, -0.1]).unwrap();
        let x = [3.0, 5.0, -2.0, -1.5];
        let g = Graph::<f64>::new();
        let xv = g.constant(Tensor::from_f64(&[1, 2, 1, 2], &x).unwrap());
        let (y, stats) = bn
            .forward(
                xv,
                g.constant(bn.gamma.clone()),
                g.constant(bn.beta.clone()),
                Mode::Infer,
            )
            .unwrap();
        assert!(stats.is_none());
        let expected = [
            (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt() * 0.5 + 0.1,
            (5.0 - 1.0) / (4.0f64 + 1e-5).sqrt() * 0.5 + 0.1,
            (-2.0 + 2.0) / (0.25f64 + 1e-5).sqrt() * 2.0 - 0.1,
            (-1.5 + 2.0) / (0.25f64 + 1e-5).sqrt() * 2.0 - 0.1,
        ];
        for (a, b) in y.value().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_single_sample_train_is_contract_error() {
        let g = Graph::<f64>::new();
        let bn = BatchNorm2d::<f64>::new(1).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]).unwrap());
        let r = bn.forward(
            x,
            g.constant(bn.gamma.clone()),
            g.constant(bn.beta.clone()),
            Mode::Train,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn batch_norm_infer_is_batch_size_independent() {
        let mut rng = Rng::new(5);
        let mut bn = BatchNorm2d::<f64>::new(2).unwrap();
        bn.running_mean = rand_tensor(&[2], &mut rng);
        bn.running_var = Tensor::from_f64(&[2], &[0.7, 1.9]).unwrap();
        let batch = rand_tensor(&[3, 2, 2, 2], &mut rng);
        let run = |t: &Tensor<f64>| {
            let g = Graph::<f64>::new();
            let x = g.constant(t.clone());
            bn.forward(
                x,
                g.constant(bn.gamma.clone()),
                g.constant(bn.beta.clone()),
                Mode::Infer,
            )
            .unwrap()
            .0
            .value()
        };
        let full = run(&batch);
        for i in 0..3 {
            let single = run(&batch.slice_batch(i).unwrap());
            assert_eq!(single.data(), &full.data()[i * 8..(i + 1) * 8]);
        }
    }

    #[test]
    fn running_stats_stay_nonnegative() {
        let mut bn = BatchNorm2d::<f64>::new(1).unwrap();
        bn.update_running(&BatchStats {
            mean: vec![2.0],
            biased_var: vec![0.0],
            count: 4,
        });
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn dropout_degenerate_cases() {
        let mut rng = Rng::new(1);
        let g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[10], &mut rng));
        let y = dropout(x, 0.0, Mode::Train, Some(&mut rng)).unwrap();
        assert_eq!(y.value(), x.value());
        let y = dropout(x, 0.9, Mode::Infer, None).unwrap();
        assert_eq!(y.value(), x.value());
        assert!(matches!(
            dropout(x, 1.0, Mode::Train, Some(&mut rng)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = Rng::new(11);
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1_000_000], 1.0).unwrap());
        let y = dropout(x, 0.5, Mode::Train, Some(&mut rng)).unwrap().value();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        let mean = y.data().iter().sum::<f64>() / 1e6;
        assert!((survivors - 0.5).abs() < 0.003, "{survivors}");
        assert!((mean - 1.0).abs() < 0.006, "{mean}");
    }

    #[test]
    fn noise_statistics_and_clip() {
        let mut rng = Rng::new(2);
        let clean = Tensor::<f64>::create(&[1_000_000], crate::tensor::Init::Uniform(0.2, 0.8, &mut rng)).unwrap();
        assert_eq!(add_gaussian_noise(&clean, 0.0, &mut rng).unwrap(), clean);
        let noisy = add_gaussian_noise(&clean, 0.03, &mut rng).unwrap();
        let d: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!((sd - 0.03).abs() < 0.001, "{sd}");
        let edge = Tensor::<f64>::from_f64(&[4], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let n = add_gaussian_noise(&edge, 0.5, &mut rng).unwrap();
        assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = Rng::new(9);
        for trial in 0..4 {
            let k = [1, 3, 5][trial % 3];
            let d = 1 + trial % 2;
            let stride = 1 + (trial / 2) % 2;
            let spec = ConvSpec::same(2, 3, k).with_stride(stride).with_dilation(d);
            let x = rand_tensor(&[2, 2, 6, 6], &mut rng);
            let w = rand_tensor(&[3, 2, k, k], &mut rng);
            let b = rand_tensor(&[3], &mut rng);
            let r = check_gradients(&[x, w, b], 1e-4, |_, v| {
                conv2d(v[0], &spec, v[1], Some(v[2]))?
                    .mul(v[0].graph().constant(Tensor::from_f64(&[1], &[1.3]).unwrap()))?
                    .relu()?
                    .sum(None)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "conv trial {trial}: {r:?}");
        }
    }
}
