use std::path::Path;

use crate::data::{encode_pgm, quantize};
use crate::error::{Error, Result};
use crate::nn::{upsample_nearest_map, Layer, LayerStack, PassOptions};
use crate::tensor::{Element, Graph, Tensor};
use crate::urep::{HeadKind, TaskHead, URepModel};

/// Input-sized class-evidence map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major min-max normalised values.
    pub values: Vec<f64>,
    pub task_id: String,
    pub class_index: usize,
    /// Maximum of the raw map before normalisation.
    pub raw_max: f64,
}

/// Coarse Grad-CAM map `ReLU(Σₖ αₖ·Aₖ)` at the feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCam {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Channel weights αₖ.
    pub alphas: Vec<f64>,
}

/// Grad-CAM of `class_index` for one image through `encoder` and a classification `head` ending in softmax.
///
/// `A` is the encoder output; αₖ is the spatial mean of ∂(pre-softmax score)/∂Aₖ.
pub fn raw_cam<F: Element>(
    encoder: &LayerStack<F>,
    head: &LayerStack<F>,
    image: &Tensor<F>,
    class_index: usize,
) -> Result<RawCam> {
    let layers = head.layers();
    if !matches!(layers.last(), Some(Layer::Softmax)) {
        return Err(Error::Contract("Grad-CAM needs a head ending in softmax".into()));
    }
    let x = match image.shape().len() {
        3 => image
            .clone()
            .reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => {
            return Err(Error::Shape(format!(
                "Grad-CAM takes one image, got {:?}",
                image.shape()
            )))
        }
    };
    let g = Graph::new();
    let (a, _) = encoder.forward(&g, g.constant(x), &mut PassOptions::infer())?;
    let a = a.value();
    let shape = a.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("encoder output {shape:?} is not a feature map")));
    }
    let g = Graph::new();
    let av = g.leaf(a.clone(), true);
    let (logits, _) = head.forward_range(&g, av, 0..layers.len() - 1, &mut PassOptions::infer())?;
    let k = logits.shape()[1];
    if class_index >= k {
        return Err(Error::Contract(format!(
            "class index {class_index} out of range for K = {k}"
        )));
    }
    let mut pick = vec![0.0; k];
    pick[class_index] = 1.0;
    let score = logits.mul(g.constant(Tensor::from_f64(&[1, k], &pick)?))?.sum(None)?;
    let grads = g.backward(score)?;
    let da = grads
        .get(av)
        .ok_or_else(|| Error::Contract("no gradient reached the feature maps".into()))?;
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let (ad, gd) = (a.data(), da.data());
    let alphas: Vec<f64> = (0..c)
        .map(|ch| gd[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64)
        .collect();
    let values = (0..h * w)
        .map(|p| {
            let s: f64 = alphas
                .iter()
                .enumerate()
                .map(|(ch, al)| al * ad[ch * h * w + p].as_f64())
                .sum();
            s.max(0.0)
        })
        .collect();
    Ok(RawCam {
        height: h,
        width: w,
        values,
        alphas,
    })
}

/// Min-max normalisation; a constant map becomes all ones, an all-zero map stays zero.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return vec![0.0; values.len()];
    }
    if max == min {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Grad-CAM heatmap of `class_index` for a `[1, H, W]` image.
pub fn grad_cam(model: &URepModel, head: &TaskHead, image: &Tensor<f32>, class_index: usize) -> Result<Heatmap> {
    let HeadKind::Classification { classes } = head.kind else {
        return Err(Error::Contract(format!(
            "head {} is not a classification head",
            head.task_id
        )));
    };
    if class_index >= classes {
        return Err(Error::Contract(format!(
            "class index {class_index} out of range for K = {classes}"
        )));
    }
    let [_, ih, iw] = model.arch.input;
    let raw = raw_cam(model.encoder_for(Some(head)), &head.layers, image, class_index)?;
    if ih % raw.height != 0 || ih / raw.height != iw / raw.width {
        return Err(Error::Shape(format!(
            "feature map {}×{} does not tile the {ih}×{iw} input",
            raw.height, raw.width
        )));
    }
    let up = upsample_nearest_map(&raw.values, raw.height, raw.width, ih / raw.height);
    Ok(Heatmap {
        height: ih,
        width: iw,
        values: min_max(&up),
        task_id: head.task_id.clone(),
        class_index,
        raw_max: raw.values.iter().copied().fold(0.0, f64::max),
    })
}

impl Heatmap {
    pub fn to_pgm(&self) -> Vec<u8> {
        let px: Vec<u8> = self.values.iter().map(|&v| quantize(v)).collect();
        encode_pgm(self.width, self.height, &px)
    }

    /// Image and heatmap blended half and half.
    pub fn overlay_pgm(&self, image: &Tensor<f32>) -> Result<Vec<u8>> {
        if image.numel() != self.values.len() {
            return Err(Error::Shape(format!(
                "image has {} pixels, heatmap {}",
                image.numel(),
                self.values.len()
            )));
        }
        let px: Vec<u8> = image
            .data()
            .iter()
            .zip(&self.values)
            .map(|(&i, &h)| quantize(0.5 * i as f64 + 0.5 * h))
            .collect();
        Ok(encode_pgm(self.width, self.height, &px))
    }

    /// Write the heatmap and its overlay on `image`.
    pub fn write(&self, image: &Tensor<f32>, heatmap: &Path, overlay: &Path) -> Result<()> {
        std::fs::write(heatmap, self.to_pgm()).map_err(|e| Error::io(heatmap, e))?;
        std::fs::write(overlay, self.overlay_pgm(image)?).map_err(|e| Error::io(overlay, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, ConvSpec, Dense};
    use crate::optim::OptimizerKind;
    use crate::tensor::{Init, Rng};
    use crate::urep::{attach_head, fresh_model, Architecture, HeadOptions, Task, Theta};

    fn tiny_model() -> (URepModel, TaskHead) {
        let arch = Architecture::cdae(3, &[2, 3, 3, 4], &[2, 2, 1, 1], [1, 16, 16]).unwrap();
        let theta = Theta {
            kernel: 3,
            dilation: 1,
            dropout: None,
            optimizer: OptimizerKind::Adam,
        };
        let model = fresh_model(&arch, &theta, 11).unwrap();
        let opts = HeadOptions {
            hidden: 5,
            classes: 3,
            ..HeadOptions::default()
        };
        let head = attach_head(&model, Task::Classification, "cls", &opts, &mut Rng::new(4)).unwrap();
        (model, head)
    }

    fn image(seed: u64) -> Tensor<f32> {
        Tensor::create(&[1, 16, 16], Init::Uniform(0.0, 1.0, &mut Rng::new(seed))).unwrap()
    }

    /// Pre-softmax score of `class` as a plain function of the feature maps.
    fn score(head: &LayerStack<f64>, a: &Tensor<f64>, class: usize) -> f64 {
        let g = Graph::new();
        let n = head.len();
        let (y, _) = head
            .forward_range(&g, g.constant(a.clone()), 0..n - 1, &mut PassOptions::infer())
            .unwrap();
        y.value().data()[class]
    }

    #[test]
    fn matches_per_channel_finite_difference_oracle() {
        let (model, head) = tiny_model();
        let enc: LayerStack<f64> = model.encoder.cast();
        let hl: LayerStack<f64> = head.layers.cast();
        for (seed, class) in [(1, 0), (2, 1), (3, 2)] {
            let img: Tensor<f64> = image(seed).cast();
            let cam = raw_cam(&enc, &hl, &img, class).unwrap();
            let g = Graph::new();
            let x = img.clone().reshape(&[1, 1, 16, 16]).unwrap();
            let (a, _) = enc.forward(&g, g.constant(x), &mut PassOptions::infer()).unwrap();
            let a = a.value();
            let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
            let step = 1e-5;
            let mut expect = vec![0.0; h * w];
            for ch in 0..c {
                let mut alpha = 0.0;
                for p in 0..h * w {
                    let i = ch * h * w + p;
                    let (mut up, mut down) = (a.clone(), a.clone());
                    up.data_mut()[i] += step;
                    down.data_mut()[i] -= step;
                    alpha += (score(&hl, &up, class) - score(&hl, &down, class)) / (2.0 * step);
                }
                alpha /= (h * w) as f64;
                assert!(
                    (alpha - cam.alphas[ch]).abs() <= 1e-6 * (1.0 + alpha.abs()),
                    "{alpha} vs {}",
                    cam.alphas[ch]
                );
                for (e, v) in expect.iter_mut().zip(&a.data()[ch * h * w..(ch + 1) * h * w]) {
                    *e += alpha * v;
                }
            }
            for (e, v) in expect.iter().zip(&cam.values) {
                assert!((e.max(0.0) - v).abs() <= 1e-5, "{e} vs {v}");
            }
        }
    }

    #[test]
    fn heatmap_shape_range_and_scale_invariance() {
        let (model, head) = tiny_model();
        let img = image(5);
        let hm = grad_cam(&model, &head, &img, 1).unwrap();
        assert_eq!((hm.height, hm.width, hm.values.len()), (16, 16, 256));
        assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
        if hm.raw_max > 0.0 {
            assert!(hm.values.contains(&1.0));
        }
        for c in [0.3, 2.0, 17.0] {
            let mut scaled = head.clone();
            let n = scaled.layers.len();
            let Layer::Dense(d) = &mut scaled.layers.layers_mut()[n - 2] else {
                panic!()
            };
            for v in d.weight.data_mut().iter_mut().chain(d.bias.data_mut()) {
                *v *= c as f32;
            }
            let other = grad_cam(&model, &scaled, &img, 1).unwrap();
            for (a, b) in hm.values.iter().zip(&other.values) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
        assert!(matches!(grad_cam(&model, &head, &img, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn single_channel_with_uniform_gradient_reduces_to_activation() {
        let mut rng = Rng::new(9);
        let conv = Conv2d::new(ConvSpec::same(1, 1, 3), &mut rng).unwrap();
        let encoder = LayerStack::new(vec![Layer::Conv(conv), Layer::Relu], &[1, 8, 8]).unwrap();
        let mut dense = Dense::new(1, 2, &mut rng).unwrap();
        dense.weight.data_mut().copy_from_slice(&[0.7, -0.4]);
        let head = LayerStack::new(
            vec![Layer::GlobalAvgPool, Layer::Dense(dense), Layer::Softmax],
            &[1, 8, 8],
        )
        .unwrap();
        let img = Tensor::create(&[1, 8, 8], Init::Uniform(0.0, 1.0, &mut rng)).unwrap();
        let cam = raw_cam(&encoder, &head, &img, 0).unwrap();
        let g = Graph::new();
        let (a, _) = encoder
            .forward(
                &g,
                g.constant(img.clone().reshape(&[1, 1, 8, 8]).unwrap()),
                &mut PassOptions::infer(),
            )
            .unwrap();
        let act: Vec<f64> = a.value().to_f64_vec();
        for (x, y) in min_max(&cam.values).iter().zip(min_max(&act)) {
            assert!((x - y).abs() <= 1e-6);
        }
        // The other class has a negative weight, so its map is all zero.
        let neg = raw_cam(&encoder, &head, &img, 1).unwrap();
        assert!(neg.values.iter().all(|&v| v == 0.0));
        assert_eq!(min_max(&neg.values), vec![0.0; 64]);
    }

    #[test]
    fn segmentation_heads_are_rejected() {
        let (model, _) = tiny_model();
        let seg = attach_head(
            &model,
            Task::Segmentation,
            "seg",
            &HeadOptions::default(),
            &mut Rng::new(1),
        )
        .unwrap();
        assert!(matches!(grad_cam(&model, &seg, &image(1), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn pgm_outputs() {
        let (model, head) = tiny_model();
        let img = image(6);
        let hm = grad_cam(&model, &head, &img, 0).unwrap();
        let (w, h, px) = crate::data::decode_pgm(&hm.to_pgm()).unwrap();
        assert_eq!((w, h, px.len()), (16, 16, 256));
        let (_, _, ov) = crate::data::decode_pgm(&hm.overlay_pgm(&img).unwrap()).unwrap();
        for ((o, i), v) in ov.iter().zip(img.data()).zip(&hm.values) {
            assert_eq!(*o, quantize(0.5 * *i as f64 + 0.5 * v));
        }
    }
}
