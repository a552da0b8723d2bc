use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, Layer, LayerStack, PassOptions};
use crate::optim::{OptimizerKind, TrainRecord};
use crate::tensor::{Graph, Rng, Tensor, Var};
use crate::urep::arch::{Architecture, BackboneKind};

/// Images per inference chunk.
pub const INFER_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConstructionMode {
    UnsupervisedDenoising,
    SupervisedSource,
}

impl fmt::Display for ConstructionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstructionMode::UnsupervisedDenoising => "unsupervised_denoising",
            ConstructionMode::SupervisedSource => "supervised_source",
        })
    }
}

impl FromStr for ConstructionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsupervised_denoising" | "unsupervised" => Ok(ConstructionMode::UnsupervisedDenoising),
            "supervised_source" | "supervised" => Ok(ConstructionMode::SupervisedSource),
            other => Err(Error::Config(format!("unknown construction mode {other:?}"))),
        }
    }
}

/// What a head predicts and which labels it learns from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Binary organ/envelope mask.
    Segmentation,
    /// Class label.
    Classification,
    /// Good/low quality label.
    Quality,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "seg",
            Task::Classification => "cls",
            Task::Quality => "quality",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(Task::Segmentation),
            "cls" => Ok(Task::Classification),
            "quality" => Ok(Task::Quality),
            other => Err(Error::Config(format!("unknown task {other:?} (seg, cls, quality)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classification { classes: usize },
    Segmentation,
}

/// Hyperparameters chosen by the backbone search.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta {
    pub kernel: usize,
    pub dilation: usize,
    pub dropout: Option<f64>,
    pub optimizer: OptimizerKind,
}

/// Where a backbone's weights came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs: usize,
    pub grid_index: usize,
    pub grid_size: usize,
    /// Name of the grid report written next to the checkpoint, if any.
    pub report: String,
}

impl Provenance {
    /// Marks a randomly initialised backbone.
    pub fn untrained() -> Self {
        Provenance {
            best_epoch: 0,
            best_val_loss: f64::NAN,
            epochs: 0,
            grid_index: 0,
            grid_size: 0,
            report: String::new(),
        }
    }
}

/// Summary of a head's training run.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSummary {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs: usize,
}

impl HeadSummary {
    pub fn of(record: &TrainRecord) -> Self {
        HeadSummary {
            best_epoch: record.best_epoch().unwrap_or(0),
            best_val_loss: record.best_val_loss(),
            epochs: record.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub task_id: String,
    pub task: Task,
    pub kind: HeadKind,
    /// Layers applied to the deepest encoder feature map.
    pub layers: LayerStack,
    pub hidden: usize,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    /// Backbone hyperparameters the head took over unchanged.
    pub inherited: Vec<String>,
    /// Privately fine-tuned encoder; `None` means the shared one.
    pub encoder: Option<LayerStack>,
    pub summary: Option<HeadSummary>,
}

impl TaskHead {
    pub fn classes(&self) -> Option<usize> {
        match self.kind {
            HeadKind::Classification { classes } => Some(classes),
            HeadKind::Segmentation => None,
        }
    }
}

/// Head construction options not inherited from the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOptions {
    pub hidden: usize,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    /// Class count for classification (quality heads always use 2).
    pub classes: usize,
}

impl Default for HeadOptions {
    fn default() -> Self {
        HeadOptions {
            hidden: 32,
            dropout: 0.3,
            optimizer: OptimizerKind::Adam,
            classes: 2,
        }
    }
}

/// A backbone with its chosen hyperparameters and any trained heads.
#[derive(Clone, Debug, PartialEq)]
pub struct URepModel {
    pub arch: Architecture,
    pub encoder: LayerStack,
    /// Autoencoder decoder; absent for the dilated CNN.
    pub decoder: Option<LayerStack>,
    pub theta: Theta,
    pub mode: ConstructionMode,
    pub seed: u64,
    pub provenance: Option<Provenance>,
    pub heads: Vec<TaskHead>,
}

impl URepModel {
    pub fn latent_shape(&self) -> Vec<usize> {
        self.arch.latent_shape()
    }

    pub fn head(&self, task_id: &str) -> Option<&TaskHead> {
        self.heads.iter().find(|h| h.task_id == task_id)
    }

    pub fn head_mut(&mut self, task_id: &str) -> Option<&mut TaskHead> {
        self.heads.iter_mut().find(|h| h.task_id == task_id)
    }

    /// Add or replace a head.
    pub fn insert_head(&mut self, head: TaskHead) {
        match self.heads.iter_mut().find(|h| h.task_id == head.task_id) {
            Some(h) => *h = head,
            None => self.heads.push(head),
        }
    }

    pub fn encoder_for<'a>(&'a self, head: Option<&'a TaskHead>) -> &'a LayerStack {
        head.and_then(|h| h.encoder.as_ref()).unwrap_or(&self.encoder)
    }

    pub fn check_input(&self, images: &Tensor<f32>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.arch.input {
            return Err(Error::Compatibility(format!(
                "backbone expects [N, {:?}] images, got {s:?}",
                self.arch.input
            )));
        }
        Ok(())
    }

    /// Deepest encoder features in inference mode.
    pub fn encode(&self, head: Option<&TaskHead>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(images)?;
        run_chunked(images, |g, x| {
            let (z, _) = self.encoder_for(head).forward(g, x, &mut PassOptions::infer())?;
            Ok(z)
        })
    }

    /// Autoencoder reconstruction of `images`.
    pub fn reconstruct(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let decoder = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Compatibility("backbone has no decoder".into()))?;
        self.check_input(images)?;
        run_chunked(images, |g, x| {
            let (z, _) = self.encoder.forward(g, x, &mut PassOptions::infer())?;
            let (y, _) = decoder.forward(g, z, &mut PassOptions::infer())?;
            Ok(y)
        })
    }

    /// Head output in inference mode: `[N, 1, H, W]` probabilities or `[N, K]` class scores.
    pub fn predict(&self, head: &TaskHead, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(images)?;
        run_chunked(images, |g, x| {
            let (z, _) = self.encoder_for(Some(head)).forward(g, x, &mut PassOptions::infer())?;
            let (y, _) = head.layers.forward(g, z, &mut PassOptions::infer())?;
            Ok(y)
        })
    }
}

/// Apply `f` to batches of at most [`INFER_CHUNK`] images and concatenate.
pub(crate) fn run_chunked(
    images: &Tensor<f32>,
    f: impl for<'g> Fn(&'g Graph<f32>, Var<'g, f32>) -> Result<Var<'g, f32>>,
) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(INFER_CHUNK) {
        let chunk = images.rows(start, (start + INFER_CHUNK).min(n))?;
        let g = Graph::new();
        let y = f(&g, g.constant(chunk))?;
        parts.push(y.value());
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::stack_batch(&refs)
}

/// GAP → FC → ReLU → dropout → FC(K) → softmax over `latent` (`[C, H, W]`) features.
pub fn classification_layers(
    latent: &[usize],
    hidden: usize,
    dropout: f64,
    classes: usize,
    rng: &mut Rng,
) -> Result<LayerStack> {
    if classes < 2 || hidden == 0 || !(0.0..1.0).contains(&dropout) {
        return Err(Error::Contract(format!(
            "classification head needs ≥ 2 classes, a hidden width and dropout in [0, 1); got {classes}, {hidden}, {dropout}"
        )));
    }
    let layers = vec![
        Layer::GlobalAvgPool,
        Layer::Dense(Dense::new(latent[0], hidden, rng)?),
        Layer::Relu,
        Layer::Dropout(dropout),
        Layer::Dense(Dense::new(hidden, classes, rng)?),
        Layer::Softmax,
    ];
    LayerStack::new(layers, latent)
}

/// Decoder mirror of `arch` ending in a fresh single-channel conv with sigmoid.
/// Hidden layers are copied from `decoder` when given, else freshly initialised.
pub fn segmentation_layers(arch: &Architecture, decoder: Option<&LayerStack>, rng: &mut Rng) -> Result<LayerStack> {
    let fresh = arch.build_decoder(rng)?;
    let mut layers = decoder.unwrap_or(&fresh).layers().to_vec();
    let last = layers
        .iter()
        .rposition(|l| matches!(l, Layer::Conv(_)))
        .ok_or_else(|| Error::Contract("decoder has no convolution".into()))?;
    let Layer::Conv(old) = &layers[last] else {
        unreachable!()
    };
    let mut spec = old.spec;
    spec.out_channels = 1;
    layers[last] = Layer::Conv(Conv2d::new(spec, rng)?);
    LayerStack::new(layers, &arch.latent_shape())
}

/// Build a head for `task` on top of `model`'s latent features.
///
/// Classification and quality heads are GAP → FC → ReLU → dropout → FC(K) →
/// softmax. Segmentation heads mirror the encoder back to input resolution and
/// end in a fresh single-channel conv with sigmoid; on the autoencoder the
/// hidden decoder layers start from the trained decoder.
pub fn attach_head(
    model: &URepModel,
    task: Task,
    task_id: &str,
    opts: &HeadOptions,
    rng: &mut Rng,
) -> Result<TaskHead> {
    if model.provenance.is_none() {
        return Err(Error::Contract("attach_head needs an optimised backbone".into()));
    }
    if task_id.is_empty() || task_id.contains(|c: char| c.is_whitespace() || c == '=' || c == '.') {
        return Err(Error::Contract(format!("invalid task id {task_id:?}")));
    }
    let latent = model.latent_shape();
    let (kind, layers) = match task {
        Task::Classification | Task::Quality => {
            let classes = if task == Task::Quality { 2 } else { opts.classes };
            let layers = classification_layers(&latent, opts.hidden, opts.dropout, classes, rng)?;
            (HeadKind::Classification { classes }, layers)
        }
        Task::Segmentation => {
            let base = model.decoder.as_ref().filter(|_| model.arch.kind == BackboneKind::Cdae);
            (HeadKind::Segmentation, segmentation_layers(&model.arch, base, rng)?)
        }
    };
    Ok(TaskHead {
        task_id: task_id.to_string(),
        task,
        kind,
        layers,
        hidden: if kind == HeadKind::Segmentation { 0 } else { opts.hidden },
        dropout: if kind == HeadKind::Segmentation {
            0.0
        } else {
            opts.dropout
        },
        optimizer: opts.optimizer,
        inherited: vec!["kernel_size".into(), "dilation".into()],
        encoder: None,
        summary: None,
    })
}

/// Check that a head fits a backbone's latent features.
pub fn check_head_compatible(model: &URepModel, head: &TaskHead) -> Result<()> {
    let latent = model.latent_shape();
    let out = head
        .layers
        .output_shape(&latent)
        .map_err(|e| Error::Compatibility(format!("head {} does not fit the backbone: {e}", head.task_id)))?;
    let ok = match head.kind {
        HeadKind::Classification { classes } => out == [classes],
        HeadKind::Segmentation => out == [1, model.arch.input[1], model.arch.input[2]],
    };
    if !ok {
        return Err(Error::Compatibility(format!(
            "head {} yields {out:?}, inconsistent with its kind {:?}",
            head.task_id, head.kind
        )));
    }
    if let Some(enc) = &head.encoder {
        if enc.output_shape(&model.arch.input).ok().as_deref() != Some(latent.as_slice()) {
            return Err(Error::Compatibility(format!(
                "head {} carries a mismatched encoder",
                head.task_id
            )));
        }
    }
    Ok(())
}
