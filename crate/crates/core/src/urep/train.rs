use std::collections::BTreeSet;
use std::time::Instant;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{cce_loss, mse_loss, segmentation_loss};
use crate::nn::{add_gaussian_noise, LayerStack, PassOptions, StackPass};
use crate::optim::{
    early_stop, grid_search, EpochRecord, GridPoint, HyperparameterSpace, Optimizer, OptimizerKind, PlateauConfig,
    PlateauScheduler, RunStatus, SearchOutcome, TrainRecord,
};
use crate::tensor::{Element, Graph, Rng, Tensor, Var};
use crate::urep::arch::{Architecture, BackboneKind};
use crate::urep::model::{
    attach_head, check_head_compatible, classification_layers, ConstructionMode, HeadKind, HeadOptions, HeadSummary,
    Provenance, Task, TaskHead, Theta, URepModel, INFER_CHUNK,
};

/// Stream of the fixed validation noise.
pub const VAL_NOISE_STREAM: u64 = u64::MAX;

/// Search axes the backbone trainers understand.
pub const AXES: [&str; 5] = ["kernel_size", "dilation", "dropout", "optimizer", "lr"];

#[derive(Clone, Debug, PartialEq)]
pub struct Budget {
    pub epochs: usize,
    pub batch_size: usize,
    /// Early-stopping patience; `None` trains for every epoch.
    pub patience: Option<usize>,
    pub lr: f64,
    pub plateau: PlateauConfig,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            epochs: 20,
            batch_size: 16,
            patience: None,
            lr: Optimizer::<f32>::DEFAULT_LR,
            plateau: PlateauConfig::default(),
        }
    }
}

impl Budget {
    pub const HEAD_PATIENCE: usize = 10;

    /// Fixed-length budget for backbone search.
    pub fn epochs(epochs: usize) -> Self {
        Budget {
            epochs,
            ..Budget::default()
        }
    }

    /// Patience-stopped budget for heads.
    pub fn with_patience(epochs: usize, patience: usize) -> Self {
        Budget {
            epochs,
            patience: Some(patience),
            ..Budget::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || self.patience == Some(0) {
            return Err(Error::Config(format!("bad training budget {self:?}")));
        }
        Ok(())
    }
}

/// Options for head and joint training.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTraining {
    pub budget: Budget,
    /// Keep the backbone fixed; otherwise it is fine-tuned with the head.
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl HeadTraining {
    pub fn new(budget: Budget, freeze_backbone: bool, seed: u64) -> Self {
        HeadTraining {
            budget,
            freeze_backbone,
            seed,
        }
    }
}

/// Result of a backbone grid search.
#[derive(Clone, Debug)]
pub struct BackboneRun {
    pub model: URepModel,
    pub search: SearchOutcome,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    Reconstruct,
    Task(Task),
}

#[derive(Clone, Debug)]
struct Branch {
    stack: LayerStack,
    target: Target,
    weight: f64,
}

#[derive(Clone, Debug)]
struct Net {
    encoder: LayerStack,
    train_encoder: bool,
    branches: Vec<Branch>,
}

fn has_target(data: &Dataset, i: usize, target: Target) -> bool {
    let s = &data.samples[i];
    match target {
        Target::Reconstruct => true,
        Target::Task(Task::Segmentation) => s.mask.is_some(),
        Target::Task(Task::Classification) => s.class_label.is_some(),
        Target::Task(Task::Quality) => s.quality_label.is_some(),
    }
}

fn target_name(t: Target) -> &'static str {
    match t {
        Target::Reconstruct => "image",
        Target::Task(Task::Segmentation) => "mask",
        Target::Task(Task::Classification) => "class",
        Target::Task(Task::Quality) => "quality",
    }
}

fn target_loss<'g>(
    g: &'g Graph<f32>,
    y: Var<'g, f32>,
    target: Target,
    data: &Dataset,
    idx: &[usize],
) -> Result<Var<'g, f32>> {
    match target {
        Target::Reconstruct => mse_loss(y, g.constant(data.images(idx)?)),
        Target::Task(Task::Segmentation) => segmentation_loss(y, g.constant(data.masks(idx)?)),
        Target::Task(Task::Classification) => cce_loss(y, &data.class_labels(idx)?),
        Target::Task(Task::Quality) => cce_loss(y, &data.quality_labels(idx)?),
    }
}

/// Encoder features computed once in inference mode.
struct FeatureCache {
    shape: Vec<usize>,
    rows: Vec<Option<Vec<f32>>>,
}

impl FeatureCache {
    fn build(encoder: &LayerStack, data: &Dataset, wanted: &BTreeSet<usize>) -> Result<Self> {
        let shape = encoder.output_shape(data.image_shape())?;
        let mut rows = vec![None; data.len()];
        let wanted: Vec<usize> = wanted.iter().copied().collect();
        for chunk in wanted.chunks(INFER_CHUNK) {
            let g = Graph::new();
            let (z, _) = encoder.forward(&g, g.constant(data.images(chunk)?), &mut PassOptions::infer())?;
            let z = z.value();
            for (k, &i) in chunk.iter().enumerate() {
                rows[i] = Some(z.slice_batch(k)?.into_data());
            }
        }
        Ok(FeatureCache { shape, rows })
    }

    fn gather(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        for &i in idx {
            data.extend_from_slice(self.rows[i].as_ref().expect("cached"));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.shape);
        Tensor::new(&shape, data)
    }
}

/// A copy of `clean` with the fixed validation noise applied.
pub fn validation_noise(clean: &Tensor<f32>, sigma: f64, seed: u64) -> Result<Tensor<f32>> {
    add_gaussian_noise(clean, sigma, &mut Rng::derive(seed, VAL_NOISE_STREAM))
}

/// Shuffle `idx` into batches; a trailing batch of one joins the previous batch.
fn batches(idx: &[usize], size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    rng.shuffle(&mut order);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

impl Net {
    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.branches.len());
        let mut next = if self.train_encoder {
            self.encoder.params().len()
        } else {
            0
        };
        for b in &self.branches {
            offsets.push(next);
            next += b.stack.params().len();
        }
        offsets
    }

    /// One optimiser step on `batch` for the `active` branches; returns the combined loss.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        opt: &mut Optimizer,
        data: &Dataset,
        batch: &[usize],
        active: &[usize],
        cache: Option<&FeatureCache>,
        noise: f64,
        rng: &mut Rng,
    ) -> Result<f64> {
        let g = Graph::new();
        let (z, enc_pass) = match cache {
            Some(c) => (g.constant(c.gather(batch)?), None),
            None => {
                let x = add_gaussian_noise(&data.images(batch)?, noise, rng)?;
                let (z, pass) = self.encoder.forward(&g, g.constant(x), &mut PassOptions::train(rng))?;
                (z, Some(pass))
            }
        };
        let mut total: Option<Var<f32>> = None;
        let mut passes: Vec<(usize, StackPass<f32>)> = Vec::new();
        for &b in active {
            let branch = &self.branches[b];
            let (y, pass) = branch.stack.forward(&g, z, &mut PassOptions::train(rng))?;
            let l = target_loss(&g, y, branch.target, data, batch)?.scale(branch.weight)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
            passes.push((b, pass));
        }
        let total = total.ok_or_else(|| Error::Contract("training step with no active task".into()))?;
        let value = total.value().item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value}")));
        }
        let grads = g.backward(total)?;
        let offsets = self.param_offsets();
        if let Some(pass) = &enc_pass {
            opt.step(&mut self.encoder.params_mut(), &pass.grads(&grads))?;
            self.encoder.apply_batch_stats(pass);
        }
        for (b, pass) in &passes {
            let stack = &mut self.branches[*b].stack;
            opt.step_from(offsets[*b], &mut stack.params_mut(), &pass.grads(&grads))?;
            stack.apply_batch_stats(pass);
        }
        Ok(value)
    }

    /// Mean loss of branch `b` over `idx`, evaluated in inference chunks.
    fn eval_branch(&self, b: usize, inputs: &Tensor<f32>, idx: &[usize], data: &Dataset, cached: bool) -> Result<f64> {
        let branch = &self.branches[b];
        let mut total = 0.0;
        for start in (0..idx.len()).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(idx.len());
            let g = Graph::new();
            let x = g.constant(inputs.rows(start, end)?);
            let z = if cached {
                x
            } else {
                self.encoder.forward(&g, x, &mut PassOptions::infer())?.0
            };
            let (y, _) = branch.stack.forward(&g, z, &mut PassOptions::infer())?;
            let l = target_loss(&g, y, branch.target, data, &idx[start..end])?;
            total += l.value().item().as_f64() * (end - start) as f64;
        }
        Ok(total / idx.len() as f64)
    }
}

/// Train `net` on the train split, validating on the val split; best-epoch weights are restored.
fn fit(
    net: &mut Net,
    data: &Dataset,
    budget: &Budget,
    optimizer: OptimizerKind,
    noise: f64,
    seed: u64,
    stream: u64,
) -> Result<TrainRecord> {
    budget.validate()?;
    let train_all = data.indices(Split::Train);
    let val_all = data.indices(Split::Val);
    if train_all.is_empty() || val_all.is_empty() {
        return Err(Error::Data("training needs non-empty train and val splits".into()));
    }
    let pick =
        |all: &[usize], t: Target| -> Vec<usize> { all.iter().copied().filter(|&i| has_target(data, i, t)).collect() };
    let mut train_sets = Vec::new();
    let mut val_sets = Vec::new();
    for b in &net.branches {
        let (tr, va) = (pick(&train_all, b.target), pick(&val_all, b.target));
        if tr.is_empty() || va.is_empty() {
            return Err(Error::MissingLabels(format!(
                "no {} samples carry {} labels",
                if tr.is_empty() { "training" } else { "validation" },
                target_name(b.target)
            )));
        }
        train_sets.push(tr);
        val_sets.push(va);
    }
    let cache = if net.train_encoder {
        None
    } else {
        if noise > 0.0 {
            return Err(Error::Contract("input noise needs a trainable encoder".into()));
        }
        let wanted: BTreeSet<usize> = train_sets.iter().chain(&val_sets).flatten().copied().collect();
        Some(FeatureCache::build(&net.encoder, data, &wanted)?)
    };
    let val_inputs: Vec<Tensor<f32>> = val_sets
        .iter()
        .map(|v| match &cache {
            Some(c) => c.gather(v),
            None => validation_noise(&data.images(v)?, noise, seed),
        })
        .collect::<Result<_>>()?;

    let mut rng = Rng::derive(seed, stream);
    let mut opt = Optimizer::new(optimizer, budget.lr)?;
    let mut sched = PlateauScheduler::new(budget.plateau)?;
    let mut lr = budget.lr;
    let shared = train_sets.iter().all(|s| *s == train_sets[0]);
    let mut record = TrainRecord::new();
    let mut best: Option<Net> = None;
    for _ in 0..budget.epochs {
        let start = Instant::now();
        let mut steps: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        if shared {
            let all: Vec<usize> = (0..net.branches.len()).collect();
            for b in batches(&train_sets[0], budget.batch_size, &mut rng) {
                steps.push((b, all.clone()));
            }
        } else {
            let mut per: Vec<std::vec::IntoIter<Vec<usize>>> = train_sets
                .iter()
                .map(|s| batches(s, budget.batch_size, &mut rng).into_iter())
                .collect();
            loop {
                let before = steps.len();
                for (b, it) in per.iter_mut().enumerate() {
                    if let Some(batch) = it.next() {
                        steps.push((batch, vec![b]));
                    }
                }
                if steps.len() == before {
                    break;
                }
            }
        }
        let mut sum = 0.0;
        for (batch, active) in &steps {
            sum += net.step(&mut opt, data, batch, active, cache.as_ref(), noise, &mut rng)?;
        }
        let mut val = 0.0;
        for (b, (inputs, idx)) in val_inputs.iter().zip(&val_sets).enumerate() {
            val += net.branches[b].weight * net.eval_branch(b, inputs, idx, data, cache.is_some())?;
        }
        let improved = record.push(EpochRecord {
            train_loss: sum / steps.len() as f64,
            val_loss: val,
            lr,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if improved {
            best = Some(net.clone());
        }
        lr = sched.observe(val, lr);
        opt.set_lr(lr)?;
        if let Some(p) = budget.patience {
            if early_stop(&record.val_history(), p)? {
                record.status = RunStatus::EarlyStopped;
                break;
            }
        }
    }
    *net = best.ok_or_else(|| Error::Numeric("no epoch reached a finite validation loss".into()))?;
    Ok(record)
}

fn check_axes(space: &HyperparameterSpace) -> Result<()> {
    for a in space.axes() {
        if !AXES.contains(&a.name.as_str()) {
            return Err(Error::Config(format!(
                "unknown search axis {:?} (known: {})",
                a.name,
                AXES.join(", ")
            )));
        }
    }
    Ok(())
}

/// Architecture, Θ and learning rate for one grid point.
fn point_settings(template: &Architecture, point: &GridPoint, lr: f64) -> Result<(Architecture, Theta, f64)> {
    let int = |name: &str, default: usize| -> Result<usize> {
        match point.get(name) {
            None => Ok(default),
            Some(_) => point
                .int(name)
                .filter(|v| *v > 0)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Config(format!("{name} must be a positive integer"))),
        }
    };
    let mut arch = template.clone();
    arch.kernel = int("kernel_size", template.kernel)?;
    arch.dilation = int("dilation", template.dilation)?;
    arch.validate()?;
    let dropout = match point.get("dropout") {
        None => None,
        Some(_) => Some(
            point
                .float("dropout")
                .filter(|d| (0.0..1.0).contains(d))
                .ok_or_else(|| Error::Config("dropout must lie in [0, 1)".into()))?,
        ),
    };
    let optimizer = match point.get("optimizer") {
        None => OptimizerKind::Adam,
        Some(v) => v.to_string().parse()?,
    };
    let lr = match point.get("lr") {
        None => lr,
        Some(_) => point
            .float("lr")
            .filter(|v| *v > 0.0)
            .ok_or_else(|| Error::Config("lr must be positive".into()))?,
    };
    let theta = Theta {
        kernel: arch.kernel,
        dilation: arch.dilation,
        dropout,
        optimizer,
    };
    Ok((arch, theta, lr))
}

fn check_images(data: &Dataset, arch: &Architecture) -> Result<()> {
    if data.image_shape() != arch.input {
        return Err(Error::Compatibility(format!(
            "backbone expects {:?} images, dataset has {:?}",
            arch.input,
            data.image_shape()
        )));
    }
    Ok(())
}

fn provenance(search: &SearchOutcome) -> Provenance {
    let rec = search.best_record();
    Provenance {
        best_epoch: rec.best_epoch().unwrap_or(0),
        best_val_loss: rec.best_val_loss(),
        epochs: rec.len(),
        grid_index: search.best_point().index,
        grid_size: search.space.len(),
        report: String::new(),
    }
}

/// Grid search over denoising autoencoders: noisy (σ) → clean with MSE.
pub fn train_backbone_unsupervised(
    data: &Dataset,
    template: &Architecture,
    space: &HyperparameterSpace,
    budget: &Budget,
    sigma: f64,
    seed: u64,
) -> Result<BackboneRun> {
    if template.kind != BackboneKind::Cdae {
        return Err(Error::Contract(
            "unsupervised construction trains the autoencoder".into(),
        ));
    }
    check_axes(space)?;
    check_images(data, template)?;
    let mut nets: Vec<Option<(Architecture, Theta, Net)>> = vec![None; space.len()];
    let search = grid_search(space, |p| {
        let (arch, theta, lr) = point_settings(template, p, budget.lr)?;
        let mut rng = Rng::derive(seed, 2 * p.index as u64);
        let mut net = Net {
            encoder: arch.build_encoder(&mut rng)?,
            train_encoder: true,
            branches: vec![Branch {
                stack: arch.build_decoder(&mut rng)?,
                target: Target::Reconstruct,
                weight: 1.0,
            }],
        };
        let b = Budget { lr, ..budget.clone() };
        let rec = fit(&mut net, data, &b, theta.optimizer, sigma, seed, 2 * p.index as u64 + 1)?;
        nets[p.index] = Some((arch, theta, net));
        Ok(rec)
    })?;
    let (arch, theta, mut net) = nets[search.best_point().index].take().expect("best point trained");
    let model = URepModel {
        arch,
        encoder: net.encoder,
        decoder: Some(net.branches.remove(0).stack),
        theta,
        mode: ConstructionMode::UnsupervisedDenoising,
        seed,
        provenance: Some(provenance(&search)),
        heads: Vec::new(),
    };
    Ok(BackboneRun { model, search })
}

/// Task id of the head trained alongside a supervised backbone.
pub const SOURCE_TASK: &str = "source";

/// Grid search over dilated CNNs with a classification head trained on the source labels.
pub fn train_backbone_supervised(
    data: &Dataset,
    template: &Architecture,
    space: &HyperparameterSpace,
    budget: &Budget,
    head: &HeadOptions,
    seed: u64,
) -> Result<BackboneRun> {
    if template.kind != BackboneKind::DilatedCnn {
        return Err(Error::Contract("supervised construction trains the dilated CNN".into()));
    }
    check_axes(space)?;
    check_images(data, template)?;
    data.class_labels(&data.indices(Split::Train))?;
    let classes = data
        .class_count()
        .filter(|&k| k >= 2)
        .ok_or_else(|| Error::Data("source task needs at least two classes".into()))?;
    let mut nets: Vec<Option<(Architecture, Theta, Net)>> = vec![None; space.len()];
    let search = grid_search(space, |p| {
        let (arch, mut theta, lr) = point_settings(template, p, budget.lr)?;
        let dropout = *theta.dropout.get_or_insert(head.dropout);
        let mut rng = Rng::derive(seed, 2 * p.index as u64);
        let encoder = arch.build_encoder(&mut rng)?;
        let layers = classification_layers(&arch.latent_shape(), head.hidden, dropout, classes, &mut rng)?;
        let mut net = Net {
            encoder,
            train_encoder: true,
            branches: vec![Branch {
                stack: layers,
                target: Target::Task(Task::Classification),
                weight: 1.0,
            }],
        };
        let b = Budget { lr, ..budget.clone() };
        let rec = fit(&mut net, data, &b, theta.optimizer, 0.0, seed, 2 * p.index as u64 + 1)?;
        nets[p.index] = Some((arch, theta, net));
        Ok(rec)
    })?;
    let (arch, theta, mut net) = nets[search.best_point().index].take().expect("best point trained");
    let rec = search.best_record();
    let source = TaskHead {
        task_id: SOURCE_TASK.into(),
        task: Task::Classification,
        kind: HeadKind::Classification { classes },
        layers: net.branches.remove(0).stack,
        hidden: head.hidden,
        dropout: theta.dropout.unwrap_or(head.dropout),
        optimizer: theta.optimizer,
        inherited: vec!["kernel_size".into(), "dilation".into()],
        encoder: None,
        summary: Some(HeadSummary::of(rec)),
    };
    let model = URepModel {
        arch,
        encoder: net.encoder,
        decoder: None,
        theta,
        mode: ConstructionMode::SupervisedSource,
        seed,
        provenance: Some(provenance(&search)),
        heads: vec![source],
    };
    Ok(BackboneRun { model, search })
}

/// Train one head; unless frozen, a private copy of the backbone is fine-tuned with it.
pub fn train_head(model: &URepModel, head: &mut TaskHead, data: &Dataset, opts: &HeadTraining) -> Result<TrainRecord> {
    check_head_compatible(model, head)?;
    check_images(data, &model.arch)?;
    let mut net = Net {
        encoder: model.encoder_for(Some(head)).clone(),
        train_encoder: !opts.freeze_backbone,
        branches: vec![Branch {
            stack: head.layers.clone(),
            target: Target::Task(head.task),
            weight: 1.0,
        }],
    };
    let rec = fit(&mut net, data, &opts.budget, head.optimizer, 0.0, opts.seed, 1)?;
    head.layers = net.branches.remove(0).stack;
    if !opts.freeze_backbone {
        head.encoder = Some(net.encoder);
    }
    head.summary = Some(HeadSummary::of(&rec));
    Ok(rec)
}

fn joint_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let w = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
    if w.len() != n || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
        return Err(Error::Config(format!(
            "need {n} non-negative loss weights, not all zero; got {w:?}"
        )));
    }
    Ok(w)
}

/// Train several heads of `model` against the shared backbone with loss Σ wᵢ·lossᵢ.
///
/// Tasks with identical labelled subsets share every batch; otherwise batches
/// alternate between tasks. The shared backbone is updated unless frozen, and
/// each trained head drops any private backbone copy.
pub fn train_joint(
    model: &mut URepModel,
    task_ids: &[&str],
    weights: Option<&[f64]>,
    data: &Dataset,
    opts: &HeadTraining,
) -> Result<TrainRecord> {
    if task_ids.is_empty() {
        return Err(Error::Contract("joint training needs at least one head".into()));
    }
    check_images(data, &model.arch)?;
    let w = joint_weights(task_ids.len(), weights)?;
    let mut branches = Vec::new();
    for (id, &weight) in task_ids.iter().zip(&w) {
        let head = model
            .head(id)
            .ok_or_else(|| Error::Contract(format!("model has no head {id:?}")))?;
        check_head_compatible(model, head)?;
        branches.push(Branch {
            stack: head.layers.clone(),
            target: Target::Task(head.task),
            weight,
        });
    }
    let mut net = Net {
        encoder: model.encoder.clone(),
        train_encoder: !opts.freeze_backbone,
        branches,
    };
    let rec = fit(&mut net, data, &opts.budget, model.theta.optimizer, 0.0, opts.seed, 1)?;
    model.encoder = net.encoder;
    for (id, branch) in task_ids.iter().zip(net.branches) {
        let head = model.head_mut(id).expect("checked above");
        head.layers = branch.stack;
        head.encoder = None;
        head.summary = Some(HeadSummary::of(&rec));
    }
    Ok(rec)
}

/// Inference-mode combined loss Σ wᵢ·lossᵢ on one batch, plus each task's loss
/// computed on its own graph.
pub fn joint_batch_losses(
    model: &URepModel,
    task_ids: &[&str],
    weights: Option<&[f64]>,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let w = joint_weights(task_ids.len(), weights)?;
    let heads: Vec<&TaskHead> = task_ids
        .iter()
        .map(|id| {
            model
                .head(id)
                .ok_or_else(|| Error::Contract(format!("model has no head {id:?}")))
        })
        .collect::<Result<_>>()?;
    let x = data.images(batch)?;
    let g = Graph::new();
    let (z, _) = model
        .encoder
        .forward(&g, g.constant(x.clone()), &mut PassOptions::infer())?;
    let mut total: Option<Var<f32>> = None;
    for (h, wi) in heads.iter().zip(&w) {
        let (y, _) = h.layers.forward(&g, z, &mut PassOptions::infer())?;
        let l = target_loss(&g, y, Target::Task(h.task), data, batch)?.scale(*wi)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    let combined = total.expect("at least one head").value().item().as_f64();
    let mut each = Vec::new();
    for h in &heads {
        let g = Graph::new();
        let (z, _) = model
            .encoder
            .forward(&g, g.constant(x.clone()), &mut PassOptions::infer())?;
        let (y, _) = h.layers.forward(&g, z, &mut PassOptions::infer())?;
        each.push(
            target_loss(&g, y, Target::Task(h.task), data, batch)?
                .value()
                .item()
                .as_f64(),
        );
    }
    Ok((combined, each))
}

/// Mean reconstruction MSE of `noisy` against `clean`, chunked as during validation.
pub fn reconstruction_mse(model: &URepModel, clean: &Tensor<f32>, noisy: &Tensor<f32>) -> Result<f64> {
    let decoder = model
        .decoder
        .as_ref()
        .ok_or_else(|| Error::Compatibility("backbone has no decoder".into()))?;
    let n = clean.shape()[0];
    let mut total = 0.0;
    for start in (0..n).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(n);
        let g = Graph::new();
        let (z, _) = model
            .encoder
            .forward(&g, g.constant(noisy.rows(start, end)?), &mut PassOptions::infer())?;
        let (y, _) = decoder.forward(&g, z, &mut PassOptions::infer())?;
        let l = mse_loss(y, g.constant(clean.rows(start, end)?))?;
        total += l.value().item().as_f64() * (end - start) as f64;
    }
    Ok(total / n as f64)
}

/// A randomly initialised model with the given shape and Θ, as used for
/// individually trained baselines.
pub fn fresh_model(arch: &Architecture, theta: &Theta, seed: u64) -> Result<URepModel> {
    let mut rng = Rng::derive(seed, 0);
    let encoder = arch.build_encoder(&mut rng)?;
    let decoder = match arch.kind {
        BackboneKind::Cdae => Some(arch.build_decoder(&mut rng)?),
        BackboneKind::DilatedCnn => None,
    };
    Ok(URepModel {
        arch: arch.clone(),
        encoder,
        decoder,
        theta: theta.clone(),
        mode: ConstructionMode::UnsupervisedDenoising,
        seed,
        provenance: Some(Provenance::untrained()),
        heads: Vec::new(),
    })
}

/// Train a full model for one task from scratch: fresh backbone and head, fine-tuned together.
pub fn train_individual(
    arch: &Architecture,
    theta: &Theta,
    task: Task,
    head_opts: &HeadOptions,
    data: &Dataset,
    budget: &Budget,
    seed: u64,
) -> Result<(URepModel, TrainRecord)> {
    let mut model = fresh_model(arch, theta, seed)?;
    let mut head = attach_head(&model, task, task.name(), head_opts, &mut Rng::derive(seed, 1))?;
    let rec = train_head(&model, &mut head, data, &HeadTraining::new(budget.clone(), false, seed))?;
    if let Some(enc) = head.encoder.take() {
        model.encoder = enc;
    }
    model.insert_head(head);
    Ok((model, rec))
}
