//! Config-driven workflows: run settings, evaluation reports and the
//! shared-backbone versus individually-trained comparison.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use crate::data::{Dataset, KeyValues, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    classification_metrics, psnr, segmentation_metrics, BinaryMaskPair, ClassificationMetrics, ScoredLabelSet,
    SegmentationMetrics,
};
use crate::optim::{HyperparameterSpace, OptimizerKind, TrainRecord};
use crate::tensor::{Rng, Tensor};
use crate::urep::{
    attach_head, train_backbone_supervised, train_backbone_unsupervised, train_head, train_individual,
    validation_noise, Architecture, BackboneRun, Budget, ConstructionMode, HeadKind, HeadOptions, HeadTraining, Task,
    TaskHead, URepModel,
};

/// Noise level for denoising backbones.
pub const DEFAULT_SIGMA: f64 = 0.03;
pub const DEFAULT_BACKBONE_EPOCHS: usize = 16;
pub const DEFAULT_HEAD_EPOCHS: usize = 20;

/// Settings shared by every command, read from `key=value` text.
///
/// | key | default |
/// |---|---|
/// | `seed` | 1 |
/// | `mode` | `unsupervised` (or `supervised`) |
/// | `space` | `kernel_size=3` unsupervised, `kernel_size=3;dilation=2` supervised |
/// | `channels` | per mode, see [`Architecture`] |
/// | `strides` | autoencoder strides, `1,1,1,1` |
/// | `epochs` | backbone epochs, 16 |
/// | `head_epochs` | 20 |
/// | `patience` | head early-stopping patience, 10 |
/// | `batch_size` | 16 |
/// | `lr` | 0.001 |
/// | `sigma` | 0.03 |
/// | `hidden`, `dropout`, `head_optimizer` | 32, 0.3, `adam` |
/// | `loss_weights` | all 1 |
/// | `freeze_backbone` | false |
/// | `threshold` | relatedness threshold, 0.1 |
/// | `data`, `out` | unset |
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: ConstructionMode,
    pub space: HyperparameterSpace,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub backbone_budget: Budget,
    pub head_budget: Budget,
    pub sigma: f64,
    pub head: HeadOptions,
    pub loss_weights: Option<Vec<f64>>,
    pub freeze_backbone: bool,
    pub threshold: f64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(mode: ConstructionMode) -> Self {
        let (space, channels) = match mode {
            ConstructionMode::UnsupervisedDenoising => ("kernel_size=3", Architecture::CDAE_CHANNELS.to_vec()),
            ConstructionMode::SupervisedSource => ("kernel_size=3;dilation=2", Architecture::DILATED_CHANNELS.to_vec()),
        };
        RunConfig {
            seed: 1,
            mode,
            space: HyperparameterSpace::parse(space).expect("valid default space"),
            channels,
            strides: Architecture::CDAE_STRIDES.to_vec(),
            backbone_budget: Budget::epochs(DEFAULT_BACKBONE_EPOCHS),
            head_budget: Budget::with_patience(DEFAULT_HEAD_EPOCHS, Budget::HEAD_PATIENCE),
            sigma: DEFAULT_SIGMA,
            head: HeadOptions::default(),
            loss_weights: None,
            freeze_backbone: false,
            threshold: crate::urep::DEFAULT_THRESHOLD,
            data: None,
            out: None,
        }
    }

    /// Consume every key of `kv`; any key outside the schema is an error.
    pub fn from_keys(mut kv: KeyValues) -> Result<Self> {
        let mode = kv.take_or("mode", ConstructionMode::UnsupervisedDenoising)?;
        let d = RunConfig::new(mode);
        let batch_size = kv.take_or("batch_size", d.backbone_budget.batch_size)?;
        let lr = kv.take_or("lr", d.backbone_budget.lr)?;
        let backbone_budget = Budget {
            epochs: kv.take_or("epochs", d.backbone_budget.epochs)?,
            batch_size,
            lr,
            ..d.backbone_budget
        };
        let head_budget = Budget {
            epochs: kv.take_or("head_epochs", d.head_budget.epochs)?,
            patience: Some(kv.take_or("patience", Budget::HEAD_PATIENCE)?),
            batch_size,
            lr,
            ..d.head_budget
        };
        let space = match kv.take::<String>("space")? {
            Some(s) => HyperparameterSpace::parse(&s)?,
            None => d.space,
        };
        let head = HeadOptions {
            hidden: kv.take_or("hidden", d.head.hidden)?,
            dropout: kv.take_or("dropout", d.head.dropout)?,
            optimizer: kv.take_or::<OptimizerKind>("head_optimizer", d.head.optimizer)?,
            classes: d.head.classes,
        };
        let cfg = RunConfig {
            seed: kv.take_or("seed", d.seed)?,
            mode,
            space,
            channels: kv.take_list("channels")?.unwrap_or(d.channels),
            strides: kv.take_list("strides")?.unwrap_or(d.strides),
            backbone_budget,
            head_budget,
            sigma: kv.take_or("sigma", d.sigma)?,
            head,
            loss_weights: kv.take_list("loss_weights")?,
            freeze_backbone: kv.take_or("freeze_backbone", d.freeze_backbone)?,
            threshold: kv.take_or("threshold", d.threshold)?,
            data: kv.take::<PathBuf>("data")?,
            out: kv.take::<PathBuf>("out")?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_budget.validate()?;
        self.head_budget.validate()?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma {} must be a finite value ≥ 0",
                self.sigma
            )));
        }
        if !(0.0..1.0).contains(&self.head.dropout) || self.head.hidden == 0 {
            return Err(Error::Config("head needs hidden ≥ 1 and dropout in [0, 1)".into()));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config(format!("threshold {} must be ≥ 0", self.threshold)));
        }
        Ok(())
    }

    /// Backbone template for `[C, H, W]` inputs; the search space may override kernel and dilation.
    pub fn architecture(&self, input: [usize; 3]) -> Result<Architecture> {
        match self.mode {
            ConstructionMode::UnsupervisedDenoising => Architecture::cdae(3, &self.channels, &self.strides, input),
            ConstructionMode::SupervisedSource => Architecture::dilated(3, 2, &self.channels, input),
        }
    }

    pub fn head_training(&self) -> HeadTraining {
        HeadTraining::new(self.head_budget.clone(), self.freeze_backbone, self.seed)
    }
}

fn input_of(data: &Dataset) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(data.image_shape())
        .map_err(|_| Error::Data(format!("images must be [C, H, W], got {:?}", data.image_shape())))
}

/// Optimise a backbone in the construction mode chosen by `cfg`.
pub fn train_backbone(data: &Dataset, cfg: &RunConfig) -> Result<BackboneRun> {
    let template = cfg.architecture(input_of(data)?)?;
    match cfg.mode {
        ConstructionMode::UnsupervisedDenoising => {
            train_backbone_unsupervised(data, &template, &cfg.space, &cfg.backbone_budget, cfg.sigma, cfg.seed)
        }
        ConstructionMode::SupervisedSource => {
            train_backbone_supervised(data, &template, &cfg.space, &cfg.backbone_budget, &cfg.head, cfg.seed)
        }
    }
}

/// Attach an untrained head whose initialisation depends only on the seed and `task_id`.
pub fn attach(model: &URepModel, task: Task, task_id: &str, cfg: &RunConfig) -> Result<TaskHead> {
    attach_head(
        model,
        task,
        task_id,
        &cfg.head,
        &mut Rng::derive(cfg.seed, head_stream(task_id)),
    )
}

/// Attach a head for `task` and train it per `cfg`.
pub fn fit_head(
    model: &URepModel,
    task: Task,
    task_id: &str,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<(TaskHead, TrainRecord)> {
    let mut head = attach(model, task, task_id, cfg)?;
    let rec = train_head(model, &mut head, data, &cfg.head_training())?;
    Ok((head, rec))
}

fn head_stream(task_id: &str) -> u64 {
    task_id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Metrics of one head (or of the denoiser) on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub task_id: String,
    pub task: String,
    pub samples: usize,
    pub classification: Option<ClassificationMetrics>,
    pub segmentation: Option<SegmentationMetrics>,
    /// `(noisy, denoised)` PSNR in dB.
    pub psnr: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub rows: Vec<EvalRow>,
}

pub const EVAL_HEADER: &str = "task_id\ttask\tsamples\taccuracy\tsensitivity\tprecision\tf_score\tauc\tiou\tpixel_accuracy\tdice\tpsnr_noisy\tpsnr_denoised";

fn cell(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => {
            let _ = write!(out, "\t{v:.6}");
        }
        None => out.push_str("\t-"),
    }
}

impl EvalReport {
    /// Tab-separated, columns as in [`EVAL_HEADER`]; inapplicable cells hold `-`.
    pub fn to_text(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            let _ = write!(out, "{}\t{}\t{}", r.task_id, r.task, r.samples);
            let c = r.classification.as_ref();
            for v in [
                c.map(|m| m.accuracy),
                c.map(|m| m.sensitivity),
                c.map(|m| m.precision),
                c.map(|m| m.f_score),
                c.map(|m| m.auc),
            ] {
                cell(&mut out, v);
            }
            let s = r.segmentation.as_ref();
            for v in [s.map(|m| m.iou), s.map(|m| m.pixel_accuracy), s.map(|m| m.dice)] {
                cell(&mut out, v);
            }
            cell(&mut out, r.psnr.map(|p| p.0));
            cell(&mut out, r.psnr.map(|p| p.1));
            out.push('\n');
        }
        out
    }
}

/// Metrics of `head` on `indices`.
pub fn evaluate_head(model: &URepModel, head: &TaskHead, data: &Dataset, indices: &[usize]) -> Result<EvalRow> {
    let x = data.images(indices)?;
    let mut row = EvalRow {
        task_id: head.task_id.clone(),
        task: head.task.to_string(),
        samples: indices.len(),
        classification: None,
        segmentation: None,
        psnr: None,
    };
    match (head.task, head.kind) {
        (Task::Segmentation, _) => {
            let truth = data.masks(indices)?.to_f64_vec();
            let pred = model.predict(head, &x)?.to_f64_vec();
            row.segmentation = Some(segmentation_metrics(&BinaryMaskPair::new(&pred, &truth)?)?);
        }
        (task, HeadKind::Classification { classes }) => {
            let labels = if task == Task::Quality {
                data.quality_labels(indices)?
            } else {
                data.class_labels(indices)?
            };
            let scores = model.predict(head, &x)?.to_f64_vec();
            row.classification = Some(classification_metrics(&ScoredLabelSet::new(scores, labels, classes)?)?);
        }
        (task, HeadKind::Segmentation) => {
            return Err(Error::Contract(format!(
                "{task} head {} has a segmentation output",
                head.task_id
            )));
        }
    }
    Ok(row)
}

/// PSNR of noisy and denoised images against the clean ones.
pub fn evaluate_denoising(model: &URepModel, clean: &Tensor<f32>, sigma: f64) -> Result<(f64, f64)> {
    let noisy = validation_noise(clean, sigma, model.seed)?;
    let denoised = model.reconstruct(&noisy)?;
    let c = clean.to_f64_vec();
    Ok((psnr(&c, &noisy.to_f64_vec())?, psnr(&c, &denoised.to_f64_vec())?))
}

/// One row per head, plus a `denoise` row for denoising backbones.
pub fn evaluate(model: &URepModel, data: &Dataset, split: Split, sigma: f64) -> Result<EvalReport> {
    let indices = data.indices(split);
    if indices.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    let mut rows = Vec::new();
    if model.mode == ConstructionMode::UnsupervisedDenoising && model.decoder.is_some() {
        let psnr = evaluate_denoising(model, &data.images(&indices)?, sigma)?;
        rows.push(EvalRow {
            task_id: "denoise".into(),
            task: "denoise".into(),
            samples: indices.len(),
            classification: None,
            segmentation: None,
            psnr: Some(psnr),
        });
    }
    for head in &model.heads {
        rows.push(evaluate_head(model, head, data, &indices)?);
    }
    Ok(EvalReport { split, rows })
}

/// Which side of the comparison a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Approach {
    /// One denoiser, heads trained on its frozen encoder.
    Shared,
    /// One denoiser plus one randomly initialised full model per task.
    Individual,
}

impl Approach {
    pub fn name(self) -> &'static str {
        match self {
            Approach::Shared => "shared",
            Approach::Individual => "individual",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub approach: Approach,
    pub task: String,
    pub best_val_loss: f64,
    pub epochs: usize,
    /// Test-split headline metric name and value.
    pub metric: (&'static str, f64),
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
}

pub const COMPARE_HEADER: &str = "approach\ttask\tbest_val_loss\tepochs\tmetric\tvalue\twall_seconds";

impl Comparison {
    pub fn total_secs(&self, approach: Approach) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.approach == approach)
            .map(|r| r.wall_secs)
            .sum()
    }

    /// Tab-separated rows per approach, each followed by a `total` row.
    /// With `timing` off every seconds cell is `-`, making the text reproducible.
    pub fn report(&self, timing: bool) -> String {
        let secs = |s: f64| if timing { format!("{s:.3}") } else { "-".into() };
        let mut out = format!("{COMPARE_HEADER}\n");
        for approach in [Approach::Shared, Approach::Individual] {
            for r in self.rows.iter().filter(|r| r.approach == approach) {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{:.6}\t{}\t{}\t{:.6}\t{}",
                    approach.name(),
                    r.task,
                    r.best_val_loss,
                    r.epochs,
                    r.metric.0,
                    r.metric.1,
                    secs(r.wall_secs)
                );
            }
            let _ = writeln!(
                out,
                "{}\ttotal\t-\t-\t-\t-\t{}",
                approach.name(),
                secs(self.total_secs(approach))
            );
        }
        out
    }
}

fn headline(row: &EvalRow) -> (&'static str, f64) {
    match (&row.segmentation, &row.classification) {
        (Some(s), _) => ("iou", s.iou),
        (_, Some(c)) => ("accuracy", c.accuracy),
        _ => ("psnr", row.psnr.map_or(f64::NAN, |p| p.1)),
    }
}

/// Train both pipelines on `data` with the same seeds and budgets.
///
/// The denoiser is trained once and its time counted in both totals, since
/// the two pipelines would run it identically. Shared heads train on the
/// frozen denoiser encoder; individual models train backbone and head from a
/// fresh initialisation with the head budget.
pub fn compare(data: &Dataset, tasks: &[Task], cfg: &RunConfig) -> Result<Comparison> {
    if cfg.mode != ConstructionMode::UnsupervisedDenoising {
        return Err(Error::Config("compare runs the denoising pipeline".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Config("compare needs at least one task".into()));
    }
    let test = data.indices(Split::Test);
    let t = Instant::now();
    let run = train_backbone(data, cfg)?;
    let denoise_secs = t.elapsed().as_secs_f64();
    let model = run.model;
    let rec = run.search.best_record();
    let psnr = evaluate_denoising(&model, &data.images(&test)?, cfg.sigma)?;
    let mut rows = Vec::new();
    for approach in [Approach::Shared, Approach::Individual] {
        rows.push(CompareRow {
            approach,
            task: "denoise".into(),
            best_val_loss: rec.best_val_loss(),
            epochs: rec.len(),
            metric: ("psnr", psnr.1),
            wall_secs: denoise_secs,
        });
    }
    let frozen = RunConfig {
        freeze_backbone: true,
        ..cfg.clone()
    };
    for &task in tasks {
        let t = Instant::now();
        let (head, rec) = fit_head(&model, task, task.name(), data, &frozen)?;
        let secs = t.elapsed().as_secs_f64();
        rows.push(CompareRow {
            approach: Approach::Shared,
            task: task.name().into(),
            best_val_loss: rec.best_val_loss(),
            epochs: rec.len(),
            metric: headline(&evaluate_head(&model, &head, data, &test)?),
            wall_secs: secs,
        });
    }
    for &task in tasks {
        let t = Instant::now();
        let (single, rec) = train_individual(
            &model.arch,
            &model.theta,
            task,
            &cfg.head,
            data,
            &cfg.head_budget,
            cfg.seed,
        )?;
        let secs = t.elapsed().as_secs_f64();
        let head = single.head(task.name()).expect("individual model has its head");
        rows.push(CompareRow {
            approach: Approach::Individual,
            task: task.name().into(),
            best_val_loss: rec.best_val_loss(),
            epochs: rec.len(),
            metric: headline(&evaluate_head(&single, head, data, &test)?),
            wall_secs: secs,
        });
    }
    Ok(Comparison { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig, SyntheticMode};

    fn tiny(mode: SyntheticMode, count: usize) -> Dataset {
        let mut c = SyntheticConfig::new(mode, count, 4);
        c.image_size = 32;
        Dataset::from_samples(generate(&c).unwrap(), 4).unwrap()
    }

    fn tiny_config() -> RunConfig {
        RunConfig::from_keys(
            KeyValues::parse("channels=4,4,8,8\nstrides=2,2,1,1\nepochs=2\nhead_epochs=2\nhidden=8\nbatch_size=8")
                .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn config_schema() {
        let c = RunConfig::from_keys(KeyValues::default()).unwrap();
        assert_eq!(c, RunConfig::new(ConstructionMode::UnsupervisedDenoising));
        let c = RunConfig::from_keys(KeyValues::parse("mode=supervised\nseed=9\nloss_weights=1,0.5").unwrap()).unwrap();
        assert_eq!(
            (c.mode, c.seed, c.space.len()),
            (ConstructionMode::SupervisedSource, 9, 1)
        );
        assert_eq!(c.loss_weights, Some(vec![1.0, 0.5]));
        assert_eq!(c.channels, Architecture::DILATED_CHANNELS.to_vec());
        let c = RunConfig::from_keys(KeyValues::parse("space=kernel_size=3,5;optimizer=adam,sgd").unwrap()).unwrap();
        assert_eq!(c.space.len(), 4);
        for bad in ["colour=red", "epochs=0", "sigma=-1", "mode=reinforced", "dropout=1.5"] {
            let e = RunConfig::from_keys(KeyValues::parse(bad).unwrap()).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        }
        let e = RunConfig::from_keys(KeyValues::parse("colour=red").unwrap()).unwrap_err();
        assert!(e.to_string().contains("colour"));
    }

    #[test]
    fn evaluate_gates_psnr_and_matches_metrics() {
        let data = tiny(SyntheticMode::SegCls, 96);
        let cfg = tiny_config();
        let mut model = train_backbone(&data, &cfg).unwrap().model;
        let (head, _) = fit_head(&model, Task::Classification, "cls", &data, &cfg).unwrap();
        model.insert_head(head);
        let report = evaluate(&model, &data, Split::Test, cfg.sigma).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows[0].psnr.is_some() && report.rows[1].psnr.is_none());
        let test = data.indices(Split::Test);
        let head = model.head("cls").unwrap();
        let direct = classification_metrics(
            &ScoredLabelSet::new(
                model.predict(head, &data.images(&test).unwrap()).unwrap().to_f64_vec(),
                data.class_labels(&test).unwrap(),
                2,
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(report.rows[1].classification.as_ref(), Some(&direct));
        let text = report.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], EVAL_HEADER);
        assert!(lines.iter().all(|l| l.split('\t').count() == 13));

        let q = attach_head(&model, Task::Quality, "q", &cfg.head, &mut Rng::new(0)).unwrap();
        model.insert_head(q);
        assert!(matches!(
            evaluate(&model, &data, Split::Test, 0.03),
            Err(Error::MissingLabels(_))
        ));
    }

    #[test]
    fn supervised_checkpoints_have_no_psnr_row() {
        let data = tiny(SyntheticMode::Flow3, 96);
        let mut cfg = tiny_config();
        cfg.mode = ConstructionMode::SupervisedSource;
        cfg.channels = vec![4, 4, 4, 4, 4, 4];
        cfg.space = HyperparameterSpace::parse("dilation=2").unwrap();
        let model = train_backbone(&data, &cfg).unwrap().model;
        let report = evaluate(&model, &data, Split::Test, 0.03).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].task_id, "source");
        assert!(report.rows[0].psnr.is_none() && report.rows[0].classification.is_some());
    }

    #[test]
    fn comparison_report_shape_and_determinism() {
        let data = tiny(SyntheticMode::SegCls, 96);
        let cfg = tiny_config();
        let tasks = [Task::Segmentation, Task::Classification];
        let a = compare(&data, &tasks, &cfg).unwrap();
        let b = compare(&data, &tasks, &cfg).unwrap();
        assert_eq!(a.report(false), b.report(false));
        let text = a.report(true);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], COMPARE_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 4);
        for l in &lines[1..] {
            assert_eq!(l.split('\t').count(), 7);
        }
        for approach in ["shared", "individual"] {
            let total: Vec<&str> = lines
                .iter()
                .find(|l| l.starts_with(&format!("{approach}\ttotal")))
                .unwrap()
                .split('\t')
                .collect();
            let secs: f64 = total[6].parse().unwrap();
            let sum: f64 = lines
                .iter()
                .filter(|l| l.starts_with(&format!("{approach}\t")) && !l.contains("\ttotal\t"))
                .map(|l| l.split('\t').nth(6).unwrap().parse::<f64>().unwrap())
                .sum();
            assert!((secs - sum).abs() < 0.01, "{secs} vs {sum}");
        }
        assert!(lines
            .iter()
            .any(|l| l.starts_with("shared\tseg\t") && l.contains("\tiou\t")));
        assert!(lines
            .iter()
            .any(|l| l.starts_with("individual\tcls\t") && l.contains("\taccuracy\t")));
    }
}
