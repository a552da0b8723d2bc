use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use urep::data::{generate, read_image, Dataset, KeyValues, Split, SyntheticConfig};
use urep::derivable::{grad_cam, recommend, RuleTable};
use urep::optim::TrainRecord;
use urep::pipeline::{self, RunConfig};
use urep::tensor::Tensor;
use urep::urep::{assess_datasets, checkpoint, HeadKind, Task, TaskHead, URepModel};
use urep::Error;

use crate::{Cli, Command, RunArgs};

/// A message and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_SEARCH: u8 = 4;
pub const EXIT_COMPATIBILITY: u8 = 5;
pub const EXIT_MISSING_LABELS: u8 = 6;
pub const EXIT_EXPLAIN: u8 = 7;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Io { .. } | Error::Image(_) | Error::Checkpoint(_) | Error::Manifest(_) => EXIT_IO,
            Error::Search(_) => EXIT_SEARCH,
            Error::Compatibility(_) => EXIT_COMPATIBILITY,
            Error::MissingLabels(_) => EXIT_MISSING_LABELS,
            Error::Shape(_) | Error::Contract(_) | Error::Numeric(_) | Error::Data(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure {
        code: EXIT_IO,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn make_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Failure {
        code: EXIT_IO,
        message: format!("cannot create {}: {e}", path.display()),
    })
}

fn run_config(run: &RunArgs, flags: &[(&str, Option<String>)]) -> Outcome<RunConfig> {
    let mut kv = match &run.config {
        Some(p) => KeyValues::read(p)?,
        None => KeyValues::default(),
    };
    for pair in &run.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = run.seed {
        kv.set("seed", seed.to_string());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v.clone());
        }
    }
    Ok(RunConfig::from_keys(kv)?)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn load_data(path: &Path) -> Outcome<Dataset> {
    let manifest = if path.is_dir() {
        path.join("manifest.tsv")
    } else {
        path.to_path_buf()
    };
    let (data, warnings) = Dataset::load(&manifest)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(data)
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Outcome<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| config_error(format!("no {key}: pass --{key} or set {key}= in the config")))
}

fn epoch_log(rec: &TrainRecord, timing: bool) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_loss\tlr\twall_seconds\n");
    for (i, e) in rec.epochs().iter().enumerate() {
        let secs = if timing {
            format!("{:.3}", e.wall_secs)
        } else {
            "-".into()
        };
        let _ = writeln!(out, "{i}\t{:.6}\t{:.6}\t{:e}\t{secs}", e.train_loss, e.val_loss, e.lr);
    }
    out
}

fn parse_tasks(list: &str) -> Outcome<Vec<Task>> {
    let tasks: Vec<Task> = list
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if tasks.is_empty() {
        return Err(config_error("no tasks given"));
    }
    Ok(tasks)
}

fn single_image(image: &Tensor<f32>) -> Outcome<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Ok(image.clone().reshape(&shape)?)
}

fn head_by_task(model: &URepModel, task: Task) -> Option<&TaskHead> {
    model.heads.iter().find(|h| h.task == task)
}

pub fn run(cli: Cli) -> Outcome {
    let timing = !cli.no_timing;
    match cli.command {
        Command::GenData { config, out } => {
            let mut kv = KeyValues::read(&config)?;
            let sc = SyntheticConfig::from_keys(&mut kv)?;
            kv.finish()?;
            let data = Dataset::from_samples(generate(&sc)?, sc.seed)?;
            data.save(&out)?;
            let mut line = format!("samples={}", data.len());
            if let Some(k) = data.class_count() {
                for c in 0..k {
                    let n = data.samples.iter().filter(|s| s.class_label == Some(c)).count();
                    let _ = write!(line, " class_{c}={n}");
                }
            }
            let quality: Vec<_> = data.samples.iter().filter_map(|s| s.quality_label).collect();
            if !quality.is_empty() {
                let low = quality.iter().filter(|q| q.index() == 1).count();
                let _ = write!(line, " quality_good={} quality_low={low}", quality.len() - low);
            }
            for split in Split::ALL {
                let _ = write!(line, " {split}={}", data.indices(split).len());
            }
            println!("{line}");
        }
        Command::TrainBackbone {
            mode,
            data,
            space,
            out,
            run,
        } => {
            let cfg = run_config(
                &run,
                &[
                    ("mode", mode),
                    ("data", path_flag(&data)),
                    ("space", space),
                    ("out", path_flag(&out)),
                ],
            )?;
            let dataset = load_data(required(&cfg.data, "data")?)?;
            let out = required(&cfg.out, "out")?;
            make_dir(out)?;
            let mut result = pipeline::train_backbone(&dataset, &cfg)?;
            let report = result.search.report(timing);
            write_file(&out.join("grid_report.tsv"), &report)?;
            if let Some(p) = result.model.provenance.as_mut() {
                p.report = "grid_report.tsv".into();
            }
            let path = out.join("backbone.ckpt");
            checkpoint::save(&result.model, &path)?;
            print!("{report}");
            println!("checkpoint={}", path.display());
        }
        Command::TrainHead {
            checkpoint: ckpt,
            task,
            task_id,
            data,
            out,
            freeze_backbone,
            run,
        } => {
            let freeze = freeze_backbone.then(|| "true".to_string());
            let cfg = run_config(
                &run,
                &[
                    ("data", path_flag(&data)),
                    ("out", path_flag(&out)),
                    ("freeze_backbone", freeze),
                ],
            )?;
            let task: Task = task.parse()?;
            let id = task_id.unwrap_or_else(|| task.name().to_string());
            let mut model = checkpoint::load(&ckpt)?;
            if model.head(&id).is_some() {
                return Err(config_error(format!("checkpoint already has a head named {id:?}")));
            }
            let dataset = load_data(required(&cfg.data, "data")?)?;
            let out = required(&cfg.out, "out")?;
            make_dir(out)?;
            let (head, rec) = pipeline::fit_head(&model, task, &id, &dataset, &cfg)?;
            model.insert_head(head);
            let path = out.join(format!("{id}.ckpt"));
            checkpoint::save(&model, &path)?;
            write_file(&out.join(format!("{id}_train.tsv")), epoch_log(&rec, timing))?;
            println!(
                "head={id} task={task} best_epoch={} best_val_loss={:.6} epochs={} status={}",
                rec.best_epoch().unwrap_or(0),
                rec.best_val_loss(),
                rec.len(),
                rec.status
            );
            println!("checkpoint={}", path.display());
        }
        Command::TrainJoint {
            checkpoint: ckpt,
            tasks,
            weights,
            data,
            out,
            run,
        } => {
            let cfg = run_config(
                &run,
                &[
                    ("data", path_flag(&data)),
                    ("out", path_flag(&out)),
                    ("loss_weights", weights),
                ],
            )?;
            let tasks = parse_tasks(&tasks)?;
            let mut model = checkpoint::load(&ckpt)?;
            for &task in &tasks {
                match model.head(task.name()) {
                    Some(h) if h.task != task => {
                        return Err(Failure {
                            code: EXIT_COMPATIBILITY,
                            message: format!("head {:?} in the checkpoint is a {} head", task.name(), h.task),
                        })
                    }
                    Some(_) => {}
                    None => {
                        let head = pipeline::attach(&model, task, task.name(), &cfg)?;
                        model.insert_head(head);
                    }
                }
            }
            let dataset = load_data(required(&cfg.data, "data")?)?;
            let out = required(&cfg.out, "out")?;
            make_dir(out)?;
            let ids: Vec<&str> = tasks.iter().map(|t| t.name()).collect();
            let rec = urep::urep::train_joint(
                &mut model,
                &ids,
                cfg.loss_weights.as_deref(),
                &dataset,
                &cfg.head_training(),
            )?;
            let path = out.join("joint.ckpt");
            checkpoint::save(&model, &path)?;
            write_file(&out.join("joint_train.tsv"), epoch_log(&rec, timing))?;
            println!(
                "heads={} best_epoch={} best_val_loss={:.6} epochs={} status={}",
                ids.join(","),
                rec.best_epoch().unwrap_or(0),
                rec.best_val_loss(),
                rec.len(),
                rec.status
            );
            println!("checkpoint={}", path.display());
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            split,
            sigma,
            out,
        } => {
            let split: Split = split.parse()?;
            let model = checkpoint::load(&ckpt)?;
            let dataset = load_data(&data)?;
            let text = pipeline::evaluate(&model, &dataset, split, sigma)?.to_text();
            if let Some(out) = out {
                write_file(&out, &text)?;
            }
            print!("{text}");
        }
        Command::Explain {
            checkpoint: ckpt,
            image,
            class_index,
            head,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let img: Tensor<f32> = read_image(&image)?;
            let explain = |message: String| Failure {
                code: EXIT_EXPLAIN,
                message,
            };
            let h = match &head {
                Some(id) => model
                    .head(id)
                    .ok_or_else(|| explain(format!("checkpoint has no head {id:?}")))?,
                None => model
                    .heads
                    .iter()
                    .find(|h| matches!(h.kind, HeadKind::Classification { .. }))
                    .ok_or_else(|| explain("checkpoint has no classification head".into()))?,
            };
            let classes = h
                .classes()
                .ok_or_else(|| explain(format!("head {} is not a classification head", h.task_id)))?;
            if class_index >= classes {
                return Err(explain(format!(
                    "class index {class_index} out of range: head has K = {classes} classes"
                )));
            }
            let heatmap = grad_cam(&model, h, &img, class_index).map_err(|e| explain(e.to_string()))?;
            let probs = model
                .predict(h, &single_image(&img)?)
                .map_err(|e| explain(e.to_string()))?
                .to_f64_vec();
            make_dir(&out)?;
            let (hp, op) = (out.join("heatmap.pgm"), out.join("overlay.pgm"));
            heatmap.write(&img, &hp, &op)?;
            let probs: Vec<String> = probs.iter().map(|p| format!("{p:.6}")).collect();
            println!("head={} class={class_index} raw_max={:.6e}", h.task_id, heatmap.raw_max);
            println!("probabilities={}", probs.join(","));
            println!("heatmap={}", hp.display());
            println!("overlay={}", op.display());
        }
        Command::Recommend {
            cls_checkpoint,
            quality_checkpoint,
            image,
            rules,
        } => {
            let table = match rules {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Failure {
                        code: EXIT_IO,
                        message: format!("cannot read {}: {e}", p.display()),
                    })?;
                    RuleTable::parse(&text)?
                }
                None => RuleTable::default(),
            };
            let img = single_image(&read_image(&image)?)?;
            let mismatch = |message: String| Failure {
                code: EXIT_COMPATIBILITY,
                message,
            };
            let cls_model = checkpoint::load(&cls_checkpoint)?;
            let cls = head_by_task(&cls_model, Task::Classification)
                .ok_or_else(|| mismatch(format!("{} has no classification head", cls_checkpoint.display())))?;
            let q_model = checkpoint::load(&quality_checkpoint)?;
            let q = head_by_task(&q_model, Task::Quality)
                .ok_or_else(|| mismatch(format!("{} has no quality head", quality_checkpoint.display())))?;
            let cp = cls_model.predict(cls, &img)?.to_f64_vec();
            let qp = q_model.predict(q, &img)?.to_f64_vec();
            println!("{}", recommend(&cp, &qp, &table)?);
        }
        Command::Compare { data, tasks, out, run } => {
            let cfg = run_config(&run, &[("data", path_flag(&data))])?;
            let tasks = parse_tasks(&tasks)?;
            let dataset = load_data(required(&cfg.data, "data")?)?;
            let text = pipeline::compare(&dataset, &tasks, &cfg)?.report(timing);
            if let Some(out) = out {
                write_file(&out, &text)?;
            }
            print!("{text}");
        }
        Command::Relatedness { a, b, threshold } => {
            let r = assess_datasets(&load_data(&a)?, &load_data(&b)?, threshold)?;
            println!(
                "divergence={:.6} threshold={} verdict={}",
                r.divergence,
                r.threshold,
                if r.related { "related" } else { "unrelated" }
            );
        }
    }
    Ok(())
}
