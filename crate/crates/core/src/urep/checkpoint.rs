//! Checkpoint files.
//!
//! ```text
//! UREP1
//! encoder.0.weight 8 1 3 3          one line per tensor: name and dims
//! ...
//! arch=cdae                         key=value lines
//! ...
//!                                   blank line
//! <f32 little-endian payloads, in header order>
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::KeyValues;
use crate::error::{CheckpointError, Error, Result};
use crate::nn::LayerStack;
use crate::optim::OptimizerKind;
use crate::tensor::{Rng, Tensor};
use crate::urep::arch::Architecture;
use crate::urep::model::{
    classification_layers, segmentation_layers, ConstructionMode, HeadKind, HeadSummary, Provenance, Task, TaskHead,
    Theta, URepModel,
};

pub const MAGIC: &[u8] = b"UREP1\n";

fn header(msg: impl Into<String>) -> Error {
    CheckpointError::Header(msg.into()).into()
}

fn stack_tensors<'a>(prefix: &str, stack: &'a LayerStack, out: &mut Vec<(String, &'a Tensor<f32>)>) {
    for (n, t) in stack.named_tensors() {
        out.push((format!("{prefix}.{n}"), t));
    }
}

fn stack_tensors_mut<'a>(prefix: &str, stack: &'a mut LayerStack, out: &mut Vec<(String, &'a mut Tensor<f32>)>) {
    for (n, t) in stack.named_tensors_mut() {
        out.push((format!("{prefix}.{n}"), t));
    }
}

/// Every stored tensor of `model` in file order.
pub fn named_tensors(model: &URepModel) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    stack_tensors("encoder", &model.encoder, &mut out);
    if let Some(d) = &model.decoder {
        stack_tensors("decoder", d, &mut out);
    }
    for h in &model.heads {
        stack_tensors(&format!("head.{}", h.task_id), &h.layers, &mut out);
        if let Some(e) = &h.encoder {
            stack_tensors(&format!("head.{}.encoder", h.task_id), e, &mut out);
        }
    }
    out
}

fn named_tensors_mut(model: &mut URepModel) -> Vec<(String, &mut Tensor<f32>)> {
    let mut out = Vec::new();
    stack_tensors_mut("encoder", &mut model.encoder, &mut out);
    if let Some(d) = &mut model.decoder {
        stack_tensors_mut("decoder", d, &mut out);
    }
    for h in &mut model.heads {
        stack_tensors_mut(&format!("head.{}", h.task_id), &mut h.layers, &mut out);
        if let Some(e) = &mut h.encoder {
            stack_tensors_mut(&format!("head.{}.encoder", h.task_id), e, &mut out);
        }
    }
    out
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

fn kind_name(k: HeadKind) -> &'static str {
    match k {
        HeadKind::Classification { .. } => "classification",
        HeadKind::Segmentation => "segmentation",
    }
}

fn clean(v: &str) -> Result<&str> {
    if v.contains(['\n', '#', '=']) || v.trim() != v {
        return Err(Error::Contract(format!(
            "value {v:?} cannot be stored in a checkpoint header"
        )));
    }
    Ok(v)
}

fn model_keys(model: &URepModel) -> Result<KeyValues> {
    let mut kv = KeyValues::default();
    model.arch.write_keys(&mut kv);
    kv.set("decoder", model.decoder.is_some().to_string());
    kv.set("theta.kernel", model.theta.kernel.to_string());
    kv.set("theta.dilation", model.theta.dilation.to_string());
    kv.set("theta.dropout", opt_f64(model.theta.dropout));
    kv.set("theta.optimizer", model.theta.optimizer.name());
    kv.set("construction_mode", model.mode.to_string());
    kv.set("seed", model.seed.to_string());
    if let Some(p) = &model.provenance {
        kv.set("provenance.best_epoch", p.best_epoch.to_string());
        kv.set("provenance.best_val_loss", p.best_val_loss.to_string());
        kv.set("provenance.epochs", p.epochs.to_string());
        kv.set("provenance.grid_index", p.grid_index.to_string());
        kv.set("provenance.grid_size", p.grid_size.to_string());
        kv.set(
            "provenance.report",
            clean(if p.report.is_empty() { "-" } else { &p.report })?,
        );
    }
    let ids: Vec<&str> = model.heads.iter().map(|h| h.task_id.as_str()).collect();
    kv.set("heads", if ids.is_empty() { "-".to_string() } else { ids.join(",") });
    for h in &model.heads {
        let k = |s: &str| format!("head.{}.{s}", h.task_id);
        clean(&h.task_id)?;
        kv.set(&k("task"), h.task.name());
        kv.set(&k("kind"), kind_name(h.kind));
        kv.set(&k("classes"), h.classes().unwrap_or(0).to_string());
        kv.set(&k("hidden"), h.hidden.to_string());
        kv.set(&k("dropout"), h.dropout.to_string());
        kv.set(&k("optimizer"), h.optimizer.name());
        kv.set(&k("inherited"), clean(&h.inherited.join(","))?);
        kv.set(&k("private_encoder"), h.encoder.is_some().to_string());
        kv.set(
            &k("summary"),
            h.summary.as_ref().map_or_else(
                || "-".to_string(),
                |s| format!("{},{},{}", s.best_epoch, s.best_val_loss, s.epochs),
            ),
        );
    }
    Ok(kv)
}

/// Serialise a model and its heads.
pub fn to_bytes(model: &URepModel) -> Result<Vec<u8>> {
    let mut text = String::from_utf8(MAGIC.to_vec()).expect("ascii");
    let tensors = named_tensors(model);
    for (name, t) in &tensors {
        text.push_str(name);
        for d in t.shape() {
            text.push(' ');
            text.push_str(&d.to_string());
        }
        text.push('\n');
    }
    text.push_str(&model_keys(model)?.to_text());
    text.push('\n');
    let mut out = text.into_bytes();
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn need<T: std::str::FromStr>(kv: &mut KeyValues, key: &str) -> Result<T> {
    kv.take(key)?.ok_or_else(|| Error::Config(format!("missing key {key}")))
}

fn opt_key(kv: &mut KeyValues, key: &str) -> Result<Option<f64>> {
    match need::<String>(kv, key)?.as_str() {
        "-" => Ok(None),
        v => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}"))),
    }
}

/// Model with the structure described by `kv` and placeholder weights.
fn skeleton(kv: &mut KeyValues) -> Result<URepModel> {
    let arch = Architecture::from_keys(kv)?;
    let mut rng = Rng::new(0);
    let encoder = arch.build_encoder(&mut rng)?;
    let decoder = if need::<bool>(kv, "decoder")? {
        Some(arch.build_decoder(&mut rng)?)
    } else {
        None
    };
    let theta = Theta {
        kernel: need(kv, "theta.kernel")?,
        dilation: need(kv, "theta.dilation")?,
        dropout: opt_key(kv, "theta.dropout")?,
        optimizer: need(kv, "theta.optimizer")?,
    };
    let mode: ConstructionMode = need(kv, "construction_mode")?;
    let seed = need(kv, "seed")?;
    let provenance = match kv.take::<usize>("provenance.best_epoch")? {
        None => None,
        Some(best_epoch) => Some(Provenance {
            best_epoch,
            best_val_loss: need(kv, "provenance.best_val_loss")?,
            epochs: need(kv, "provenance.epochs")?,
            grid_index: need(kv, "provenance.grid_index")?,
            grid_size: need(kv, "provenance.grid_size")?,
            report: match need::<String>(kv, "provenance.report")?.as_str() {
                "-" => String::new(),
                r => r.to_string(),
            },
        }),
    };
    let ids: Vec<String> = match need::<String>(kv, "heads")?.as_str() {
        "-" => Vec::new(),
        list => list.split(',').map(str::to_string).collect(),
    };
    let latent = arch.latent_shape();
    let mut heads = Vec::new();
    for id in ids {
        let k = |s: &str| format!("head.{id}.{s}");
        let task: Task = need(kv, &k("task"))?;
        let kind_s: String = need(kv, &k("kind"))?;
        let classes: usize = need(kv, &k("classes"))?;
        let hidden: usize = need(kv, &k("hidden"))?;
        let dropout: f64 = need(kv, &k("dropout"))?;
        let optimizer: OptimizerKind = need(kv, &k("optimizer"))?;
        let inherited: Vec<String> = kv.take_list(&k("inherited"))?.unwrap_or_default();
        let private: bool = need(kv, &k("private_encoder"))?;
        let summary = match need::<String>(kv, &k("summary"))?.as_str() {
            "-" => None,
            s => {
                let f: Vec<&str> = s.split(',').collect();
                let bad = || Error::Config(format!("invalid head summary {s:?}"));
                if f.len() != 3 {
                    return Err(bad());
                }
                Some(HeadSummary {
                    best_epoch: f[0].parse().map_err(|_| bad())?,
                    best_val_loss: f[1].parse().map_err(|_| bad())?,
                    epochs: f[2].parse().map_err(|_| bad())?,
                })
            }
        };
        let (kind, layers) = match kind_s.as_str() {
            "classification" => (
                HeadKind::Classification { classes },
                classification_layers(&latent, hidden, dropout, classes, &mut rng)?,
            ),
            "segmentation" => (HeadKind::Segmentation, segmentation_layers(&arch, None, &mut rng)?),
            other => return Err(Error::Config(format!("unknown head kind {other:?}"))),
        };
        let encoder = if private {
            Some(arch.build_encoder(&mut rng)?)
        } else {
            None
        };
        heads.push(TaskHead {
            task_id: id,
            task,
            kind,
            layers,
            hidden,
            dropout,
            optimizer,
            inherited,
            encoder,
            summary,
        });
    }
    Ok(URepModel {
        arch,
        encoder,
        decoder,
        theta,
        mode,
        seed,
        provenance,
        heads,
    })
}

/// Parse a checkpoint image.
pub fn from_bytes(bytes: &[u8]) -> Result<URepModel> {
    let body = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| header("bad magic (expected UREP1)"))?;
    let end = body
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| header("no blank line ends the header"))?;
    let text = std::str::from_utf8(&body[..end + 1]).map_err(|_| header("header is not UTF-8"))?;
    let payload = &body[end + 2..];

    let mut listed: Vec<(String, Vec<usize>)> = Vec::new();
    let mut kv_text = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.contains('=') {
            kv_text.push_str(line);
            kv_text.push('\n');
            continue;
        }
        if !kv_text.is_empty() {
            return Err(header(format!("tensor line {} after key-value lines", i + 2)));
        }
        let mut parts = line.split(' ');
        let name = parts
            .next()
            .filter(|n| !n.is_empty())
            .ok_or_else(|| header(format!("empty line {}", i + 2)))?;
        let dims = parts
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| header(format!("bad dimensions on line {}: {line:?}", i + 2)))?;
        listed.push((name.to_string(), dims));
    }
    let mut kv = KeyValues::parse(&kv_text).map_err(|e| header(e.to_string()))?;
    let mut model = skeleton(&mut kv).map_err(|e| header(e.to_string()))?;
    kv.finish().map_err(|e| header(e.to_string()))?;

    let mut slots: HashMap<String, &mut Tensor<f32>> = named_tensors_mut(&mut model).into_iter().collect();
    if listed.len() != slots.len() {
        return Err(header(format!(
            "{} tensors listed, model needs {}",
            listed.len(),
            slots.len()
        )));
    }
    let mut expected = 0usize;
    for (name, dims) in &listed {
        let slot = slots
            .get(name)
            .ok_or_else(|| header(format!("unexpected tensor {name}")))?;
        if slot.shape() != dims.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: slot.shape().to_vec(),
                found: dims.clone(),
            }
            .into());
        }
        expected += slot.numel() * 4;
    }
    if payload.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(header(format!(
            "{} trailing bytes after the payload",
            payload.len() - expected
        )));
    }
    let mut at = 0;
    for (name, _) in &listed {
        let slot = slots.get_mut(name).expect("checked above");
        for v in slot.data_mut() {
            *v = f32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes"));
            at += 4;
        }
    }
    Ok(model)
}

pub fn save(model: &URepModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<URepModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use crate::urep::model::{attach_head, HeadOptions};
    use crate::urep::train::fresh_model;

    fn model_with_heads() -> URepModel {
        let arch = Architecture::cdae(3, &[4, 4, 8, 8], &[2, 2, 1, 1], [1, 32, 32]).unwrap();
        let theta = Theta {
            kernel: 3,
            dilation: 1,
            dropout: Some(0.25),
            optimizer: OptimizerKind::RmsProp,
        };
        let mut m = fresh_model(&arch, &theta, 5).unwrap();
        m.provenance = Some(Provenance {
            best_epoch: 3,
            best_val_loss: 0.001_234_567_891_234,
            epochs: 7,
            grid_index: 1,
            grid_size: 9,
            report: "grid_report.tsv".into(),
        });
        let mut rng = Rng::new(2);
        let mut seg = attach_head(&m, Task::Segmentation, "seg", &HeadOptions::default(), &mut rng).unwrap();
        seg.encoder = Some(m.encoder.clone());
        seg.summary = Some(HeadSummary {
            best_epoch: 1,
            best_val_loss: 0.5,
            epochs: 2,
        });
        let opts = HeadOptions {
            classes: 3,
            ..HeadOptions::default()
        };
        let cls = attach_head(&m, Task::Classification, "cls", &opts, &mut rng).unwrap();
        m.heads = vec![seg, cls];
        // Perturb running statistics so they are not at their defaults.
        for (name, t) in named_tensors_mut(&mut m) {
            if name.ends_with("running_var") {
                for v in t.data_mut() {
                    *v = 1.5;
                }
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model_with_heads();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);

        let x = Tensor::create(&[3, 1, 32, 32], Init::Uniform(0.0, 1.0, &mut Rng::new(8))).unwrap();
        for (a, b) in m.heads.iter().zip(&back.heads) {
            let (ya, yb) = (m.predict(a, &x).unwrap(), back.predict(b, &x).unwrap());
            assert!(ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&m, &p).unwrap();
        assert_eq!(load(&p).unwrap(), m);
    }

    #[test]
    fn corruption_modes_have_distinct_errors() {
        let bytes = to_bytes(&model_with_heads()).unwrap();

        let mut flipped = bytes.clone();
        flipped[0] ^= 0x01;
        assert!(matches!(
            from_bytes(&flipped),
            Err(Error::Checkpoint(CheckpointError::Header(_)))
        ));

        let truncated = &bytes[..bytes.len() - 7];
        assert!(matches!(
            from_bytes(truncated),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));

        let text = String::from_utf8_lossy(&bytes[..200]).into_owned();
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line, "encoder.0.weight 4 1 3 3");
        let mut reshaped = bytes.clone();
        let at = MAGIC.len() + "encoder.0.weight 4 1 3 ".len();
        reshaped[at] = b'5';
        match from_bytes(&reshaped) {
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name, expected, found })) => {
                assert_eq!(name, "encoder.0.weight");
                assert_eq!((expected, found), (vec![4, 1, 3, 3], vec![4, 1, 3, 5]));
            }
            other => panic!("{other:?}"),
        }

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            from_bytes(&extra),
            Err(Error::Checkpoint(CheckpointError::Header(_)))
        ));
    }

    #[test]
    fn every_single_header_byte_flip_is_handled() {
        let bytes = to_bytes(&model_with_heads()).unwrap();
        let header_len = bytes.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        for i in 0..header_len {
            for bit in [0x01u8, 0x20, 0x80] {
                let mut b = bytes.clone();
                b[i] ^= bit;
                if let Ok(m) = from_bytes(&b) {
                    // Only value bytes may flip harmlessly, and then the model must still serialise.
                    to_bytes(&m).unwrap();
                }
            }
        }
    }
}
