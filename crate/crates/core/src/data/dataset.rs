use std::fs;
use std::path::Path;

use crate::data::manifest::{read_manifest, write_manifest, DatasetManifest, ManifestRecord, Split, DEFAULT_FRACTIONS};
use crate::data::pgm::{read_image, write_image};
use crate::data::synth::{QualityLabel, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples with a split assignment, all sharing one image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    /// Split generated samples by group with the default fractions.
    pub fn from_samples(samples: Vec<Sample>, seed: u64) -> Result<Self> {
        let groups: Vec<usize> = samples.iter().map(|s| s.group_id).collect();
        let splits = crate::data::manifest::split_groups(&groups, DEFAULT_FRACTIONS, seed)?;
        Dataset::with_splits(samples, splits)
    }

    pub fn with_splits(samples: Vec<Sample>, splits: Vec<Split>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if samples.len() != splits.len() {
            return Err(Error::Contract(format!(
                "{} samples but {} splits",
                samples.len(),
                splits.len()
            )));
        }
        let shape = samples[0].image.shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::Shape(format!("samples must be [1, H, W], got {shape:?}")));
        }
        for s in &samples {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "mixed image shapes {shape:?} and {:?}",
                    s.image.shape()
                )));
            }
            if s.mask.as_ref().is_some_and(|m| m.shape() != shape.as_slice()) {
                return Err(Error::Shape("mask shape differs from its image".into()));
            }
        }
        Ok(Dataset { samples, splits })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[1, H, W]` of every image.
    pub fn image_shape(&self) -> &[usize] {
        self.samples[0].image.shape()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn images(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        self.stack(indices, |s| Some(&s.image), "images")
    }

    pub fn masks(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        self.stack(indices, |s| s.mask.as_ref(), "segmentation masks")
    }

    fn stack(
        &self,
        indices: &[usize],
        pick: impl Fn(&Sample) -> Option<&Tensor<f32>>,
        what: &str,
    ) -> Result<Tensor<f32>> {
        if indices.is_empty() {
            return Err(Error::Data(format!("no samples selected for {what}")));
        }
        let mut data = Vec::with_capacity(indices.len() * self.samples[0].image.numel());
        for &i in indices {
            let t = pick(&self.samples[i]).ok_or_else(|| Error::MissingLabels(format!("sample {i} has no {what}")))?;
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Tensor::new(&shape, data)
    }

    pub fn class_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.samples[i]
                    .class_label
                    .ok_or_else(|| Error::MissingLabels(format!("sample {i} has no class label")))
            })
            .collect()
    }

    pub fn quality_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.samples[i]
                    .quality_label
                    .map(QualityLabel::index)
                    .ok_or_else(|| Error::MissingLabels(format!("sample {i} has no quality label")))
            })
            .collect()
    }

    /// One more than the largest class label, if any sample has one.
    pub fn class_count(&self) -> Option<usize> {
        self.samples.iter().filter_map(|s| s.class_label).max().map(|m| m + 1)
    }

    /// Write `images/`, `masks/` and `manifest.tsv` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut manifest = DatasetManifest::default();
        for (i, (s, split)) in self.samples.iter().zip(&self.splits).enumerate() {
            let path = format!("images/{i:05}.pgm");
            write_image(&s.image, dir.join(&path))?;
            let mask_path = match &s.mask {
                Some(m) => {
                    let p = format!("masks/{i:05}.pgm");
                    write_image(m, dir.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            manifest.records.push(ManifestRecord {
                path,
                mask_path,
                class_label: s.class_label,
                quality: s.quality_label,
                group_id: s.group_id,
                split: *split,
            });
        }
        write_manifest(&manifest, dir.join("manifest.tsv"))?;
        Ok(manifest)
    }

    /// Load a manifest and its images; paths resolve against the manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<(Dataset, Vec<String>)> {
        let manifest_path = manifest_path.as_ref();
        let manifest = read_manifest(manifest_path)?;
        let warnings = manifest.validate();
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::with_capacity(manifest.records.len());
        let mut splits = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let image = read_image(root.join(&r.path))?;
            let mask = r.mask_path.as_ref().map(|m| read_image(root.join(m))).transpose()?;
            samples.push(Sample {
                image,
                mask,
                class_label: r.class_label,
                quality_label: r.quality,
                group_id: r.group_id,
                lesion: None,
            });
            splits.push(r.split);
        }
        Ok((Dataset::with_splits(samples, splits)?, warnings))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pgm::quantize;
    use crate::data::synth::{generate, SyntheticConfig, SyntheticMode};

    #[test]
    fn save_load_round_trip() {
        let samples = generate(&SyntheticConfig::new(SyntheticMode::SegCls, 80, 2)).unwrap();
        let ds = Dataset::from_samples(samples, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let (back, warnings) = Dataset::load(dir.path().join("manifest.tsv")).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(back.splits, ds.splits);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.class_label, b.class_label);
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert_eq!(quantize(*x as f64) as f32 / 255.0, *y);
            }
        }
        let test = back.indices(Split::Test);
        assert_eq!(back.images(&test).unwrap().shape(), &[test.len(), 1, 64, 64]);
        assert!(matches!(back.quality_labels(&test), Err(Error::MissingLabels(_))));
    }
}
