use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::synth::QualityLabel;
use crate::error::{Error, ManifestError, Result};
use crate::tensor::Rng;

pub const HEADER: &str = "path\tmask_path\tclass\tquality\tgroup_id\tsplit";
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.7, 0.2, 0.1];
pub const MIN_GROUPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub mask_path: Option<String>,
    pub class_label: Option<usize>,
    pub quality: Option<QualityLabel>,
    pub group_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), T::to_string)
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => {
                return Err(ManifestError::Parse {
                    line: 1,
                    message: format!("expected header {HEADER:?}"),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ManifestError::Parse { line: i + 1, message };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 tab-separated fields, found {}", f.len())));
            }
            if f[0].is_empty() || f[0] == "-" {
                return Err(err("empty image path".into()));
            }
            let class_label = absent(f[2])
                .map(|c| c.parse::<usize>().map_err(|_| err(format!("bad class {c:?}"))))
                .transpose()?;
            let quality = absent(f[3])
                .map(|q| q.parse::<QualityLabel>().map_err(|_| err(format!("bad quality {q:?}"))))
                .transpose()?;
            let group_id = f[4].parse().map_err(|_| err(format!("bad group id {:?}", f[4])))?;
            let split = f[5].parse().map_err(|_| err(format!("bad split {:?}", f[5])))?;
            records.push(ManifestRecord {
                path: f[0].to_string(),
                mask_path: absent(f[1]).map(str::to_string),
                class_label,
                quality,
                group_id,
                split,
            });
        }
        Ok(DatasetManifest { records })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.path,
                opt(&r.mask_path),
                opt(&r.class_label),
                opt(&r.quality),
                r.group_id,
                r.split
            );
        }
        out
    }

    /// Non-fatal problems: duplicate paths and groups spanning several splits.
    pub fn validate(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.path.as_str()) {
                warnings.push(format!("duplicate path {}", r.path));
            }
        }
        let mut splits: HashMap<usize, BTreeSet<Split>> = HashMap::new();
        for r in &self.records {
            splits.entry(r.group_id).or_default().insert(r.split);
        }
        let mut straddling: Vec<usize> = splits.iter().filter(|(_, s)| s.len() > 1).map(|(g, _)| *g).collect();
        straddling.sort_unstable();
        for g in straddling {
            warnings.push(format!("group {g} appears in more than one split"));
        }
        warnings
    }

    /// Reassign splits by group.
    pub fn split(&mut self, fractions: [f64; 3], seed: u64) -> Result<()> {
        let groups: Vec<usize> = self.records.iter().map(|r| r.group_id).collect();
        let assigned = split_groups(&groups, fractions, seed)?;
        for (r, s) in self.records.iter_mut().zip(assigned) {
            r.split = s;
        }
        Ok(())
    }
}

fn absent(s: &str) -> Option<&str> {
    if s == "-" {
        None
    } else {
        Some(s)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(DatasetManifest::parse(&text)?)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

/// Assign whole groups to train/val/test: shuffle the distinct groups, then cut
/// at the rounded cumulative fractions.
pub fn split_groups(group_ids: &[usize], fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let mut groups: Vec<usize> = group_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let g = groups.len();
    if g < MIN_GROUPS {
        return Err(Error::Data(format!(
            "need at least {MIN_GROUPS} groups to split, found {g}"
        )));
    }
    Rng::new(seed).shuffle(&mut groups);
    let cut1 = (fractions[0] * g as f64).round() as usize;
    let cut2 = ((fractions[0] + fractions[1]) * g as f64).round() as usize;
    let of: HashMap<usize, Split> = groups
        .iter()
        .enumerate()
        .map(|(i, &gid)| {
            let s = if i < cut1 {
                Split::Train
            } else if i < cut2 {
                Split::Val
            } else {
                Split::Test
            };
            (gid, s)
        })
        .collect();
    Ok(group_ids.iter().map(|gid| of[gid]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(path: &str, group: usize) -> ManifestRecord {
        ManifestRecord {
            path: path.into(),
            mask_path: None,
            class_label: Some(1),
            quality: None,
            group_id: group,
            split: Split::Train,
        }
    }

    #[test]
    fn text_round_trip() {
        let m = DatasetManifest {
            records: vec![
                ManifestRecord {
                    mask_path: Some("masks/0.pgm".into()),
                    ..record("images/0.pgm", 0)
                },
                ManifestRecord {
                    class_label: None,
                    quality: Some(QualityLabel::Low),
                    split: Split::Val,
                    ..record("images/1.pgm", 1)
                },
                ManifestRecord {
                    split: Split::Test,
                    ..record("images/2.pgm", 2)
                },
            ],
        };
        let text = m.to_text();
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
        assert!(text
            .lines()
            .nth(3)
            .unwrap()
            .starts_with("images/2.pgm\t-\t1\t-\t2\ttest"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        write_manifest(&m, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), m);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = format!("{HEADER}\na.pgm\t-\t0\t-\t0\ttrain\nb.pgm\t-\tx\t-\t0\ttrain\n");
        assert_eq!(
            DatasetManifest::parse(&bad).unwrap_err(),
            ManifestError::Parse {
                line: 3,
                message: "bad class \"x\"".into()
            }
        );
        assert!(matches!(
            DatasetManifest::parse("nope\n"),
            Err(ManifestError::Parse { line: 1, .. })
        ));
        let short = format!("{HEADER}\na.pgm\t-\n");
        assert!(matches!(
            DatasetManifest::parse(&short),
            Err(ManifestError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_paths_warn() {
        let m = DatasetManifest {
            records: vec![record("a", 0), record("a", 0)],
        };
        assert_eq!(m.validate(), vec!["duplicate path a".to_string()]);
    }

    #[test]
    fn ten_groups_split_exactly() {
        let ids: Vec<usize> = (0..80).map(|i| i / 8).collect();
        let s = split_groups(&ids, DEFAULT_FRACTIONS, 1).unwrap();
        let count = |x: Split| {
            ids.iter()
                .zip(&s)
                .filter(|(_, &t)| t == x)
                .map(|(g, _)| *g)
                .collect::<BTreeSet<_>>()
                .len()
        };
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (7, 2, 1));
        assert_eq!(s, split_groups(&ids, DEFAULT_FRACTIONS, 1).unwrap());
        assert!(matches!(
            split_groups(&ids[..72], DEFAULT_FRACTIONS, 1),
            Err(Error::Data(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn groups_never_straddle(ids in prop::collection::vec(0usize..40, 10..300), seed in any::<u64>()) {
            let distinct = ids.iter().collect::<BTreeSet<_>>().len();
            prop_assume!(distinct >= MIN_GROUPS);
            let s = split_groups(&ids, DEFAULT_FRACTIONS, seed).unwrap();
            let mut of = HashMap::new();
            for (g, sp) in ids.iter().zip(&s) {
                prop_assert_eq!(*of.entry(*g).or_insert(*sp), *sp);
            }
            for (k, f) in Split::ALL.iter().zip(DEFAULT_FRACTIONS) {
                let n = of.values().filter(|v| *v == k).count() as f64;
                prop_assert!((n - f * distinct as f64).abs() <= 1.0);
            }
        }
    }
}
