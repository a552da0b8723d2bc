use std::cmp::Ordering;
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::optim::record::TrainRecord;

#[derive(Clone, Debug, PartialEq)]
pub enum AxisValue {
    Int(i64),
    Float(f64),
    Choice(String),
}

impl AxisValue {
    /// Parse a token as an integer, then a float, falling back to a label.
    pub fn parse(token: &str) -> AxisValue {
        if let Ok(i) = token.parse::<i64>() {
            AxisValue::Int(i)
        } else if let Ok(f) = token.parse::<f64>() {
            AxisValue::Float(f)
        } else {
            AxisValue::Choice(token.to_string())
        }
    }

    pub fn numeric(&self) -> Option<f64> {
        match self {
            AxisValue::Int(i) => Some(*i as f64),
            AxisValue::Float(f) => Some(*f),
            AxisValue::Choice(_) => None,
        }
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Int(i) => write!(f, "{i}"),
            AxisValue::Float(x) => write!(f, "{x}"),
            AxisValue::Choice(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<AxisValue>,
}

impl Axis {
    pub fn new(name: &str, values: Vec<AxisValue>) -> Axis {
        Axis {
            name: name.to_string(),
            values,
        }
    }

    pub fn ints(name: &str, values: &[i64]) -> Axis {
        Axis::new(name, values.iter().map(|&v| AxisValue::Int(v)).collect())
    }

    pub fn floats(name: &str, values: &[f64]) -> Axis {
        Axis::new(name, values.iter().map(|&v| AxisValue::Float(v)).collect())
    }

    pub fn choices(name: &str, values: &[&str]) -> Axis {
        Axis::new(name, values.iter().map(|v| AxisValue::Choice(v.to_string())).collect())
    }

    fn is_numeric(&self) -> bool {
        self.values.iter().all(|v| v.numeric().is_some())
    }
}

/// Cartesian grid over named axes; the last axis varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperparameterSpace {
    axes: Vec<Axis>,
}

impl HyperparameterSpace {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Config("hyperparameter space has no axes".into()));
        }
        for (i, a) in axes.iter().enumerate() {
            if a.name.is_empty() || a.name.contains(char::is_whitespace) {
                return Err(Error::Config(format!("bad axis name {:?}", a.name)));
            }
            if a.values.is_empty() {
                return Err(Error::Config(format!("axis {} is empty", a.name)));
            }
            let numeric = a.values.iter().filter(|v| v.numeric().is_some()).count();
            if numeric != 0 && numeric != a.values.len() {
                return Err(Error::Config(format!("axis {} mixes numbers and labels", a.name)));
            }
            if a.values
                .iter()
                .any(|v| matches!(v, AxisValue::Float(f) if !f.is_finite()))
            {
                return Err(Error::Config(format!("axis {} has a non-finite value", a.name)));
            }
            if axes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("axis {} declared twice", a.name)));
            }
        }
        Ok(HyperparameterSpace { axes })
    }

    /// Parse `name=v1,v2;name=v1,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("axis {part:?} lacks '='")))?;
            let values = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(AxisValue::parse)
                .collect();
            axes.push(Axis::new(name.trim(), values));
        }
        HyperparameterSpace::new(axes)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, index: usize) -> Result<GridPoint> {
        if index >= self.len() {
            return Err(Error::Contract(format!("grid index {index} ≥ size {}", self.len())));
        }
        let mut coords = vec![0; self.axes.len()];
        let mut rest = index;
        for (c, a) in coords.iter_mut().zip(&self.axes).rev() {
            *c = rest % a.values.len();
            rest /= a.values.len();
        }
        let values = self
            .axes
            .iter()
            .zip(&coords)
            .map(|(a, &c)| (a.name.clone(), a.values[c].clone()))
            .collect();
        Ok(GridPoint { index, coords, values })
    }

    pub fn points(&self) -> impl Iterator<Item = GridPoint> + '_ {
        (0..self.len()).map(|i| self.point(i).expect("index in range"))
    }

    /// Tie-break order between two points of this space.
    pub fn tie_order(&self, a: &GridPoint, b: &GridPoint) -> Ordering {
        for (i, axis) in self.axes.iter().enumerate() {
            let (ca, cb) = (a.coords[i], b.coords[i]);
            let ord = if axis.is_numeric() {
                let (va, vb) = (axis.values[ca].numeric().unwrap(), axis.values[cb].numeric().unwrap());
                va.total_cmp(&vb).then(ca.cmp(&cb))
            } else {
                ca.cmp(&cb)
            };
            if ord != Ordering::Equal {
                return ord;
            }
        }
        Ordering::Equal
    }
}

impl fmt::Display for HyperparameterSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.axes.iter().enumerate() {
            if i > 0 {
                f.write_char(';')?;
            }
            write!(f, "{}=", a.name)?;
            for (j, v) in a.values.iter().enumerate() {
                if j > 0 {
                    f.write_char(',')?;
                }
                write!(f, "{v}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub coords: Vec<usize>,
    pub values: Vec<(String, AxisValue)>,
}

impl GridPoint {
    pub fn get(&self, name: &str) -> Option<&AxisValue> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn int(&self, name: &str) -> Option<i64> {
        match self.get(name)? {
            AxisValue::Int(i) => Some(*i),
            AxisValue::Float(f) if f.fract() == 0.0 => Some(*f as i64),
            _ => None,
        }
    }

    pub fn float(&self, name: &str) -> Option<f64> {
        self.get(name)?.numeric()
    }

    pub fn choice(&self, name: &str) -> Option<&str> {
        match self.get(name)? {
            AxisValue::Choice(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (n, v)) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_char(' ')?;
            }
            write!(f, "{n}={v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PointResult {
    pub point: GridPoint,
    /// The training record, or the reason the point failed.
    pub outcome: std::result::Result<TrainRecord, String>,
}

impl PointResult {
    pub fn score(&self) -> Option<f64> {
        match &self.outcome {
            Ok(r) if r.best_val_loss().is_finite() => Some(r.best_val_loss()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub space: HyperparameterSpace,
    pub results: Vec<PointResult>,
    pub best: usize,
}

impl SearchOutcome {
    pub fn best_point(&self) -> &GridPoint {
        &self.results[self.best].point
    }

    pub fn best_record(&self) -> &TrainRecord {
        self.results[self.best].outcome.as_ref().expect("best point succeeded")
    }

    pub fn failed(&self) -> usize {
        self.results.iter().filter(|r| r.score().is_none()).count()
    }

    /// Tab-separated table, one row per grid point in index order.
    ///
    /// Columns: axis values, `best_val_loss`, `best_epoch`, `epochs`,
    /// `wall_seconds`, `status`. With `timing` off the seconds column holds `-`.
    pub fn report(&self, timing: bool) -> String {
        let mut out = String::new();
        for a in self.space.axes() {
            out.push_str(&a.name);
            out.push('\t');
        }
        out.push_str("best_val_loss\tbest_epoch\tepochs\twall_seconds\tstatus\n");
        for r in &self.results {
            for (_, v) in &r.point.values {
                let _ = write!(out, "{v}\t");
            }
            match &r.outcome {
                Ok(rec) if r.score().is_some() => {
                    let secs = if timing {
                        format!("{:.3}", rec.wall_secs())
                    } else {
                        "-".into()
                    };
                    let star = if r.point.index == self.results[self.best].point.index {
                        "*"
                    } else {
                        ""
                    };
                    let _ = writeln!(
                        out,
                        "{:.6}\t{}\t{}\t{secs}\t{}{star}",
                        rec.best_val_loss(),
                        rec.best_epoch().unwrap_or(0),
                        rec.len(),
                        rec.status
                    );
                }
                Ok(rec) => {
                    let _ = writeln!(out, "-\t-\t{}\t-\tfailed: non-finite validation loss", rec.len());
                }
                Err(e) => {
                    let _ = writeln!(out, "-\t-\t0\t-\tfailed: {}", e.replace(['\t', '\n'], " "));
                }
            }
        }
        out
    }
}

/// Train every grid point and pick the lowest best-epoch validation loss.
pub fn grid_search(
    space: &HyperparameterSpace,
    mut trainer: impl FnMut(&GridPoint) -> Result<TrainRecord>,
) -> Result<SearchOutcome> {
    let mut results = Vec::with_capacity(space.len());
    for point in space.points() {
        let outcome = trainer(&point).map_err(|e| e.to_string());
        results.push(PointResult { point, outcome });
    }
    let best = select_best(space, &results)
        .ok_or_else(|| Error::Search(format!("all {} grid points failed", results.len())))?;
    Ok(SearchOutcome {
        space: space.clone(),
        results,
        best,
    })
}

fn select_best(space: &HyperparameterSpace, results: &[PointResult]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in results.iter().enumerate() {
        let Some(s) = r.score() else { continue };
        best = match best {
            None => Some((i, s)),
            Some((j, bs)) => {
                let ord = s
                    .total_cmp(&bs)
                    .then_with(|| space.tie_order(&r.point, &results[j].point));
                if ord == Ordering::Less {
                    Some((i, s))
                } else {
                    Some((j, bs))
                }
            }
        };
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::record::EpochRecord;
    use proptest::prelude::*;

    fn record(loss: f64) -> TrainRecord {
        let mut r = TrainRecord::new();
        r.push(EpochRecord {
            train_loss: loss,
            val_loss: loss,
            lr: 1e-3,
            wall_secs: 1.0,
        });
        r
    }

    #[test]
    fn enumeration_order_and_size() {
        let s = HyperparameterSpace::parse("kernel_size=3,5,7;optimizer=sgd,adam,rmsprop").unwrap();
        assert_eq!(s.len(), 9);
        let p = s.point(4).unwrap();
        assert_eq!(p.int("kernel_size"), Some(5));
        assert_eq!(p.choice("optimizer"), Some("adam"));
        assert_eq!(s.to_string(), "kernel_size=3,5,7;optimizer=sgd,adam,rmsprop");
        assert!(HyperparameterSpace::parse("kernel_size=").is_err());
        assert!(HyperparameterSpace::parse("a=1,x").is_err());
        assert!(HyperparameterSpace::parse("a=1;a=2").is_err());
    }

    #[test]
    fn singleton_and_failures() {
        let s = HyperparameterSpace::new(vec![Axis::ints("kernel_size", &[3])]).unwrap();
        let out = grid_search(&s, |_| Ok(record(0.2))).unwrap();
        assert_eq!(out.best_point().int("kernel_size"), Some(3));

        let s = HyperparameterSpace::new(vec![Axis::ints("k", &[1, 3, 5])]).unwrap();
        let out = grid_search(&s, |p| {
            if p.index == 0 {
                Err(Error::Numeric("diverged".into()))
            } else {
                Ok(record(p.index as f64))
            }
        })
        .unwrap();
        assert_eq!(out.best, 1);
        assert_eq!(out.failed(), 1);
        let report = out.report(false);
        assert_eq!(report.lines().count(), 4);
        assert!(report.contains("failed: numeric"));

        let err = grid_search(&s, |_| Ok(record(f64::NAN))).unwrap_err();
        assert!(matches!(err, Error::Search(_)));
    }

    #[test]
    fn ties_prefer_smaller_first_axis() {
        let s = HyperparameterSpace::new(vec![
            Axis::ints("kernel_size", &[7, 3, 5]),
            Axis::choices("optimizer", &["rmsprop", "sgd"]),
        ])
        .unwrap();
        let out = grid_search(&s, |_| Ok(record(0.5))).unwrap();
        let p = out.best_point();
        assert_eq!(p.int("kernel_size"), Some(3));
        assert_eq!(p.choice("optimizer"), Some("rmsprop"));
    }

    fn oracle_argmin(space: &HyperparameterSpace, losses: &[Option<f64>]) -> Option<usize> {
        let pts: Vec<GridPoint> = space.points().collect();
        let mut idx: Vec<usize> = (0..pts.len()).filter(|&i| losses[i].is_some()).collect();
        idx.sort_by(|&a, &b| {
            losses[a]
                .unwrap()
                .partial_cmp(&losses[b].unwrap())
                .unwrap()
                .then_with(|| {
                    // Explicit lexicographic key per axis.
                    let key = |p: &GridPoint| -> Vec<(f64, usize)> {
                        space
                            .axes()
                            .iter()
                            .zip(&p.coords)
                            .map(|(a, &c)| (a.values[c].numeric().unwrap_or(0.0), c))
                            .collect()
                    };
                    key(&pts[a]).partial_cmp(&key(&pts[b])).unwrap()
                })
        });
        idx.first().copied()
    }

    fn space_strategy() -> impl Strategy<Value = HyperparameterSpace> {
        let axis = (1usize..4, any::<bool>(), any::<u64>()).prop_map(|(n, numeric, salt)| (n, numeric, salt));
        prop::collection::vec(axis, 1..4)
            .prop_filter("at most 54 points", |axes| {
                axes.iter().map(|a| a.0).product::<usize>() <= 54
            })
            .prop_map(|axes| {
                let axes = axes
                    .into_iter()
                    .enumerate()
                    .map(|(i, (n, numeric, salt))| {
                        let name = format!("axis{i}");
                        if numeric {
                            // Possibly repeated values to exercise ties on value.
                            let vals: Vec<i64> = (0..n).map(|j| ((salt >> (4 * j)) % 4) as i64).collect();
                            Axis::ints(&name, &vals)
                        } else {
                            let vals: Vec<String> = (0..n).map(|j| format!("c{}", (salt >> (3 * j)) % 5)).collect();
                            Axis::new(&name, vals.into_iter().map(AxisValue::Choice).collect())
                        }
                    })
                    .collect();
                HyperparameterSpace::new(axes).unwrap()
            })
    }

    proptest! {
        #[test]
        fn matches_exhaustive_argmin(space in space_strategy(), salt in any::<u64>()) {
            let n = space.len();
            // Coarse loss levels so ties are common; some points fail.
            let losses: Vec<Option<f64>> = (0..n)
                .map(|i| {
                    let h = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(i as u32 * 7) ^ i as u64;
                    if h.is_multiple_of(7) { None } else { Some((h % 3) as f64 * 0.25) }
                })
                .collect();
            let res = grid_search(&space, |p| match losses[p.index] {
                Some(l) => Ok(record(l)),
                None => Err(Error::Numeric("stub failure".into())),
            });
            match oracle_argmin(&space, &losses) {
                Some(i) => prop_assert_eq!(res.unwrap().best, i),
                None => prop_assert!(res.is_err()),
            }
        }
    }
}
