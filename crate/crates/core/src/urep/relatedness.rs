use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 64;
pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RelatednessReport {
    /// Jensen–Shannon divergence in nats, within `[0, ln 2]`.
    pub divergence: f64,
    pub threshold: f64,
    pub related: bool,
}

/// Normalised 64-bin histogram of pixel intensities in `[0, 1]`.
pub fn intensity_histogram<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for img in images {
        for &v in img.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("intensity {v} outside [0, 1]")));
            }
            let b = ((v as f64 * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("no pixels to histogram".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Jensen–Shannon divergence (natural log) between two distributions.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (2.0 * x / (x + y)).ln())
            .sum()
    };
    (0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)).max(0.0)
}

/// Compare the intensity distributions of two image collections.
pub fn assess_relatedness(a: &[&Tensor<f32>], b: &[&Tensor<f32>], threshold: f64) -> Result<RelatednessReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("relatedness needs two non-empty datasets".into()));
    }
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("relatedness threshold {threshold} must be ≥ 0")));
    }
    let (p, q) = (
        intensity_histogram(a.iter().copied())?,
        intensity_histogram(b.iter().copied())?,
    );
    let divergence = js_divergence(&p, &q);
    Ok(RelatednessReport {
        divergence,
        threshold,
        related: divergence <= threshold,
    })
}

/// [`assess_relatedness`] over every image of two datasets.
pub fn assess_datasets(a: &Dataset, b: &Dataset, threshold: f64) -> Result<RelatednessReport> {
    let ia: Vec<&Tensor<f32>> = a.samples.iter().map(|s| &s.image).collect();
    let ib: Vec<&Tensor<f32>> = b.samples.iter().map(|s| &s.image).collect();
    assess_relatedness(&ia, &ib, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig, SyntheticMode};
    use crate::tensor::{Init, Rng};
    use proptest::prelude::*;

    fn images(mode: SyntheticMode, seed: u64) -> Vec<Tensor<f32>> {
        generate(&SyntheticConfig::new(mode, 40, seed))
            .unwrap()
            .into_iter()
            .map(|s| s.image)
            .collect()
    }

    fn refs(v: &[Tensor<f32>]) -> Vec<&Tensor<f32>> {
        v.iter().collect()
    }

    #[test]
    fn identical_and_same_generator_sets_are_related() {
        let a = images(SyntheticMode::SegCls, 1);
        let r = assess_relatedness(&refs(&a), &refs(&a), DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.divergence, 0.0);
        assert!(r.related);
        let b = images(SyntheticMode::SegCls, 2);
        let r = assess_relatedness(&refs(&a), &refs(&b), DEFAULT_THRESHOLD).unwrap();
        assert!(r.divergence < 0.02 && r.related, "{r:?}");
    }

    #[test]
    fn uniform_noise_is_unrelated() {
        let a = images(SyntheticMode::SegCls, 1);
        let mut rng = Rng::new(3);
        let noise: Vec<Tensor<f32>> = (0..40)
            .map(|_| Tensor::create(&[1, 64, 64], Init::Uniform(0.0, 1.0, &mut rng)).unwrap())
            .collect();
        let r = assess_relatedness(&refs(&a), &refs(&noise), DEFAULT_THRESHOLD).unwrap();
        assert!(r.divergence > 0.1 && !r.related, "{r:?}");
        assert!(r.divergence <= std::f64::consts::LN_2);
        assert!(matches!(assess_relatedness(&[], &refs(&a), 0.1), Err(Error::Data(_))));
    }

    #[test]
    fn disjoint_histograms_reach_ln2() {
        let mut p = vec![0.0; HISTOGRAM_BINS];
        let mut q = vec![0.0; HISTOGRAM_BINS];
        p[0] = 1.0;
        q[63] = 1.0;
        assert!((js_divergence(&p, &q) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn divergence_is_symmetric_and_bounded(a in prop::collection::vec(0.0f64..1.0, HISTOGRAM_BINS),
                                               b in prop::collection::vec(0.0f64..1.0, HISTOGRAM_BINS)) {
            let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum::<f64>() + 1e-12; v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
            let (p, q) = (norm(a), norm(b));
            let d = js_divergence(&p, &q);
            prop_assert!((d - js_divergence(&q, &p)).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&d));
            prop_assert!(js_divergence(&p, &p).abs() < 1e-12);
        }
    }
}
