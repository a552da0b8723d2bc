//! Seeded synthetic grayscale datasets.
//!
//! * `seg_cls`: a bright elliptical organ (the mask) over a smooth textured
//!   background; abnormal images (class 1) carry a brighter disc inside it.
//! * `flow3`: Doppler-like spectra of three waveform families: class 0 is a
//!   deep envelope below a high baseline, class 1 two peaks above a low
//!   baseline, class 2 small thin peaks on both sides of a central baseline.
//! * `quality`: `flow3` images labelled good or low; low images are Gaussian
//!   blurred.
//!
//! Sample `i` draws from its own stream `mix64(seed) ^ i`, so every sample can be
//! regenerated independently. Images are grouped into synthetic patients of
//! [`GROUP_SIZE`] consecutive samples.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::data::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const GROUP_SIZE: usize = 8;
/// Width of the logistic organ and lesion boundaries, in pixels at 64×64.
const EDGE_WIDTH: f64 = 0.7;
/// Per-pixel grain of the seg_cls images.
const GRAIN: f64 = 0.005;
pub const IMAGE_SIZES: [usize; 3] = [32, 64, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyntheticMode {
    SegCls,
    Quality,
    Flow3,
}

impl SyntheticMode {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticMode::SegCls => "seg_cls",
            SyntheticMode::Quality => "quality",
            SyntheticMode::Flow3 => "flow3",
        }
    }

    /// Number of class labels the mode emits.
    pub fn classes(self) -> usize {
        match self {
            SyntheticMode::SegCls => 2,
            SyntheticMode::Quality | SyntheticMode::Flow3 => 3,
        }
    }
}

impl fmt::Display for SyntheticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg_cls" => Ok(SyntheticMode::SegCls),
            "quality" => Ok(SyntheticMode::Quality),
            "flow3" => Ok(SyntheticMode::Flow3),
            other => Err(Error::Config(format!("unknown synthetic mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QualityLabel {
    Good,
    Low,
}

impl QualityLabel {
    pub fn index(self) -> usize {
        match self {
            QualityLabel::Good => 0,
            QualityLabel::Low => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(QualityLabel::Good),
            1 => Some(QualityLabel::Low),
            _ => None,
        }
    }
}

impl fmt::Display for QualityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualityLabel::Good => "good",
            QualityLabel::Low => "low",
        })
    }
}

impl FromStr for QualityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "good" => Ok(QualityLabel::Good),
            "low" => Ok(QualityLabel::Low),
            other => Err(Error::Data(format!("unknown quality label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub mode: SyntheticMode,
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub texture_amplitude: f64,
    /// Organ semi-axis range as a fraction of the image side.
    pub organ_radius: (f64, f64),
    /// Lesion radius range as a fraction of the image side.
    pub lesion_radius: (f64, f64),
    /// Blur σ range (pixels at 64×64, scaled with the image side).
    pub blur_sigma: (f64, f64),
}

impl SyntheticConfig {
    pub fn new(mode: SyntheticMode, count: usize, seed: u64) -> Self {
        SyntheticConfig {
            mode,
            count,
            seed,
            image_size: 64,
            texture_amplitude: 0.06,
            organ_radius: (0.22, 0.34),
            lesion_radius: (0.06, 0.09),
            blur_sigma: (1.5, 3.0),
        }
    }

    /// Read generator keys from a config, leaving other keys in place.
    ///
    /// Keys: `mode` (required), `count`, `seed`, `image_size`,
    /// `texture_amplitude`, `organ_radius_min`/`_max`, `lesion_radius_min`/`_max`,
    /// `blur_sigma_min`/`_max`.
    pub fn from_keys(kv: &mut KeyValues) -> Result<Self> {
        let mode: SyntheticMode = kv
            .take("mode")?
            .ok_or_else(|| Error::Config("missing key mode".into()))?;
        let d = SyntheticConfig::new(mode, 300, 1);
        let c = SyntheticConfig {
            mode,
            count: kv.take_or("count", d.count)?,
            seed: kv.take_or("seed", d.seed)?,
            image_size: kv.take_or("image_size", d.image_size)?,
            texture_amplitude: kv.take_or("texture_amplitude", d.texture_amplitude)?,
            organ_radius: (
                kv.take_or("organ_radius_min", d.organ_radius.0)?,
                kv.take_or("organ_radius_max", d.organ_radius.1)?,
            ),
            lesion_radius: (
                kv.take_or("lesion_radius_min", d.lesion_radius.0)?,
                kv.take_or("lesion_radius_max", d.lesion_radius.1)?,
            ),
            blur_sigma: (
                kv.take_or("blur_sigma_min", d.blur_sigma.0)?,
                kv.take_or("blur_sigma_max", d.blur_sigma.1)?,
            ),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if !IMAGE_SIZES.contains(&self.image_size) {
            return Err(Error::Config(format!(
                "image_size must be one of {IMAGE_SIZES:?}, got {}",
                self.image_size
            )));
        }
        if !(0.0..=0.2).contains(&self.texture_amplitude) {
            return Err(Error::Config("texture_amplitude must lie in [0, 0.2]".into()));
        }
        let range_ok = |(lo, hi): (f64, f64), min: f64, max: f64| lo <= hi && lo >= min && hi <= max;
        if !range_ok(self.organ_radius, 0.1, 0.45) {
            return Err(Error::Config(format!(
                "organ radius range {:?} outside [0.1, 0.45]",
                self.organ_radius
            )));
        }
        if !range_ok(self.lesion_radius, 0.02, 0.5 * self.organ_radius.0) {
            return Err(Error::Config(format!(
                "lesion radius range {:?} must lie in [0.02, half the smallest organ radius]",
                self.lesion_radius
            )));
        }
        if !range_ok(self.blur_sigma, 1.5, 3.0) {
            return Err(Error::Config(format!(
                "blur sigma range {:?} outside [1.5, 3.0]",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Binary `[1, H, W]` organ mask.
    pub mask: Option<Tensor<f32>>,
    pub class_label: Option<usize>,
    pub quality_label: Option<QualityLabel>,
    pub group_id: usize,
    /// Pixels painted by the lesion, kept for auditing `seg_cls` ground truth.
    pub lesion: Option<Tensor<f32>>,
}

pub fn generate(config: &SyntheticConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    (0..config.count).map(|i| generate_one(config, i)).collect()
}

/// Regenerate sample `index` alone.
pub fn generate_one(config: &SyntheticConfig, index: usize) -> Result<Sample> {
    let mut rng = Rng::derive(config.seed, index as u64);
    let s = config.image_size;
    let group_id = index / GROUP_SIZE;
    let sample = match config.mode {
        SyntheticMode::SegCls => seg_cls(config, &mut rng, group_id)?,
        SyntheticMode::Flow3 => {
            let class = rng.below(3);
            let img = flow_image(s, class, &mut rng);
            Sample {
                image: Tensor::new(&[1, s, s], img)?,
                mask: None,
                class_label: Some(class),
                quality_label: None,
                group_id,
                lesion: None,
            }
        }
        SyntheticMode::Quality => {
            let class = rng.below(3);
            let low = rng.bernoulli(0.5);
            let mut img = flow_image(s, class, &mut rng);
            if low {
                let scale = s as f64 / 64.0;
                let sigma = rng.uniform(config.blur_sigma.0, config.blur_sigma.1) * scale;
                img = gaussian_blur(&img, s, s, sigma);
            }
            Sample {
                image: Tensor::new(&[1, s, s], img)?,
                mask: None,
                class_label: Some(class),
                quality_label: Some(if low { QualityLabel::Low } else { QualityLabel::Good }),
                group_id,
                lesion: None,
            }
        }
    };
    Ok(sample)
}

fn soft_step(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn seg_cls(config: &SyntheticConfig, rng: &mut Rng, group_id: usize) -> Result<Sample> {
    let s = config.image_size;
    let n = s * s;
    let abnormal = rng.bernoulli(0.5);
    let base = rng.uniform(0.15, 0.25);
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.uniform(0.5, 3.0) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 },
                rng.uniform(0.5, 3.0),
                rng.uniform(0.0, 2.0 * PI),
                rng.uniform(0.5, 1.0) / 4.0,
            ]
        })
        .collect();
    let texture = |u: f64, v: f64| -> f64 {
        waves
            .iter()
            .map(|[fx, fy, ph, a]| a * (2.0 * PI * (fx * u + fy * v) + ph).sin())
            .sum::<f64>()
    };

    let sf = s as f64;
    let cx = (0.5 + rng.uniform(-0.08, 0.08)) * sf;
    let cy = (0.5 + rng.uniform(-0.08, 0.08)) * sf;
    let rx = rng.uniform(config.organ_radius.0, config.organ_radius.1) * sf;
    let ry = rng.uniform(config.organ_radius.0, config.organ_radius.1) * sf;
    let theta = rng.uniform(0.0, PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let organ_level = rng.uniform(0.55, 0.65);
    let edge = EDGE_WIDTH * sf / 64.0;
    let radial = |x: f64, y: f64| -> f64 {
        let (dx, dy) = (x - cx, y - cy);
        let (a, b) = (dx * ct + dy * st, -dx * st + dy * ct);
        ((a / rx).powi(2) + (b / ry).powi(2)).sqrt()
    };
    let mean_r = (rx * ry).sqrt();

    let amp = config.texture_amplitude;
    let mut img = vec![0f32; n];
    let mut mask = vec![0f32; n];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = (px / sf, py / sf);
            let i = y * s + x;
            let r = radial(px, py);
            if r <= 1.0 {
                mask[i] = 1.0;
            }
            let w = soft_step((1.0 - r) * mean_r / edge);
            let val = w * (organ_level + 0.5 * amp * texture(v, u)) + (1.0 - w) * (base + amp * texture(u, v));
            img[i] = (val + rng.gaussian(0.0, GRAIN)).clamp(0.0, 1.0) as f32;
        }
    }

    let lesion = if abnormal {
        let r = rng.uniform(config.lesion_radius.0, config.lesion_radius.1) * sf;
        let disc = |bx: f64, by: f64| -> Vec<usize> {
            let mut px = Vec::new();
            for y in 0..s {
                for x in 0..s {
                    let (dx, dy) = (x as f64 + 0.5 - bx, y as f64 + 0.5 - by);
                    if dx * dx + dy * dy <= r * r {
                        px.push(y * s + x);
                    }
                }
            }
            px
        };
        let mut chosen = None;
        for _ in 0..64 {
            let ang = rng.uniform(0.0, 2.0 * PI);
            let rad = rng.unit().sqrt() * 0.6;
            let (a, b) = (rad * (rx - r) * ang.cos(), rad * (ry - r) * ang.sin());
            let (bx, by) = (cx + a * ct - b * st, cy + a * st + b * ct);
            let px = disc(bx, by);
            if !px.is_empty() && px.iter().all(|&i| mask[i] == 1.0) {
                chosen = Some((bx, by, px));
                break;
            }
        }
        let (bx, by, px) = match chosen {
            Some(c) => c,
            None => (cx, cy, disc(cx, cy).into_iter().filter(|&i| mask[i] == 1.0).collect()),
        };
        let level = (organ_level + rng.uniform(0.28, 0.33)).min(1.0);
        for y in 0..s {
            for x in 0..s {
                let d = ((x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2)).sqrt();
                let w = soft_step((r - d) / edge);
                let i = y * s + x;
                img[i] = (img[i] as f64 + w * (level - img[i] as f64)).clamp(0.0, 1.0) as f32;
            }
        }
        let mut les = vec![0f32; n];
        for &i in &px {
            les[i] = 1.0;
        }
        Some(Tensor::new(&[1, s, s], les)?)
    } else {
        None
    };

    Ok(Sample {
        image: Tensor::new(&[1, s, s], img)?,
        mask: Some(Tensor::new(&[1, s, s], mask)?),
        class_label: Some(abnormal as usize),
        quality_label: None,
        group_id,
        lesion,
    })
}

/// Signed envelope height (fraction of the side) at cycle phase `c`; positive is above the baseline.
fn envelope(class: usize, c: f64, amps: &[f64; 3]) -> f64 {
    let bump = |c: f64, start: f64, width: f64| -> f64 {
        if c >= start && c < start + width {
            (PI * (c - start) / width).sin()
        } else {
            0.0
        }
    };
    match class {
        0 => -amps[0] * bump(c, 0.0, 0.7),
        1 => amps[0] * bump(c, 0.0, 0.3) + amps[1] * bump(c, 0.45, 0.25),
        _ => amps[0] * bump(c, 0.0, 0.15) - amps[1] * bump(c, 0.4, 0.15) - amps[2] * bump(c, 0.7, 0.1),
    }
}

fn flow_image(s: usize, class: usize, rng: &mut Rng) -> Vec<f32> {
    let sf = s as f64;
    let (baseline, amps) = match class {
        0 => (rng.uniform(0.15, 0.25), [rng.uniform(0.5, 0.65), 0.0, 0.0]),
        1 => (
            rng.uniform(0.75, 0.85),
            [rng.uniform(0.3, 0.45), rng.uniform(0.15, 0.3), 0.0],
        ),
        _ => (
            rng.uniform(0.45, 0.55),
            [rng.uniform(0.1, 0.18), rng.uniform(0.08, 0.15), rng.uniform(0.08, 0.15)],
        ),
    };
    let cycles = 2.0 + rng.below(2) as f64;
    let phase = rng.unit();
    let background = rng.uniform(0.05, 0.1);
    let bright = rng.uniform(0.8, 0.9);
    let y0 = baseline * sf;
    let mut img = vec![0f32; s * s];
    for x in 0..s {
        let t = (x as f64 + 0.5) / sf;
        let c = (t * cycles + phase).fract();
        let h = envelope(class, c, &amps) * sf;
        for y in 0..s {
            let py = y as f64 + 0.5;
            // Rows grow downwards, so "above" the baseline means smaller y.
            let d = y0 - py;
            let mut v = background;
            if h.abs() > 0.5 && d * h > 0.0 && d.abs() <= h.abs() {
                v = bright - 0.35 * d.abs() / h.abs();
            }
            if (py - y0).abs() < 0.5 {
                v = v.max(0.4);
            }
            img[y * s + x] = (v + rng.gaussian(0.0, 0.04)).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img[y * w + clamp(x as isize + k as isize - radius, w)] as f64)
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum::<f64>()
                / norm) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for mode in [SyntheticMode::SegCls, SyntheticMode::Flow3, SyntheticMode::Quality] {
            let c = SyntheticConfig::new(mode, 12, 5);
            let a = generate(&c).unwrap();
            assert_eq!(a, generate(&c).unwrap());
            assert_ne!(a, generate(&SyntheticConfig { seed: 6, ..c.clone() }).unwrap());
            assert_eq!(a[9], generate_one(&c, 9).unwrap());
            assert_eq!(a[7].group_id, 0);
            assert_eq!(a[8].group_id, 1);
            assert!(a.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn seg_cls_ground_truth_is_consistent() {
        let samples = generate(&SyntheticConfig::new(SyntheticMode::SegCls, 200, 11)).unwrap();
        for s in &samples {
            let mask = s.mask.as_ref().unwrap();
            assert!(mask.data().contains(&1.0));
            assert!(mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            let abnormal = s.class_label == Some(1);
            assert_eq!(abnormal, s.lesion.is_some());
            if let Some(les) = &s.lesion {
                let painted: Vec<usize> = (0..les.numel()).filter(|&i| les.data()[i] == 1.0).collect();
                assert!(!painted.is_empty());
                assert!(painted.iter().all(|&i| mask.data()[i] == 1.0));
            }
        }
    }

    #[test]
    fn classes_are_balanced() {
        for (mode, k) in [(SyntheticMode::SegCls, 2usize), (SyntheticMode::Flow3, 3)] {
            let samples = generate(&SyntheticConfig::new(mode, 1000, 3)).unwrap();
            for c in 0..k {
                let n = samples.iter().filter(|s| s.class_label == Some(c)).count() as f64;
                let expect = 1000.0 / k as f64;
                assert!((n - expect).abs() <= 0.05 * expect, "{mode} class {c}: {n}");
            }
        }
        let q = generate(&SyntheticConfig::new(SyntheticMode::Quality, 1000, 3)).unwrap();
        let low = q.iter().filter(|s| s.quality_label == Some(QualityLabel::Low)).count() as f64;
        assert!((low - 500.0).abs() <= 25.0);
    }

    #[test]
    fn blur_removes_high_frequencies() {
        let c = SyntheticConfig::new(SyntheticMode::Quality, 40, 1);
        let tv = |s: &Sample| -> f64 {
            let d = s.image.data();
            (1..d.len()).map(|i| (d[i] - d[i - 1]).abs() as f64).sum::<f64>()
        };
        let samples = generate(&c).unwrap();
        let mean = |q: QualityLabel| {
            let v: Vec<f64> = samples.iter().filter(|s| s.quality_label == Some(q)).map(tv).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(QualityLabel::Low) < 0.5 * mean(QualityLabel::Good));
        let flat = gaussian_blur(&[0.5; 16], 4, 4, 2.0);
        assert!(flat.iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn invalid_configs_rejected() {
        let ok = SyntheticConfig::new(SyntheticMode::SegCls, 1, 0);
        assert!(ok.validate().is_ok());
        assert!(SyntheticConfig { count: 0, ..ok.clone() }.validate().is_err());
        assert!(SyntheticConfig {
            image_size: 48,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            blur_sigma: (1.0, 2.0),
            ..ok.clone()
        }
        .validate()
        .is_err());
    }
}
