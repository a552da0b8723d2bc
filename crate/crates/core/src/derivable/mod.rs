//! Outputs derived from trained heads without further learning: Grad-CAM
//! explanations and usability recommendations.

mod gradcam;
mod recommend;

pub use gradcam::{grad_cam, min_max, raw_cam, Heatmap, RawCam};
pub use recommend::{recommend, Recommendation, Rule, RuleTable, Verdict};
