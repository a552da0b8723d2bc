use std::fmt;
use std::str::FromStr;

use crate::data::QualityLabel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Usable,
    NotUsable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Usable => "usable",
            Verdict::NotUsable => "not_usable",
        })
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "usable" => Ok(Verdict::Usable),
            "not_usable" => Ok(Verdict::NotUsable),
            other => Err(Error::Config(format!("unknown verdict {other:?}"))),
        }
    }
}

/// One row of a rule table; `None` matches anything.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub id: String,
    pub class: Option<usize>,
    pub quality: Option<QualityLabel>,
    pub verdict: Verdict,
}

impl Rule {
    fn matches(&self, class: usize, quality: QualityLabel) -> bool {
        self.class.is_none_or(|c| c == class) && self.quality.is_none_or(|q| q == quality)
    }
}

/// Ordered rules; the first matching rule decides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleTable {
    rules: Vec<Rule>,
}

impl Default for RuleTable {
    /// `R1`: low quality → not usable; `R2`: good quality → usable.
    fn default() -> Self {
        RuleTable {
            rules: vec![
                Rule {
                    id: "R1".into(),
                    class: None,
                    quality: Some(QualityLabel::Low),
                    verdict: Verdict::NotUsable,
                },
                Rule {
                    id: "R2".into(),
                    class: None,
                    quality: Some(QualityLabel::Good),
                    verdict: Verdict::Usable,
                },
            ],
        }
    }
}

impl RuleTable {
    pub fn new(rules: Vec<Rule>) -> Self {
        RuleTable { rules }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Parse lines of `id class quality verdict`, with `*` as a wildcard and `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |m: &str| Error::Config(format!("rule line {}: {m}: {raw:?}", i + 1));
            if f.len() != 4 {
                return Err(bad("expected `id class quality verdict`"));
            }
            let class = match f[1] {
                "*" => None,
                c => Some(c.parse().map_err(|_| bad("bad class"))?),
            };
            let quality = match f[2] {
                "*" => None,
                q => Some(q.parse().map_err(|_| bad("bad quality"))?),
            };
            rules.push(Rule {
                id: f[0].to_string(),
                class,
                quality,
                verdict: f[3].parse().map_err(|_| bad("bad verdict"))?,
            });
        }
        Ok(RuleTable { rules })
    }

    pub fn resolve(&self, class: usize, quality: QualityLabel) -> Option<&Rule> {
        self.rules.iter().find(|r| r.matches(class, quality))
    }

    /// Every `(class, quality)` pair for `classes` classes must resolve, and low quality never to usable.
    pub fn validate(&self, classes: usize) -> Result<()> {
        for c in 0..classes {
            for q in [QualityLabel::Good, QualityLabel::Low] {
                match self.resolve(c, q) {
                    None => return Err(Error::Config(format!("no rule covers class {c} with {q} quality"))),
                    Some(r) if q == QualityLabel::Low && r.verdict == Verdict::Usable => {
                        return Err(Error::Config(format!("rule {} marks a low-quality image usable", r.id)))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    pub class_label: usize,
    pub class_probability: f64,
    pub quality: QualityLabel,
    pub quality_probability: f64,
    pub verdict: Verdict,
    pub rule_id: String,
}

impl fmt::Display for Recommendation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "class={} p={:.4} quality={} p={:.4} verdict={} rule={}",
            self.class_label,
            self.class_probability,
            self.quality,
            self.quality_probability,
            self.verdict,
            self.rule_id
        )
    }
}

fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, v)| if v > best.1 { (i, v) } else { best },
    )
}

/// Merge class probabilities and `[good, low]` quality probabilities through `table`.
pub fn recommend(class_probs: &[f64], quality_probs: &[f64], table: &RuleTable) -> Result<Recommendation> {
    if class_probs.is_empty() || quality_probs.len() != 2 {
        return Err(Error::Contract(format!(
            "recommend needs class and [good, low] probabilities, got {} and {}",
            class_probs.len(),
            quality_probs.len()
        )));
    }
    if class_probs.iter().chain(quality_probs).any(|p| !p.is_finite()) {
        return Err(Error::Contract("non-finite probability".into()));
    }
    table.validate(class_probs.len())?;
    let (class_label, class_probability) = argmax(class_probs);
    let (q, quality_probability) = argmax(quality_probs);
    let quality = QualityLabel::from_index(q).expect("two entries");
    let rule = table.resolve(class_label, quality).expect("validated");
    Ok(Recommendation {
        class_label,
        class_probability,
        quality,
        quality_probability,
        verdict: rule.verdict,
        rule_id: rule.id.clone(),
    })
}
