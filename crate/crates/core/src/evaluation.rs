//! Sample-wise accuracy, per-attribute accuracy and re-extraction control
//! accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{schema, AttributeKind, AttributeVector};
use crate::extractor::{extract_objective, ExtractionConfig};
use crate::score::Score;

/// Control accuracies of a large reference system; context only.
pub const REFERENCE_CONTROL_ACCURACY: [(&str, f64); 3] = [
    ("time_signature", 0.9914),
    ("tempo", 0.9271),
    ("key", 0.5742),
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{left} predictions against {right} references")]
    LengthMismatch { left: usize, right: usize },
    #[error("no sample specifies any attribute")]
    NothingSpecified,
}

fn check_aligned(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// Fraction of `gold`'s non-NA slots that `pred` matches; `None` when gold
/// specifies nothing.
pub fn sample_accuracy(pred: &AttributeVector, gold: &AttributeVector) -> Option<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for s in gold.specified() {
        total += 1;
        correct += usize::from(pred.get(s) == gold.get(s));
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Mean sample accuracy over samples that specify at least one attribute.
pub fn asa(pred: &[AttributeVector], gold: &[AttributeVector]) -> Result<f64, EvalError> {
    check_aligned(pred.len(), gold.len())?;
    let scores: Vec<f64> = pred
        .iter()
        .zip(gold)
        .filter_map(|(p, g)| sample_accuracy(p, g))
        .collect();
    if scores.is_empty() {
        return Err(EvalError::NothingSpecified);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Accuracy per slot over samples where gold is non-NA. Slots never
/// specified are absent.
pub fn per_attribute_accuracy(
    pred: &[AttributeVector],
    gold: &[AttributeVector],
) -> Result<BTreeMap<usize, Tally>, EvalError> {
    check_aligned(pred.len(), gold.len())?;
    let mut out: BTreeMap<usize, Tally> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        for s in g.specified() {
            let t = out.entry(s).or_default();
            t.total += 1;
            t.correct += usize::from(p.get(s) == g.get(s));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub per_attribute: BTreeMap<usize, Tally>,
    /// Samples whose music could not be decoded.
    pub undecodable: Vec<usize>,
}

impl ControlReport {
    /// Mean of the per-attribute match rates.
    pub fn average(&self) -> Option<f64> {
        self.average_over(self.per_attribute.keys().copied())
    }

    /// Mean over the given slots that were requested at least once.
    pub fn average_over(&self, slots: impl IntoIterator<Item = usize>) -> Option<f64> {
        let rates: Vec<f64> = slots
            .into_iter()
            .filter_map(|s| self.per_attribute.get(&s))
            .map(Tally::accuracy)
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }
}

/// Re-extracts objective attributes from each generated score and compares
/// them with the request. Subjective slots are ignored. A `None` score
/// counts as a miss on every requested objective slot.
pub fn control_accuracy(
    requested: &[AttributeVector],
    generated: &[Option<Score>],
    cfg: &ExtractionConfig,
) -> Result<ControlReport, EvalError> {
    check_aligned(requested.len(), generated.len())?;
    let sch = schema();
    let mut report = ControlReport::default();
    for (i, (req, score)) in requested.iter().zip(generated).enumerate() {
        let got = score.as_ref().map(|s| extract_objective(s, cfg));
        if got.is_none() {
            report.undecodable.push(i);
        }
        for s in req.specified() {
            if sch.get(s).kind != AttributeKind::Objective {
                continue;
            }
            let t = report.per_attribute.entry(s).or_default();
            t.total += 1;
            t.correct += usize::from(got.as_ref().is_some_and(|g| g.get(s) == req.get(s)));
        }
    }
    Ok(report)
}

/// Everything an `evaluate` run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub asa: Option<f64>,
    /// Keyed by attribute name.
    pub per_attribute: BTreeMap<String, Tally>,
    pub control: Option<ControlSummary>,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub per_attribute: BTreeMap<String, Tally>,
    pub average: Option<f64>,
    pub undecodable: usize,
}

impl EvalReport {
    pub fn new(
        pred: &[AttributeVector],
        gold: &[AttributeVector],
        control: Option<&ControlReport>,
        config_digest: &str,
    ) -> Result<Self, EvalError> {
        let sch = schema();
        let name = |s: usize| sch.get(s).name.clone();
        let asa = match asa(pred, gold) {
            Ok(v) => Some(v),
            Err(EvalError::NothingSpecified) => None,
            Err(e) => return Err(e),
        };
        let per_attribute = per_attribute_accuracy(pred, gold)?
            .into_iter()
            .map(|(s, t)| (name(s), t))
            .collect();
        let control = control.map(|c| ControlSummary {
            per_attribute: c
                .per_attribute
                .iter()
                .map(|(&s, &t)| (name(s), t))
                .collect(),
            average: c.average(),
            undecodable: c.undecodable.len(),
        });
        Ok(Self {
            samples: gold.len(),
            asa,
            per_attribute,
            control,
            config_digest: config_digest.to_string(),
        })
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", v * 100.0));
        let _ = writeln!(out, "samples: {}", self.samples);
        let _ = writeln!(out, "ASA: {}", pct(self.asa));
        if !self.per_attribute.is_empty() {
            let _ = writeln!(out, "\n{:<28} {:>9} {:>8}", "attribute", "accuracy", "n");
            for (k, t) in &self.per_attribute {
                let _ = writeln!(
                    out,
                    "{:<28} {:>9} {:>8}",
                    k,
                    pct(Some(t.accuracy())),
                    t.total
                );
            }
        }
        if let Some(c) = &self.control {
            let _ = writeln!(out, "\ncontrol accuracy (objective): {}", pct(c.average));
            for (k, t) in &c.per_attribute {
                let _ = writeln!(
                    out,
                    "{:<28} {:>9} {:>8}",
                    k,
                    pct(Some(t.accuracy())),
                    t.total
                );
            }
            if c.undecodable > 0 {
                let _ = writeln!(out, "undecodable generations: {}", c.undecodable);
            }
        }
        let _ = writeln!(out, "\nconfig digest: {}", self.config_digest);
        out
    }
}
