//! Synthetic text/attribute pairs from templates.

mod bank;
mod refine;

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{mask_random, schema, AttributeVector};

pub use bank::{find_placeholders, placeholder, Template, TemplateBank};
pub use refine::{
    refine, ChatCompletionClient, IdentityClient, RefineClient, RefineStats, ENV_KEY, ENV_MODEL,
    ENV_URL, REFINE_PROMPT,
};

#[derive(Debug, Error)]
pub enum TextgenError {
    #[error("template bank: {0}")]
    Config(String),
    #[error("no template for attribute `{attribute}` value `{value}`")]
    MissingTemplate { attribute: String, value: String },
    #[error("unfilled placeholder {0} after filling")]
    Leftover(String),
    #[error("invalid synthesis settings: {0}")]
    Settings(String),
    #[error("dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Mention counters for attributes and for each of their non-NA values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalanceState {
    eligible: Vec<usize>,
    attribute_counts: Vec<u64>,
    value_counts: Vec<Vec<u64>>,
}

impl BalanceState {
    /// Counters over every schema attribute.
    pub fn new() -> Self {
        Self::over((0..schema().len()).collect())
    }

    /// Counters restricted to `eligible` attributes; others stay NA.
    pub fn over(eligible: Vec<usize>) -> Self {
        let s = schema();
        Self {
            eligible,
            attribute_counts: vec![0; s.len()],
            value_counts: s
                .attributes
                .iter()
                .map(|a| vec![0; a.cardinality() - 1])
                .collect(),
        }
    }

    pub fn eligible(&self) -> &[usize] {
        &self.eligible
    }

    pub fn attribute_count(&self, attribute: usize) -> u64 {
        self.attribute_counts[attribute]
    }

    pub fn value_counts(&self, attribute: usize) -> &[u64] {
        &self.value_counts[attribute]
    }
}

impl Default for BalanceState {
    fn default() -> Self {
        Self::new()
    }
}

/// Draws `k` uniformly from `k_range`, picks the `k` least-mentioned
/// attributes and gives each its least-used value. Ties break at random.
pub fn sample_combination<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut BalanceState,
    k_range: (usize, usize),
) -> Result<AttributeVector, TextgenError> {
    let (lo, hi) = k_range;
    if lo < 1 || lo > hi || hi > state.eligible.len() {
        return Err(TextgenError::Settings(format!(
            "k range ({lo}, {hi}) must satisfy 1 <= min <= max <= {}",
            state.eligible.len()
        )));
    }
    let k = rng.random_range(lo..=hi);
    let mut order = state.eligible.clone();
    order.shuffle(rng);
    order.sort_by_key(|&a| state.attribute_counts[a]);
    let mut v = AttributeVector::all_na();
    for &a in &order[..k] {
        let counts = &state.value_counts[a];
        let min = *counts.iter().min().expect("attribute has values");
        let ties: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == min).collect();
        let value = ties[rng.random_range(0..ties.len())];
        v.set(a, value as u8);
        state.attribute_counts[a] += 1;
        state.value_counts[a][value] += 1;
    }
    Ok(v)
}

/// One random template per specified attribute, shuffled and joined with
/// single spaces. Placeholders are left in place.
pub fn concat_templates<R: Rng + ?Sized>(
    v: &AttributeVector,
    bank: &TemplateBank,
    rng: &mut R,
) -> Result<String, TextgenError> {
    let mut parts = Vec::new();
    for a in v.specified() {
        let options = bank.templates_for(a, v.get(a));
        if options.is_empty() {
            return Err(TextgenError::MissingTemplate {
                attribute: schema().get(a).name.clone(),
                value: v.label(a).to_string(),
            });
        }
        parts.push(options[rng.random_range(0..options.len())].text.as_str());
    }
    parts.shuffle(rng);
    Ok(parts.join(" "))
}

/// Replaces each placeholder with a uniformly chosen surface form of its
/// attribute's value.
pub fn fill_placeholders<R: Rng + ?Sized>(
    text: &str,
    v: &AttributeVector,
    bank: &TemplateBank,
    rng: &mut R,
) -> Result<String, TextgenError> {
    let mut out = text.to_string();
    for a in v.specified() {
        let ph = placeholder(a);
        let forms = bank.surfaces_for(a, v.get(a));
        if forms.is_empty() {
            continue;
        }
        while let Some(at) = out.find(&ph) {
            let form = &forms[rng.random_range(0..forms.len())];
            out.replace_range(at..at + ph.len(), form);
        }
    }
    if let Some(left) = find_placeholders(&out).first() {
        return Err(TextgenError::Leftover(left.to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub text: String,
    pub values: AttributeVector,
    pub refined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub k_range: (usize, usize),
    /// Share of samples sent through the refinement client.
    pub refine_fraction: f64,
    /// Extra chance of blanking each drawn value to NA (at least one kept).
    pub na_rate: f64,
    /// Attributes eligible for mention; empty means all.
    pub attributes: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k_range: (1, 8),
            refine_fraction: 0.25,
            na_rate: 0.0,
            attributes: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn balance_state(&self) -> Result<BalanceState, TextgenError> {
        if self.attributes.is_empty() {
            return Ok(BalanceState::new());
        }
        let s = schema();
        let slots = self
            .attributes
            .iter()
            .map(|n| {
                s.find(n)
                    .ok_or_else(|| TextgenError::Settings(format!("unknown attribute `{n}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BalanceState::over(slots))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynthOutcome {
    pub samples: Vec<TextSample>,
    pub refine: RefineStats,
}

/// Generates `n` balanced samples. Each draws a combination, concatenates
/// templates, optionally refines, then fills placeholders.
pub fn synthesize_dataset<R: Rng + ?Sized>(
    n: usize,
    bank: &TemplateBank,
    client: &dyn RefineClient,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<SynthOutcome, TextgenError> {
    if n == 0 {
        return Err(TextgenError::Settings(
            "sample count must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.refine_fraction) || !(0.0..=1.0).contains(&cfg.na_rate) {
        return Err(TextgenError::Settings(
            "fractions must lie in [0, 1]".into(),
        ));
    }
    bank.validate()?;
    let mut state = cfg.balance_state()?;
    let mut out = SynthOutcome::default();
    while out.samples.len() < n {
        let mut v = sample_combination(rng, &mut state, cfg.k_range)?;
        if cfg.na_rate > 0.0 {
            v = mask_random(&v, 1.0 - cfg.na_rate, rng);
        }
        if v.specified_count() == 0 {
            continue;
        }
        let raw = concat_templates(&v, bank, rng)?;
        let (text, refined) = if rng.random_bool(cfg.refine_fraction) {
            refine(&raw, client, &mut out.refine)
        } else {
            (raw, false)
        };
        let text = fill_placeholders(&text, &v, bank, rng)?;
        out.samples.push(TextSample {
            text,
            values: v,
            refined,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub config_digest: String,
    pub count: usize,
}

pub const DATASET_FORMAT: &str = "cadenza-text/1";

/// Header line followed by one JSON sample per line.
pub fn write_dataset<W: Write>(
    mut w: W,
    digest: &str,
    samples: &[TextSample],
) -> Result<(), TextgenError> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        config_digest: digest.into(),
        count: samples.len(),
    };
    writeln!(
        w,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )?;
    for s in samples {
        writeln!(
            w,
            "{}",
            serde_json::to_string(s).expect("sample serializes")
        )?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<(DatasetHeader, Vec<TextSample>), TextgenError> {
    let mut lines = r.lines().enumerate();
    let header: DatasetHeader = match lines.next() {
        Some((_, l)) => serde_json::from_str(&l?).map_err(|e| TextgenError::Dataset {
            line: 1,
            reason: e.to_string(),
        })?,
        None => {
            return Err(TextgenError::Dataset {
                line: 1,
                reason: "empty file".into(),
            })
        }
    };
    if header.format != DATASET_FORMAT {
        return Err(TextgenError::Dataset {
            line: 1,
            reason: format!("unsupported format `{}`", header.format),
        });
    }
    let mut samples = Vec::new();
    for (i, l) in lines {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&l).map_err(|e| TextgenError::Dataset {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok((header, samples))
}
