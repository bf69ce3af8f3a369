//! Attribute schema, attribute vectors, NA masking and subjective labels.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::score::{write_midi, Clip};

pub const INSTRUMENTS: [&str; 28] = [
    "piano",
    "keyboard",
    "percussion",
    "organ",
    "guitar",
    "bass",
    "violin",
    "viola",
    "cello",
    "harp",
    "strings",
    "voice",
    "trumpet",
    "trombone",
    "tuba",
    "horn",
    "brass",
    "sax",
    "oboe",
    "bassoon",
    "clarinet",
    "piccolo",
    "flute",
    "pipe",
    "synthesizer",
    "ethnic",
    "sound effect",
    "drum",
];

pub const GENRES: [&str; 22] = [
    "new age",
    "electronic",
    "rap",
    "religious",
    "international",
    "easy listening",
    "avant garde",
    "rnb",
    "latin",
    "children",
    "jazz",
    "classical",
    "comedy",
    "pop",
    "reggae",
    "stage",
    "folk",
    "blues",
    "vocal",
    "holiday",
    "country",
    "symphony",
];

pub const ARTISTS: [&str; 17] = [
    "Beethoven",
    "Mozart",
    "Chopin",
    "Schubert",
    "Schumann",
    "J.S.Bach",
    "Haydn",
    "Brahms",
    "Handel",
    "Tchaikovsky",
    "Mendelssohn",
    "Dvorak",
    "Liszt",
    "Stravinsky",
    "Mahler",
    "Prokofiev",
    "Shostakovich",
];

pub const NA: &str = "NA";

/// Slot indices into an [`AttributeVector`].
pub mod slot {
    pub const INSTRUMENT_BASE: usize = 0;
    pub const PITCH_RANGE: usize = 28;
    pub const DANCEABILITY: usize = 29;
    pub const INTENSITY: usize = 30;
    pub const BAR: usize = 31;
    pub const TIME_SIGNATURE: usize = 32;
    pub const KEY: usize = 33;
    pub const TEMPO: usize = 34;
    pub const TIME: usize = 35;
    pub const ARTIST: usize = 36;
    pub const GENRE_BASE: usize = 37;
    pub const EMOTION: usize = 59;
    pub const COUNT: usize = 60;

    pub const fn instrument(class: usize) -> usize {
        INSTRUMENT_BASE + class
    }

    pub const fn genre(g: usize) -> usize {
        GENRE_BASE + g
    }
}

/// Value indices for flag attributes (instruments and genres).
pub const PLAYED: u8 = 0;
pub const NOT_PLAYED: u8 = 1;

/// Value indices of the tempo attribute.
pub mod tempo {
    pub const SLOW: u8 = 0;
    pub const MODERATO: u8 = 1;
    pub const FAST: u8 = 2;
}

/// Value indices of the time-signature attribute.
pub mod meter {
    pub const FOUR_FOUR: u8 = 0;
    pub const TWO_FOUR: u8 = 1;
    pub const THREE_FOUR: u8 = 2;
    pub const ONE_FOUR: u8 = 3;
    pub const SIX_EIGHT: u8 = 4;
    pub const THREE_EIGHT: u8 = 5;
    pub const OTHER: u8 = 6;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Objective,
    Subjective,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeDef {
    /// Machine name, e.g. `instrument_piano` or `key`.
    pub name: String,
    /// Human-readable name used when filling text, e.g. `piano`.
    pub display: String,
    pub kind: AttributeKind,
    /// Value labels; the last entry is always `NA`.
    pub values: Vec<String>,
}

impl AttributeDef {
    pub fn cardinality(&self) -> usize {
        self.values.len()
    }

    pub fn na(&self) -> u8 {
        (self.values.len() - 1) as u8
    }

    pub fn value_index(&self, label: &str) -> Option<u8> {
        self.values.iter().position(|v| v == label).map(|i| i as u8)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSchema {
    pub attributes: Vec<AttributeDef>,
    by_name: HashMap<String, usize>,
}

pub fn slug(s: &str) -> String {
    s.to_lowercase().replace([' ', '.'], "_")
}

fn labels(v: &[&str]) -> Vec<String> {
    v.iter()
        .map(|s| s.to_string())
        .chain([NA.to_string()])
        .collect()
}

fn build_schema() -> AttributeSchema {
    use AttributeKind::*;
    let mut attrs = Vec::with_capacity(slot::COUNT);
    let mut push = |name: String, display: &str, kind, values: Vec<String>| {
        attrs.push(AttributeDef {
            name,
            display: display.to_string(),
            kind,
            values,
        })
    };
    for inst in INSTRUMENTS {
        push(
            format!("instrument_{}", slug(inst)),
            inst,
            Objective,
            labels(&["played", "not played"]),
        );
    }
    let octaves: Vec<String> = (0..12).map(|o| o.to_string()).collect();
    let octaves: Vec<&str> = octaves.iter().map(String::as_str).collect();
    push(
        "pitch_range".into(),
        "pitch range",
        Objective,
        labels(&octaves),
    );
    push(
        "danceability".into(),
        "danceability",
        Objective,
        labels(&["danceable", "not danceable"]),
    );
    push(
        "intensity".into(),
        "rhythm intensity",
        Objective,
        labels(&["serene", "moderate", "intense"]),
    );
    push(
        "bar".into(),
        "bars",
        Objective,
        labels(&["1-4", "5-8", "9-12", "13-16"]),
    );
    push(
        "time_signature".into(),
        "time signature",
        Objective,
        labels(&["4/4", "2/4", "3/4", "1/4", "6/8", "3/8", "other"]),
    );
    push("key".into(), "key", Objective, labels(&["major", "minor"]));
    push(
        "tempo".into(),
        "tempo",
        Objective,
        labels(&["slow", "moderato", "fast"]),
    );
    push(
        "time".into(),
        "time",
        Objective,
        labels(&["0-15s", "15-30s", "30-45s", "45-60s", ">60s"]),
    );
    push("artist".into(), "artist", Subjective, labels(&ARTISTS));
    for g in GENRES {
        push(
            format!("genre_{}", slug(g)),
            g,
            Subjective,
            labels(&["with", "without"]),
        );
    }
    push(
        "emotion".into(),
        "emotion",
        Subjective,
        labels(&["quadrant 1", "quadrant 2", "quadrant 3", "quadrant 4"]),
    );
    let by_name = attrs
        .iter()
        .enumerate()
        .map(|(i, a)| (a.name.clone(), i))
        .collect();
    AttributeSchema {
        attributes: attrs,
        by_name,
    }
}

/// The fixed attribute schema.
pub fn schema() -> &'static AttributeSchema {
    static SCHEMA: OnceLock<AttributeSchema> = OnceLock::new();
    SCHEMA.get_or_init(build_schema)
}

impl AttributeSchema {
    /// Number of attribute slots, `m`.
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn get(&self, slot: usize) -> &AttributeDef {
        &self.attributes[slot]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.attributes
            .iter()
            .map(AttributeDef::cardinality)
            .collect()
    }

    /// Total number of (attribute, value) pairs.
    pub fn total_values(&self) -> usize {
        self.attributes.iter().map(AttributeDef::cardinality).sum()
    }

    pub fn objective_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.attributes
            .iter()
            .enumerate()
            .filter(|(_, a)| a.kind == AttributeKind::Objective)
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AttributeError {
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{attribute}` has no value `{value}`")]
    UnknownValue { attribute: String, value: String },
    #[error("attribute `{attribute}` value index {value} out of range")]
    OutOfRange { attribute: String, value: u8 },
    #[error("attribute `{0}` is not subjective")]
    NotSubjective(String),
    #[error("expected {expected} attribute values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("label table line {line}: {reason}")]
    LabelLine { line: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
}

/// One value index per schema slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributeVector {
    values: Vec<u8>,
}

impl AttributeVector {
    pub fn all_na() -> Self {
        Self {
            values: schema().attributes.iter().map(AttributeDef::na).collect(),
        }
    }

    pub fn from_values(values: Vec<u8>) -> Result<Self, AttributeError> {
        let s = schema();
        if values.len() != s.len() {
            return Err(AttributeError::Length {
                expected: s.len(),
                got: values.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            if v as usize >= s.get(i).cardinality() {
                return Err(AttributeError::OutOfRange {
                    attribute: s.get(i).name.clone(),
                    value: v,
                });
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, slot: usize) -> u8 {
        self.values[slot]
    }

    /// Panics if `value` is outside the attribute's value set.
    pub fn set(&mut self, slot: usize, value: u8) {
        assert!(
            (value as usize) < schema().get(slot).cardinality(),
            "value {value} out of range for {}",
            schema().get(slot).name
        );
        self.values[slot] = value;
    }

    pub fn set_na(&mut self, slot: usize) {
        self.values[slot] = schema().get(slot).na();
    }

    pub fn is_na(&self, slot: usize) -> bool {
        self.values[slot] == schema().get(slot).na()
    }

    pub fn specified(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.values.len()).filter(|&i| !self.is_na(i))
    }

    pub fn specified_count(&self) -> usize {
        self.specified().count()
    }

    pub fn label(&self, slot: usize) -> &'static str {
        &schema().get(slot).values[self.values[slot] as usize]
    }

    /// `{attribute name: value label}` for every non-NA slot.
    pub fn to_labels(&self) -> BTreeMap<String, String> {
        self.specified()
            .map(|i| (schema().get(i).name.clone(), self.label(i).to_string()))
            .collect()
    }

    /// Inverse of [`to_labels`](Self::to_labels); absent attributes are NA.
    pub fn from_labels<'a>(
        labels: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, AttributeError> {
        let s = schema();
        let mut v = Self::all_na();
        for (name, label) in labels {
            let i = s
                .find(name)
                .ok_or_else(|| AttributeError::UnknownAttribute(name.to_string()))?;
            let k = s
                .get(i)
                .value_index(label)
                .ok_or_else(|| AttributeError::UnknownValue {
                    attribute: name.to_string(),
                    value: label.to_string(),
                })?;
            v.values[i] = k;
        }
        Ok(v)
    }
}

impl Default for AttributeVector {
    fn default() -> Self {
        Self::all_na()
    }
}

impl Serialize for AttributeVector {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        self.to_labels().serialize(ser)
    }
}

impl<'de> Deserialize<'de> for AttributeVector {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, String>::deserialize(de)?;
        Self::from_labels(map.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .map_err(serde::de::Error::custom)
    }
}

/// Drops each non-NA value to NA independently, keeping it with
/// probability `keep_prob`. If every value was dropped, one of the
/// originally specified slots is restored uniformly at random.
pub fn mask_random<R: Rng + ?Sized>(
    v: &AttributeVector,
    keep_prob: f64,
    rng: &mut R,
) -> AttributeVector {
    let keep_prob = keep_prob.clamp(0.0, 1.0);
    let specified: Vec<usize> = v.specified().collect();
    let mut out = v.clone();
    let mut kept = 0;
    for &i in &specified {
        if rng.random_bool(keep_prob) {
            kept += 1;
        } else {
            out.set_na(i);
        }
    }
    if kept == 0 && !specified.is_empty() {
        let j = specified[rng.random_range(0..specified.len())];
        out.values[j] = v.values[j];
    }
    out
}

#[derive(Deserialize)]
struct LabelRecord {
    clip_id: String,
    attribute: String,
    value: String,
}

/// Subjective labels keyed by clip id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelTable {
    entries: HashMap<String, Vec<(usize, u8)>>,
}

impl LabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one label; only subjective attributes are accepted.
    pub fn insert(
        &mut self,
        clip_id: &str,
        attribute: &str,
        value: &str,
    ) -> Result<(), AttributeError> {
        let s = schema();
        let i = s
            .find(attribute)
            .ok_or_else(|| AttributeError::UnknownAttribute(attribute.to_string()))?;
        let def = s.get(i);
        if def.kind != AttributeKind::Subjective {
            return Err(AttributeError::NotSubjective(attribute.to_string()));
        }
        let k = def
            .value_index(value)
            .ok_or_else(|| AttributeError::UnknownValue {
                attribute: attribute.to_string(),
                value: value.to_string(),
            })?;
        let e = self.entries.entry(clip_id.to_string()).or_default();
        e.retain(|(j, _)| *j != i);
        e.push((i, k));
        Ok(())
    }

    /// Reads `{"clip_id", "attribute", "value"}` records, one per line.
    /// Blank lines are skipped.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, AttributeError> {
        let mut t = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| AttributeError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord =
                serde_json::from_str(&line).map_err(|e| AttributeError::LabelLine {
                    line: n + 1,
                    reason: e.to_string(),
                })?;
            t.insert(&rec.clip_id, &rec.attribute, &rec.value)
                .map_err(|e| AttributeError::LabelLine {
                    line: n + 1,
                    reason: e.to_string(),
                })?;
        }
        Ok(t)
    }

    pub fn get(&self, clip_id: &str) -> Option<&[(usize, u8)]> {
        self.entries.get(clip_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Sets every subjective slot from `labels`, or NA when the clip has no
/// label for it. Objective slots are untouched.
pub fn merge_labels(
    v: &AttributeVector,
    labels: &LabelTable,
    clip_id: &str,
) -> Result<AttributeVector, AttributeError> {
    let s = schema();
    let mut out = v.clone();
    for i in 0..s.len() {
        if s.get(i).kind == AttributeKind::Subjective {
            out.set_na(i);
        }
    }
    for &(i, k) in labels.get(clip_id).unwrap_or(&[]) {
        let def = s.get(i);
        if def.kind != AttributeKind::Subjective {
            return Err(AttributeError::NotSubjective(def.name.clone()));
        }
        if k as usize >= def.cardinality() {
            return Err(AttributeError::OutOfRange {
                attribute: def.name.clone(),
                value: k,
            });
        }
        out.values[i] = k;
    }
    Ok(out)
}

/// Content hash of the clip's MIDI serialization.
pub fn clip_id(clip: &Clip) -> String {
    hex::encode(Sha256::digest(write_midi(&clip.score)))
}
