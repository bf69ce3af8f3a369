//! REMI-style event vocabulary, quantization and sequence codec.

mod codec;
mod grammar;
mod quantize;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{schema, slug, INSTRUMENTS};

pub use codec::{
    assemble_training_sequence, decode_tokens, encode_prefix, encode_score, Decoded, Encoding,
};
pub use grammar::{Grammar, GrammarState};
pub use quantize::{quantize, quantize_with_report, QuantizeReport};

pub const SLOTS_PER_QUARTER: i64 = 12;
/// Longest bar (8 quarters) in grid slots.
pub const MAX_BAR_SLOTS: usize = 96;
/// Longest duration token (4 bars of 4/4) in grid slots.
pub const MAX_DURATION: usize = 192;
pub const VELOCITY_BINS: usize = 8;
pub const TEMPO_BUCKET_BPM: [f64; 3] = [60.0, 100.0, 140.0];
pub const VOCAB_VERSION: u32 = 1;

pub fn velocity_bin(velocity: u8) -> u8 {
    (velocity.clamp(1, 127) - 1) / 16
}

pub fn bin_velocity(bin: u8) -> u8 {
    bin * 16 + 8
}

/// Supported meters: denominator 2, 4 or 8 with a bar of at most 8 quarters.
pub fn supported_meters() -> Vec<(u8, u8)> {
    let mut v = Vec::new();
    for d in [2u8, 4, 8] {
        for n in 1..=(2 * d) {
            v.push((n, d));
        }
    }
    v
}

pub fn bar_slots(numerator: u8, denominator: u8) -> usize {
    (numerator as usize * 4 * SLOTS_PER_QUARTER as usize) / denominator as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Bar,
    Position(u16),
    TimeSig(u8, u8),
    /// Tempo class index (slow, moderato, fast).
    Tempo(u8),
    /// Instrument class index.
    Program(u8),
    Pitch(u8),
    DrumPitch(u8),
    /// Length in grid slots, 1..=MAX_DURATION.
    Duration(u16),
    Velocity(u8),
    Sep,
    Eos,
    Prefix {
        attribute: u8,
        value: u8,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("unknown token name `{0}`")]
    UnknownName(String),
    #[error("vocabulary file: {0}")]
    File(String),
}

/// Contiguous id ranges of each token family.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub bar: usize,
    pub position: usize,
    pub timesig: usize,
    pub tempo: usize,
    pub program: usize,
    pub pitch: usize,
    pub drum_pitch: usize,
    pub duration: usize,
    pub velocity: usize,
    pub sep: usize,
    pub eos: usize,
    pub prefix: usize,
    pub size: usize,
}

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<Token>,
    names: Vec<String>,
    ids: HashMap<Token, usize>,
    by_name: HashMap<String, usize>,
    meters: Vec<(u8, u8)>,
    /// Start id of each attribute's prefix tokens.
    prefix_offsets: Vec<usize>,
    pub layout: Layout,
}

fn token_name(t: Token) -> String {
    match t {
        Token::Bar => "Bar".into(),
        Token::Position(p) => format!("Position_{p}"),
        Token::TimeSig(n, d) => format!("TimeSig_{n}/{d}"),
        Token::Tempo(c) => format!(
            "Tempo_{}",
            schema().get(crate::attributes::slot::TEMPO).values[c as usize]
        ),
        Token::Program(c) => format!("Program_{}", slug(INSTRUMENTS[c as usize])),
        Token::Pitch(p) => format!("Pitch_{p}"),
        Token::DrumPitch(p) => format!("DrumPitch_{p}"),
        Token::Duration(d) => format!("Duration_{d}"),
        Token::Velocity(b) => format!("Velocity_{b}"),
        Token::Sep => "SEP".into(),
        Token::Eos => "EOS".into(),
        Token::Prefix { attribute, value } => {
            let a = schema().get(attribute as usize);
            format!(
                "Prefix_{}={}",
                a.name,
                a.values[value as usize].replace(' ', "_")
            )
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut tokens = Vec::new();
        let mark = |tokens: &Vec<Token>| tokens.len();
        let bar = mark(&tokens);
        tokens.push(Token::Bar);
        let position = mark(&tokens);
        tokens.extend((0..MAX_BAR_SLOTS as u16).map(Token::Position));
        let timesig = mark(&tokens);
        let meters = supported_meters();
        tokens.extend(meters.iter().map(|&(n, d)| Token::TimeSig(n, d)));
        let tempo = mark(&tokens);
        tokens.extend((0..3).map(Token::Tempo));
        let program = mark(&tokens);
        tokens.extend((0..INSTRUMENTS.len() as u8).map(Token::Program));
        let pitch = mark(&tokens);
        tokens.extend((0..128).map(Token::Pitch));
        let drum_pitch = mark(&tokens);
        tokens.extend((0..128).map(Token::DrumPitch));
        let duration = mark(&tokens);
        tokens.extend((1..=MAX_DURATION as u16).map(Token::Duration));
        let velocity = mark(&tokens);
        tokens.extend((0..VELOCITY_BINS as u8).map(Token::Velocity));
        let sep = mark(&tokens);
        tokens.push(Token::Sep);
        let eos = mark(&tokens);
        tokens.push(Token::Eos);
        let prefix = mark(&tokens);
        let mut prefix_offsets = Vec::new();
        for (j, a) in schema().attributes.iter().enumerate() {
            prefix_offsets.push(tokens.len());
            for k in 0..a.cardinality() {
                tokens.push(Token::Prefix {
                    attribute: j as u8,
                    value: k as u8,
                });
            }
        }
        let size = tokens.len();
        let names: Vec<String> = tokens.iter().map(|&t| token_name(t)).collect();
        let ids = tokens.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let by_name = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            tokens,
            names,
            ids,
            by_name,
            meters,
            prefix_offsets,
            layout: Layout {
                bar,
                position,
                timesig,
                tempo,
                program,
                pitch,
                drum_pitch,
                duration,
                velocity,
                sep,
                eos,
                prefix,
                size,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<Token> {
        self.tokens.get(id).copied()
    }

    /// Panics on tokens outside the vocabulary (e.g. an unsupported meter).
    pub fn id(&self, t: Token) -> usize {
        match self.ids.get(&t) {
            Some(&i) => i,
            None => panic!("token {t:?} not in vocabulary"),
        }
    }

    pub fn get_id(&self, t: Token) -> Option<usize> {
        self.ids.get(&t).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn sep(&self) -> usize {
        self.layout.sep
    }

    pub fn eos(&self) -> usize {
        self.layout.eos
    }

    pub fn meters(&self) -> &[(u8, u8)] {
        &self.meters
    }

    pub fn prefix_id(&self, attribute: usize, value: u8) -> usize {
        self.prefix_offsets[attribute] + value as usize
    }

    pub fn is_prefix(&self, id: usize) -> bool {
        id >= self.layout.prefix && id < self.layout.size
    }

    /// Ids that may appear in a music region (everything but SEP and prefixes).
    pub fn is_music(&self, id: usize) -> bool {
        id < self.layout.sep || id == self.layout.eos
    }

    pub fn to_names(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.names.get(i).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_names(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        text.split_whitespace()
            .map(|n| {
                self.by_name
                    .get(n)
                    .copied()
                    .ok_or_else(|| VocabError::UnknownName(n.to_string()))
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile {
            version: VOCAB_VERSION,
            tokens: self.names.clone(),
        })
        .expect("vocab serializes")
    }

    /// Loads a vocabulary file; it must match the built-in inventory.
    pub fn from_json(text: &str) -> Result<Self, VocabError> {
        let f: VocabFile =
            serde_json::from_str(text).map_err(|e| VocabError::File(e.to_string()))?;
        if f.version != VOCAB_VERSION {
            return Err(VocabError::File(format!(
                "unsupported version {}",
                f.version
            )));
        }
        let v = Self::new();
        if f.tokens != v.names {
            let at = f
                .tokens
                .iter()
                .zip(&v.names)
                .position(|(a, b)| a != b)
                .unwrap_or(f.tokens.len().min(v.names.len()));
            return Err(VocabError::File(format!(
                "token inventory differs at id {at}"
            )));
        }
        Ok(v)
    }
}

/// Token ids with an optional prefix region ending at a separator.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Index of the separator; `None` for a bare music sequence.
    pub boundary: Option<usize>,
}

impl TokenSequence {
    pub fn music(ids: Vec<usize>) -> Self {
        Self {
            ids,
            boundary: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn music_region(&self) -> &[usize] {
        match self.boundary {
            Some(b) => &self.ids[b + 1..],
            None => &self.ids,
        }
    }

    pub fn prefix_region(&self) -> &[usize] {
        match self.boundary {
            Some(b) => &self.ids[..b],
            None => &[],
        }
    }
}
