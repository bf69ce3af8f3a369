use rand::Rng;
use thiserror::Error;

use crate::attributes::{mask_random, AttributeVector};
use crate::extractor::{instrument_class, representative_program, tempo_class, DRUM_CLASS};
use crate::score::{Note, Score, Time, Track};

use super::quantize::{build, quantize_with_report, QuantizeReport};
use super::{bar_slots, velocity_bin, Grammar, Token, TokenSequence, Vocab, SLOTS_PER_QUARTER};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub seq: TokenSequence,
    pub report: QuantizeReport,
}

fn slot_of(t: Time) -> i64 {
    (t * Time::from_integer(SLOTS_PER_QUARTER)).to_integer()
}

/// Quantizes `score` and emits its bar-by-bar event sequence (no EOS).
pub fn encode_score(score: &Score, vocab: &Vocab) -> Encoding {
    let (q, report) = quantize_with_report(score);
    let mut ids = Vec::new();
    let bars = q.bars();
    // (slot, class, pitch, duration, velocity bin)
    let mut notes: Vec<(i64, u8, u8, i64, u8)> = q
        .tracks
        .iter()
        .flat_map(|t| {
            let class = instrument_class(t.program, t.is_drum) as u8;
            t.notes.iter().map(move |n| {
                (
                    slot_of(n.onset),
                    class,
                    n.pitch,
                    slot_of(n.duration),
                    velocity_bin(n.velocity),
                )
            })
        })
        .collect();
    notes.sort_unstable();
    let mut ni = 0;
    let mut prev: Option<((u8, u8), u8)> = None;
    for b in &bars {
        let meter = (b.numerator, b.denominator);
        let tempo = tempo_class(q.tempo_at(b.start).bpm());
        ids.push(vocab.id(Token::Bar));
        if prev.is_none_or(|(m, _)| m != meter) {
            ids.push(vocab.id(Token::TimeSig(meter.0, meter.1)));
        }
        if prev.is_none_or(|(_, t)| t != tempo) {
            ids.push(vocab.id(Token::Tempo(tempo)));
        }
        prev = Some((meter, tempo));
        let start = slot_of(b.start);
        let end = slot_of(b.end());
        let mut last_pos = None;
        while ni < notes.len() && notes[ni].0 < end {
            let (slot, class, pitch, dur, vel) = notes[ni];
            let pos = (slot - start) as u16;
            if last_pos != Some(pos) {
                ids.push(vocab.id(Token::Position(pos)));
                last_pos = Some(pos);
            }
            ids.push(vocab.id(Token::Program(class)));
            ids.push(vocab.id(if class as usize == DRUM_CLASS {
                Token::DrumPitch(pitch)
            } else {
                Token::Pitch(pitch)
            }));
            ids.push(vocab.id(Token::Duration(dur as u16)));
            ids.push(vocab.id(Token::Velocity(vel)));
            ni += 1;
        }
    }
    Encoding {
        seq: TokenSequence::music(ids),
        report,
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("token {index}: unknown id {id}")]
    UnknownId { index: usize, id: usize },
    #[error("token {index}: `{name}` is not a music event")]
    NotMusic { index: usize, name: String },
    #[error("token {index}: `{name}` is not allowed here")]
    Grammar { index: usize, name: String },
}

impl DecodeError {
    pub fn index(&self) -> usize {
        match self {
            Self::UnknownId { index, .. }
            | Self::NotMusic { index, .. }
            | Self::Grammar { index, .. } => *index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub score: Score,
    /// The input ended inside a note or the opening bar header; the partial
    /// event was dropped.
    pub truncated: bool,
}

/// Rebuilds a grid score from the music region of `seq`. Notes that would
/// run past the final bar are cut at it.
pub fn decode_tokens(seq: &TokenSequence, vocab: &Vocab) -> Result<Decoded, DecodeError> {
    let base = seq.boundary.map_or(0, |b| b + 1);
    let mut g = Grammar::new(None);
    let mut meters: Vec<(u8, u8)> = Vec::new();
    let mut tempos: Vec<u8> = Vec::new();
    // (bar, position, class, pitch, duration, velocity)
    let mut notes: Vec<(usize, u16, u8, u8, u16, u8)> = Vec::new();
    let mut cur = (0u16, 0u8, 0u8, 0u16);
    for (off, &id) in seq.music_region().iter().enumerate() {
        let index = base + off;
        let tok = vocab
            .token(id)
            .ok_or(DecodeError::UnknownId { index, id })?;
        if matches!(tok, Token::Sep | Token::Prefix { .. }) {
            return Err(DecodeError::NotMusic {
                index,
                name: vocab.name(id).to_string(),
            });
        }
        if !g.advance(tok) {
            return Err(DecodeError::Grammar {
                index,
                name: vocab.name(id).to_string(),
            });
        }
        match tok {
            Token::Bar => {
                meters.push(meters.last().copied().unwrap_or((4, 4)));
                tempos.push(tempos.last().copied().unwrap_or(1));
            }
            Token::TimeSig(n, d) => *meters.last_mut().expect("bar opened") = (n, d),
            Token::Tempo(c) => *tempos.last_mut().expect("bar opened") = c,
            Token::Position(p) => cur.0 = p,
            Token::Program(c) => cur.1 = c,
            Token::Pitch(p) | Token::DrumPitch(p) => cur.2 = p,
            Token::Duration(d) => cur.3 = d,
            Token::Velocity(v) => notes.push((meters.len() - 1, cur.0, cur.1, cur.2, cur.3, v)),
            Token::Eos => {}
            Token::Sep | Token::Prefix { .. } => unreachable!(),
        }
    }
    let truncated = g.is_incomplete();
    if g.in_opening_header() {
        meters.clear();
        tempos.clear();
    }
    if meters.is_empty() {
        return Ok(Decoded {
            score: Score::empty(),
            truncated,
        });
    }
    let mut starts = Vec::with_capacity(meters.len() + 1);
    let mut total = 0i64;
    for &(n, d) in &meters {
        starts.push(total);
        total += bar_slots(n, d) as i64;
    }
    starts.push(total);
    let mut tracks: Vec<Track> = Vec::new();
    for (bar, pos, class, pitch, dur, vel) in notes {
        let (program, is_drum) = representative_program(class as usize);
        let abs = starts[bar] + pos as i64;
        let dur = (dur as i64).min(total - abs);
        let note = Note::new(
            pitch,
            Time::new(abs, SLOTS_PER_QUARTER),
            Time::new(dur, SLOTS_PER_QUARTER),
            super::bin_velocity(vel),
        );
        match tracks
            .iter_mut()
            .find(|t| t.program == program && t.is_drum == is_drum)
        {
            Some(t) => t.notes.push(note),
            None => {
                let mut t = Track::new(program, is_drum);
                t.notes.push(note);
                tracks.push(t);
            }
        }
    }
    Ok(Decoded {
        score: build(tracks, &meters, &tempos, &starts),
        truncated,
    })
}

/// One prefix token per attribute, in schema order.
pub fn encode_prefix(v: &AttributeVector, vocab: &Vocab) -> Vec<usize> {
    v.values()
        .iter()
        .enumerate()
        .map(|(j, &k)| vocab.prefix_id(j, k))
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error(
    "music sequence must be bare events without separator, prefix or EOS (offending index {index})"
)]
pub struct AssembleError {
    pub index: usize,
}

/// `prefix(mask(v)) ++ [SEP] ++ music ++ [EOS]`.
pub fn assemble_training_sequence<R: Rng + ?Sized>(
    v: &AttributeVector,
    music: &TokenSequence,
    keep_prob: f64,
    rng: &mut R,
    vocab: &Vocab,
) -> Result<TokenSequence, AssembleError> {
    if let Some(b) = music.boundary {
        return Err(AssembleError { index: b });
    }
    if let Some(index) = music
        .ids
        .iter()
        .position(|&id| !vocab.is_music(id) || id == vocab.eos())
    {
        return Err(AssembleError { index });
    }
    let masked = mask_random(v, keep_prob, rng);
    let mut ids = encode_prefix(&masked, vocab);
    let m = ids.len();
    ids.push(vocab.sep());
    ids.extend_from_slice(&music.ids);
    ids.push(vocab.eos());
    Ok(TokenSequence {
        ids,
        boundary: Some(m),
    })
}
