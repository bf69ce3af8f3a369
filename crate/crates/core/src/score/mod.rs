//! In-memory score model. All times are exact rationals in quarter notes.

mod clip;
mod midi;

use num_rational::Rational64;
use thiserror::Error;

pub use clip::{extract_clips, Clip};
pub use midi::{parse_midi, write_midi, MidiError, WRITE_TICKS_PER_QUARTER};

/// Time in quarter notes.
pub type Time = Rational64;

pub const DEFAULT_US_PER_QUARTER: u32 = 500_000;
pub const DRUM_CHANNEL: u8 = 9;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("note {index} in track {track}: {reason}")]
    InvalidNote {
        track: usize,
        index: usize,
        reason: &'static str,
    },
    #[error("invalid time signature {numerator}/{denominator}")]
    InvalidTimeSignature { numerator: u8, denominator: u8 },
    #[error("invalid tempo: {0} microseconds per quarter")]
    InvalidTempo(u32),
    #[error("negative event time")]
    NegativeTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Note {
    pub pitch: u8,
    pub onset: Time,
    pub duration: Time,
    pub velocity: u8,
    /// Index of the owning track within [`Score::tracks`].
    pub track: usize,
}

impl Note {
    pub fn new(pitch: u8, onset: Time, duration: Time, velocity: u8) -> Self {
        Self {
            pitch,
            onset,
            duration,
            velocity,
            track: 0,
        }
    }

    pub fn end(&self) -> Time {
        self.onset + self.duration
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Track {
    pub program: u8,
    pub is_drum: bool,
    pub notes: Vec<Note>,
}

impl Track {
    pub fn new(program: u8, is_drum: bool) -> Self {
        Self {
            program,
            is_drum,
            notes: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TempoChange {
    pub time: Time,
    pub us_per_quarter: u32,
}

impl TempoChange {
    pub fn from_bpm(time: Time, bpm: f64) -> Self {
        Self {
            time,
            us_per_quarter: (60_000_000.0 / bpm).round() as u32,
        }
    }

    pub fn bpm(&self) -> f64 {
        60_000_000.0 / self.us_per_quarter as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeSignature {
    pub time: Time,
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignature {
    pub fn new(time: Time, numerator: u8, denominator: u8) -> Self {
        Self {
            time,
            numerator,
            denominator,
        }
    }

    /// Bar length in quarter notes.
    pub fn bar_length(&self) -> Time {
        Time::new(4 * self.numerator as i64, self.denominator as i64)
    }

    /// Beat length (one denominator unit) in quarter notes.
    pub fn beat_length(&self) -> Time {
        Time::new(4, self.denominator as i64)
    }
}

/// One bar of a score's metrical grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bar {
    pub start: Time,
    pub length: Time,
    pub numerator: u8,
    pub denominator: u8,
}

impl Bar {
    pub fn end(&self) -> Time {
        self.start + self.length
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Score {
    pub tracks: Vec<Track>,
    pub tempo_map: Vec<TempoChange>,
    pub timesig_map: Vec<TimeSignature>,
    pub ticks_per_quarter: u16,
    /// End of the score; at least the end of the last note.
    pub length: Time,
}

impl Default for Score {
    fn default() -> Self {
        Self::empty()
    }
}

impl Score {
    /// No notes, zero length, 120 BPM, 4/4.
    pub fn empty() -> Self {
        Self {
            tracks: Vec::new(),
            tempo_map: vec![TempoChange {
                time: Time::from_integer(0),
                us_per_quarter: DEFAULT_US_PER_QUARTER,
            }],
            timesig_map: vec![TimeSignature::new(Time::from_integer(0), 4, 4)],
            ticks_per_quarter: WRITE_TICKS_PER_QUARTER,
            length: Time::from_integer(0),
        }
    }

    /// Builds a validated score in canonical form: tracks merged and sorted
    /// by `(is_drum, program)`, notes sorted, maps sorted with defaults at
    /// time zero, and `length` extended to cover every note.
    pub fn new(
        tracks: Vec<Track>,
        tempo_map: Vec<TempoChange>,
        timesig_map: Vec<TimeSignature>,
        ticks_per_quarter: u16,
        length: Time,
    ) -> Result<Self, ScoreError> {
        let mut s = Self {
            tracks,
            tempo_map,
            timesig_map,
            ticks_per_quarter,
            length,
        };
        s.normalize()?;
        Ok(s)
    }

    pub fn normalize(&mut self) -> Result<(), ScoreError> {
        let zero = Time::from_integer(0);
        for (ti, t) in self.tracks.iter().enumerate() {
            for (ni, n) in t.notes.iter().enumerate() {
                let reason = if n.pitch > 127 {
                    Some("pitch above 127")
                } else if n.velocity == 0 || n.velocity > 127 {
                    Some("velocity outside 1..=127")
                } else if n.duration <= zero {
                    Some("non-positive duration")
                } else if n.onset < zero {
                    Some("negative onset")
                } else {
                    None
                };
                if let Some(reason) = reason {
                    return Err(ScoreError::InvalidNote {
                        track: ti,
                        index: ni,
                        reason,
                    });
                }
            }
        }
        for ts in &self.timesig_map {
            if ts.numerator == 0 || ts.denominator == 0 || !ts.denominator.is_power_of_two() {
                return Err(ScoreError::InvalidTimeSignature {
                    numerator: ts.numerator,
                    denominator: ts.denominator,
                });
            }
            if ts.time < zero {
                return Err(ScoreError::NegativeTime);
            }
        }
        for t in &self.tempo_map {
            if t.us_per_quarter == 0 {
                return Err(ScoreError::InvalidTempo(0));
            }
            if t.time < zero {
                return Err(ScoreError::NegativeTime);
            }
        }

        // merge tracks sharing an instrument
        let mut merged: Vec<Track> = Vec::new();
        for t in self.tracks.drain(..) {
            if t.notes.is_empty() {
                continue;
            }
            match merged
                .iter_mut()
                .find(|m| m.program == t.program && m.is_drum == t.is_drum)
            {
                Some(m) => m.notes.extend(t.notes),
                None => merged.push(t),
            }
        }
        merged.sort_by_key(|t| (t.is_drum, t.program));
        for (i, t) in merged.iter_mut().enumerate() {
            for n in &mut t.notes {
                n.track = i;
            }
            t.notes.sort_by(|a, b| {
                (a.onset, a.pitch, a.duration, a.velocity)
                    .cmp(&(b.onset, b.pitch, b.duration, b.velocity))
            });
        }
        self.tracks = merged;

        self.tempo_map.sort_by_key(|t| t.time);
        dedup_last_wins(&mut self.tempo_map, |t| t.time);
        if self.tempo_map.first().is_none_or(|t| t.time != zero) {
            self.tempo_map.insert(
                0,
                TempoChange {
                    time: zero,
                    us_per_quarter: DEFAULT_US_PER_QUARTER,
                },
            );
        }
        self.tempo_map
            .dedup_by(|b, a| a.us_per_quarter == b.us_per_quarter);

        self.timesig_map.sort_by_key(|t| t.time);
        dedup_last_wins(&mut self.timesig_map, |t| t.time);
        if self.timesig_map.first().is_none_or(|t| t.time != zero) {
            self.timesig_map.insert(0, TimeSignature::new(zero, 4, 4));
        }
        self.timesig_map
            .dedup_by(|b, a| (a.numerator, a.denominator) == (b.numerator, b.denominator));

        let last_end = self.notes().map(Note::end).max().unwrap_or(zero);
        self.length = self.length.max(last_end);
        Ok(())
    }

    pub fn notes(&self) -> impl Iterator<Item = &Note> {
        self.tracks.iter().flat_map(|t| t.notes.iter())
    }

    pub fn note_count(&self) -> usize {
        self.tracks.iter().map(|t| t.notes.len()).sum()
    }

    /// Notes of pitched (non-drum) tracks.
    pub fn pitched_notes(&self) -> impl Iterator<Item = &Note> {
        self.tracks
            .iter()
            .filter(|t| !t.is_drum)
            .flat_map(|t| t.notes.iter())
    }

    pub fn timesig_at(&self, time: Time) -> TimeSignature {
        *self
            .timesig_map
            .iter()
            .rev()
            .find(|t| t.time <= time)
            .unwrap_or(&self.timesig_map[0])
    }

    pub fn tempo_at(&self, time: Time) -> TempoChange {
        *self
            .tempo_map
            .iter()
            .rev()
            .find(|t| t.time <= time)
            .unwrap_or(&self.tempo_map[0])
    }

    /// Bars covering `[0, length)`. A time-signature change takes effect at
    /// its own time, cutting the running bar short if it falls mid-bar.
    pub fn bars(&self) -> Vec<Bar> {
        let mut bars = Vec::new();
        let mut t = Time::from_integer(0);
        while t < self.length {
            let ts = self.timesig_at(t);
            let next_change = self.timesig_map.iter().find(|c| c.time > t).map(|c| c.time);
            let mut len = ts.bar_length();
            if let Some(nc) = next_change {
                if t + len > nc {
                    len = nc - t;
                }
            }
            bars.push(Bar {
                start: t,
                length: len,
                numerator: ts.numerator,
                denominator: ts.denominator,
            });
            t += len;
        }
        bars
    }

    /// Wall-clock duration of `[0, until)` in seconds under the tempo map.
    pub fn seconds_until(&self, until: Time) -> f64 {
        let mut total = 0.0;
        for (i, change) in self.tempo_map.iter().enumerate() {
            if change.time >= until {
                break;
            }
            let end = self
                .tempo_map
                .get(i + 1)
                .map_or(until, |n| n.time.min(until));
            let span = end - change.time;
            total += to_f64(span) * change.us_per_quarter as f64 / 1e6;
        }
        total
    }
}

pub fn to_f64(t: Time) -> f64 {
    *t.numer() as f64 / *t.denom() as f64
}

fn dedup_last_wins<T, K: PartialEq>(v: &mut Vec<T>, key: impl Fn(&T) -> K) {
    let mut i = 0;
    while i + 1 < v.len() {
        if key(&v[i]) == key(&v[i + 1]) {
            v.remove(i);
        } else {
            i += 1;
        }
    }
}
