//! Rule-based extraction of objective attributes from a score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{meter, schema, slot, tempo, AttributeVector, NOT_PLAYED, PLAYED};
use crate::score::{to_f64, Bar, Score, Time};

pub const KK_MAJOR: [f64; 12] = [
    6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88,
];
pub const KK_MINOR: [f64; 12] = [
    6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17,
];

pub const DRUM_CLASS: usize = 27;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Minimum on-beat onset ratio for "danceable".
    pub danceable_threshold: f64,
    /// Notes-per-beat cutoffs `(low, high)` between serene, moderate, intense.
    pub intensity_thresholds: (f64, f64),
    pub major_profile: [f64; 12],
    pub minor_profile: [f64; 12],
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            danceable_threshold: 0.5,
            intensity_thresholds: (1.0, 3.0),
            major_profile: KK_MAJOR,
            minor_profile: KK_MINOR,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("danceable_threshold must lie in [0, 1], got {0}")]
    Danceable(f64),
    #[error("intensity thresholds must satisfy 0 <= low < high, got ({0}, {1})")]
    Intensity(f64, f64),
    #[error("key profiles must be finite and non-negative")]
    Profile,
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.danceable_threshold) {
            return Err(ConfigError::Danceable(self.danceable_threshold));
        }
        let (lo, hi) = self.intensity_thresholds;
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return Err(ConfigError::Intensity(lo, hi));
        }
        let ok = |p: &[f64; 12]| p.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !ok(&self.major_profile) || !ok(&self.minor_profile) {
            return Err(ConfigError::Profile);
        }
        Ok(())
    }
}

/// Maps a General MIDI program (or the drum channel) to one of the 28
/// instrument classes, indexed as in [`crate::attributes::INSTRUMENTS`].
pub fn instrument_class(program: u8, is_drum: bool) -> usize {
    if is_drum {
        return DRUM_CLASS;
    }
    match program {
        0..=5 => 0,
        6..=7 => 1,
        8..=15 => 2,
        16..=23 => 3,
        24..=31 => 4,
        32..=39 => 5,
        40 => 6,
        41 => 7,
        42 => 8,
        43..=45 => 10,
        46 => 9,
        47 => 2,
        48..=51 => 10,
        52..=54 => 11,
        55 => 26,
        56 | 59 => 12,
        57 => 13,
        58 => 14,
        60 => 15,
        61..=63 => 16,
        64..=67 => 17,
        68..=69 => 18,
        70 => 19,
        71 => 20,
        72 => 21,
        73..=74 => 22,
        75..=79 => 23,
        80..=103 => 24,
        104..=111 => 25,
        112..=119 => 2,
        _ => 26,
    }
}

const REPRESENTATIVE: [u8; 28] = [
    0, 6, 11, 16, 24, 32, 40, 41, 42, 46, 48, 52, 56, 57, 58, 60, 61, 65, 68, 70, 71, 72, 73, 75,
    80, 104, 120, 0,
];

/// `(program, is_drum)` used when rendering an instrument class.
pub fn representative_program(class: usize) -> (u8, bool) {
    (REPRESENTATIVE[class], class == DRUM_CLASS)
}

pub fn tempo_class(bpm: f64) -> u8 {
    let bpm = (bpm * 1000.0).round() / 1000.0;
    if bpm <= 76.0 {
        tempo::SLOW
    } else if bpm < 120.0 {
        tempo::MODERATO
    } else {
        tempo::FAST
    }
}

pub fn time_signature_class(numerator: u8, denominator: u8) -> u8 {
    match (numerator, denominator) {
        (4, 4) => meter::FOUR_FOUR,
        (2, 4) => meter::TWO_FOUR,
        (3, 4) => meter::THREE_FOUR,
        (1, 4) => meter::ONE_FOUR,
        (6, 8) => meter::SIX_EIGHT,
        (3, 8) => meter::THREE_EIGHT,
        _ => meter::OTHER,
    }
}

pub fn bar_class(bars: usize) -> u8 {
    if bars == 0 {
        schema().get(slot::BAR).na()
    } else {
        ((bars - 1) / 4).min(3) as u8
    }
}

pub fn time_class(seconds: f64) -> u8 {
    if seconds < 15.0 {
        0
    } else if seconds < 30.0 {
        1
    } else if seconds < 45.0 {
        2
    } else if seconds <= 60.0 {
        3
    } else {
        4
    }
}

/// Tempo in force for the largest share of `[0, length)`, by quarter-note
/// span; ties go to the earliest. A zero-length score uses the initial tempo.
pub fn dominant_bpm(score: &Score) -> f64 {
    let map = &score.tempo_map;
    let mut best = (Time::from_integer(-1), map[0].bpm());
    let mut spans: Vec<(u32, Time)> = Vec::new();
    for (i, c) in map.iter().enumerate() {
        if c.time >= score.length {
            break;
        }
        let end = map
            .get(i + 1)
            .map_or(score.length, |n| n.time.min(score.length));
        match spans.iter_mut().find(|(u, _)| *u == c.us_per_quarter) {
            Some((_, s)) => *s += end - c.time,
            None => spans.push((c.us_per_quarter, end - c.time)),
        }
    }
    for (u, s) in spans {
        if s > best.0 {
            best = (s, 60_000_000.0 / u as f64);
        }
    }
    best.1
}

/// Meter active for the most bars; ties go to the first seen.
pub fn dominant_meter(bars: &[Bar]) -> Option<(u8, u8)> {
    let mut counts: Vec<((u8, u8), usize)> = Vec::new();
    for b in bars {
        let k = (b.numerator, b.denominator);
        match counts.iter_mut().find(|(m, _)| *m == k) {
            Some((_, c)) => *c += 1,
            None => counts.push((k, 1)),
        }
    }
    let mut best: Option<((u8, u8), usize)> = None;
    for (m, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((m, c));
        }
    }
    best.map(|(m, _)| m)
}

pub fn pitch_range_class(score: &Score) -> u8 {
    let mut lo = u8::MAX;
    let mut hi = 0u8;
    let mut any = false;
    for n in score.pitched_notes() {
        lo = lo.min(n.pitch);
        hi = hi.max(n.pitch);
        any = true;
    }
    if !any {
        return schema().get(slot::PITCH_RANGE).na();
    }
    (((hi - lo) as usize).div_ceil(12)).min(11) as u8
}

fn bar_of(bars: &[Bar], t: Time) -> Option<&Bar> {
    let i = bars.partition_point(|b| b.start <= t);
    bars.get(i.checked_sub(1)?).filter(|b| t < b.end())
}

/// Fraction of note onsets that fall exactly on a beat of their bar.
pub fn downbeat_ratio(score: &Score) -> Option<f64> {
    let bars = score.bars();
    let total = score.note_count();
    if total == 0 {
        return None;
    }
    let on = score
        .notes()
        .filter(|n| {
            bar_of(&bars, n.onset).is_some_and(|b| {
                let beat = Time::new(4, b.denominator as i64);
                ((n.onset - b.start) / beat).is_integer()
            })
        })
        .count();
    Some(on as f64 / total as f64)
}

pub fn danceability_class(score: &Score, cfg: &ExtractionConfig) -> u8 {
    match downbeat_ratio(score) {
        None => schema().get(slot::DANCEABILITY).na(),
        Some(r) if r >= cfg.danceable_threshold => 0,
        Some(_) => 1,
    }
}

/// Notes per beat, with beats counted in each bar's own denominator unit.
pub fn note_density(score: &Score) -> Option<f64> {
    if score.note_count() == 0 {
        return None;
    }
    let beats: f64 = score
        .bars()
        .iter()
        .map(|b| to_f64(b.length) * b.denominator as f64 / 4.0)
        .sum();
    (beats > 0.0).then(|| score.note_count() as f64 / beats)
}

pub fn intensity_class(score: &Score, cfg: &ExtractionConfig) -> u8 {
    let (lo, hi) = cfg.intensity_thresholds;
    match note_density(score) {
        None => schema().get(slot::INTENSITY).na(),
        Some(d) if d < lo => 0,
        Some(d) if d <= hi => 1,
        Some(_) => 2,
    }
}

/// Duration-weighted pitch-class histogram of pitched notes.
pub fn pitch_class_histogram(score: &Score) -> [f64; 12] {
    let mut h = [0.0; 12];
    for n in score.pitched_notes() {
        h[(n.pitch % 12) as usize] += to_f64(n.duration);
    }
    h
}

fn pearson(a: &[f64; 12], b: impl Fn(usize) -> f64) -> f64 {
    let ma = a.iter().sum::<f64>() / 12.0;
    let mb = (0..12).map(&b).sum::<f64>() / 12.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (i, &x) in a.iter().enumerate() {
        let (x, y) = (x - ma, b(i) - mb);
        num += x * y;
        da += x * x;
        db += y * y;
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

/// Best correlation of `hist` with any of the 12 rotations of `profile`.
pub fn best_correlation(hist: &[f64; 12], profile: &[f64; 12]) -> f64 {
    (0..12)
        .map(|tonic| pearson(hist, |pc| profile[(pc + 12 - tonic) % 12]))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn key_class(score: &Score, cfg: &ExtractionConfig) -> u8 {
    let h = pitch_class_histogram(score);
    if h.iter().all(|&x| x == 0.0) {
        return schema().get(slot::KEY).na();
    }
    let major = best_correlation(&h, &cfg.major_profile);
    let minor = best_correlation(&h, &cfg.minor_profile);
    if minor > major {
        1
    } else {
        0
    }
}

/// All objective slots of `score`; subjective slots are NA.
pub fn extract_objective(score: &Score, cfg: &ExtractionConfig) -> AttributeVector {
    let mut v = AttributeVector::all_na();
    let mut played = [false; 28];
    for t in &score.tracks {
        if !t.notes.is_empty() {
            played[instrument_class(t.program, t.is_drum)] = true;
        }
    }
    for (c, p) in played.iter().enumerate() {
        v.set(slot::instrument(c), if *p { PLAYED } else { NOT_PLAYED });
    }
    let bars = score.bars();
    v.set(slot::BAR, bar_class(bars.len()));
    let (num, den) = dominant_meter(&bars).unwrap_or_else(|| {
        let ts = score.timesig_map[0];
        (ts.numerator, ts.denominator)
    });
    v.set(slot::TIME_SIGNATURE, time_signature_class(num, den));
    v.set(slot::TEMPO, tempo_class(dominant_bpm(score)));
    if let Some(last) = bars.last() {
        v.set(slot::TIME, time_class(score.seconds_until(last.end())));
    }
    v.set(slot::PITCH_RANGE, pitch_range_class(score));
    v.set(slot::DANCEABILITY, danceability_class(score, cfg));
    v.set(slot::INTENSITY, intensity_class(score, cfg));
    v.set(slot::KEY, key_class(score, cfg));
    v
}
