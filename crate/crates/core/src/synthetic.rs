//! Procedurally generated clips with controlled tempo, meter, instrument and
//! length diversity.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::extractor::{representative_program, DRUM_CLASS};
use crate::score::{Note, Score, TempoChange, Time, TimeSignature, Track, WRITE_TICKS_PER_QUARTER};

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];
const DRUM_KIT: [u8; 3] = [36, 38, 42];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_bars: usize,
    pub max_bars: usize,
    pub meters: Vec<(u8, u8)>,
    /// BPM range per tempo class, slow to fast.
    pub tempo_ranges: [(f64, f64); 3],
    /// Instrument class that is present in roughly half of the clips.
    pub featured: usize,
    /// Classes from which one companion instrument is always drawn.
    pub companions: Vec<usize>,
    /// Onsets per bar, drawn uniformly from this inclusive range.
    pub onsets_per_bar: (usize, usize),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_bars: 1,
            max_bars: 16,
            meters: vec![(4, 4), (3, 4), (2, 4), (6, 8)],
            tempo_ranges: [(50.0, 72.0), (84.0, 112.0), (128.0, 168.0)],
            featured: 0,
            companions: vec![4, 5, 10, 13, DRUM_CLASS],
            onsets_per_bar: (1, 2),
        }
    }
}

/// Construction parameters of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPlan {
    pub bars: usize,
    pub meter: (u8, u8),
    pub bpm: f64,
    pub classes: Vec<usize>,
    pub minor: bool,
}

fn q(n: i64, d: i64) -> Time {
    Time::new(n, d)
}

/// Draws a plan from `cfg`.
pub fn random_plan<R: Rng + ?Sized>(cfg: &CorpusConfig, rng: &mut R) -> ClipPlan {
    let bars = rng.random_range(cfg.min_bars..=cfg.max_bars);
    let meter = *cfg.meters.choose(rng).expect("at least one meter");
    let (lo, hi) = cfg.tempo_ranges[rng.random_range(0..3)];
    let bpm = rng.random_range(lo..=hi).round();
    let mut classes = Vec::new();
    if rng.random_bool(0.5) {
        classes.push(cfg.featured);
    }
    let companion = *cfg.companions.choose(rng).expect("at least one companion");
    if !classes.contains(&companion) {
        classes.push(companion);
    }
    ClipPlan {
        bars,
        meter,
        bpm,
        classes,
        minor: rng.random_bool(0.5),
    }
}

/// Renders a plan: notes fall on beats, last one beat, and stay inside the
/// final bar.
pub fn render<R: Rng + ?Sized>(plan: &ClipPlan, cfg: &CorpusConfig, rng: &mut R) -> Score {
    let (num, den) = plan.meter;
    let beat = q(4, den as i64);
    let bar_len = beat * Time::from_integer(num as i64);
    let scale = if plan.minor { MINOR } else { MAJOR };
    let tonic = 60 + rng.random_range(0..12u8) as i32 - 6;
    let mut tracks: Vec<Track> = plan
        .classes
        .iter()
        .map(|&c| {
            let (program, drum) = representative_program(c);
            Track::new(program, drum)
        })
        .collect();
    for b in 0..plan.bars {
        let start = bar_len * Time::from_integer(b as i64);
        let k = rng
            .random_range(cfg.onsets_per_bar.0..=cfg.onsets_per_bar.1)
            .min(num as usize);
        let mut beats: Vec<usize> = (0..num as usize).collect();
        beats.sort_by_key(|_| rng.random::<u32>());
        let mut chosen: Vec<usize> = beats[..k].to_vec();
        chosen.sort_unstable();
        for (t, track) in tracks.iter_mut().enumerate() {
            for (i, &bt) in chosen.iter().enumerate() {
                // The first instrument sounds on every onset, others on some.
                if t > 0 && i % 2 == 1 && rng.random_bool(0.5) {
                    continue;
                }
                let pitch = if track.is_drum {
                    *DRUM_KIT.choose(rng).expect("kit")
                } else {
                    let octave = if track.program >= 32 && track.program < 40 {
                        -12
                    } else {
                        0
                    };
                    let degree = scale[rng.random_range(0..7)] as i32;
                    (tonic + octave + degree).clamp(0, 127) as u8
                };
                let onset = start + beat * Time::from_integer(bt as i64);
                track
                    .notes
                    .push(Note::new(pitch, onset, beat, rng.random_range(48..=100)));
            }
        }
    }
    let length = bar_len * Time::from_integer(plan.bars as i64);
    Score::new(
        tracks,
        vec![TempoChange::from_bpm(q(0, 1), plan.bpm)],
        vec![TimeSignature::new(q(0, 1), num, den)],
        WRITE_TICKS_PER_QUARTER,
        length,
    )
    .expect("rendered clips are well formed")
}

/// `n` random clips.
pub fn corpus<R: Rng + ?Sized>(n: usize, cfg: &CorpusConfig, rng: &mut R) -> Vec<Score> {
    (0..n)
        .map(|_| {
            let plan = random_plan(cfg, rng);
            render(&plan, cfg, rng)
        })
        .collect()
}
