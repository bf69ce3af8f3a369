use crate::extractor::{instrument_class, representative_program, tempo_class};
use crate::score::{Note, Score, TempoChange, Time, TimeSignature, Track};

use super::{
    bar_slots, bin_velocity, velocity_bin, MAX_DURATION, SLOTS_PER_QUARTER, TEMPO_BUCKET_BPM,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QuantizeReport {
    /// Notes longer than the duration vocabulary, clamped.
    pub clamped_durations: usize,
    /// Notes whose onset fell outside the snapped bar grid.
    pub dropped_notes: usize,
    /// Bars whose meter had no token and was replaced.
    pub replaced_meters: usize,
}

/// Maps a meter onto the token inventory, preserving bar length when some
/// supported meter has it; otherwise 4/4.
fn snap_meter(n: u8, d: u8) -> (u8, u8) {
    let len = Time::new(4 * n as i64, d as i64);
    for dd in [d, 4, 8, 2] {
        if ![2, 4, 8].contains(&dd) {
            continue;
        }
        let nn = len * Time::from_integer(dd as i64) / Time::from_integer(4);
        if nn.is_integer() && (1..=2 * dd as i64).contains(nn.numer()) {
            return (*nn.numer() as u8, dd);
        }
    }
    (4, 4)
}

fn slots(t: Time) -> Time {
    t * Time::from_integer(SLOTS_PER_QUARTER)
}

pub fn quantize(score: &Score) -> Score {
    quantize_with_report(score).0
}

/// Snaps a score onto the token grid: 12 slots per quarter, supported meters,
/// one tempo bucket per bar (the last change inside a bar wins), instrument
/// classes, velocity bins, and durations of 1..=192 slots that never run
/// past the final bar. Quantization is idempotent.
pub fn quantize_with_report(score: &Score) -> (Score, QuantizeReport) {
    let mut report = QuantizeReport::default();
    let bars = score.bars();
    if bars.is_empty() {
        return (Score::empty(), report);
    }
    let mut meters = Vec::with_capacity(bars.len());
    let mut tempos = Vec::with_capacity(bars.len());
    let mut starts = Vec::with_capacity(bars.len() + 1);
    let mut total = 0i64;
    for b in &bars {
        let m = snap_meter(b.numerator, b.denominator);
        if m != (b.numerator, b.denominator) {
            report.replaced_meters += 1;
        }
        let tc = score
            .tempo_map
            .iter()
            .rev()
            .find(|t| t.time < b.end())
            .unwrap_or(&score.tempo_map[0]);
        meters.push(m);
        tempos.push(tempo_class(tc.bpm()));
        starts.push(total);
        total += bar_slots(m.0, m.1) as i64;
    }
    starts.push(total);

    let mut tracks: Vec<Track> = Vec::new();
    for t in &score.tracks {
        let (program, is_drum) = representative_program(instrument_class(t.program, t.is_drum));
        let mut out = Track::new(program, is_drum);
        for n in &t.notes {
            let bi = bars.partition_point(|b| b.start <= n.onset) - 1;
            let rel = slots(n.onset - bars[bi].start).round().to_integer();
            let len = starts[bi + 1] - starts[bi];
            let abs = starts[bi] + rel;
            // rounding onto the next bar line is fine; anything further is not
            if rel > len || abs >= total {
                report.dropped_notes += 1;
                continue;
            }
            let mut dur = slots(n.duration).round().to_integer().max(1);
            if dur > MAX_DURATION as i64 {
                dur = MAX_DURATION as i64;
                report.clamped_durations += 1;
            }
            dur = dur.min(total - abs);
            out.notes.push(Note::new(
                n.pitch,
                Time::new(abs, SLOTS_PER_QUARTER),
                Time::new(dur, SLOTS_PER_QUARTER),
                bin_velocity(velocity_bin(n.velocity)),
            ));
        }
        tracks.push(out);
    }
    let q = build(tracks, &meters, &tempos, &starts);
    (q, report)
}

/// Assembles a grid score from per-bar meters and tempo classes.
pub(super) fn build(
    tracks: Vec<Track>,
    meters: &[(u8, u8)],
    tempos: &[u8],
    starts: &[i64],
) -> Score {
    let mut tempo_map = Vec::new();
    let mut timesig_map = Vec::new();
    for i in 0..meters.len() {
        let at = Time::new(starts[i], SLOTS_PER_QUARTER);
        if i == 0 || tempos[i] != tempos[i - 1] {
            tempo_map.push(TempoChange::from_bpm(
                at,
                TEMPO_BUCKET_BPM[tempos[i] as usize],
            ));
        }
        if i == 0 || meters[i] != meters[i - 1] {
            timesig_map.push(TimeSignature::new(at, meters[i].0, meters[i].1));
        }
    }
    let length = Time::new(*starts.last().unwrap_or(&0), SLOTS_PER_QUARTER);
    Score::new(
        tracks,
        tempo_map,
        timesig_map,
        crate::score::WRITE_TICKS_PER_QUARTER,
        length,
    )
    .expect("grid score is valid")
}
