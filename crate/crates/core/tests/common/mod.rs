//! Builders and independent oracles shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cadenza_core::attributes::{schema, slot, AttributeKind, AttributeVector};
use cadenza_core::evaluation::asa;
use cadenza_core::score::{
    Note, Score, TempoChange, Time, TimeSignature, Track, WRITE_TICKS_PER_QUARTER,
};
use cadenza_core::tokenizer::{
    assemble_training_sequence, decode_tokens, encode_score, quantize, Token, TokenSequence, Vocab,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod composed;
pub mod repro;

pub fn q(n: i64, d: i64) -> Time {
    Time::new(n, d)
}

// ---------------------------------------------------------------------------
// extraction oracle

/// General MIDI program per instrument class, chosen by hand from the GM
/// program groups. `None` marks the drum kit.
pub const GM_PROGRAM: [Option<u8>; 28] = [
    Some(0),   // piano: acoustic grand
    Some(7),   // keyboard: clavinet
    Some(13),  // percussion: xylophone
    Some(19),  // organ: church organ
    Some(25),  // guitar: steel acoustic
    Some(33),  // bass: fingered
    Some(40),  // violin
    Some(41),  // viola
    Some(42),  // cello
    Some(46),  // harp
    Some(49),  // strings: slow ensemble
    Some(53),  // voice: voice oohs
    Some(56),  // trumpet
    Some(57),  // trombone
    Some(58),  // tuba
    Some(60),  // french horn
    Some(62),  // brass: synth brass
    Some(66),  // tenor sax
    Some(68),  // oboe
    Some(70),  // bassoon
    Some(71),  // clarinet
    Some(72),  // piccolo
    Some(73),  // flute
    Some(78),  // pipe: whistle
    Some(81),  // synthesizer: saw lead
    Some(105), // ethnic: banjo
    Some(122), // sound effect: seashore
    None,      // drum kit
];

pub const C_MAJOR: [u8; 7] = [60, 62, 64, 65, 67, 69, 71];
pub const A_HARMONIC_MINOR: [u8; 7] = [57, 59, 60, 62, 64, 65, 68];

/// A clip built from explicit construction parameters.
#[derive(Clone, Debug)]
pub struct ClipSpec {
    pub meter: (u8, u8),
    pub bpm: f64,
    pub bars: usize,
    /// Instrument classes; every part plays the same rhythm.
    pub classes: Vec<usize>,
    /// Pitches cycled through onsets by pitched parts.
    pub pitches: Vec<u8>,
    /// Onsets per beat, where a beat is one denominator unit.
    pub per_beat: (i64, i64),
    /// Shift every onset by half the onset spacing.
    pub offbeat: bool,
}

impl ClipSpec {
    pub fn plain(meter: (u8, u8), bpm: f64, bars: usize) -> Self {
        Self {
            meter,
            bpm,
            bars,
            classes: vec![0],
            pitches: C_MAJOR.to_vec(),
            per_beat: (1, 1),
            offbeat: false,
        }
    }

    pub fn beat(&self) -> Time {
        q(4, self.meter.1 as i64)
    }

    pub fn length(&self) -> Time {
        self.beat() * Time::from_integer(self.meter.0 as i64 * self.bars as i64)
    }

    /// Onsets and the shared duration.
    pub fn rhythm(&self) -> (Vec<Time>, Time) {
        let spacing = self.beat() * q(self.per_beat.1, self.per_beat.0);
        let shift = if self.offbeat {
            spacing / Time::from_integer(2)
        } else {
            q(0, 1)
        };
        let mut onsets = Vec::new();
        let mut t = shift;
        while t < self.length() {
            onsets.push(t);
            t += spacing;
        }
        (onsets, spacing / Time::from_integer(2))
    }

    pub fn build(&self) -> Score {
        let (onsets, dur) = self.rhythm();
        let tracks = self
            .classes
            .iter()
            .map(|&c| {
                let mut t = match GM_PROGRAM[c] {
                    Some(p) => Track::new(p, false),
                    None => Track::new(0, true),
                };
                for (i, &on) in onsets.iter().enumerate() {
                    let pitch = if t.is_drum {
                        [36, 38][i % 2]
                    } else {
                        self.pitches[i % self.pitches.len()]
                    };
                    t.notes.push(Note::new(pitch, on, dur, 80));
                }
                t
            })
            .collect();
        Score::new(
            tracks,
            vec![TempoChange::from_bpm(q(0, 1), self.bpm)],
            vec![TimeSignature::new(q(0, 1), self.meter.0, self.meter.1)],
            WRITE_TICKS_PER_QUARTER,
            self.length(),
        )
        .expect("valid construction")
    }

    /// Duration-weighted pitch-class histogram of the pitched parts.
    pub fn histogram(&self) -> [f64; 12] {
        let (onsets, dur) = self.rhythm();
        let mut h = [0.0; 12];
        let pitched = self
            .classes
            .iter()
            .filter(|&&c| GM_PROGRAM[c].is_some())
            .count();
        for i in 0..onsets.len() {
            let p = self.pitches[i % self.pitches.len()];
            h[(p % 12) as usize] += pitched as f64 * (*dur.numer() as f64 / *dur.denom() as f64);
        }
        h
    }
}

pub const KK_MAJOR: [f64; 12] = [
    6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88,
];
pub const KK_MINOR: [f64; 12] = [
    6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17,
];

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx.sqrt() * vy.sqrt())
    }
}

/// Brute force over all 24 keys; returns "major" or "minor".
pub fn brute_force_mode(hist: &[f64; 12]) -> &'static str {
    let mut best = ("major", f64::NEG_INFINITY);
    for (mode, profile) in [("major", KK_MAJOR), ("minor", KK_MINOR)] {
        for tonic in 0..12 {
            let rotated: Vec<f64> = (0..12).map(|pc| profile[(pc + 12 - tonic) % 12]).collect();
            let r = correlation(hist, &rotated);
            if r > best.1 {
                best = (mode, r);
            }
        }
    }
    best.0
}

pub struct ExtractionCase {
    pub name: String,
    pub score: Score,
    /// Expected label of every objective slot.
    pub expected: BTreeMap<usize, &'static str>,
}

fn label_of(slot: usize, label: &str) -> u8 {
    schema()
        .get(slot)
        .value_index(label)
        .unwrap_or_else(|| panic!("no label {label} for slot {slot}"))
}

pub fn expected_vector(case: &ExtractionCase) -> AttributeVector {
    let mut v = AttributeVector::all_na();
    for (&s, l) in &case.expected {
        v.set(s, label_of(s, l));
    }
    v
}

/// Scalar labels in slot order: pitch range, danceability, intensity, bar,
/// time signature, key, tempo, time.
type Labels = [&'static str; 8];
const SCALARS: [usize; 8] = [
    slot::PITCH_RANGE,
    slot::DANCEABILITY,
    slot::INTENSITY,
    slot::BAR,
    slot::TIME_SIGNATURE,
    slot::KEY,
    slot::TEMPO,
    slot::TIME,
];

fn case(name: &str, score: Score, classes: &[usize], labels: Labels) -> ExtractionCase {
    let mut expected = BTreeMap::new();
    for c in 0..28 {
        expected.insert(
            slot::instrument(c),
            if classes.contains(&c) {
                "played"
            } else {
                "not played"
            },
        );
    }
    for (s, l) in SCALARS.iter().zip(labels) {
        expected.insert(*s, l);
    }
    ExtractionCase {
        name: name.to_string(),
        score,
        expected,
    }
}

fn spec_case(name: &str, s: &ClipSpec, labels: Labels) -> ExtractionCase {
    case(name, s.build(), &s.classes, labels)
}

/// Clips constructed so that every value of every objective attribute is
/// hit, with targets stated from the construction. Key targets are stated
/// by hand where the melody is a plain scale and otherwise come from the
/// brute-force profile oracle.
pub fn extraction_cases() -> Vec<ExtractionCase> {
    let mut out = Vec::new();
    let major = "major";

    // Tempo, meter, bar and time. One note per beat on the beat: 1.0 notes
    // per beat is moderate, all onsets on beats is danceable, the C major
    // scale spans 11 semitones, i.e. one octave class.
    // 16 beats at 76 BPM = 12.6 s
    out.push(spec_case(
        "76bpm_4-4_4bars",
        &ClipSpec::plain((4, 4), 76.0, 4),
        [
            "1",
            "danceable",
            "moderate",
            "1-4",
            "4/4",
            major,
            "slow",
            "0-15s",
        ],
    ));
    // 32 beats at 120 BPM = 16 s
    out.push(spec_case(
        "120bpm_4-4_8bars",
        &ClipSpec::plain((4, 4), 120.0, 8),
        [
            "1",
            "danceable",
            "moderate",
            "5-8",
            "4/4",
            major,
            "fast",
            "15-30s",
        ],
    ));
    // 56 beats at 100 BPM = 33.6 s
    out.push(spec_case(
        "100bpm_4-4_14bars",
        &ClipSpec::plain((4, 4), 100.0, 14),
        [
            "1",
            "danceable",
            "moderate",
            "13-16",
            "4/4",
            major,
            "moderato",
            "30-45s",
        ],
    ));
    // 30 quarters at 77 BPM = 23.4 s
    out.push(spec_case(
        "77bpm_3-4_10bars",
        &ClipSpec::plain((3, 4), 77.0, 10),
        [
            "1",
            "danceable",
            "moderate",
            "9-12",
            "3/4",
            major,
            "moderato",
            "15-30s",
        ],
    ));
    // 32 quarters at 119 BPM = 16.1 s
    out.push(spec_case(
        "119bpm_2-4_16bars",
        &ClipSpec::plain((2, 4), 119.0, 16),
        [
            "1",
            "danceable",
            "moderate",
            "13-16",
            "2/4",
            major,
            "moderato",
            "15-30s",
        ],
    ));
    // 12 quarters at 60 BPM = 12 s
    out.push(spec_case(
        "60bpm_1-4_12bars",
        &ClipSpec::plain((1, 4), 60.0, 12),
        [
            "1",
            "danceable",
            "moderate",
            "9-12",
            "1/4",
            major,
            "slow",
            "0-15s",
        ],
    ));
    // 18 quarters at 75 BPM = 14.4 s
    out.push(spec_case(
        "75bpm_6-8_6bars",
        &ClipSpec::plain((6, 8), 75.0, 6),
        [
            "1",
            "danceable",
            "moderate",
            "5-8",
            "6/8",
            major,
            "slow",
            "0-15s",
        ],
    ));
    // 4.5 quarters at 140 BPM = 1.9 s
    out.push(spec_case(
        "140bpm_3-8_3bars",
        &ClipSpec::plain((3, 8), 140.0, 3),
        [
            "1",
            "danceable",
            "moderate",
            "1-4",
            "3/8",
            major,
            "fast",
            "0-15s",
        ],
    ));
    // 55 quarters at 60 BPM = 55 s
    out.push(spec_case(
        "60bpm_5-4_11bars",
        &ClipSpec::plain((5, 4), 60.0, 11),
        [
            "1",
            "danceable",
            "moderate",
            "9-12",
            "other",
            major,
            "slow",
            "45-60s",
        ],
    ));
    // 64 quarters at 60 BPM = 64 s
    out.push(spec_case(
        "60bpm_4-4_16bars",
        &ClipSpec::plain((4, 4), 60.0, 16),
        [
            "1",
            "danceable",
            "moderate",
            "13-16",
            "4/4",
            major,
            "slow",
            ">60s",
        ],
    ));

    // Pitch range: spans of exactly 12k semitones give octave class k; the
    // last pair spans 127.
    let spans: [(u8, u8, &str); 12] = [
        (60, 60, "0"),
        (60, 72, "1"),
        (54, 78, "2"),
        (48, 84, "3"),
        (42, 90, "4"),
        (36, 96, "5"),
        (30, 102, "6"),
        (24, 108, "7"),
        (18, 114, "8"),
        (12, 120, "9"),
        (5, 125, "10"),
        (0, 127, "11"),
    ];
    for (lo, hi, class) in spans {
        let mut s = ClipSpec::plain((4, 4), 120.0, 4);
        s.pitches = if lo == hi {
            vec![lo]
        } else {
            vec![lo, 64, 67, hi]
        };
        let key = brute_force_mode(&s.histogram());
        out.push(spec_case(
            &format!("span_{lo}_{hi}"),
            &s,
            [
                class,
                "danceable",
                "moderate",
                "1-4",
                "4/4",
                key,
                "fast",
                "0-15s",
            ],
        ));
    }

    // Rhythm: density and on-beat ratio.
    let rhythms: [((i64, i64), bool, &str, &str); 5] = [
        ((1, 2), false, "serene", "danceable"), // 0.5 per beat, all on beats
        ((1, 1), true, "moderate", "not danceable"), // every onset half a beat late
        ((2, 1), false, "moderate", "danceable"), // half the onsets on beats
        ((3, 1), false, "moderate", "not danceable"), // 3.0 per beat, a third on beats
        ((4, 1), false, "intense", "not danceable"), // a quarter on beats
    ];
    for (per_beat, offbeat, intensity, dance) in rhythms {
        let mut s = ClipSpec::plain((4, 4), 120.0, 4);
        s.per_beat = per_beat;
        s.offbeat = offbeat;
        let key = brute_force_mode(&s.histogram());
        out.push(spec_case(
            &format!(
                "rhythm_{}_{}{}",
                per_beat.0,
                per_beat.1,
                if offbeat { "_off" } else { "" }
            ),
            &s,
            ["1", dance, intensity, "1-4", "4/4", key, "fast", "0-15s"],
        ));
    }

    // Key: the two plain scales.
    let mut s = ClipSpec::plain((4, 4), 120.0, 4);
    s.pitches = C_MAJOR.to_vec();
    s.per_beat = (7, 4); // 28 onsets: every scale degree four times
    out.push(spec_case(
        "c_major_scale",
        &s,
        [
            "1",
            "not danceable",
            "moderate",
            "1-4",
            "4/4",
            "major",
            "fast",
            "0-15s",
        ],
    ));
    s.pitches = A_HARMONIC_MINOR.to_vec();
    out.push(spec_case(
        "a_harmonic_minor_scale",
        &s,
        [
            "1",
            "not danceable",
            "moderate",
            "1-4",
            "4/4",
            "minor",
            "fast",
            "0-15s",
        ],
    ));

    // Instruments: four parts per clip at half a note per beat each, so 2.0
    // notes per beat overall.
    for group in (0..28).collect::<Vec<usize>>().chunks(4) {
        let mut s = ClipSpec::plain((4, 4), 120.0, 4);
        s.classes = group.to_vec();
        s.per_beat = (1, 2);
        let has_pitched = group.iter().any(|&c| GM_PROGRAM[c].is_some());
        assert!(has_pitched);
        let key = brute_force_mode(&s.histogram());
        out.push(spec_case(
            &format!("instruments_{}", group[0]),
            &s,
            [
                "1",
                "danceable",
                "moderate",
                "1-4",
                "4/4",
                key,
                "fast",
                "0-15s",
            ],
        ));
    }

    // Drums only: no pitched material, so range and key are NA.
    let mut s = ClipSpec::plain((4, 4), 120.0, 4);
    s.classes = vec![27];
    out.push(spec_case(
        "drums_only",
        &s,
        [
            "NA",
            "danceable",
            "moderate",
            "1-4",
            "4/4",
            "NA",
            "fast",
            "0-15s",
        ],
    ));

    // Four silent bars: bars, meter, tempo and time are known; the note
    // based attributes are NA and no instrument plays.
    let mut s = ClipSpec::plain((4, 4), 120.0, 4);
    s.classes = vec![];
    out.push(spec_case(
        "silent_4bars",
        &s,
        ["NA", "NA", "NA", "1-4", "4/4", "NA", "fast", "0-15s"],
    ));

    // Zero length: no bars, so bar and time are NA as well.
    let empty = Score::new(
        vec![],
        vec![TempoChange::from_bpm(q(0, 1), 90.0)],
        vec![TimeSignature::new(q(0, 1), 3, 4)],
        WRITE_TICKS_PER_QUARTER,
        q(0, 1),
    )
    .expect("empty score");
    out.push(case(
        "zero_length",
        empty,
        &[],
        ["NA", "NA", "NA", "NA", "3/4", "NA", "moderato", "NA"],
    ));
    out
}

/// Every `(slot, value)` pair of objective attributes hit by `cases`.
pub fn covered_values(cases: &[ExtractionCase]) -> BTreeMap<usize, Vec<u8>> {
    let mut out: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
    for c in cases {
        let v = expected_vector(c);
        for s in schema().objective_slots() {
            let e = out.entry(s).or_default();
            if !e.contains(&v.get(s)) {
                e.push(v.get(s));
            }
        }
    }
    out
}

/// Objective slots whose value sets are not fully covered.
pub fn uncovered(cases: &[ExtractionCase]) -> Vec<(String, u8)> {
    let covered = covered_values(cases);
    let mut missing = Vec::new();
    for s in schema().objective_slots() {
        let def = schema().get(s);
        for v in 0..def.cardinality() as u8 {
            // Instrument flags are never NA after extraction, and every
            // score carries a meter and a tempo.
            let never_na = s < slot::PITCH_RANGE || s == slot::TIME_SIGNATURE || s == slot::TEMPO;
            if never_na && v == def.na() {
                continue;
            }
            if !covered[&s].contains(&v) {
                missing.push((def.name.clone(), v));
            }
        }
    }
    missing
}

/// Runs the suite; returns the names of failing cases with the first
/// mismatching slot.
pub fn run_extraction_suite(cases: &[ExtractionCase]) -> Vec<String> {
    use cadenza_core::extractor::{extract_objective, ExtractionConfig};
    let cfg = ExtractionConfig::default();
    let mut failures = Vec::new();
    for c in cases {
        let got = extract_objective(&c.score, &cfg);
        let want = expected_vector(c);
        for s in 0..slot::COUNT {
            let kind = schema().get(s).kind;
            let ok = match kind {
                AttributeKind::Objective => got.get(s) == want.get(s),
                AttributeKind::Subjective => got.is_na(s),
            };
            if !ok {
                failures.push(format!(
                    "{}: {} = {} (expected {})",
                    c.name,
                    schema().get(s).name,
                    got.label(s),
                    want.label(s)
                ));
                break;
            }
        }
    }
    failures
}

// ---------------------------------------------------------------------------
// random scores

/// A random score on the 1/480 tick grid with meter and tempo changes at bar
/// lines. Same-pitch notes of one instrument never overlap, since a MIDI
/// channel cannot tell nested same-pitch notes apart.
pub fn random_score<R: Rng + ?Sized>(rng: &mut R, max_bars: usize, max_notes: usize) -> Score {
    const METERS: [(u8, u8); 7] = [(4, 4), (3, 4), (2, 4), (6, 8), (5, 4), (7, 8), (3, 2)];
    let bars = rng.random_range(1..=max_bars);
    let mut tempo_map = Vec::new();
    let mut timesig_map = Vec::new();
    let mut t = q(0, 1);
    for b in 0..bars {
        if b == 0 || rng.random_bool(0.2) {
            let (n, d) = METERS[rng.random_range(0..METERS.len())];
            timesig_map.push(TimeSignature::new(t, n, d));
        }
        if b == 0 || rng.random_bool(0.2) {
            tempo_map.push(TempoChange::from_bpm(t, rng.random_range(40..=220) as f64));
        }
        let ts = timesig_map.last().unwrap();
        t += ts.bar_length();
    }
    let length = t;
    let ticks = (length * Time::from_integer(480)).to_integer();
    let n_tracks = rng.random_range(1..=4);
    let mut tracks = Vec::new();
    for _ in 0..n_tracks {
        let drum = rng.random_bool(0.2);
        let mut track = Track::new(if drum { 0 } else { rng.random_range(0..128) }, drum);
        let n = rng.random_range(0..=max_notes);
        for _ in 0..n {
            let pitch = rng.random_range(0..128u8);
            let on = rng.random_range(0..ticks);
            let dur = rng.random_range(1..=(ticks - on).clamp(1, 4 * 480));
            let (on, dur) = (q(on, 480), q(dur, 480));
            let end = on + dur;
            // tracks sharing (drum, program) merge into one
            let clash = tracks
                .iter()
                .chain([&track])
                .filter(|t: &&Track| (t.is_drum, t.program) == (track.is_drum, track.program))
                .flat_map(|t| t.notes.iter())
                .any(|o| o.pitch == pitch && o.onset < end && on < o.end());
            if !clash {
                track
                    .notes
                    .push(Note::new(pitch, on, dur, rng.random_range(1..=127)));
            }
        }
        tracks.push(track);
    }
    Score::new(
        tracks,
        tempo_map,
        timesig_map,
        WRITE_TICKS_PER_QUARTER,
        length,
    )
    .expect("random score")
}

/// `(is_drum, program, pitch, onset, duration, velocity)` of every note.
pub type NoteKey = (bool, u8, u8, Time, Time, u8);

pub fn note_multiset(s: &Score) -> Vec<NoteKey> {
    let mut v: Vec<NoteKey> = s
        .tracks
        .iter()
        .flat_map(|t| {
            t.notes.iter().map(move |n| {
                (
                    t.is_drum, t.program, n.pitch, n.onset, n.duration, n.velocity,
                )
            })
        })
        .collect();
    v.sort();
    v
}

// ---------------------------------------------------------------------------
// naive SMF decoder

/// `(pitch, onset_ticks, duration_ticks, velocity)` per note, decoded event by
/// event with FIFO pairing per (track, channel, pitch). Tick times, no tempo.
pub fn naive_notes(bytes: &[u8]) -> Vec<(u8, u64, u64, u8)> {
    fn be(b: &[u8]) -> usize {
        b.iter().fold(0usize, |a, &x| (a << 8) | x as usize)
    }
    let mut notes = Vec::new();
    assert_eq!(&bytes[0..4], b"MThd");
    let header_len = be(&bytes[4..8]);
    let mut pos = 8 + header_len;
    while pos + 8 <= bytes.len() {
        let len = be(&bytes[pos + 4..pos + 8]);
        let is_track = &bytes[pos..pos + 4] == b"MTrk";
        let body = &bytes[pos + 8..pos + 8 + len];
        pos += 8 + len;
        if !is_track {
            continue;
        }
        let mut open: BTreeMap<(u8, u8), Vec<(u64, u8)>> = BTreeMap::new();
        let mut i = 0;
        let mut now = 0u64;
        let mut status = 0u8;
        while i < body.len() {
            let mut delta = 0u64;
            loop {
                let b = body[i];
                i += 1;
                delta = (delta << 7) | (b & 0x7f) as u64;
                if b & 0x80 == 0 {
                    break;
                }
            }
            now += delta;
            if body[i] & 0x80 != 0 {
                status = body[i];
                i += 1;
            }
            match status {
                0xff => {
                    i += 1; // meta type
                    let mut l = 0usize;
                    loop {
                        let b = body[i];
                        i += 1;
                        l = (l << 7) | (b & 0x7f) as usize;
                        if b & 0x80 == 0 {
                            break;
                        }
                    }
                    i += l;
                }
                0xf0 | 0xf7 => {
                    let mut l = 0usize;
                    loop {
                        let b = body[i];
                        i += 1;
                        l = (l << 7) | (b & 0x7f) as usize;
                        if b & 0x80 == 0 {
                            break;
                        }
                    }
                    i += l;
                }
                s => {
                    let kind = s & 0xf0;
                    let ch = s & 0x0f;
                    let data = if kind == 0xc0 || kind == 0xd0 { 1 } else { 2 };
                    let (a, b) = (body[i], if data == 2 { body[i + 1] } else { 0 });
                    i += data;
                    if kind == 0x90 && b > 0 {
                        open.entry((ch, a)).or_default().push((now, b));
                    } else if kind == 0x80 || (kind == 0x90 && b == 0) {
                        if let Some(q) = open.get_mut(&(ch, a)) {
                            if !q.is_empty() {
                                let (on, vel) = q.remove(0);
                                notes.push((a, on, now - on, vel));
                            }
                        }
                    }
                }
            }
        }
        // orphans close at the end of the track
        for ((_, pitch), q) in open {
            for (on, vel) in q {
                notes.push((pitch, on, now.saturating_sub(on), vel));
            }
        }
    }
    notes.sort();
    notes
}

// ---------------------------------------------------------------------------
// brute-force ASA

pub fn brute_force_asa(pred: &[AttributeVector], gold: &[AttributeVector]) -> Option<f64> {
    let na: Vec<u8> = (0..slot::COUNT)
        .map(|s| schema().get(s).cardinality() as u8 - 1)
        .collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        let mut hit = 0usize;
        let mut spec = 0usize;
        for s in 0..slot::COUNT {
            if g.values()[s] != na[s] {
                spec += 1;
                if p.values()[s] == g.values()[s] {
                    hit += 1;
                }
            }
        }
        if spec > 0 {
            sum += hit as f64 / spec as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// A vector whose slots are each NA with probability `na_rate`, otherwise
/// uniform over the non-NA values.
pub fn random_vector<R: Rng + ?Sized>(rng: &mut R, na_rate: f64) -> AttributeVector {
    let values = (0..slot::COUNT)
        .map(|s| {
            let card = schema().get(s).cardinality() as u8;
            if rng.random_bool(na_rate) {
                card - 1
            } else {
                rng.random_range(0..card - 1)
            }
        })
        .collect();
    AttributeVector::from_values(values).expect("in range")
}

/// Gold vectors with random NA rates and predictions agreeing on about half
/// the slots.
pub fn random_pairs(seed: u64, n: usize) -> (Vec<AttributeVector>, Vec<AttributeVector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gold: Vec<AttributeVector> = (0..n)
        .map(|_| {
            let na = rng.random_range(0.0..1.0);
            random_vector(&mut rng, na)
        })
        .collect();
    let pred = gold
        .iter()
        .map(|g| {
            let noise = random_vector(&mut rng, 0.1);
            let values = (0..slot::COUNT)
                .map(|s| {
                    if rng.random_bool(0.5) {
                        g.get(s)
                    } else {
                        noise.get(s)
                    }
                })
                .collect();
            AttributeVector::from_values(values).unwrap()
        })
        .collect();
    (pred, gold)
}

/// ASA must not move when predictions change wherever gold is NA, nor when
/// samples with all-NA gold are appended.
pub fn na_invariance_failures(
    pred: &[AttributeVector],
    gold: &[AttributeVector],
    seed: u64,
) -> Vec<String> {
    let mut failures = Vec::new();
    let base = asa(pred, gold).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scrambled: Vec<AttributeVector> = pred
        .iter()
        .zip(gold)
        .map(|(p, g)| {
            let noise = random_vector(&mut rng, 0.5);
            let values = (0..slot::COUNT)
                .map(|s| if g.is_na(s) { noise.get(s) } else { p.get(s) })
                .collect();
            AttributeVector::from_values(values).unwrap()
        })
        .collect();
    let after = asa(&scrambled, gold).unwrap();
    if after != base {
        failures.push(format!(
            "rewriting NA-gold predictions moved ASA {base} -> {after}"
        ));
    }
    let mut p2 = pred.to_vec();
    let mut g2 = gold.to_vec();
    for _ in 0..100 {
        p2.push(random_vector(&mut rng, 0.2));
        g2.push(AttributeVector::all_na());
    }
    let after = asa(&p2, &g2).unwrap();
    if after != base {
        failures.push(format!("appending all-NA gold moved ASA {base} -> {after}"));
    }
    failures
}

/// Encodes and decodes `count` random quantized scores.
pub fn round_trip_failures(count: usize, seed: u64) -> Vec<String> {
    let vocab = Vocab::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..count {
        let s = quantize(&random_score(&mut rng, 16, 40));
        let enc = encode_score(&s, &vocab);
        match decode_tokens(&enc.seq, &vocab) {
            Ok(d) if d.truncated => failures.push(format!("score {i}: decoded as truncated")),
            Ok(d) if d.score != s => failures.push(format!("score {i}: decoded score differs")),
            Ok(_) => {}
            Err(e) => failures.push(format!("score {i}: {e}")),
        }
    }
    failures
}

/// Assembles `count` training sequences at random keep rates and checks the
/// prefix layout of each.
pub fn prefix_shape_failures(count: usize, seed: u64) -> Vec<String> {
    let vocab = Vocab::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..count {
        let s = quantize(&random_score(&mut rng, 4, 20));
        let music = encode_score(&s, &vocab).seq;
        let na = rng.random_range(0.0..1.0);
        let v = random_vector(&mut rng, na);
        let keep = rng.random_range(0.0..=1.0);
        match assemble_training_sequence(&v, &music, keep, &mut rng, &vocab) {
            Ok(seq) => {
                if let Err(e) = check_shape(&seq, &music, &vocab) {
                    failures.push(format!("sequence {i}: {e}"));
                }
            }
            Err(e) => failures.push(format!("sequence {i}: {e}")),
        }
    }
    failures
}

// ---------------------------------------------------------------------------
// sequence layout

/// Checks the layout `m prefix ids, SEP, music, EOS`.
pub fn check_shape(
    seq: &TokenSequence,
    music: &TokenSequence,
    vocab: &Vocab,
) -> Result<(), String> {
    let m = slot::COUNT;
    if seq.boundary != Some(m) {
        return Err(format!("boundary {:?}", seq.boundary));
    }
    if seq.len() != m + 1 + music.len() + 1 {
        return Err(format!("length {}", seq.len()));
    }
    for (j, &id) in seq.ids[..m].iter().enumerate() {
        match vocab.token(id) {
            Some(Token::Prefix { attribute, .. }) if attribute as usize == j => {}
            other => return Err(format!("prefix position {j} holds {other:?}")),
        }
    }
    if seq.ids.iter().filter(|&&id| id == vocab.sep()).count() != 1 || seq.ids[m] != vocab.sep() {
        return Err("separator".into());
    }
    if seq.ids[m + 1..m + 1 + music.len()] != music.ids[..]
        || *seq.ids.last().unwrap() != vocab.eos()
    {
        return Err("music region".into());
    }
    Ok(())
}
