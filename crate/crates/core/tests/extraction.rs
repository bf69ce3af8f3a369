mod common;

use cadenza_core::attributes::slot;
use cadenza_core::extractor::{extract_objective, ExtractionConfig};
use cadenza_core::score::{Note, Score, TempoChange, Track};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn oracle_suite_matches_construction_targets() {
    let cases = extraction_cases();
    assert!(cases.len() >= 30, "{} cases", cases.len());
    assert_eq!(uncovered(&cases), vec![]);
    let failures = run_extraction_suite(&cases);
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn key_oracle_agrees_on_plain_scales() {
    let mut s = ClipSpec::plain((4, 4), 120.0, 4);
    s.per_beat = (7, 4);
    assert_eq!(brute_force_mode(&s.histogram()), "major");
    s.pitches = A_HARMONIC_MINOR.to_vec();
    assert_eq!(brute_force_mode(&s.histogram()), "minor");
}

fn transpose(s: &Score, by: i16) -> Option<Score> {
    let mut out = s.clone();
    for t in out.tracks.iter_mut().filter(|t| !t.is_drum) {
        for n in &mut t.notes {
            let p = n.pitch as i16 + by;
            if !(0..=127).contains(&p) {
                return None;
            }
            n.pitch = p as u8;
        }
    }
    Some(out)
}

const SHIFT_INVARIANT: [usize; 7] = [
    slot::PITCH_RANGE,
    slot::KEY,
    slot::DANCEABILITY,
    slot::INTENSITY,
    slot::BAR,
    slot::TEMPO,
    slot::TIME_SIGNATURE,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn octave_transposition_changes_nothing(seed in any::<u64>(), up in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_score(&mut rng, 8, 30);
        if let Some(t) = transpose(&s, if up { 12 } else { -12 }) {
            let cfg = ExtractionConfig::default();
            let (a, b) = (extract_objective(&s, &cfg), extract_objective(&t, &cfg));
            for slot in SHIFT_INVARIANT {
                prop_assert_eq!(a.get(slot), b.get(slot));
            }
        }
    }

    #[test]
    fn tempo_stretch_moves_only_tempo_and_time(seed in any::<u64>(), factor in 0.25f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_score(&mut rng, 8, 30);
        let mut t = s.clone();
        t.tempo_map = s.tempo_map.iter().map(|c| TempoChange::from_bpm(c.time, (c.bpm() * factor).clamp(4.0, 960.0))).collect();
        let cfg = ExtractionConfig::default();
        let (a, b) = (extract_objective(&s, &cfg), extract_objective(&t, &cfg));
        for slot in 0..slot::COUNT {
            if slot != slot::TEMPO && slot != slot::TIME {
                prop_assert_eq!(a.get(slot), b.get(slot), "slot {}", slot);
            }
        }
    }

    #[test]
    fn extraction_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_score(&mut rng, 8, 30);
        let cfg = ExtractionConfig::default();
        prop_assert_eq!(extract_objective(&s, &cfg), extract_objective(&s.clone(), &cfg));
    }
}

#[test]
fn drum_notes_do_not_widen_the_range() {
    let mut s = ClipSpec::plain((4, 4), 120.0, 4).build();
    let mut kit = Track::new(0, true);
    kit.notes.push(Note::new(127, q(0, 1), q(1, 1), 90));
    kit.notes.push(Note::new(0, q(1, 1), q(1, 1), 90));
    s.tracks.push(kit);
    let v = extract_objective(&s, &ExtractionConfig::default());
    assert_eq!(v.label(slot::PITCH_RANGE), "1");
}
