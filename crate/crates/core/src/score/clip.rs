use rand::Rng;

use super::{Note, Score, TempoChange, Time, TimeSignature, Track};

/// A bar-aligned excerpt of a score, re-based to start at time zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    pub score: Score,
    /// `[start_bar, end_bar)` in the source score's bar numbering.
    pub bar_span: (usize, usize),
}

impl Clip {
    /// Treats a whole score as one clip.
    pub fn whole(score: Score) -> Self {
        let bars = score.bars().len();
        Self {
            score,
            bar_span: (0, bars),
        }
    }

    pub fn bar_count(&self) -> usize {
        self.bar_span.1 - self.bar_span.0
    }

    /// Slices bars `[start_bar, end_bar)` out of `score`. Notes starting in
    /// the span are kept and truncated at its end; tempo and meter in effect
    /// at the start are carried to time zero.
    pub fn from_bars(score: &Score, start_bar: usize, end_bar: usize) -> Self {
        let bars = score.bars();
        let start = bars[start_bar].start;
        let end = bars[end_bar - 1].end();
        let tracks = score
            .tracks
            .iter()
            .map(|t| Track {
                program: t.program,
                is_drum: t.is_drum,
                notes: t
                    .notes
                    .iter()
                    .filter(|n| n.onset >= start && n.onset < end)
                    .map(|n| {
                        Note::new(
                            n.pitch,
                            n.onset - start,
                            n.end().min(end) - n.onset,
                            n.velocity,
                        )
                    })
                    .collect(),
            })
            .collect();
        let mut tempo_map = vec![TempoChange {
            time: Time::from_integer(0),
            ..score.tempo_at(start)
        }];
        tempo_map.extend(
            score
                .tempo_map
                .iter()
                .filter(|t| t.time > start && t.time < end)
                .map(|t| TempoChange {
                    time: t.time - start,
                    ..*t
                }),
        );
        let mut timesig_map = vec![TimeSignature {
            time: Time::from_integer(0),
            ..score.timesig_at(start)
        }];
        timesig_map.extend(
            score
                .timesig_map
                .iter()
                .filter(|t| t.time > start && t.time < end)
                .map(|t| TimeSignature {
                    time: t.time - start,
                    ..*t
                }),
        );
        let clip_score = Score::new(
            tracks,
            tempo_map,
            timesig_map,
            score.ticks_per_quarter,
            end - start,
        )
        .expect("slice of a valid score is valid");
        Self {
            score: clip_score,
            bar_span: (start_bar, end_bar),
        }
    }
}

/// Samples up to `count` distinct bar spans of 1..=`max_bars` bars. Span
/// length is uniform over the feasible lengths, then the start bar is
/// uniform over feasible starts. Spans may overlap.
pub fn extract_clips<R: Rng>(
    score: &Score,
    max_bars: usize,
    count: usize,
    rng: &mut R,
) -> Vec<Clip> {
    let n = score.bars().len();
    if n == 0 || max_bars == 0 || score.note_count() == 0 {
        return Vec::new();
    }
    let longest = max_bars.min(n);
    let feasible: usize = (1..=longest).map(|len| n - len + 1).sum();
    let want = count.min(feasible);
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(want);
    while spans.len() < want {
        let len = rng.random_range(1..=longest);
        let start = rng.random_range(0..=n - len);
        let span = (start, start + len);
        if !spans.contains(&span) {
            spans.push(span);
        }
    }
    spans
        .into_iter()
        .map(|(s, e)| Clip::from_bars(score, s, e))
        .collect()
}
