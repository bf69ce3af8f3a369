//! Standard MIDI File reading (formats 0 and 1) and writing (format 1).

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use super::{Note, Score, ScoreError, TempoChange, Time, TimeSignature, Track, DRUM_CHANNEL};

pub const WRITE_TICKS_PER_QUARTER: u16 = 480;

#[derive(Debug, Error, PartialEq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported MIDI format {0}")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    SmpteDivision,
    #[error(transparent)]
    Score(#[from] ScoreError),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> MidiError {
        MidiError::Malformed {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!("expected {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.bytes(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn varlen(&mut self) -> Result<u32, MidiError> {
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(self.err("variable-length quantity longer than 4 bytes"))
    }
}

/// Notes collected from one track, keyed by channel and program.
#[derive(Default)]
struct TrackNotes {
    notes: BTreeMap<(bool, u8), Vec<Note>>,
}

pub fn parse_midi(bytes: &[u8]) -> Result<Score, MidiError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.bytes(4)? != b"MThd" {
        r.pos -= 4;
        return Err(r.err("missing MThd header"));
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(r.err(format!("header length {header_len} < 6")));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division = r.u16()?;
    r.bytes(header_len - (r.pos - header_start))?;
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision);
    }
    if division == 0 {
        return Err(MidiError::Malformed {
            offset: 12,
            reason: "zero ticks per quarter".into(),
        });
    }
    let tpq = division as i64;
    let to_time = |ticks: u64| Time::new(ticks as i64, tpq);

    let mut tempo_map = Vec::new();
    let mut timesig_map = Vec::new();
    let mut tracks: BTreeMap<(bool, u8), Vec<Note>> = BTreeMap::new();
    let mut end_tick: u64 = 0;

    let mut seen = 0;
    while seen < ntracks && r.pos < bytes.len() {
        let id = r.bytes(4)?;
        let len = r.u32()? as usize;
        if id != b"MTrk" {
            // unknown chunk
            r.bytes(len)?;
            continue;
        }
        seen += 1;
        let start = r.pos;
        let body = r.bytes(len)?;
        let mut tr = Reader {
            buf: &bytes[..start + body.len()],
            pos: start,
        };
        let (collected, track_end) =
            parse_track(&mut tr, &mut tempo_map, &mut timesig_map, to_time)?;
        end_tick = end_tick.max(track_end);
        for (key, notes) in collected.notes {
            tracks.entry(key).or_default().extend(notes);
        }
    }
    if seen < ntracks {
        return Err(r.err(format!("expected {ntracks} tracks, found {seen}")));
    }

    let tracks = tracks
        .into_iter()
        .map(|((is_drum, program), notes)| Track {
            program,
            is_drum,
            notes,
        })
        .collect();
    Ok(Score::new(
        tracks,
        tempo_map,
        timesig_map,
        division,
        to_time(end_tick),
    )?)
}

fn parse_track(
    r: &mut Reader,
    tempo_map: &mut Vec<TempoChange>,
    timesig_map: &mut Vec<TimeSignature>,
    to_time: impl Fn(u64) -> Time,
) -> Result<(TrackNotes, u64), MidiError> {
    let mut out = TrackNotes::default();
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut programs = [0u8; 16];
    // (channel, pitch) -> FIFO of (onset tick, velocity, program)
    let mut open: BTreeMap<(u8, u8), VecDeque<(u64, u8, u8)>> = BTreeMap::new();

    let close = |out: &mut TrackNotes, ch: u8, pitch: u8, on: (u64, u8, u8), off: u64| {
        if off > on.0 {
            let key = (
                ch == DRUM_CHANNEL,
                if ch == DRUM_CHANNEL { 0 } else { on.2 },
            );
            out.notes.entry(key).or_default().push(Note::new(
                pitch,
                to_time(on.0),
                to_time(off - on.0),
                on.1,
            ));
        }
    };

    while r.pos < r.buf.len() {
        tick += r.varlen()? as u64;
        let mut status = r.u8()?;
        let first_data = if status < 0x80 {
            let Some(rs) = running else {
                r.pos -= 1;
                return Err(r.err("data byte without running status"));
            };
            let d = status;
            status = rs;
            Some(d)
        } else {
            None
        };
        match status {
            0xff => {
                running = None;
                let kind = r.u8()?;
                let len = r.varlen()? as usize;
                let data = r.bytes(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if us > 0 {
                            tempo_map.push(TempoChange {
                                time: to_time(tick),
                                us_per_quarter: us,
                            });
                        }
                    }
                    0x58 if len >= 2 => {
                        if data[1] < 8 && data[0] > 0 {
                            timesig_map.push(TimeSignature::new(
                                to_time(tick),
                                data[0],
                                1u8 << data[1],
                            ));
                        }
                    }
                    0x2f => break,
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.varlen()? as usize;
                r.bytes(len)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let ch = status & 0x0f;
                let d1 = match first_data {
                    Some(d) => d,
                    None => r.u8()?,
                };
                let kind = status & 0xf0;
                let d2 = if matches!(kind, 0xc0 | 0xd0) {
                    None
                } else {
                    Some(r.u8()?)
                };
                if d1 > 127 || d2.is_some_and(|d| d > 127) {
                    return Err(r.err("data byte above 127"));
                }
                match (kind, d2) {
                    (0x90, Some(vel)) if vel > 0 => {
                        open.entry((ch, d1)).or_default().push_back((
                            tick,
                            vel,
                            programs[ch as usize],
                        ));
                    }
                    (0x80, _) | (0x90, _) => {
                        if let Some(on) = open.get_mut(&(ch, d1)).and_then(VecDeque::pop_front) {
                            close(&mut out, ch, d1, on, tick);
                        }
                    }
                    (0xc0, _) => programs[ch as usize] = d1,
                    _ => {}
                }
            }
            _ => return Err(r.err(format!("unexpected status byte {status:#04x}"))),
        }
    }
    for ((ch, pitch), queue) in open {
        for on in queue {
            close(&mut out, ch, pitch, on, tick);
        }
    }
    Ok((out, tick))
}

fn push_varlen(out: &mut Vec<u8>, mut v: u32) {
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(stack[i] | if i > 0 { 0x80 } else { 0 });
    }
}

fn to_ticks(t: Time) -> u64 {
    let scaled = t * Time::from_integer(WRITE_TICKS_PER_QUARTER as i64);
    scaled.round().to_integer().max(0) as u64
}

fn chunk(events: &mut Vec<(u64, u8, Vec<u8>)>, end: u64) -> Vec<u8> {
    // order at equal ticks: meta/program (0) before note-off (1) before note-on (2)
    events.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut body = Vec::new();
    let mut last = 0;
    for (tick, _, bytes) in events.iter() {
        push_varlen(&mut body, (*tick - last) as u32);
        body.extend_from_slice(bytes);
        last = *tick;
    }
    push_varlen(&mut body, (end.max(last) - last) as u32);
    body.extend_from_slice(&[0xff, 0x2f, 0x00]);
    let mut out = b"MTrk".to_vec();
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend(body);
    out
}

/// Format-1 SMF at 480 ticks per quarter: a conductor track holding tempo
/// and meter, then one track per score track. Pitched tracks take channels
/// 0..15 skipping the drum channel, wrapping after 15 tracks.
pub fn write_midi(score: &Score) -> Vec<u8> {
    let end = to_ticks(score.length);
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&((score.tracks.len() + 1) as u16).to_be_bytes());
    out.extend_from_slice(&WRITE_TICKS_PER_QUARTER.to_be_bytes());

    let mut conductor = Vec::new();
    for t in &score.tempo_map {
        let us = t.us_per_quarter.to_be_bytes();
        conductor.push((
            to_ticks(t.time),
            0,
            vec![0xff, 0x51, 0x03, us[1], us[2], us[3]],
        ));
    }
    for ts in &score.timesig_map {
        let dd = ts.denominator.trailing_zeros() as u8;
        conductor.push((
            to_ticks(ts.time),
            0,
            vec![0xff, 0x58, 0x04, ts.numerator, dd, 24, 8],
        ));
    }
    out.extend(chunk(&mut conductor, end));

    let mut next_channel = 0u8;
    for track in &score.tracks {
        let ch = if track.is_drum {
            DRUM_CHANNEL
        } else {
            let c = next_channel;
            next_channel = (next_channel + 1) % 16;
            if next_channel == DRUM_CHANNEL {
                next_channel += 1;
            }
            c
        };
        let mut events = Vec::new();
        if !track.is_drum {
            events.push((0, 0, vec![0xc0 | ch, track.program]));
        }
        for n in &track.notes {
            let on = to_ticks(n.onset);
            let off = to_ticks(n.end()).max(on + 1);
            events.push((on, 2, vec![0x90 | ch, n.pitch, n.velocity]));
            events.push((off, 1, vec![0x80 | ch, n.pitch, 64]));
        }
        out.extend(chunk(&mut events, end));
    }
    out
}
