//! JSONL artifact files: a header line carrying the producing config digest,
//! then one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use cadenza_core::attributes::AttributeVector;
use cadenza_core::composer::ComposerSample;
use cadenza_core::textgen::{read_dataset, write_dataset, TextSample, DATASET_FORMAT};
use cadenza_core::tokenizer::{TokenSequence, Vocab};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CLIP_FORMAT: &str = "cadenza-clips/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub config_digest: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    /// Content hash of the clip.
    pub id: String,
    /// Source file, or `synthetic:<index>`.
    pub source: String,
    pub bar_span: (usize, usize),
    pub attributes: AttributeVector,
    /// Space-separated token names of the quantized music.
    pub tokens: String,
}

impl ClipRecord {
    pub fn sample(&self, vocab: &Vocab) -> Result<ComposerSample> {
        let ids = vocab
            .from_names(&self.tokens)
            .with_context(|| format!("clip {}", self.id))?;
        Ok(ComposerSample {
            attributes: self.attributes.clone(),
            music: TokenSequence::music(ids),
        })
    }
}

/// Compares an artifact's digest with the current configuration's.
pub fn check_digest(what: &str, found: &str, current: &str) {
    if found != current {
        log::warn!(
            "{what} was produced under config digest {}, current config is {}",
            short(found),
            short(current)
        );
    }
}

pub fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

pub fn write_clips(path: &Path, digest: &str, clips: &[ClipRecord]) -> Result<()> {
    let mut w = create(path)?;
    let header = Header {
        format: CLIP_FORMAT.into(),
        config_digest: digest.into(),
        count: clips.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for c in clips {
        writeln!(w, "{}", serde_json::to_string(c)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_clips(path: &Path) -> Result<(Header, Vec<ClipRecord>)> {
    let mut lines = open(path)?.lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    let header: Header =
        serde_json::from_str(&first).with_context(|| format!("{}: header", path.display()))?;
    if header.format != CLIP_FORMAT {
        bail!(
            "{}: expected a {CLIP_FORMAT} file, found `{}`",
            path.display(),
            header.format
        );
    }
    let mut clips = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        clips.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}: line {}", path.display(), i + 2))?,
        );
    }
    Ok((header, clips))
}

pub fn write_text(path: &Path, digest: &str, samples: &[TextSample]) -> Result<()> {
    let mut w = create(path)?;
    write_dataset(&mut w, digest, samples)?;
    w.flush()?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<(Header, Vec<TextSample>)> {
    let (h, samples) =
        read_dataset(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    let header = Header {
        format: h.format,
        config_digest: h.config_digest,
        count: h.count,
    };
    Ok((header, samples))
}

/// Attribute vectors from any of: a clip dataset, a text dataset, or plain
/// JSONL with one `{attribute: value}` object per line.
pub fn read_vectors(path: &Path) -> Result<Vec<AttributeVector>> {
    let mut lines = open(path)?.lines().peekable();
    if let Some(Ok(first)) = lines.peek() {
        if let Ok(h) = serde_json::from_str::<Header>(first) {
            return match h.format.as_str() {
                CLIP_FORMAT => Ok(read_clips(path)?
                    .1
                    .into_iter()
                    .map(|c| c.attributes)
                    .collect()),
                DATASET_FORMAT => Ok(read_text(path)?.1.into_iter().map(|s| s.values).collect()),
                other => bail!("{}: unknown format `{other}`", path.display()),
            };
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}: line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

/// Seeded split of the clip dataset into `(train, held_out)`. The held-out
/// part never reaches composer training.
pub fn hold_out(
    clips: &[ClipRecord],
    count: usize,
    seed: u64,
) -> (Vec<ClipRecord>, Vec<ClipRecord>) {
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x04e1_d0a7));
    let n = count.min(clips.len().saturating_sub(1));
    let held = order[..n].iter().map(|&i| clips[i].clone()).collect();
    let train = order[n..].iter().map(|&i| clips[i].clone()).collect();
    (train, held)
}
