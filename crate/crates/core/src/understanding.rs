//! Text-to-attribute encoder: one classification token and softmax head per
//! attribute on top of a small bidirectional transformer.

use std::collections::HashMap;
use std::path::Path;

use cadenza_tensor::{
    checkpoint, softmax_in_place, Adam, AdamConfig, Graph, ParamStore, Tensor, TensorError, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{schema, AttributeVector};
use crate::evaluation::asa;
use crate::nn::{Block, BlockShape, LayerNorm, Linear};
use crate::textgen::TextSample;

pub const MAX_TEXT_LEN: usize = 256;
pub const PAD: usize = 0;
pub const UNK: usize = 1;
const CLS_BASE: usize = 2;
const TRIM: &[char] = &[
    '.', ',', ';', ':', '!', '?', '"', '(', ')', '[', ']', '{', '}',
];

#[derive(Debug, Error)]
pub enum UnderstandingError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{texts} texts but {golds} gold vectors")]
    BatchMismatch { texts: usize, golds: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, step {step}; lower the learning rate or enable clipping")]
    Diverged { epoch: usize, step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, UnderstandingError>;

/// Lowercased words with surrounding punctuation stripped.
pub fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(TRIM).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Word vocabulary. Ids: PAD, UNK, one classification token per
/// attribute, then words in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct TextVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
}

impl From<VocabFile> for TextVocab {
    fn from(f: VocabFile) -> Self {
        Self::from_words(f.words)
    }
}

impl From<TextVocab> for VocabFile {
    fn from(v: TextVocab) -> Self {
        VocabFile { words: v.words }
    }
}

impl TextVocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(split_words).collect();
        words.sort_unstable();
        words.dedup();
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let base = CLS_BASE + schema().len();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), base + i))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        CLS_BASE + schema().len() + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cls(&self, attribute: usize) -> usize {
        CLS_BASE + attribute
    }

    pub fn word_id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Word ids for `text`, unknown words as UNK, at most `max_len` ids.
pub fn tokenize_text(text: &str, vocab: &TextVocab, max_len: usize) -> Vec<usize> {
    split_words(text)
        .iter()
        .take(max_len)
        .map(|w| vocab.word_id(w))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// One classification token per attribute.
    Multi,
    /// Every head reads the first classification token.
    One,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnderstandingConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f32,
    pub max_len: usize,
    pub mode: HeadMode,
}

impl Default for UnderstandingConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            dropout: 0.0,
            max_len: MAX_TEXT_LEN,
            mode: HeadMode::Multi,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UnderstandingModel {
    pub config: UnderstandingConfig,
    pub vocab: TextVocab,
    pub store: ParamStore,
    tok_emb: cadenza_tensor::ParamId,
    pos_emb: cadenza_tensor::ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    heads: Vec<Linear>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: UnderstandingConfig,
    vocab: TextVocab,
    config_digest: String,
}

const META_KIND: &str = "cadenza-text2attr/1";

impl UnderstandingModel {
    pub fn new(config: UnderstandingConfig, vocab: TextVocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tok_emb = store.add_normal("tok_emb", &[vocab.len(), d], 0.1, &mut rng)?;
        let pos_emb = store.add("pos_emb", sinusoid_table(config.max_len.max(1), d, 0.2))?;
        let shape = BlockShape {
            d_model: d,
            heads: config.heads,
            ff_mult: config.ff_mult,
        };
        let blocks = (0..config.layers)
            .map(|i| {
                Block::new(
                    &mut store,
                    &format!("block{i}"),
                    shape,
                    config.layers,
                    &mut rng,
                )
            })
            .collect::<cadenza_tensor::Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut store, "ln_f", d)?;
        let std = (1.0 / d as f32).sqrt();
        let heads = schema()
            .attributes
            .iter()
            .enumerate()
            .map(|(i, a)| {
                Linear::new(
                    &mut store,
                    &format!("head{i}"),
                    d,
                    a.cardinality(),
                    std,
                    &mut rng,
                )
            })
            .collect::<cadenza_tensor::Result<Vec<_>>>()?;
        Ok(Self {
            config,
            vocab,
            store,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            heads,
        })
    }

    fn cls_count(&self) -> usize {
        match self.config.mode {
            HeadMode::Multi => schema().len(),
            HeadMode::One => 1,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize_text(text, &self.vocab, self.config.max_len)
    }

    /// Per-attribute logits `[1, cardinality]` for one tokenized text.
    pub fn logits(&self, g: &mut Graph, ids: &[usize]) -> Result<Vec<Var>> {
        let ids = &ids[..ids.len().min(self.config.max_len)];
        let n_cls = self.cls_count();
        let d = self.config.d_model;
        let mut all: Vec<usize> = (0..n_cls).map(|i| self.vocab.cls(i)).collect();
        all.extend_from_slice(ids);
        let table = g.param(self.tok_emb);
        let mut x = g.embedding(table, &all)?;
        if !ids.is_empty() {
            // Classification rows get a zero position vector.
            let pos_table = g.param(self.pos_emb);
            let pos = g.embedding(pos_table, &(0..ids.len()).collect::<Vec<_>>())?;
            let zeros = g.input(Tensor::zeros(&[n_cls, d]));
            let pos = g.concat_rows(&[zeros, pos])?;
            x = g.add(x, pos)?;
        }
        x = g.dropout(x, self.config.dropout);
        for b in &self.blocks {
            x = b.forward(g, x, false, self.config.dropout, [None, None])?;
        }
        let x = self.ln_f.forward(g, x, None)?;
        let mut out = Vec::with_capacity(self.heads.len());
        let shared = match self.config.mode {
            HeadMode::One => Some(g.select_rows(x, &[0])?),
            HeadMode::Multi => None,
        };
        for (i, head) in self.heads.iter().enumerate() {
            let h = match shared {
                Some(h) => h,
                None => g.select_rows(x, &[i])?,
            };
            out.push(head.forward(g, h)?);
        }
        Ok(out)
    }

    /// Sum over heads of the cross-entropy against `gold`.
    pub fn loss_graph(&self, g: &mut Graph, ids: &[usize], gold: &AttributeVector) -> Result<Var> {
        let logits = self.logits(g, ids)?;
        let mut total: Option<Var> = None;
        for (i, l) in logits.into_iter().enumerate() {
            let ce = g.cross_entropy(l, &[Some(gold.get(i) as usize)])?;
            total = Some(match total {
                Some(t) => g.add(t, ce)?,
                None => ce,
            });
        }
        Ok(total.expect("schema is not empty"))
    }

    /// Per-head probability vectors for one tokenized text.
    pub fn probabilities(&self, ids: &[usize]) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new(&self.store, false, 0);
        let logits = self.logits(&mut g, ids)?;
        Ok(logits
            .into_iter()
            .map(|l| {
                let mut p = g.value(l).data().to_vec();
                softmax_in_place(&mut p);
                p
            })
            .collect())
    }

    pub fn forward(&self, batch: &[Vec<usize>]) -> Result<Vec<Vec<Vec<f32>>>> {
        batch.iter().map(|ids| self.probabilities(ids)).collect()
    }

    /// `sum_i mean_batch CE_i`, evaluated without dropout.
    pub fn loss(&self, batch: &[Vec<usize>], golds: &[AttributeVector]) -> Result<f32> {
        if batch.len() != golds.len() {
            return Err(UnderstandingError::BatchMismatch {
                texts: batch.len(),
                golds: golds.len(),
            });
        }
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0f64;
        for (ids, gold) in batch.iter().zip(golds) {
            let mut g = Graph::new(&self.store, false, 0);
            let l = self.loss_graph(&mut g, ids, gold)?;
            total += g.value(l).item() as f64;
        }
        Ok((total / batch.len() as f64) as f32)
    }

    pub fn predict_ids(&self, ids: &[usize]) -> Result<AttributeVector> {
        let probs = self.probabilities(ids)?;
        let values = probs.iter().map(|p| argmax(p) as u8).collect();
        Ok(AttributeVector::from_values(values).expect("head widths match the schema"))
    }

    pub fn predict(&self, text: &str) -> Result<AttributeVector> {
        self.predict_ids(&self.tokenize(text))
    }

    pub fn save(&self, path: &Path, config_digest: &str) -> Result<()> {
        let meta = Meta {
            kind: META_KIND.into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            config_digest: config_digest.into(),
        };
        let meta = serde_json::to_string(&meta)
            .map_err(|e| UnderstandingError::Checkpoint(e.to_string()))?;
        checkpoint::save(path, &meta, &self.store, None)?;
        Ok(())
    }

    /// Loads a checkpoint; returns the model and the digest it was saved with.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let ck = checkpoint::load(path)?;
        let meta: Meta = serde_json::from_str(&ck.meta)
            .map_err(|e| UnderstandingError::Checkpoint(e.to_string()))?;
        if meta.kind != META_KIND {
            return Err(UnderstandingError::Checkpoint(format!(
                "expected a {META_KIND} checkpoint, found {}",
                meta.kind
            )));
        }
        let mut model = Self::new(meta.config, meta.vocab, 0)?;
        model.store.load_values(&ck.params)?;
        Ok((model, meta.config_digest))
    }
}

/// Sinusoidal table used to initialise learned positions; relative offsets
/// are then a linear map away from the start.
pub fn sinusoid_table(rows: usize, d: usize, amplitude: f32) -> Tensor {
    let mut data = vec![0.0f32; rows * d];
    for p in 0..rows {
        for i in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            let a = p as f64 * freq;
            data[p * d + 2 * i] = amplitude * a.sin() as f32;
            data[p * d + 2 * i + 1] = amplitude * a.cos() as f32;
        }
    }
    Tensor::new(vec![rows, d], data).expect("sized")
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: u64,
    pub clip_norm: Option<f32>,
    /// Share of samples held out for validation.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            lr: 2e-3,
            warmup_steps: 300,
            clip_norm: Some(1.0),
            valid_fraction: 1.0 / 9.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_asa: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation ASA.
    pub model: UnderstandingModel,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub valid: Vec<TextSample>,
}

/// Deterministic train/valid split.
pub fn split_dataset(
    samples: &[TextSample],
    valid_fraction: f64,
    seed: u64,
) -> (Vec<TextSample>, Vec<TextSample>) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911));
    let n_valid = ((samples.len() as f64) * valid_fraction).round() as usize;
    let n_valid = n_valid.min(samples.len().saturating_sub(1));
    let valid = order[..n_valid]
        .iter()
        .map(|&i| samples[i].clone())
        .collect();
    let train = order[n_valid..]
        .iter()
        .map(|&i| samples[i].clone())
        .collect();
    (train, valid)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn train(
    samples: &[TextSample],
    model_cfg: &UnderstandingConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(UnderstandingError::EmptyDataset);
    }
    let (train_set, valid) = split_dataset(samples, cfg.valid_fraction, cfg.seed);
    let vocab = TextVocab::build(train_set.iter().map(|s| s.text.as_str()));
    let mut model = UnderstandingModel::new(model_cfg.clone(), vocab, cfg.seed)?;
    let train_ids: Vec<Vec<usize>> = train_set.iter().map(|s| model.tokenize(&s.text)).collect();
    let valid_ids: Vec<Vec<usize>> = valid.iter().map(|s| model.tokenize(&s.text)).collect();
    let valid_gold: Vec<AttributeVector> = valid.iter().map(|s| s.values.clone()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            warmup_steps: cfg.warmup_steps,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(batch) {
            model.store.zero_grad();
            let step = adam.state.step;
            for (j, &i) in chunk.iter().enumerate() {
                let mut g = Graph::new(&model.store, true, mix(cfg.seed, step, j as u64));
                let l = model.loss_graph(&mut g, &train_ids[i], &train_set[i].values)?;
                let v = g.value(l).item() as f64;
                if !v.is_finite() {
                    return Err(UnderstandingError::Diverged { epoch, step });
                }
                total += v;
                let grads = g.backward(l);
                model.store.accumulate(&grads, 1.0 / chunk.len() as f32);
            }
            adam.step(&mut model.store);
        }
        let valid_loss = if valid.is_empty() {
            f64::NAN
        } else {
            model.loss(&valid_ids, &valid_gold)? as f64
        };
        let preds = valid_ids
            .iter()
            .map(|ids| model.predict_ids(ids))
            .collect::<Result<Vec<_>>>()?;
        let valid_asa = asa(&preds, &valid_gold).unwrap_or(0.0);
        log::info!(
            "text2attr epoch {epoch}: train loss {:.4}, valid loss {valid_loss:.4}, valid ASA {valid_asa:.4}",
            total / train_set.len() as f64
        );
        history.push(EpochMetrics {
            epoch,
            train_loss: total / train_set.len() as f64,
            valid_loss,
            valid_asa,
        });
        if best.as_ref().is_none_or(|(a, _, _)| valid_asa > *a) {
            best = Some((valid_asa, epoch, model.store.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => 0,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UnderstandingConfig {
        UnderstandingConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            dropout: 0.0,
            max_len: 32,
            mode: HeadMode::Multi,
        }
    }

    #[test]
    fn words_and_ids() {
        assert_eq!(
            split_words("The music is in 4/4."),
            ["the", "music", "is", "in", "4/4"]
        );
        let v = TextVocab::build(["The music is in 4/4."]);
        let ids = tokenize_text("the MUSIC zither", &v, 256);
        assert_eq!(ids[2], UNK);
        assert!(ids[0] >= 2 + schema().len());
        let long = "word ".repeat(300);
        assert_eq!(tokenize_text(&long, &v, 256).len(), 256);
        assert!((0..schema().len()).all(|i| v.cls(i) < 2 + schema().len()));
    }

    #[test]
    fn distributions_are_normalized() {
        let v = TextVocab::build(["a b c"]);
        for mode in [HeadMode::Multi, HeadMode::One] {
            let m = UnderstandingModel::new(UnderstandingConfig { mode, ..tiny() }, v.clone(), 3)
                .unwrap();
            for ids in [vec![], m.tokenize("a b c d")] {
                let p = m.probabilities(&ids).unwrap();
                assert_eq!(p.len(), schema().len());
                for (i, row) in p.iter().enumerate() {
                    assert_eq!(row.len(), schema().get(i).cardinality());
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                }
            }
            let empty = m.predict("").unwrap();
            assert_eq!(empty.len(), schema().len());
        }
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        let v = TextVocab::build(["x y z"]);
        let m = UnderstandingModel::new(tiny(), v, 5).unwrap();
        let ids = m.tokenize("x y");
        let mut gold = AttributeVector::all_na();
        gold.set(crate::attributes::slot::KEY, 0);
        let p = m.probabilities(&ids).unwrap();
        let oracle: f64 = p
            .iter()
            .enumerate()
            .map(|(i, row)| -(row[gold.get(i) as usize] as f64).ln())
            .sum();
        let l = m.loss(&[ids], &[gold]).unwrap() as f64;
        assert!((l - oracle).abs() < 1e-3 * oracle, "{l} vs {oracle}");
        assert!(matches!(
            m.loss(&[], &[AttributeVector::all_na()]),
            Err(UnderstandingError::BatchMismatch { .. })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
