//! Attribute-conditioned decoder over music event tokens.

mod sample;

use std::path::Path;

use cadenza_tensor::{
    checkpoint, Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, TensorError, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{mask_random, schema, AttributeVector};
use crate::nn::{Block, BlockShape, LayerNorm, Linear};
use crate::tokenizer::{assemble_training_sequence, TokenSequence, Vocab, VOCAB_VERSION};

pub use sample::{
    generate, Generation, GenerationStats, SamplerConfig, StopReason, MAX_BAR_BUDGET,
};

#[derive(Debug, Error)]
pub enum ComposerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence needs {needed} positions but the model has {max}")]
    TooLong { needed: usize, max: usize },
    #[error("invalid training sequence: {0}")]
    Sequence(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, step {step}; lower the learning rate or enable clipping")]
    Diverged { epoch: usize, step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("sampler: {0}")]
    Sampler(String),
}

pub type Result<T> = std::result::Result<T, ComposerError>;

/// How the attribute vector reaches the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// One prefix token per attribute ahead of the separator.
    Prefix,
    /// Summed attribute-value embeddings added to every token embedding.
    Embedding,
    /// Summed attribute-value embeddings shift every layer norm's scale and bias.
    CondLayernorm,
}

impl std::str::FromStr for CondMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "prefix" => Ok(Self::Prefix),
            "embedding" => Ok(Self::Embedding),
            "cond_layernorm" => Ok(Self::CondLayernorm),
            other => Err(format!(
                "unknown conditioning mode `{other}` (prefix, embedding, cond_layernorm)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposerConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f32,
    /// Positions available to the separator and music tokens.
    pub max_len: usize,
    pub mode: CondMode,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            dropout: 0.1,
            max_len: 1024,
            mode: CondMode::Prefix,
        }
    }
}

/// Model input for one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prepared {
    pub ids: Vec<usize>,
    /// Leading ids that get no position embedding.
    pub prefix_len: usize,
    /// Next-token target per input row.
    pub targets: Vec<Option<usize>>,
    /// Side input for the embedding modes.
    pub cond: Option<AttributeVector>,
}

#[derive(Clone, Debug)]
pub struct ComposerModel {
    pub config: ComposerConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
    attr_emb: Option<ParamId>,
    /// `(scale, shift)` generators per layer norm, in call order.
    cond_ln: Vec<(Linear, Linear)>,
    attr_offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    vocab_version: u32,
    config: ComposerConfig,
    config_digest: String,
}

const META_KIND: &str = "cadenza-attr2music/1";

impl ComposerModel {
    pub fn new(config: ComposerConfig, seed: u64) -> Result<Self> {
        let vocab = Vocab::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tok_emb = store.add_normal("tok_emb", &[vocab.len(), d], 0.1, &mut rng)?;
        let pos_emb = store.add(
            "pos_emb",
            crate::understanding::sinusoid_table(config.max_len.max(1), d, 0.2),
        )?;
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
        let out = Linear::new(
            &mut store,
            "out",
            d,
            vocab.len(),
            (1.0 / d as f32).sqrt(),
            &mut rng,
        )?;
        let mut attr_offsets = Vec::with_capacity(schema().len());
        let mut total = 0;
        for a in &schema().attributes {
            attr_offsets.push(total);
            total += a.cardinality();
        }
        let attr_emb = match config.mode {
            CondMode::Prefix => None,
            _ => Some(store.add_normal("attr_emb", &[total, d], 0.1, &mut rng)?),
        };
        let mut cond_ln = Vec::new();
        if config.mode == CondMode::CondLayernorm {
            for i in 0..2 * config.layers + 1 {
                cond_ln.push((
                    Linear::zeros(&mut store, &format!("cond{i}.scale"), d, d)?,
                    Linear::zeros(&mut store, &format!("cond{i}.shift"), d, d)?,
                ));
            }
        }
        Ok(Self {
            config,
            vocab,
            store,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            out,
            attr_emb,
            cond_ln,
            attr_offsets,
        })
    }

    pub fn mode(&self) -> CondMode {
        self.config.mode
    }

    fn attr_rows(&self, v: &AttributeVector) -> Vec<usize> {
        v.values()
            .iter()
            .zip(&self.attr_offsets)
            .map(|(&k, &o)| o + k as usize)
            .collect()
    }

    /// Builds model input from an attribute vector and a bare music sequence
    /// (no separator, prefix or EOS). The vector is used as given.
    pub fn prepare(&self, v: &AttributeVector, music: &TokenSequence) -> Result<Prepared> {
        let seq = match self.config.mode {
            // keep_prob 1 leaves the vector untouched.
            CondMode::Prefix => assemble_training_sequence(
                v,
                music,
                1.0,
                &mut ChaCha8Rng::seed_from_u64(0),
                &self.vocab,
            )
            .map_err(|e| ComposerError::Sequence(e.to_string()))?,
            _ => {
                if let Some(i) = music
                    .ids
                    .iter()
                    .position(|&id| !self.vocab.is_music(id) || id == self.vocab.eos())
                {
                    return Err(ComposerError::Sequence(format!(
                        "non-music id at index {i}"
                    )));
                }
                let mut ids = vec![self.vocab.sep()];
                ids.extend_from_slice(&music.ids);
                ids.push(self.vocab.eos());
                TokenSequence {
                    ids,
                    boundary: Some(0),
                }
            }
        };
        self.prepare_sequence(&seq, v)
    }

    /// Input and targets from a full sequence `prefix? SEP music EOS`.
    pub fn prepare_sequence(&self, seq: &TokenSequence, v: &AttributeVector) -> Result<Prepared> {
        let sep = seq
            .boundary
            .ok_or_else(|| ComposerError::Sequence("missing separator".into()))?;
        let n = seq.ids.len();
        if n < sep + 2 {
            return Err(ComposerError::Sequence(
                "nothing follows the separator".into(),
            ));
        }
        let ids = seq.ids[..n - 1].to_vec();
        let needed = ids.len() - sep;
        if needed > self.config.max_len {
            return Err(ComposerError::TooLong {
                needed,
                max: self.config.max_len,
            });
        }
        let targets = (0..ids.len())
            .map(|i| (i >= sep).then(|| seq.ids[i + 1]))
            .collect();
        Ok(Prepared {
            ids,
            prefix_len: sep,
            targets,
            cond: (self.config.mode != CondMode::Prefix).then(|| v.clone()),
        })
    }

    /// Next-token logits `[T, vocab]` for every input row.
    pub fn logits(&self, g: &mut Graph, p: &Prepared) -> Result<Var> {
        let d = self.config.d_model;
        let positioned = p.ids.len() - p.prefix_len;
        if positioned > self.config.max_len {
            return Err(ComposerError::TooLong {
                needed: positioned,
                max: self.config.max_len,
            });
        }
        let table = g.param(self.tok_emb);
        let mut x = g.embedding(table, &p.ids)?;
        if positioned > 0 {
            let pt = g.param(self.pos_emb);
            let mut pos = g.embedding(pt, &(0..positioned).collect::<Vec<_>>())?;
            if p.prefix_len > 0 {
                let zeros = g.input(Tensor::zeros(&[p.prefix_len, d]));
                pos = g.concat_rows(&[zeros, pos])?;
            }
            x = g.add(x, pos)?;
        }
        let cond = match (self.attr_emb, &p.cond) {
            (Some(table), Some(v)) => {
                let t = g.param(table);
                let rows = g.embedding(t, &self.attr_rows(v))?;
                Some(g.sum_rows(rows))
            }
            (Some(_), None) => {
                return Err(ComposerError::Sequence(
                    "this mode needs an attribute vector".into(),
                ))
            }
            _ => None,
        };
        if let (CondMode::Embedding, Some(c)) = (self.config.mode, cond) {
            x = g.add_row(x, c)?;
        }
        let mut shifts = Vec::with_capacity(self.cond_ln.len());
        if let Some(c) = cond {
            for (s, b) in &self.cond_ln {
                shifts.push(Some((s.forward(g, c)?, b.forward(g, c)?)));
            }
        }
        let shift = |i: usize| shifts.get(i).copied().flatten();
        x = g.dropout(x, self.config.dropout);
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(
                g,
                x,
                true,
                self.config.dropout,
                [shift(2 * i), shift(2 * i + 1)],
            )?;
        }
        let x = self.ln_f.forward(g, x, shift(2 * self.blocks.len()))?;
        Ok(self.out.forward(g, x)?)
    }

    /// Mean next-token cross-entropy over the music targets.
    pub fn loss_graph(&self, g: &mut Graph, p: &Prepared) -> Result<Var> {
        let logits = self.logits(g, p)?;
        Ok(g.cross_entropy(logits, &p.targets)?)
    }

    /// Logits as plain rows, without dropout.
    pub fn forward(&self, p: &Prepared) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new(&self.store, false, 0);
        let l = self.logits(&mut g, p)?;
        let t = g.value(l);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    /// Mean per-sequence loss with each vector passed through `condition`.
    pub fn mean_loss(
        &self,
        samples: &[ComposerSample],
        condition: impl Fn(&AttributeVector) -> AttributeVector,
    ) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let p = self.prepare(&condition(&s.attributes), &s.music)?;
            let mut g = Graph::new(&self.store, false, 0);
            let l = self.loss_graph(&mut g, &p)?;
            total += g.value(l).item() as f64;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    pub fn save(&self, path: &Path, config_digest: &str) -> Result<()> {
        let meta = Meta {
            kind: META_KIND.into(),
            vocab_version: VOCAB_VERSION,
            config: self.config.clone(),
            config_digest: config_digest.into(),
        };
        let meta =
            serde_json::to_string(&meta).map_err(|e| ComposerError::Checkpoint(e.to_string()))?;
        checkpoint::save(path, &meta, &self.store, None)?;
        Ok(())
    }

    /// Loads a checkpoint; returns the model and the digest it was saved with.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let ck = checkpoint::load(path)?;
        let meta: Meta =
            serde_json::from_str(&ck.meta).map_err(|e| ComposerError::Checkpoint(e.to_string()))?;
        if meta.kind != META_KIND {
            return Err(ComposerError::Checkpoint(format!(
                "expected a {META_KIND} checkpoint, found {}",
                meta.kind
            )));
        }
        if meta.vocab_version != VOCAB_VERSION {
            return Err(ComposerError::Checkpoint(format!(
                "checkpoint uses vocabulary version {}, this build has {VOCAB_VERSION}",
                meta.vocab_version
            )));
        }
        let mut model = Self::new(meta.config, 0)?;
        model.store.load_values(&ck.params)?;
        Ok((model, meta.config_digest))
    }
}

/// One training pair: the clip's attributes and its bare music tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComposerSample {
    pub attributes: AttributeVector,
    pub music: TokenSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: u64,
    pub clip_norm: Option<f32>,
    /// Chance that each attribute keeps its value when masks are drawn.
    pub keep_prob: f64,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for ComposerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 200,
            clip_norm: Some(1.0),
            keep_prob: 0.5,
            valid_fraction: 1.0 / 9.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposerEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug)]
pub struct ComposerOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: ComposerModel,
    pub history: Vec<ComposerEpoch>,
    pub best_epoch: usize,
    pub skipped_too_long: usize,
    pub valid: Vec<ComposerSample>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Masked attribute vector and the matching model input.
fn masked_input(
    model: &ComposerModel,
    s: &ComposerSample,
    keep_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Prepared> {
    match model.config.mode {
        CondMode::Prefix => {
            let seq =
                assemble_training_sequence(&s.attributes, &s.music, keep_prob, rng, &model.vocab)
                    .map_err(|e| ComposerError::Sequence(e.to_string()))?;
            model.prepare_sequence(&seq, &s.attributes)
        }
        _ => model.prepare(&mask_random(&s.attributes, keep_prob, rng), &s.music),
    }
}

pub fn train(
    samples: &[ComposerSample],
    model_cfg: &ComposerConfig,
    cfg: &ComposerTrainConfig,
) -> Result<ComposerOutcome> {
    let mut model = ComposerModel::new(model_cfg.clone(), cfg.seed)?;
    let fits = |s: &ComposerSample| s.music.len() < model_cfg.max_len;
    let usable: Vec<ComposerSample> = samples.iter().filter(|s| fits(s)).cloned().collect();
    let skipped_too_long = samples.len() - usable.len();
    if skipped_too_long > 0 {
        log::warn!(
            "skipping {skipped_too_long} sequences longer than the model's {} positions",
            model_cfg.max_len
        );
    }
    if usable.is_empty() {
        return Err(ComposerError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5911));
    let n_valid =
        (((usable.len() as f64) * cfg.valid_fraction).round() as usize).min(usable.len() - 1);
    let valid: Vec<ComposerSample> = order[..n_valid]
        .iter()
        .map(|&i| usable[i].clone())
        .collect();
    let train_set: Vec<ComposerSample> = order[n_valid..]
        .iter()
        .map(|&i| usable[i].clone())
        .collect();
    // Validation masks are drawn once so epochs compare like with like.
    let mut vrng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xfeed, 0));
    let valid_inputs = valid
        .iter()
        .map(|s| masked_input(&model, s, cfg.keep_prob, &mut vrng))
        .collect::<Result<Vec<_>>>()?;

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
    let mut idx: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 1));
        let inputs = train_set
            .iter()
            .map(|s| masked_input(&model, s, cfg.keep_prob, &mut mask_rng))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            model.store.zero_grad();
            let step = adam.state.step;
            for (j, &i) in chunk.iter().enumerate() {
                let mut g = Graph::new(&model.store, true, mix(cfg.seed, step, j as u64 + 2));
                let l = model.loss_graph(&mut g, &inputs[i])?;
                let v = g.value(l).item() as f64;
                if !v.is_finite() {
                    return Err(ComposerError::Diverged { epoch, step });
                }
                total += v;
                let grads = g.backward(l);
                model.store.accumulate(&grads, 1.0 / chunk.len() as f32);
            }
            adam.step(&mut model.store);
        }
        let mut vl = 0.0;
        for p in &valid_inputs {
            let mut g = Graph::new(&model.store, false, 0);
            let l = model.loss_graph(&mut g, p)?;
            vl += g.value(l).item() as f64;
        }
        let valid_loss = if valid_inputs.is_empty() {
            f64::NAN
        } else {
            vl / valid_inputs.len() as f64
        };
        let train_loss = total / train_set.len() as f64;
        log::info!(
            "attr2music epoch {epoch}: train loss {train_loss:.4}, valid loss {valid_loss:.4}"
        );
        history.push(ComposerEpoch {
            epoch,
            train_loss,
            valid_loss,
        });
        let score = if valid_loss.is_nan() {
            train_loss
        } else {
            valid_loss
        };
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.store.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            model.store = store;
            e
        }
        None => 0,
    };
    Ok(ComposerOutcome {
        model,
        history,
        best_epoch,
        skipped_too_long,
        valid,
    })
}
