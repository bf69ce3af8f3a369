//! Incremental decoding with cached keys and values, grammar masking and
//! nucleus sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ComposerError, ComposerModel, CondMode, Result};
use crate::attributes::AttributeVector;
use crate::nn::{gelu, layer_norm_row, Block, LayerNorm};
use crate::tokenizer::{encode_prefix, Grammar, TokenSequence};

pub const MAX_BAR_BUDGET: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f32,
    /// Nucleus mass in `(0, 1]`.
    pub top_p: f32,
    pub max_new_tokens: usize,
    pub bar_budget: usize,
    /// Resampling attempts before a grammatical fallback is forced.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.9,
            max_new_tokens: 1023,
            bar_budget: MAX_BAR_BUDGET,
            max_retries: 8,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ComposerError::Sampler(
                "temperature must be positive".into(),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ComposerError::Sampler("top_p must lie in (0, 1]".into()));
        }
        if self.bar_budget == 0 || self.bar_budget > MAX_BAR_BUDGET {
            return Err(ComposerError::Sampler(format!(
                "bar budget must lie in 1..={MAX_BAR_BUDGET}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxTokens,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub tokens: usize,
    /// Draws that landed outside the grammar and were redrawn.
    pub retries: usize,
    /// Steps resolved by taking the likeliest grammatical token.
    pub fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Bare music ids, ending in EOS when the model stopped by itself.
    pub music: TokenSequence,
    pub stop: StopReason,
    pub stats: GenerationStats,
}

/// Decoder state for one sequence.
pub(crate) struct Cache<'m> {
    model: &'m ComposerModel,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    add: Option<Vec<f32>>,
    shifts: Vec<(Vec<f32>, Vec<f32>)>,
    positioned: usize,
}

impl<'m> Cache<'m> {
    pub(crate) fn new(model: &'m ComposerModel, v: &AttributeVector) -> Self {
        let d = model.config.d_model;
        let cond = model.attr_emb.map(|table| {
            let t = model.store.value(table);
            let mut c = vec![0.0f32; d];
            for r in model.attr_rows(v) {
                for (a, b) in c.iter_mut().zip(t.row(r)) {
                    *a += b;
                }
            }
            c
        });
        let shifts = match &cond {
            Some(c) => model
                .cond_ln
                .iter()
                .map(|(s, b)| {
                    let (mut ds, mut db) = (vec![0.0; d], vec![0.0; d]);
                    s.apply(&model.store, c, &mut ds);
                    b.apply(&model.store, c, &mut db);
                    (ds, db)
                })
                .collect(),
            None => Vec::new(),
        };
        let add = if model.config.mode == CondMode::Embedding {
            cond
        } else {
            None
        };
        Self {
            model,
            keys: vec![Vec::new(); model.blocks.len()],
            values: vec![Vec::new(); model.blocks.len()],
            add,
            shifts,
            positioned: 0,
        }
    }

    fn norm(&self, ln: &LayerNorm, index: usize, x: &[f32], out: &mut [f32]) {
        let st = &self.model.store;
        let mut gamma = st.value(ln.gamma).data().to_vec();
        let mut beta = st.value(ln.beta).data().to_vec();
        if let Some((ds, db)) = self.shifts.get(index) {
            gamma.iter_mut().zip(ds).for_each(|(g, s)| *g += s);
            beta.iter_mut().zip(db).for_each(|(b, s)| *b += s);
        }
        layer_norm_row(x, &gamma, &beta, out);
    }

    fn block(&mut self, i: usize, b: &Block, x: &mut [f32]) {
        let st = &self.model.store;
        let d = x.len();
        let mut h = vec![0.0; d];
        self.norm(&b.ln1, 2 * i, x, &mut h);
        let (mut q, mut k, mut v) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        b.q.apply(st, &h, &mut q);
        b.k.apply(st, &h, &mut k);
        b.v.apply(st, &h, &mut v);
        self.keys[i].extend_from_slice(&k);
        self.values[i].extend_from_slice(&v);
        let t = self.keys[i].len() / d;
        let dh = d / b.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut att = vec![0.0f32; d];
        let mut w = vec![0.0f32; t];
        for hd in 0..b.heads {
            let cols = hd * dh..(hd + 1) * dh;
            for (j, wj) in w.iter_mut().enumerate() {
                let kr = &self.keys[i][j * d..(j + 1) * d];
                *wj = q[cols.clone()]
                    .iter()
                    .zip(&kr[cols.clone()])
                    .map(|(a, b)| a * b)
                    .sum::<f32>()
                    * scale;
            }
            cadenza_tensor::softmax_in_place(&mut w);
            for (j, &wj) in w.iter().enumerate() {
                let vr = &self.values[i][j * d..(j + 1) * d];
                for c in cols.clone() {
                    att[c] += wj * vr[c];
                }
            }
        }
        let mut o = vec![0.0; d];
        b.o.apply(st, &att, &mut o);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        self.norm(&b.ln2, 2 * i + 1, x, &mut h);
        let mut f = vec![0.0; b.ff1.dout];
        b.ff1.apply(st, &h, &mut f);
        f.iter_mut().for_each(|v| *v = gelu(*v));
        b.ff2.apply(st, &f, &mut o);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
    }

    /// Feeds one token and returns the next-token logits.
    pub(crate) fn step(&mut self, id: usize, positioned: bool) -> Result<Vec<f32>> {
        let m = self.model;
        let st = &m.store;
        let mut x = st.value(m.tok_emb).row(id).to_vec();
        if positioned {
            if self.positioned >= m.config.max_len {
                return Err(ComposerError::TooLong {
                    needed: self.positioned + 1,
                    max: m.config.max_len,
                });
            }
            let p = st.value(m.pos_emb).row(self.positioned);
            x.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            self.positioned += 1;
        }
        if let Some(c) = &self.add {
            x.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
        for (i, b) in m.blocks.iter().enumerate() {
            self.block(i, b, &mut x);
        }
        let mut h = vec![0.0; x.len()];
        self.norm(&m.ln_f, 2 * m.blocks.len(), &x, &mut h);
        let mut logits = vec![0.0; m.vocab.len()];
        m.out.apply(st, &h, &mut logits);
        Ok(logits)
    }

    pub(crate) fn positioned(&self) -> usize {
        self.positioned
    }
}

/// Draws from the grammatical nucleus of `logits`.
fn draw<R: Rng>(
    logits: &[f32],
    allowed: &[bool],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Option<usize> {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&l, _)| l)
        .fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return None;
    }
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed[i])
        .map(|(i, &l)| (i, (((l - max) / cfg.temperature) as f64).exp()))
        .collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    // Stable sort keeps equal weights in id order.
    probs.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut kept = 0;
    let mut mass = 0.0;
    for p in &probs {
        kept += 1;
        mass += p.1 / z;
        if mass >= cfg.top_p as f64 {
            break;
        }
    }
    let nucleus = &probs[..kept];
    let total: f64 = nucleus.iter().map(|p| p.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(i, w) in nucleus {
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    nucleus.last().map(|p| p.0)
}

/// Samples music for `v`. Only grammatical tokens can be drawn, so the
/// result always decodes.
pub fn generate(
    model: &ComposerModel,
    v: &AttributeVector,
    cfg: &SamplerConfig,
) -> Result<Generation> {
    cfg.validate()?;
    let vocab = &model.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = Cache::new(model, v);
    if model.config.mode == CondMode::Prefix {
        for id in encode_prefix(v, vocab) {
            cache.step(id, false)?;
        }
    }
    let mut logits = cache.step(vocab.sep(), true)?;
    let mut grammar = Grammar::new(Some(cfg.bar_budget));
    let mut allowed = vec![false; vocab.len()];
    let mut out = Vec::new();
    let mut stats = GenerationStats::default();
    let budget = cfg.max_new_tokens;
    let mut stop = StopReason::MaxTokens;
    while out.len() < budget {
        grammar.fill_mask(vocab, &mut allowed);
        let mut pick = None;
        for _ in 0..=cfg.max_retries {
            match draw(&logits, &allowed, cfg, &mut rng) {
                Some(id) if allowed[id] => {
                    pick = Some(id);
                    break;
                }
                _ => stats.retries += 1,
            }
        }
        let id = match pick {
            Some(id) => id,
            None => {
                stats.fallbacks += 1;
                (0..vocab.len())
                    .filter(|&i| allowed[i])
                    .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                    .ok_or_else(|| ComposerError::Sampler("grammar allows no token".into()))?
            }
        };
        let token = vocab.token(id).expect("allowed ids are tokens");
        grammar.advance(token);
        out.push(id);
        if id == vocab.eos() {
            stop = StopReason::Eos;
            break;
        }
        if out.len() >= budget || cache.positioned() >= model.config.max_len {
            break;
        }
        logits = cache.step(id, true)?;
    }
    stats.tokens = out.len();
    Ok(Generation {
        music: TokenSequence::music(out),
        stop,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::*;
    use crate::attributes::slot;
    use crate::tokenizer::decode_tokens;

    #[test]
    fn cache_matches_graph_forward() {
        for mode in [
            CondMode::Prefix,
            CondMode::Embedding,
            CondMode::CondLayernorm,
        ] {
            let mut m = ComposerModel::new(tiny(mode), 4).unwrap();
            // Nonzero conditional generators so the shift path is exercised.
            let ids: Vec<_> = m.store.ids().collect();
            let mut r = ChaCha8Rng::seed_from_u64(9);
            for id in ids {
                if m.store.param(id).name.starts_with("cond") {
                    for x in m.store.value_mut(id).data_mut() {
                        *x = r.random::<f32>() * 0.2 - 0.1;
                    }
                }
            }
            let mut v = AttributeVector::all_na();
            v.set(slot::TEMPO, 2);
            v.set(slot::KEY, 1);
            let music = TokenSequence::music(
                m.vocab
                    .from_names("Bar TimeSig_3/4 Tempo_fast Position_0 Program_guitar Pitch_64 Duration_6 Velocity_2")
                    .unwrap(),
            );
            let p = m.prepare(&v, &music).unwrap();
            let rows = m.forward(&p).unwrap();
            let mut cache = Cache::new(&m, &v);
            for (i, &id) in p.ids.iter().enumerate() {
                let l = cache.step(id, i >= p.prefix_len).unwrap();
                let err = l
                    .iter()
                    .zip(&rows[i])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f32::max);
                assert!(err < 1e-4, "{mode:?} row {i}: {err}");
            }
        }
    }

    #[test]
    fn untrained_generation_decodes_and_repeats() {
        for mode in [
            CondMode::Prefix,
            CondMode::Embedding,
            CondMode::CondLayernorm,
        ] {
            let m = ComposerModel::new(tiny(mode), 5).unwrap();
            let cfg = SamplerConfig {
                max_new_tokens: 60,
                seed: 11,
                ..Default::default()
            };
            let a = generate(&m, &AttributeVector::all_na(), &cfg).unwrap();
            let b = generate(&m, &AttributeVector::all_na(), &cfg).unwrap();
            assert_eq!(a, b);
            let d = decode_tokens(&a.music, &m.vocab).unwrap();
            assert!(d.score.bars().len() <= MAX_BAR_BUDGET);
            assert!(a.music.ids.iter().all(|&id| !m.vocab.is_prefix(id)));
        }
    }

    #[test]
    fn nucleus_keeps_the_top_token() {
        let logits = [0.0, 10.0, 0.0, 9.0];
        let allowed = [true, true, true, false];
        let cfg = SamplerConfig {
            top_p: 0.5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(draw(&logits, &allowed, &cfg, &mut rng), Some(1));
        }
        assert_eq!(draw(&logits, &[false; 4], &cfg, &mut rng), None);
    }
}
