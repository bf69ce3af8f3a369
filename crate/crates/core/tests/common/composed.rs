//! Finite-difference checks of both composed models at tiny sizes.

use super::{random_score, random_vector};
use cadenza_core::attributes::slot;
use cadenza_core::composer::{ComposerConfig, ComposerModel, CondMode};
use cadenza_core::tokenizer::{encode_score, quantize};
use cadenza_core::understanding::{HeadMode, TextVocab, UnderstandingConfig, UnderstandingModel};
use cadenza_tensor::gradcheck::{check, GradCheckConfig};
use cadenza_tensor::{Graph, ParamId, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-3;

/// Adds noise to every parameter so zero-initialised generators carry
/// gradient through every path. The attribute table is redrawn at a scale
/// where the sum of its 60 looked-up rows is comparable to one token
/// embedding; otherwise the shared condition swamps token identity,
/// attention goes flat and the query and key gradients vanish into f32
/// rounding.
fn jitter(store: &mut ParamStore, seed: u64) -> Vec<ParamId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let attr_scale = 0.5 / (slot::COUNT as f32).sqrt();
    for &id in &ids {
        let redraw = store.param(id).name == "attr_emb";
        for x in store.value_mut(id).data_mut() {
            if redraw {
                *x = rng.random_range(-attr_scale..attr_scale);
            } else {
                *x += rng.random_range(-0.5..0.5);
            }
        }
    }
    ids
}

fn cfg() -> GradCheckConfig {
    GradCheckConfig {
        directions: Some(12),
        step: 3e-2,
        ..GradCheckConfig::default()
    }
}

fn understanding_error(mode: HeadMode) -> f64 {
    let text = "a calm piano piece in c major at a slow tempo";
    let vocab = TextVocab::build([text]);
    let config = UnderstandingConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_mult: 2,
        max_len: 80,
        mode,
        ..Default::default()
    };
    let model = UnderstandingModel::new(config, vocab, 1).unwrap();
    let mut store = model.store.clone();
    let ids = jitter(&mut store, 2);
    let tokens = model.tokenize(text);
    let mut gold = random_vector(&mut ChaCha8Rng::seed_from_u64(3), 0.5);
    gold.set(slot::KEY, 0);
    // one cross-entropy per head, summed in f64 by the checker
    let per_head = |g: &mut Graph| -> cadenza_tensor::Result<Var> {
        let logits = model.logits(g, &tokens).expect("logits");
        let ces = logits
            .into_iter()
            .enumerate()
            .map(|(i, l)| g.cross_entropy(l, &[Some(gold.get(i) as usize)]))
            .collect::<cadenza_tensor::Result<Vec<_>>>()?;
        g.concat_rows(&ces)
    };
    let mut g = Graph::new(&store, false, 0);
    let total = model.loss_graph(&mut g, &tokens, &gold).unwrap();
    let total = g.value(total).item() as f64;
    let mut g = Graph::new(&store, false, 0);
    let column = per_head(&mut g).unwrap();
    let summed: f64 = g.value(column).data().iter().map(|&x| x as f64).sum();
    assert!((total - summed).abs() <= 1e-4 * total.abs());
    check(&mut store, &ids, &cfg(), per_head)
        .unwrap()
        .max_rel_error()
}

fn composer_error(mode: CondMode) -> f64 {
    let config = ComposerConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_mult: 2,
        dropout: 0.0,
        max_len: 64,
        mode,
    };
    let model = ComposerModel::new(config, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let music = loop {
        let s = quantize(&random_score(&mut rng, 1, 3));
        let seq = encode_score(&s, &model.vocab).seq;
        if seq.len() + 2 <= 64 {
            break seq;
        }
    };
    let v = random_vector(&mut rng, 0.5);
    let prepared = model.prepare(&v, &music).unwrap();
    let mut store = model.store.clone();
    let ids = jitter(&mut store, 6);
    // one cross-entropy per scored position
    let scored: Vec<(usize, usize)> = prepared
        .targets
        .iter()
        .enumerate()
        .filter_map(|(r, t)| t.map(|t| (r, t)))
        .collect();
    let per_row = |g: &mut Graph| -> cadenza_tensor::Result<Var> {
        let logits = model.logits(g, &prepared).expect("logits");
        let ces = scored
            .iter()
            .map(|&(r, t)| {
                let row = g.select_rows(logits, &[r])?;
                g.cross_entropy(row, &[Some(t)])
            })
            .collect::<cadenza_tensor::Result<Vec<_>>>()?;
        g.concat_rows(&ces)
    };
    let mut g = Graph::new(&store, false, 0);
    let mean = model.loss_graph(&mut g, &prepared).unwrap();
    let mean = g.value(mean).item() as f64;
    let mut g = Graph::new(&store, false, 0);
    let column = per_row(&mut g).unwrap();
    let summed: f64 = g.value(column).data().iter().map(|&x| x as f64).sum();
    assert!((mean * scored.len() as f64 - summed).abs() <= 1e-4 * summed.abs());
    check(&mut store, &ids, &cfg(), per_row)
        .unwrap()
        .max_rel_error()
}

/// `(name, max relative error)` for every composed-model configuration.
pub fn composed_model_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for mode in [HeadMode::Multi, HeadMode::One] {
        out.push((format!("text2attr {mode:?}"), understanding_error(mode)));
    }
    for mode in [
        CondMode::Prefix,
        CondMode::Embedding,
        CondMode::CondLayernorm,
    ] {
        out.push((format!("attr2music {mode:?}"), composer_error(mode)));
    }
    out
}
