//! Runs every seeded pipeline stage twice and reports any divergence.

use cadenza_core::attributes::mask_random;
use cadenza_core::composer::{
    self, ComposerConfig, ComposerSample, ComposerTrainConfig, CondMode, SamplerConfig,
};
use cadenza_core::extractor::{extract_objective, ExtractionConfig};
use cadenza_core::score::write_midi;
use cadenza_core::synthetic::{corpus, CorpusConfig};
use cadenza_core::textgen::{synthesize_dataset, IdentityClient, SynthConfig, TemplateBank};
use cadenza_core::tokenizer::{decode_tokens, encode_score, quantize, Vocab};
use cadenza_core::understanding::{self, HeadMode, TrainConfig, UnderstandingConfig};
use cadenza_tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bits(store: &ParamStore) -> Vec<(String, Vec<u32>)> {
    store
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.value.data().iter().map(|x| x.to_bits()).collect(),
            )
        })
        .collect()
}

fn text_run(mode: HeadMode) -> (String, Vec<(String, Vec<u32>)>, Vec<String>) {
    let data = synthesize_dataset(
        240,
        &TemplateBank::builtin(),
        &IdentityClient,
        &SynthConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(21),
    )
    .unwrap();
    let model_cfg = UnderstandingConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        dropout: 0.1,
        mode,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        epochs: 2,
        warmup_steps: 10,
        seed: 5,
        ..Default::default()
    };
    let out = understanding::train(&data.samples, &model_cfg, &train_cfg).unwrap();
    let preds = out
        .valid
        .iter()
        .map(|s| format!("{:?}", out.model.predict(&s.text).unwrap()))
        .collect();
    (format!("{:?}", out.history), bits(&out.model.store), preds)
}

struct MusicRun {
    history: String,
    params: Vec<(String, Vec<u32>)>,
    tokens: Vec<Vec<usize>>,
    midi: Vec<Vec<u8>>,
}

fn music_run(mode: CondMode) -> MusicRun {
    let vocab = Vocab::new();
    let ecfg = ExtractionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let samples: Vec<ComposerSample> = corpus(48, &CorpusConfig::default(), &mut rng)
        .iter()
        .map(|s| {
            let q = quantize(s);
            ComposerSample {
                attributes: extract_objective(&q, &ecfg),
                music: encode_score(&q, &vocab).seq,
            }
        })
        .collect();
    let model_cfg = ComposerConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        dropout: 0.1,
        max_len: 512,
        mode,
        ..Default::default()
    };
    let train_cfg = ComposerTrainConfig {
        epochs: 1,
        warmup_steps: 10,
        seed: 9,
        ..Default::default()
    };
    let out = composer::train(&samples, &model_cfg, &train_cfg).unwrap();
    let mut tokens = Vec::new();
    let mut midi = Vec::new();
    for (i, s) in samples.iter().take(3).enumerate() {
        let request = mask_random(&s.attributes, 0.5, &mut rng);
        let cfg = SamplerConfig {
            seed: i as u64,
            max_new_tokens: 160,
            ..Default::default()
        };
        let g = composer::generate(&out.model, &request, &cfg).unwrap();
        if let Ok(d) = decode_tokens(&g.music, &vocab) {
            midi.push(write_midi(&d.score));
        }
        tokens.push(g.music.ids);
    }
    MusicRun {
        history: format!("{:?}", out.history),
        params: bits(&out.model.store),
        tokens,
        midi,
    }
}

/// Descriptions of every stage whose two seeded runs differ.
pub fn reproducibility_failures() -> Vec<String> {
    let mut failures = Vec::new();
    for mode in [HeadMode::Multi, HeadMode::One] {
        let (a, b) = (text_run(mode), text_run(mode));
        if a.0 != b.0 {
            failures.push(format!("text2attr {mode:?}: loss history"));
        }
        if a.1 != b.1 {
            failures.push(format!("text2attr {mode:?}: trained weights"));
        }
        if a.2 != b.2 {
            failures.push(format!("text2attr {mode:?}: predictions"));
        }
    }
    for mode in [
        CondMode::Prefix,
        CondMode::Embedding,
        CondMode::CondLayernorm,
    ] {
        let (a, b) = (music_run(mode), music_run(mode));
        if a.history != b.history {
            failures.push(format!("attr2music {mode:?}: loss history"));
        }
        if a.params != b.params {
            failures.push(format!("attr2music {mode:?}: trained weights"));
        }
        if a.tokens != b.tokens {
            failures.push(format!("attr2music {mode:?}: generated tokens"));
        }
        if a.midi.is_empty() {
            failures.push(format!("attr2music {mode:?}: nothing decodable to compare"));
        }
        if a.midi != b.midi {
            failures.push(format!("attr2music {mode:?}: MIDI bytes"));
        }
    }
    failures
}
