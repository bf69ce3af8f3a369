use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cadenza_core::attributes::{
    clip_id, mask_random, merge_labels, schema, AttributeVector, LabelTable,
};
use cadenza_core::composer::{self, ComposerModel, ComposerSample, SamplerConfig};
use cadenza_core::evaluation::{control_accuracy, EvalReport};
use cadenza_core::extractor::extract_objective;
use cadenza_core::score::{extract_clips, parse_midi, write_midi, Clip, Score};
use cadenza_core::synthetic::corpus;
use cadenza_core::textgen::{
    synthesize_dataset, ChatCompletionClient, IdentityClient, RefineClient, TemplateBank, ENV_URL,
};
use cadenza_core::tokenizer::{decode_tokens, encode_score, quantize, Vocab};
use cadenza_core::understanding::{self, split_dataset, UnderstandingModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use walkdir::WalkDir;

use crate::config::PipelineConfig;
use crate::datasets::{
    check_digest, hold_out, read_clips, read_text, read_vectors, short, write_clips, write_text,
    ClipRecord,
};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn report_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn midi_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", dir.display()))?;
        let is_midi = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
        if entry.file_type().is_file() && is_midi {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

pub fn extract(cfg: &PipelineConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.paths.clip_dataset());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = match &cfg.paths.labels {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            LabelTable::from_jsonl(BufReader::new(f))
                .with_context(|| format!("reading labels {}", p.display()))?
        }
        None => LabelTable::new(),
    };

    let mut clips: Vec<(String, Clip)> = Vec::new();
    match &cfg.paths.midi_dir {
        Some(dir) => {
            let files = midi_files(dir)?;
            if files.is_empty() {
                bail!("no .mid or .midi files under {}", dir.display());
            }
            for path in files {
                let bytes =
                    std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                let score = match parse_midi(&bytes) {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("skipping {}: {e}", path.display());
                        continue;
                    }
                };
                let source = path.display().to_string();
                if cfg.clips.per_file == 0 {
                    clips.push((source, Clip::whole(score)));
                } else {
                    for c in extract_clips(&score, cfg.clips.max_bars, cfg.clips.per_file, &mut rng)
                    {
                        clips.push((source.clone(), c));
                    }
                }
            }
        }
        None => {
            log::info!(
                "no midi_dir configured; drawing {} procedural clips",
                cfg.clips.synthetic
            );
            for (i, s) in corpus(cfg.clips.synthetic, &cfg.clips.corpus, &mut rng)
                .into_iter()
                .enumerate()
            {
                clips.push((format!("synthetic:{i}"), Clip::whole(s)));
            }
        }
    }

    let vocab = Vocab::new();
    let mut records = Vec::with_capacity(clips.len());
    let mut labelled = 0;
    for (source, clip) in clips {
        let id = clip_id(&clip);
        let q = quantize(&clip.score);
        let mut attributes = extract_objective(&q, &cfg.extraction);
        if !labels.is_empty() {
            labelled += usize::from(labels.get(&id).is_some());
            attributes = merge_labels(&attributes, &labels, &id)
                .with_context(|| format!("labels for clip {id}"))?;
        }
        records.push(ClipRecord {
            id,
            source,
            bar_span: clip.bar_span,
            attributes,
            tokens: vocab.to_names(&encode_score(&q, &vocab).seq.ids),
        });
    }
    write_clips(&out, &cfg.clips_digest(), &records)?;
    if !labels.is_empty() {
        log::info!(
            "{labelled} of {} clips matched subjective labels",
            records.len()
        );
    }
    println!("wrote {} clips to {}", records.len(), out.display());
    Ok(())
}

pub fn synth_text(cfg: &PipelineConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.paths.text_dataset());
    let bank = match &cfg.paths.templates {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing template bank {}", p.display()))?
        }
        None => TemplateBank::builtin(),
    };
    bank.validate().context("template bank")?;
    let chat;
    let client: &dyn RefineClient = if cfg.text.refine {
        chat = ChatCompletionClient::from_env()
            .with_context(|| format!("[text] refine is set but {ENV_URL} is not"))?;
        &chat
    } else {
        &IdentityClient
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let outcome = synthesize_dataset(cfg.text.samples, &bank, client, &cfg.text.synth, &mut rng)?;
    let r = outcome.refine;
    if cfg.text.refine {
        println!(
            "refinement: {} accepted, {} rejected, {} failed",
            r.accepted, r.rejected, r.failed
        );
    }
    write_text(&out, &cfg.text_digest(), &outcome.samples)?;
    println!(
        "wrote {} samples to {}",
        outcome.samples.len(),
        out.display()
    );
    Ok(())
}

pub fn train_text2attr(cfg: &PipelineConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = cfg.paths.text_dataset();
    let (header, samples) = read_text(&path)?;
    check_digest(
        &path.display().to_string(),
        &header.config_digest,
        &cfg.text_digest(),
    );
    let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint_t2a());
    log::info!(
        "training text2attr ({:?} heads) on {} samples",
        cfg.text2attr.model.mode,
        samples.len()
    );
    let out = understanding::train(&samples, &cfg.text2attr.model, &cfg.text2attr.train)?;
    for m in &out.history {
        println!(
            "epoch {:>3}  train loss {:.4}  valid loss {:.4}  valid ASA {:.4}",
            m.epoch, m.train_loss, m.valid_loss, m.valid_asa
        );
    }
    let digest = cfg.text2attr_digest();
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    out.model.save(&ckpt, &digest)?;
    write_json(
        &report_path(&ckpt),
        &json!({
            "config_digest": digest,
            "samples": samples.len(),
            "best_epoch": out.best_epoch,
            "history": out.history,
        }),
    )?;
    println!(
        "saved epoch {} weights to {}",
        out.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn composer_samples(records: &[ClipRecord], vocab: &Vocab) -> Result<Vec<ComposerSample>> {
    records.iter().map(|r| r.sample(vocab)).collect()
}

pub fn train_attr2music(cfg: &PipelineConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = cfg.paths.clip_dataset();
    let (header, records) = read_clips(&path)?;
    check_digest(
        &path.display().to_string(),
        &header.config_digest,
        &cfg.clips_digest(),
    );
    let (train, held) = hold_out(&records, cfg.evaluation.held_out_clips, cfg.seed);
    let vocab = Vocab::new();
    let samples = composer_samples(&train, &vocab)?;
    let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint_a2m());
    log::info!(
        "training attr2music ({:?}) on {} clips, {} held out",
        cfg.attr2music.model.mode,
        samples.len(),
        held.len()
    );
    let out = composer::train(&samples, &cfg.attr2music.model, &cfg.attr2music.train)?;
    for m in &out.history {
        println!(
            "epoch {:>3}  train loss {:.4}  valid loss {:.4}",
            m.epoch, m.train_loss, m.valid_loss
        );
    }
    if out.skipped_too_long > 0 {
        log::warn!(
            "{} clips exceeded max_len and were skipped",
            out.skipped_too_long
        );
    }
    let digest = cfg.attr2music_digest();
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    out.model.save(&ckpt, &digest)?;
    write_json(
        &report_path(&ckpt),
        &json!({
            "config_digest": digest,
            "mode": cfg.attr2music.model.mode,
            "clips": samples.len(),
            "held_out": held.len(),
            "skipped_too_long": out.skipped_too_long,
            "best_epoch": out.best_epoch,
            "history": out.history,
        }),
    )?;
    println!(
        "saved epoch {} weights to {}",
        out.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn load_t2a(cfg: &PipelineConfig, path: Option<PathBuf>) -> Result<(UnderstandingModel, String)> {
    let path = path.unwrap_or_else(|| cfg.paths.checkpoint_t2a());
    if !path.exists() {
        bail!(
            "no text2attr checkpoint at {}; run `cadenza train-text2attr` first",
            path.display()
        );
    }
    let (model, digest) =
        UnderstandingModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
    check_digest(
        &path.display().to_string(),
        &digest,
        &cfg.text2attr_digest(),
    );
    Ok((model, digest))
}

fn load_a2m(cfg: &PipelineConfig, path: Option<PathBuf>) -> Result<(ComposerModel, String)> {
    let path = path.unwrap_or_else(|| cfg.paths.checkpoint_a2m());
    if !path.exists() {
        bail!(
            "no attr2music checkpoint at {}; run `cadenza train-attr2music` first",
            path.display()
        );
    }
    let (model, digest) =
        ComposerModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
    check_digest(
        &path.display().to_string(),
        &digest,
        &cfg.attr2music_digest(),
    );
    Ok((model, digest))
}

pub struct GenerateArgs {
    pub text: Option<String>,
    pub attributes: Option<String>,
    pub out: Option<PathBuf>,
    pub checkpoint_t2a: Option<PathBuf>,
    pub checkpoint_a2m: Option<PathBuf>,
}

fn parse_attributes(arg: &str) -> Result<AttributeVector> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading attributes from {arg}"))?
    };
    serde_json::from_str(&text).context("parsing attributes")
}

pub fn generate(cfg: &PipelineConfig, args: GenerateArgs) -> Result<()> {
    let out = args
        .out
        .unwrap_or_else(|| cfg.paths.out_dir.join("generated.mid"));
    let (requested, predicted, t2a_digest) = match (&args.text, &args.attributes) {
        (Some(text), _) => {
            let (model, digest) = load_t2a(cfg, args.checkpoint_t2a)?;
            let v = model.predict(text)?;
            let labels: Vec<String> = v
                .to_labels()
                .iter()
                .map(|(k, l)| format!("{k}={l}"))
                .collect();
            log::info!(
                "predicted {}",
                if labels.is_empty() {
                    "no attributes".into()
                } else {
                    labels.join(" ")
                }
            );
            (v.clone(), Some(v), Some(digest))
        }
        (None, Some(a)) => (parse_attributes(a)?, None, None),
        (None, None) => bail!("pass --text or --attributes"),
    };
    let (model, a2m_digest) = load_a2m(cfg, args.checkpoint_a2m)?;
    let g = composer::generate(&model, &requested, &cfg.sampler)?;
    let decoded =
        decode_tokens(&g.music, &Vocab::new()).context("generated tokens do not decode")?;
    if decoded.truncated {
        log::warn!("generation stopped mid-event; the partial event was dropped");
    }
    let bytes = write_midi(&decoded.score);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;

    let extracted = extract_objective(&decoded.score, &cfg.extraction);
    let sch = schema();
    let matches: BTreeMap<String, bool> = sch
        .objective_slots()
        .filter(|&s| !requested.is_na(s))
        .map(|s| {
            (
                sch.get(s).name.clone(),
                extracted.get(s) == requested.get(s),
            )
        })
        .collect();
    let sidecar = out.with_extension("json");
    write_json(
        &sidecar,
        &json!({
            "config_digest": cfg.digest(),
            "text": args.text,
            "predicted": predicted,
            "requested": requested,
            "extracted": extracted,
            "matches": matches,
            "stop": g.stop,
            "stats": g.stats,
            "seed": cfg.sampler.seed,
            "checkpoints": {"text2attr": t2a_digest, "attr2music": a2m_digest},
        }),
    )?;
    let hit = matches.values().filter(|&&m| m).count();
    println!(
        "wrote {} ({} tokens, {:?}); {hit}/{} requested objective attributes realised; details in {}",
        out.display(),
        g.stats.tokens,
        g.stop,
        matches.len(),
        sidecar.display()
    );
    Ok(())
}

fn emit(report: &EvalReport, out: Option<PathBuf>) -> Result<()> {
    print!("{}", report.to_table());
    if let Some(p) = out {
        write_json(&p, report)?;
    }
    Ok(())
}

pub fn evaluate_vectors(
    cfg: &PipelineConfig,
    pred: &Path,
    gold: &Path,
    out: Option<PathBuf>,
) -> Result<()> {
    let p = read_vectors(pred)?;
    let g = read_vectors(gold)?;
    if p.len() != g.len() {
        bail!(
            "{} has {} vectors but {} has {}",
            pred.display(),
            p.len(),
            gold.display(),
            g.len()
        );
    }
    emit(&EvalReport::new(&p, &g, None, &cfg.digest())?, out)
}

pub fn evaluate_text2attr(
    cfg: &PipelineConfig,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model, digest) = load_t2a(cfg, checkpoint)?;
    let path = cfg.paths.text_dataset();
    let (header, samples) = read_text(&path)?;
    check_digest(
        &path.display().to_string(),
        &header.config_digest,
        &cfg.text_digest(),
    );
    let t = &cfg.text2attr.train;
    let (_, valid) = split_dataset(&samples, t.valid_fraction, t.seed);
    if valid.is_empty() {
        bail!("the validation split is empty; raise text2attr.train.valid_fraction");
    }
    let gold: Vec<AttributeVector> = valid.iter().map(|s| s.values.clone()).collect();
    let pred = valid
        .iter()
        .map(|s| model.predict(&s.text))
        .collect::<Result<Vec<_>, _>>()?;
    log::info!(
        "scored {} validation samples with checkpoint {}",
        valid.len(),
        short(&digest)
    );
    emit(&EvalReport::new(&pred, &gold, None, &cfg.digest())?, out)
}

pub fn evaluate_attr2music(
    cfg: &PipelineConfig,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model, digest) = load_a2m(cfg, checkpoint)?;
    let path = cfg.paths.clip_dataset();
    let (header, records) = read_clips(&path)?;
    check_digest(
        &path.display().to_string(),
        &header.config_digest,
        &cfg.clips_digest(),
    );
    let (_, held) = hold_out(&records, cfg.evaluation.held_out_clips, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let requests: Vec<AttributeVector> = held
        .iter()
        .map(|c| mask_random(&c.attributes, cfg.evaluation.keep_prob, &mut rng))
        .collect();
    let vocab = Vocab::new();
    let mut generated: Vec<Option<Score>> = Vec::with_capacity(requests.len());
    for (i, v) in requests.iter().enumerate() {
        let sampler = SamplerConfig {
            seed: cfg.sampler.seed.wrapping_add(i as u64),
            ..cfg.sampler.clone()
        };
        let g = composer::generate(&model, v, &sampler)?;
        generated.push(decode_tokens(&g.music, &vocab).ok().map(|d| d.score));
    }
    log::info!(
        "generated {} pieces with checkpoint {}",
        generated.len(),
        short(&digest)
    );
    let control = control_accuracy(&requests, &generated, &cfg.extraction)?;
    let extracted: Vec<AttributeVector> = generated
        .iter()
        .map(|s| {
            s.as_ref().map_or_else(AttributeVector::all_na, |s| {
                extract_objective(s, &cfg.extraction)
            })
        })
        .collect();
    emit(
        &EvalReport::new(&extracted, &requests, Some(&control), &cfg.digest())?,
        out,
    )
}

#[derive(Serialize)]
struct AttributeStats {
    counts: BTreeMap<String, usize>,
    na: usize,
}

pub fn stats(cfg: &PipelineConfig, file: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let path = file.unwrap_or_else(|| cfg.paths.text_dataset());
    let vectors = read_vectors(&path)?;
    let sch = schema();
    let mut table: BTreeMap<String, AttributeStats> = BTreeMap::new();
    for s in 0..sch.len() {
        let def = sch.get(s);
        let mut counts = vec![0usize; def.cardinality()];
        for v in &vectors {
            counts[v.get(s) as usize] += 1;
        }
        let na = counts[def.na() as usize];
        let counts = def
            .values
            .iter()
            .zip(&counts)
            .enumerate()
            .filter(|&(k, (_, &n))| k != def.na() as usize && n > 0)
            .map(|(_, (label, &n))| (label.clone(), n))
            .collect();
        table.insert(def.name.clone(), AttributeStats { counts, na });
    }
    println!("{} vectors in {}", vectors.len(), path.display());
    for (name, st) in &table {
        if st.counts.is_empty() {
            continue;
        }
        let parts: Vec<String> = st.counts.iter().map(|(l, n)| format!("{l}={n}")).collect();
        println!("{name:<28} {}  (NA {})", parts.join(" "), st.na);
    }
    if let Some(p) = out {
        write_json(&p, &json!({"vectors": vectors.len(), "attributes": table}))?;
    }
    Ok(())
}
