use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 1

[clips]
synthetic = 40

[text]
samples = 300

[text2attr.model]
d_model = 16
layers = 1
heads = 2

[text2attr.train]
epochs = 2
warmup_steps = 20

[attr2music.model]
d_model = 16
layers = 1
heads = 2

[attr2music.train]
epochs = 1
warmup_steps = 10

[sampler]
max_new_tokens = 200

[evaluation]
held_out_clips = 4
"#;

fn cadenza(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadenza"))
        .current_dir(dir)
        .args(args)
        .env_remove("CADENZA_REFINE_URL")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cadenza(dir, args);
    assert!(
        out.status.success(),
        "cadenza {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), config).unwrap();
    dir
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = setup(TINY);
    let d = dir.path();
    let c = ["--config", "cfg.toml"];
    let run = |rest: &[&str]| ok(d, &[&c[..], rest].concat());

    run(&["extract"]);
    run(&["synth-text"]);
    run(&["train-text2attr"]);
    run(&["train-attr2music", "--mode", "cond_layernorm"]);
    for f in [
        "clips.jsonl",
        "text.jsonl",
        "text2attr.ckpt",
        "text2attr.ckpt.json",
        "attr2music.ckpt",
    ] {
        assert!(d.join("runs").join(f).exists(), "missing {f}");
    }

    run(&[
        "generate",
        "--text",
        "A fast piano piece in 3/4.",
        "--out",
        "a.mid",
    ]);
    let side = json(&d.join("a.json"));
    assert_eq!(side["text"], "A fast piano piece in 3/4.");
    assert!(side["predicted"].is_object());
    assert!(side["extracted"].is_object());
    assert!(std::fs::metadata(d.join("a.mid")).unwrap().len() > 14);

    // the same seed gives the same bytes; another seed is free to differ
    run(&[
        "generate",
        "--text",
        "A fast piano piece in 3/4.",
        "--out",
        "b.mid",
    ]);
    assert_eq!(
        std::fs::read(d.join("a.mid")).unwrap(),
        std::fs::read(d.join("b.mid")).unwrap()
    );

    run(&["generate", "--text", "", "--out", "empty.mid"]);
    assert!(d.join("empty.mid").exists());

    run(&[
        "generate",
        "--attributes",
        r#"{"tempo": "fast", "bar": "1-4"}"#,
        "--out",
        "attr.mid",
    ]);
    let side = json(&d.join("attr.json"));
    assert_eq!(side["requested"]["tempo"], "fast");
    assert!(side["predicted"].is_null());
    assert!(side["matches"].as_object().unwrap().contains_key("tempo"));

    let out = run(&["evaluate", "text2attr", "--out", "t2a.json"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ASA"));
    assert!(json(&d.join("t2a.json"))["asa"].is_number());
    run(&["evaluate", "attr2music", "--out", "a2m.json"]);
    let report = json(&d.join("a2m.json"));
    assert_eq!(report["samples"], 4);
    assert!(report["control"]["average"].is_number());

    run(&["stats", "runs/clips.jsonl", "--out", "stats.json"]);
    assert_eq!(json(&d.join("stats.json"))["vectors"], 40);
}

#[test]
fn understands_a_time_signature_sentence() {
    let dir = setup(
        r#"
[text]
samples = 700
[text.synth]
k_range = [1, 1]
attributes = ["time_signature"]
refine_fraction = 0.0
[text2attr.model]
d_model = 32
layers = 1
heads = 2
[text2attr.train]
epochs = 6
warmup_steps = 30
[clips]
synthetic = 12
[attr2music.model]
d_model = 16
layers = 1
heads = 2
[attr2music.train]
epochs = 1
[sampler]
max_new_tokens = 100
[evaluation]
held_out_clips = 2
"#,
    );
    let d = dir.path();
    ok(d, &["--config", "cfg.toml", "synth-text"]);
    ok(d, &["--config", "cfg.toml", "train-text2attr"]);
    ok(d, &["--config", "cfg.toml", "extract"]);
    ok(d, &["--config", "cfg.toml", "train-attr2music"]);
    let text = "The music is in 4/4.";
    let out = ok(
        d,
        &[
            "--config", "cfg.toml", "generate", "--text", text, "--out", "g.mid",
        ],
    );
    assert!(
        stderr(&out).contains("predicted time_signature=4/4"),
        "{}",
        stderr(&out)
    );
    let side = json(&d.join("g.json"));
    assert_eq!(side["predicted"]["time_signature"], "4/4");
    assert!(side["matches"]
        .as_object()
        .unwrap()
        .contains_key("time_signature"));
}

#[test]
fn missing_checkpoints_name_the_training_command() {
    let dir = setup("");
    let out = cadenza(dir.path(), &["generate", "--text", "slow piano"]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("cadenza train-text2attr"),
        "{}",
        stderr(&out)
    );
    let out = cadenza(
        dir.path(),
        &["generate", "--attributes", r#"{"key": "major"}"#],
    );
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("cadenza train-attr2music"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = setup("[sampler]\ntemprature = 0.9\n");
    let out = cadenza(dir.path(), &["--config", "cfg.toml", "stats"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("temprature"), "{}", stderr(&out));
}

#[test]
fn single_attribute_stats_are_balanced() {
    let dir = setup("[text]\nsamples = 500\n[text.synth]\nk_range = [1, 1]\n");
    let d = dir.path();
    ok(d, &["--config", "cfg.toml", "synth-text"]);
    ok(d, &["--config", "cfg.toml", "stats", "--out", "s.json"]);
    let s = json(&d.join("s.json"));
    let mut per_attribute = BTreeMap::new();
    for (name, st) in s["attributes"].as_object().unwrap() {
        let counts: Vec<u64> = st["counts"]
            .as_object()
            .unwrap()
            .values()
            .map(|n| n.as_u64().unwrap())
            .collect();
        if let (Some(lo), Some(hi)) = (counts.iter().min(), counts.iter().max()) {
            assert!(hi - lo <= 1, "{name}: {counts:?}");
        }
        per_attribute.insert(name.clone(), counts.iter().sum::<u64>());
    }
    let lo = per_attribute.values().min().unwrap();
    let hi = per_attribute.values().max().unwrap();
    assert!(hi - lo <= 1, "attribute totals {per_attribute:?}");
}

#[test]
fn identical_vectors_score_full_asa() {
    let dir = setup("");
    let d = dir.path();
    let lines = "{\"key\": \"minor\", \"tempo\": \"slow\"}\n{\"instrument_piano\": \"played\"}\n";
    std::fs::write(d.join("v.jsonl"), lines).unwrap();
    ok(
        d,
        &[
            "evaluate", "vectors", "v.jsonl", "v.jsonl", "--out", "r.json",
        ],
    );
    assert_eq!(json(&d.join("r.json"))["asa"], 1.0);
}

#[test]
fn stale_artifacts_are_flagged() {
    let dir = setup("[text]\nsamples = 60\n[text2attr.train]\nepochs = 1\n");
    let d = dir.path();
    ok(d, &["--config", "cfg.toml", "synth-text"]);
    std::fs::write(
        d.join("cfg2.toml"),
        "[text]\nsamples = 61\n[text2attr.train]\nepochs = 1\n",
    )
    .unwrap();
    let out = ok(d, &["--config", "cfg2.toml", "train-text2attr"]);
    assert!(stderr(&out).contains("config digest"), "{}", stderr(&out));
    let out = ok(d, &["--config", "cfg.toml", "train-text2attr"]);
    assert!(!stderr(&out).contains("config digest"), "{}", stderr(&out));
}
