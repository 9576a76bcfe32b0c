use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jcast_cli::spec::{write_json, RunConfig};
use jcast_core::model::ModelConfig;
use jcast_core::train::{Mode, TrainConfig};

fn jcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jcast"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn micro_spec() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro_sweep.json")
}

const TINY_SYNTH: &str = r#"{
    "seed": 5, "src_lang": "aa", "tgt_lang": "bb", "src_vocab": 4, "tgt_vocab": 4,
    "train": 6, "dev": 3, "test": 2, "min_len": 1, "max_len": 2,
    "min_frames_per_token": 4, "max_frames_per_token": 4, "feature_dim": 3, "noise": 0.1
}"#;

/// Synthesizes a tiny corpus and a run config for it.
fn tiny_run(dir: &Path) -> PathBuf {
    let spec = dir.join("synth.json");
    fs::write(&spec, TINY_SYNTH).unwrap();
    let corpus = dir.join("corpus");
    let o = jcast(&["synth", "--spec", s(&spec), "--out", s(&corpus)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut model = ModelConfig::preset("desk", 3).unwrap();
    model.d_model = 8;
    model.d_ff = 16;
    model.heads = 2;
    model.enc_layers = 1;
    model.dec_layers = 1;
    model.conv_channels = 2;
    let mut train = TrainConfig::desk(Mode::St, 0.3);
    train.epochs = 1;
    train.batch_size = 3;
    let cfg = RunConfig {
        model,
        train,
        model_seed: 1,
        train_manifests: vec![corpus.join("train.jsonl")],
        dev_manifests: vec![corpus.join("dev.jsonl")],
        vocabularies: vec![corpus.join("vocab.aa.json"), corpus.join("vocab.bb.json")],
        init: None,
    };
    let path = dir.join("run.json");
    write_json(&path, &cfg).unwrap();
    path
}

#[test]
fn synth_train_decode_score_round() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tiny_run(tmp.path());
    let corpus = tmp.path().join("corpus");
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "vocab.aa.json", "vocab.bb.json", "synth_spec.json"] {
        assert!(corpus.join(f).exists(), "{f} missing");
    }
    let out = tmp.path().join("st");
    let o = jcast(&["train-st", "--config", s(&run), "--out", s(&out), "--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let written: RunConfig = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(written.train.epochs, 2);

    let hyps = tmp.path().join("hyps.jsonl");
    let o = jcast(&[
        "decode", "--checkpoint", s(&out.join("model.ckpt")), "--manifest", s(&corpus.join("test.jsonl")),
        "--lang", "bb", "--beam", "2", "--out", s(&hyps),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&hyps).unwrap().lines().count(), 2);

    let reports = tmp.path().join("scores");
    let o = jcast(&[
        "score", "--hyps", s(&hyps), "--refs", s(&corpus.join("test.jsonl")), "--metric", "bleu,chrf2,wer",
        "--out", s(&reports),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    for m in ["bleu", "chrf2", "wer"] {
        assert!(reports.join(format!("{m}.json")).exists());
    }

    // The wrong mode for the config is a configuration error.
    let o = jcast(&["train-asr", "--config", s(&run), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("train.mode"));
}

#[test]
fn exit_codes_distinguish_config_data_and_numeric_errors() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown flag.
    let o = jcast(&["sweep", "--spec", "x.json", "--out", "y", "--speed", "3"]);
    assert_eq!(code(&o), 2);

    // Malformed spec: the message names the offending field.
    let text = fs::read_to_string(micro_spec()).unwrap().replace("\"batch_size\": 8}", "\"batch_size\": \"eight\"}");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, text).unwrap();
    let o = jcast(&["sweep", "--spec", s(&bad), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("asr_train.batch_size"), "{}", stderr(&o));

    // Invalid grid.
    let text = fs::read_to_string(micro_spec()).unwrap().replace("[0.0, 0.5]", "[0.0, 1.5]");
    fs::write(&bad, text).unwrap();
    let o = jcast(&["sweep", "--spec", s(&bad), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("beta_grid"), "{}", stderr(&o));

    // Missing manifest.
    let run = tiny_run(tmp.path());
    let mut cfg: RunConfig = serde_json::from_str(&fs::read_to_string(&run).unwrap()).unwrap();
    cfg.train_manifests = vec![tmp.path().join("nowhere.jsonl")];
    let missing = tmp.path().join("missing.json");
    write_json(&missing, &cfg).unwrap();
    let o = jcast(&["train-st", "--config", s(&missing), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere.jsonl"));

    // Missing checkpoint.
    let o = jcast(&[
        "decode", "--checkpoint", s(&tmp.path().join("none.ckpt")), "--manifest", s(&tmp.path().join("corpus/dev.jsonl")),
        "--lang", "bb", "--out", s(&tmp.path().join("h.jsonl")),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // A learning rate this large drives the loss to a non-finite value.
    let o = jcast(&[
        "train-st", "--config", s(&run), "--out", s(&tmp.path().join("n")), "--peak-lr", "1e300", "--warmup-steps", "1",
        "--epochs", "3",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

fn sweep_counts(o: &Output) -> (usize, usize, usize, usize) {
    let out = stdout(o);
    let line = out.lines().last().unwrap();
    let nums: Vec<usize> = line
        .split(|c: char| !c.is_ascii_digit())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(nums.len(), 4, "{line}");
    (nums[0], nums[1], nums[2], nums[3])
}

#[test]
fn sweep_resumes_and_cells_replay_standalone() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let spec = micro_spec();
    let o = jcast(&["sweep", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // 1 ASR model, 3 schemes x 2 alphas; 6 cells x 2 betas x 2 splits.
    assert_eq!(sweep_counts(&o), (7, 0, 24, 0));
    let table = fs::read_to_string(out.join("results.txt")).unwrap();
    assert!(stdout(&o).starts_with(&table));

    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("spec.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["asr_ctc_weight"], 0.3);
    assert_eq!(resolved["decode"]["pre_beam_factor"], 2);
    assert_eq!(resolved["st_train"]["epochs"], 2);
    assert!(resolved["st_train"]["peak_lr"].is_number());

    let o = jcast(&["sweep", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(sweep_counts(&o), (0, 7, 0, 24));
    assert_eq!(fs::read_to_string(out.join("results.txt")).unwrap(), table);

    // A damaged artifact reruns its own stage. The rebuilt checkpoint is
    // identical, so the decodes keyed on it are still valid.
    let cell = out.join("runs/seed-1/random/alpha-0.1");
    let mut bytes = fs::read(cell.join("model.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0xff;
    fs::write(cell.join("model.ckpt"), bytes).unwrap();
    let hyps = out.join("runs/seed-1/mono-asr+retain-ctc/alpha-0/decode/test-beta-0/hyps.jsonl");
    fs::write(&hyps, "{}\n").unwrap();
    let o = jcast(&["sweep", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(sweep_counts(&o), (1, 6, 1, 23));
    assert_eq!(fs::read_to_string(out.join("results.txt")).unwrap(), table);

    // Replaying the cell from its run config reproduces its checkpoint.
    let replay = tmp.path().join("replay");
    let o = jcast(&["train-st", "--config", s(&cell.join("run.json")), "--out", s(&replay)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(replay.join("model.ckpt")).unwrap(), fs::read(cell.join("model.ckpt")).unwrap());

    // And decoding plus scoring reproduces its table entry.
    let dev = out.join("data/st/dev.jsonl");
    let hyps = tmp.path().join("hyps.jsonl");
    let o = jcast(&[
        "decode", "--checkpoint", s(&replay.join("model.ckpt")), "--manifest", s(&dev), "--lang", "bb", "--beta", "0.5",
        "--beam", "3", "--out", s(&hyps),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&hyps).unwrap(), fs::read(cell.join("decode/dev-beta-0.5/hyps.jsonl")).unwrap());
    let scores = tmp.path().join("scores");
    let o = jcast(&["score", "--hyps", s(&hyps), "--refs", s(&dev), "--metric", "bleu", "--out", s(&scores)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(scores.join("bleu.json")).unwrap()).unwrap();
    let records = fs::read_to_string(out.join("results.jsonl")).unwrap();
    let rec: serde_json::Value = records
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| r["scheme"] == "random" && r["alpha"] == 0.1 && r["beta"] == 0.5)
        .unwrap();
    assert_eq!(rec["seeds"][0]["dev_bleu"], report["value"]);
    assert_eq!(rec["dev_bleu"], report["value"]);
}
