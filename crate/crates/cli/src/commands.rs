//! The single-step commands: synthesize, train, decode, score.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use jcast_core::data::{
    generate_synthetic, load_manifest, write_manifest, ManifestRecord, SynthTaskSpec, Utterance, Vocabulary,
};
use jcast_core::decode::{decode_utterances, DecodeConfig, DecodeRecord};
use jcast_core::eval::{self, Metric, ScoreReport};
use jcast_core::model::Model;
use jcast_core::train::{check_vocabularies, init_st_from_asr, train, Checkpoint, EpochMetrics, Mode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::spec::{read_json, write_json, RunConfig};

/// Files of a corpus written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFiles {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
    /// Source language first, then the target language if any.
    pub vocabularies: Vec<PathBuf>,
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn vocab_path(dir: &Path, lang: &str) -> PathBuf {
    dir.join(format!("vocab.{lang}.json"))
}

/// Writes a synthetic corpus: manifests, feature files, vocabularies and
/// the spec it came from.
pub fn synth(spec: &SynthTaskSpec, out: &Path) -> Result<CorpusFiles> {
    let corpus = generate_synthetic(spec)?;
    create_dir(out)?;
    write_json(&out.join("synth_spec.json"), spec)?;
    let train = write_manifest(out, "train", &corpus.train)?;
    let dev = write_manifest(out, "dev", &corpus.dev)?;
    let test = if corpus.test.is_empty() {
        None
    } else {
        Some(write_manifest(out, "test", &corpus.test)?)
    };
    let mut vocabularies = Vec::new();
    for v in std::iter::once(&corpus.src_vocab).chain(corpus.tgt_vocab.as_ref()) {
        let p = vocab_path(out, v.language());
        write_json(&p, v)?;
        vocabularies.push(p);
    }
    Ok(CorpusFiles {
        train,
        dev,
        test,
        vocabularies,
    })
}

/// Reads a vocabulary: JSON as written by `synth`, or a plain token list
/// (one token and optional log-probability per line) for `language`.
pub fn load_vocab(path: &Path, language: Option<&str>) -> Result<Vocabulary> {
    if path.extension().is_some_and(|e| e == "json") {
        let v: Vocabulary = read_json(path)?;
        if let Some(l) = language.filter(|&l| l != v.language()) {
            return Err(CliError::Config(format!(
                "{}: vocabulary is for {:?}, expected {l:?}",
                path.display(),
                v.language()
            )));
        }
        return Ok(v);
    }
    let lang = language.ok_or_else(|| {
        CliError::Config(format!("{}: plain vocabulary files need a language", path.display()))
    })?;
    Ok(Vocabulary::from_file(path, lang)?)
}

pub fn load_manifests(paths: &[PathBuf]) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_manifest(p)?);
    }
    Ok(out)
}

/// Manifest lines without their feature files.
pub fn read_records(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Builds the initial model of a run: fresh, or transferred from an ASR
/// checkpoint with any missing languages added.
pub fn initial_model(cfg: &RunConfig) -> Result<Model> {
    let vocabs = cfg
        .vocabularies
        .iter()
        .map(|p| load_vocab(p, None))
        .collect::<Result<Vec<_>>>()?;
    let Some(init) = &cfg.init else {
        return Ok(Model::new(cfg.model.clone(), &vocabs, cfg.model_seed)?);
    };
    let asr = Checkpoint::load(&init.checkpoint)?.model;
    if asr.config() != &cfg.model {
        return Err(CliError::Config(format!(
            "init.checkpoint: {} has a different model config than the run",
            init.checkpoint.display()
        )));
    }
    let shared: Vec<Vocabulary> = vocabs
        .iter()
        .filter(|v| asr.vocab(v.language()).is_ok())
        .cloned()
        .collect();
    check_vocabularies(&asr, &shared)?;
    let mut model = init_st_from_asr(&asr, &init.target_lang, init.retain_ctc, cfg.model_seed)?;
    for v in vocabs {
        if model.vocab(v.language()).is_err() {
            model.add_language(v, cfg.model_seed)?;
        }
    }
    Ok(model)
}

/// Runs one training job into `out`: `model.ckpt` (selected parameters),
/// `last.ckpt` (final parameters and optimizer state), `log.jsonl` and
/// `run.json`.
pub fn run_training(cfg: &RunConfig, expect: Mode, out: &Path) -> Result<TrainReport> {
    if cfg.train.mode != expect {
        return Err(CliError::Config(format!(
            "train.mode: this command trains {expect:?} models but the config says {:?}",
            cfg.train.mode
        )));
    }
    cfg.train.validate()?;
    create_dir(out)?;
    write_json(&out.join("run.json"), cfg)?;
    let model = initial_model(cfg)?;
    let train_set = load_manifests(&cfg.train_manifests)?;
    let dev_set = load_manifests(&cfg.dev_manifests)?;
    let log_path = out.join("log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut write_err = None;
    let outcome = train(Checkpoint::new(model, None), &cfg.train, &train_set, &dev_set, |m| {
        log::info!(
            "epoch {} train {:.4} dev {} lr {:.2e} skipped {}",
            m.epoch,
            m.train_loss,
            m.dev_loss.map_or("-".into(), |d| format!("{d:.4}")),
            m.lr,
            m.skipped_utterances
        );
        let line = serde_json::to_string(m).expect("serializable");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, e));
    }
    let checkpoint = out.join("model.ckpt");
    Checkpoint::new(outcome.model, None).save(&checkpoint)?;
    outcome.last.save(&out.join("last.ckpt"))?;
    Ok(TrainReport {
        checkpoint,
        log: outcome.log,
        best_epoch: outcome.best_epoch,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).expect("serializable"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Decodes every utterance of `manifest` and writes one record per line.
/// Scores of utterances too short to encode are written as `null`.
pub fn decode_manifest(
    checkpoint: &Path,
    manifest: &Path,
    cfg: &DecodeConfig,
    threads: usize,
    out: &Path,
) -> Result<Vec<DecodeRecord>> {
    cfg.validate()?;
    let model = Checkpoint::load(checkpoint)?.model;
    let utts = load_manifest(manifest)?;
    let records = decode_utterances(&model, &utts, cfg, threads.max(1))?;
    write_jsonl(out, &records)?;
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RefField {
    Transcript,
    Translation,
}

#[derive(Deserialize)]
struct HypLine {
    id: String,
    text: String,
}

/// Pairs hypotheses with manifest references by utterance id, in manifest order.
pub fn paired_texts(hyps: &Path, refs: &Path, field: RefField) -> Result<(Vec<String>, Vec<String>)> {
    let text = fs::read_to_string(hyps).map_err(|e| CliError::io(hyps, e))?;
    let mut by_id: HashMap<String, String> = HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let h: HypLine = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", hyps.display(), n + 1)))?;
        if by_id.insert(h.id.clone(), h.text).is_some() {
            return Err(CliError::Data(format!("{}: duplicate id {}", hyps.display(), h.id)));
        }
    }
    let records = read_records(refs)?;
    if records.len() != by_id.len() {
        return Err(CliError::Data(format!(
            "{} references but {} hypotheses",
            records.len(),
            by_id.len()
        )));
    }
    let mut r = Vec::with_capacity(records.len());
    let mut h = Vec::with_capacity(records.len());
    for rec in records {
        let reference = match field {
            RefField::Transcript => rec.transcript,
            RefField::Translation => rec.translation,
        }
        .ok_or_else(|| CliError::Data(format!("utterance {} has no {field:?} reference", rec.id)))?;
        let hyp = by_id
            .remove(&rec.id)
            .ok_or_else(|| CliError::Data(format!("no hypothesis for utterance {}", rec.id)))?;
        r.push(reference);
        h.push(hyp);
    }
    Ok((r, h))
}

/// Scores hypotheses against references and writes `<metric>.json` per
/// metric into `out` when given.
pub fn score_files(
    hyps: &Path,
    refs: &Path,
    field: RefField,
    metrics: &[Metric],
    out: Option<&Path>,
) -> Result<Vec<ScoreReport>> {
    let (r, h) = paired_texts(hyps, refs, field)?;
    let reports = metrics
        .iter()
        .map(|&m| eval::score(m, &r, &h))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if let Some(dir) = out {
        create_dir(dir)?;
        for rep in &reports {
            write_json(&dir.join(format!("{}.json", rep.metric.name())), rep)?;
        }
    }
    Ok(reports)
}
