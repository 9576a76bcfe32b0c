//! Grid sweeps over initialization schemes, α and β.
//!
//! Layout of the output directory:
//!
//! ```text
//! spec.resolved.json            the experiment with every default filled in
//! model.resolved.json           the model configuration used by all runs
//! data/<corpus>/                manifests, features, vocabularies
//! runs/seed-<s>/asr-<kind>/     pretraining runs
//! runs/seed-<s>/<scheme>/alpha-<a>/
//!     run.json model.ckpt ...   replayable with `train-st --config run.json`
//!     decode/<split>-beta-<b>/job.json hyps.jsonl
//! results.txt results.jsonl     the table
//! ```
//!
//! Every stage directory holds a `stage.json` stamp with a key derived from
//! the stage's inputs and checksums of its outputs. A stage whose stamp
//! matches and whose outputs verify is skipped, so re-running a finished
//! sweep trains nothing; a stage with missing or corrupt outputs runs again.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use jcast_core::data::Vocabulary;
use jcast_core::decode::DecodeConfig;
use jcast_core::eval::Metric;
use jcast_core::model::ModelConfig;
use jcast_core::train::{CtcTargetSide, Mode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::{
    create_dir, decode_manifest, load_vocab, read_records, run_training, score_files,
    synth, vocab_path, write_jsonl, CorpusFiles, RefField,
};
use crate::error::{CliError, Result};
use crate::spec::{write_json, CorpusSpec, CtcInit, ExperimentSpec, InitFrom, InitScheme, InitSource, RunConfig};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

fn key_of<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serializable").as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    key: String,
    artifacts: BTreeMap<String, String>,
}

const STAMP: &str = "stage.json";

fn stage_is_done(dir: &Path, key: &str) -> bool {
    let Ok(text) = fs::read_to_string(dir.join(STAMP)) else {
        return false;
    };
    let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
        return false;
    };
    stamp.key == key
        && !stamp.artifacts.is_empty()
        && stamp
            .artifacts
            .iter()
            .all(|(name, sum)| file_digest(&dir.join(name)).is_ok_and(|d| &d == sum))
}

fn write_stamp(dir: &Path, key: &str, artifacts: &[&str]) -> Result<()> {
    let artifacts = artifacts
        .iter()
        .map(|a| Ok((a.to_string(), file_digest(&dir.join(a))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    write_json(
        &dir.join(STAMP),
        &Stamp {
            key: key.to_string(),
            artifacts,
        },
    )
}

fn clear_stamp(dir: &Path) {
    let _ = fs::remove_file(dir.join(STAMP));
}

/// A corpus on disk plus what the sweep needs to know about it.
#[derive(Debug, Clone)]
struct Corpus {
    files: CorpusFiles,
    src_lang: String,
    tgt_lang: Option<String>,
    dim: usize,
    /// Checksum over manifests, feature files and vocabularies.
    digest: String,
}

impl Corpus {
    fn vocab(&self, lang: &str) -> PathBuf {
        self.files
            .vocabularies
            .iter()
            .find(|p| load_vocab(p, None).is_ok_and(|v| v.language() == lang))
            .cloned()
            .expect("vocabulary of a corpus language")
    }
}

fn corpus_digest(files: &CorpusFiles) -> Result<String> {
    let mut h = Sha256::new();
    let manifests = [Some(&files.train), Some(&files.dev), files.test.as_ref()];
    for m in manifests.into_iter().flatten() {
        h.update(fs::read(m).map_err(|e| CliError::io(m, e))?);
        let base = m.parent().unwrap_or(Path::new(""));
        for rec in read_records(m)? {
            let p = base.join(&rec.feat);
            h.update(fs::read(&p).map_err(|e| CliError::io(&p, e))?);
        }
    }
    for v in &files.vocabularies {
        h.update(fs::read(v).map_err(|e| CliError::io(v, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn prepare_corpus(spec: &CorpusSpec, dir: &Path, field: &str) -> Result<Corpus> {
    let files = match spec {
        CorpusSpec::Synth(s) => synth(s, dir)?,
        CorpusSpec::Manifests(m) => {
            let records = read_records(&m.train)?;
            let first = records
                .first()
                .ok_or_else(|| CliError::Data(format!("{field}: training manifest is empty")))?;
            let mut langs: Vec<(String, Vec<String>)> = vec![(first.lang_src.clone(), Vec::new())];
            if let Some(t) = &first.lang_tgt {
                langs.push((t.clone(), Vec::new()));
            }
            for r in &records {
                langs[0].1.extend(r.transcript.clone());
                if let (Some(slot), Some(z)) = (langs.get_mut(1), &r.translation) {
                    slot.1.push(z.clone());
                }
            }
            create_dir(dir)?;
            let mut vocabularies = Vec::new();
            for (lang, text) in langs {
                let v = match m.vocabularies.get(&lang) {
                    Some(p) => load_vocab(p, Some(&lang))?,
                    None => Vocabulary::build_word_vocab(&text, lang.clone())?,
                };
                let p = vocab_path(dir, &lang);
                write_json(&p, &v)?;
                vocabularies.push(p);
            }
            CorpusFiles {
                train: m.train.clone(),
                dev: m.dev.clone(),
                test: m.test.clone(),
                vocabularies,
            }
        }
    };
    let records = read_records(&files.train)?;
    let first = records
        .first()
        .ok_or_else(|| CliError::Data(format!("{field}: training manifest is empty")))?;
    Ok(Corpus {
        src_lang: first.lang_src.clone(),
        tgt_lang: first.lang_tgt.clone(),
        dim: first.dim,
        digest: corpus_digest(&files)?,
        files,
    })
}

/// Runs `f` over `items` on up to `jobs` threads; results keep item order.
fn run_parallel<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every item ran"))
        .collect()
}

#[derive(Debug, Default)]
struct Counters {
    train_runs: AtomicUsize,
    train_reused: AtomicUsize,
    decode_runs: AtomicUsize,
    decode_reused: AtomicUsize,
}

/// Trains `cfg` into `dir` unless an identical run already finished there.
fn train_stage(cfg: &RunConfig, mode: Mode, dir: &Path, inputs: &[&str], counters: &Counters) -> Result<PathBuf> {
    let key = key_of(&(cfg, inputs));
    if stage_is_done(dir, &key) {
        counters.train_reused.fetch_add(1, Ordering::SeqCst);
        log::info!("reusing {}", dir.display());
        return Ok(dir.join("model.ckpt"));
    }
    clear_stamp(dir);
    log::info!("training {}", dir.display());
    counters.train_runs.fetch_add(1, Ordering::SeqCst);
    let report = run_training(cfg, mode, dir)?;
    write_stamp(dir, &key, &["model.ckpt", "last.ckpt", "log.jsonl", "run.json"])?;
    Ok(report.checkpoint)
}

/// Logged next to each decode output so the decode can be replayed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeJob {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub config: DecodeConfig,
    pub threads: usize,
}

fn decode_stage(job: &DecodeJob, inputs: &[&str], dir: &Path, counters: &Counters) -> Result<PathBuf> {
    let key = key_of(&(&job.config, &job.manifest, inputs));
    let hyps = dir.join("hyps.jsonl");
    if stage_is_done(dir, &key) {
        counters.decode_reused.fetch_add(1, Ordering::SeqCst);
        return Ok(hyps);
    }
    clear_stamp(dir);
    create_dir(dir)?;
    counters.decode_runs.fetch_add(1, Ordering::SeqCst);
    write_json(&dir.join("job.json"), job)?;
    decode_manifest(&job.checkpoint, &job.manifest, &job.config, job.threads, &hyps)?;
    write_stamp(dir, &key, &["hyps.jsonl", "job.json"])?;
    Ok(hyps)
}

/// Scores of one trained cell decoded at one β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub seed: u64,
    pub beta: f64,
    pub dev_bleu: f64,
    pub dev_chrf2: f64,
    pub test_bleu: Option<f64>,
    pub test_chrf2: Option<f64>,
    /// Run directory relative to the sweep output.
    pub run: String,
}

/// One table row: an initialization scheme at one α, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub scheme: InitScheme,
    pub alpha: f64,
    /// Mean dev BLEU per β, in grid order.
    pub dev_bleu: Vec<f64>,
    pub test_bleu: Vec<Option<f64>>,
    /// β with the highest mean dev BLEU; ties go to the smaller β.
    pub best_beta: f64,
    pub cells: Vec<CellScore>,
}

impl TableRow {
    pub fn dev_at(&self, betas: &[f64], beta: f64) -> Option<f64> {
        betas.iter().position(|&b| b == beta).map(|i| self.dev_bleu[i])
    }

    pub fn best_dev(&self, betas: &[f64]) -> f64 {
        self.dev_at(betas, self.best_beta).expect("best beta is on the grid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub name: String,
    pub seeds: Vec<u64>,
    pub betas: Vec<f64>,
    pub rows: Vec<TableRow>,
}

/// The β with the highest score; ties go to the smaller β.
pub fn select_beta(betas: &[f64], scores: &[f64]) -> f64 {
    let mut best: Option<(f64, f64)> = None;
    for (&b, &s) in betas.iter().zip(scores) {
        best = match best {
            Some((bb, bs)) if s < bs || (s == bs && bb < b) => Some((bb, bs)),
            _ => Some((b, s)),
        };
    }
    best.expect("non-empty grid").0
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

impl ResultTable {
    pub fn row(&self, scheme: InitScheme, alpha: f64) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.alpha == alpha)
    }

    /// Aligned text: one row per scheme and α, one column per β, cells
    /// `dev/test` BLEU with `*` on the β chosen on dev.
    pub fn render(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut lines = vec![format!(
            "# {}: BLEU dev/test, mean over seeds {}; * marks the best beta on dev",
            self.name,
            seeds.join(",")
        )];
        let mut grid: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["scheme".to_string(), "alpha".to_string()];
        header.extend(self.betas.iter().map(|b| format!("beta={b}")));
        grid.push(header);
        for r in &self.rows {
            let mut cells = vec![r.scheme.to_string(), r.alpha.to_string()];
            for (i, &b) in self.betas.iter().enumerate() {
                let test = r.test_bleu[i].map_or("-".to_string(), |t| format!("{t:.2}"));
                let mark = if b == r.best_beta { "*" } else { "" };
                cells.push(format!("{mark}{:.2}/{test}", r.dev_bleu[i]));
            }
            grid.push(cells);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        for row in grid {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| if c < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            lines.push(cells.join("  ").trim_end().to_string());
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// One record per row and β.
    pub fn records(&self) -> Vec<serde_json::Value> {
        let mut out = Vec::new();
        for r in &self.rows {
            for (i, &b) in self.betas.iter().enumerate() {
                let per_seed: Vec<&CellScore> = r.cells.iter().filter(|c| c.beta == b).collect();
                out.push(serde_json::json!({
                    "scheme": r.scheme.to_string(),
                    "alpha": r.alpha,
                    "beta": b,
                    "dev_bleu": r.dev_bleu[i],
                    "test_bleu": r.test_bleu[i],
                    "best_beta_on_dev": b == r.best_beta,
                    "seeds": per_seed,
                }));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub table: ResultTable,
    /// Training runs executed and reused.
    pub train_runs: usize,
    pub train_reused: usize,
    /// (cell, β, split) decodes executed and reused.
    pub decode_runs: usize,
    pub decode_reused: usize,
    pub results_txt: PathBuf,
    pub results_jsonl: PathBuf,
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

struct Cell {
    seed: u64,
    scheme: InitScheme,
    alpha: f64,
}

/// Runs (or resumes) the whole grid and writes the result table.
pub fn sweep(spec: &ExperimentSpec, out: &Path, jobs: usize) -> Result<SweepSummary> {
    spec.validate()?;
    create_dir(out)?;
    write_json(&out.join("spec.resolved.json"), spec)?;

    let data = out.join("data");
    let st = prepare_corpus(&spec.task.st, &data.join("st"), "task.st")?;
    let tgt = st
        .tgt_lang
        .clone()
        .ok_or_else(|| CliError::Config("task.st: the ST corpus has no target language".into()))?;
    let asr: Vec<Corpus> = spec
        .task
        .asr
        .iter()
        .enumerate()
        .map(|(i, c)| prepare_corpus(c, &data.join(format!("asr{i}")), &format!("task.asr[{i}]")))
        .collect::<Result<_>>()?;
    for (i, c) in asr.iter().enumerate() {
        if c.dim != st.dim {
            return Err(CliError::Config(format!(
                "task.asr[{i}]: feature dim {} differs from the ST corpus ({})",
                c.dim, st.dim
            )));
        }
        if asr[..i].iter().any(|o| o.src_lang == c.src_lang) {
            return Err(CliError::Config(format!("task.asr[{i}]: language {} appears twice", c.src_lang)));
        }
    }
    if let Some(first) = asr.first() {
        if first.src_lang != tgt {
            return Err(CliError::Config(format!(
                "task.asr[0]: transcribes {}, but the ST target language is {tgt}",
                first.src_lang
            )));
        }
    }
    let model: ModelConfig = spec.model.resolve(st.dim)?;
    write_json(&out.join("model.resolved.json"), &model)?;

    let counters = Counters::default();
    let runs = out.join("runs");
    let needs = |k: InitSource| spec.init_schemes.iter().any(|s| s.init == k);

    // Pretraining, one model per kind and seed.
    let mut asr_jobs: Vec<(u64, InitSource)> = Vec::new();
    for &seed in &spec.seeds {
        for kind in [InitSource::MonoAsr, InitSource::MultiAsr] {
            if needs(kind) {
                asr_jobs.push((seed, kind));
            }
        }
    }
    let asr_ckpts = run_parallel(jobs, &asr_jobs, |&(seed, kind)| {
        let corpora: &[Corpus] = if kind == InitSource::MonoAsr { &asr[..1] } else { &asr };
        let cfg = RunConfig {
            model: model.clone(),
            train: spec
                .asr_train
                .config(Mode::Asr, spec.asr_ctc_weight, CtcTargetSide::Translation, seed),
            model_seed: seed,
            train_manifests: corpora.iter().map(|c| c.files.train.clone()).collect(),
            dev_manifests: corpora.iter().map(|c| c.files.dev.clone()).collect(),
            vocabularies: corpora.iter().map(|c| c.vocab(&c.src_lang)).collect(),
            init: None,
        };
        let name = if kind == InitSource::MonoAsr { "asr-mono" } else { "asr-multi" };
        let dir = runs.join(format!("seed-{seed}")).join(name);
        let digests: Vec<&str> = corpora.iter().map(|c| c.digest.as_str()).collect();
        let ckpt = train_stage(&cfg, Mode::Asr, &dir, &digests, &counters)?;
        Ok(((seed, kind), ckpt))
    })?;
    let asr_ckpts: BTreeMap<(u64, InitSource), PathBuf> = asr_ckpts.into_iter().collect();

    let mut cells = Vec::new();
    for &seed in &spec.seeds {
        for &scheme in &spec.init_schemes {
            for &alpha in &spec.alpha_grid {
                cells.push(Cell { seed, scheme, alpha });
            }
        }
    }
    let scored = run_parallel(jobs, &cells, |cell| {
        let dir = runs
            .join(format!("seed-{}", cell.seed))
            .join(cell.scheme.to_string())
            .join(format!("alpha-{}", cell.alpha));
        let (init, init_digest) = match cell.scheme.init {
            InitSource::Random => (None, String::new()),
            kind => {
                let ckpt = asr_ckpts[&(cell.seed, kind)].clone();
                let digest = file_digest(&ckpt)?;
                let init = InitFrom {
                    checkpoint: ckpt,
                    target_lang: tgt.clone(),
                    retain_ctc: cell.scheme.ctc == CtcInit::RetainCtc,
                };
                (Some(init), digest)
            }
        };
        let cfg = RunConfig {
            model: model.clone(),
            train: spec
                .st_train
                .config(Mode::St, cell.alpha, spec.ctc_target_side, cell.seed),
            model_seed: cell.seed,
            train_manifests: vec![st.files.train.clone()],
            dev_manifests: vec![st.files.dev.clone()],
            vocabularies: vec![st.vocab(&st.src_lang), st.vocab(&tgt)],
            init,
        };
        let ckpt = train_stage(&cfg, Mode::St, &dir, &[&st.digest, &init_digest], &counters)?;
        let ckpt_digest = file_digest(&ckpt)?;
        let decode_dir = dir.join("decode");
        let mut out_scores = Vec::new();
        for &beta in &spec.beta_grid {
            let mut split_scores = Vec::new();
            for (split, manifest) in [("dev", Some(&st.files.dev)), ("test", st.files.test.as_ref())] {
                let Some(manifest) = manifest else {
                    split_scores.push(None);
                    continue;
                };
                let job = DecodeJob {
                    checkpoint: ckpt.clone(),
                    manifest: manifest.clone(),
                    config: DecodeConfig {
                        beam: spec.decode.beam,
                        ctc_weight: beta,
                        lang: tgt.clone(),
                        max_len: None,
                        pre_beam_factor: spec.decode.pre_beam_factor,
                    },
                    threads: spec.decode.threads,
                };
                let stage = decode_dir.join(format!("{split}-beta-{beta}"));
                let hyps = decode_stage(&job, &[&ckpt_digest, &st.digest], &stage, &counters)?;
                let reports = score_files(&hyps, manifest, RefField::Translation, &[Metric::Bleu, Metric::Chrf2], None)?;
                split_scores.push(Some((reports[0].value, reports[1].value)));
            }
            let (dev_bleu, dev_chrf2) = split_scores[0].expect("dev is always decoded");
            out_scores.push(CellScore {
                seed: cell.seed,
                beta,
                dev_bleu,
                dev_chrf2,
                test_bleu: split_scores[1].map(|s| s.0),
                test_chrf2: split_scores[1].map(|s| s.1),
                run: rel(out, &dir),
            });
        }
        Ok(out_scores)
    })?;

    let mut rows = Vec::new();
    for &scheme in &spec.init_schemes {
        for &alpha in &spec.alpha_grid {
            let scores: Vec<CellScore> = cells
                .iter()
                .zip(&scored)
                .filter(|(c, _)| c.scheme == scheme && c.alpha == alpha)
                .flat_map(|(_, s)| s.iter().cloned())
                .collect();
            let dev_bleu: Vec<f64> = spec
                .beta_grid
                .iter()
                .map(|&b| mean(scores.iter().filter(|c| c.beta == b).map(|c| c.dev_bleu)))
                .collect();
            let test_bleu: Vec<Option<f64>> = spec
                .beta_grid
                .iter()
                .map(|&b| {
                    let t: Option<Vec<f64>> = scores.iter().filter(|c| c.beta == b).map(|c| c.test_bleu).collect();
                    t.map(|v| mean(v.into_iter()))
                })
                .collect();
            rows.push(TableRow {
                scheme,
                alpha,
                best_beta: select_beta(&spec.beta_grid, &dev_bleu),
                dev_bleu,
                test_bleu,
                cells: scores,
            });
        }
    }
    let table = ResultTable {
        name: spec.name.clone(),
        seeds: spec.seeds.clone(),
        betas: spec.beta_grid.clone(),
        rows,
    };
    let results_txt = out.join("results.txt");
    fs::write(&results_txt, table.render()).map_err(|e| CliError::io(&results_txt, e))?;
    let results_jsonl = out.join("results.jsonl");
    write_jsonl(&results_jsonl, &table.records())?;
    Ok(SweepSummary {
        table,
        train_runs: counters.train_runs.into_inner(),
        train_reused: counters.train_reused.into_inner(),
        decode_runs: counters.decode_runs.into_inner(),
        decode_reused: counters.decode_reused.into_inner(),
        results_txt,
        results_jsonl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_selection_prefers_the_smaller_beta_on_ties() {
        assert_eq!(select_beta(&[0.0, 0.5], &[10.0, 12.0]), 0.5);
        assert_eq!(select_beta(&[0.0, 0.5, 0.9], &[12.0, 12.0, 11.0]), 0.0);
        assert_eq!(select_beta(&[0.9, 0.1, 0.5], &[3.0, 3.0, 3.0]), 0.1);
        assert_eq!(select_beta(&[0.3], &[0.0]), 0.3);
    }

    #[test]
    fn table_renders_aligned_columns() {
        let row = |alpha: f64, dev: Vec<f64>| TableRow {
            scheme: InitScheme {
                init: InitSource::Random,
                ctc: CtcInit::RetainCtc,
            },
            alpha,
            best_beta: select_beta(&[0.0, 0.5], &dev),
            test_bleu: vec![Some(1.0), None],
            dev_bleu: dev,
            cells: Vec::new(),
        };
        let t = ResultTable {
            name: "t".into(),
            seeds: vec![1, 2],
            betas: vec![0.0, 0.5],
            rows: vec![row(0.0, vec![5.0, 7.25]), row(0.1, vec![10.5, 10.5])],
        };
        let text = t.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("seeds 1,2"));
        assert!(lines[2].ends_with("*7.25/-"), "{}", lines[2]);
        assert!(lines[3].contains("*10.50/1.00"), "{}", lines[3]);
        assert_eq!(lines[1].len(), lines[2].len());
        let recs = t.records();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[1]["best_beta_on_dev"], true);
        assert_eq!(recs[2]["best_beta_on_dev"], true);
        assert!(t.row(t.rows[1].scheme, 0.1).is_some());
    }
}
