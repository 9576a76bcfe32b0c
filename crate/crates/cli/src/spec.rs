//! Experiment and run configuration files.
//!
//! An experiment file names the corpora, the model preset, the training
//! settings and the grids of a sweep. Omitted fields take defaults, and the
//! fully resolved spec is written next to the results.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use jcast_core::data::SynthTaskSpec;
use jcast_core::model::ModelConfig;
use jcast_core::train::{CtcTargetSide, Mode, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Parses JSON, reporting the path of the offending field on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{origin}: at `{path}`: {}", e.inner()))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_json(&text, &path.display().to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelSpec,
    /// λ used when pretraining ASR models.
    #[serde(default = "default_lambda")]
    pub asr_ctc_weight: f64,
    #[serde(default)]
    pub asr_train: TrainSettings,
    #[serde(default)]
    pub st_train: TrainSettings,
    #[serde(default)]
    pub ctc_target_side: CtcTargetSide,
    pub init_schemes: Vec<InitScheme>,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    /// Training seeds; table cells average over them.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub decode: DecodeSettings,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_lambda() -> f64 {
    0.3
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// The speech-translation corpus.
    pub st: CorpusSpec,
    /// ASR pretraining corpora. The first is transcribed in the ST target
    /// language and alone makes the monolingual ASR model; all of them
    /// together make the multilingual one.
    #[serde(default)]
    pub asr: Vec<CorpusSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSpec {
    Synth(SynthTaskSpec),
    Manifests(ManifestSet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSet {
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Vocabulary files by language. Languages without one get a word
    /// vocabulary built from the training text.
    #[serde(default)]
    pub vocabularies: std::collections::BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: String,
    /// Field overrides applied on top of the preset; `input_dim` always
    /// comes from the corpus.
    #[serde(default)]
    pub overrides: serde_json::Map<String, serde_json::Value>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            overrides: Default::default(),
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self, input_dim: usize) -> Result<ModelConfig> {
        let base = ModelConfig::preset(&self.preset, input_dim).ok_or_else(|| {
            CliError::Config(format!("model.preset: unknown preset {:?} (desk, paper)", self.preset))
        })?;
        if self.overrides.contains_key("input_dim") {
            return Err(CliError::Config(
                "model.overrides.input_dim: the input dimension comes from the corpus".into(),
            ));
        }
        let mut value = serde_json::to_value(base).expect("serializable");
        let map = value.as_object_mut().expect("struct");
        for (k, v) in &self.overrides {
            map.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = parse_json(&value.to_string(), "model.overrides")?;
        cfg.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(cfg)
    }
}

/// Training settings shared by every run of one stage; the mode and the
/// CTC weight are supplied per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub freeze_non_target: bool,
    pub clip_norm: Option<f64>,
    pub select_best_dev: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::desk(Mode::Asr, 0.0);
        Self {
            epochs: d.epochs,
            warmup_steps: d.warmup_steps,
            peak_lr: d.peak_lr,
            batch_size: d.batch_size,
            freeze_non_target: d.freeze_non_target,
            clip_norm: d.clip_norm,
            select_best_dev: d.select_best_dev,
        }
    }
}

impl TrainSettings {
    pub fn config(&self, mode: Mode, ctc_weight: f64, side: CtcTargetSide, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            ctc_weight,
            ctc_target_side: side,
            epochs: self.epochs,
            warmup_steps: self.warmup_steps,
            peak_lr: self.peak_lr,
            batch_size: self.batch_size,
            seed,
            freeze_non_target: self.freeze_non_target,
            clip_norm: self.clip_norm,
            select_best_dev: self.select_best_dev,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSettings {
    pub beam: usize,
    pub pre_beam_factor: Option<usize>,
    pub threads: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam: 10,
            pre_beam_factor: Some(2),
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitSource {
    Random,
    MonoAsr,
    MultiAsr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CtcInit {
    #[default]
    RetainCtc,
    DiscardCtc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitScheme {
    pub init: InitSource,
    #[serde(default)]
    pub ctc: CtcInit,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let src = match self.init {
            InitSource::Random => return f.write_str("random"),
            InitSource::MonoAsr => "mono-asr",
            InitSource::MultiAsr => "multi-asr",
        };
        let ctc = match self.ctc {
            CtcInit::RetainCtc => "retain-ctc",
            CtcInit::DiscardCtc => "discard-ctc",
        };
        write!(f, "{src}+{ctc}")
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        spec.rebase(base);
        spec.validate()?;
        Ok(spec)
    }

    /// Resolves relative manifest and vocabulary paths against `base`.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for c in std::iter::once(&mut self.task.st).chain(self.task.asr.iter_mut()) {
            if let CorpusSpec::Manifests(m) = c {
                fix(&mut m.train);
                fix(&mut m.dev);
                if let Some(t) = m.test.as_mut() {
                    fix(t);
                }
                m.vocabularies.values_mut().for_each(fix);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.init_schemes.is_empty() {
            return bad("init_schemes: grid is empty".into());
        }
        if self.alpha_grid.is_empty() {
            return bad("alpha_grid: grid is empty".into());
        }
        if self.beta_grid.is_empty() {
            return bad("beta_grid: grid is empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds: list is empty".into());
        }
        for (name, grid) in [("alpha_grid", &self.alpha_grid), ("beta_grid", &self.beta_grid)] {
            for (i, &v) in grid.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("{name}[{i}]: {v} outside [0, 1]"));
                }
                if grid[..i].contains(&v) {
                    return bad(format!("{name}[{i}]: duplicate value {v}"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.asr_ctc_weight) {
            return bad(format!("asr_ctc_weight: {} outside [0, 1]", self.asr_ctc_weight));
        }
        let needs_asr = self.init_schemes.iter().any(|s| s.init != InitSource::Random);
        if needs_asr && self.task.asr.is_empty() {
            return bad("task.asr: ASR initialization requested but no ASR corpus given".into());
        }
        if self.init_schemes.iter().any(|s| s.init == InitSource::MultiAsr) && self.task.asr.len() < 2 {
            return bad("task.asr: multi-asr needs at least two ASR corpora".into());
        }
        if self.decode.beam < 1 {
            return bad("decode.beam: must be at least 1".into());
        }
        if self.decode.pre_beam_factor == Some(0) {
            return bad("decode.pre_beam_factor: must be positive".into());
        }
        for (i, c) in std::iter::once(&self.task.st).chain(&self.task.asr).enumerate() {
            if let CorpusSpec::Synth(s) = c {
                let field = if i == 0 { "task.st".to_string() } else { format!("task.asr[{}]", i - 1) };
                s.validate().map_err(|e| CliError::Config(format!("{field}: {e}")))?;
                if i == 0 && s.tgt_lang.is_none() {
                    return bad("task.st.synth.tgt_lang: the ST corpus needs a target language".into());
                }
            }
        }
        Ok(())
    }
}

/// A single training run, self-contained so that it can be replayed with
/// `train-asr` or `train-st`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed of freshly initialized parameters.
    pub model_seed: u64,
    pub train_manifests: Vec<PathBuf>,
    #[serde(default)]
    pub dev_manifests: Vec<PathBuf>,
    /// Every language the model registers.
    pub vocabularies: Vec<PathBuf>,
    #[serde(default)]
    pub init: Option<InitFrom>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitFrom {
    pub checkpoint: PathBuf,
    pub target_lang: String,
    pub retain_ctc: bool,
}
