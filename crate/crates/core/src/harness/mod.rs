//! Run configuration, metrics, the end-to-end pipeline and the ablation
//! runner.

mod ablation;
mod metrics;
mod pipeline;
mod report;

pub use ablation::{cell_run_id, expand_grid, run_ablation, AblationGrid, AblationOutcome, Cell, CellError, Evaluations, Variant};
pub use metrics::{
    collapse_metric_zeta, collect_latents, corpus_histogram, run_zeta, spearman, token_length_histogram, zeta_gmm,
    zeta_l1, TokenLengthHistogram, ZetaConfig,
};
pub use pipeline::{
    demo_positions, fewshot_adapt, load_or_generate_dataset, prepare_demos, pretrain_model, train_multitask,
    FewShotConfig, FewShotResult, MultitaskConfig, MultitaskResult, PretrainedRun,
};
pub use report::render_report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{resolve_beta, DecoderMode};
use crate::envsim::{ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::Activation;
use crate::policy::PolicyConfig;
use crate::pretrain::PretrainConfig;

/// Network widths. Defaults are the full-size model; tests and quick runs
/// shrink them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelScale {
    pub latent_dim: usize,
    pub window: usize,
    pub feature_dim: usize,
    pub encoder_hidden: Vec<usize>,
    /// Task embedding fed to the encoder. Zero keeps latents of held-out
    /// tasks in distribution, since the encoder is frozen after pretraining.
    pub encoder_task_embed_dim: usize,
    /// Task embedding fed to the policy.
    pub task_embed_dim: usize,
    pub code_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub gmm_components: usize,
    pub policy_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelScale {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            window: 4,
            feature_dim: 32,
            encoder_hidden: vec![64],
            encoder_task_embed_dim: 0,
            task_embed_dim: 8,
            code_dim: 16,
            decoder_hidden: vec![128, 128],
            gmm_components: 5,
            policy_hidden: vec![128],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub codebook_size: usize,
    pub vocab_size: usize,
    pub cap_k: usize,
    /// Decoder-loss weight; `None` takes the decoder mode's default.
    pub beta: Option<f64>,
    pub allow_beta_override: bool,
    pub decoder: DecoderMode,
    /// Pretraining dataset; generated from the task suite when absent.
    pub dataset: Option<PathBuf>,
    pub trajectories_per_task: usize,
    pub seeds: Vec<u64>,
    pub model: ModelScale,
    pub pretrain: PretrainConfig,
    pub fewshot: FewShotConfig,
    pub multitask: MultitaskConfig,
    pub zeta: ZetaConfig,
    pub grid: AblationGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            codebook_size: 10,
            vocab_size: 200,
            cap_k: 5,
            beta: None,
            allow_beta_override: false,
            decoder: DecoderMode::DeterministicL1,
            dataset: None,
            trajectories_per_task: 20,
            seeds: vec![0],
            model: ModelScale::default(),
            pretrain: PretrainConfig::default(),
            fewshot: FewShotConfig::default(),
            multitask: MultitaskConfig::default(),
            zeta: ZetaConfig::default(),
            grid: AblationGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if self.vocab_size < self.codebook_size {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than codebook_size {}",
                self.vocab_size, self.codebook_size
            )));
        }
        if self.cap_k == 0 || self.trajectories_per_task == 0 {
            return Err(Error::Config("cap_k and trajectories_per_task must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.resolved_beta()?;
        self.pretrain.validate()?;
        self.fewshot.validate()?;
        self.grid.validate()
    }

    pub fn resolved_beta(&self) -> Result<f64> {
        resolve_beta(self.decoder, self.beta, self.allow_beta_override)
    }

    /// Model configuration for the synthetic suite at codebook size `c`.
    pub fn model_config(&self, c: usize, num_tasks: usize) -> ModelConfig {
        let s = &self.model;
        let mut m = ModelConfig::new(OBS_DIM, ACTION_DIM, num_tasks);
        m.encoder.latent_dim = s.latent_dim;
        m.encoder.window = s.window;
        m.encoder.feature_dim = s.feature_dim;
        m.encoder.hidden = s.encoder_hidden.clone();
        m.encoder.task_embed_dim = s.encoder_task_embed_dim;
        m.quantizer.codebook_size = c;
        m.quantizer.code_dim = s.code_dim;
        m.decoder.mode = self.decoder;
        m.decoder.hidden = s.decoder_hidden.clone();
        m.decoder.gmm_components = s.gmm_components;
        m.activation = s.activation;
        m
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            task_embed_dim: self.model.task_embed_dim,
            hidden: self.model.policy_hidden.clone(),
            vocab_size: 0,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Writes `config.json` into `dir` so the run can be repeated exactly.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join("config.json");
        fs::write(&path, self.to_json()?)?;
        Ok(path)
    }
}

/// Independent stream seed for one stage of a run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub task: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl MetricsRow {
    pub fn new(run_id: &str, task: impl ToString, seed: u64, metric: &str, value: f64) -> Self {
        Self {
            run_id: run_id.to_string(),
            task: task.to_string(),
            seed,
            metric: metric.to_string(),
            value,
        }
    }
}

fn check_rows(rows: &[MetricsRow]) -> Result<()> {
    match rows.iter().find(|r| !r.value.is_finite()) {
        Some(r) => Err(Error::NonFinite(format!("metric {} of run {} is {}", r.metric, r.run_id, r.value))),
        None => Ok(()),
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<String> {
    check_rows(rows)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["run_id", "task", "seed", "metric", "value"])
            .map_err(csv_error)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn metrics_from_csv(s: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(s.as_bytes());
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(csv_error)?;
    check_rows(&rows)?;
    Ok(rows)
}

/// Writes `rows` to `path`, or appends them when the file already exists.
pub fn append_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut all = if path.exists() {
        metrics_from_csv(&fs::read_to_string(path)?)?
    } else {
        Vec::new()
    };
    all.extend_from_slice(rows);
    fs::write(path, metrics_to_csv(&all)?)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Validation(format!("metrics csv: {e}"))
}
