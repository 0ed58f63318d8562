//! Stage-I pretraining (encoder, quantizer, dynamics, decoder) and the
//! conversion of a dataset into per-episode code sequences.
//!
//! One update unrolls `K` steps from a sampled position `t`:
//!
//! ```text
//! z_hat = G(window_t)
//! for k in 0..K:
//!     z      = G(window_{t+k})
//!     e      = F(stopgrad(z), a_{t+k})
//!     quant += codebook loss
//!     dec   += action_loss(ψ(z, e), a_{t+k})
//!     z_hat  = T(z_hat, e)
//!     dyn   += -cos(Q(P(z_hat)), stopgrad(P(G(window_{t+k+1}))))
//! total = dyn + quant + β·dec
//! ```
//!
//! Every term is averaged over the batch and summed over `k`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{stack_windows, window_at};
use crate::envsim::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::model::SkillModel;
use crate::nn::{Adam, AdamConfig};
use crate::policy::episode_latents;
use crate::quantizer::{FrozenAssignment, Quantizer};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub k_unroll: usize,
    pub beta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    /// When false the dynamics term is dropped from the objective.
    pub use_dynamics: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            k_unroll: 3,
            beta: 1.0,
            batch_size: 32,
            steps: 2000,
            seed: 0,
            lr: 1e-3,
            use_dynamics: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_unroll < 1 {
            return Err(Error::Config("k_unroll must be at least 1".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Quantized codes of one episode, one per timestep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSequence {
    pub task: usize,
    pub episode: usize,
    pub codes: Vec<usize>,
}

/// Inputs of one unrolled update. `windows[k]` holds, per window position,
/// the `B × obs_dim` observations ending at `t + k` for `k = 0..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Batch {
    pub tasks: Vec<usize>,
    pub windows: Vec<Vec<Tensor>>,
    pub actions: Vec<Tensor>,
}

impl Stage1Batch {
    pub fn k(&self) -> usize {
        self.actions.len()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Uniform sampler over `(episode, t)` with `t + K ≤ H`.
#[derive(Clone, Debug)]
pub struct Stage1Sampler<'d> {
    dataset: &'d Dataset,
    positions: Vec<(usize, usize)>,
    k: usize,
    window: usize,
}

impl<'d> Stage1Sampler<'d> {
    pub fn new(dataset: &'d Dataset, k: usize, window: usize) -> Result<Self> {
        let positions: Vec<(usize, usize)> = dataset
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..(ep.len() + 1).saturating_sub(k)).map(move |t| (e, t)))
            .collect();
        if positions.is_empty() {
            return Err(Error::Sampling(format!(
                "no episode is long enough to unroll {k} steps"
            )));
        }
        Ok(Self {
            dataset,
            positions,
            k,
            window,
        })
    }

    pub fn num_positions(&self) -> usize {
        self.positions.len()
    }

    pub fn batch_at(&self, picks: &[(usize, usize)]) -> Stage1Batch {
        let eps: Vec<&Trajectory> = picks.iter().map(|&(e, _)| &self.dataset.episodes[e]).collect();
        let windows = (0..=self.k)
            .map(|k| {
                let w: Vec<Vec<Vec<f64>>> = eps
                    .iter()
                    .zip(picks)
                    .map(|(ep, &(_, t))| window_at(&ep.observations, t + k, self.window))
                    .collect();
                stack_windows(&w)
            })
            .collect();
        let actions = (0..self.k)
            .map(|k| {
                let rows: Vec<&[f64]> = eps
                    .iter()
                    .zip(picks)
                    .map(|(ep, &(_, t))| ep.actions[t + k].as_slice())
                    .collect();
                Tensor::from_rows(&rows).expect("consistent action widths")
            })
            .collect();
        Stage1Batch {
            tasks: eps.iter().map(|ep| ep.task).collect(),
            windows,
            actions,
        }
    }

    pub fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Stage1Batch {
        let picks: Vec<(usize, usize)> = (0..batch_size)
            .map(|_| self.positions[rng.random_range(0..self.positions.len())])
            .collect();
        self.batch_at(&picks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub dynamic: f64,
    pub quantization: f64,
    pub decoder: f64,
    pub total: f64,
}

pub struct Stage1Graph {
    pub dynamic: Var,
    pub quantization: Var,
    pub decoder: Var,
    pub total: Var,
    /// Per unroll step: chosen codes and the queries that chose them.
    pub indices: Vec<Vec<usize>>,
    pub queries: Vec<Var>,
}

impl Stage1Graph {
    pub fn report(&self, tape: &Tape) -> Stage1Report {
        Stage1Report {
            dynamic: tape.scalar(self.dynamic),
            quantization: tape.scalar(self.quantization),
            decoder: tape.scalar(self.decoder),
            total: tape.scalar(self.total),
        }
    }
}

fn accumulate(tape: &Tape, acc: Option<Var>, term: Var) -> Option<Var> {
    Some(match acc {
        None => term,
        Some(a) => tape.add(a, term),
    })
}

/// Builds the unrolled Stage-I objective. With `frozen`, each step reuses
/// the recorded code assignment (see [`FrozenAssignment`]).
pub fn stage1_objective(
    tape: &Tape,
    model: &SkillModel,
    batch: &Stage1Batch,
    beta: f64,
    use_dynamics: bool,
    frozen: Option<&[FrozenAssignment]>,
) -> Result<Stage1Graph> {
    let k_steps = batch.k();
    if batch.windows.len() != k_steps + 1 {
        return Err(Error::Shape("batch needs K + 1 windows".into()));
    }
    if let Some(f) = frozen {
        if f.len() != k_steps {
            return Err(Error::Shape("one frozen assignment per unroll step".into()));
        }
    }
    let tasks = &batch.tasks;
    let zero = tape.constant(Tensor::scalar(0.0));
    let mut dynamic = None;
    let mut quantization = None;
    let mut decoder = None;
    let mut indices = Vec::with_capacity(k_steps);
    let mut queries = Vec::with_capacity(k_steps);

    let mut z_hat = model.encoder.forward(tape, &batch.windows[0], tasks);
    for k in 0..k_steps {
        let z = model.encoder.forward(tape, &batch.windows[k], tasks);
        let a = tape.constant(batch.actions[k].clone());
        let q = model
            .quantizer
            .forward(tape, z, a, frozen.map(|f| &f[k]))?;
        quantization = accumulate(tape, quantization, tape.mean(q.loss));
        let out = model.decoder.forward(tape, z, q.output);
        let rows = model.decoder.loss_rows(tape, out, &batch.actions[k])?;
        decoder = accumulate(tape, decoder, tape.mean(rows));
        if use_dynamics {
            z_hat = model.dynamics.step(tape, z_hat, q.output);
            let z_next = model.encoder.forward(tape, &batch.windows[k + 1], tasks);
            let byol = model.dynamics.byol_loss_rows(tape, z_hat, z_next)?;
            dynamic = accumulate(tape, dynamic, tape.mean(byol));
        }
        indices.push(q.indices);
        queries.push(q.query);
    }
    let dynamic = dynamic.unwrap_or(zero);
    let quantization = quantization.expect("K >= 1");
    let decoder = decoder.expect("K >= 1");
    let total = tape.add(tape.add(dynamic, quantization), tape.scale(decoder, beta));
    Ok(Stage1Graph {
        dynamic,
        quantization,
        decoder,
        total,
        indices,
        queries,
    })
}

/// Records the nearest-code assignment of every unroll step at the current
/// parameters.
pub fn freeze_stage1_assignments(model: &SkillModel, batch: &Stage1Batch) -> Result<Vec<FrozenAssignment>> {
    let tape = Tape::inference(&model.store);
    let tasks = &batch.tasks;
    let codes = model.quantizer.codes(&model.store);
    (0..batch.k())
        .map(|k| {
            let z = model.encoder.forward(&tape, &batch.windows[k], tasks);
            let a = tape.constant(batch.actions[k].clone());
            let q = model.quantizer.forward(&tape, z, a, None)?;
            Ok(Quantizer::freeze_assignment(&tape, &q, codes))
        })
        .collect()
}

/// One optimizer step on the Stage-I objective followed by dead-code
/// book-keeping.
pub fn stage1_update(
    model: &mut SkillModel,
    optimizer: &mut Adam,
    batch: &Stage1Batch,
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Stage1Report> {
    let (report, grads, used, recent) = {
        let tape = Tape::with_params(&model.store);
        let g = stage1_objective(&tape, model, batch, config.beta, config.use_dynamics, None)?;
        let report = g.report(&tape);
        let grads = tape.backward(g.total)?;
        let used: Vec<usize> = g.indices.concat();
        let recent = Tensor::concat_rows(&g.queries.iter().map(|&q| tape.value(q)).collect::<Vec<_>>())?;
        (report, grads, used, recent)
    };
    optimizer.step(&mut model.store, &grads);
    model
        .quantizer
        .record_usage(&mut model.store, &used, &recent, rng);
    Ok(report)
}

/// Full Stage-I training run; returns the loss report of every step.
pub fn pretrain(model: &mut SkillModel, dataset: &Dataset, config: &PretrainConfig) -> Result<Vec<Stage1Report>> {
    config.validate()?;
    check_dataset(model, dataset)?;
    let sampler = Stage1Sampler::new(dataset, config.k_unroll, model.config.encoder.window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::for_prefixes(&model.store, &[""], AdamConfig::with_lr(config.lr));
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sampler.sample(config.batch_size, &mut rng);
        let report = stage1_update(model, &mut opt, &batch, config, &mut rng)?;
        if step % 500 == 0 {
            log::debug!("stage1 step {step}: {report:?}");
        }
        history.push(report);
    }
    Ok(history)
}

fn check_dataset(model: &SkillModel, dataset: &Dataset) -> Result<()> {
    let obs_dim = model.config.encoder.obs_dim;
    let act_dim = model.config.action_dim;
    for ep in &dataset.episodes {
        ep.validate()?;
        if ep.observations.first().is_some_and(|o| o.len() != obs_dim)
            || ep.actions.first().is_some_and(|a| a.len() != act_dim)
        {
            return Err(Error::Shape(format!(
                "dataset has obs/action widths {}/{}, model expects {obs_dim}/{act_dim}",
                ep.observations[0].len(),
                ep.actions.first().map_or(0, Vec::len)
            )));
        }
        if ep.task >= model.config.encoder.num_tasks {
            return Err(Error::Lookup(format!("task {} unknown to the encoder", ep.task)));
        }
    }
    Ok(())
}

/// Codes of one episode: the nearest code for every `(window_t, a_t)`.
pub fn encode_episode(model: &SkillModel, episode: &Trajectory) -> Result<Vec<usize>> {
    let h = episode.len();
    if h == 0 {
        return Ok(Vec::new());
    }
    let z = episode_latents(&model.encoder, &model.store, &episode.observations, episode.task, h)?;
    let tape = Tape::inference(&model.store);
    let zv = tape.constant(z);
    let av = tape.constant(Tensor::from_rows(&episode.actions)?);
    Ok(model.quantizer.forward(&tape, zv, av, None)?.indices)
}

/// One code sequence per episode, in dataset order.
pub fn encode_corpus(model: &SkillModel, dataset: &Dataset) -> Result<Vec<CodeSequence>> {
    check_dataset(model, dataset)?;
    dataset
        .episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            Ok(CodeSequence {
                task: ep.task,
                episode: i,
                codes: encode_episode(model, ep)?,
            })
        })
        .collect()
}

pub fn save_corpus(corpus: &[CodeSequence], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for seq in corpus {
        serde_json::to_writer(&mut out, seq)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CodeSequence>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
