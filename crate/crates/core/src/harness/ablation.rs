//! Grid runner: every cell runs pretrain → BPE → evaluation per seed and
//! emits metric rows. Cells that only differ after pretraining share one
//! pretrained model per seed.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{corpus_histogram, run_zeta};
use super::pipeline::{fewshot_adapt, pretrain_model, train_multitask, PretrainedRun};
use super::{derive_seed, MetricsRow, RunConfig};
use crate::bpe::{train_bpe, BpeConfig, Vocabulary};
use crate::envsim::{generate_dataset, TaskSuite};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Learned vocabulary, tokens capped at `cap_k`.
    Full,
    /// Base codes only with one code per decision.
    NoBpe,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBpe => "no_bpe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Evaluations {
    pub fewshot: bool,
    pub multitask: bool,
    pub zeta: bool,
    pub histogram: bool,
}

impl Default for Evaluations {
    fn default() -> Self {
        Self {
            fewshot: true,
            multitask: false,
            zeta: true,
            histogram: true,
        }
    }
}

/// Axes of the grid. An empty axis falls back to the single value in the
/// surrounding [`RunConfig`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub codebook_sizes: Vec<usize>,
    pub vocab_sizes: Vec<usize>,
    /// Pretraining trajectories per task.
    pub dataset_sizes: Vec<usize>,
    pub dynamics: Vec<bool>,
    pub variants: Vec<Variant>,
    pub evaluations: Evaluations,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_sizes.iter().any(|&c| c < 2) {
            return Err(Error::Config("grid codebook sizes must be at least 2".into()));
        }
        if self.vocab_sizes.contains(&0) || self.dataset_sizes.contains(&0) {
            return Err(Error::Config("grid sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub codebook_size: usize,
    pub vocab_size: usize,
    pub dataset_size: usize,
    pub use_dynamics: bool,
    pub variant: Variant,
}

impl Cell {
    fn pretrain_key(&self) -> (usize, usize, bool) {
        (self.codebook_size, self.dataset_size, self.use_dynamics)
    }

    /// The vocabulary size actually used: `C` without BPE.
    pub fn effective_vocab(&self) -> usize {
        match self.variant {
            Variant::Full => self.vocab_size,
            Variant::NoBpe => self.codebook_size,
        }
    }
}

pub fn cell_run_id(cell: &Cell) -> String {
    format!(
        "C{}-V{}-N{}-{}-{}",
        cell.codebook_size,
        cell.effective_vocab(),
        cell.dataset_size,
        if cell.use_dynamics { "dyn" } else { "nodyn" },
        cell.variant.as_str()
    )
}

fn axis<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

/// Cartesian product of the grid axes, in axis order.
pub fn expand_grid(config: &RunConfig) -> Result<Vec<Cell>> {
    let g = &config.grid;
    g.validate()?;
    let mut cells = Vec::new();
    for c in axis(&g.codebook_sizes, config.codebook_size) {
        for v in axis(&g.vocab_sizes, config.vocab_size) {
            for n in axis(&g.dataset_sizes, config.trajectories_per_task) {
                for d in axis(&g.dynamics, config.pretrain.use_dynamics) {
                    for variant in axis(&g.variants, Variant::Full) {
                        let cell = Cell {
                            codebook_size: c,
                            vocab_size: v,
                            dataset_size: n,
                            use_dynamics: d,
                            variant,
                        };
                        if variant == Variant::Full && v < c {
                            return Err(Error::Config(format!("vocab size {v} below codebook size {c}")));
                        }
                        if !cells.contains(&cell) {
                            cells.push(cell);
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub run_id: String,
    pub seed: u64,
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationOutcome {
    pub cells: Vec<Cell>,
    pub rows: Vec<MetricsRow>,
    pub errors: Vec<CellError>,
}

struct CellRun {
    rows: Vec<MetricsRow>,
    error: Option<CellError>,
}

/// Runs every cell for every seed. Failures abort only the affected cell
/// and leave an `error` row whose task column names the failed stage.
pub fn run_ablation(config: &RunConfig) -> Result<AblationOutcome> {
    config.validate()?;
    let cells = expand_grid(config)?;
    let suite = TaskSuite::standard();

    let mut groups: BTreeMap<((usize, usize, bool), u64), Vec<usize>> = BTreeMap::new();
    for (i, cell) in cells.iter().enumerate() {
        for &seed in &config.seeds {
            groups.entry((cell.pretrain_key(), seed)).or_default().push(i);
        }
    }
    let jobs: Vec<_> = groups.into_iter().collect();
    let finished: Vec<Vec<((usize, u64), CellRun)>> = jobs
        .par_iter()
        .map(|&(((c, n, dynamics), seed), ref members)| {
            log::info!("pretraining C={c} N={n} dynamics={dynamics} seed={seed}");
            let pretrained = pretrain_model(config, &suite, c, n, dynamics, seed);
            let zeta = match &pretrained {
                Ok(p) if config.grid.evaluations.zeta => Some(run_zeta(&config.zeta, &p.model, &p.dataset, seed)),
                _ => None,
            };
            members
                .iter()
                .map(|&i| {
                    let cell = &cells[i];
                    let run = match &pretrained {
                        Ok(p) => run_cell(config, &suite, cell, p, zeta.as_ref(), seed),
                        Err(e) => failed(cell, seed, "pretrain", e, Vec::new()),
                    };
                    ((i, seed), run)
                })
                .collect()
        })
        .collect();

    let mut by_key: BTreeMap<(usize, usize), CellRun> = BTreeMap::new();
    for ((i, seed), run) in finished.into_iter().flatten() {
        let s = config.seeds.iter().position(|&x| x == seed).expect("seed from config");
        by_key.insert((i, s), run);
    }
    let mut outcome = AblationOutcome {
        cells,
        ..AblationOutcome::default()
    };
    for (_, run) in by_key {
        outcome.rows.extend(run.rows);
        outcome.errors.extend(run.error);
    }
    Ok(outcome)
}

fn failed(cell: &Cell, seed: u64, stage: &str, e: &Error, mut rows: Vec<MetricsRow>) -> CellRun {
    let run_id = cell_run_id(cell);
    log::warn!("{run_id} seed {seed}: {stage} failed: {e}");
    rows.push(MetricsRow::new(&run_id, stage, seed, "error", 1.0));
    CellRun {
        rows,
        error: Some(CellError {
            run_id,
            seed,
            stage: stage.into(),
            message: e.to_string(),
        }),
    }
}

fn run_cell(
    config: &RunConfig,
    suite: &TaskSuite,
    cell: &Cell,
    p: &PretrainedRun,
    zeta: Option<&Result<f64>>,
    seed: u64,
) -> CellRun {
    let id = cell_run_id(cell);
    let evals = &config.grid.evaluations;
    let mut rows = Vec::new();
    if let Some(last) = p.history.last() {
        rows.push(MetricsRow::new(&id, "all", seed, "pretrain_total", last.total));
        rows.push(MetricsRow::new(&id, "all", seed, "pretrain_decoder", last.decoder));
    }
    match zeta {
        Some(Ok(z)) => rows.push(MetricsRow::new(&id, "all", seed, "zeta", *z)),
        Some(Err(e)) => return failed(cell, seed, "zeta", e, rows),
        None => {}
    }

    let (vocab, cap) = match cell.variant {
        Variant::Full => match train_bpe(&p.corpus, &BpeConfig::new(cell.codebook_size, cell.vocab_size)) {
            Ok(v) => (v, config.cap_k),
            Err(e) => return failed(cell, seed, "bpe", &e, rows),
        },
        Variant::NoBpe => (Vocabulary::base(cell.codebook_size), 1),
    };
    rows.push(MetricsRow::new(&id, "all", seed, "vocab_size", vocab.len() as f64));

    if evals.histogram {
        match corpus_histogram(&vocab, &p.corpus) {
            Ok(h) => {
                rows.push(MetricsRow::new(&id, "all", seed, "vocab_mean_token_length", h.vocabulary_mean()));
                rows.push(MetricsRow::new(&id, "all", seed, "usage_mean_token_length", h.usage_mean()));
            }
            Err(e) => return failed(cell, seed, "histogram", &e, rows),
        }
    }

    if evals.fewshot {
        let mut total = 0.0;
        for task in &suite.heldout {
            let result = generate_dataset(std::slice::from_ref(task), config.fewshot.demos, derive_seed(seed, "demos"))
                .and_then(|demos| {
                    fewshot_adapt(&p.model, &vocab, task, &demos, &config.fewshot, cap, config.policy_config(), seed)
                });
            match result {
                Ok(r) => {
                    rows.push(MetricsRow::new(&id, task.id, seed, "fewshot_success", r.best_success));
                    total += r.best_success;
                }
                Err(e) => return failed(cell, seed, "fewshot", &e, rows),
            }
        }
        let mean = total / suite.heldout.len().max(1) as f64;
        rows.push(MetricsRow::new(&id, "mean", seed, "fewshot_success", mean));
    }

    if evals.multitask {
        match train_multitask(
            &p.model,
            &vocab,
            &p.dataset,
            &suite.pretrain,
            &config.multitask,
            cap,
            config.policy_config(),
            seed,
        ) {
            Ok((_, r)) => {
                for (task, s) in &r.per_task {
                    rows.push(MetricsRow::new(&id, task, seed, "multitask_success", *s));
                }
                rows.push(MetricsRow::new(&id, "mean", seed, "multitask_success", r.mean_success));
            }
            Err(e) => return failed(cell, seed, "multitask", &e, rows),
        }
    }
    CellRun { rows, error: None }
}
