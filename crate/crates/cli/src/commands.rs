use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use skilltok::bpe::{relabel_dataset, train_bpe, BpeConfig, Vocabulary};
use skilltok::envsim::{evaluate_policy, generate_dataset, save_dataset, RolloutMode, TaskSuite};
use skilltok::harness::{
    corpus_histogram, derive_seed, fewshot_adapt, load_or_generate_dataset, metrics_from_csv, metrics_to_csv,
    pretrain_model, render_report, run_ablation, run_zeta, train_multitask, MetricsRow, RunConfig,
};
use skilltok::model::SkillModel;
use skilltok::pretrain::{encode_corpus, load_corpus, save_corpus};

use crate::{Command, Common};

/// Loads the config file (or defaults) and applies the command-line flags.
fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seeds = vec![s];
    }
    if let Some(v) = common.codebook_size {
        c.codebook_size = v;
    }
    if let Some(v) = common.vocab_size {
        c.vocab_size = v;
    }
    if let Some(v) = common.cap_k {
        c.cap_k = v;
    }
    if common.beta.is_some() {
        c.beta = common.beta;
    }
    if common.allow_beta_override {
        c.allow_beta_override = true;
    }
    if let Some(d) = common.decoder {
        c.decoder = d.into();
    }
    if common.dataset.is_some() {
        c.dataset = common.dataset.clone();
    }
    c.validate()?;
    Ok(c)
}

struct Run {
    config: RunConfig,
    seed: u64,
    out: PathBuf,
    suite: TaskSuite,
    rows: Vec<MetricsRow>,
    name: &'static str,
}

impl Run {
    fn row(&mut self, task: impl ToString, metric: &str, value: f64) {
        self.rows.push(MetricsRow::new(self.name, task, self.seed, metric, value));
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        fs::write(self.path(file), serde_json::to_string_pretty(value)?)?;
        Ok(())
    }
}

fn load_model(path: &Path) -> Result<SkillModel> {
    SkillModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn name(command: &Command) -> &'static str {
    match command {
        Command::Generate { .. } => "generate",
        Command::Pretrain { .. } => "pretrain",
        Command::EncodeCorpus { .. } => "encode-corpus",
        Command::TrainBpe { .. } => "train-bpe",
        Command::Relabel { .. } => "relabel",
        Command::TrainMultitask { .. } => "train-multitask",
        Command::Fewshot { .. } => "fewshot",
        Command::Rollout { .. } => "rollout",
        Command::Zeta { .. } => "zeta",
        Command::Histogram { .. } => "histogram",
        Command::Ablate => "ablate",
        Command::Report { .. } => "report",
    }
}

pub fn run(common: &Common, command: &Command) -> Result<()> {
    let config = resolve_config(common)?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    config.write_snapshot(&common.out)?;
    let mut run = Run {
        seed: config.seeds[0],
        config,
        out: common.out.clone(),
        suite: TaskSuite::standard(),
        rows: Vec::new(),
        name: name(command),
    };
    execute(&mut run, command)?;
    fs::write(run.path("metrics.csv"), metrics_to_csv(&run.rows)?)?;
    Ok(())
}

fn execute(run: &mut Run, command: &Command) -> Result<()> {
    let c = run.config.clone();
    let per_task = c.trajectories_per_task;
    match command {
        Command::Generate { per_task: n, heldout } => {
            let tasks = if *heldout { &run.suite.heldout } else { &run.suite.pretrain };
            let data = generate_dataset(tasks, n.unwrap_or(per_task), derive_seed(run.seed, "data"))?;
            save_dataset(&data, run.path("dataset.jsonl"))?;
            run.row("all", "episodes", data.len() as f64);
            run.row("all", "steps", data.total_steps() as f64);
        }
        Command::Pretrain { no_dynamics } => {
            let p = pretrain_model(&c, &run.suite, c.codebook_size, per_task, !no_dynamics, run.seed)?;
            p.model.save(run.path("model.ckpt"))?;
            run.write_json("pretrain_history.json", &p.history)?;
            if let Some(last) = p.history.last() {
                run.row("all", "pretrain_total", last.total);
                run.row("all", "pretrain_dynamic", last.dynamic);
                run.row("all", "pretrain_quantization", last.quantization);
                run.row("all", "pretrain_decoder", last.decoder);
            }
        }
        Command::EncodeCorpus { model } => {
            let m = load_model(model)?;
            let data = load_or_generate_dataset(&c, &run.suite, per_task, run.seed)?;
            let corpus = encode_corpus(&m, &data)?;
            save_corpus(&corpus, run.path("corpus.jsonl"))?;
            run.row("all", "sequences", corpus.len() as f64);
        }
        Command::TrainBpe { corpus } => {
            let corpus = load_corpus(corpus)?;
            let vocab = train_bpe(&corpus, &BpeConfig::new(c.codebook_size, c.vocab_size))?;
            vocab.save(run.path("vocab.json"))?;
            let h = corpus_histogram(&vocab, &corpus)?;
            run.row("all", "vocab_size", vocab.len() as f64);
            run.row("all", "vocab_mean_token_length", h.vocabulary_mean());
            run.row("all", "usage_mean_token_length", h.usage_mean());
        }
        Command::Relabel { model, vocab } => {
            let (m, vocab) = (load_model(model)?, load_vocab(vocab)?);
            if vocab.codebook_size() != m.codebook_size() {
                bail!(
                    "vocabulary is over {} codes, the model has {}",
                    vocab.codebook_size(),
                    m.codebook_size()
                );
            }
            let data = load_or_generate_dataset(&c, &run.suite, per_task, run.seed)?;
            let corpus = encode_corpus(&m, &data)?;
            let targets = relabel_dataset(&data, &corpus, &vocab)?;
            let mut out = String::new();
            for (seq, t) in corpus.iter().zip(&targets) {
                let line = serde_json::json!({ "task": seq.task, "episode": seq.episode, "targets": t });
                out.push_str(&line.to_string());
                out.push('\n');
            }
            fs::write(run.path("targets.jsonl"), out)?;
            run.row("all", "timesteps", targets.iter().map(Vec::len).sum::<usize>() as f64);
        }
        Command::TrainMultitask { model, vocab } => {
            let (m, vocab) = (load_model(model)?, load_vocab(vocab)?);
            let data = load_or_generate_dataset(&c, &run.suite, per_task, run.seed)?;
            let (trained, r) = train_multitask(
                &m,
                &vocab,
                &data,
                &run.suite.pretrain,
                &c.multitask,
                c.cap_k,
                c.policy_config(),
                run.seed,
            )?;
            trained.save(run.path("multitask.ckpt"))?;
            for (task, s) in &r.per_task {
                run.row(task, "multitask_success", *s);
            }
            run.row("mean", "multitask_success", r.mean_success);
            run.row("all", "multitask_final_ce", r.final_ce);
        }
        Command::Fewshot { model, vocab, task } => {
            let (m, vocab) = (load_model(model)?, load_vocab(vocab)?);
            let ids: Vec<usize> = if task.is_empty() {
                run.suite.heldout.iter().map(|t| t.id).collect()
            } else {
                task.clone()
            };
            let mut results = Vec::new();
            for id in ids {
                let t = run.suite.task(id)?.clone();
                let demos = generate_dataset(std::slice::from_ref(&t), c.fewshot.demos, derive_seed(run.seed, "demos"))?;
                let r = fewshot_adapt(&m, &vocab, &t, &demos, &c.fewshot, c.cap_k, c.policy_config(), run.seed)?;
                run.row(id, "fewshot_success", r.best_success);
                results.push(r);
            }
            let mean = results.iter().map(|r| r.best_success).sum::<f64>() / results.len() as f64;
            run.row("mean", "fewshot_success", mean);
            run.write_json("fewshot.json", &results)?;
        }
        Command::Rollout {
            model,
            vocab,
            task,
            episodes,
            sampled,
        } => {
            let (m, vocab) = (load_model(model)?, load_vocab(vocab)?);
            if m.policy.is_none() {
                bail!("model {} has no policy; train one with train-multitask", model.display());
            }
            let t = run.suite.task(*task)?.clone();
            let mode = if *sampled { RolloutMode::Sampled } else { RolloutMode::Greedy };
            let s = evaluate_policy(&m, &vocab, &t, c.cap_k, mode, *episodes, derive_seed(run.seed, "eval"))?;
            run.row(task, "success_rate", s.success_rate);
            run.write_json("rollouts.json", &s)?;
        }
        Command::Zeta { model } => {
            let m = load_model(model)?;
            let data = load_or_generate_dataset(&c, &run.suite, per_task, run.seed)?;
            let z = run_zeta(&c.zeta, &m, &data, run.seed)?;
            run.row("all", "zeta", z);
        }
        Command::Histogram { vocab, corpus } => {
            let vocab = load_vocab(vocab)?;
            let corpus = match corpus {
                Some(p) => load_corpus(p)?,
                None => Vec::new(),
            };
            let h = corpus_histogram(&vocab, &corpus)?;
            for (len, n) in &h.vocabulary {
                run.row(len, "vocab_tokens", *n as f64);
            }
            for (len, n) in &h.usage {
                run.row(len, "usage_timesteps", *n as f64);
            }
            run.row("all", "vocab_mean_token_length", h.vocabulary_mean());
            if !corpus.is_empty() {
                run.row("all", "usage_mean_token_length", h.usage_mean());
            }
            run.write_json("histogram.json", &h)?;
        }
        Command::Ablate => {
            let outcome = run_ablation(&c)?;
            for e in &outcome.errors {
                log::warn!("{} seed {} failed at {}: {}", e.run_id, e.seed, e.stage, e.message);
            }
            run.write_json("errors.json", &outcome.errors)?;
            run.rows = outcome.rows;
        }
        Command::Report { metrics } => {
            let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
            let rows = metrics_from_csv(&text)?;
            fs::write(run.path("report.svg"), render_report(&rows))?;
            run.row("all", "rows", rows.len() as f64);
        }
    }
    Ok(())
}
