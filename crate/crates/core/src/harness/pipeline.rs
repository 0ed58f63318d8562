//! Pretrain, tokenize and adapt: the stages shared by the CLI and the
//! ablation runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, RunConfig};
use crate::bpe::{relabel_sequence, Vocabulary};
use crate::envsim::{evaluate_policy, generate_dataset, load_dataset, Dataset, PointMassTask, RolloutMode, TaskSuite};
use crate::error::{Error, Result};
use crate::model::SkillModel;
use crate::nn::{Adam, AdamConfig};
use crate::policy::{
    episode_latents, finetune_update, multitask_update, DemoEpisode, FinetuneConfig, FinetuneParts, FinetuneReport,
    PolicyConfig, PolicyNet, FINETUNE_PREFIXES,
};
use crate::pretrain::{encode_corpus, encode_episode, pretrain, CodeSequence, PretrainConfig, Stage1Report};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotConfig {
    /// Demonstrations per held-out task.
    pub demos: usize,
    pub epochs: usize,
    /// Evaluate after every this many epochs; the best checkpoint counts.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub finetune: FinetuneConfig,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            demos: 5,
            epochs: 30,
            eval_every: 3,
            eval_episodes: 40,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.demos == 0 || self.epochs == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("few-shot counts must be positive".into()));
        }
        if self.eval_every > self.epochs {
            return Err(Error::Config("eval_every exceeds the number of epochs".into()));
        }
        self.finetune.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub task: usize,
    pub best_success: f64,
    /// `(epoch, success rate)` at every evaluation.
    pub curve: Vec<(usize, f64)>,
    pub last_loss: Option<FinetuneReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultitaskConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_episodes: usize,
}

impl Default for MultitaskConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch_size: 64,
            eval_episodes: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskResult {
    /// `(task id, success rate)` per pretraining task.
    pub per_task: Vec<(usize, f64)>,
    pub mean_success: f64,
    pub final_ce: f64,
}

/// A pretrained model together with the data it saw and its code corpus.
#[derive(Clone, Debug)]
pub struct PretrainedRun {
    pub model: SkillModel,
    pub dataset: Dataset,
    pub corpus: Vec<CodeSequence>,
    pub history: Vec<Stage1Report>,
}

/// The configured dataset, or expert data for the suite's pretraining tasks.
/// Either way only the first `per_task` episodes of each task are kept.
pub fn load_or_generate_dataset(config: &RunConfig, suite: &TaskSuite, per_task: usize, seed: u64) -> Result<Dataset> {
    match &config.dataset {
        Some(path) => Ok(load_dataset(path)?.take_per_task(per_task)),
        None => generate_dataset(&suite.pretrain, per_task, derive_seed(seed, "data")),
    }
}

/// Stage-I pretraining followed by encoding the dataset into codes.
pub fn pretrain_model(
    config: &RunConfig,
    suite: &TaskSuite,
    codebook_size: usize,
    per_task: usize,
    use_dynamics: bool,
    seed: u64,
) -> Result<PretrainedRun> {
    let dataset = load_or_generate_dataset(config, suite, per_task, seed)?;
    let mut model = SkillModel::new(
        config.model_config(codebook_size, suite.num_tasks()),
        derive_seed(seed, "init"),
    )?;
    let stage1 = PretrainConfig {
        beta: config.resolved_beta()?,
        seed: derive_seed(seed, "pretrain"),
        use_dynamics,
        ..config.pretrain.clone()
    };
    let history = pretrain(&mut model, &dataset, &stage1)?;
    let corpus = encode_corpus(&model, &dataset)?;
    Ok(PretrainedRun {
        model,
        dataset,
        corpus,
        history,
    })
}

/// Latents, codes and greedy targets for each episode, from the frozen
/// encoder and quantizer.
pub fn prepare_demos(model: &SkillModel, vocab: &Vocabulary, dataset: &Dataset) -> Result<Vec<DemoEpisode>> {
    dataset
        .episodes
        .iter()
        .map(|ep| {
            let codes = encode_episode(model, ep)?;
            Ok(DemoEpisode {
                task: ep.task,
                latents: episode_latents(&model.encoder, &model.store, &ep.observations, ep.task, ep.len())?,
                actions: Tensor::from_rows(&ep.actions)?,
                targets: relabel_sequence(&codes, vocab)?,
                codes,
            })
        })
        .collect()
}

/// Every `(episode, t)` position of the demonstrations.
pub fn demo_positions(demos: &[DemoEpisode]) -> Vec<(usize, usize)> {
    demos
        .iter()
        .enumerate()
        .flat_map(|(e, d)| (0..d.len()).map(move |t| (e, t)))
        .collect()
}

fn sample_positions(all: &[(usize, usize)], n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..n).map(|_| all[rng.random_range(0..all.len())]).collect()
}

/// Few-shot adaptation on one held-out task: a fresh policy head is trained
/// with the decoder on the demonstrations, evaluated every `eval_every`
/// epochs; the best evaluation is reported.
#[allow(clippy::too_many_arguments)]
pub fn fewshot_adapt(
    pretrained: &SkillModel,
    vocab: &Vocabulary,
    task: &PointMassTask,
    demos: &Dataset,
    config: &FewShotConfig,
    cap_k: usize,
    policy: PolicyConfig,
    seed: u64,
) -> Result<FewShotResult> {
    config.validate()?;
    if demos.episodes.iter().any(|e| e.task != task.id) {
        return Err(Error::Validation(format!("demonstrations are not all of task {}", task.id)));
    }
    let finetune = FinetuneConfig {
        cap_k,
        ..config.finetune.clone()
    };
    finetune.validate()?;
    let mut model = pretrained.clone();
    model.attach_policy(policy, vocab, derive_seed(seed, "policy"))?;
    let prepared = prepare_demos(&model, vocab, demos)?;
    let all = demo_positions(&prepared);
    if all.is_empty() {
        return Err(Error::Sampling("demonstrations are empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "finetune"));
    let mut opt = Adam::for_prefixes(&model.store, &FINETUNE_PREFIXES, AdamConfig::with_lr(finetune.lr));
    let eval_seed = derive_seed(seed, "eval");
    let mut curve = Vec::new();
    let mut last_loss = None;
    for epoch in 1..=config.epochs {
        for _ in 0..finetune.steps_per_epoch {
            let batch = sample_positions(&all, finetune.batch_size, &mut rng);
            let parts = FinetuneParts {
                policy: model.policy.as_ref().expect("attached above"),
                decoder: &model.decoder,
                quantizer: &model.quantizer,
                vocab,
            };
            last_loss = Some(finetune_update(
                &mut model.store,
                &parts,
                &mut opt,
                &prepared,
                &batch,
                &finetune,
                &mut rng,
            )?);
        }
        if epoch % config.eval_every == 0 {
            let s = evaluate_policy(&model, vocab, task, cap_k, RolloutMode::Greedy, config.eval_episodes, eval_seed)?;
            log::debug!("task {} epoch {epoch}: success {}", task.id, s.success_rate);
            curve.push((epoch, s.success_rate));
        }
    }
    let best_success = curve.iter().map(|&(_, s)| s).fold(0.0, f64::max);
    Ok(FewShotResult {
        task: task.id,
        best_success,
        curve,
        last_loss,
    })
}

/// Multitask token policy on the pretraining data (cross-entropy on greedy
/// targets, everything but the policy frozen), evaluated on each task.
#[allow(clippy::too_many_arguments)]
pub fn train_multitask(
    pretrained: &SkillModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    tasks: &[PointMassTask],
    config: &MultitaskConfig,
    cap_k: usize,
    policy: PolicyConfig,
    seed: u64,
) -> Result<(SkillModel, MultitaskResult)> {
    if config.steps == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("multitask steps, batch size and lr must be positive".into()));
    }
    let mut model = pretrained.clone();
    model.attach_policy(policy, vocab, derive_seed(seed, "policy"))?;
    let prepared = prepare_demos(&model, vocab, dataset)?;
    let all = demo_positions(&prepared);
    if all.is_empty() {
        return Err(Error::Sampling("dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "multitask"));
    let mut opt = Adam::for_prefixes(&model.store, &[PolicyNet::PREFIX], AdamConfig::with_lr(config.lr));
    let mut final_ce = f64::NAN;
    for _ in 0..config.steps {
        let batch = sample_positions(&all, config.batch_size, &mut rng);
        let policy = model.policy.as_ref().expect("attached above");
        final_ce = multitask_update(&mut model.store, policy, &mut opt, &prepared, &batch)?;
    }
    let eval_seed = derive_seed(seed, "eval");
    let per_task = tasks
        .iter()
        .map(|t| {
            evaluate_policy(&model, vocab, t, cap_k, RolloutMode::Greedy, config.eval_episodes, eval_seed)
                .map(|s| (t.id, s.success_rate))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_success = per_task.iter().map(|&(_, s)| s).sum::<f64>() / per_task.len().max(1) as f64;
    Ok((
        model,
        MultitaskResult {
            per_task,
            mean_success,
            final_ce,
        },
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bpe::{train_bpe, BpeConfig};
    use crate::harness::ModelScale;

    pub(crate) fn quick_config() -> RunConfig {
        let mut c = RunConfig {
            codebook_size: 4,
            vocab_size: 8,
            cap_k: 3,
            trajectories_per_task: 2,
            model: ModelScale {
                latent_dim: 8,
                window: 2,
                feature_dim: 6,
                encoder_hidden: vec![8],
                task_embed_dim: 2,
                code_dim: 3,
                decoder_hidden: vec![8],
                gmm_components: 2,
                policy_hidden: vec![8],
                ..ModelScale::default()
            },
            ..RunConfig::default()
        };
        c.pretrain.steps = 5;
        c.pretrain.batch_size = 4;
        c.fewshot.demos = 2;
        c.fewshot.epochs = 2;
        c.fewshot.eval_every = 1;
        c.fewshot.eval_episodes = 2;
        c.fewshot.finetune.steps_per_epoch = 2;
        c.fewshot.finetune.batch_size = 4;
        c.multitask.steps = 3;
        c.multitask.batch_size = 4;
        c.multitask.eval_episodes = 1;
        c
    }

    #[test]
    fn pipeline_stages_are_deterministic() {
        let cfg = quick_config();
        let suite = TaskSuite::standard();
        let run = |seed| {
            let p = pretrain_model(&cfg, &suite, 4, 2, true, seed).unwrap();
            let vocab = train_bpe(&p.corpus, &BpeConfig::new(4, 8)).unwrap();
            let task = &suite.heldout[0];
            let demos = generate_dataset(std::slice::from_ref(task), 2, 9).unwrap();
            let fs = fewshot_adapt(&p.model, &vocab, task, &demos, &cfg.fewshot, 3, cfg.policy_config(), seed).unwrap();
            let (_, mt) =
                train_multitask(&p.model, &vocab, &p.dataset, &suite.pretrain[..2], &cfg.multitask, 3, cfg.policy_config(), seed)
                    .unwrap();
            (p.history, p.corpus, fs, mt)
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a.0.len(), 5);
        assert_eq!(a.1.len(), 16);
        assert_eq!(a.2.curve.len(), 2);
        assert_eq!(a.3.per_task.len(), 2);
    }

    #[test]
    fn demos_align_with_episodes() {
        let cfg = quick_config();
        let suite = TaskSuite::standard();
        let m = SkillModel::new(cfg.model_config(4, suite.num_tasks()), 0).unwrap();
        let data = generate_dataset(&suite.heldout, 1, 0).unwrap();
        let vocab = Vocabulary::base(4);
        let demos = prepare_demos(&m, &vocab, &data).unwrap();
        for (d, ep) in demos.iter().zip(&data.episodes) {
            assert_eq!(d.len(), ep.len());
            assert_eq!(d.latents.rows(), ep.len());
            assert_eq!(d.targets, d.codes);
        }
        assert_eq!(demo_positions(&demos).len(), data.total_steps());
    }

    #[test]
    fn fewshot_rejects_foreign_demos() {
        let cfg = quick_config();
        let suite = TaskSuite::standard();
        let m = SkillModel::new(cfg.model_config(4, suite.num_tasks()), 0).unwrap();
        let data = generate_dataset(&suite.pretrain[..1], 1, 0).unwrap();
        let r = fewshot_adapt(&m, &Vocabulary::base(4), &suite.heldout[0], &data, &cfg.fewshot, 1, cfg.policy_config(), 0);
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
