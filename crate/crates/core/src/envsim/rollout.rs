//! Closed-loop execution of a skill-token policy.
//!
//! At a decision point the policy picks a token; its codes are then executed
//! in order, each decoded against a latent re-embedded from the live
//! observation history, for `min(L_ξ, cap_k, steps left)` steps before the
//! policy is queried again.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::episode_rng;
use super::{EpisodeResult, PointMassTask, ACTION_DIM, OBS_DIM};
use crate::bpe::{TokenId, Vocabulary};
use crate::decoder::DecodedAction;
use crate::encoder::window_at;
use crate::error::{Error, Result};
use crate::loss::softmax;
use crate::model::SkillModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Argmax token, point action (mixture mean for GMM decoders).
    #[default]
    Greedy,
    /// Sampled token and, for GMM decoders, sampled action.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub step: usize,
    pub token: TokenId,
    pub executed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub result: EpisodeResult,
    pub decisions: Vec<Decision>,
}

fn check_binding(model: &SkillModel, vocab: &Vocabulary) -> Result<()> {
    model.check_vocabulary(vocab)?;
    if model.config.encoder.obs_dim != OBS_DIM || model.config.action_dim != ACTION_DIM {
        return Err(Error::Binding(format!(
            "model built for obs/action {}/{}, environment has {OBS_DIM}/{ACTION_DIM}",
            model.config.encoder.obs_dim, model.config.action_dim
        )));
    }
    Ok(())
}

pub fn rollout_skill_policy(
    model: &SkillModel,
    vocab: &Vocabulary,
    task: &PointMassTask,
    start: [f64; 2],
    cap_k: usize,
    mode: RolloutMode,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutTrace> {
    check_binding(model, vocab)?;
    if cap_k == 0 {
        return Err(Error::Config("cap_k must be at least 1".into()));
    }
    let policy = model.policy()?;
    let window = model.config.encoder.window;
    let codes = model.quantizer.codes(&model.store);
    let embed = |history: &[Vec<f64>]| -> Result<Vec<f64>> {
        let t = history.len() - 1;
        Ok(model
            .encoder
            .embed(&model.store, &window_at(history, t, window), task.id, t)?
            .z)
    };

    let mut state = task.reset(start);
    let mut history = vec![task.observe(&state)];
    let mut decisions = Vec::new();
    loop {
        let z = embed(&history)?;
        let logits = policy.token_logits(&model.store, &z, task.id)?;
        let token = match mode {
            RolloutMode::Greedy => argmax(&logits),
            RolloutMode::Sampled => WeightedIndex::new(softmax(&logits))
                .map_err(|e| Error::Sampling(e.to_string()))?
                .sample(rng),
        };
        let plan = vocab.expand_token(token)?;
        let budget = task.max_steps - state.steps;
        let n = plan.len().min(cap_k).min(budget);
        let mut executed = 0;
        let mut done = false;
        for (i, &code) in plan[..n].iter().enumerate() {
            let zi = if i == 0 { z.clone() } else { embed(&history)? };
            let action = match model.decoder.decode_action(&model.store, &zi, codes.row_slice(code))? {
                DecodedAction::Gmm(g) if mode == RolloutMode::Sampled => g.sample(rng),
                other => other.point(),
            };
            let out = task.step(&state, &action)?;
            state = out.state;
            history.push(task.observe(&state));
            executed += 1;
            if out.done {
                done = true;
                break;
            }
        }
        decisions.push(Decision {
            step: state.steps - executed,
            token,
            executed,
        });
        if done {
            return Ok(RolloutTrace {
                result: EpisodeResult {
                    success: task.is_complete(&state),
                    steps_taken: state.steps,
                    final_distance: task.distance_to_target(&state),
                },
                decisions,
            });
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub results: Vec<EpisodeResult>,
}

/// Runs `episodes` rollouts from jittered starts, in parallel, each with its
/// own stream derived from `(seed, task, episode)`; results keep episode
/// order.
pub fn evaluate_policy(
    model: &SkillModel,
    vocab: &Vocabulary,
    task: &PointMassTask,
    cap_k: usize,
    mode: RolloutMode,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    check_binding(model, vocab)?;
    let results = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(seed, task.id, i);
            let start = task.jittered_start(&mut rng);
            rollout_skill_policy(model, vocab, task, start, cap_k, mode, &mut rng).map(|t| t.result)
        })
        .collect::<Result<Vec<_>>>()?;
    let wins = results.iter().filter(|r| r.success).count();
    Ok(EvalSummary {
        success_rate: if episodes == 0 { 0.0 } else { wins as f64 / episodes as f64 },
        results,
    })
}
