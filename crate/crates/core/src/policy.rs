//! Skill-token policy: latent state plus task id to logits over the
//! vocabulary, trained by cross-entropy on relabeled targets and finetuned
//! together with the decoder on few-shot demonstrations.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bpe::{TokenId, Vocabulary};
use crate::decoder::ActionDecoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::loss::softmax;
use crate::nn::{Activation, Adam, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::quantizer::Quantizer;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub task_embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Output width; filled in from the bound vocabulary.
    pub vocab_size: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            task_embed_dim: 8,
            hidden: vec![128],
            vocab_size: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    net: Mlp,
    task_table: Option<ParamId>,
    latent_dim: usize,
    num_tasks: usize,
}

impl PolicyNet {
    pub const PREFIX: &'static str = "policy/";

    pub fn new(
        store: &mut ParamStore,
        mut config: PolicyConfig,
        latent_dim: usize,
        num_tasks: usize,
        vocab_size: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::Config("policy needs a non-empty vocabulary".into()));
        }
        config.vocab_size = vocab_size;
        let mut sizes = vec![latent_dim + config.task_embed_dim];
        sizes.extend(&config.hidden);
        sizes.push(vocab_size);
        let net = Mlp::new(store, "policy/net", &sizes, activation, rng)?;
        let task_table = if config.task_embed_dim > 0 {
            Some(store.insert_uniform(
                "policy/task_embedding",
                num_tasks,
                config.task_embed_dim,
                1.0,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            net,
            task_table,
            latent_dim,
            num_tasks,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// `B × |V|` logits. `z` is detached here so no policy loss can reach
    /// the encoder.
    pub fn forward(&self, tape: &Tape, z: Var, tasks: &[usize]) -> Var {
        let mut parts = vec![tape.stop_gradient(z)];
        if let Some(table) = self.task_table {
            parts.push(tape.gather_rows(tape.param(table), tasks));
        }
        let x = tape.concat_cols(&parts);
        self.net.forward(tape, x)
    }

    fn check(&self, z_width: usize, tasks: &[usize]) -> Result<()> {
        if z_width != self.latent_dim {
            return Err(Error::Shape(format!(
                "policy expects latent {}, got {z_width}",
                self.latent_dim
            )));
        }
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.num_tasks) {
            return Err(Error::Lookup(format!("task {t} not in the {} known tasks", self.num_tasks)));
        }
        Ok(())
    }

    pub fn token_logits(&self, store: &ParamStore, z: &[f64], task: usize) -> Result<Vec<f64>> {
        Ok(self.logits_batch(store, &Tensor::row(z), &[task])?.into_data())
    }

    pub fn logits_batch(&self, store: &ParamStore, z: &Tensor, tasks: &[usize]) -> Result<Tensor> {
        self.check(z.cols(), tasks)?;
        let tape = Tape::inference(store);
        let zv = tape.constant(z.clone());
        Ok(tape.value(self.forward(&tape, zv, tasks)))
    }
}

/// One demonstration prepared for policy training: frozen-encoder latents,
/// actions and greedy token targets, all of episode length.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoEpisode {
    pub task: usize,
    pub latents: Tensor,
    pub actions: Tensor,
    pub codes: Vec<usize>,
    pub targets: Vec<TokenId>,
}

impl DemoEpisode {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Embeds every timestep of an episode with the (frozen) encoder.
pub fn episode_latents(encoder: &Encoder, store: &ParamStore, observations: &[Vec<f64>], task: usize, steps: usize) -> Result<Tensor> {
    let w = encoder.config.window;
    let windows: Vec<Vec<Vec<f64>>> = (0..steps)
        .map(|t| crate::encoder::window_at(observations, t, w))
        .collect();
    encoder.check_inputs(&windows[0], task)?;
    let stacked = crate::encoder::stack_windows(&windows);
    let tape = Tape::inference(store);
    Ok(tape.value(encoder.forward(&tape, &stacked, &vec![task; steps])))
}

/// A batch of `(episode, t)` positions.
pub type Positions = [(usize, usize)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationMode {
    /// Exact probability-weighted sum over admissible tokens.
    #[default]
    Full,
    /// One token drawn from the policy; the decoder term then carries no
    /// gradient to the policy.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub cap_k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub expectation: ExpectationMode,
    /// Weight of the decoder term relative to cross-entropy.
    pub decoder_weight: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            cap_k: 5,
            lr: 1e-4,
            epochs: 30,
            steps_per_epoch: 200,
            batch_size: 32,
            expectation: ExpectationMode::Full,
            decoder_weight: 1.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cap_k < 1 {
            return Err(Error::Config("cap_k must be at least 1".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub ce: f64,
    pub ft_decoder: f64,
    pub total: f64,
}

/// Nodes of one finetuning objective evaluation.
pub struct FinetuneGraph {
    pub ce: Var,
    pub ft_decoder: Var,
    pub total: Var,
    /// `B × |V|` expectation weights.
    pub weights: Var,
}

/// The `(offset, code)` pairs decoded by some token within `cap`, ascending,
/// and `S[r, ξ] = 1` when token `ξ` has code `c` at offset `i < min(cap, L_ξ)`
/// for pair `r = (i, c)`.
pub fn selection_matrix(vocab: &Vocabulary, cap: usize) -> (Vec<(usize, usize)>, Tensor) {
    let pairs: Vec<(usize, usize)> = vocab
        .tokens()
        .iter()
        .flat_map(|tok| tok.codes.iter().take(cap).copied().enumerate())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut s = Tensor::zeros(pairs.len(), vocab.len());
    for tok in vocab.tokens() {
        for pair in tok.codes.iter().take(cap).copied().enumerate() {
            let r = pairs.binary_search(&pair).expect("pair collected above");
            s.row_slice_mut(r)[tok.id] = 1.0;
        }
    }
    (pairs, s)
}

/// Everything the finetuning objective reads.
pub struct FinetuneParts<'m> {
    pub policy: &'m PolicyNet,
    pub decoder: &'m ActionDecoder,
    pub quantizer: &'m Quantizer,
    pub vocab: &'m Vocabulary,
}

/// Builds `CE(π(z_t), ξ_t) + w · E_ξ~π [Σ_{i<min(K, L_ξ)} ℓ(ψ(z_{t+i}, ξ[i]), a_{t+i})]`
/// averaged over the batch, with the expectation restricted to tokens that
/// fit in the remaining episode.
pub fn finetune_objective(
    tape: &Tape,
    parts: &FinetuneParts,
    demos: &[DemoEpisode],
    positions: &Positions,
    config: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FinetuneGraph> {
    config.validate()?;
    let vocab = parts.vocab;
    let v = vocab.len();
    if parts.policy.vocab_size() != v {
        return Err(Error::Binding("policy and vocabulary sizes differ".into()));
    }
    let b = positions.len();
    let (pairs, selection) = selection_matrix(vocab, config.cap_k);

    let mut z_rows = Vec::with_capacity(b);
    let mut tasks = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    let mut mask = Vec::with_capacity(b * v);
    let mut big_z = Vec::with_capacity(b * pairs.len());
    let mut big_codes = Vec::with_capacity(b * pairs.len());
    let mut big_actions = Vec::with_capacity(b * pairs.len());
    for &(ep, t) in positions {
        let demo = demos.get(ep).ok_or(Error::Index {
            index: ep,
            bound: demos.len(),
        })?;
        if t >= demo.len() {
            return Err(Error::Index {
                index: t,
                bound: demo.len(),
            });
        }
        let remaining = demo.len() - t;
        z_rows.push(demo.latents.row_slice(t));
        tasks.push(demo.task);
        targets.push(demo.targets[t]);
        mask.extend(vocab.tokens().iter().map(|tok| tok.len() <= remaining));
        for &(i, code) in &pairs {
            // Offsets past the episode end only feed masked-out tokens.
            let s = (t + i).min(demo.len() - 1);
            big_z.push(demo.latents.row_slice(s));
            big_codes.push(code);
            big_actions.push(demo.actions.row_slice(s));
        }
    }

    let z = tape.constant(Tensor::from_rows(&z_rows)?);
    let logits = parts.policy.forward(tape, z, &tasks);
    let ce = tape.mean(tape.softmax_cross_entropy(logits, &targets)?);

    let zs = tape.constant(Tensor::from_rows(&big_z)?);
    let codes = tape.gather_rows(tape.param(parts.quantizer.codebook), &big_codes);
    let out = parts.decoder.forward(tape, zs, codes);
    let step_loss = parts
        .decoder
        .loss_rows(tape, out, &Tensor::from_rows(&big_actions)?)?;
    let per_pair = tape.reshape(step_loss, b, pairs.len());
    let token_loss = tape.matmul(per_pair, tape.constant(selection));

    let weights = match config.expectation {
        ExpectationMode::Full => tape.masked_softmax(logits, &mask)?,
        ExpectationMode::Sampled => {
            let probs = tape.value(tape.masked_softmax(logits, &mask)?);
            let mut onehot = Tensor::zeros(b, v);
            for r in 0..b {
                let dist = WeightedIndex::new(probs.row_slice(r))
                    .map_err(|e| Error::Sampling(e.to_string()))?;
                onehot.row_slice_mut(r)[dist.sample(rng)] = 1.0;
            }
            tape.constant(onehot)
        }
    };
    let ft = tape.scale(tape.sum(tape.mul(weights, token_loss)), 1.0 / b as f64);
    let total = tape.add(ce, tape.scale(ft, config.decoder_weight));
    Ok(FinetuneGraph {
        ce,
        ft_decoder: ft,
        total,
        weights,
    })
}

/// Prefixes trained during finetuning; everything else stays frozen.
pub const FINETUNE_PREFIXES: [&str; 2] = [PolicyNet::PREFIX, ActionDecoder::PREFIX];

/// One optimizer step of the finetuning objective on policy and decoder.
pub fn finetune_update(
    store: &mut ParamStore,
    parts: &FinetuneParts,
    optimizer: &mut Adam,
    demos: &[DemoEpisode],
    positions: &Positions,
    config: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FinetuneReport> {
    let (report, grads) = {
        let tape = Tape::with_params(store).train_only(&FINETUNE_PREFIXES);
        let g = finetune_objective(&tape, parts, demos, positions, config, rng)?;
        let report = FinetuneReport {
            ce: tape.scalar(g.ce),
            ft_decoder: tape.scalar(g.ft_decoder),
            total: tape.scalar(g.total),
        };
        (report, tape.backward(g.total)?)
    };
    optimizer.step(store, &grads);
    Ok(report)
}

/// Cross-entropy on relabeled targets; one step on the policy only.
pub fn multitask_update(
    store: &mut ParamStore,
    policy: &PolicyNet,
    optimizer: &mut Adam,
    demos: &[DemoEpisode],
    positions: &Positions,
) -> Result<f64> {
    let (loss, grads) = {
        let tape = Tape::with_params(store).train_only(&[PolicyNet::PREFIX]);
        let ce = multitask_loss(&tape, policy, demos, positions)?;
        (tape.scalar(ce), tape.backward(ce)?)
    };
    optimizer.step(store, &grads);
    Ok(loss)
}

pub fn multitask_loss(tape: &Tape, policy: &PolicyNet, demos: &[DemoEpisode], positions: &Positions) -> Result<Var> {
    let mut z_rows = Vec::with_capacity(positions.len());
    let mut tasks = Vec::with_capacity(positions.len());
    let mut targets = Vec::with_capacity(positions.len());
    for &(ep, t) in positions {
        let d = &demos[ep];
        z_rows.push(d.latents.row_slice(t));
        tasks.push(d.task);
        targets.push(d.targets[t]);
    }
    let z = tape.constant(Tensor::from_rows(&z_rows)?);
    let logits = policy.forward(tape, z, &tasks);
    Ok(tape.mean(tape.softmax_cross_entropy(logits, &targets)?))
}

/// Per-step code classification plus single-step decoder regression,
/// written directly: the probability of code `c` is `exp(-CE(logits, c))`
/// and each code's decoder loss is computed from its own forward pass.
pub fn per_step_code_bc_objective(
    tape: &Tape,
    policy: &PolicyNet,
    decoder: &ActionDecoder,
    quantizer: &Quantizer,
    demos: &[DemoEpisode],
    positions: &Positions,
    decoder_weight: f64,
) -> Result<(Var, Var, Var)> {
    let b = positions.len();
    let mut z_rows = Vec::with_capacity(b);
    let mut a_rows = Vec::with_capacity(b);
    let mut tasks = Vec::with_capacity(b);
    let mut codes = Vec::with_capacity(b);
    for &(ep, t) in positions {
        let d = &demos[ep];
        z_rows.push(d.latents.row_slice(t));
        a_rows.push(d.actions.row_slice(t));
        tasks.push(d.task);
        codes.push(d.codes[t]);
    }
    let z = tape.constant(Tensor::from_rows(&z_rows)?);
    let actions = Tensor::from_rows(&a_rows)?;
    let logits = policy.forward(tape, z, &tasks);
    let ce = tape.mean(tape.softmax_cross_entropy(logits, &codes)?);
    let book = tape.param(quantizer.codebook);
    let mut ft = None;
    for c in 0..quantizer.codebook_size() {
        let p = tape.exp(tape.scale(tape.softmax_cross_entropy(logits, &vec![c; b])?, -1.0));
        let e = tape.gather_rows(book, &vec![c; b]);
        let l = decoder.loss_rows(tape, decoder.forward(tape, z, e), &actions)?;
        let term = tape.mul(p, l);
        ft = Some(match ft {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let ft = tape.mean(ft.expect("codebook has at least two codes"));
    let total = tape.add(ce, tape.scale(ft, decoder_weight));
    Ok((ce, ft, total))
}

/// Probabilities of the policy at one state; sums to 1.
pub fn token_probabilities(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}
