//! The full set of networks sharing one parameter store, and conversion to
//! and from checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::Vocabulary;
use crate::checkpoint::Checkpoint;
use crate::decoder::{ActionDecoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::params::ParamStore;
use crate::policy::{PolicyConfig, PolicyNet};
use crate::quantizer::{Quantizer, QuantizerConfig};
use crate::worldmodel::{DynamicsConfig, DynamicsNets};

pub const META_MODEL_CONFIG: &str = "model_config";
pub const META_DECODER_MODE: &str = "decoder_mode";
pub const META_POLICY_CONFIG: &str = "policy_config";
pub const META_VOCAB_SHA256: &str = "vocab_sha256";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub dynamics: DynamicsConfig,
    pub decoder: DecoderConfig,
    pub action_dim: usize,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(obs_dim: usize, action_dim: usize, num_tasks: usize) -> Self {
        Self {
            encoder: EncoderConfig::new(obs_dim, num_tasks),
            quantizer: QuantizerConfig::default(),
            dynamics: DynamicsConfig::default(),
            decoder: DecoderConfig::default(),
            action_dim,
            activation: Activation::Relu,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    pub fn code_dim(&self) -> usize {
        self.quantizer.code_dim
    }
}

#[derive(Clone, Debug)]
pub struct SkillModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub quantizer: Quantizer,
    pub dynamics: DynamicsNets,
    pub decoder: ActionDecoder,
    pub policy: Option<PolicyNet>,
    /// Fingerprint of the vocabulary the policy head was built for.
    pub vocab_fingerprint: Option<String>,
}

impl SkillModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let latent = config.latent_dim();
        let encoder = Encoder::new(&mut store, config.encoder.clone(), config.activation, &mut rng)?;
        let quantizer = Quantizer::new(
            &mut store,
            config.quantizer.clone(),
            latent,
            config.action_dim,
            &mut rng,
        )?;
        let dynamics = DynamicsNets::new(
            &mut store,
            &config.dynamics,
            latent,
            config.code_dim(),
            config.activation,
            &mut rng,
        )?;
        let decoder = ActionDecoder::new(
            &mut store,
            config.decoder.clone(),
            latent,
            config.code_dim(),
            config.action_dim,
            config.activation,
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            quantizer,
            dynamics,
            decoder,
            policy: None,
            vocab_fingerprint: None,
        })
    }

    pub fn codebook_size(&self) -> usize {
        self.quantizer.codebook_size()
    }

    /// Adds a fresh policy head sized for `vocab`, replacing any existing one.
    pub fn attach_policy(&mut self, config: PolicyConfig, vocab: &Vocabulary, seed: u64) -> Result<()> {
        if vocab.codebook_size() != self.codebook_size() {
            return Err(Error::Binding(format!(
                "vocabulary built on {} codes, model has {}",
                vocab.codebook_size(),
                self.codebook_size()
            )));
        }
        self.drop_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyNet::new(
            &mut self.store,
            config,
            self.config.latent_dim(),
            self.config.encoder.num_tasks,
            vocab.len(),
            self.config.activation,
            &mut rng,
        )?;
        self.policy = Some(policy);
        self.vocab_fingerprint = Some(vocab.fingerprint());
        Ok(())
    }

    pub fn drop_policy(&mut self) {
        if self.policy.take().is_some() {
            self.store = self.store.without_prefix(PolicyNet::PREFIX);
            self.vocab_fingerprint = None;
        }
    }

    pub fn policy(&self) -> Result<&PolicyNet> {
        self.policy
            .as_ref()
            .ok_or_else(|| Error::Binding("model has no policy head".into()))
    }

    /// Errors unless the policy head was built for exactly `vocab`.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        let policy = self.policy()?;
        if policy.vocab_size() != vocab.len() {
            return Err(Error::Binding(format!(
                "policy predicts {} tokens, vocabulary has {}",
                policy.vocab_size(),
                vocab.len()
            )));
        }
        match &self.vocab_fingerprint {
            Some(f) if *f == vocab.fingerprint() => Ok(()),
            _ => Err(Error::Binding("policy was trained against a different vocabulary".into())),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.store.clone());
        ckpt.metadata
            .insert(META_MODEL_CONFIG.into(), serde_json::to_string(&self.config)?);
        ckpt.metadata
            .insert(META_DECODER_MODE.into(), self.decoder.mode().as_str().into());
        if let Some(p) = &self.policy {
            ckpt.metadata
                .insert(META_POLICY_CONFIG.into(), serde_json::to_string(&p.config)?);
        }
        if let Some(f) = &self.vocab_fingerprint {
            ckpt.metadata.insert(META_VOCAB_SHA256.into(), f.clone());
        }
        Ok(ckpt)
    }

    /// Rebuilds the networks from the recorded configuration and copies
    /// every parameter by name. Shapes and name sets must agree exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(
            ckpt.metadata
                .get(META_MODEL_CONFIG)
                .ok_or_else(|| Error::Checkpoint("missing model configuration".into()))?,
        )?;
        let mut model = Self::new(config, 0)?;
        if let Some(mode) = ckpt.metadata.get(META_DECODER_MODE) {
            if mode != model.decoder.mode().as_str() {
                return Err(Error::Checkpoint(format!(
                    "decoder mode {mode} disagrees with the stored configuration"
                )));
            }
        }
        if let Some(pc) = ckpt.metadata.get(META_POLICY_CONFIG) {
            let pc: PolicyConfig = serde_json::from_str(pc)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let policy = PolicyNet::new(
                &mut model.store,
                pc.clone(),
                model.config.latent_dim(),
                model.config.encoder.num_tasks,
                pc.vocab_size,
                model.config.activation,
                &mut rng,
            )?;
            model.policy = Some(policy);
            model.vocab_fingerprint = ckpt.metadata.get(META_VOCAB_SHA256).cloned();
        }
        if model.store.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        model.store.copy_prefix_from(&ckpt.params, "")?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
