//! Action decoder: `(z, code) -> action` (L1 mode) or `-> GMM` (NLL mode).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{gmm_nll, l1_distance, GmmParams};
use crate::nn::{Activation, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    #[serde(rename = "l1")]
    DeterministicL1,
    Gmm,
}

impl DecoderMode {
    /// Decoder-loss weight used by the joint pretraining objective.
    pub fn default_beta(self) -> f64 {
        match self {
            DecoderMode::DeterministicL1 => 1.0,
            DecoderMode::Gmm => 0.01,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::DeterministicL1 => "l1",
            DecoderMode::Gmm => "gmm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(DecoderMode::DeterministicL1),
            "gmm" => Ok(DecoderMode::Gmm),
            other => Err(Error::Config(format!("unknown decoder mode {other}"))),
        }
    }
}

/// Resolves the decoder-loss weight. An explicit value that differs from the
/// mode's default is only accepted with `allow_override`.
pub fn resolve_beta(mode: DecoderMode, beta: Option<f64>, allow_override: bool) -> Result<f64> {
    let default = mode.default_beta();
    match beta {
        None => Ok(default),
        Some(b) if b == default || allow_override => {
            if b < 0.0 || !b.is_finite() {
                return Err(Error::Config(format!("beta must be finite and >= 0, got {b}")));
            }
            Ok(b)
        }
        Some(b) => Err(Error::Config(format!(
            "beta {b} does not match the {} decoder default {default}; pass an explicit override",
            mode.as_str()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub mode: DecoderMode,
    pub gmm_components: usize,
    pub hidden: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            mode: DecoderMode::DeterministicL1,
            gmm_components: 5,
            hidden: vec![128, 128],
        }
    }
}

const LOG_STD_CENTER: f64 = -1.5;
const LOG_STD_SPAN: f64 = 2.5;

/// Tape-level decoder output.
#[derive(Clone, Copy, Debug)]
pub enum DecoderOutput {
    Action(Var),
    Gmm { logits: Var, means: Var, log_std: Var },
}

/// Value-level decoder output.
#[derive(Clone, Debug, PartialEq)]
pub enum DecodedAction {
    Action(Vec<f64>),
    Gmm(GmmParams),
}

impl DecodedAction {
    /// The action executed in evaluation: the point prediction, or the
    /// mixture mean.
    pub fn point(&self) -> Vec<f64> {
        match self {
            DecodedAction::Action(a) => a.clone(),
            DecodedAction::Gmm(g) => g.expected_action(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionDecoder {
    pub config: DecoderConfig,
    pub net: Mlp,
    latent_dim: usize,
    code_dim: usize,
    action_dim: usize,
}

impl ActionDecoder {
    pub const PREFIX: &'static str = "decoder/";

    pub fn new(
        store: &mut ParamStore,
        config: DecoderConfig,
        latent_dim: usize,
        code_dim: usize,
        action_dim: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.mode == DecoderMode::Gmm && config.gmm_components == 0 {
            return Err(Error::Config("GMM decoder needs at least one component".into()));
        }
        let out = match config.mode {
            DecoderMode::DeterministicL1 => action_dim,
            DecoderMode::Gmm => config.gmm_components * (1 + 2 * action_dim),
        };
        let mut sizes = vec![latent_dim + code_dim];
        sizes.extend(&config.hidden);
        sizes.push(out);
        let net = Mlp::new(store, "decoder/net", &sizes, activation, rng)?;
        Ok(Self {
            config,
            net,
            latent_dim,
            code_dim,
            action_dim,
        })
    }

    pub fn mode(&self) -> DecoderMode {
        self.config.mode
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn forward(&self, tape: &Tape, z: Var, code: Var) -> DecoderOutput {
        let x = tape.concat_cols(&[z, code]);
        let h = self.net.forward(tape, x);
        match self.config.mode {
            DecoderMode::DeterministicL1 => DecoderOutput::Action(h),
            DecoderMode::Gmm => {
                let m = self.config.gmm_components;
                let ma = m * self.action_dim;
                let logits = tape.slice_cols(h, 0, m);
                let means = tape.slice_cols(h, m, m + ma);
                let raw = tape.slice_cols(h, m + ma, m + 2 * ma);
                // log σ bounded to (center - span, center + span).
                let bounded = tape.scale(tape.tanh(raw), LOG_STD_SPAN);
                let center = tape.constant(Tensor::filled(1, ma, LOG_STD_CENTER));
                let log_std = tape.add_bias(bounded, center);
                DecoderOutput::Gmm {
                    logits,
                    means,
                    log_std,
                }
            }
        }
    }

    /// Per-row action loss, `B × 1`.
    pub fn loss_rows(&self, tape: &Tape, out: DecoderOutput, target: &Tensor) -> Result<Var> {
        match out {
            DecoderOutput::Action(pred) => {
                let t = tape.constant(target.clone());
                Ok(tape.row_sum(tape.abs(tape.sub(pred, t))))
            }
            DecoderOutput::Gmm {
                logits,
                means,
                log_std,
            } => tape.gmm_nll(logits, means, log_std, target),
        }
    }

    pub fn check_inputs(&self, z: &[f64], code: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim || code.len() != self.code_dim {
            return Err(Error::Shape(format!(
                "decoder expects latent {} and code {}, got {} and {}",
                self.latent_dim,
                self.code_dim,
                z.len(),
                code.len()
            )));
        }
        Ok(())
    }

    pub fn decode_action(&self, store: &ParamStore, z: &[f64], code: &[f64]) -> Result<DecodedAction> {
        self.check_inputs(z, code)?;
        let tape = Tape::inference(store);
        let zv = tape.constant(Tensor::row(z));
        let cv = tape.constant(Tensor::row(code));
        let out = self.forward(&tape, zv, cv);
        decoded_row(&tape, out, 0, self.action_dim)
    }

    /// Decodes many `(z, code)` rows at once.
    pub fn decode_batch(&self, store: &ParamStore, z: &Tensor, codes: &Tensor) -> Result<Vec<DecodedAction>> {
        let tape = Tape::inference(store);
        let zv = tape.constant(z.clone());
        let cv = tape.constant(codes.clone());
        let out = self.forward(&tape, zv, cv);
        (0..z.rows())
            .map(|r| decoded_row(&tape, out, r, self.action_dim))
            .collect()
    }
}

fn decoded_row(tape: &Tape, out: DecoderOutput, r: usize, action_dim: usize) -> Result<DecodedAction> {
    match out {
        DecoderOutput::Action(a) => Ok(DecodedAction::Action(tape.value(a).row_slice(r).to_vec())),
        DecoderOutput::Gmm {
            logits,
            means,
            log_std,
        } => {
            let l = tape.value(logits);
            let m = tape.value(means);
            let s = tape.value(log_std);
            debug_assert_eq!(m.cols(), l.cols() * action_dim);
            Ok(DecodedAction::Gmm(GmmParams::from_logits(
                l.row_slice(r),
                m.row_slice(r).to_vec(),
                s.row_slice(r).to_vec(),
            )?))
        }
    }
}

/// Value-level action loss; the prediction must match `mode`.
pub fn action_loss(pred: &DecodedAction, target: &[f64], mode: DecoderMode) -> Result<f64> {
    match (pred, mode) {
        (DecodedAction::Action(a), DecoderMode::DeterministicL1) => {
            if a.len() != target.len() {
                return Err(Error::Shape("action length mismatch".into()));
            }
            Ok(l1_distance(a, target))
        }
        (DecodedAction::Gmm(g), DecoderMode::Gmm) => gmm_nll(g, target),
        _ => Err(Error::Validation(format!(
            "prediction does not match decoder mode {}",
            mode.as_str()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(mode: DecoderMode) -> (ParamStore, ActionDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            mode,
            hidden: vec![16, 16],
            ..DecoderConfig::default()
        };
        let d = ActionDecoder::new(&mut store, cfg, 4, 3, 2, Activation::Relu, &mut rng).unwrap();
        (store, d)
    }

    #[test]
    fn deterministic_decode_is_pure() {
        let (store, d) = build(DecoderMode::DeterministicL1);
        let z = [0.1, 0.2, 0.3, 0.4];
        let e = [1.0, -1.0, 0.5];
        let a = d.decode_action(&store, &z, &e).unwrap();
        assert_eq!(a, d.decode_action(&store, &z, &e).unwrap());
        assert_eq!(a.point().len(), 2);
        assert_eq!(d.net.depth(), 3);
        assert!(d.decode_action(&store, &z[..3], &e).is_err());
    }

    #[test]
    fn gmm_decode_is_valid_mixture() {
        let (store, d) = build(DecoderMode::Gmm);
        let out = d.decode_action(&store, &[0.0; 4], &[0.3; 3]).unwrap();
        match &out {
            DecodedAction::Gmm(g) => {
                assert_eq!(g.components(), 5);
                assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            DecodedAction::Action(_) => panic!("expected a mixture"),
        }
        let direct = match &out {
            DecodedAction::Gmm(g) => gmm_nll(g, &[0.2, -0.1]).unwrap(),
            _ => unreachable!(),
        };
        let via = action_loss(&out, &[0.2, -0.1], DecoderMode::Gmm).unwrap();
        assert_eq!(direct, via);
    }

    #[test]
    fn l1_loss_examples() {
        let p = DecodedAction::Action(vec![1.0, 0.0]);
        assert_eq!(action_loss(&p, &[1.0, 0.0], DecoderMode::DeterministicL1).unwrap(), 0.0);
        assert_eq!(action_loss(&p, &[0.0, 1.0], DecoderMode::DeterministicL1).unwrap(), 2.0);
        assert!(action_loss(&p, &[0.0, 1.0], DecoderMode::Gmm).is_err());
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        for mode in [DecoderMode::DeterministicL1, DecoderMode::Gmm] {
            let (store, d) = build(mode);
            let z = [0.3, -0.1, 0.0, 0.2];
            let e = [0.4, 0.1, -0.2];
            let target = [0.5, -0.5];
            let tape = Tape::inference(&store);
            let out = d.forward(&tape, tape.constant(Tensor::row(&z)), tape.constant(Tensor::row(&e)));
            let l = tape.value(d.loss_rows(&tape, out, &Tensor::row(&target)).unwrap()).item();
            let v = action_loss(&d.decode_action(&store, &z, &e).unwrap(), &target, mode).unwrap();
            assert!((l - v).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_contract() {
        assert_eq!(resolve_beta(DecoderMode::DeterministicL1, None, false).unwrap(), 1.0);
        assert_eq!(resolve_beta(DecoderMode::Gmm, None, false).unwrap(), 0.01);
        assert!(resolve_beta(DecoderMode::Gmm, Some(1.0), false).is_err());
        assert_eq!(resolve_beta(DecoderMode::Gmm, Some(1.0), true).unwrap(), 1.0);
        assert_eq!(resolve_beta(DecoderMode::DeterministicL1, Some(1.0), false).unwrap(), 1.0);
    }
}
