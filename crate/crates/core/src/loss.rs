//! Loss primitives on plain vectors.
//!
//! These are the value-level counterparts of the tape ops in
//! [`crate::autodiff`]; they validate their inputs and are what callers
//! outside of training loops use.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_parts, gmm_joint_log, log_sum_exp};
use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {} vs {} dims", a.len(), b.len())));
    }
    Ok(cosine_parts(a, b)?.0)
}

pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            bound: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Diagonal Gaussian mixture over actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    weights: Vec<f64>,
    /// `M × action_dim`, component-major.
    means: Vec<f64>,
    log_stddevs: Vec<f64>,
    action_dim: usize,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, log_stddevs: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 {
            return Err(Error::Validation("mixture needs at least one component".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Validation("negative mixture weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!("mixture weights sum to {total}")));
        }
        if means.len() % m != 0 || means.is_empty() || log_stddevs.len() != means.len() {
            return Err(Error::Shape("means/log_stddevs must be M × action_dim".into()));
        }
        if means.iter().chain(&log_stddevs).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite mixture parameter".into()));
        }
        let action_dim = means.len() / m;
        Ok(Self {
            weights,
            means,
            log_stddevs,
            action_dim,
        })
    }

    /// Builds from unnormalized log-weights as produced by a network head.
    pub fn from_logits(logits: &[f64], means: Vec<f64>, log_stddevs: Vec<f64>) -> Result<Self> {
        let w = softmax(logits);
        let total: f64 = w.iter().sum();
        Self::new(w.iter().map(|v| v / total).collect(), means, log_stddevs)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.action_dim..(k + 1) * self.action_dim]
    }

    pub fn log_stddev(&self, k: usize) -> &[f64] {
        &self.log_stddevs[k * self.action_dim..(k + 1) * self.action_dim]
    }

    pub fn log_density(&self, action: &[f64]) -> Result<f64> {
        if action.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "action has {} dims, mixture has {}",
                action.len(),
                self.action_dim
            )));
        }
        let logits: Vec<f64> = self
            .weights
            .iter()
            .map(|w| if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
            .collect();
        Ok(log_sum_exp(&gmm_joint_log(
            &logits,
            &self.means,
            &self.log_stddevs,
            action,
        )))
    }

    /// Ancestral sample: component from the weights, then a diagonal Gaussian.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        use rand::distr::weighted::WeightedIndex;
        use rand_distr::{Distribution, StandardNormal};
        let k = WeightedIndex::new(&self.weights)
            .map(|d| d.sample(rng))
            .unwrap_or(0);
        self.mean(k)
            .iter()
            .zip(self.log_stddev(k))
            .map(|(&mu, &ls)| {
                let n: f64 = StandardNormal.sample(rng);
                mu + ls.exp() * n
            })
            .collect()
    }

    /// Mixture mean, used for deterministic evaluation.
    pub fn expected_action(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.action_dim];
        for (k, w) in self.weights.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.mean(k)) {
                *o += w * m;
            }
        }
        out
    }
}

pub fn gmm_nll(params: &GmmParams, action: &[f64]) -> Result<f64> {
    Ok(-params.log_density(action)?)
}
