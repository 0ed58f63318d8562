//! Observation embedding: a window of recent observations plus a task id
//! mapped to a latent state.
//!
//! Each observation in the window goes through a shared per-step network;
//! the features are concatenated in time order (oldest first) together with
//! a learned task embedding and fused into the latent by a second network
//! with a `tanh` output.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub obs_dim: usize,
    pub window: usize,
    pub latent_dim: usize,
    pub task_embed_dim: usize,
    pub num_tasks: usize,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
}

impl EncoderConfig {
    pub fn new(obs_dim: usize, num_tasks: usize) -> Self {
        Self {
            obs_dim,
            window: 4,
            latent_dim: 64,
            task_embed_dim: 8,
            num_tasks,
            feature_dim: 32,
            hidden: vec![64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.latent_dim == 0 || self.obs_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.num_tasks == 0 {
            return Err(Error::Config("encoder needs at least one task".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    step_net: Mlp,
    fusion: Mlp,
    task_table: Option<ParamId>,
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder/";

    pub fn new(
        store: &mut ParamStore,
        config: EncoderConfig,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![config.obs_dim];
        sizes.extend(&config.hidden);
        sizes.push(config.feature_dim);
        let step_net = Mlp::new(store, "encoder/step", &sizes, activation, rng)?;
        let fused_in = config.window * config.feature_dim + config.task_embed_dim;
        let mut sizes = vec![fused_in];
        sizes.extend(&config.hidden);
        sizes.push(config.latent_dim);
        let fusion = Mlp::new(store, "encoder/fusion", &sizes, activation, rng)?;
        let task_table = if config.task_embed_dim > 0 {
            Some(store.insert_uniform(
                "encoder/task_embedding",
                config.num_tasks,
                config.task_embed_dim,
                1.0,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            step_net,
            fusion,
            task_table,
        })
    }

    /// Batched forward pass. `steps[j]` is a `B × obs_dim` tensor holding
    /// window position `j` (oldest first) for every batch row.
    pub fn forward(&self, tape: &Tape, steps: &[Tensor], tasks: &[usize]) -> Var {
        debug_assert_eq!(steps.len(), self.config.window);
        let mut parts: Vec<Var> = steps
            .iter()
            .map(|s| {
                let x = tape.constant(s.clone());
                self.step_net.forward(tape, x)
            })
            .collect();
        if let Some(table) = self.task_table {
            parts.push(tape.gather_rows(tape.param(table), tasks));
        }
        let h = tape.concat_cols(&parts);
        tape.tanh(self.fusion.forward(tape, h))
    }

    pub fn check_inputs(&self, window: &[Vec<f64>], task: usize) -> Result<()> {
        if window.len() != self.config.window {
            return Err(Error::Shape(format!(
                "window has {} rows, expected {}",
                window.len(),
                self.config.window
            )));
        }
        if let Some(row) = window.iter().find(|r| r.len() != self.config.obs_dim) {
            return Err(Error::Shape(format!(
                "observation has {} dims, expected {}",
                row.len(),
                self.config.obs_dim
            )));
        }
        if task >= self.config.num_tasks {
            return Err(Error::Lookup(format!(
                "task {task} not in the {} known tasks",
                self.config.num_tasks
            )));
        }
        Ok(())
    }

    /// Embeds one window ending at timestep `t`.
    pub fn embed(&self, store: &ParamStore, window: &[Vec<f64>], task: usize, t: usize) -> Result<LatentState> {
        self.check_inputs(window, task)?;
        let steps: Vec<Tensor> = window.iter().map(|r| Tensor::row(r)).collect();
        let tape = Tape::inference(store);
        let z = self.forward(&tape, &steps, &[task]);
        Ok(LatentState {
            z: tape.value(z).into_data(),
            t,
        })
    }
}

/// The `window` observations ending at `t`, oldest first. Positions before
/// the start of the episode repeat the first observation.
pub fn window_at(observations: &[Vec<f64>], t: usize, window: usize) -> Vec<Vec<f64>> {
    (0..window)
        .map(|j| {
            let back = window - 1 - j;
            observations[t.saturating_sub(back)].clone()
        })
        .collect()
}

/// Stacks windows for several `(observations, t)` pairs into the per-position
/// layout expected by [`Encoder::forward`].
pub fn stack_windows(windows: &[Vec<Vec<f64>>]) -> Vec<Tensor> {
    let w = windows[0].len();
    (0..w)
        .map(|j| {
            let rows: Vec<&[f64]> = windows.iter().map(|win| win[j].as_slice()).collect();
            Tensor::from_rows(&rows).expect("consistent observation widths")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build() -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, EncoderConfig::new(3, 2), Activation::Relu, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn window_left_pads_with_first_observation() {
        let obs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        assert_eq!(window_at(&obs, 1, 4), vec![vec![0.0], vec![0.0], vec![0.0], vec![1.0]]);
        assert_eq!(window_at(&obs, 4, 3), vec![vec![2.0], vec![3.0], vec![4.0]]);
    }

    #[test]
    fn embed_is_pure_and_sized() {
        let (store, enc) = build();
        let window = vec![vec![0.0; 3]; 4];
        let a = enc.embed(&store, &window, 0, 0).unwrap();
        let b = enc.embed(&store, &window, 0, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.z.len(), 64);
        assert!(a.z.iter().all(|v| v.is_finite()));
        let (store2, enc2) = build();
        assert_eq!(enc2.embed(&store2, &window, 0, 0).unwrap(), a);
    }

    #[test]
    fn embed_rejects_bad_inputs() {
        let (store, enc) = build();
        assert!(matches!(enc.embed(&store, &vec![vec![0.0; 3]; 3], 0, 0), Err(Error::Shape(_))));
        assert!(matches!(enc.embed(&store, &vec![vec![0.0; 2]; 4], 0, 0), Err(Error::Shape(_))));
        assert!(matches!(enc.embed(&store, &vec![vec![0.0; 3]; 4], 2, 0), Err(Error::Lookup(_))));
    }
}
