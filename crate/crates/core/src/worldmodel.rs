//! Latent forward dynamics with a BYOL-style projection/prediction head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct DynamicsConfig {
    /// Hidden width of the transition and projector; `None` means twice the
    /// latent width.
    pub hidden: Option<usize>,
    pub projection_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsNets {
    pub transition: Mlp,
    pub projector: Mlp,
    pub predictor: Mlp,
    latent_dim: usize,
    code_dim: usize,
}

impl DynamicsNets {
    pub fn new(
        store: &mut ParamStore,
        config: &DynamicsConfig,
        latent_dim: usize,
        code_dim: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = config.hidden.unwrap_or(2 * latent_dim);
        let proj = config.projection_dim.unwrap_or(latent_dim);
        let transition = Mlp::new(
            store,
            "dynamics/transition",
            &[latent_dim + code_dim, hidden, latent_dim],
            activation,
            rng,
        )?;
        let projector = Mlp::new(store, "projector", &[latent_dim, hidden, proj], activation, rng)?;
        let predictor = Mlp::new(store, "predictor", &[proj, proj], activation, rng)?;
        Ok(Self {
            transition,
            projector,
            predictor,
            latent_dim,
            code_dim,
        })
    }

    pub fn step(&self, tape: &Tape, z: Var, code: Var) -> Var {
        let x = tape.concat_cols(&[z, code]);
        self.transition.forward(tape, x)
    }

    /// `-cos(Q(P(z_pred)), stopgrad(P(z_target)))` per row.
    pub fn byol_loss_rows(&self, tape: &Tape, z_pred: Var, z_target: Var) -> Result<Var> {
        let y_hat = self.predictor.forward(tape, self.projector.forward(tape, z_pred));
        let y_next = tape.stop_gradient(self.projector.forward(tape, z_target));
        let cos = tape.cosine_rows(y_hat, y_next)?;
        Ok(tape.scale(cos, -1.0))
    }

    /// Value-level single transition.
    pub fn dynamics_step(&self, store: &ParamStore, z: &[f64], code: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim || code.len() != self.code_dim {
            return Err(Error::Shape(format!(
                "dynamics expects latent {} and code {}, got {} and {}",
                self.latent_dim,
                self.code_dim,
                z.len(),
                code.len()
            )));
        }
        let tape = Tape::inference(store);
        let zv = tape.constant(Tensor::row(z));
        let cv = tape.constant(Tensor::row(code));
        Ok(tape.value(self.step(&tape, zv, cv)).into_data())
    }

    pub fn byol_loss(&self, store: &ParamStore, z_pred: &[f64], z_target: &[f64]) -> Result<f64> {
        let tape = Tape::inference(store);
        let a = tape.constant(Tensor::row(z_pred));
        let b = tape.constant(Tensor::row(z_target));
        let l = self.byol_loss_rows(&tape, a, b)?;
        Ok(tape.value(l).item())
    }
}
