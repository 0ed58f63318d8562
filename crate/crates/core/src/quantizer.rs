//! State-dependent action quantizer with a learnable codebook.
//!
//! The query is a linear projection of `[stopgrad(z), a]`; the selected code
//! is the nearest codebook row in Euclidean distance, ties going to the
//! lowest index. Training uses the two-sided squared-L2 codebook loss and a
//! straight-through output so gradients reach the projection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{squared_distance, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Codes unused for this many consecutive updates are re-seeded.
    pub revive_after: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            codebook_size: 10,
            code_dim: 16,
            revive_after: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantizer {
    pub config: QuantizerConfig,
    pub projection: Linear,
    pub codebook: ParamId,
    /// Consecutive updates since each code was last selected.
    pub idle_steps: Vec<u64>,
}

/// Value-level quantization of one `(z, a)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    pub index: usize,
    pub code: Vec<f64>,
    pub query: Vec<f64>,
    pub loss: f64,
    pub straight_through_output: Vec<f64>,
}

/// Tape-level quantization of a batch.
#[derive(Clone, Debug)]
pub struct QuantizeOutput {
    pub indices: Vec<usize>,
    pub query: Var,
    /// Per-row codebook loss, `B × 1`.
    pub loss: Var,
    /// Straight-through code, `B × code_dim`.
    pub output: Var,
}

/// A frozen code assignment used to evaluate the straight-through surrogate
/// `q + (e - q)|fixed` away from the point where it was recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenAssignment {
    pub indices: Vec<usize>,
    pub offset: Tensor,
}

impl Quantizer {
    pub const PREFIX: &'static str = "quantizer/";

    pub fn new(
        store: &mut ParamStore,
        config: QuantizerConfig,
        latent_dim: usize,
        action_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 codes".into()));
        }
        if config.code_dim == 0 {
            return Err(Error::Config("code_dim must be positive".into()));
        }
        let projection = Linear::new(
            store,
            "quantizer/projection",
            latent_dim + action_dim,
            config.code_dim,
            rng,
        )?;
        let bound = 1.0 / config.codebook_size as f64;
        let codebook = store.insert_uniform(
            "quantizer/codebook",
            config.codebook_size,
            config.code_dim,
            bound,
            rng,
        )?;
        Ok(Self {
            idle_steps: vec![0; config.codebook_size],
            config,
            projection,
            codebook,
        })
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn codes<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.value(self.codebook)
    }

    /// Batched quantization of `(stopgrad(z), a)`. With `frozen`, the given
    /// assignment replaces the nearest-code search and the output becomes
    /// the surrogate `q + offset`.
    pub fn forward(
        &self,
        tape: &Tape,
        z: Var,
        actions: Var,
        frozen: Option<&FrozenAssignment>,
    ) -> Result<QuantizeOutput> {
        let zs = tape.stop_gradient(z);
        let input = tape.concat_cols(&[zs, actions]);
        let query = self.projection.forward(tape, input);
        let q_val = tape.value(query);
        let codes = tape.param(self.codebook);
        let indices = match frozen {
            Some(f) => f.indices.clone(),
            None => {
                let table = tape.value(codes);
                (0..q_val.rows())
                    .map(|r| nearest_code(&table, q_val.row_slice(r)))
                    .collect()
            }
        };
        let e = tape.gather_rows(codes, &indices);
        let loss = codebook_loss_rows(tape, query, e);
        let output = match frozen {
            Some(f) => tape.shifted(query, &f.offset),
            None => tape.straight_through(query, e),
        };
        Ok(QuantizeOutput {
            indices,
            query,
            loss,
            output,
        })
    }

    /// Records the assignment made at the current point.
    pub fn freeze_assignment(tape: &Tape, out: &QuantizeOutput, codes: &Tensor) -> FrozenAssignment {
        let q = tape.value(out.query);
        let e = codes.gather_rows(&out.indices);
        FrozenAssignment {
            indices: out.indices.clone(),
            offset: e.zip_map(&q, |a, b| a - b),
        }
    }

    pub fn quantize(&self, store: &ParamStore, z: &[f64], action: &[f64]) -> Result<QuantizeResult> {
        let expected = self.projection.in_dim;
        if z.len() + action.len() != expected {
            return Err(Error::Shape(format!(
                "latent + action has {} dims, expected {expected}",
                z.len() + action.len()
            )));
        }
        let tape = Tape::inference(store);
        let zv = tape.constant(Tensor::row(z));
        let av = tape.constant(Tensor::row(action));
        let out = self.forward(&tape, zv, av, None)?;
        let code = self.codes(store).row_slice(out.indices[0]).to_vec();
        Ok(QuantizeResult {
            index: out.indices[0],
            query: tape.value(out.query).into_data(),
            loss: tape.value(out.loss).item(),
            straight_through_output: tape.value(out.output).into_data(),
            code,
        })
    }

    /// Book-keeping after an optimizer step: codes idle for `revive_after`
    /// updates are moved onto a randomly chosen query from `recent_queries`.
    pub fn record_usage(
        &mut self,
        store: &mut ParamStore,
        used: &[usize],
        recent_queries: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Vec<usize> {
        let mut hit = vec![false; self.codebook_size()];
        for &i in used {
            hit[i] = true;
        }
        let mut revived = Vec::new();
        for k in 0..self.codebook_size() {
            if hit[k] {
                self.idle_steps[k] = 0;
                continue;
            }
            self.idle_steps[k] += 1;
            if self.idle_steps[k] >= self.config.revive_after && recent_queries.rows() > 0 {
                let pick = rng.random_range(0..recent_queries.rows());
                store
                    .value_mut(self.codebook)
                    .row_slice_mut(k)
                    .copy_from_slice(recent_queries.row_slice(pick));
                self.idle_steps[k] = 0;
                revived.push(k);
            }
        }
        revived
    }
}

/// Index of the nearest row of `codes` to `query`; the lowest index wins ties.
pub fn nearest_code(codes: &Tensor, query: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..codes.rows() {
        let d = squared_distance(codes.row_slice(k), query);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// `‖stopgrad(q) − e‖² + ‖q − stopgrad(e)‖²` per row.
pub fn codebook_loss_rows(tape: &Tape, query: Var, code: Var) -> Var {
    let qs = tape.stop_gradient(query);
    let es = tape.stop_gradient(code);
    let a = tape.sub(qs, code);
    let b = tape.sub(query, es);
    let a2 = tape.row_sum(tape.mul(a, a));
    let b2 = tape.row_sum(tape.mul(b, b));
    tape.add(a2, b2)
}

/// Value of the codebook loss for one pair.
pub fn codebook_loss(query: &[f64], code: &[f64]) -> Result<f64> {
    if query.len() != code.len() {
        return Err(Error::Shape("query and code differ in length".into()));
    }
    Ok(2.0 * squared_distance(query, code))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use crate::nn::{Adam, AdamConfig};
    use rand::SeedableRng;

    fn table(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn nearest_code_examples() {
        let t = table(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(nearest_code(&t, &[0.1, 0.1]), 0);
        assert_eq!(nearest_code(&t, &[0.5, 0.5]), 0);
        assert_eq!(nearest_code(&t, &[0.9, 0.6]), 1);
    }

    #[test]
    fn nearest_code_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let id = store.insert_uniform("c", 10, 4, 1.0, &mut rng).unwrap();
        let codes = store.value(id);
        for _ in 0..500 {
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let dists: Vec<f64> = (0..10)
                .map(|k| codes.row_slice(k).iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let expect = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(nearest_code(codes, &q), expect);
        }
    }

    #[test]
    fn codebook_loss_examples() {
        assert_eq!(codebook_loss(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        assert_eq!(codebook_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn codebook_loss_gradient_splits_between_sides() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::row(&[1.0, -0.5]));
        let e = tape.leaf(Tensor::row(&[0.25, 0.5]));
        let loss = tape.sum(codebook_loss_rows(&tape, q, e));
        assert!((tape.scalar(loss) - 2.0 * (0.75f64.powi(2) + 1.0)).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        // d/de of the first term is 2(e - q); d/dq of the second is 2(q - e).
        assert_eq!(g.leaf(e).unwrap().data(), &[-1.5, 2.0]);
        assert_eq!(g.leaf(q).unwrap().data(), &[1.5, -2.0]);

        let mut store = ParamStore::new();
        let qp = store.insert("q", Tensor::row(&[1.0, -0.5])).unwrap();
        let ep = store.insert("e", Tensor::row(&[0.25, 0.5])).unwrap();
        let r = grad_check(&mut store, DEFAULT_EPS, |t| {
            let a = t.sub(t.param(qp), t.param(ep));
            Ok(t.sum(t.mul(a, a)))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn straight_through_composition_gradient() {
        // ‖st(q, e)‖² has gradient 2e with respect to q.
        let tape = Tape::new();
        let q = tape.leaf(Tensor::row(&[0.3, -0.2]));
        let e = tape.constant(Tensor::row(&[1.0, 2.0]));
        let st = tape.straight_through(q, e);
        let loss = tape.sum(tape.mul(st, st));
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.leaf(q).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn quantize_returns_selected_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let q = Quantizer::new(&mut store, QuantizerConfig::default(), 4, 2, &mut rng).unwrap();
        let r = q.quantize(&store, &[0.1, 0.2, -0.3, 0.4], &[0.5, -0.5]).unwrap();
        assert_eq!(r.code, q.codes(&store).row_slice(r.index));
        assert_eq!(r.straight_through_output, r.code);
        assert_eq!(r.index, nearest_code(q.codes(&store), &r.query));
        assert!((r.loss - codebook_loss(&r.query, &r.code).unwrap()).abs() < 1e-12);
        assert!(q.quantize(&store, &[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn quantizer_rejects_tiny_codebook() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = QuantizerConfig {
            codebook_size: 1,
            ..QuantizerConfig::default()
        };
        assert!(Quantizer::new(&mut store, cfg, 4, 2, &mut rng).is_err());
    }

    #[test]
    fn codes_converge_to_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let means = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        let mut queries = Vec::new();
        for m in &means {
            for _ in 0..16 {
                queries.push([
                    m[0] + rng.random_range(-0.1..0.1),
                    m[1] + rng.random_range(-0.1..0.1),
                ]);
            }
        }
        let q = Tensor::from_rows(&queries).unwrap();
        let mut store = ParamStore::new();
        // Initialize each code inside a different quadrant so that the
        // assignment is a bijection from the start.
        let init = Tensor::from_rows(&[[0.2, 0.3], [-0.3, 0.2], [-0.2, -0.3], [0.3, -0.2]]).unwrap();
        let codes = store.insert("codebook", init).unwrap();
        let mut opt = Adam::new(&store, vec![codes], AdamConfig::with_lr(0.02));
        for _ in 0..200 {
            let grads = {
                let t = Tape::with_params(&store);
                let c = t.param(codes);
                let table = t.value(c);
                let idx: Vec<usize> = (0..q.rows()).map(|r| nearest_code(&table, q.row_slice(r))).collect();
                let e = t.gather_rows(c, &idx);
                let qv = t.constant(q.clone());
                let loss = t.mean(codebook_loss_rows(&t, qv, e));
                t.backward(loss).unwrap()
            };
            opt.step(&mut store, &grads);
        }
        let table = store.value(codes);
        for m in &means {
            let cluster: Vec<&[f64; 2]> = queries
                .iter()
                .filter(|p| (p[0] - m[0]).abs() < 0.5 && (p[1] - m[1]).abs() < 0.5)
                .collect();
            let cm = [
                cluster.iter().map(|p| p[0]).sum::<f64>() / cluster.len() as f64,
                cluster.iter().map(|p| p[1]).sum::<f64>() / cluster.len() as f64,
            ];
            let best = (0..4)
                .map(|k| squared_distance(table.row_slice(k), &cm).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.05, "cluster {m:?}: nearest code at {best}");
        }
    }

    #[test]
    fn idle_codes_are_revived() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = QuantizerConfig {
            codebook_size: 3,
            code_dim: 2,
            revive_after: 2,
        };
        let mut q = Quantizer::new(&mut store, cfg, 1, 1, &mut rng).unwrap();
        let recent = Tensor::from_rows(&[[5.0, 5.0]]).unwrap();
        assert!(q.record_usage(&mut store, &[0], &recent, &mut rng).is_empty());
        let revived = q.record_usage(&mut store, &[0], &recent, &mut rng);
        assert_eq!(revived, vec![1, 2]);
        assert_eq!(q.codes(&store).row_slice(1), &[5.0, 5.0]);
        assert_eq!(q.idle_steps, vec![0, 0, 0]);
    }
}
