//! Code-collapse metric ζ, token-length histograms and rank correlation.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::bpe::{relabel_sequence, TokenId, Vocabulary};
use crate::decoder::{DecodedAction, DecoderMode};
use crate::envsim::Dataset;
use crate::error::{Error, Result};
use crate::loss::{l1_distance, GmmParams};
use crate::model::SkillModel;
use crate::policy::episode_latents;
use crate::pretrain::CodeSequence;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZetaConfig {
    /// States drawn from the dataset; all of them when fewer exist.
    pub max_states: usize,
    /// Monte Carlo samples per KL estimate (GMM decoders only).
    pub samples: usize,
    pub seed: u64,
}

impl Default for ZetaConfig {
    fn default() -> Self {
        Self {
            max_states: 5000,
            samples: 1000,
            seed: 0,
        }
    }
}

/// Latents of up to `max_states` dataset states, drawn without replacement
/// and kept in dataset order.
pub fn collect_latents(model: &SkillModel, dataset: &Dataset, max_states: usize, seed: u64) -> Result<Tensor> {
    let per_episode = dataset
        .episodes
        .par_iter()
        .map(|ep| episode_latents(&model.encoder, &model.store, &ep.observations, ep.task, ep.len()))
        .collect::<Result<Vec<_>>>()?;
    let all = Tensor::concat_rows(&per_episode)?;
    if all.rows() <= max_states {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, all.rows(), max_states).into_vec();
    idx.sort_unstable();
    Ok(all.gather_rows(&idx))
}

/// Decoder output for every code at every state: `out[code][state]`.
fn decode_all_codes(model: &SkillModel, latents: &Tensor) -> Result<Vec<Vec<DecodedAction>>> {
    let c = model.codebook_size();
    if c < 2 {
        return Err(Error::Config("ζ needs at least two codes".into()));
    }
    if latents.rows() == 0 {
        return Err(Error::Degenerate("ζ needs at least one state".into()));
    }
    let book = model.quantizer.codes(&model.store);
    (0..c)
        .into_par_iter()
        .map(|code| {
            let codes = book.gather_rows(&vec![code; latents.rows()]);
            model.decoder.decode_batch(&model.store, latents, &codes)
        })
        .collect()
}

fn pairs(c: usize) -> f64 {
    (c * (c - 1) / 2) as f64
}

/// Mean pairwise L1 distance between the point actions decoded from
/// different codes, averaged over states.
pub fn zeta_l1(model: &SkillModel, latents: &Tensor) -> Result<f64> {
    let decoded = decode_all_codes(model, latents)?;
    let c = decoded.len();
    let n = latents.rows();
    let points: Vec<Vec<Vec<f64>>> = decoded
        .iter()
        .map(|per_state| per_state.iter().map(DecodedAction::point).collect())
        .collect();
    let mut total = 0.0;
    for s in 0..n {
        for a in 0..c {
            for b in a + 1..c {
                total += l1_distance(&points[a][s], &points[b][s]);
            }
        }
    }
    Ok(total / n as f64 / pairs(c))
}

/// Monte Carlo KL between the mixtures decoded from each ordered pair of
/// codes `a < b`, averaged over states. Each state draws from its own
/// stream so the estimate does not depend on thread scheduling.
pub fn zeta_gmm(model: &SkillModel, latents: &Tensor, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Config("ζ needs at least one Monte Carlo sample".into()));
    }
    let decoded = decode_all_codes(model, latents)?;
    let c = decoded.len();
    let gmms: Vec<Vec<&GmmParams>> = decoded
        .iter()
        .map(|per_state| {
            per_state
                .iter()
                .map(|d| match d {
                    DecodedAction::Gmm(g) => Ok(g),
                    DecodedAction::Action(_) => Err(Error::Config("KL ζ needs a GMM decoder".into())),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let per_state = (0..latents.rows())
        .into_par_iter()
        .map(|s| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut upper = 0.0;
            for a in 0..c - 1 {
                let p = gmms[a][s];
                let xs: Vec<Vec<f64>> = (0..samples).map(|_| p.sample(&mut rng)).collect();
                let lp = xs.iter().map(|x| p.log_density(x)).collect::<Result<Vec<_>>>()?;
                for q in gmms.iter().skip(a + 1).map(|g| g[s]) {
                    let mut kl = 0.0;
                    for (x, l) in xs.iter().zip(&lp) {
                        kl += l - q.log_density(x)?;
                    }
                    upper += kl / samples as f64;
                }
            }
            Ok(upper)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_state.iter().sum::<f64>() / latents.rows() as f64 / pairs(c))
}

/// ζ for the model's decoder: KL-based for GMM decoders, L1-based for
/// deterministic ones.
pub fn collapse_metric_zeta(model: &SkillModel, latents: &Tensor, config: &ZetaConfig) -> Result<f64> {
    match model.decoder.mode() {
        DecoderMode::Gmm => zeta_gmm(model, latents, config.samples, config.seed),
        DecoderMode::DeterministicL1 => zeta_l1(model, latents),
    }
}

/// ζ of a pretrained model over its dataset with the run's state sample and
/// Monte Carlo streams derived from `seed`.
pub fn run_zeta(config: &ZetaConfig, model: &SkillModel, dataset: &Dataset, seed: u64) -> Result<f64> {
    let z = collect_latents(model, dataset, config.max_states, derive_seed(seed, "zeta-states"))?;
    let zc = ZetaConfig {
        seed: derive_seed(seed, "zeta"),
        ..config.clone()
    };
    collapse_metric_zeta(model, &z, &zc)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLengthHistogram {
    /// Number of vocabulary entries of each length.
    pub vocabulary: BTreeMap<usize, usize>,
    /// Number of relabeled timesteps whose target has each length.
    pub usage: BTreeMap<usize, usize>,
}

fn weighted_mean(h: &BTreeMap<usize, usize>) -> f64 {
    let n: usize = h.values().sum();
    if n == 0 {
        return 0.0;
    }
    h.iter().map(|(l, c)| (l * c) as f64).sum::<f64>() / n as f64
}

impl TokenLengthHistogram {
    pub fn vocabulary_mean(&self) -> f64 {
        weighted_mean(&self.vocabulary)
    }

    pub fn usage_mean(&self) -> f64 {
        weighted_mean(&self.usage)
    }
}

pub fn token_length_histogram(vocab: &Vocabulary, targets: &[Vec<TokenId>]) -> Result<TokenLengthHistogram> {
    let mut h = TokenLengthHistogram::default();
    for tok in vocab.tokens() {
        *h.vocabulary.entry(tok.codes.len()).or_default() += 1;
    }
    for &t in targets.iter().flatten() {
        *h.usage.entry(vocab.expand_token(t)?.len()).or_default() += 1;
    }
    Ok(h)
}

/// Histogram of `vocab` with usage counted over the greedy relabeling of
/// `corpus`.
pub fn corpus_histogram(vocab: &Vocabulary, corpus: &[CodeSequence]) -> Result<TokenLengthHistogram> {
    let targets = corpus
        .iter()
        .map(|s| relabel_sequence(&s.codes, vocab))
        .collect::<Result<Vec<_>>>()?;
    token_length_histogram(vocab, &targets)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Ties share the average of their 1-based ranks.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate_dataset, TaskSuite, ACTION_DIM, OBS_DIM};
    use crate::model::ModelConfig;
    use crate::decoder::DecoderMode;

    fn model(mode: DecoderMode, c: usize) -> SkillModel {
        let mut cfg = ModelConfig::new(OBS_DIM, ACTION_DIM, 10);
        cfg.encoder.latent_dim = 6;
        cfg.encoder.hidden = vec![8];
        cfg.quantizer.codebook_size = c;
        cfg.quantizer.code_dim = 3;
        cfg.decoder.mode = mode;
        cfg.decoder.hidden = vec![8];
        SkillModel::new(cfg, 4).unwrap()
    }

    /// Zeroes the decoder's code inputs so every code decodes identically.
    fn ignore_codes(m: &mut SkillModel) {
        let w = m.store.id("decoder/net/l0/w").unwrap();
        let latent = m.config.latent_dim();
        let t = m.store.value_mut(w);
        for r in latent..t.rows() {
            t.row_slice_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn latents(m: &SkillModel, n: usize) -> Tensor {
        let suite = TaskSuite::standard();
        let data = generate_dataset(&suite.pretrain[..2], 1, 0).unwrap();
        collect_latents(m, &data, n, 1).unwrap()
    }

    #[test]
    fn identical_decodings_give_zero() {
        for mode in [DecoderMode::DeterministicL1, DecoderMode::Gmm] {
            let mut m = model(mode, 4);
            ignore_codes(&mut m);
            let z = latents(&m, 20);
            let zeta = collapse_metric_zeta(&m, &z, &ZetaConfig { samples: 50, ..ZetaConfig::default() }).unwrap();
            assert!(zeta.abs() < 1e-12, "{mode:?}: {zeta}");
        }
    }

    #[test]
    fn distinct_decodings_are_positive() {
        let m = model(DecoderMode::DeterministicL1, 4);
        let z = latents(&m, 20);
        assert!(zeta_l1(&m, &z).unwrap() > 0.0);
        let g = model(DecoderMode::Gmm, 3);
        let zg = latents(&g, 10);
        let a = zeta_gmm(&g, &zg, 200, 3).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, zeta_gmm(&g, &zg, 200, 3).unwrap());
    }

    #[test]
    fn two_codes_use_unit_denominator() {
        let m = model(DecoderMode::DeterministicL1, 2);
        let z = latents(&m, 5);
        let book = m.quantizer.codes(&m.store);
        let mut direct = 0.0;
        for s in 0..z.rows() {
            let a = m.decoder.decode_action(&m.store, z.row_slice(s), book.row_slice(0)).unwrap().point();
            let b = m.decoder.decode_action(&m.store, z.row_slice(s), book.row_slice(1)).unwrap().point();
            direct += l1_distance(&a, &b);
        }
        let zeta = zeta_l1(&m, &z).unwrap();
        assert!((zeta - direct / z.rows() as f64).abs() < 1e-12);
    }

    #[test]
    fn latent_sample_is_capped_and_ordered() {
        let m = model(DecoderMode::DeterministicL1, 2);
        let full = latents(&m, usize::MAX);
        let some = latents(&m, 7);
        assert_eq!(some.rows(), 7);
        assert!(full.rows() > 7);
        assert_eq!(some, latents(&m, 7));
    }

    #[test]
    fn histogram_counts() {
        let base = Vocabulary::base(3);
        let h = token_length_histogram(&base, &[vec![0, 1, 2]]).unwrap();
        assert_eq!(h.vocabulary, BTreeMap::from([(1, 3)]));
        assert_eq!(h.usage, BTreeMap::from([(1, 3)]));
        let v = Vocabulary::from_merges(3, &[(0, 1), (3, 2)]).unwrap();
        let h = token_length_histogram(&v, &[vec![4, 2], vec![3]]).unwrap();
        assert_eq!(h.vocabulary.values().sum::<usize>(), v.len());
        assert_eq!(h.vocabulary, BTreeMap::from([(1, 3), (2, 1), (3, 1)]));
        assert_eq!(h.usage_mean(), 2.0);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3, 0.9]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        // Ties: ranks [1, 2.5, 2.5, 4] against [1, 2, 3, 4].
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 1.0, 2.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }
}
