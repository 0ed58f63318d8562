//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use skilltok::bpe::{Pair, Vocabulary};
use skilltok::pretrain::CodeSequence;

/// Recounts every adjacent pair from scratch before each merge.
pub fn reference_bpe(corpus: &[Vec<usize>], c: usize, target: usize) -> Vec<Pair> {
    let mut words = corpus.to_vec();
    let mut merges = Vec::new();
    while c + merges.len() < target {
        let mut counts = std::collections::BTreeMap::<Pair, usize>::new();
        for w in &words {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += 1;
            }
        }
        // BTreeMap iterates pairs ascending, so the first maximum wins ties.
        let mut best: Option<(Pair, usize)> = None;
        for (&p, &n) in &counts {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((p, n));
            }
        }
        let Some((pair, n)) = best else { break };
        if n < 2 {
            break;
        }
        let id = c + merges.len();
        merges.push(pair);
        for w in &mut words {
            let mut out = Vec::new();
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(w[i]);
                    i += 1;
                }
            }
            *w = out;
        }
    }
    merges
}

/// Longest match by scanning every token; lowest id among equal lengths.
pub fn reference_match(vocab: &Vocabulary, codes: &[usize], t: usize) -> usize {
    let mut best = (0, usize::MAX);
    for tok in vocab.tokens() {
        let l = tok.codes.len();
        if t + l <= codes.len() && codes[t..t + l] == tok.codes[..] && (l > best.0 || (l == best.0 && tok.id < best.1)) {
            best = (l, tok.id);
        }
    }
    best.1
}

pub fn sequences(corpus: &[Vec<usize>]) -> Vec<CodeSequence> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, codes)| CodeSequence {
            task: 0,
            episode: i,
            codes: codes.clone(),
        })
        .collect()
}

/// Random corpus: `C ∈ [2, 5]`, up to 6 episodes of 1 to 20 codes.
pub fn random_corpus(rng: &mut ChaCha8Rng) -> (usize, Vec<Vec<usize>>) {
    let c = rng.random_range(2..=5);
    let episodes = rng.random_range(1..=6);
    let corpus = (0..episodes)
        .map(|_| {
            let len = rng.random_range(1..=20);
            (0..len).map(|_| rng.random_range(0..c)).collect()
        })
        .collect();
    (c, corpus)
}

/// Random vocabulary of up to 8 merges, each joining existing tokens.
pub fn random_vocabulary(c: usize, rng: &mut ChaCha8Rng) -> Vocabulary {
    let n = rng.random_range(0..=8);
    let merges: Vec<Pair> = (0..n)
        .map(|i| (rng.random_range(0..c + i), rng.random_range(0..c + i)))
        .collect();
    Vocabulary::from_merges(c, &merges).expect("merges of existing tokens")
}
