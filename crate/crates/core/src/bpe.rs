//! Byte-pair encoding over action-code sequences.
//!
//! Base tokens `0..C` are the codebook entries. Each merge of an adjacent
//! `(left, right)` pair creates one new token whose expansion is the
//! concatenation of the two expansions. Pair counts are taken per episode,
//! counting every adjacent position, and never span two episodes. The most
//! frequent pair is merged next; ties go to the smallest `(left, right)`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envsim::Dataset;
use crate::error::{Error, Result};
use crate::pretrain::CodeSequence;

pub type TokenId = usize;
pub type Pair = (TokenId, TokenId);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillToken {
    pub id: TokenId,
    pub codes: Vec<usize>,
}

impl SkillToken {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    token: Option<TokenId>,
}

/// Prefix tree over token expansions for longest-match lookup.
#[derive(Clone, Debug)]
struct Trie {
    nodes: Vec<TrieNode>,
}

impl Trie {
    fn build(tokens: &[SkillToken]) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for tok in tokens {
            let mut cur = 0;
            for &c in &tok.codes {
                cur = match nodes[cur].children.get(&c) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode::default());
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(c, n);
                        n
                    }
                };
            }
            let slot = &mut nodes[cur].token;
            *slot = Some(slot.map_or(tok.id, |old: TokenId| old.min(tok.id)));
        }
        Self { nodes }
    }

    /// Longest token matching a prefix of `codes`.
    fn longest(&self, codes: &[usize]) -> Option<TokenId> {
        let mut cur = 0;
        let mut best = None;
        for c in codes {
            match self.nodes[cur].children.get(c) {
                Some(&n) => {
                    cur = n;
                    if let Some(t) = self.nodes[cur].token {
                        best = Some(t);
                    }
                }
                None => break,
            }
        }
        best
    }
}

/// Wire format of a vocabulary file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub codebook_size: usize,
    pub merges: Vec<[TokenId; 2]>,
    pub tokens: Vec<SkillToken>,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    codebook_size: usize,
    merges: Vec<Pair>,
    tokens: Vec<SkillToken>,
    trie: Trie,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.codebook_size == other.codebook_size
            && self.merges == other.merges
            && self.tokens == other.tokens
    }
}

impl Vocabulary {
    /// Base codes only.
    pub fn base(codebook_size: usize) -> Self {
        Self::from_merges(codebook_size, &[]).expect("no merges to validate")
    }

    pub fn from_merges(codebook_size: usize, merges: &[Pair]) -> Result<Self> {
        let mut tokens: Vec<SkillToken> = (0..codebook_size)
            .map(|id| SkillToken { id, codes: vec![id] })
            .collect();
        for &(l, r) in merges {
            if l >= tokens.len() || r >= tokens.len() {
                return Err(Error::Validation(format!(
                    "merge ({l}, {r}) refers to an unknown token"
                )));
            }
            let mut codes = tokens[l].codes.clone();
            codes.extend_from_slice(&tokens[r].codes);
            tokens.push(SkillToken {
                id: tokens.len(),
                codes,
            });
        }
        let trie = Trie::build(&tokens);
        Ok(Self {
            codebook_size,
            merges: merges.to_vec(),
            tokens,
            trie,
        })
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    pub fn tokens(&self) -> &[SkillToken] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Result<&SkillToken> {
        self.tokens
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("token {id} not in a vocabulary of {}", self.len())))
    }

    pub fn expand_token(&self, id: TokenId) -> Result<&[usize]> {
        Ok(&self.token(id)?.codes)
    }

    pub fn max_token_len(&self) -> usize {
        self.tokens.iter().map(SkillToken::len).max().unwrap_or(0)
    }

    /// Longest token whose expansion equals `codes[t..t + len]`; equal-length
    /// matches resolve to the lowest id.
    pub fn tokenize_greedy(&self, codes: &[usize], t: usize) -> Result<&SkillToken> {
        if t >= codes.len() {
            return Err(Error::Index {
                index: t,
                bound: codes.len(),
            });
        }
        if codes[t] >= self.codebook_size {
            return Err(Error::Validation(format!(
                "code {} outside a codebook of {}",
                codes[t], self.codebook_size
            )));
        }
        let id = self
            .trie
            .longest(&codes[t..])
            .expect("every base code is a token");
        Ok(&self.tokens[id])
    }

    /// Non-overlapping segmentation: greedy match at `t`, then continue at
    /// `t + L`.
    pub fn segment(&self, codes: &[usize]) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut t = 0;
        while t < codes.len() {
            let tok = self.tokenize_greedy(codes, t)?;
            out.push(tok.id);
            t += tok.len();
        }
        Ok(out)
    }

    pub fn to_file(&self) -> VocabularyFile {
        VocabularyFile {
            codebook_size: self.codebook_size,
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            tokens: self.tokens.clone(),
        }
    }

    pub fn from_file(file: VocabularyFile) -> Result<Self> {
        let merges: Vec<Pair> = file.merges.iter().map(|m| (m[0], m[1])).collect();
        let vocab = Self::from_merges(file.codebook_size, &merges)?;
        if vocab.tokens != file.tokens {
            return Err(Error::Validation(
                "token list disagrees with the merge list".into(),
            ));
        }
        Ok(vocab)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON; binds policies to vocabularies.
    pub fn fingerprint(&self) -> String {
        let json = self.to_json().expect("vocabulary serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpeConfig {
    pub codebook_size: usize,
    pub vocab_size: usize,
    /// Training stops once the most frequent pair occurs fewer times.
    pub min_pair_frequency: usize,
}

impl BpeConfig {
    pub fn new(codebook_size: usize, vocab_size: usize) -> Self {
        Self {
            codebook_size,
            vocab_size,
            min_pair_frequency: 2,
        }
    }
}

fn validate_corpus(corpus: &[CodeSequence], config: &BpeConfig) -> Result<()> {
    if config.vocab_size < config.codebook_size {
        return Err(Error::Config(format!(
            "vocabulary size {} is below the codebook size {}",
            config.vocab_size, config.codebook_size
        )));
    }
    if config.codebook_size == 0 {
        return Err(Error::Config("codebook size must be positive".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    for seq in corpus {
        if let Some(&c) = seq.codes.iter().find(|&&c| c >= config.codebook_size) {
            return Err(Error::Validation(format!(
                "code {c} outside a codebook of {}",
                config.codebook_size
            )));
        }
    }
    Ok(())
}

/// Replaces every non-overlapping left-to-right occurrence of `pair`.
pub(crate) fn apply_merge(word: &[TokenId], pair: Pair, new_id: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    out
}

fn count_pairs(word: &[TokenId], counts: &mut HashMap<Pair, i64>, sign: i64) {
    for w in word.windows(2) {
        *counts.entry((w[0], w[1])).or_insert(0) += sign;
    }
}

/// Learns merges until the vocabulary reaches `vocab_size` or no pair is
/// frequent enough.
pub fn train_bpe(corpus: &[CodeSequence], config: &BpeConfig) -> Result<Vocabulary> {
    validate_corpus(corpus, config)?;
    let mut words: Vec<Vec<TokenId>> = corpus.iter().map(|s| s.codes.clone()).collect();

    let mut counts: HashMap<Pair, i64> = HashMap::new();
    let mut locations: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
    for (w, word) in words.iter().enumerate() {
        count_pairs(word, &mut counts, 1);
        for p in word.windows(2) {
            locations.entry((p[0], p[1])).or_default().insert(w);
        }
    }
    let mut heap: BinaryHeap<(i64, Reverse<Pair>)> =
        counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

    let mut merges = Vec::new();
    let target_merges = config.vocab_size - config.codebook_size;
    while merges.len() < target_merges {
        // Lazy deletion: skip heap entries whose count is stale.
        let best = loop {
            match heap.pop() {
                None => break None,
                Some((c, Reverse(p))) => {
                    if counts.get(&p).copied().unwrap_or(0) == c && c > 0 {
                        break Some((p, c));
                    }
                }
            }
        };
        let Some((pair, freq)) = best else { break };
        if (freq as usize) < config.min_pair_frequency {
            break;
        }
        let new_id = config.codebook_size + merges.len();
        merges.push(pair);

        let touched: Vec<usize> = locations
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        let mut changed: BTreeSet<Pair> = BTreeSet::new();
        for w in touched {
            let old = &words[w];
            if !old.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            let new = apply_merge(old, pair, new_id);
            let mut delta: HashMap<Pair, i64> = HashMap::new();
            count_pairs(old, &mut delta, -1);
            count_pairs(&new, &mut delta, 1);
            for (p, d) in delta {
                if d != 0 {
                    *counts.entry(p).or_insert(0) += d;
                    changed.insert(p);
                }
            }
            for p in new.windows(2) {
                locations.entry((p[0], p[1])).or_default().insert(w);
            }
            words[w] = new;
        }
        counts.remove(&pair);
        for p in changed {
            if let Some(&c) = counts.get(&p) {
                if c > 0 {
                    heap.push((c, Reverse(p)));
                }
            }
        }
    }
    Vocabulary::from_merges(config.codebook_size, &merges)
}

/// Per-timestep greedy targets for one code sequence: entry `t` is the
/// longest token matching the suffix starting at `t`.
pub fn relabel_sequence(codes: &[usize], vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    (0..codes.len())
        .map(|t| vocab.tokenize_greedy(codes, t).map(|tok| tok.id))
        .collect()
}

/// Greedy targets for every timestep of every episode. The corpus must be
/// the encoding of `dataset`: same episode count, order and lengths.
pub fn relabel_dataset(dataset: &Dataset, corpus: &[CodeSequence], vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    if dataset.len() != corpus.len() {
        return Err(Error::Alignment(format!(
            "{} episodes but {} code sequences",
            dataset.len(),
            corpus.len()
        )));
    }
    dataset
        .episodes
        .iter()
        .zip(corpus)
        .enumerate()
        .map(|(i, (ep, seq))| {
            if ep.len() != seq.codes.len() || ep.task != seq.task {
                return Err(Error::Alignment(format!(
                    "episode {i} has {} steps of task {}, codes have {} of task {}",
                    ep.len(),
                    ep.task,
                    seq.codes.len(),
                    seq.task
                )));
            }
            relabel_sequence(&seq.codes, vocab)
        })
        .collect()
}

/// Encodes `codes` by replaying the merges in learned order. Unlike greedy
/// segmentation this never grows when merges are appended.
pub fn apply_merges(codes: &[usize], vocab: &Vocabulary) -> Vec<TokenId> {
    let c = vocab.codebook_size();
    vocab
        .merges()
        .iter()
        .enumerate()
        .fold(codes.to_vec(), |word, (i, &pair)| apply_merge(&word, pair, c + i))
}

/// Total length of a corpus after replaying the merges of `vocab`.
pub fn merged_length(corpus: &[CodeSequence], vocab: &Vocabulary) -> usize {
    corpus.iter().map(|s| apply_merges(&s.codes, vocab).len()).sum()
}

/// Total segmented length of a corpus under `vocab`.
pub fn tokenized_length(corpus: &[CodeSequence], vocab: &Vocabulary) -> Result<usize> {
    corpus
        .iter()
        .map(|s| vocab.segment(&s.codes).map(|v| v.len()))
        .sum()
}
