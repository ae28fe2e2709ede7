//! Corpus generation and handling: synthetic class-conditional corpora,
//! tokenized-file loading, Dirichlet non-IID partitioning, rare-token
//! selection, and trigger insertion.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, WeightedIndex};

use crate::model::Example;
use crate::{Error, Result};

/// Token occurrence counts over a reference corpus; `counts.len()` is the
/// vocabulary size `v`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub counts: Vec<u64>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.counts.len()
    }

    pub fn from_examples(vocab_size: usize, examples: &[Example]) -> Self {
        let mut counts = vec![0u64; vocab_size];
        for ex in examples {
            for &t in &ex.tokens {
                counts[t] += 1;
            }
        }
        Vocabulary { counts }
    }
}

/// Where inserted triggers land inside the insertion range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    /// Distinct positions drawn uniformly within the range.
    UniformInRange,
    /// Consecutive positions starting at a fixed index.
    FixedStart(usize),
}

/// Trigger token ids and the insertion policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub trigger_ids: Vec<usize>,
    /// Number of triggers inserted per input.
    pub count: usize,
    /// Half-open index interval for insertion positions.
    pub range: (usize, usize),
    pub position_mode: PositionMode,
    /// Optional L2 radius for trigger-embedding projection during poisoning.
    pub norm_bound: Option<f64>,
    pub target_label: usize,
}

impl TriggerSpec {
    pub fn validate(&self, vocab: usize, classes: usize) -> Result<()> {
        if self.trigger_ids.is_empty() {
            return Err(Error::Config("trigger_ids must be nonempty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &t in &self.trigger_ids {
            if t >= vocab {
                return Err(Error::OutOfVocabulary { token: t, vocab });
            }
            if !seen.insert(t) {
                return Err(Error::Config(format!("duplicate trigger id {t}")));
            }
        }
        let (lo, hi) = self.range;
        if lo >= hi {
            return Err(Error::Config(format!(
                "trigger range [{lo}, {hi}) is empty"
            )));
        }
        if self.count > hi - lo {
            return Err(Error::Config(format!(
                "trigger count {} exceeds range width {}",
                self.count,
                hi - lo
            )));
        }
        if self.target_label >= classes {
            return Err(Error::InvalidLabel {
                label: self.target_label,
                classes,
            });
        }
        if let Some(rho) = self.norm_bound {
            if rho <= 0.0 {
                return Err(Error::Config("norm_bound must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One client's shard of the training data.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub examples: Vec<Example>,
}

/// Generate a synthetic class-conditional corpus.
///
/// Each class has a disjoint band of preferred tokens sampled with
/// probability `skew`; remaining positions draw from a shared Zipf-profiled
/// region, so high-id tokens are genuinely rare. Deterministic given `seed`.
pub fn synth_corpus(
    vocab_size: usize,
    classes: usize,
    n: usize,
    seq_len: usize,
    skew: f64,
    seed: u64,
) -> Result<(Vocabulary, Vec<Example>)> {
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if classes < 2 || vocab_size < classes * 10 {
        return Err(Error::Config(format!(
            "need vocab >= 10 * classes (got v={vocab_size}, C={classes})"
        )));
    }
    if !(skew > 0.0 && skew <= 1.0) {
        return Err(Error::Config(format!("skew must be in (0, 1], got {skew}")));
    }
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be >= 1".into()));
    }

    let band = (vocab_size / (classes * 5)).clamp(4, 16);
    let shared_start = classes * band;
    let shared_len = vocab_size - shared_start;
    // Zipf-like profile over the shared region; the tail is effectively
    // never drawn, which guarantees rare tokens exist.
    let weights: Vec<f64> = (0..shared_len)
        .map(|i| 1.0 / ((i + 1) as f64).powf(1.3))
        .collect();
    let shared_dist = WeightedIndex::new(&weights).expect("nonempty weights");

    let mut rng = crate::rng::derive(seed, &[crate::rng::salt::CORPUS]);
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..classes);
        let band_lo = label * band;
        let tokens = (0..seq_len)
            .map(|_| {
                if rng.gen_bool(skew) {
                    band_lo + rng.gen_range(0..band)
                } else {
                    shared_start + shared_dist.sample(&mut rng)
                }
            })
            .collect();
        examples.push(Example::new(tokens, label));
    }
    Ok((Vocabulary::from_examples(vocab_size, &examples), examples))
}

/// The `k` token ids with the smallest counts, ties broken by ascending id.
pub fn select_rare_tokens(vocab: &Vocabulary, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..vocab.size()).collect();
    ids.sort_by_key(|&i| (vocab.counts[i], i));
    ids.truncate(k);
    ids
}

/// Partition examples across clients with per-class Dirichlet(alpha) shares.
///
/// Every example is assigned exactly once; empty clients are repaired by
/// donation from the largest client.
pub fn dirichlet_partition(
    examples: &[Example],
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if num_clients == 0 || alpha <= 0.0 {
        return Err(Error::Config(format!(
            "need clients >= 1 and alpha > 0 (got {num_clients}, {alpha})"
        )));
    }
    if examples.len() < num_clients {
        return Err(Error::InfeasiblePartition {
            examples: examples.len(),
            clients: num_clients,
        });
    }

    let mut rng = crate::rng::derive(seed, &[crate::rng::salt::PARTITION]);
    let classes = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, ex) in examples.iter().enumerate() {
        by_class[ex.label].push(i);
    }

    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for indices in by_class.iter_mut() {
        if indices.is_empty() {
            continue;
        }
        // Dirichlet shares via normalized Gamma draws.
        let mut shares: Vec<f64> = (0..num_clients)
            .map(|_| gamma.sample(&mut rng).max(f64::MIN_POSITIVE))
            .collect();
        let total: f64 = shares.iter().sum();
        for s in shares.iter_mut() {
            *s /= total;
        }

        // Largest-remainder apportionment of this class's examples.
        let n_c = indices.len();
        let quotas: Vec<f64> = shares.iter().map(|s| s * n_c as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..num_clients).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - counts[a] as f64;
            let rb = quotas[b] - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &c in order.iter().take(n_c - assigned) {
            counts[c] += 1;
        }

        // Shuffle within the class so assignment is not input-order biased.
        shuffle(indices, &mut rng);
        let mut cursor = 0;
        for (client, &cnt) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&indices[cursor..cursor + cnt]);
            cursor += cnt;
        }
    }

    // Repair empty clients by donating from the largest one.
    loop {
        let empty = match assignment.iter().position(|a| a.is_empty()) {
            Some(i) => i,
            None => break,
        };
        let largest = (0..num_clients)
            .max_by_key(|&i| assignment[i].len())
            .expect("at least one client");
        let donated = assignment[largest].pop().expect("largest client nonempty");
        assignment[empty].push(donated);
    }

    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(client_id, idxs)| ClientDataset {
            client_id,
            examples: idxs.iter().map(|&i| examples[i].clone()).collect(),
        })
        .collect())
}

fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}

/// Insert triggers into an example and set its label to the target class.
///
/// `count` trigger ids are drawn without replacement (cycling through the
/// pool when `count` exceeds it) and placed at distinct indices of the
/// output sequence within the configured range, clamped to the output
/// length. Original tokens keep their relative order.
pub fn insert_triggers<R: Rng>(example: &Example, spec: &TriggerSpec, rng: &mut R) -> Example {
    let count = spec.count;
    if count == 0 {
        return Example::new(example.tokens.clone(), spec.target_label);
    }

    // Trigger ids: full without-replacement cycles plus a partial cycle.
    let pool = &spec.trigger_ids;
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    while chosen.len() < count {
        let take = (count - chosen.len()).min(pool.len());
        let picks = index::sample(rng, pool.len(), take);
        chosen.extend(picks.iter().map(|i| pool[i]));
    }

    let out_len = example.tokens.len() + count;
    let (lo, hi) = spec.range;
    let mut positions: Vec<usize> = match spec.position_mode {
        PositionMode::FixedStart(p) => {
            let start = p.min(out_len - count);
            (start..start + count).collect()
        }
        PositionMode::UniformInRange => {
            let lo_c = lo.min(out_len - count);
            let mut hi_c = hi.min(out_len);
            if hi_c < lo_c + count {
                hi_c = lo_c + count;
            }
            index::sample(rng, hi_c - lo_c, count)
                .iter()
                .map(|i| lo_c + i)
                .collect()
        }
    };
    positions.sort_unstable();

    let mut tokens = Vec::with_capacity(out_len);
    let mut orig = example.tokens.iter();
    let mut next_trigger = 0;
    for i in 0..out_len {
        if next_trigger < count && positions[next_trigger] == i {
            tokens.push(chosen[next_trigger]);
            next_trigger += 1;
        } else {
            tokens.push(*orig.next().expect("slot count matches"));
        }
    }
    Example::new(tokens, spec.target_label)
}

/// Build the backdoored test set: drop examples already labeled with the
/// target class, then insert triggers into each survivor.
pub fn make_backdoor_testset<R: Rng>(
    test: &[Example],
    spec: &TriggerSpec,
    rng: &mut R,
) -> Result<Vec<Example>> {
    let survivors: Vec<&Example> = test
        .iter()
        .filter(|e| e.label != spec.target_label)
        .collect();
    if survivors.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(survivors
        .into_iter()
        .map(|e| insert_triggers(e, spec, rng))
        .collect())
}

/// Load a tokenized corpus: one example per line, `label<TAB>id id id ...`.
pub fn load_corpus(path: &Path, vocab_size: usize) -> Result<Vec<Example>> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: display.clone(),
            line: lineno,
            msg,
        };
        let (label_str, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse("expected 'label<TAB>token ids'".into()))?;
        let label: usize = label_str
            .trim()
            .parse()
            .map_err(|_| parse(format!("invalid label {label_str:?}")))?;
        let mut tokens = Vec::new();
        for tok in rest.split_whitespace() {
            let id: usize = tok
                .parse()
                .map_err(|_| parse(format!("invalid token id {tok:?}")))?;
            if id >= vocab_size {
                return Err(parse(format!(
                    "token id {id} out of vocabulary (v = {vocab_size})"
                )));
            }
            tokens.push(id);
        }
        if tokens.is_empty() {
            return Err(parse("empty token sequence".into()));
        }
        examples.push(Example::new(tokens, label));
    }
    Ok(examples)
}
