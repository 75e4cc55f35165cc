//! Sentence-level captioning metrics over token sequences.
//!
//! Tokens may be any ordered type; callers strip padding and sentence
//! markers before scoring.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};

const MAX_N: usize = 4;
/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<Vec<T>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-4 of one candidate against its references: geometric mean of the
/// clipped 1–4-gram precisions times the brevity penalty, no smoothing.
pub fn bleu4<T: Ord + Clone>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::Empty("candidate caption"));
    }
    if references.is_empty() {
        return Err(Error::Empty("reference captions"));
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_N {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let mut max_ref: BTreeMap<&Vec<T>, usize> = BTreeMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                if let Some((key, _)) = cand.get_key_value(&g) {
                    let e = max_ref.entry(key).or_insert(0);
                    *e = (*e).max(c);
                }
            }
        }
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(clipped as f64 / total as f64);
    }
    let c = candidate.len();
    // closest reference length, ties to the shorter one
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r {
        1.0
    } else {
        libm::exp(1.0 - r as f64 / c as f64)
    };
    Ok(bp * libm::exp(log_sum / MAX_N as f64))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with the best precision and best recall taken across
/// references.
pub fn rouge_l<T: Ord + Clone>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::Empty("candidate caption"));
    }
    if references.is_empty() {
        return Err(Error::Empty("reference captions"));
    }
    let (mut p_max, mut r_max): (f64, f64) = (0.0, 0.0);
    for r in references {
        if r.is_empty() {
            continue;
        }
        let l = lcs_len(candidate, r) as f64;
        p_max = p_max.max(l / candidate.len() as f64);
        r_max = r_max.max(l / r.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p_max * r_max / (r_max + b2 * p_max))
}

/// TF-IDF n-gram consensus scorer. Document frequencies come from the
/// reference corpus the scorer is built over.
#[derive(Debug, Clone)]
pub struct Cider<T: Ord> {
    doc_freq: BTreeMap<Vec<T>, usize>,
    log_docs: f64,
}

type Weighted<T> = BTreeMap<Vec<T>, f64>;

impl<T: Ord + Clone> Cider<T> {
    /// `corpus[i]` holds the reference captions of item `i`.
    pub fn new(corpus: &[Vec<Vec<T>>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("CIDEr reference corpus"));
        }
        let mut doc_freq = BTreeMap::new();
        for refs in corpus {
            let mut seen = alloc::collections::BTreeSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    for g in ngram_counts(r, n).into_keys() {
                        seen.insert(g);
                    }
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0) += 1;
            }
        }
        Ok(Self {
            doc_freq,
            log_docs: libm::log(corpus.len() as f64),
        })
    }

    fn vectors(&self, tokens: &[T]) -> [Weighted<T>; MAX_N] {
        core::array::from_fn(|i| {
            let counts = ngram_counts(tokens, i + 1);
            let total: usize = counts.values().sum();
            counts
                .into_iter()
                .map(|(g, c)| {
                    let df = self.doc_freq.get(&g).copied().unwrap_or(0).max(1) as f64;
                    let w = (c as f64 / total as f64) * (self.log_docs - libm::log(df));
                    (g, w)
                })
                .collect()
        })
    }

    fn cosine(a: &Weighted<T>, b: &Weighted<T>) -> f64 {
        let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
        let na = libm::sqrt(a.values().map(|x| x * x).sum::<f64>());
        let nb = libm::sqrt(b.values().map(|x| x * x).sum::<f64>());
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }

    /// Mean over n = 1..4 of the reference-averaged TF-IDF cosine.
    pub fn score(&self, candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
        if candidate.is_empty() {
            return Err(Error::Empty("candidate caption"));
        }
        if references.is_empty() {
            return Err(Error::Empty("reference captions"));
        }
        let cand = self.vectors(candidate);
        let mut total = 0.0;
        for n in 0..MAX_N {
            let mut s = 0.0;
            for r in references {
                let rv = self.vectors(r);
                s += Self::cosine(&cand[n], &rv[n]);
            }
            total += s / references.len() as f64;
        }
        Ok(total / MAX_N as f64)
    }

    /// Corpus-level score (mean of per-item scores) and the per-item scores.
    pub fn corpus_score(
        &self,
        candidates: &[Vec<T>],
        references: &[Vec<Vec<T>>],
    ) -> Result<(f64, Vec<f64>)> {
        if candidates.len() != references.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} candidates for {} reference sets",
                candidates.len(),
                references.len()
            )));
        }
        let scores = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| self.score(c, r))
            .collect::<Result<Vec<_>>>()?;
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        Ok((mean, scores))
    }
}

/// CIDEr of `candidates` against `references`, document frequencies taken
/// over `corpus`.
pub fn cider<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    corpus: &[Vec<Vec<T>>],
) -> Result<f64> {
    Cider::new(corpus)?.corpus_score(candidates, references).map(|r| r.0)
}
