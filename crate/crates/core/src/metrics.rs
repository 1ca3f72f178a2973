//! Reference-based generation metrics: BLEU-4, ROUGE-L, CIDEr-D and an
//! exact-match METEOR variant (`meteor_s`).
//!
//! All functions take token sequences; scores are in [0, 1] except CIDEr,
//! which follows the usual ×10 scaling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub type Tokens = Vec<String>;

/// A candidate with its reference set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredItem {
    pub candidate: Tokens,
    pub references: Vec<Tokens>,
}

impl ScoredItem {
    pub fn from_text(candidate: &str, references: &[&str]) -> Self {
        ScoredItem {
            candidate: tokenize(candidate),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub meteor_s: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
}

impl Scores {
    pub fn scaled(&self, factor: f64) -> Scores {
        Scores {
            bleu4: self.bleu4 * factor,
            meteor_s: self.meteor_s * factor,
            rouge_l: self.rouge_l * factor,
            cider: self.cider * factor,
        }
    }
}

fn check_corpus(corpus: &[ScoredItem], op: &str) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Data(format!("{op}: empty corpus")));
    }
    for (i, item) in corpus.iter().enumerate() {
        if item.references.is_empty() {
            return Err(Error::Data(format!("{op}: item {i} has no reference")));
        }
        if item.candidate.is_empty() || item.references.iter().any(Vec::is_empty) {
            return Err(Error::Data(format!("{op}: item {i} has an empty sequence")));
        }
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 with pooled n-gram counts, closest-reference brevity
/// penalty, and add-one smoothing of zero match counts for n ≥ 2.
pub fn bleu4(corpus: &[ScoredItem]) -> Result<f64> {
    check_corpus(corpus, "bleu4")?;
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let (mut cand_len, mut ref_len) = (0u64, 0u64);
    for item in corpus {
        let c = item.candidate.len();
        cand_len += c as u64;
        let closest = item
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("checked nonempty");
        ref_len += closest as u64;
        for n in 1..=4 {
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &item.references {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in ngram_counts(&item.candidate, n) {
                matches[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0)) as u64;
            }
            totals[n - 1] += c.saturating_sub(n - 1) as u64;
        }
    }
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = (matches[n] as f64, totals[n] as f64);
        let p = if n >= 1 && matches[n] == 0 {
            (m + 1.0) / (t + 1.0)
        } else {
            m / t
        };
        log_sum += p.ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_sum / 4.0).exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

fn rouge_item(item: &ScoredItem, beta: f64) -> f64 {
    let b2 = beta * beta;
    item.references
        .iter()
        .map(|r| {
            let l = lcs_len(&item.candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let rec = l / r.len() as f64;
            let prec = l / item.candidate.len() as f64;
            (1.0 + b2) * rec * prec / (rec + b2 * prec)
        })
        .fold(0.0, f64::max)
}

/// Mean over items of the best LCS F-measure against any reference.
pub fn rouge_l(corpus: &[ScoredItem], beta: f64) -> Result<f64> {
    check_corpus(corpus, "rougeL")?;
    Ok(corpus.iter().map(|i| rouge_item(i, beta)).sum::<f64>() / corpus.len() as f64)
}

pub const CIDER_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

type Grams = HashMap<Vec<String>, f64>;

fn cider_vectors(tokens: &[String], n_max: usize) -> Vec<Grams> {
    (1..=n_max)
        .map(|n| {
            ngram_counts(tokens, n)
                .into_iter()
                .map(|(g, k)| (g.to_vec(), k as f64))
                .collect()
        })
        .collect()
}

/// Per-item CIDEr-D scores.
pub fn cider_items(corpus: &[ScoredItem], n_max: usize, sigma: f64) -> Result<Vec<f64>> {
    check_corpus(corpus, "cider")?;
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for item in corpus {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for r in &item.references {
            for n in 1..=n_max {
                if r.len() >= n {
                    seen.extend(r.windows(n));
                }
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    let weigh = |counts: Vec<Grams>| -> (Vec<Grams>, Vec<f64>) {
        let mut norms = Vec::with_capacity(counts.len());
        let vecs = counts
            .into_iter()
            .map(|grams| {
                let v: Grams = grams
                    .into_iter()
                    .map(|(g, tf)| {
                        let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                        let w = tf * (log_n - d.ln());
                        (g, w)
                    })
                    .collect();
                norms.push(v.values().map(|w| w * w).sum::<f64>().sqrt());
                v
            })
            .collect();
        (vecs, norms)
    };
    let mut out = Vec::with_capacity(corpus.len());
    for item in corpus {
        let (hv, hn) = weigh(cider_vectors(&item.candidate, n_max));
        let mut total = 0.0;
        for r in &item.references {
            let (rv, rn) = weigh(cider_vectors(r, n_max));
            let delta = item.candidate.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            let mut per_n = 0.0;
            for n in 0..n_max {
                if hn[n] == 0.0 || rn[n] == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, &h) in &hv[n] {
                    if let Some(&rw) = rv[n].get(g) {
                        dot += h.min(rw) * rw;
                    }
                }
                per_n += dot / (hn[n] * rn[n]) * penalty;
            }
            total += per_n / n_max as f64;
        }
        out.push(10.0 * total / item.references.len() as f64);
    }
    Ok(out)
}

pub fn cider(corpus: &[ScoredItem], n_max: usize, sigma: f64) -> Result<f64> {
    let items = cider_items(corpus, n_max, sigma)?;
    Ok(items.iter().sum::<f64>() / items.len() as f64)
}

/// Best exact-unigram alignment: maximum matches, then fewest chunks.
/// Returns `(matches, chunks)`.
pub fn align(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut cand_count: BTreeMap<&str, usize> = BTreeMap::new();
    let mut ref_count: BTreeMap<&str, usize> = BTreeMap::new();
    for w in candidate {
        *cand_count.entry(w).or_insert(0) += 1;
    }
    for w in reference {
        *ref_count.entry(w).or_insert(0) += 1;
    }
    let target: usize = cand_count
        .iter()
        .map(|(w, &c)| c.min(ref_count.get(w).copied().unwrap_or(0)))
        .sum();
    if target == 0 {
        return (0, 0);
    }
    // matched words still available, per word type, as the search proceeds
    let mut budget: BTreeMap<&str, usize> = cand_count
        .iter()
        .map(|(w, &c)| (*w, c.min(ref_count.get(w).copied().unwrap_or(0))))
        .collect();
    let mut search = AlignSearch {
        cand: candidate,
        reference,
        used: vec![false; reference.len()],
        best: usize::MAX,
        nodes: 0,
    };
    search.dfs(0, None, 0, 0, target, &mut budget);
    (target, search.best)
}

const ALIGN_NODE_LIMIT: u64 = 2_000_000;

struct AlignSearch<'a> {
    cand: &'a [String],
    reference: &'a [String],
    used: Vec<bool>,
    best: usize,
    nodes: u64,
}

impl<'a> AlignSearch<'a> {
    fn dfs(
        &mut self,
        i: usize,
        last: Option<(usize, usize)>,
        matched: usize,
        chunks: usize,
        target: usize,
        budget: &mut BTreeMap<&'a str, usize>,
    ) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > ALIGN_NODE_LIMIT && self.best != usize::MAX {
            return;
        }
        if matched == target {
            self.best = chunks;
            return;
        }
        if i == self.cand.len() {
            return;
        }
        let word = self.cand[i].as_str();
        let left = budget.get(word).copied().unwrap_or(0);
        if left > 0 {
            // prefer the position that extends the current chunk
            let mut order: Vec<usize> = (0..self.reference.len())
                .filter(|&j| !self.used[j] && self.reference[j] == word)
                .collect();
            if let Some((li, lj)) = last {
                if li + 1 == i {
                    order.sort_by_key(|&j| j != lj + 1);
                }
            }
            for j in order {
                let extends = matches!(last, Some((li, lj)) if li + 1 == i && lj + 1 == j);
                self.used[j] = true;
                budget.insert(word, left - 1);
                self.dfs(
                    i + 1,
                    Some((i, j)),
                    matched + 1,
                    chunks + usize::from(!extends),
                    target,
                    budget,
                );
                budget.insert(word, left);
                self.used[j] = false;
            }
        }
        // skipping is allowed only while the remaining occurrences can still fill the budget
        let remaining_same = self.cand[i + 1..].iter().filter(|w| w.as_str() == word).count();
        if left <= remaining_same {
            self.dfs(i + 1, last, matched, chunks, target, budget);
        }
    }
}

pub const METEOR_ALPHA: f64 = 0.9;

fn meteor_pair(candidate: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = align(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

fn meteor_item(item: &ScoredItem) -> f64 {
    item.references
        .iter()
        .map(|r| meteor_pair(&item.candidate, r))
        .fold(0.0, f64::max)
}

/// Exact-match METEOR, best reference per item, mean over the corpus.
pub fn meteor_s(corpus: &[ScoredItem]) -> Result<f64> {
    check_corpus(corpus, "meteor_s")?;
    Ok(corpus.iter().map(meteor_item).sum::<f64>() / corpus.len() as f64)
}

/// Tunable metric constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub rouge_beta: f64,
    pub cider_n: usize,
    pub cider_sigma: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            rouge_beta: ROUGE_BETA,
            cider_n: CIDER_N,
            cider_sigma: CIDER_SIGMA,
        }
    }
}

impl MetricOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rouge_beta > 0.0) || !(self.cider_sigma > 0.0) || self.cider_n == 0 {
            return Err(Error::Config(
                "metric options need rouge_beta > 0, cider_sigma > 0 and cider_n ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// All four corpus metrics with default options.
pub fn score_corpus(corpus: &[ScoredItem]) -> Result<Scores> {
    score_corpus_with(corpus, &MetricOptions::default())
}

pub fn score_corpus_with(corpus: &[ScoredItem], opts: &MetricOptions) -> Result<Scores> {
    Ok(Scores {
        bleu4: bleu4(corpus)?,
        meteor_s: meteor_s(corpus)?,
        rouge_l: rouge_l(corpus, opts.rouge_beta)?,
        cider: cider(corpus, opts.cider_n, opts.cider_sigma)?,
    })
}

/// Per-item scores; BLEU here is the single-sentence value and CIDEr uses
/// document frequencies from the whole corpus.
pub fn score_items(corpus: &[ScoredItem], opts: &MetricOptions) -> Result<Vec<Scores>> {
    let ciders = cider_items(corpus, opts.cider_n, opts.cider_sigma)?;
    corpus
        .iter()
        .zip(ciders)
        .map(|(item, cider)| {
            Ok(Scores {
                bleu4: bleu4(std::slice::from_ref(item))?,
                meteor_s: meteor_item(item),
                rouge_l: rouge_item(item, opts.rouge_beta),
                cider,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

/// Reads `{id, candidate, references}` lines.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionLine>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn corpus_from_predictions(lines: &[PredictionLine]) -> Vec<ScoredItem> {
    lines
        .iter()
        .map(|l| {
            let refs: Vec<&str> = l.references.iter().map(String::as_str).collect();
            ScoredItem::from_text(&l.candidate, &refs)
        })
        .collect()
}
