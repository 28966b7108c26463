//! Query/API pairs, corpus splits, and prompt-masked training examples.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{special, Vocab};

/// Lowercase and trim a fully-qualified API name.
pub fn normalize_api(api: &str) -> String {
    api.trim().to_lowercase()
}

fn normalize_query(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn api_words(api: &str) -> Vec<&str> {
    api.split('.').collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryApiPair {
    pub query: String,
    pub api: String,
    /// Other APIs that also answer the query.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_relevant: Vec<String>,
}

impl QueryApiPair {
    /// Normalizes and validates; the error is a human-readable reason.
    pub fn new(query: &str, api: &str, extra_relevant: Vec<String>) -> std::result::Result<Self, String> {
        let query = normalize_query(query);
        if query.is_empty() {
            return Err("empty query".into());
        }
        let api = normalize_api(api);
        if api.is_empty() {
            return Err("empty api".into());
        }
        let words = api_words(&api);
        if words.len() < 2 {
            return Err(format!("api `{api}` has fewer than two dot-separated words"));
        }
        if words.iter().any(|w| w.is_empty()) {
            return Err(format!("api `{api}` has an empty word"));
        }
        let extra_relevant = extra_relevant
            .iter()
            .map(|a| normalize_api(a))
            .filter(|a| !a.is_empty() && *a != api)
            .collect();
        Ok(Self {
            query,
            api,
            extra_relevant,
        })
    }

    pub fn word_count(&self) -> usize {
        api_words(&self.api).len()
    }

    /// Ground truth plus any extra relevant APIs.
    pub fn relevant(&self) -> Vec<String> {
        let mut out = vec![self.api.clone()];
        for a in &self.extra_relevant {
            if !out.contains(a) {
                out.push(a.clone());
            }
        }
        out
    }
}

#[derive(Deserialize)]
struct RawRecord {
    query: Option<String>,
    api: Option<String>,
    #[serde(default)]
    relevant: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub pairs: Vec<QueryApiPair>,
    pub errors: Vec<LineError>,
    pub duplicates: usize,
}

impl LoadReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} pairs, {} rejected lines, {} duplicates dropped",
            self.pairs.len(),
            self.errors.len(),
            self.duplicates
        );
        for e in self.errors.iter().take(20) {
            write!(s, "\n  line {}: {}", e.line, e.reason).unwrap();
        }
        if self.errors.len() > 20 {
            write!(s, "\n  ... {} more", self.errors.len() - 20).unwrap();
        }
        s
    }
}

/// Parse JSON-lines text. Blank lines are skipped; malformed ones are
/// reported, never dropped silently.
pub fn parse_pairs(text: &str) -> LoadReport {
    let mut report = LoadReport::default();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(LineError {
                    line: line_no,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let (Some(query), Some(api)) = (rec.query, rec.api) else {
            report.errors.push(LineError {
                line: line_no,
                reason: "record missing `query` or `api`".into(),
            });
            continue;
        };
        match QueryApiPair::new(&query, &api, rec.relevant) {
            Ok(p) => {
                if seen.insert((p.query.clone(), p.api.clone())) {
                    report.pairs.push(p);
                } else {
                    log::warn!("line {line_no}: duplicate pair ({}, {}) dropped", p.query, p.api);
                    report.duplicates += 1;
                }
            }
            Err(reason) => report.errors.push(LineError { line: line_no, reason }),
        }
    }
    report
}

pub fn load_pairs(path: &Path) -> Result<LoadReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_pairs(&text))
}

/// One JSON object per line, the same format `load_pairs` reads.
pub fn pairs_to_jsonl(pairs: &[QueryApiPair]) -> String {
    #[derive(Serialize)]
    struct Out<'a> {
        query: &'a str,
        api: &'a str,
        #[serde(skip_serializing_if = "<[String]>::is_empty")]
        relevant: &'a [String],
    }
    let mut s = String::new();
    for p in pairs {
        let rec = Out {
            query: &p.query,
            api: &p.api,
            relevant: &p.extra_relevant,
        };
        s.push_str(&serde_json::to_string(&rec).expect("plain strings serialize"));
        s.push('\n');
    }
    s
}

// --------------------------------------------------------------------- split

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_ratio: 0.8,
            valid_ratio: 0.1,
            test_ratio: 0.1,
            seed: 42,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train_ratio, self.valid_ratio, self.test_ratio];
        if r.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidSplit(format!("ratios must be positive, got {r:?}")));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Indices into the pair list for each partition, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub seed: u64,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MIN_SPLIT_PAIRS: usize = 10;

/// Seeded shuffle, then floor-sized valid/test parts; the remainder trains.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n < MIN_SPLIT_PAIRS {
        return Err(Error::InvalidSplit(format!(
            "need at least {MIN_SPLIT_PAIRS} pairs, got {n}"
        )));
    }
    let n_valid = (n as f64 * spec.valid_ratio + 1e-9).floor() as usize;
    let n_test = (n as f64 * spec.test_ratio + 1e-9).floor() as usize;
    let n_train = n - n_valid - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let part = |r: std::ops::Range<usize>| {
        let mut v = order[r].to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitIndices {
        seed: spec.seed,
        train: part(0..n_train),
        valid: part(n_train..n_train + n_valid),
        test: part(n_train + n_valid..n),
    })
}

pub type Partitions = (Vec<QueryApiPair>, Vec<QueryApiPair>, Vec<QueryApiPair>);

pub fn split_corpus(pairs: &[QueryApiPair], spec: &SplitSpec) -> Result<Partitions> {
    let idx = split_indices(pairs.len(), spec)?;
    Ok(idx.materialize(pairs))
}

impl SplitIndices {
    pub fn materialize(&self, pairs: &[QueryApiPair]) -> Partitions {
        let take = |v: &[usize]| v.iter().map(|&i| pairs[i].clone()).collect();
        (take(&self.train), take(&self.valid), take(&self.test))
    }

    fn manifest(seed: u64, idx: &[usize]) -> String {
        let mut s = format!("# seed {seed}\n");
        for i in idx {
            writeln!(s, "{i}").unwrap();
        }
        s
    }

    /// Writes `split_train.txt`, `split_valid.txt` and `split_test.txt`.
    pub fn write_manifests(&self, dir: &Path) -> Result<()> {
        for (name, idx) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            let path = dir.join(format!("split_{name}.txt"));
            std::fs::write(&path, Self::manifest(self.seed, idx)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read_manifests(dir: &Path) -> Result<Self> {
        let mut seed = None;
        let mut parts: Vec<Vec<usize>> = Vec::new();
        for name in ["train", "valid", "test"] {
            let path = dir.join(format!("split_{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut idx = Vec::new();
            for line in text.lines() {
                if let Some(s) = line.strip_prefix("# seed ") {
                    let s: u64 = s
                        .trim()
                        .parse()
                        .map_err(|_| Error::InvalidSplit(format!("{}: bad seed line", path.display())))?;
                    if seed.is_some_and(|prev| prev != s) {
                        return Err(Error::InvalidSplit("manifests disagree on the seed".into()));
                    }
                    seed = Some(s);
                } else if !line.trim().is_empty() {
                    idx.push(line.trim().parse().map_err(|_| {
                        Error::InvalidSplit(format!("{}: bad index `{line}`", path.display()))
                    })?);
                }
            }
            parts.push(idx);
        }
        let test = parts.pop().unwrap();
        let valid = parts.pop().unwrap();
        let train = parts.pop().unwrap();
        Ok(Self {
            seed: seed.ok_or_else(|| Error::InvalidSplit("missing seed line".into()))?,
            train,
            valid,
            test,
        })
    }
}

// ------------------------------------------------------------------ prompts

/// An API with its last `masked_count` words hidden.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedApi {
    pub prefix_words: Vec<String>,
    pub masked_words: Vec<String>,
    /// Kept words joined by dots, then `.<mask>`.
    pub prompt: String,
}

pub fn mask_api(api: &str, n_rand: usize) -> Result<MaskedApi> {
    let words = api_words(api);
    let n = words.len();
    if n < 2 || n_rand < 1 || n_rand > n - 1 {
        return Err(Error::InvalidMask {
            api: api.to_string(),
            n_rand,
            words: n,
        });
    }
    let keep = n - n_rand;
    let prefix_words: Vec<String> = words[..keep].iter().map(|w| w.to_string()).collect();
    let masked_words = words[keep..].iter().map(|w| w.to_string()).collect();
    let prompt = prompt_for_prefix(&prefix_words.join("."));
    Ok(MaskedApi {
        prefix_words,
        masked_words,
        prompt,
    })
}

/// Prompt text for a user-supplied prefix; an empty prefix gives the bare
/// mask token.
pub fn prompt_for_prefix(prefix: &str) -> String {
    let p = normalize_api(prefix);
    let p = p.trim_matches('.');
    if p.is_empty() {
        special::MASK_TEXT.to_string()
    } else {
        format!("{p}.{}", special::MASK_TEXT)
    }
}

/// `prompt ⊕ separator ⊕ query`.
pub fn build_input(prompt: &str, query: &str) -> String {
    format!("{prompt}{}{query}", special::SEP_TEXT)
}

/// Inverse of `build_input` for prompts produced by `prompt_for_prefix`:
/// returns `(prefix, query)`.
pub fn parse_input(input: &str) -> Option<(String, String)> {
    let (prompt, query) = input.split_once(special::SEP_TEXT)?;
    let prefix = if prompt == special::MASK_TEXT {
        String::new()
    } else {
        prompt.strip_suffix(&format!(".{}", special::MASK_TEXT))?.to_string()
    };
    Some((prefix, query.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptedExample {
    pub prefix_words: Vec<String>,
    pub masked_count: usize,
    pub input_text: String,
    pub target_text: String,
}

impl PromptedExample {
    pub fn from_mask(pair: &QueryApiPair, n_rand: usize) -> Result<Self> {
        let m = mask_api(&pair.api, n_rand)?;
        Ok(Self {
            input_text: build_input(&m.prompt, &pair.query),
            prefix_words: m.prefix_words,
            masked_count: n_rand,
            target_text: pair.api.clone(),
        })
    }

    pub fn prefix(&self) -> String {
        self.prefix_words.join(".")
    }
}

pub const DEFAULT_PROMPTS_PER_API: usize = 3;

/// Up to `count` prompts with distinct mask counts drawn without
/// replacement from `1..=n-1`.
pub fn make_prompted_examples<R: Rng + ?Sized>(pair: &QueryApiPair, rng: &mut R, count: usize) -> Vec<PromptedExample> {
    let slots = pair.word_count().saturating_sub(1);
    let m = count.min(slots);
    rand::seq::index::sample(rng, slots, m)
        .into_iter()
        .map(|i| PromptedExample::from_mask(pair, i + 1).expect("mask count within 1..n-1"))
        .collect()
}

/// Input text with the first `prefix_words` API words as the prompt
/// (capped at `n - 1`); zero gives the bare mask token.
pub fn fixed_prefix_input(pair: &QueryApiPair, prefix_words: usize) -> (String, String) {
    let words = api_words(&pair.api);
    let keep = prefix_words.min(words.len() - 1);
    let prefix = words[..keep].join(".");
    (build_input(&prompt_for_prefix(&prefix), &pair.query), prefix)
}

// --------------------------------------------------------------------- stats

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub average: f64,
    pub mode: usize,
    pub median: f64,
    /// `(threshold, fraction of lengths strictly below it)`.
    pub coverage: Vec<(usize, f64)>,
}

impl LengthStats {
    pub fn from_lengths(lengths: &[usize], thresholds: &[usize]) -> Self {
        if lengths.is_empty() {
            return Self {
                average: 0.0,
                mode: 0,
                median: 0.0,
                coverage: thresholds.iter().map(|&t| (t, 0.0)).collect(),
            };
        }
        let n = lengths.len() as f64;
        let average = lengths.iter().sum::<usize>() as f64 / n;
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in lengths {
            *hist.entry(l).or_default() += 1;
        }
        let top = hist.values().copied().max().unwrap_or(0);
        let mode = hist.iter().find(|&(_, &c)| c == top).map_or(0, |(&l, _)| l);
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid] as f64
        } else {
            (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
        };
        let coverage = thresholds
            .iter()
            .map(|&t| (t, lengths.iter().filter(|&&l| l < t).count() as f64 / n))
            .collect();
        Self {
            average,
            mode,
            median,
            coverage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub query: LengthStats,
    pub api: LengthStats,
}

pub const QUERY_THRESHOLDS: [usize; 3] = [16, 32, 48];
pub const API_THRESHOLDS: [usize; 3] = [8, 12, 16];

/// Subword-token length statistics.
pub fn corpus_stats(pairs: &[QueryApiPair], vocab: &Vocab) -> CorpusStats {
    let q: Vec<usize> = pairs.iter().map(|p| vocab.encode_ids(&p.query).len()).collect();
    let a: Vec<usize> = pairs.iter().map(|p| vocab.encode_ids(&p.api).len()).collect();
    CorpusStats {
        pairs: pairs.len(),
        query: LengthStats::from_lengths(&q, &QUERY_THRESHOLDS),
        api: LengthStats::from_lengths(&a, &API_THRESHOLDS),
    }
}
