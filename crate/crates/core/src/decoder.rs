//! Beam-search completion ranked by mean token log-probability, and the
//! library filter that keeps only known API names.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_input, normalize_api, prompt_for_prefix};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::{encode_source, next_token_log_probs, Mat, Params};
use crate::tokenizer::{special, Vocab};

pub const DEFAULT_BEAM_WIDTH: usize = 10;

/// Next-token distribution source for [`beam_search`].
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn end_id(&self) -> u32;
    /// Tokens that may be appended to a hypothesis.
    fn is_expandable(&self, _id: u32) -> bool {
        true
    }
    /// Log-probabilities over the vocabulary after `prefix`.
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// Scores continuations with a trained model for one encoded input.
pub struct ModelScorer<'p, F: Float> {
    params: &'p Params<F>,
    memory: Mat<F>,
}

impl<'p, F: Float> ModelScorer<'p, F> {
    pub fn new(params: &'p Params<F>, input: &crate::tokenizer::TokenSeq) -> Result<Self> {
        Ok(Self {
            params,
            memory: encode_source(params, input)?,
        })
    }
}

impl<F: Float> StepScorer for ModelScorer<'_, F> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn end_id(&self) -> u32 {
        special::EOS
    }

    fn is_expandable(&self, id: u32) -> bool {
        !matches!(id, special::PAD | special::BOS | special::MASK | special::SEP)
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(next_token_log_probs(self.params, &self.memory, prefix)?
            .into_iter()
            .map(Float::as_f64)
            .collect())
    }
}

/// A decoded token sequence with its per-token log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub log_probs: Vec<f64>,
    pub score: f64,
    /// The end token was emitted or the length limit reached.
    pub finished: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Self {
            ids: Vec::new(),
            log_probs: Vec::new(),
            score: 0.0,
            finished: false,
        }
    }

    fn extend(&self, id: u32, lp: f64, end: u32, max_len: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.push(id);
        let mut log_probs = self.log_probs.clone();
        log_probs.push(lp);
        let score = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
        let finished = id == end || ids.len() >= max_len;
        Self {
            ids,
            log_probs,
            score,
            finished,
        }
    }
}

/// Best first: higher mean log-probability, then shorter, then smaller ids.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.ids.len().cmp(&b.ids.len()))
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Keeps the `width` best hypotheses per step. Finished hypotheses stay in
/// the beam and compete with live ones.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, width: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if width == 0 || max_len == 0 {
        return Err(Error::InvalidConfig("beam width and max length must be >= 1".into()));
    }
    let end = scorer.end_id();
    let tokens: Vec<u32> = (0..scorer.vocab_size() as u32).filter(|&t| scorer.is_expandable(t)).collect();
    let mut beam = vec![Hypothesis::root()];
    for _ in 0..max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut next = Vec::with_capacity(beam.len() * tokens.len());
        for h in beam {
            if h.finished {
                next.push(h);
                continue;
            }
            let lps = scorer.log_probs(&h.ids)?;
            for &t in &tokens {
                next.push(h.extend(t, lps[t as usize], end, max_len));
            }
        }
        next.sort_by(rank_order);
        next.truncate(width);
        beam = next;
    }
    beam.retain(|h| !h.ids.is_empty());
    Ok(beam)
}

// ---------------------------------------------------------------- library

/// Set of known API names, compared after normalization.
#[derive(Clone, Debug, Default)]
pub struct ApiLibrary {
    names: HashSet<String>,
}

/// Lowercase, trim and collapse runs of dots.
pub fn normalize_library_name(s: &str) -> String {
    let s = normalize_api(s);
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c == '.' && out.ends_with('.') {
            continue;
        }
        out.push(c);
    }
    out
}

impl ApiLibrary {
    pub fn from_names<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Self {
        Self {
            names: names
                .into_iter()
                .map(|n| normalize_library_name(n.as_ref()))
                .filter(|n| !n.is_empty())
                .collect(),
        }
    }

    /// One name per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        Self::from_names(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, api: &str) -> bool {
        self.names.contains(&normalize_library_name(api))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// A ranked completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub ids: Vec<u32>,
    pub text: String,
    pub log_probs: Vec<f64>,
    pub score: f64,
    pub finished: bool,
    /// Library membership; `None` when no library was consulted.
    pub in_library: Option<bool>,
}

impl Candidate {
    pub fn from_hypothesis(h: Hypothesis, vocab: &Vocab) -> Result<Self> {
        let text = normalize_api(&vocab.decode(&h.ids)?);
        Ok(Self {
            ids: h.ids,
            text,
            log_probs: h.log_probs,
            score: h.score,
            finished: h.finished,
            in_library: None,
        })
    }
}

/// Keeps library members in rank order until `need` are found; if there are
/// fewer, the best non-members are appended (flagged) up to
/// `min(need, candidates.len())`. An empty library leaves the list as is.
pub fn api_check_filter(candidates: &[Candidate], library: &ApiLibrary, need: usize) -> Vec<Candidate> {
    if library.is_empty() {
        log::warn!("API library is empty; skipping the library filter");
        return candidates.to_vec();
    }
    let need = need.max(1);
    let flagged: Vec<Candidate> = candidates
        .iter()
        .map(|c| Candidate {
            in_library: Some(library.contains(&c.text)),
            ..c.clone()
        })
        .collect();
    let mut out: Vec<Candidate> = flagged.iter().filter(|c| c.in_library == Some(true)).take(need).cloned().collect();
    let target = need.min(flagged.len());
    if out.len() < target {
        let missing = target - out.len();
        out.extend(flagged.iter().filter(|c| c.in_library == Some(false)).take(missing).cloned());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    pub beam_width: usize,
    /// Output token budget; `None` uses the model's maximum.
    pub max_len: Option<usize>,
    /// Apply the library filter when a library is supplied.
    pub api_check: bool,
    /// Drop candidates that do not start with the given prefix.
    pub prefix_consistent: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_width: DEFAULT_BEAM_WIDTH,
            max_len: None,
            api_check: true,
            prefix_consistent: false,
        }
    }
}

/// Beam candidates for a query and known prefix, deduplicated by text.
pub fn ranked_candidates<F: Float>(
    params: &Params<F>,
    vocab: &Vocab,
    query: &str,
    prefix: &str,
    opts: &DecodeOptions,
) -> Result<Vec<Candidate>> {
    let input = build_input(&prompt_for_prefix(prefix), query);
    let seq = vocab.encode(&input, params.config.max_input_len);
    let scorer = ModelScorer::new(params, &seq)?;
    let max_len = opts
        .max_len
        .unwrap_or(params.config.max_output_len)
        .min(params.config.max_output_len);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for h in beam_search(&scorer, opts.beam_width, max_len)? {
        let c = Candidate::from_hypothesis(h, vocab)?;
        if seen.insert(c.text.clone()) {
            out.push(c);
        }
    }
    if opts.prefix_consistent {
        let p = normalize_api(prefix);
        out.retain(|c| c.text.starts_with(&p));
    }
    Ok(out)
}

/// Top-`k` completions, library-filtered when `library` is given and
/// `opts.api_check` is set.
pub fn complete<F: Float>(
    params: &Params<F>,
    vocab: &Vocab,
    query: &str,
    prefix: &str,
    k: usize,
    opts: &DecodeOptions,
    library: Option<&ApiLibrary>,
) -> Result<Vec<Candidate>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if k > opts.beam_width {
        return Err(Error::BeamTooNarrow {
            k,
            width: opts.beam_width,
        });
    }
    let mut cands = ranked_candidates(params, vocab, query, prefix, opts)?;
    if let Some(lib) = library {
        if opts.api_check {
            cands = api_check_filter(&cands, lib, k);
        } else {
            for c in &mut cands {
                c.in_library = Some(lib.contains(&c.text));
            }
        }
    }
    cands.truncate(k);
    Ok(cands)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token table keyed by prefix length and last token.
    struct Table {
        vocab: usize,
        end: u32,
        seed: u64,
    }

    impl StepScorer for Table {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn end_id(&self) -> u32 {
            self.end
        }
        fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            let mut h = self.seed;
            for &t in prefix {
                h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1);
            }
            let raw: Vec<f64> = (0..self.vocab)
                .map(|i| {
                    let x = h.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add((i as u64).wrapping_mul(0xBF58476D1CE4E5B9));
                    1.0 + (x >> 40) as f64 / (1u64 << 24) as f64 * 3.0
                })
                .collect();
            let z: f64 = raw.iter().map(|r| r.exp()).sum::<f64>().ln();
            Ok(raw.into_iter().map(|r| r - z).collect())
        }
    }

    fn cand(text: &str, score: f64) -> Candidate {
        Candidate {
            ids: vec![],
            text: text.into(),
            log_probs: vec![score],
            score,
            finished: true,
            in_library: None,
        }
    }

    #[test]
    fn width_one_is_greedy() {
        let t = Table { vocab: 6, end: 2, seed: 9 };
        let beam = beam_search(&t, 1, 5).unwrap();
        let mut ids = vec![];
        loop {
            let lp = t.log_probs(&ids).unwrap();
            let best = (0..6u32).max_by(|&a, &b| lp[a as usize].total_cmp(&lp[b as usize]).then(b.cmp(&a))).unwrap();
            ids.push(best);
            if best == 2 || ids.len() == 5 {
                break;
            }
        }
        assert_eq!(beam.len(), 1);
        assert_eq!(beam[0].ids, ids);
    }

    #[test]
    fn candidate_scores_are_mean_log_probs() {
        let t = Table { vocab: 5, end: 0, seed: 2 };
        for h in beam_search(&t, 10, 4).unwrap() {
            let mean = h.log_probs.iter().sum::<f64>() / h.log_probs.len() as f64;
            assert!((h.score - mean).abs() <= 1e-9);
            assert!(h.log_probs.iter().all(|&l| l <= 0.0));
            assert!(h.finished);
            assert!(h.ids.last() == Some(&0) || h.ids.len() == 4);
        }
    }

    #[test]
    fn filter_examples() {
        let lib = ApiLibrary::from_names(["b", "c"]);
        let c = [cand("a", -0.1), cand("b", -0.2), cand("c", -0.3)];
        let out = api_check_filter(&c, &lib, 2);
        assert_eq!(out.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(), ["b", "c"]);

        let lib_all = ApiLibrary::from_names(["a", "b", "c"]);
        let out = api_check_filter(&c, &lib_all, 2);
        assert_eq!(out.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(), ["a", "b"]);

        let ten: Vec<Candidate> = (0..10).map(|i| cand(&format!("x{i}"), -(i as f64))).collect();
        let lib = ApiLibrary::from_names(["x2", "x5", "x9"]);
        let out = api_check_filter(&ten, &lib, 5);
        let texts: Vec<_> = out.iter().map(|c| (c.text.as_str(), c.in_library)).collect();
        assert_eq!(
            texts,
            [
                ("x2", Some(true)),
                ("x5", Some(true)),
                ("x9", Some(true)),
                ("x0", Some(false)),
                ("x1", Some(false)),
            ]
        );
    }

    #[test]
    fn empty_library_is_identity() {
        let c = [cand("a", -0.1), cand("b", -0.2)];
        assert_eq!(api_check_filter(&c, &ApiLibrary::default(), 1), c.to_vec());
    }

    #[test]
    fn library_parsing_and_normalization() {
        let lib = ApiLibrary::parse("# comment\n  Java.Util..List \n\njava.io.file\n");
        assert_eq!(lib.len(), 2);
        assert!(lib.contains("java.util.list"));
        assert!(lib.contains("JAVA.util...list"));
        assert!(!lib.contains("# comment"));
    }

    #[test]
    fn rejects_zero_width() {
        let t = Table { vocab: 4, end: 0, seed: 1 };
        assert!(beam_search(&t, 0, 3).is_err());
    }
}
