//! Exact-match rate at k, mean reciprocal rank and mean average precision.
//!
//! Per-query values are exact rationals and are summed exactly, so the
//! aggregate does not depend on query order or on how evaluation is split
//! across threads.

use std::collections::HashSet;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::normalize_api;
use crate::decoder::{api_check_filter, ranked_candidates, ApiLibrary, Candidate, DecodeOptions};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::Params;
use crate::tokenizer::Vocab;

/// EM@1 through EM@`MAX_K` are reported.
pub const MAX_K: usize = 5;

/// Ordered candidates for one query and the set of APIs counted as correct.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: usize,
    pub candidates: Vec<String>,
    pub relevant: Vec<String>,
}

fn dedup_normalized<S: AsRef<str>>(items: &[S]) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .iter()
        .map(|s| normalize_api(s.as_ref()))
        .filter(|s| seen.insert(s.clone()))
        .collect()
}

impl RankedResult {
    /// Normalizes all strings and drops repeated candidates, keeping each at
    /// its best rank.
    pub fn new<S: AsRef<str>, T: AsRef<str>>(query_id: usize, candidates: &[S], relevant: &[T]) -> Result<Self> {
        let relevant = dedup_normalized(relevant);
        if relevant.is_empty() {
            return Err(Error::InvalidConfig(format!("query {query_id} has no relevant API")));
        }
        Ok(Self {
            query_id,
            candidates: dedup_normalized(candidates),
            relevant,
        })
    }

    fn is_relevant(&self, c: &str) -> bool {
        self.relevant.iter().any(|r| r == c)
    }

    /// 1-based rank of the first relevant candidate.
    pub fn first_hit(&self) -> Option<usize> {
        self.candidates.iter().position(|c| self.is_relevant(c)).map(|p| p + 1)
    }

    pub fn hit_at(&self, k: usize) -> bool {
        self.first_hit().is_some_and(|r| r <= k)
    }

    pub fn reciprocal_rank(&self) -> BigRational {
        match self.first_hit() {
            Some(r) => ratio(1, r),
            None => BigRational::zero(),
        }
    }

    pub fn average_precision(&self) -> BigRational {
        let mut hits = 0usize;
        let mut sum = BigRational::zero();
        for (i, c) in self.candidates.iter().enumerate() {
            if self.is_relevant(c) {
                hits += 1;
                sum += ratio(hits, i + 1);
            }
        }
        sum / BigInt::from(self.relevant.len())
    }
}

fn ratio(n: usize, d: usize) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

fn mean_of(results: &[RankedResult], f: impl Fn(&RankedResult) -> BigRational) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyDataset("ranked results"));
    }
    let sum = results.iter().map(f).fold(BigRational::zero(), |a, b| a + b);
    Ok(to_f64(&(sum / BigInt::from(results.len()))))
}

/// Percentage of queries with a relevant API among their top `k` candidates.
pub fn em_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if results.is_empty() {
        return Err(Error::EmptyDataset("ranked results"));
    }
    let hits = results.iter().filter(|r| r.hit_at(k)).count();
    Ok(to_f64(&ratio(hits * 100, results.len())))
}

pub fn mrr(results: &[RankedResult]) -> Result<f64> {
    mean_of(results, RankedResult::reciprocal_rank)
}

/// Mean of per-query average precision.
pub fn map(results: &[RankedResult]) -> Result<f64> {
    mean_of(results, RankedResult::average_precision)
}

/// Average precision of one ranked list against a relevant set.
pub fn average_precision<S: AsRef<str>, T: AsRef<str>>(candidates: &[S], relevant: &[T]) -> Result<f64> {
    Ok(to_f64(&RankedResult::new(0, candidates, relevant)?.average_precision()))
}

// ------------------------------------------------------------- evaluation

/// One evaluation query: a natural-language query, the known prefix and the
/// APIs that count as correct.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub query: String,
    pub prefix: String,
    pub relevant: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: usize,
    pub query: String,
    pub prefix: String,
    pub relevant: Vec<String>,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub first_hit: Option<usize>,
    pub average_precision: f64,
    /// Decoding error, scored as a miss.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub queries: usize,
    /// EM@1..EM@5 in percent.
    pub em: Vec<f64>,
    pub mrr: f64,
    pub map: f64,
    pub failures: usize,
    pub rows: Vec<QueryRow>,
}

impl EvalReport {
    pub fn from_results(label: &str, results: &[RankedResult], rows: Vec<QueryRow>) -> Result<Self> {
        let em = (1..=MAX_K).map(|k| em_at_k(results, k)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label: label.to_string(),
            queries: results.len(),
            em,
            mrr: mrr(results)?,
            map: map(results)?,
            failures: rows.iter().filter(|r| r.error.is_some()).count(),
            rows,
        })
    }

    pub fn table_header() -> String {
        let mut s = format!("{:<24}", "setting");
        for k in 1..=MAX_K {
            let _ = write!(s, " {:>7}", format!("EM@{k}"));
        }
        let _ = write!(s, " {:>7} {:>7}", "MRR", "MAP");
        s
    }

    pub fn table_row(&self) -> String {
        let mut s = format!("{:<24}", self.label);
        for v in &self.em {
            let _ = write!(s, " {v:>7.2}");
        }
        let _ = write!(s, " {:>7.3} {:>7.3}", self.mrr, self.map);
        s
    }
}

/// Aligned text table of several reports.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = EvalReport::table_header();
    out.push('\n');
    for r in reports {
        out.push_str(&r.table_row());
        out.push('\n');
    }
    out
}

/// How the library filter is applied during evaluation.
#[derive(Clone, Debug)]
pub struct LibraryCheck<'a> {
    pub library: &'a ApiLibrary,
    /// Library members to collect before stopping.
    pub need: usize,
}

/// Beam candidates for every item, in item order. Failures are kept as
/// messages so that they can be scored as misses.
pub fn decode_items<F: Float>(
    params: &Params<F>,
    vocab: &Vocab,
    items: &[EvalItem],
    opts: &DecodeOptions,
) -> Vec<std::result::Result<Vec<Candidate>, String>> {
    items
        .par_iter()
        .map(|it| ranked_candidates(params, vocab, &it.query, &it.prefix, opts).map_err(|e| e.to_string()))
        .collect()
}

/// Decodes every item, optionally filters through the library, and scores
/// the candidate lists against the relevant sets.
pub fn evaluate<F: Float>(
    params: &Params<F>,
    vocab: &Vocab,
    items: &[EvalItem],
    opts: &DecodeOptions,
    check: Option<&LibraryCheck<'_>>,
    label: &str,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let decoded = decode_items(params, vocab, items, opts);
    score_decoded(items, &decoded, check, label)
}

/// Scores decoded candidate lists, applying the library filter first when
/// `check` is given. Decoding errors count as misses.
pub fn score_decoded(
    items: &[EvalItem],
    decoded: &[std::result::Result<Vec<Candidate>, String>],
    check: Option<&LibraryCheck<'_>>,
    label: &str,
) -> Result<EvalReport> {
    if items.is_empty() || items.len() != decoded.len() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let mut results = Vec::with_capacity(items.len());
    let mut rows = Vec::with_capacity(items.len());
    for (i, (it, d)) in items.iter().zip(decoded).enumerate() {
        let (cands, error) = match (d, check) {
            (Ok(c), Some(lc)) => (api_check_filter(c, lc.library, lc.need), None),
            (Ok(c), None) => (c.clone(), None),
            (Err(e), _) => (Vec::new(), Some(e.clone())),
        };
        let texts: Vec<&str> = cands.iter().map(|c| c.text.as_str()).collect();
        let r = RankedResult::new(i, &texts, &it.relevant)?;
        rows.push(QueryRow {
            query_id: i,
            query: it.query.clone(),
            prefix: it.prefix.clone(),
            relevant: r.relevant.clone(),
            candidates: r.candidates.clone(),
            scores: cands.iter().map(|c| c.score).collect(),
            first_hit: r.first_hit(),
            average_precision: to_f64(&r.average_precision()),
            error,
        });
        results.push(r);
    }
    EvalReport::from_results(label, &results, rows)
}
