//! End-to-end commands over one output directory: prepare data, train,
//! evaluate, complete single queries and run ablation sweeps.
//!
//! Every command is driven by a [`RunConfig`]. All randomness derives from
//! `RunConfig::seed`, fanned out per component by [`derive_seed`].

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advaug::AdvMethod;
use crate::corpus::{
    api_words, corpus_stats, fixed_prefix_input, load_pairs, make_prompted_examples, pairs_to_jsonl, parse_pairs,
    split_indices, CorpusStats, LineError, QueryApiPair, SplitIndices, SplitSpec, DEFAULT_PROMPTS_PER_API,
};
use crate::decoder::{complete, ApiLibrary, Candidate, DecodeOptions};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::metrics::{decode_items, format_table, score_decoded, EvalItem, EvalReport, LibraryCheck, MAX_K};
use crate::model::{load_checkpoint, read_checkpoint_header, Example, ModelConfig, Params};
use crate::tokenizer::{Vocab, DEFAULT_VOCAB_SIZE};
use crate::trainer::{fit, FitOptions, NumericMode, TrainConfig, TrainReport};

// ----------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/vocab.txt`.
    pub vocab: Option<PathBuf>,
    /// Defaults to `<out_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub api_library: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            out_dir: PathBuf::from("run"),
            vocab: None,
            checkpoint: None,
            api_library: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    /// Masked prompts generated per training API.
    pub prompts_per_api: usize,
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            train_ratio: s.train_ratio,
            valid_ratio: s.valid_ratio,
            test_ratio: s.test_ratio,
            prompts_per_api: DEFAULT_PROMPTS_PER_API,
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub decode: DecodeOptions,
    /// Known prefix length in words for every test query; unset draws a
    /// random mask per query as in training.
    pub prefix_words: Option<usize>,
    /// Library members to collect when filtering.
    pub check_need: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeOptions::default(),
            prefix_words: None,
            check_need: MAX_K,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub methods: Vec<AdvMethod>,
    /// Iteration counts tried for pgd and atcom; empty keeps `train.adv.k`.
    pub k_values: Vec<usize>,
    /// Prefix lengths evaluated for every trained model.
    pub prefix_modes: Vec<usize>,
    /// Epoch cap per setting; unset keeps `train.max_epochs`.
    pub max_epochs: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: AdvMethod::ALL.to_vec(),
            k_values: Vec::new(),
            prefix_modes: vec![0, 1, 2],
            max_epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 42,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        };
        cfg.resolve_seeds();
        cfg
    }
}

/// Deterministic per-component seed. Kept below 2^63 so that resolved
/// configs stay representable in TOML.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) & (i64::MAX as u64)
}

/// Command-line values that replace config-file values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<AdvMethod>,
    pub epsilon: Option<f64>,
    pub k_adv: Option<usize>,
    pub alpha: Option<f64>,
    pub beam_width: Option<usize>,
    pub api_library: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |reason: String| Error::ConfigParse {
            path: path.to_path_buf(),
            reason,
        };
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        cfg.resolve_seeds();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.method {
            self.train.adv.method = m;
        }
        if let Some(e) = o.epsilon {
            self.train.adv.epsilon = e;
        }
        if let Some(k) = o.k_adv {
            self.train.adv.k = k;
        }
        if let Some(a) = o.alpha {
            self.train.adv.alpha = a;
        }
        if let Some(w) = o.beam_width {
            self.eval.decode.beam_width = w;
        }
        if let Some(p) = &o.api_library {
            self.paths.api_library = Some(p.clone());
        }
        if let Some(p) = &o.out_dir {
            self.paths.out_dir = p.clone();
        }
        if let Some(p) = &o.corpus {
            self.paths.corpus = p.clone();
        }
        self.resolve_seeds();
    }

    /// Component seeds are always derived from the top-level seed.
    pub fn resolve_seeds(&mut self) {
        self.model.seed = derive_seed(self.seed, "model");
        self.train.seed = derive_seed(self.seed, "train");
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_ratio: self.data.train_ratio,
            valid_ratio: self.data.valid_ratio,
            test_ratio: self.data.test_ratio,
            seed: derive_seed(self.seed, "split"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        self.train.validate()?;
        if self.eval.decode.beam_width == 0 {
            return Err(Error::InvalidConfig("beam width must be >= 1".into()));
        }
        if self.data.prompts_per_api == 0 {
            return Err(Error::InvalidConfig("prompts_per_api must be >= 1".into()));
        }
        if self.data.vocab_size < Vocab::minimum_size() {
            return Err(Error::VocabTooSmall {
                requested: self.data.vocab_size,
                minimum: Vocab::minimum_size(),
            });
        }
        ModelConfig {
            vocab_size: Vocab::minimum_size(),
            ..self.model.clone()
        }
        .validate()
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out_dir
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.paths.vocab.clone().unwrap_or_else(|| self.out_dir().join("vocab.txt"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir().join("model.ckpt"))
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }
}

// ------------------------------------------------------------------- lock

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".apifill.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

// ---------------------------------------------------------------- prepare

/// One prompted training record as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub query: String,
    pub api: String,
    pub prefix: String,
    pub input: String,
    pub target: String,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub pairs: usize,
    pub rejected: Vec<LineError>,
    pub duplicates: usize,
    pub split: [usize; 3],
    pub examples: [usize; 3],
    pub vocab_size: usize,
    pub stats: CorpusStats,
    pub config: RunConfig,
}

const PARTS: [&str; 3] = ["train", "valid", "test"];

fn prompted_records(
    pairs: &[QueryApiPair],
    vocab: &Vocab,
    model: &ModelConfig,
    count: usize,
    seed: u64,
) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for pair in pairs {
        for ex in make_prompted_examples(pair, &mut rng, count) {
            out.push(DatasetRecord {
                query: pair.query.clone(),
                api: pair.api.clone(),
                prefix: ex.prefix(),
                input_ids: vocab.encode(&ex.input_text, model.max_input_len).content().to_vec(),
                target_ids: vocab.encode_target(&ex.target_text, model.max_output_len).content().to_vec(),
                input: ex.input_text,
                target: ex.target_text,
            });
        }
    }
    out
}

fn records_to_jsonl(records: &[DatasetRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Model inputs for stored records, re-encoded with `vocab`.
pub fn to_examples(records: &[DatasetRecord], vocab: &Vocab, model: &ModelConfig) -> Vec<Example> {
    records
        .iter()
        .map(|r| Example {
            input: vocab.encode(&r.input, model.max_input_len),
            target: vocab.encode_target(&r.target, model.max_output_len),
        })
        .collect()
}

/// Splits the corpus, trains the vocabulary on the training split, writes
/// prompted datasets and corpus statistics.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    cfg.validate()?;
    let corpus = &cfg.paths.corpus;
    if !corpus.is_file() {
        return Err(Error::io(
            corpus,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus file not found"),
        ));
    }
    let report = load_pairs(corpus)?;
    if !report.errors.is_empty() || report.duplicates > 0 {
        log::warn!("{}", report.summary());
    }
    if report.pairs.is_empty() {
        return Err(Error::EmptyDataset("corpus has no valid pairs"));
    }
    let split = split_indices(report.pairs.len(), &cfg.split_spec())?;
    let _lock = OutputLock::acquire(cfg.out_dir())?;
    prepare_in(cfg, &report.pairs, &split, report.errors, report.duplicates)
}

fn prepare_in(
    cfg: &RunConfig,
    pairs: &[QueryApiPair],
    split: &SplitIndices,
    rejected: Vec<LineError>,
    duplicates: usize,
) -> Result<PrepareSummary> {
    split.write_manifests(cfg.out_dir())?;
    let (train, valid, test) = split.materialize(pairs);

    let texts: Vec<&str> = train.iter().flat_map(|p| [p.query.as_str(), p.api.as_str()]).collect();
    let vocab = Vocab::train(&texts, cfg.data.vocab_size)?;
    write_file(&cfg.vocab_path(), vocab.to_text().as_bytes())?;

    let mut examples = [0; 3];
    for (i, (name, part)) in PARTS.iter().zip([&train, &valid, &test]).enumerate() {
        write_file(&cfg.artifact(&format!("{name}_pairs.jsonl")), pairs_to_jsonl(part).as_bytes())?;
        let seed = derive_seed(cfg.seed, &format!("prompts-{name}"));
        let records = prompted_records(part, &vocab, &cfg.model, cfg.data.prompts_per_api, seed);
        examples[i] = records.len();
        write_file(&cfg.artifact(&format!("{name}.jsonl")), records_to_jsonl(&records)?.as_bytes())?;
    }

    let stats = corpus_stats(pairs, &vocab);
    write_json(&cfg.artifact("stats.json"), &stats)?;
    let summary = PrepareSummary {
        pairs: pairs.len(),
        rejected,
        duplicates,
        split: [train.len(), valid.len(), test.len()],
        examples,
        vocab_size: vocab.len(),
        stats,
        config: cfg.clone(),
    };
    write_json(&cfg.artifact("prepare_report.json"), &summary)?;
    Ok(summary)
}

// ------------------------------------------------------------------ train

/// The prepared training inputs of a run directory.
pub struct Prepared {
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

pub fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let vocab = Vocab::load(&cfg.vocab_path())?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    let train = to_examples(&read_dataset(&cfg.artifact("train.jsonl"))?, &vocab, &model);
    let valid = to_examples(&read_dataset(&cfg.artifact("valid.jsonl"))?, &vocab, &model);
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    if valid.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    Ok(Prepared {
        vocab,
        model,
        train,
        valid,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub parameters: usize,
    pub config: RunConfig,
}

fn train_typed<F: Float>(
    data: &Prepared,
    train_cfg: &TrainConfig,
    checkpoint: &Path,
    log: &Path,
) -> Result<(TrainReport, usize)> {
    let params = Params::<F>::init(&data.model)?;
    let n = params.num_scalars();
    let opts = FitOptions {
        checkpoint: Some(checkpoint.to_path_buf()),
        log: Some(log.to_path_buf()),
    };
    let (_, report) = fit(params, &data.train, &data.valid, train_cfg, &opts)?;
    Ok((report, n))
}

fn train_into(data: &Prepared, train_cfg: &TrainConfig, checkpoint: &Path, log: &Path) -> Result<(TrainReport, usize)> {
    match train_cfg.numeric {
        NumericMode::F32 => train_typed::<f32>(data, train_cfg, checkpoint, log),
        NumericMode::F64 => train_typed::<f64>(data, train_cfg, checkpoint, log),
    }
}

/// Trains on prepared data; the best-validation checkpoint is written as
/// soon as it is found, so an interrupted run keeps the last good one.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let data = load_prepared(cfg)?;
    let _lock = OutputLock::acquire(cfg.out_dir())?;
    let checkpoint = cfg.checkpoint_path();
    let (report, parameters) = train_into(&data, &cfg.train, &checkpoint, &cfg.artifact("train_log.jsonl"))?;
    let out = TrainOutput {
        report,
        checkpoint,
        parameters,
        config: cfg.clone(),
    };
    write_json(&cfg.artifact("train_report.json"), &out)?;
    Ok(out)
}

// ------------------------------------------------------------------- eval

/// A checkpoint in whichever precision it was saved.
pub enum LoadedModel {
    F32(Params<f32>),
    F64(Params<f64>),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let header = read_checkpoint_header(path)?;
        match header.dtype.as_str() {
            "f32" => Ok(Self::F32(load_checkpoint(path, None)?)),
            "f64" => Ok(Self::F64(load_checkpoint(path, None)?)),
            other => Err(Error::CheckpointFormat(format!("unknown dtype `{other}`"))),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::F32(p) => &p.config,
            Self::F64(p) => &p.config,
        }
    }

    pub fn decode_items(&self, vocab: &Vocab, items: &[EvalItem], opts: &DecodeOptions) -> Vec<std::result::Result<Vec<Candidate>, String>> {
        match self {
            Self::F32(p) => decode_items(p, vocab, items, opts),
            Self::F64(p) => decode_items(p, vocab, items, opts),
        }
    }

    pub fn complete(
        &self,
        vocab: &Vocab,
        query: &str,
        prefix: &str,
        k: usize,
        opts: &DecodeOptions,
        library: Option<&ApiLibrary>,
    ) -> Result<Vec<Candidate>> {
        match self {
            Self::F32(p) => complete(p, vocab, query, prefix, k, opts, library),
            Self::F64(p) => complete(p, vocab, query, prefix, k, opts, library),
        }
    }
}

/// Evaluation queries for test pairs. `prefix_words = None` masks a random
/// number of trailing words per pair (seeded); `Some(p)` keeps the first
/// `p` words.
pub fn eval_items(pairs: &[QueryApiPair], prefix_words: Option<usize>, seed: u64) -> Vec<EvalItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|p| {
            let prefix = match prefix_words {
                Some(n) => fixed_prefix_input(p, n).1,
                None => {
                    let words = api_words(&p.api);
                    let n_rand = rng.gen_range(1..words.len());
                    words[..words.len() - n_rand].join(".")
                }
            };
            EvalItem {
                query: p.query.clone(),
                prefix,
                relevant: p.relevant(),
            }
        })
        .collect()
}

pub fn load_test_pairs(cfg: &RunConfig) -> Result<Vec<QueryApiPair>> {
    let path = cfg.artifact("test_pairs.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let pairs = parse_pairs(&text).pairs;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("test split"));
    }
    Ok(pairs)
}

fn load_library(cfg: &RunConfig) -> Result<Option<ApiLibrary>> {
    cfg.paths.api_library.as_deref().map(ApiLibrary::load).transpose()
}

/// Plain and, when a library is configured, library-filtered reports for
/// the same decoded candidates.
fn evaluate_model(
    model: &LoadedModel,
    vocab: &Vocab,
    items: &[EvalItem],
    cfg: &RunConfig,
    library: Option<&ApiLibrary>,
    label: &str,
) -> Result<Vec<EvalReport>> {
    let decoded = model.decode_items(vocab, items, &cfg.eval.decode);
    let mut reports = vec![score_decoded(items, &decoded, None, label)?];
    if let Some(lib) = library {
        let check = LibraryCheck {
            library: lib,
            need: cfg.eval.check_need,
        };
        reports.push(score_decoded(items, &decoded, Some(&check), &format!("{label} +check"))?);
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub reports: Vec<EvalReport>,
    pub config: RunConfig,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    let model = LoadedModel::load(&cfg.checkpoint_path())?;
    let vocab = Vocab::load(&cfg.vocab_path())?;
    let library = load_library(cfg)?;
    let pairs = load_test_pairs(cfg)?;
    let _lock = OutputLock::acquire(cfg.out_dir())?;
    let items = eval_items(&pairs, cfg.eval.prefix_words, derive_seed(cfg.seed, "eval-prefix"));
    let label = format!("{}", cfg.train.adv.method);
    let reports = evaluate_model(&model, &vocab, &items, cfg, library.as_ref(), &label)?;
    let out = EvalOutput {
        reports,
        config: cfg.clone(),
    };
    write_json(&cfg.artifact("eval_report.json"), &out)?;
    write_file(&cfg.artifact("eval_table.txt"), format_table(&out.reports).as_bytes())?;
    Ok(out)
}

// --------------------------------------------------------------- complete

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionItem {
    pub api: String,
    pub score: f64,
    pub in_library: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionOutput {
    pub query: String,
    pub prefix: String,
    pub candidates: Vec<CompletionItem>,
}

pub fn cmd_complete(cfg: &RunConfig, query: &str, prefix: &str, k: usize) -> Result<CompletionOutput> {
    if k > cfg.eval.decode.beam_width {
        return Err(Error::BeamTooNarrow {
            k,
            width: cfg.eval.decode.beam_width,
        });
    }
    let model = LoadedModel::load(&cfg.checkpoint_path())?;
    let vocab = Vocab::load(&cfg.vocab_path())?;
    let library = load_library(cfg)?;
    let cands = model.complete(&vocab, query, prefix, k, &cfg.eval.decode, library.as_ref())?;
    Ok(CompletionOutput {
        query: query.to_string(),
        prefix: prefix.to_string(),
        candidates: cands
            .into_iter()
            .map(|c| CompletionItem {
                api: c.text,
                score: c.score,
                in_library: c.in_library,
            })
            .collect(),
    })
}

// ------------------------------------------------------------------ sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub method: AdvMethod,
    pub k: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub train_seed: u64,
    pub model_seed: u64,
    pub prefix_words: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_secs: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub config: RunConfig,
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>6} {:>7} {:>7} {:>7}  {}\n", "setting", "prefix", "EM@1", "MRR", "MAP", "status");
        for r in &self.rows {
            match &r.report {
                Some(rep) => out.push_str(&format!(
                    "{:<16} {:>6} {:>7.2} {:>7.3} {:>7.3}  ok\n",
                    r.setting, r.prefix_words, rep.em[0], rep.mrr, rep.map
                )),
                None => out.push_str(&format!(
                    "{:<16} {:>6} {:>7} {:>7} {:>7}  failed: {}\n",
                    r.setting,
                    r.prefix_words,
                    "-",
                    "-",
                    "-",
                    r.error.as_deref().unwrap_or("")
                )),
            }
        }
        out
    }
}

/// The (method, K) settings a sweep trains, in order.
pub fn sweep_settings(cfg: &RunConfig) -> Vec<(AdvMethod, usize)> {
    let mut out = Vec::new();
    for &m in &cfg.sweep.methods {
        let iterated = matches!(m, AdvMethod::Pgd | AdvMethod::Atcom);
        if iterated && !cfg.sweep.k_values.is_empty() {
            out.extend(cfg.sweep.k_values.iter().map(|&k| (m, k)));
        } else {
            out.push((m, cfg.train.adv.k));
        }
    }
    out
}

fn setting_label(m: AdvMethod, k: usize) -> String {
    match m {
        AdvMethod::Pgd | AdvMethod::Atcom => format!("{m}-k{k}"),
        _ => m.to_string(),
    }
}

/// Trains one model per setting and evaluates it under every prefix mode.
/// A failing setting is recorded and the sweep moves on.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.sweep.methods.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one method".into()));
    }
    let data = load_prepared(cfg)?;
    let pairs = load_test_pairs(cfg)?;
    let _lock = OutputLock::acquire(cfg.out_dir())?;
    let mut rows = Vec::new();
    for (method, k) in sweep_settings(cfg) {
        let label = setting_label(method, k);
        let mut train_cfg = cfg.train.clone();
        train_cfg.adv.method = method;
        train_cfg.adv.k = k;
        if let Some(e) = cfg.sweep.max_epochs {
            train_cfg.max_epochs = e;
        }
        let dir = cfg.artifact("sweep").join(&label);
        let base = SweepRow {
            setting: label.clone(),
            method,
            k,
            epsilon: train_cfg.adv.epsilon,
            alpha: train_cfg.adv.alpha,
            train_seed: train_cfg.seed,
            model_seed: data.model.seed,
            prefix_words: 0,
            epochs: 0,
            best_epoch: 0,
            train_secs: 0.0,
            report: None,
            error: None,
        };
        let t0 = Instant::now();
        let trained = fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).and_then(|_| {
            let ckpt = dir.join("model.ckpt");
            let (report, _) = train_into(&data, &train_cfg, &ckpt, &dir.join("train_log.jsonl"))?;
            Ok((report, LoadedModel::load(&ckpt)?))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (report, model) = match trained {
            Ok(x) => x,
            Err(e) => {
                log::error!("sweep setting {label} failed: {e}");
                rows.extend(cfg.sweep.prefix_modes.iter().map(|&p| SweepRow {
                    prefix_words: p,
                    train_secs: secs,
                    error: Some(e.to_string()),
                    ..base.clone()
                }));
                continue;
            }
        };
        for &p in &cfg.sweep.prefix_modes {
            let items = eval_items(&pairs, Some(p), derive_seed(cfg.seed, "eval-prefix"));
            let decoded = model.decode_items(&data.vocab, &items, &cfg.eval.decode);
            let scored = score_decoded(&items, &decoded, None, &format!("{label} p{p}"));
            let (rep, err) = match scored {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            rows.push(SweepRow {
                prefix_words: p,
                epochs: report.epochs.len(),
                best_epoch: report.best_epoch,
                train_secs: secs,
                report: rep,
                error: err,
                ..base.clone()
            });
        }
        log::info!("sweep setting {label} done in {secs:.1}s");
    }
    let out = SweepReport {
        rows,
        config: cfg.clone(),
    };
    write_json(&cfg.artifact("sweep_report.json"), &out)?;
    write_file(&cfg.artifact("sweep_table.txt"), out.table().as_bytes())?;
    Ok(out)
}
