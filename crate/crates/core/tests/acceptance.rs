//! Acceptance gate. Runs every criterion in order and prints one line each:
//! `PASS`, `FAIL` or `WAIVED`. Exits non-zero if anything failed.

mod support;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use apifill_core::advaug::{atcom_delta, atcom_generate, fgm_delta, fgsm_delta, pgd_generate, AdvConfig, AdvMethod};
use apifill_core::corpus::{
    api_words, make_prompted_examples, mask_api, pairs_to_jsonl, QueryApiPair, QUERY_THRESHOLDS,
};
use apifill_core::decoder::{
    api_check_filter, beam_search, rank_order, ApiLibrary, Candidate, DecodeOptions, Hypothesis, StepScorer,
};
use apifill_core::metrics::{
    average_precision, decode_items, em_at_k, map, mrr, score_decoded, EvalItem, LibraryCheck, RankedResult, MAX_K,
};
use apifill_core::model::{batch_loss, Example, Mat, ModelConfig, Params};
use apifill_core::pipeline::{cmd_prepare, cmd_sweep, RunConfig};
use apifill_core::synth::{ambiguous_corpus, desk_corpus, desk_library, overfit_corpus};
use apifill_core::tokenizer::{special, Vocab};
use apifill_core::trainer::{fit, FitOptions, NumericMode, TrainConfig};
use num::{BigInt, BigRational, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !{ $cond } {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, elapsed: Duration) -> Outcome {
    if elapsed <= limit {
        Ok(String::new())
    } else {
        Err(format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    }
}

// ----------------------------------------------------------- criterion 1

fn gradient_oracle() -> Outcome {
    let t0 = Instant::now();
    let p = support::check_parameters();
    let e = support::check_embeddings(10);
    within(Duration::from_secs(60), t0.elapsed())?;
    ensure!(p.worst < support::GRAD_TOL, "parameter error {:.3e} at {}", p.worst, p.worst_at);
    ensure!(e < support::GRAD_TOL, "embedding error {e:.3e}");
    Ok(format!(
        "{} parameters worst {:.2e}, embeddings worst {:.2e}, {:.1}s",
        p.checked,
        p.worst,
        e,
        t0.elapsed().as_secs_f64()
    ))
}

// ----------------------------------------------------------- criterion 2

fn toy_model(rng: &mut ChaCha8Rng) -> (Params<f64>, Vec<Example>) {
    let cfg = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        hidden: 8,
        heads: 2,
        ffn: 16,
        vocab_size: 10,
        max_input_len: 5,
        max_output_len: 4,
        seed: rng.gen(),
    };
    let mut p = Params::<f64>::init(&cfg).unwrap();
    p.randomize(rng, 0.5);
    let batch = (0..3)
        .map(|_| {
            let li = rng.gen_range(1..=5);
            let input: Vec<u32> = (0..li).map(|_| rng.gen_range(5..10)).collect();
            let target = vec![rng.gen_range(5..10), special::EOS];
            Example {
                input: apifill_core::tokenizer::TokenSeq::new(&input, 5),
                target: apifill_core::tokenizer::TokenSeq::new(&target, 4),
            }
        })
        .collect();
    (p, batch)
}

fn perturbation_norms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_fgm: f64 = 0.0;
    for _ in 0..1000 {
        let (r, c) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let scale = 10f64.powf(rng.gen_range(-4.0..4.0));
        let g = Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0) * scale).collect());
        let eps = rng.gen_range(0.01..5.0);
        let alpha = rng.gen_range(0.0..=1.0);
        ensure!(fgsm_delta(&g, eps).linf_norm() == eps, "fgsm L-inf norm differs from eps");
        let fgm = fgm_delta(&g, eps);
        let rel = (fgm.l2_norm() - eps).abs() / eps;
        worst_fgm = worst_fgm.max(rel);
        ensure!(rel <= 1e-6, "fgm L2 norm off by {rel:.2e}");
        ensure!(atcom_delta(&g, eps, alpha).l2_norm() <= eps * (1.0 + 1e-12), "atcom exceeds eps");
        let a0 = atcom_delta(&g, eps, 0.0);
        ensure!(((a0.l2_norm() - eps) / eps).abs() <= 1e-6, "atcom(alpha=0) not on the sphere");
        for (x, y) in a0.data().iter().zip(fgm.data()) {
            ensure!((x - y).abs() <= 1e-9, "atcom(alpha=0) differs from fgm");
        }
    }

    // Iterated methods on a model: ATCom(α=0, K=1) ≡ PGD(1) ≡ FGM, and PGD
    // exports lie on the L2 sphere.
    let mut worst_pgd: f64 = 0.0;
    for _ in 0..200 {
        let (p, batch) = toy_model(&mut rng);
        let eps = rng.gen_range(0.05..2.0);
        let cfg = AdvConfig {
            method: AdvMethod::Atcom,
            epsilon: eps,
            k: 1,
            alpha: 0.0,
            ..AdvConfig::default()
        };
        let a = atcom_generate(&p, &batch, &cfg, None).unwrap();
        let g = pgd_generate(&p, &batch, eps, 1, None).unwrap();
        for ((da, dg), g0) in a.steps[0].deltas.iter().zip(&g.steps[0].deltas).zip(&a.clean_embedding_grads) {
            let f = fgm_delta(g0, eps);
            for ((x, y), z) in da.data().iter().zip(dg.data()).zip(f.data()) {
                ensure!((x - y).abs() <= 1e-9 && (y - z).abs() <= 1e-9, "reduction identity broken");
            }
        }
        for (x, y) in a.g_avg.tensors().iter().zip(g.g_avg.tensors()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                ensure!((u - v).abs() <= 1e-9, "g_avg differs between atcom(K=1) and pgd(1)");
            }
        }
        let steps = rng.gen_range(1..=4);
        let pg = pgd_generate(&p, &batch, eps, steps, None).unwrap();
        for ds in pg.exported_deltas() {
            for d in ds {
                worst_pgd = worst_pgd.max((d.l2_norm() - eps).abs() / eps);
            }
        }
    }
    ensure!(worst_pgd <= 1e-6, "pgd export off the sphere by {worst_pgd:.2e}");
    Ok(format!(
        "1000 gradients; fgm rel err {worst_fgm:.1e}; pgd rel err {worst_pgd:.1e}; identities within 1e-9"
    ))
}

// ----------------------------------------------------------- criterion 3

struct RandomTree {
    vocab: usize,
    end: u32,
    table: std::collections::HashMap<Vec<u32>, Vec<f64>>,
}

impl RandomTree {
    fn new(vocab: usize, end: u32, max_len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut table = std::collections::HashMap::new();
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = vec![];
            for p in frontier {
                let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let z = raw.iter().map(|r: &f64| r.exp()).sum::<f64>().ln();
                table.insert(p.clone(), raw.iter().map(|r| r - z).collect());
                for t in (0..vocab as u32).filter(|&t| t != end) {
                    let mut q = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            frontier = next;
        }
        Self { vocab, end, table }
    }

    fn enumerate(&self, max_len: usize) -> Vec<Hypothesis> {
        let mut out = vec![];
        let mut stack: Vec<(Vec<u32>, Vec<f64>)> = vec![(vec![], vec![])];
        while let Some((ids, lps)) = stack.pop() {
            for t in 0..self.vocab as u32 {
                let mut i2 = ids.clone();
                i2.push(t);
                let mut l2 = lps.clone();
                l2.push(self.table[&ids][t as usize]);
                if t == self.end || i2.len() == max_len {
                    let score = l2.iter().sum::<f64>() / l2.len() as f64;
                    out.push(Hypothesis {
                        ids: i2,
                        log_probs: l2,
                        score,
                        finished: true,
                    });
                } else {
                    stack.push((i2, l2));
                }
            }
        }
        out.sort_by(rank_order);
        out
    }
}

impl StepScorer for RandomTree {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn end_id(&self) -> u32 {
        self.end
    }
    fn log_probs(&self, prefix: &[u32]) -> apifill_core::Result<Vec<f64>> {
        Ok(self.table[prefix].clone())
    }
}

fn beam_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    for vocab in 1..=5usize {
        for max_len in 1..=4usize {
            for end in 0..vocab as u32 {
                for _ in 0..10 {
                    let tree = RandomTree::new(vocab, end, max_len, &mut rng);
                    let all = tree.enumerate(max_len);
                    for width in [125, 256, 1000] {
                        let beam = beam_search(&tree, width, max_len).unwrap();
                        let expect = &all[..width.min(all.len())];
                        ensure!(beam.len() == expect.len(), "size {} vs {}", beam.len(), expect.len());
                        let got: HashSet<&Vec<u32>> = beam.iter().map(|h| &h.ids).collect();
                        let want: HashSet<&Vec<u32>> = expect.iter().map(|h| &h.ids).collect();
                        ensure!(got == want, "candidate sets differ (vocab {vocab}, len {max_len})");
                        for (b, e) in beam.iter().zip(expect) {
                            ensure!((b.score - e.score).abs() <= 1e-9, "score mismatch");
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    within(Duration::from_secs(60), t0.elapsed())?;
    Ok(format!("{cases} instances equal exhaustive top-k, {:.2}s", t0.elapsed().as_secs_f64()))
}

// ----------------------------------------------------------- criterion 4

fn q(n: usize, d: usize) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pool: Vec<String> = (0..15).map(|i| format!("pkg.api{i}")).collect();
    for _ in 0..200 {
        let nq = rng.gen_range(1..=12);
        let lists: Vec<(Vec<String>, Vec<String>)> = (0..nq)
            .map(|_| {
                let n = rng.gen_range(0..=10);
                let m = rng.gen_range(1..=4);
                (
                    pool.choose_multiple(&mut rng, n).cloned().collect(),
                    pool.choose_multiple(&mut rng, m).cloned().collect(),
                )
            })
            .collect();
        let results: Vec<RankedResult> = lists
            .iter()
            .enumerate()
            .map(|(i, (c, r))| RankedResult::new(i, c, r).unwrap())
            .collect();
        let mut rr = BigRational::zero();
        let mut ap = BigRational::zero();
        for (c, r) in &lists {
            if let Some(p) = (1..=c.len()).find(|&p| r.contains(&c[p - 1])) {
                rr += q(1, p);
            }
            let mut s = BigRational::zero();
            for p in 1..=c.len() {
                if r.contains(&c[p - 1]) {
                    s += q(c[..p].iter().filter(|x| r.contains(x)).count(), p);
                }
            }
            ap += s / BigInt::from(r.len());
        }
        ensure!(mrr(&results).unwrap() == (rr / BigInt::from(nq)).to_f64().unwrap(), "MRR mismatch");
        ensure!(map(&results).unwrap() == (ap / BigInt::from(nq)).to_f64().unwrap(), "MAP mismatch");
        for k in 1..=MAX_K {
            let hits = lists.iter().filter(|(c, r)| c.iter().take(k).any(|x| r.contains(x))).count();
            ensure!(em_at_k(&results, k).unwrap() == q(100 * hits, nq).to_f64().unwrap(), "EM@{k} mismatch");
        }
        let single: Vec<RankedResult> = results
            .iter()
            .map(|r| RankedResult::new(r.query_id, &r.candidates, &r.relevant[..1]).unwrap())
            .collect();
        ensure!(map(&single).unwrap().to_bits() == mrr(&single).unwrap().to_bits(), "MAP != MRR under singletons");
    }
    let ranks = [
        RankedResult::new(0, &["a"], &["a"]).unwrap(),
        RankedResult::new(1, &["x", "a"], &["a"]).unwrap(),
        RankedResult::new(2, &["x", "y", "z", "a"], &["a"]).unwrap(),
    ];
    ensure!(mrr(&ranks).unwrap() == 7.0 / 12.0, "MRR hand case");
    ensure!(
        average_precision(&["a", "x", "b", "y", "z"], &["a", "b"]).unwrap() == 5.0 / 6.0,
        "AveP hand case"
    );
    Ok("200 random lists exact; MRR 7/12 and AveP 5/6 hand cases; MAP == MRR bitwise".into())
}

// ---------------------------------------------------------- criteria 5, 7

struct Trained {
    params: Params<f32>,
    vocab: Vocab,
    records: Vec<(QueryApiPair, String)>,
    train_loss: f64,
    epochs: usize,
    secs: f64,
}

/// Prompted examples for `pairs`, a vocabulary trained on them and a
/// desk-scale model config.
fn build_dataset(pairs: &[QueryApiPair], seed: u64) -> (Vocab, ModelConfig, Vec<Example>, Vec<(QueryApiPair, String)>) {
    let texts: Vec<&str> = pairs.iter().flat_map(|p| [p.query.as_str(), p.api.as_str()]).collect();
    let vocab = Vocab::train(&texts, 8000).unwrap();
    let model = ModelConfig {
        vocab_size: vocab.len(),
        seed,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::new();
    let mut records = Vec::new();
    for p in pairs {
        for ex in make_prompted_examples(p, &mut rng, 3) {
            examples.push(Example {
                input: vocab.encode(&ex.input_text, model.max_input_len),
                target: vocab.encode_target(&ex.target_text, model.max_output_len),
            });
            records.push((p.clone(), ex.prefix()));
        }
    }
    (vocab, model, examples, records)
}

fn train_to_target(pairs: &[QueryApiPair], seed: u64, method: AdvMethod) -> Trained {
    let (vocab, model, examples, records) = build_dataset(pairs, seed);
    let cfg = TrainConfig {
        max_epochs: 500,
        patience: 500,
        target_loss: Some(0.02),
        numeric: NumericMode::F32,
        seed,
        adv: AdvConfig {
            method,
            ..AdvConfig::default()
        },
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (params, report) = fit(Params::<f32>::init(&model).unwrap(), &examples, &examples, &cfg, &FitOptions::default()).unwrap();
    let train_loss = batch_loss(&params, &examples, None).unwrap() as f64;
    Trained {
        params,
        vocab,
        records,
        train_loss,
        epochs: report.epochs.len(),
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn items_for(records: &[(QueryApiPair, String)], prefix: impl Fn(&QueryApiPair, &str) -> String) -> Vec<EvalItem> {
    records
        .iter()
        .map(|(p, pre)| EvalItem {
            query: p.query.clone(),
            prefix: prefix(p, pre),
            relevant: p.relevant(),
        })
        .collect()
}

fn overfit(t: &Trained) -> Outcome {
    let items = items_for(&t.records, |_, pre| pre.to_string());
    let decoded = decode_items(&t.params, &t.vocab, &items, &DecodeOptions::default());
    let report = score_decoded(&items, &decoded, None, "overfit").unwrap();
    let detail = format!(
        "atcom training: loss {:.4}, EM@1 {:.1}% over {} prompted examples, {} epochs, {:.0}s",
        t.train_loss,
        report.em[0],
        items.len(),
        t.epochs,
        t.secs
    );
    ensure!(t.train_loss < 0.05, "{detail}: loss not below 0.05");
    ensure!(report.em[0] >= 95.0, "{detail}: EM@1 below 95%");
    within(Duration::from_secs(300), Duration::from_secs_f64(t.secs)).map_err(|e| format!("{detail}: {e}"))?;
    Ok(detail)
}

fn em_table(items: &[EvalItem], decoded: &[Result<Vec<Candidate>, String>], check: Option<&LibraryCheck>) -> Vec<f64> {
    score_decoded(items, decoded, check, "").unwrap().em
}

fn apicheck_monotone(t: &Trained, library_seed: u64) -> Outcome {
    let mut names = desk_library(library_seed);
    names.extend(t.records.iter().map(|(p, _)| p.api.clone()));
    let lib = ApiLibrary::from_names(&names);
    let check = LibraryCheck {
        library: &lib,
        need: MAX_K,
    };
    let mut evaluations = 0;
    for (label, items) in [
        ("prompted", items_for(&t.records, |_, pre| pre.to_string())),
        ("no prefix", items_for(&t.records, |_, _| String::new())),
        ("one word", items_for(&t.records, |p, _| api_words(&p.api)[0].to_string())),
    ] {
        let decoded = decode_items(&t.params, &t.vocab, &items, &DecodeOptions::default());
        let plain = em_table(&items, &decoded, None);
        let filtered = em_table(&items, &decoded, Some(&check));
        for k in 0..MAX_K {
            ensure!(filtered[k] >= plain[k], "{label}: EM@{} {} < {}", k + 1, filtered[k], plain[k]);
        }
        evaluations += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.gen_range(1..=15);
        let texts: Vec<String> = (0..n).map(|i| format!("x.api{i}")).collect();
        let cands: Vec<Candidate> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Candidate {
                ids: vec![],
                text: t.clone(),
                log_probs: vec![-(i as f64)],
                score: -(i as f64),
                finished: true,
                in_library: None,
            })
            .collect();
        let truth = format!("x.api{}", rng.gen_range(0..n + 3));
        let mut members: Vec<String> = texts.iter().filter(|_| rng.gen_bool(0.4)).cloned().collect();
        members.push(truth.clone());
        let lib = ApiLibrary::from_names(&members);
        let need = rng.gen_range(MAX_K..=10);
        let filtered = api_check_filter(&cands, &lib, need);
        let rank = |c: &[Candidate]| c.iter().position(|x| x.text == truth);
        for k in 1..=MAX_K {
            let before = rank(&cands).is_some_and(|r| r < k);
            let after = rank(&filtered).is_some_and(|r| r < k);
            ensure!(after || !before, "fixture: filtering lost a hit at k={k}");
        }
        evaluations += 1;
    }
    Ok(format!("{evaluations} evaluations, filtered EM@k >= unfiltered for k = 1..5"))
}

// ----------------------------------------------------------- criterion 6

fn prompt_benefit() -> Outcome {
    let pairs = ambiguous_corpus(16, 6);
    let t = train_to_target(&pairs, 6, AdvMethod::None);
    let eval = |items: Vec<EvalItem>| {
        let decoded = decode_items(&t.params, &t.vocab, &items, &DecodeOptions::default());
        score_decoded(&items, &decoded, None, "").unwrap().em[0]
    };
    let plain: Vec<(QueryApiPair, String)> = pairs.iter().map(|p| (p.clone(), String::new())).collect();
    let with_prompt = eval(items_for(&plain, |p, _| api_words(&p.api)[0].to_string()));
    let trained_prompts = eval(items_for(&t.records, |_, pre| pre.to_string()));
    let no_prompt = eval(items_for(&plain, |_, _| String::new()));
    let detail = format!(
        "one-word prompt EM@1 {with_prompt:.1}%, training prompts {trained_prompts:.1}%, no prompt {no_prompt:.1}%"
    );
    ensure!(with_prompt >= 90.0 && trained_prompts >= 90.0, "{detail}: prompted EM@1 below 90%");
    ensure!(no_prompt <= 60.0, "{detail}: unprompted EM@1 above 60%");
    Ok(detail)
}

// ----------------------------------------------------------- criterion 8

fn masking_and_tokenizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz0123456789_$".chars().collect();
    for _ in 0..10_000 {
        let n = rng.gen_range(2..=8);
        let words: Vec<String> = (0..n)
            .map(|_| (0..rng.gen_range(1..=10)).map(|_| *alphabet.choose(&mut rng).unwrap()).collect())
            .collect();
        let api = words.join(".");
        let k = rng.gen_range(1..n);
        let m = mask_api(&api, k).map_err(|e| format!("{api}: {e}"))?;
        ensure!(m.prefix_words.len() == n - k && m.masked_words.len() == k, "{api}: mask bound");
        let rebuilt = [m.prefix_words.clone(), m.masked_words.clone()].concat().join(".");
        ensure!(rebuilt == api, "{api}: reconstruction gave {rebuilt}");
        ensure!(
            m.prompt == format!("{}.{}", m.prefix_words.join("."), special::MASK_TEXT),
            "{api}: prompt {}",
            m.prompt
        );
        ensure!(mask_api(&api, 0).is_err() && mask_api(&api, n).is_err(), "{api}: out-of-range mask accepted");
    }

    let mut corpus = desk_corpus(300, 8);
    corpus.extend(ambiguous_corpus(16, 8));
    corpus.extend(overfit_corpus(8));
    let half: Vec<&str> = corpus[..150].iter().flat_map(|p| [p.query.as_str(), p.api.as_str()]).collect();
    let vocab = Vocab::train(&half, 1000).unwrap();
    let mut strings: Vec<String> = corpus.iter().flat_map(|p| [p.query.clone(), p.api.clone()]).collect();
    strings.push("naïve café → 日本 \u{1F600} tabs\tand\nnewlines".into());
    let mut lossless = 0;
    for s in &strings {
        let ids = vocab.encode_ids(s);
        ensure!(vocab.decode(&ids).unwrap() == *s, "roundtrip failed for {s:?}");
        lossless += 1;
    }
    ensure!(lossless == strings.len(), "not every string roundtrips");
    Ok(format!("10000 masked APIs; {lossless}/{} strings roundtrip", strings.len()))
}

// ----------------------------------------------------------- criterion 9

fn ablation_harness() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.paths.corpus = dir.path().join("corpus.jsonl");
    cfg.paths.out_dir = dir.path().join("run");
    std::fs::write(&cfg.paths.corpus, pairs_to_jsonl(&desk_corpus(300, 9))).unwrap();
    cfg.sweep.max_epochs = Some(6);
    cfg.sweep.prefix_modes = vec![0, 1, 2];
    cfg.sweep.methods = AdvMethod::ALL.to_vec();
    cfg.resolve_seeds();
    let prep = cmd_prepare(&cfg).map_err(|e| e.to_string())?;
    let sweep = cmd_sweep(&cfg).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();

    ensure!(sweep.rows.len() == 15, "expected 15 rows, got {}", sweep.rows.len());
    for r in &sweep.rows {
        let rep = r.report.as_ref().ok_or_else(|| format!("{}: {:?}", r.setting, r.error))?;
        ensure!(rep.em.windows(2).all(|w| w[0] <= w[1]), "{}: EM@k not monotone", r.setting);
    }
    let settings: HashSet<&str> = sweep.rows.iter().map(|r| r.setting.as_str()).collect();
    let prefixes: HashSet<usize> = sweep.rows.iter().map(|r| r.prefix_words).collect();
    ensure!(settings.len() == 5 && prefixes.len() == 3, "incomplete protocol");
    within(Duration::from_secs(1800), elapsed)?;

    println!("    desk corpus: {} pairs, split {:?}, vocab {}", prep.pairs, prep.split, prep.vocab_size);
    for line in sweep.table().lines() {
        println!("    {line}");
    }
    let mut by_method: Vec<(String, f64)> = sweep
        .rows
        .iter()
        .filter(|r| r.prefix_words == 1)
        .map(|r| (r.setting.clone(), r.report.as_ref().unwrap().em[0]))
        .collect();
    by_method.sort_by(|a, b| b.1.total_cmp(&a.1));
    let order: Vec<String> = by_method.iter().map(|(s, v)| format!("{s} {v:.1}")).collect();
    Ok(format!(
        "5 methods x 3 prefix modes in {:.0}s; EM@1 at 1-word prefix: {} (not gated)",
        elapsed.as_secs_f64(),
        order.join(" > ")
    ))
}

// ------------------------------------------------------------------ main

fn run(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    match &result {
        Ok(d) => println!("criterion {id:>2} {name:<28} PASS  {d} [{secs:.1}s]"),
        Err(d) => println!("criterion {id:>2} {name:<28} FAIL  {d} [{secs:.1}s]"),
    }
    result.is_ok()
}

fn main() {
    // Keep the default panic hook quiet; failures are reported per criterion.
    std::panic::set_hook(Box::new(|_| {}));
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |id: u32| filter.as_deref().is_none_or(|f| f.split(',').any(|x| x == id.to_string()));

    let mut ok = true;
    if wanted(1) {
        ok &= run(1, "gradient oracle", gradient_oracle);
    }
    if wanted(2) {
        ok &= run(2, "perturbation norms", perturbation_norms);
    }
    if wanted(3) {
        ok &= run(3, "beam-search oracle", beam_oracle);
    }
    if wanted(4) {
        ok &= run(4, "metrics oracle", metrics_oracle);
    }
    if wanted(5) || wanted(7) {
        let pairs = overfit_corpus(5);
        let trained = catch_unwind(AssertUnwindSafe(|| train_to_target(&pairs, 5, AdvMethod::Atcom)));
        match trained {
            Ok(t) => {
                if wanted(5) {
                    ok &= run(5, "overfit sanity", || overfit(&t));
                }
                if wanted(7) {
                    ok &= run(7, "library-check monotonicity", || apicheck_monotone(&t, 5));
                }
            }
            Err(_) => {
                println!("criterion  5 overfit sanity               FAIL  training panicked");
                ok = false;
            }
        }
    }
    if wanted(6) {
        ok &= run(6, "prompt benefit", prompt_benefit);
    }
    if wanted(8) {
        ok &= run(8, "masking and tokenizer", masking_and_tokenizer);
    }
    if wanted(9) {
        ok &= run(9, "ablation harness", ablation_harness);
    }
    if wanted(10) {
        println!(
            "criterion 10 {:<28} WAIVED  the reference query/API corpus is not available offline; \
             `prepare` emits the same statistics (thresholds {:?}) for any corpus supplied",
            "corpus statistics", QUERY_THRESHOLDS
        );
    }
    if !ok {
        std::process::exit(1);
    }
}
