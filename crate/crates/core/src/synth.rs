//! Small generated corpora for smoke runs, overfitting checks and the
//! prefix-disambiguation experiment.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::QueryApiPair;

const PACKAGES: &[(&str, &[(&str, &str)])] = &[
    (
        "java.util",
        &[
            ("arraylist", "array list"),
            ("hashmap", "hash map"),
            ("calendar", "calendar"),
            ("scanner", "scanner"),
            ("random", "random generator"),
            ("collections", "collection"),
        ],
    ),
    (
        "java.io",
        &[
            ("file", "file"),
            ("bufferedreader", "buffered reader"),
            ("filewriter", "file writer"),
            ("inputstream", "input stream"),
        ],
    ),
    (
        "java.net",
        &[("url", "url"), ("socket", "socket"), ("httpurlconnection", "http connection")],
    ),
    (
        "java.text",
        &[("simpledateformat", "date format"), ("decimalformat", "decimal format")],
    ),
    (
        "java.time",
        &[("localdate", "local date"), ("duration", "duration"), ("instant", "instant")],
    ),
    (
        "java.sql",
        &[
            ("connection", "database connection"),
            ("resultset", "result set"),
            ("statement", "sql statement"),
        ],
    ),
    (
        "java.lang",
        &[
            ("string", "string"),
            ("integer", "integer"),
            ("thread", "thread"),
            ("math", "number"),
        ],
    ),
    ("java.util.regex", &[("pattern", "regex pattern"), ("matcher", "regex matcher")]),
    ("javax.swing", &[("jframe", "window frame"), ("jbutton", "button")]),
    ("android.widget", &[("textview", "text view"), ("toast", "toast message")]),
];

const METHODS: &[(&str, &str)] = &[
    ("add", "add an item to"),
    ("remove", "remove an item from"),
    ("get", "get a value from"),
    ("set", "set a value on"),
    ("size", "get the size of"),
    ("clear", "clear"),
    ("close", "close"),
    ("read", "read data from"),
    ("write", "write data to"),
    ("parse", "parse"),
    ("format", "format"),
    ("tostring", "convert to text"),
    ("equals", "compare"),
    ("contains", "search"),
    ("open", "open"),
    ("create", "create"),
    ("sort", "sort"),
    ("split", "split"),
    ("length", "get the length of"),
    ("connect", "connect"),
    ("start", "start"),
    ("show", "show"),
];

const TEMPLATES: &[&str] = &[
    "how to {v} a {n}",
    "{v} {n} in java",
    "how do i {v} the {n}",
    "{v} {n}",
    "best way to {v} a {n}",
];

const METHODS_PER_CLASS: usize = 8;

struct Entry {
    api: String,
    verb: &'static str,
    noun: &'static str,
}

/// Every API of the generated universe, in a fixed order.
fn universe(seed: u64) -> Vec<Entry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (pkg, classes) in PACKAGES {
        for (class, noun) in *classes {
            for (m, verb) in METHODS.choose_multiple(&mut rng, METHODS_PER_CLASS) {
                out.push(Entry {
                    api: format!("{pkg}.{class}.{m}"),
                    verb,
                    noun,
                });
            }
        }
    }
    out
}

fn render(template: &str, verb: &str, noun: &str) -> String {
    template.replace("{v}", verb).replace("{n}", noun)
}

/// `n` distinct query/API pairs. APIs are drawn without replacement before
/// any API repeats with a different query wording.
pub fn desk_corpus(n: usize, seed: u64) -> Vec<QueryApiPair> {
    let entries = universe(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut rng);
    let cap = entries.len() * TEMPLATES.len();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n.min(cap));
    let mut round = 0;
    while out.len() < n.min(cap) {
        for &i in &order {
            if out.len() >= n {
                break;
            }
            let e = &entries[i];
            let t = (rng.gen_range(0..TEMPLATES.len()) + round) % TEMPLATES.len();
            let mut q = render(TEMPLATES[t], e.verb, e.noun);
            let mut step = 0;
            while seen.contains(&(q.clone(), e.api.clone())) && step < TEMPLATES.len() {
                step += 1;
                q = render(TEMPLATES[(t + step) % TEMPLATES.len()], e.verb, e.noun);
            }
            if seen.insert((q.clone(), e.api.clone())) {
                out.push(QueryApiPair::new(&q, &e.api, vec![]).expect("generated pairs are valid"));
            }
        }
        round += 1;
    }
    out
}

/// The 32-pair corpus used for memorization checks.
pub fn overfit_corpus(seed: u64) -> Vec<QueryApiPair> {
    desk_corpus(32, seed)
}

/// All valid API names of the generated universe.
pub fn desk_library(seed: u64) -> Vec<String> {
    universe(seed).into_iter().map(|e| e.api).collect()
}

/// Platform roots whose first words differ, so that a one-word prefix picks
/// the platform.
const ROOT_PAIRS: &[(&str, &str)] = &[
    ("java.awt", "android.graphics"),
    ("javax.swing", "android.widget"),
    ("java.io", "android.os"),
    ("java.net", "android.net"),
];

/// Each query is paired with exactly two APIs that differ only in their
/// platform root. Without a prompt the two are indistinguishable.
pub fn ambiguous_corpus(queries: usize, seed: u64) -> Vec<QueryApiPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(usize, usize)> = Vec::new();
    let classes: Vec<(&str, &str)> = PACKAGES.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    for c in 0..classes.len() {
        for m in 0..METHODS.len() {
            combos.push((c, m));
        }
    }
    combos.shuffle(&mut rng);
    let mut out = Vec::with_capacity(2 * queries);
    let mut used = BTreeSet::new();
    for (c, m) in combos {
        if out.len() >= 2 * queries {
            break;
        }
        let (class, noun) = classes[c];
        let (method, verb) = METHODS[m];
        let q = render("how to {v} a {n}", verb, noun);
        if !used.insert(q.clone()) {
            continue;
        }
        let (a, b) = ROOT_PAIRS[rng.gen_range(0..ROOT_PAIRS.len())];
        for root in [a, b] {
            out.push(QueryApiPair::new(&q, &format!("{root}.{class}.{method}"), vec![]).expect("valid"));
        }
    }
    out
}
