//! Byte-level byte-pair-encoding tokenizer with fixed-length padding.
//!
//! Ids `0..5` are reserved (pad, begin, end, mask, separator), the next 256
//! ids are raw bytes, and every learned merge appends one id. Because every
//! byte has a token, any text can be encoded.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub mod special {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const MASK: u32 = 3;
    pub const SEP: u32 = 4;

    pub const PAD_TEXT: &str = "<pad>";
    pub const BOS_TEXT: &str = "<s>";
    pub const EOS_TEXT: &str = "</s>";
    pub const MASK_TEXT: &str = "<mask>";
    pub const SEP_TEXT: &str = "<sep>";

    pub const RESERVED: [&str; 5] = [PAD_TEXT, BOS_TEXT, EOS_TEXT, MASK_TEXT, SEP_TEXT];
}

const BYTE_BASE: u32 = special::RESERVED.len() as u32;
const BASE_SIZE: usize = special::RESERVED.len() + 256;
const VOCAB_HEADER: &str = "# bpe-vocab v1";

/// Default target vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 8000;

/// Fixed-length id sequence: real tokens followed by pad (id 0).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<u32>,
    true_len: usize,
}

impl TokenSeq {
    /// Right-pads with 0 or truncates the tail so the result has exactly
    /// `max_len` ids.
    pub fn new(content: &[u32], max_len: usize) -> Self {
        let true_len = content.len().min(max_len);
        let mut ids = content[..true_len].to_vec();
        ids.resize(max_len, special::PAD);
        Self { ids, true_len }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn content(&self) -> &[u32] {
        &self.ids[..self.true_len]
    }

    pub fn true_len(&self) -> usize {
        self.true_len
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Trained vocabulary and merge table. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
}

enum Piece<'a> {
    Reserved(u32),
    Text(&'a str),
}

/// Split on the literal mask and separator markers.
fn split_reserved(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    loop {
        let hit = [(special::MASK_TEXT, special::MASK), (special::SEP_TEXT, special::SEP)]
            .iter()
            .filter_map(|&(lit, id)| rest.find(lit).map(|pos| (pos, lit, id)))
            .min_by_key(|&(pos, _, _)| pos);
        match hit {
            Some((pos, lit, id)) => {
                if pos > 0 {
                    out.push(Piece::Text(&rest[..pos]));
                }
                out.push(Piece::Reserved(id));
                rest = &rest[pos + lit.len()..];
            }
            None => {
                if !rest.is_empty() {
                    out.push(Piece::Text(rest));
                }
                return out;
            }
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Pre-tokenization into chunks that merges never cross. A chunk is an
/// optional single space or dot followed by a run of word characters, a run
/// of whitespace, or one other character. Concatenating chunks gives back
/// the input.
fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        let mut j = i + 1;
        if is_word_char(c) || ((c == ' ' || c == '.') && chars.get(j).is_some_and(|&(_, n)| is_word_char(n))) {
            while j < chars.len() && is_word_char(chars[j].1) {
                j += 1;
            }
        } else if c.is_whitespace() {
            while j < chars.len()
                && chars[j].1.is_whitespace()
                && !(chars[j].1 == ' ' && chars.get(j + 1).is_some_and(|&(_, n)| is_word_char(n)))
            {
                j += 1;
            }
        }
        out.push(&text[start..end_of(j)]);
        i = j;
    }
    out
}

fn pairs_of(word: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    word.windows(2).map(|w| (w[0], w[1]))
}

fn merge_word(word: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    out
}

impl Vocab {
    fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = special::RESERVED.iter().map(|s| s.as_bytes().to_vec()).collect();
        tokens.extend((0..=255u8).map(|b| vec![b]));
        Self {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    /// Smallest legal `vocab_size`.
    pub fn minimum_size() -> usize {
        BASE_SIZE
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.tokens.len() as u32;
        let mut bytes = self.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.tokens[pair.1 as usize]);
        self.tokens.push(bytes);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        id
    }

    /// Learn merges until `vocab_size` tokens exist or no pair occurs twice.
    /// Ties on frequency go to the lexicographically smallest byte pair.
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size < BASE_SIZE {
            return Err(Error::VocabTooSmall {
                requested: vocab_size,
                minimum: BASE_SIZE,
            });
        }
        let mut vocab = Self::base();

        let mut counts: HashMap<&str, i64> = HashMap::new();
        for t in texts {
            for piece in split_reserved(t.as_ref()) {
                if let Piece::Text(s) = piece {
                    for c in chunks(s) {
                        *counts.entry(c).or_default() += 1;
                    }
                }
            }
        }
        let mut uniq: Vec<(&str, i64)> = counts.into_iter().collect();
        uniq.sort_unstable();
        let mut words: Vec<Vec<u32>> = uniq
            .iter()
            .map(|(s, _)| s.bytes().map(|b| BYTE_BASE + b as u32).collect())
            .collect();
        let freq: Vec<i64> = uniq.iter().map(|&(_, n)| n).collect();

        let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, w) in words.iter().enumerate() {
            for p in pairs_of(w) {
                *pair_counts.entry(p).or_default() += freq[wi];
                where_.entry(p).or_default().insert(wi);
            }
        }

        while vocab.tokens.len() < vocab_size {
            let best = pair_counts
                .iter()
                .filter(|&(_, &n)| n >= 2)
                .max_by(|(pa, na), (pb, nb)| {
                    na.cmp(nb).then_with(|| {
                        let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                        let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                    .then_with(|| pb.cmp(pa))
                })
                .map(|(&p, _)| p);
            let Some(pair) = best else { break };
            let new_id = vocab.push_merge(pair);
            let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
            affected.sort_unstable();
            for wi in affected {
                for p in pairs_of(&words[wi]) {
                    if let Some(n) = pair_counts.get_mut(&p) {
                        *n -= freq[wi];
                    }
                    if let Some(s) = where_.get_mut(&p) {
                        s.remove(&wi);
                    }
                }
                words[wi] = merge_word(&words[wi], pair, new_id);
                for p in pairs_of(&words[wi]) {
                    *pair_counts.entry(p).or_default() += freq[wi];
                    where_.entry(p).or_default().insert(wi);
                }
            }
            pair_counts.retain(|_, n| *n > 0);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut word: Vec<u32> = chunk.bytes().map(|b| BYTE_BASE + b as u32).collect();
        while word.len() > 1 {
            let best = pairs_of(&word)
                .filter_map(|p| self.ranks.get(&p).map(|&r| (r, p)))
                .min();
            let Some((rank, pair)) = best else { break };
            word = merge_word(&word, pair, BASE_SIZE as u32 + rank);
        }
        out.extend(word);
    }

    /// Unbounded encoding, no begin/end tokens.
    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in split_reserved(text) {
            match piece {
                Piece::Reserved(id) => out.push(id),
                Piece::Text(s) => {
                    for c in chunks(s) {
                        self.encode_chunk(c, &mut out);
                    }
                }
            }
        }
        out
    }

    /// Encoder-side encoding: pad with 0 or truncate the tail to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSeq {
        TokenSeq::new(&self.encode_ids(text), max_len)
    }

    /// Decoder-side encoding: content truncated to leave room for a final
    /// end token, then padded.
    pub fn encode_target(&self, text: &str, max_len: usize) -> TokenSeq {
        let mut ids = self.encode_ids(text);
        ids.truncate(max_len.saturating_sub(1));
        if max_len > 0 {
            ids.push(special::EOS);
        }
        TokenSeq::new(&ids, max_len)
    }

    /// Pads and begin tokens are skipped, the end token stops decoding.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.tokens.get(id as usize).ok_or(Error::UnknownTokenId(id))?;
            match id {
                special::PAD | special::BOS => {}
                special::EOS => break,
                _ => bytes.extend_from_slice(tok),
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Text form: header, reserved tokens, then one merge per line in rank
    /// order as `left_id right_id`. Ids rather than strings, since two merge
    /// paths can spell the same bytes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{VOCAB_HEADER}").unwrap();
        writeln!(s, "reserved {}", special::RESERVED.join(" ")).unwrap();
        writeln!(s, "merges {}", self.merges.len()).unwrap();
        for &(a, b) in &self.merges {
            writeln!(s, "{a} {b}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: &str| Error::VocabFormat {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == VOCAB_HEADER => {}
            _ => return Err(bad(1, "missing header")),
        }
        match lines.next() {
            Some((_, l)) if l == format!("reserved {}", special::RESERVED.join(" ")) => {}
            Some((n, _)) => return Err(bad(n, "reserved tokens differ")),
            None => return Err(bad(2, "missing reserved tokens")),
        }
        let declared: usize = match lines.next() {
            Some((n, l)) => l
                .strip_prefix("merges ")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(n, "expected `merges <count>`"))?,
            None => return Err(bad(3, "missing merge count")),
        };
        let mut vocab = Self::base();
        for (n, line) in lines {
            let (a, b) = line.split_once(' ').ok_or_else(|| bad(n, "expected two token ids"))?;
            let id = |s: &str| -> Result<u32> {
                let id: u32 = s.parse().map_err(|_| bad(n, "bad token id"))?;
                if (id as usize) < special::RESERVED.len() || id as usize >= vocab.tokens.len() {
                    return Err(bad(n, "token id not yet defined"));
                }
                Ok(id)
            };
            let pair = (id(a)?, id(b)?);
            vocab.push_merge(pair);
        }
        if vocab.merges.len() != declared {
            return Err(bad(3, "merge count does not match"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
