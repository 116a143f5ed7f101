//! Character-level vocabulary with learned pair merges (byte pair encoding over
//! characters).
//!
//! Text is first cut into chunks at every space, the space staying at the front
//! of the chunk that follows it (`"Compute 1201 plus"` → `Compute`, ` 1201`,
//! ` plus`). Merges are learned and applied inside chunks only, so an unspaced
//! number such as `2503` may fuse into multi-digit tokens while the digits of
//! `2 5 0 3` always end up in separate tokens.
//!
//! Ids are dense: the three special tokens first, then the base characters in
//! sorted order, then one id per merge in priority order.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
const HEADER: &str = "placevalue-tokenizer v1";

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot train a tokenizer on an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary {target} is smaller than the {minimum} special and base tokens")]
    VocabTooSmall { target: usize, minimum: usize },
    #[error("character {0:?} (U+{code:04X}) is not in the vocabulary", code = *.0 as u32)]
    UnknownChar(char),
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tokenizer file at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// Splits text into merge domains: a new chunk starts at every space.
pub fn chunks(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let end = rest
            .char_indices()
            .skip(1)
            .find(|&(_, c)| c == ' ')
            .map_or(rest.len(), |(i, _)| i);
        let (head, tail) = rest.split_at(end);
        rest = tail;
        Some(head)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    base: Vec<char>,
    merges: Vec<(u32, u32)>,
    vocab: Vec<String>,
    char_ids: HashMap<char, u32>,
    ranks: HashMap<(u32, u32), usize>,
}

impl Tokenizer {
    fn from_parts(base: Vec<char>, merges: Vec<(u32, u32)>) -> Result<Self, (usize, String)> {
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut char_ids = HashMap::new();
        for (i, &c) in base.iter().enumerate() {
            if char_ids.insert(c, vocab.len() as u32).is_some() {
                return Err((i, format!("duplicate base character {c:?}")));
            }
            vocab.push(c.to_string());
        }
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let n = vocab.len() as u32;
            if a < SPECIALS.len() as u32 || b < SPECIALS.len() as u32 || a >= n || b >= n {
                return Err((rank, format!("merge {rank} refers to an unknown id")));
            }
            if ranks.insert((a, b), rank).is_some() {
                return Err((rank, format!("merge {rank} is listed twice")));
            }
            let text = format!("{}{}", vocab[a as usize], vocab[b as usize]);
            vocab.push(text);
        }
        Ok(Tokenizer {
            base,
            merges,
            vocab,
            char_ids,
            ranks,
        })
    }

    /// A tokenizer with no merges.
    pub fn char_level(chars: impl IntoIterator<Item = char>) -> Self {
        let base: BTreeSet<char> = chars.into_iter().collect();
        Tokenizer::from_parts(base.into_iter().collect(), Vec::new()).expect("distinct characters")
    }

    /// Learns merges greedily by pair frequency until the vocabulary reaches
    /// `target_vocab` or no pair occurs twice. Ties go to the lexicographically
    /// smallest `(left, right)` text pair.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab: usize) -> Result<Self, TokenizerError> {
        let base: BTreeSet<char> = corpus.iter().flat_map(|s| s.as_ref().chars()).collect();
        if base.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let minimum = SPECIALS.len() + base.len();
        if target_vocab < minimum {
            return Err(TokenizerError::VocabTooSmall {
                target: target_vocab,
                minimum,
            });
        }
        let mut tok = Tokenizer::char_level(base);

        let mut word_counts: HashMap<&str, u64> = HashMap::new();
        for line in corpus {
            for chunk in chunks(line.as_ref()) {
                *word_counts.entry(chunk).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, u64)> = word_counts
            .into_iter()
            .map(|(w, n)| (w.chars().map(|c| tok.char_ids[&c]).collect::<Vec<u32>>(), n))
            .filter(|(ids, _)| ids.len() > 1)
            .collect();
        // HashMap iteration order is random; fix it so merges apply in a stable order.
        words.sort();

        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (ids, n) in &words {
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += n;
            }
        }

        while tok.vocab.len() < target_vocab {
            let best = pair_counts
                .iter()
                .filter(|&(_, &n)| n >= 2)
                .max_by(|(pa, na), (pb, nb)| {
                    na.cmp(nb).then_with(|| {
                        let ka = (&tok.vocab[pa.0 as usize], &tok.vocab[pa.1 as usize]);
                        let kb = (&tok.vocab[pb.0 as usize], &tok.vocab[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                })
                .map(|(&p, _)| p);
            let Some(pair) = best else { break };
            let new_id = tok.vocab.len() as u32;
            tok.ranks.insert(pair, tok.merges.len());
            tok.merges.push(pair);
            tok.vocab.push(format!(
                "{}{}",
                tok.vocab[pair.0 as usize], tok.vocab[pair.1 as usize]
            ));

            for (ids, n) in words.iter_mut() {
                if !ids.windows(2).any(|w| (w[0], w[1]) == pair) {
                    continue;
                }
                for w in ids.windows(2) {
                    let slot = pair_counts.get_mut(&(w[0], w[1])).expect("counted");
                    *slot -= *n;
                    if *slot == 0 {
                        pair_counts.remove(&(w[0], w[1]));
                    }
                }
                merge_pair(ids, pair, new_id);
                for w in ids.windows(2) {
                    *pair_counts.entry((w[0], w[1])).or_default() += *n;
                }
            }
        }
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn base_chars(&self) -> &[char] {
        &self.base
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_text(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// True for tokens made only of digits, with an optional leading space.
    pub fn is_digit_token(&self, id: u32) -> bool {
        if self.is_special(id) {
            return false;
        }
        self.token_text(id).is_some_and(|t| {
            let t = t.strip_prefix(' ').unwrap_or(t);
            !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit())
        })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        let mut out = Vec::with_capacity(text.len());
        for chunk in chunks(text) {
            let mut ids = chunk
                .chars()
                .map(|c| {
                    self.char_ids
                        .get(&c)
                        .copied()
                        .ok_or(TokenizerError::UnknownChar(c))
                })
                .collect::<Result<Vec<u32>, _>>()?;
            loop {
                let best = ids
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                    .min();
                let Some((rank, pair)) = best else { break };
                merge_pair(&mut ids, pair, self.merged_id(rank));
            }
            out.extend(ids);
        }
        Ok(out)
    }

    /// `BOS`, the encoded text, then `EOS`.
    pub fn encode_sequence(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text)?);
        ids.push(EOS);
        Ok(ids)
    }

    /// Concatenates token texts; special tokens decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            out.push_str(self.token_text(id).ok_or(TokenizerError::UnknownId(id))?);
        }
        Ok(out)
    }

    fn merged_id(&self, rank: usize) -> u32 {
        (SPECIALS.len() + self.base.len() + rank) as u32
    }

    /// Versioned text form: header, base characters (one per line, escaped),
    /// then merges as id pairs in priority order with the merged text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "base {}", self.base.len());
        for &c in &self.base {
            let _ = writeln!(out, "{}", escape(&c.to_string()));
        }
        let _ = writeln!(out, "merges {}", self.merges.len());
        for (rank, &(a, b)) in self.merges.iter().enumerate() {
            let merged = &self.vocab[self.merged_id(rank) as usize];
            let _ = writeln!(out, "{a} {b} {}", escape(merged));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let malformed = |line: usize, msg: &str| TokenizerError::Malformed {
            line,
            msg: msg.to_string(),
        };
        let lines: Vec<&str> = text.lines().collect();
        let line = |i: usize| {
            lines
                .get(i)
                .copied()
                .ok_or_else(|| malformed(i + 1, "truncated file"))
        };
        let count = |i: usize, prefix: &str| -> Result<usize, TokenizerError> {
            line(i)?
                .strip_prefix(prefix)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| malformed(i + 1, &format!("expected `{prefix}<count>`")))
        };
        if line(0)? != HEADER {
            return Err(malformed(1, "unsupported header"));
        }
        let n_base = count(1, "base ")?;
        let mut base = Vec::with_capacity(n_base);
        for i in 2..2 + n_base {
            let s = unescape(line(i)?).ok_or_else(|| malformed(i + 1, "bad escape"))?;
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => base.push(c),
                _ => return Err(malformed(i + 1, "base entry must be one character")),
            }
        }
        let merges_at = 2 + n_base;
        let n_merges = count(merges_at, "merges ")?;
        let mut merges = Vec::with_capacity(n_merges);
        let mut texts = Vec::with_capacity(n_merges);
        for i in merges_at + 1..merges_at + 1 + n_merges {
            let mut parts = line(i)?.splitn(3, ' ');
            let mut id = || parts.next().and_then(|p| p.parse::<u32>().ok());
            let (a, b) = match (id(), id()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(malformed(
                        i + 1,
                        "merge must be `<left id> <right id> <text>`",
                    ))
                }
            };
            let merged = parts
                .next()
                .and_then(unescape)
                .ok_or_else(|| malformed(i + 1, "missing merged text"))?;
            merges.push((a, b));
            texts.push((i + 1, merged));
        }
        let end = merges_at + 1 + n_merges;
        if lines.iter().skip(end).any(|l| !l.trim().is_empty()) {
            return Err(malformed(end + 1, "trailing content"));
        }
        let tok = Tokenizer::from_parts(base, merges)
            .map_err(|(i, msg)| malformed(merges_at + 2 + i, &msg))?;
        for (rank, (n, merged)) in texts.into_iter().enumerate() {
            if tok.vocab[tok.merged_id(rank) as usize] != merged {
                return Err(malformed(n, "merged text does not match its ids"));
            }
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text()).map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Tokenizer::from_text(&text)
    }
}

fn merge_pair(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match it.next()? {
            '\\' => '\\',
            's' => ' ',
            'n' => '\n',
            'r' => '\r',
            't' => '\t',
            _ => return None,
        });
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{render_observation, Approach, Operation};
    use proptest::prelude::*;

    fn example_lines() -> Vec<String> {
        Approach::ALL
            .iter()
            .map(|&a| {
                render_observation(1201, 1302, Operation::Add, a)
                    .unwrap()
                    .text
            })
            .collect()
    }

    fn four_digit_corpus() -> Vec<String> {
        (0..2000u32)
            .map(|i| format!("{}", 1000 + (i * 7919) % 9000))
            .collect()
    }

    #[test]
    fn chunking() {
        let c: Vec<_> = chunks("Compute 1201  plus").collect();
        assert_eq!(c, ["Compute", " 1201", " ", " plus"]);
        assert_eq!(chunks("").count(), 0);
        assert_eq!(chunks(" a").collect::<Vec<_>>(), [" a"]);
    }

    #[test]
    fn unspaced_numbers_learn_multi_digit_tokens() {
        let tok = Tokenizer::train(&four_digit_corpus(), 300).unwrap();
        assert!(!tok.merges().is_empty());
        let multi = (0..tok.vocab_size() as u32)
            .filter(|&id| tok.is_digit_token(id) && tok.token_text(id).unwrap().len() > 1)
            .count();
        assert!(multi > 0);
    }

    #[test]
    fn minimal_target_means_no_merges() {
        let corpus = four_digit_corpus();
        let tok = Tokenizer::train(&corpus, 3 + 10).unwrap();
        assert!(tok.merges().is_empty());
        assert_eq!(tok.encode("2503").unwrap().len(), 4);
        assert!(matches!(
            Tokenizer::train(&corpus, 12),
            Err(TokenizerError::VocabTooSmall {
                target: 12,
                minimum: 13
            })
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = example_lines();
        let a = Tokenizer::train(&corpus, 120).unwrap();
        let b = Tokenizer::train(&corpus, 120).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn empty_inputs() {
        let tok = Tokenizer::train(&example_lines(), 100).unwrap();
        assert_eq!(tok.encode("").unwrap(), Vec::<u32>::new());
        assert_eq!(tok.decode(&[]).unwrap(), "");
        assert!(matches!(
            Tokenizer::train::<&str>(&[], 10),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            Tokenizer::train(&["", ""], 10),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn example_lines_round_trip() {
        let corpus = example_lines();
        for target in [3 + 40, 80, 200] {
            let tok = Tokenizer::train(&corpus, target).unwrap();
            for s in &corpus {
                assert_eq!(tok.decode(&tok.encode(s).unwrap()).unwrap(), *s);
            }
        }
    }

    #[test]
    fn spaced_digits_stay_separate() {
        let tok = Tokenizer::train(&four_digit_corpus(), 300).unwrap();
        let ids = tok.encode("2503").unwrap();
        assert!(ids.len() < 4, "{ids:?}");
        let tok =
            Tokenizer::train(&["1 2 0 1 plus 1 3 0 2 = 2 5 0 3", "2503 4444 1201"], 200).unwrap();
        let spaced = tok.encode("2 5 0 3").unwrap();
        let digit_counts: Vec<usize> = spaced
            .iter()
            .map(|&i| {
                tok.token_text(i)
                    .unwrap()
                    .chars()
                    .filter(char::is_ascii_digit)
                    .count()
            })
            .filter(|&n| n > 0)
            .collect();
        assert_eq!(digit_counts, [1, 1, 1, 1]);
    }

    #[test]
    fn unknown_character() {
        let tok = Tokenizer::train(&example_lines(), 100).unwrap();
        match tok.encode("Compute 1 % 2") {
            Err(TokenizerError::UnknownChar('%')) => {}
            other => panic!("{other:?}"),
        }
        assert!(tok.decode(&[9999]).is_err());
    }

    #[test]
    fn specials_and_sequences() {
        let tok = Tokenizer::train(&example_lines(), 100).unwrap();
        let seq = tok.encode_sequence("Compute").unwrap();
        assert_eq!(seq[0], BOS);
        assert_eq!(*seq.last().unwrap(), EOS);
        assert_eq!(tok.decode(&seq).unwrap(), "Compute");
        assert!(!tok.is_digit_token(BOS));
    }

    #[test]
    fn save_load_preserves_encodings() {
        let mut corpus = example_lines();
        corpus.push("tab\there\\back".into());
        let tok = Tokenizer::train(&corpus, 150).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.txt");
        tok.save(&path).unwrap();
        let loaded = Tokenizer::load(&path).unwrap();
        assert_eq!(loaded, tok);
        for s in &corpus {
            assert_eq!(loaded.encode(s).unwrap(), tok.encode(s).unwrap());
        }
    }

    #[test]
    fn malformed_files() {
        assert!(Tokenizer::from_text("nope\n").is_err());
        let tok = Tokenizer::train(&example_lines(), 60).unwrap();
        let text = tok.to_text();
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(Tokenizer::from_text(&truncated).is_err());
        let first_merge = 3 + tok.base_chars().len();
        let bad_ids: String = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if i == first_merge {
                    format!("999 {}\n", l.split_once(' ').unwrap().1)
                } else {
                    format!("{l}\n")
                }
            })
            .collect();
        assert!(Tokenizer::from_text(&bad_ids).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn token_count_is_monotone_in_vocab(seed in 0u64..1000) {
            let corpus: Vec<String> = (0..300u64)
                .map(|i| {
                    let a = (i * 7919 + seed * 31) % 100_000;
                    let b = (i * 104_729 + seed) % 100_000;
                    render_observation(a as i64, b as i64, Operation::Add, Approach::Baseline).unwrap().text
                })
                .collect();
            let mut last = usize::MAX;
            for target in [40, 60, 90, 140, 220] {
                let tok = Tokenizer::train(&corpus, target).unwrap();
                let total: usize = corpus.iter().map(|s| tok.encode(s).unwrap().len()).sum();
                prop_assert!(total <= last);
                last = total;
                for s in corpus.iter().take(20) {
                    prop_assert_eq!(&tok.decode(&tok.encode(s).unwrap()).unwrap(), s);
                }
            }
        }
    }
}
