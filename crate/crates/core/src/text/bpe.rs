//! Byte-pair-encoding tokenizer with character-offset tracking.
//!
//! Merges are word-internal: whitespace characters always stay single
//! tokens and pairs are never counted across them. The merge list is a
//! valid derivation (every merge references symbols that exist at its
//! rank), so encoding applies merges sequentially in rank order.

use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const SPECIAL_NAMES: [&str; 4] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]"];

const FORMAT_HEADER: &str = "SZBPE v1";

#[derive(Clone, Debug)]
pub struct BpeVocab {
    base: Vec<String>,
    merges: Vec<(String, String)>,
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

/// One token of an encoded string: vocabulary id plus the half-open char
/// range it covers in the source text (zero-width for specials).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub span: (usize, usize),
}

impl BpeVocab {
    /// Greedy most-frequent-pair training. Ties break lexicographically by
    /// (left, right); training stops early once no pair occurs twice.
    pub fn train(corpus: &[String], num_merges: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Param("BPE training corpus is empty".into()));
        }
        let mut base: Vec<String> = {
            let mut set: Vec<char> = corpus
                .iter()
                .flat_map(|s| s.chars())
                .collect::<std::collections::BTreeSet<char>>()
                .into_iter()
                .collect();
            set.sort_unstable();
            set.into_iter().map(String::from).collect()
        };
        base.dedup();

        // Words as symbol sequences with occurrence counts.
        let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for text in corpus {
            for word in text.split_whitespace() {
                *words
                    .entry(word.chars().map(String::from).collect())
                    .or_insert(0) += 1;
            }
        }

        let mut merges = Vec::with_capacity(num_merges);
        for _ in 0..num_merges {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (symbols, &count) in &words {
                for pair in symbols.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_insert(0) += count;
                }
            }
            let mut best: Option<((&str, &str), usize)> = None;
            for (&pair, &count) in &counts {
                match best {
                    Some((_, c)) if c >= count => {}
                    _ => best = Some((pair, count)),
                }
            }
            let (left, right) = match best {
                Some((pair, count)) if count >= 2 => (pair.0.to_string(), pair.1.to_string()),
                _ => break,
            };
            let mut rebuilt: BTreeMap<Vec<String>, usize> = BTreeMap::new();
            for (symbols, count) in &words {
                *rebuilt
                    .entry(apply_merge(symbols, &left, &right))
                    .or_insert(0) += count;
            }
            words = rebuilt;
            merges.push((left, right));
        }
        Self::from_parts(base, merges)
    }

    /// Assemble the id table: specials, then base symbols, then merge
    /// products in rank order. Validates the derivation.
    pub fn from_parts(base: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut token_to_id: HashMap<String, u32> = HashMap::new();
        let mut id_to_token: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        for sym in &base {
            if token_to_id.contains_key(sym) {
                return Err(Error::Format(format!("duplicate base symbol {sym:?}")));
            }
            token_to_id.insert(sym.clone(), id_to_token.len() as u32);
            id_to_token.push(sym.clone());
        }
        for (rank, (l, r)) in merges.iter().enumerate() {
            if !token_to_id.contains_key(l) || !token_to_id.contains_key(r) {
                return Err(Error::Format(format!(
                    "merge {rank} ({l:?}, {r:?}) references a symbol that does not exist at its rank"
                )));
            }
            let joined = format!("{l}{r}");
            if token_to_id.contains_key(&joined) {
                return Err(Error::Format(format!("duplicate merge product {joined:?}")));
            }
            token_to_id.insert(joined.clone(), id_to_token.len() as u32);
            id_to_token.push(joined);
        }
        Ok(BpeVocab {
            base,
            merges,
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Encode without specials; spans are char offsets into `text`.
    pub fn encode_content(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_whitespace() {
                let sym = chars[i].to_string();
                let id = self.token_to_id.get(&sym).copied().unwrap_or(UNK_ID);
                out.push(Token { id, span: (i, i + 1) });
                i += 1;
                continue;
            }
            let start = i;
            while i < chars.len() && !chars[i].is_whitespace() {
                i += 1;
            }
            self.encode_word(&chars[start..i], start, &mut out);
        }
        out
    }

    fn encode_word(&self, chars: &[char], offset: usize, out: &mut Vec<Token>) {
        // Symbol list with char spans; unknown chars become [UNK] islands
        // that no merge can touch.
        let mut symbols: Vec<(String, usize, usize, bool)> = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = c.to_string();
                let known = self.token_to_id.contains_key(&s);
                (s, offset + i, offset + i + 1, known)
            })
            .collect();
        for (l, r) in &self.merges {
            let mut i = 0;
            let mut rebuilt: Vec<(String, usize, usize, bool)> = Vec::with_capacity(symbols.len());
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && symbols[i].3
                    && symbols[i + 1].3
                    && symbols[i].0 == *l
                    && symbols[i + 1].0 == *r
                {
                    rebuilt.push((
                        format!("{l}{r}"),
                        symbols[i].1,
                        symbols[i + 1].2,
                        true,
                    ));
                    i += 2;
                } else {
                    rebuilt.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = rebuilt;
        }
        for (sym, start, end, known) in symbols {
            let id = if known {
                self.token_to_id[&sym]
            } else {
                UNK_ID
            };
            out.push(Token { id, span: (start, end) });
        }
    }

    /// Concatenation of token strings; [UNK] decodes to U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD_ID | BOS_ID | EOS_ID => {}
                UNK_ID => s.push('\u{FFFD}'),
                _ => {
                    if let Some(tok) = self.token(id) {
                        s.push_str(tok);
                    }
                }
            }
        }
        s
    }

    // ---- text file format ----

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER}");
        let _ = writeln!(s, "base {}", self.base.len());
        for sym in &self.base {
            let _ = writeln!(s, "{}", escape(sym));
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{} {}", escape(l), escape(r));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != FORMAT_HEADER {
            return Err(Error::Format(format!(
                "expected header {FORMAT_HEADER:?}, got {header:?}"
            )));
        }
        let base_count = parse_count(lines.next(), "base")?;
        let mut base = Vec::with_capacity(base_count);
        for _ in 0..base_count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("truncated base symbol list".into()))?;
            base.push(unescape(line)?);
        }
        let merge_count = parse_count(lines.next(), "merges")?;
        let mut merges = Vec::with_capacity(merge_count);
        for _ in 0..merge_count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("truncated merge list".into()))?;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("malformed merge line {line:?}")))?;
            merges.push((unescape(l)?, unescape(r)?));
        }
        Self::from_parts(base, merges)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

fn apply_merge(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

fn parse_count(line: Option<&str>, keyword: &str) -> Result<usize> {
    let line = line.ok_or_else(|| Error::Format(format!("missing {keyword} line")))?;
    let rest = line
        .strip_prefix(keyword)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::Format(format!("expected {keyword:?} line, got {line:?}")))?;
    rest.parse()
        .map_err(|_| Error::Format(format!("bad count in {line:?}")))
}

fn escape(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        match c {
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\\' => out.push_str("\\\\"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('s') => out.push(' '),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            other => return Err(Error::Format(format!("bad escape \\{other:?}"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aaab_learns_aa() {
        let vocab = BpeVocab::train(&["aaab".into()], 1).unwrap();
        assert_eq!(vocab.merges(), &[("a".into(), "a".into())]);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let vocab = BpeVocab::train(&["hello world".into()], 0).unwrap();
        assert!(vocab.merges().is_empty());
        let toks = vocab.encode_content("hello");
        assert_eq!(toks.len(), 5);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(BpeVocab::train(&[], 5), Err(Error::Param(_))));
    }

    #[test]
    fn merged_word_spans() {
        let base = vec!["d".into(), "g".into(), "o".into()];
        let merges = vec![("d".into(), "o".into()), ("do".into(), "g".into())];
        let vocab = BpeVocab::from_parts(base, merges).unwrap();
        let toks = vocab.encode_content("dog");
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].span, (0, 3));
        assert_eq!(vocab.token(toks[0].id), Some("dog"));
    }

    #[test]
    fn invalid_derivation_rejected() {
        let base = vec!["a".into(), "b".into()];
        // "ab" does not exist when the merge is declared.
        let merges = vec![("ab".into(), "b".into())];
        assert!(BpeVocab::from_parts(base, merges).is_err());
    }

    #[test]
    fn unknown_chars_round_trip_to_replacement() {
        let vocab = BpeVocab::train(&["abc".into()], 0).unwrap();
        let toks = vocab.encode_content("axc");
        assert_eq!(toks[1].id, UNK_ID);
        let ids: Vec<u32> = toks.iter().map(|t| t.id).collect();
        assert_eq!(vocab.decode(&ids), "a\u{FFFD}c");
    }

    #[test]
    fn file_format_round_trip() {
        let corpus = vec!["the cat sat on the mat".into(), "a traffic light".into()];
        let vocab = BpeVocab::train(&corpus, 12).unwrap();
        let text = vocab.to_text();
        let reloaded = BpeVocab::from_text(&text).unwrap();
        assert_eq!(reloaded.to_text(), text);
        let sample = "the traffic cat";
        let a: Vec<u32> = vocab.encode_content(sample).iter().map(|t| t.id).collect();
        let b: Vec<u32> = reloaded.encode_content(sample).iter().map(|t| t.id).collect();
        assert_eq!(a, b);
        assert_eq!(vocab.decode(&a), sample);
    }
}
