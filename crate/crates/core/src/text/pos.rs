//! Rule-based part-of-speech tagging and noun-phrase chunking: a lexicon
//! with suffix fallback rules, and the regular NP pattern
//! `DET? (ADJ|NOUN)* NOUN` matched greedily left to right.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::ops::Range;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tag {
    Noun,
    Adj,
    Det,
    Verb,
    Prep,
    Num,
    Other,
}

impl Tag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tag::Noun => "NOUN",
            Tag::Adj => "ADJ",
            Tag::Det => "DET",
            Tag::Verb => "VERB",
            Tag::Prep => "PREP",
            Tag::Num => "NUM",
            Tag::Other => "OTHER",
        }
    }

    pub fn parse(s: &str) -> Result<Tag> {
        Ok(match s {
            "NOUN" => Tag::Noun,
            "ADJ" => Tag::Adj,
            "DET" => Tag::Det,
            "VERB" => Tag::Verb,
            "PREP" => Tag::Prep,
            "NUM" => Tag::Num,
            "OTHER" => Tag::Other,
            other => return Err(Error::Format(format!("unknown tag {other:?}"))),
        })
    }
}

/// Word → tag lookup with ordered suffix fallback; everything else is OTHER.
#[derive(Clone, Debug, Default)]
pub struct PosLexicon {
    words: HashMap<String, Tag>,
    suffixes: Vec<(String, Tag)>,
}

impl PosLexicon {
    pub fn new(words: Vec<(String, Tag)>, suffixes: Vec<(String, Tag)>) -> Self {
        PosLexicon {
            words: words.into_iter().collect(),
            suffixes,
        }
    }

    pub fn insert(&mut self, word: &str, tag: Tag) {
        self.words.insert(word.to_lowercase(), tag);
    }

    pub fn tag(&self, word: &str) -> Tag {
        if let Some(&t) = self.words.get(word) {
            return t;
        }
        for (suffix, t) in &self.suffixes {
            if word.ends_with(suffix.as_str()) {
                return *t;
            }
        }
        Tag::Other
    }

    /// Tag a pre-split, lowercased word list.
    pub fn tag_all(&self, words: &[String]) -> Vec<Tag> {
        words.iter().map(|w| self.tag(w)).collect()
    }

    /// Lines of `word<TAB>TAG`, then an optional `[suffixes]` section of
    /// `suffix<TAB>TAG` lines. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lex = PosLexicon::default();
        let mut in_suffixes = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line == "[suffixes]" {
                in_suffixes = true;
                continue;
            }
            let (item, tag) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("lexicon line {} missing tab: {raw:?}", lineno + 1))
            })?;
            let tag = Tag::parse(tag.trim())?;
            if in_suffixes {
                lex.suffixes.push((item.trim().to_string(), tag));
            } else {
                lex.words.insert(item.trim().to_lowercase(), tag);
            }
        }
        Ok(lex)
    }

    pub fn to_text(&self) -> String {
        let mut words: Vec<_> = self.words.iter().collect();
        words.sort();
        let mut s = String::new();
        for (w, t) in words {
            s.push_str(&format!("{w}\t{}\n", t.as_str()));
        }
        if !self.suffixes.is_empty() {
            s.push_str("[suffixes]\n");
            for (suf, t) in &self.suffixes {
                s.push_str(&format!("{suf}\t{}\n", t.as_str()));
            }
        }
        s
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Maximal non-overlapping `DET? (ADJ|NOUN)* NOUN` spans, greedy left to
/// right, as word-index ranges.
pub fn chunk_noun_phrases(tags: &[Tag]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let content_start = if tags[i] == Tag::Det { i + 1 } else { i };
        let mut j = content_start;
        let mut last_noun = None;
        while j < tags.len() && matches!(tags[j], Tag::Adj | Tag::Noun) {
            if tags[j] == Tag::Noun {
                last_noun = Some(j);
            }
            j += 1;
        }
        match last_noun {
            Some(end) => {
                out.push(i..end + 1);
                i = end + 1;
            }
            None => i += 1,
        }
    }
    out
}

/// Reduce an NP to its concept: the head noun plus the immediately
/// preceding word when that word is itself a noun (the compound).
/// Returns the concept string and the word range it covers.
pub fn refine_to_concept(words: &[String], tags: &[Tag], np: &Range<usize>) -> (String, Range<usize>) {
    debug_assert!(!np.is_empty());
    let head = np.end - 1;
    let start = if head > np.start && tags[head - 1] == Tag::Noun {
        head - 1
    } else {
        head
    };
    (words[start..=head].join(" ").to_lowercase(), start..head + 1)
}

/// Split text into lowercased words with their char ranges. Alphanumeric
/// runs are words; everything else separates.
pub fn split_words(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() || c == '\'' {
            if current.is_empty() {
                start = i;
            }
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            out.push((std::mem::take(&mut current), start, i));
        }
    }
    if !current.is_empty() {
        let end = text.chars().count();
        out.push((current, start, end));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> PosLexicon {
        PosLexicon::from_text(
            "a\tDET\nthe\tDET\nred\tADJ\nblue\tADJ\ncircle\tNOUN\nsquare\tNOUN\n\
             traffic\tNOUN\nlight\tNOUN\nabove\tPREP\nruns\tVERB\nquickly\tOTHER\n\
             [suffixes]\nness\tNOUN\nly\tOTHER\n",
        )
        .unwrap()
    }

    #[test]
    fn lexicon_then_suffix_then_other() {
        let lex = fixture();
        assert_eq!(lex.tag("red"), Tag::Adj);
        assert_eq!(lex.tag("glorpness"), Tag::Noun);
        assert_eq!(lex.tag("zzz"), Tag::Other);
    }

    #[test]
    fn tags_det_adj_noun() {
        let lex = fixture();
        let words: Vec<String> = ["a", "red", "circle"].iter().map(|s| s.to_string()).collect();
        assert_eq!(lex.tag_all(&words), vec![Tag::Det, Tag::Adj, Tag::Noun]);
        assert!(lex.tag_all(&[]).is_empty());
    }

    #[test]
    fn chunks_two_noun_phrases() {
        let lex = fixture();
        let words = split_words("a red circle above a blue square");
        let tags: Vec<Tag> = words.iter().map(|(w, _, _)| lex.tag(w)).collect();
        let nps = chunk_noun_phrases(&tags);
        assert_eq!(nps, vec![0..3, 4..7]);
    }

    #[test]
    fn no_noun_no_chunk() {
        let lex = fixture();
        let words = split_words("runs quickly");
        let tags: Vec<Tag> = words.iter().map(|(w, _, _)| lex.tag(w)).collect();
        assert!(chunk_noun_phrases(&tags).is_empty());
    }

    #[test]
    fn compound_noun_spans_both_words() {
        let lex = fixture();
        let words = split_words("the traffic light");
        let tags: Vec<Tag> = words.iter().map(|(w, _, _)| lex.tag(w)).collect();
        let nps = chunk_noun_phrases(&tags);
        assert_eq!(nps, vec![0..3]);
        let word_strings: Vec<String> = words.iter().map(|(w, _, _)| w.clone()).collect();
        let (concept, range) = refine_to_concept(&word_strings, &tags, &nps[0]);
        assert_eq!(concept, "traffic light");
        assert_eq!(range, 1..3);
    }

    #[test]
    fn adjective_is_not_a_compound() {
        let lex = fixture();
        let words = split_words("a red circle");
        let tags: Vec<Tag> = words.iter().map(|(w, _, _)| lex.tag(w)).collect();
        let word_strings: Vec<String> = words.iter().map(|(w, _, _)| w.clone()).collect();
        let nps = chunk_noun_phrases(&tags);
        let (concept, _) = refine_to_concept(&word_strings, &tags, &nps[0]);
        assert_eq!(concept, "circle");
    }

    #[test]
    fn single_noun() {
        let lex = fixture();
        let words = split_words("circle");
        let tags: Vec<Tag> = words.iter().map(|(w, _, _)| lex.tag(w)).collect();
        let word_strings: Vec<String> = words.iter().map(|(w, _, _)| w.clone()).collect();
        let nps = chunk_noun_phrases(&tags);
        let (concept, range) = refine_to_concept(&word_strings, &tags, &nps[0]);
        assert_eq!(concept, "circle");
        assert_eq!(range, 0..1);
    }

    #[test]
    fn split_words_tracks_offsets() {
        let words = split_words("A red-ish circle.");
        assert_eq!(
            words,
            vec![
                ("a".to_string(), 0, 1),
                ("red".to_string(), 2, 5),
                ("ish".to_string(), 6, 9),
                ("circle".to_string(), 10, 16),
            ]
        );
    }
}
