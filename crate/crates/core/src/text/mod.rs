//! Caption processing: BPE tokenization with span tracking, rule-based POS
//! tagging and NP chunking, and concept extraction against a bank.

pub mod bank;
pub mod bpe;
pub mod pos;

pub use bank::ConceptBank;
pub use bpe::{BpeVocab, Token, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
pub use pos::{chunk_noun_phrases, refine_to_concept, split_words, PosLexicon, Tag};

use crate::error::{Error, Result};

/// A concept found in a caption: its bank id, the char range of the
/// concept words, and the indices of every token whose span intersects
/// that range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptMention {
    pub concept_id: usize,
    pub concept: String,
    pub char_range: (usize, usize),
    pub token_indices: Vec<usize>,
}

/// A tokenized caption: `[BOS] content… [EOS]` with per-token char spans
/// and any extracted concept mentions.
#[derive(Clone, Debug, Default)]
pub struct TokenizedCaption {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
    pub concepts: Vec<ConceptMention>,
}

impl TokenizedCaption {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Position of the [EOS] token (always the last).
    pub fn eos_index(&self) -> usize {
        self.token_ids.len() - 1
    }

    /// Truncate to `context` tokens keeping [EOS] last. Returns whether
    /// truncation happened; concept mentions pointing past the cut are
    /// dropped and partially-covered ones are clipped.
    pub fn truncate_to_context(&mut self, context: usize) -> bool {
        if self.token_ids.len() <= context {
            return false;
        }
        debug_assert!(context >= 2);
        self.token_ids.truncate(context - 1);
        self.spans.truncate(context - 1);
        self.token_ids.push(EOS_ID);
        let text_len = self.text.chars().count();
        self.spans.push((text_len, text_len));
        let keep = context - 1;
        self.concepts.retain_mut(|c| {
            c.token_indices.retain(|&i| i < keep);
            !c.token_indices.is_empty()
        });
        true
    }
}

/// Encode a caption: BPE over the content, [BOS]/[EOS] added, char spans
/// recorded per token. `decode(encode(text)) == text` for text over the
/// vocabulary's base alphabet.
pub fn tokenize(vocab: &BpeVocab, text: &str) -> TokenizedCaption {
    let content = vocab.encode_content(text);
    let text_len = text.chars().count();
    let mut token_ids = Vec::with_capacity(content.len() + 2);
    let mut spans = Vec::with_capacity(content.len() + 2);
    token_ids.push(BOS_ID);
    spans.push((0, 0));
    for t in &content {
        token_ids.push(t.id);
        spans.push(t.span);
    }
    token_ids.push(EOS_ID);
    spans.push((text_len, text_len));
    TokenizedCaption {
        text: text.to_string(),
        token_ids,
        spans,
        concepts: Vec::new(),
    }
}

/// Extraction settings; plural folding is off by default.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExtractOptions {
    pub fold_plural: bool,
}

/// Full pipeline: tokenize, tag, chunk, refine, filter against the bank,
/// and map each kept concept to the token indices its chars intersect.
/// Duplicate concepts stay separate mentions; captions may yield none.
pub fn extract_concepts(
    vocab: &BpeVocab,
    lexicon: &PosLexicon,
    bank: &ConceptBank,
    caption: &str,
    options: ExtractOptions,
) -> TokenizedCaption {
    let mut tc = tokenize(vocab, caption);
    let words = split_words(caption);
    let word_strings: Vec<String> = words.iter().map(|(w, _, _)| w.clone()).collect();
    let tags = lexicon.tag_all(&word_strings);
    for np in chunk_noun_phrases(&tags) {
        let (concept, word_range) = refine_to_concept(&word_strings, &tags, &np);
        let Some(concept_id) = bank.lookup_folding(&concept, options.fold_plural) else {
            continue;
        };
        let char_start = words[word_range.start].1;
        let char_end = words[word_range.end - 1].2;
        let token_indices: Vec<usize> = (0..tc.token_ids.len())
            .filter(|&i| {
                !is_special(tc.token_ids[i])
                    && spans_intersect(tc.spans[i], (char_start, char_end))
            })
            .collect();
        debug_assert!(!token_indices.is_empty());
        tc.concepts.push(ConceptMention {
            concept_id,
            concept,
            char_range: (char_start, char_end),
            token_indices,
        });
    }
    tc
}

fn is_special(id: u32) -> bool {
    matches!(id, PAD_ID | UNK_ID | BOS_ID | EOS_ID)
}

fn spans_intersect(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && a.1 > b.0
}

/// Validate the structural invariants of a tokenized caption; used by
/// tests and the dataset consistency checks.
pub fn validate_caption(tc: &TokenizedCaption) -> Result<()> {
    let n = tc.token_ids.len();
    if n < 2 || tc.token_ids[0] != BOS_ID || tc.token_ids[n - 1] != EOS_ID {
        return Err(Error::Contract("caption must be [BOS] … [EOS]".into()));
    }
    for w in tc.spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(Error::Contract(format!(
                "token spans overlap or are unordered: {:?} then {:?}",
                w[0], w[1]
            )));
        }
    }
    for c in &tc.concepts {
        for &i in &c.token_indices {
            if i >= n || is_special(tc.token_ids[i]) {
                return Err(Error::Contract(format!(
                    "concept {:?} references special or out-of-range token {i}",
                    c.concept
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_vocab() -> BpeVocab {
        BpeVocab::train(
            &[
                "a photo of a red circle and a blue square".to_string(),
                "the traffic light above a circle".to_string(),
                "hello world".to_string(),
            ],
            30,
        )
        .unwrap()
    }

    fn fixture_lexicon() -> PosLexicon {
        PosLexicon::from_text(
            "a\tDET\nthe\tDET\nof\tPREP\nabove\tPREP\nand\tOTHER\nphoto\tNOUN\n\
             red\tADJ\nblue\tADJ\ncircle\tNOUN\nsquare\tNOUN\ntraffic\tNOUN\nlight\tNOUN\n\
             hello\tOTHER\nworld\tNOUN\n",
        )
        .unwrap()
    }

    #[test]
    fn empty_text_is_bos_eos() {
        let tc = tokenize(&fixture_vocab(), "");
        assert_eq!(tc.token_ids, vec![BOS_ID, EOS_ID]);
        assert_eq!(tc.len(), 2);
        assert_eq!(tc.eos_index(), 1);
    }

    #[test]
    fn round_trip_identity() {
        let vocab = fixture_vocab();
        for text in ["a red circle", "the traffic light above a circle", ""] {
            let tc = tokenize(&vocab, text);
            assert_eq!(vocab.decode(&tc.token_ids), text);
            validate_caption(&tc).unwrap();
        }
    }

    #[test]
    fn extracts_bank_concept_with_spans() {
        let vocab = fixture_vocab();
        let bank = ConceptBank::from_text("circle\nsquare\n").unwrap();
        let tc = extract_concepts(
            &vocab,
            &fixture_lexicon(),
            &bank,
            "a photo of a red circle",
            ExtractOptions::default(),
        );
        assert_eq!(tc.concepts.len(), 1);
        let c = &tc.concepts[0];
        assert_eq!(c.concept, "circle");
        assert_eq!(c.concept_id, 0);
        // Covered chars must contain the concept string.
        let chars: Vec<char> = tc.text.chars().collect();
        let covered: String = c
            .token_indices
            .iter()
            .flat_map(|&i| chars[tc.spans[i].0..tc.spans[i].1].iter())
            .collect();
        assert!(covered.contains("circle"), "{covered:?}");
        validate_caption(&tc).unwrap();
    }

    #[test]
    fn no_bank_match_yields_no_concepts() {
        let vocab = fixture_vocab();
        let bank = ConceptBank::from_text("circle\n").unwrap();
        let tc = extract_concepts(
            &vocab,
            &fixture_lexicon(),
            &bank,
            "hello world",
            ExtractOptions::default(),
        );
        assert!(tc.concepts.is_empty());
    }

    #[test]
    fn duplicate_concepts_kept_with_disjoint_spans() {
        let vocab = fixture_vocab();
        let bank = ConceptBank::from_text("circle\n").unwrap();
        let tc = extract_concepts(
            &vocab,
            &fixture_lexicon(),
            &bank,
            "a circle and a circle",
            ExtractOptions::default(),
        );
        assert_eq!(tc.concepts.len(), 2);
        assert_eq!(tc.concepts[0].concept_id, tc.concepts[1].concept_id);
        let a: std::collections::HashSet<_> = tc.concepts[0].token_indices.iter().collect();
        assert!(tc.concepts[1].token_indices.iter().all(|i| !a.contains(i)));
    }

    #[test]
    fn truncation_keeps_eos_last() {
        let vocab = fixture_vocab();
        let mut tc = tokenize(&vocab, "a photo of a red circle and a blue square");
        let orig_len = tc.len();
        assert!(orig_len > 8);
        let truncated = tc.truncate_to_context(8);
        assert!(truncated);
        assert_eq!(tc.len(), 8);
        assert_eq!(*tc.token_ids.last().unwrap(), EOS_ID);
        assert!(!tc.truncate_to_context(8));
    }
}
