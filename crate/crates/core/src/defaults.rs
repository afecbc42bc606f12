//! Bundled default assets: synthetic-caption lexicons, concept banks, and
//! prompt template lists.

use crate::error::Result;
use crate::text::{ConceptBank, PosLexicon};

pub const LEXICON_EASY: &str = include_str!("../data/lexicon_easy.txt");
pub const LEXICON_HARD: &str = include_str!("../data/lexicon_hard.txt");
pub const BANK_EASY: &str = include_str!("../data/bank_easy.txt");
pub const BANK_HARD: &str = include_str!("../data/bank_hard.txt");
pub const TEMPLATES_DESK: &str = include_str!("../data/templates_desk.txt");
pub const TEMPLATES_FULL: &str = include_str!("../data/templates_imagenet.txt");

pub fn lexicon_easy() -> PosLexicon {
    PosLexicon::from_text(LEXICON_EASY).expect("bundled lexicon is valid")
}

pub fn lexicon_hard() -> PosLexicon {
    PosLexicon::from_text(LEXICON_HARD).expect("bundled lexicon is valid")
}

pub fn bank_easy() -> ConceptBank {
    ConceptBank::from_text(BANK_EASY).expect("bundled bank is valid")
}

pub fn bank_hard() -> ConceptBank {
    ConceptBank::from_text(BANK_HARD).expect("bundled bank is valid")
}

/// Parse a template list: one `{}` placeholder per line.
pub fn parse_templates(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !line.contains("{}") {
            return Err(crate::error::Error::Format(format!(
                "template {line:?} lacks a {{}} placeholder"
            )));
        }
        out.push(line.to_string());
    }
    Ok(out)
}

pub fn templates_desk() -> Vec<String> {
    parse_templates(TEMPLATES_DESK).expect("bundled templates are valid")
}

pub fn templates_full() -> Vec<String> {
    parse_templates(TEMPLATES_FULL).expect("bundled templates are valid")
}

#[cfg(test)]
mod tests {
    #[test]
    fn bundles_parse() {
        assert_eq!(super::bank_easy().lookup("circle"), Some(0));
        assert_eq!(super::bank_hard().lookup("red circle"), Some(0));
        assert_eq!(super::templates_desk().len(), 7);
        assert_eq!(super::templates_full().len(), 80);
        assert_eq!(
            super::lexicon_hard().tag("red"),
            crate::text::Tag::Noun
        );
    }
}
