//! The concept bank: an ordered list of canonical lowercase concept
//! strings that caption noun phrases are filtered against.

use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Clone, Debug, Default)]
pub struct ConceptBank {
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

impl ConceptBank {
    pub fn new(entries: Vec<String>) -> Result<Self> {
        let mut bank = ConceptBank::default();
        for e in entries {
            bank.push(&e)?;
        }
        Ok(bank)
    }

    fn push(&mut self, entry: &str) -> Result<()> {
        let canonical = entry.trim().to_lowercase();
        if canonical.is_empty() {
            return Err(Error::Format("empty concept bank entry".into()));
        }
        if self.index.contains_key(&canonical) {
            return Err(Error::Format(format!("duplicate concept {canonical:?}")));
        }
        self.index.insert(canonical.clone(), self.entries.len());
        self.entries.push(canonical);
        Ok(())
    }

    /// Case-insensitive exact match on the canonical form.
    pub fn lookup(&self, concept: &str) -> Option<usize> {
        self.index.get(&concept.to_lowercase()).copied()
    }

    /// Lookup with optional plural folding: if the literal form misses and
    /// it ends in "s", the singular is tried.
    pub fn lookup_folding(&self, concept: &str, fold_plural: bool) -> Option<usize> {
        self.lookup(concept).or_else(|| {
            if fold_plural {
                concept.strip_suffix('s').and_then(|singular| self.lookup(singular))
            } else {
                None
            }
        })
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One concept per line; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut bank = ConceptBank::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            bank.push(line)?;
        }
        Ok(bank)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(e);
            s.push('\n');
        }
        s
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_orders_ids() {
        let bank = ConceptBank::from_text("# classes\ncircle\nsquare # the blue one\n\ntraffic light\n").unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.lookup("circle"), Some(0));
        assert_eq!(bank.lookup("Square"), Some(1));
        assert_eq!(bank.lookup("traffic light"), Some(2));
        assert_eq!(bank.lookup("dog"), None);
    }

    #[test]
    fn rejects_duplicates() {
        assert!(ConceptBank::from_text("dog\nDog\n").is_err());
    }

    #[test]
    fn plural_folding_is_opt_in() {
        let bank = ConceptBank::from_text("circle\n").unwrap();
        assert_eq!(bank.lookup_folding("circles", false), None);
        assert_eq!(bank.lookup_folding("circles", true), Some(0));
    }
}
