//! Naive byte-pair-encoding trainer: recounts every pair from scratch on
//! each iteration and applies merges by rebuilding the symbol lists.

use std::collections::BTreeMap;

/// Greedy most-frequent-pair merges, word-internal only, ties broken
/// lexicographically by (left, right). Returns the merge list in rank order.
pub fn naive_bpe_merges(corpus: &[&str], num_merges: usize) -> Vec<(String, String)> {
    let mut words: Vec<Vec<String>> = Vec::new();
    for text in corpus {
        for word in text.split_whitespace() {
            words.push(word.chars().map(|c| c.to_string()).collect());
        }
    }
    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for w in &words {
            for pair in w.windows(2) {
                *counts.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += 1;
            }
        }
        // BTreeMap iteration is lexicographic, so the first maximal entry is
        // the lexicographically-smallest tie winner.
        let best = counts
            .iter()
            .fold(None::<(&(String, String), usize)>, |acc, (k, &v)| match acc {
                Some((_, best_v)) if best_v >= v => acc,
                _ => Some((k, v)),
            });
        let (pair, count) = match best {
            Some((p, c)) if c >= 2 => (p.clone(), c),
            _ => break,
        };
        let _ = count;
        for w in words.iter_mut() {
            let mut rebuilt: Vec<String> = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == pair.0 && w[i + 1] == pair.1 {
                    rebuilt.push(format!("{}{}", pair.0, pair.1));
                    i += 2;
                } else {
                    rebuilt.push(w[i].clone());
                    i += 1;
                }
            }
            *w = rebuilt;
        }
        merges.push(pair);
    }
    merges
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aaab_single_merge() {
        let merges = naive_bpe_merges(&["aaab"], 1);
        assert_eq!(merges, vec![("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn stops_when_no_repeated_pair() {
        let merges = naive_bpe_merges(&["ab cd"], 10);
        assert!(merges.is_empty());
    }
}
