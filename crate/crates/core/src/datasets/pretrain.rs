//! Multi-document auto-encoding: reconstruct the n-th of several prefixed documents.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grammar::{sentence, vowel_free_sentence};
use super::knowledge::{MemoryFact, GIVEN_NAMES, RELATIONS, SURNAMES};
use super::Example;
use crate::error::{Error, Result};

pub const MAX_DOC_CHARS: usize = 150;

/// First `max` characters of `s`.
pub fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Prefixes document `i` with `"Document i: "` and asks for the raw text of document `n`.
pub fn gen_pretrain_example(docs: &[String], n: usize) -> Result<Example> {
    if n == 0 || n > docs.len() {
        return Err(Error::contract(format!("document index {n} outside 1..={}", docs.len())));
    }
    let truncated: Vec<&str> = docs.iter().map(|d| truncate_chars(d, MAX_DOC_CHARS)).collect();
    Ok(Example {
        user_id: String::new(),
        docs: truncated.iter().enumerate().map(|(i, d)| format!("Document {}: {d}", i + 1)).collect(),
        x: format!("What does document {n} contain?"),
        y: truncated[n - 1].to_owned(),
    })
}

/// Generic short documents: one or two grammar sentences, or a fact sentence.
pub fn gen_generic_corpus(n_docs: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|_| match rng.random_range(0..10) {
            0..=4 => sentence(&mut rng),
            5 => vowel_free_sentence(&mut rng),
            6..=7 => format!("{} and {}", sentence(&mut rng), sentence(&mut rng)),
            _ => {
                let name = |rng: &mut ChaCha8Rng| {
                    format!("{} {}", SURNAMES.choose(rng).unwrap(), GIVEN_NAMES.choose(rng).unwrap())
                };
                MemoryFact {
                    user_id: String::new(),
                    subject: name(&mut rng),
                    relation: rng.random_range(0..RELATIONS.len()),
                    object: name(&mut rng),
                }
                .sentence()
            }
        })
        .collect()
}

/// Consumes `corpus` once, in order, as groups of 1..=`max_docs` documents
/// with a random target index per group.
pub fn pretrain_examples(corpus: &[String], max_docs: usize, seed: u64) -> Result<Vec<Example>> {
    if max_docs == 0 {
        return Err(Error::Config("max_docs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut i = 0;
    while i < corpus.len() {
        let k = rng.random_range(1..=max_docs).min(corpus.len() - i);
        let n = rng.random_range(1..=k);
        out.push(gen_pretrain_example(&corpus[i..i + k], n)?);
        i += k;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_document_query() {
        let e = gen_pretrain_example(&["alpha".into(), "beta".into()], 2).unwrap();
        assert_eq!(e.x, "What does document 2 contain?");
        assert_eq!(e.y, "beta");
        assert_eq!(e.docs, vec!["Document 1: alpha", "Document 2: beta"]);
    }

    #[test]
    fn long_documents_are_cut_to_150_chars() {
        let e = gen_pretrain_example(&["x".repeat(200)], 1).unwrap();
        assert_eq!(e.y.chars().count(), 150);
        assert_eq!(e.docs[0], format!("Document 1: {}", e.y));
    }

    #[test]
    fn out_of_range_index_is_a_contract_violation() {
        assert!(gen_pretrain_example(&["a".into()], 0).is_err());
        assert!(gen_pretrain_example(&["a".into()], 2).is_err());
    }

    #[test]
    fn one_epoch_uses_each_document_once() {
        let corpus = gen_generic_corpus(101, 2);
        let ex = pretrain_examples(&corpus, 4, 7).unwrap();
        let used: Vec<String> =
            ex.iter().flat_map(|e| e.docs.iter().map(|d| d.split_once(": ").unwrap().1.to_owned())).collect();
        assert_eq!(used, corpus);
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate_chars("héllo", 2), "hé");
        assert_eq!(truncate_chars("ab", 5), "ab");
    }
}
