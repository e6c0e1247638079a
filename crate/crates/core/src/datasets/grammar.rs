//! Word banks and the tiny grammar behind every synthetic sentence.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SUBJECTS: &[&str] = &["i", "we", "you", "they"];
pub const VERBS: &[&str] = &["need", "want", "love", "miss", "found", "made", "lost", "saw"];
pub const DETERMINERS: &[&str] = &["a", "the", "my", "our"];
pub const ADJECTIVES: &[&str] = &["new", "old", "big", "red", "good", "cold"];
pub const NOUNS: &[&str] = &["song", "book", "car", "game", "cake", "dog", "plan", "hat"];
pub const TAILS: &[&str] = &["today", "now", "again", "soon", "later", "tonight"];

/// Words without any of the letters a, e, i, o, u.
pub const VOWEL_FREE: &[&str] =
    &["why", "my", "by", "shy", "try", "fly", "sky", "gym", "cry", "dry", "myth", "lynx", "spry", "rhythm", "fry", "sly"];

/// `subject verb determiner [adjective] noun [tail]`, or `see you <tail>`.
pub fn sentence(rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.1) {
        return format!("see you {}", TAILS.choose(rng).unwrap());
    }
    let mut w = vec![*SUBJECTS.choose(rng).unwrap(), *VERBS.choose(rng).unwrap(), *DETERMINERS.choose(rng).unwrap()];
    if rng.random_bool(0.5) {
        w.push(ADJECTIVES.choose(rng).unwrap());
    }
    w.push(NOUNS.choose(rng).unwrap());
    if rng.random_bool(0.3) {
        w.push(TAILS.choose(rng).unwrap());
    }
    w.join(" ")
}

/// Three or four vowel-free words in any order.
pub fn vowel_free_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..=4);
    (0..n).map(|_| *VOWEL_FREE.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn parses_grammar(words: &[&str]) -> bool {
    if let ["see", "you", t] = words {
        return TAILS.contains(t);
    }
    let mut i = 0;
    let mut take = |bank: &[&str], optional: bool| -> bool {
        match words.get(i) {
            Some(w) if bank.contains(w) => {
                i += 1;
                true
            }
            _ => optional,
        }
    };
    let ok = take(SUBJECTS, false)
        && take(VERBS, false)
        && take(DETERMINERS, false)
        && take(ADJECTIVES, true)
        && take(NOUNS, false)
        && take(TAILS, true);
    ok && i == words.len()
}

/// Whether `s` could have been produced by [`sentence`] or [`vowel_free_sentence`].
pub fn is_base_sentence(s: &str) -> bool {
    let words: Vec<&str> = s.split(' ').collect();
    if words.iter().any(|w| w.is_empty()) {
        return false;
    }
    parses_grammar(&words) || ((3..=4).contains(&words.len()) && words.iter().all(|w| VOWEL_FREE.contains(w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generated_sentences_parse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            assert!(is_base_sentence(&sentence(&mut rng)));
            assert!(is_base_sentence(&vowel_free_sentence(&mut rng)));
        }
    }

    #[test]
    fn vowel_free_bank_has_no_vowels() {
        assert!(VOWEL_FREE.iter().all(|w| !w.contains(['a', 'e', 'i', 'o', 'u'])));
    }

    #[test]
    fn reversed_grammar_sentence_does_not_parse() {
        assert!(is_base_sentence("i need a new song"));
        assert!(!is_base_sentence("song new a need i"));
        assert!(!is_base_sentence("i need  a song"));
    }
}
