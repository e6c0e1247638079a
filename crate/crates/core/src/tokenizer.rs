//! Byte-level tokenizer with four reserved special tokens.
//!
//! Ids `0..=255` are raw bytes; `256` PAD, `257` BOS, `258` EOS, `259` SEP.
//! Token counts are additive under concatenation, which keeps prompt-length
//! accounting exact.

use crate::error::{Error, Result};

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const SEP: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(id: u32) -> bool {
    (256..VOCAB_SIZE as u32).contains(&id)
}

pub fn encode(text: &str, add_bos: bool, add_eos: bool) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    if add_bos {
        ids.push(BOS);
    }
    ids.extend(text.bytes().map(u32::from));
    if add_eos {
        ids.push(EOS);
    }
    ids
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    /// Set when the byte stream was not valid UTF-8 and replacement characters were substituted.
    pub lossy: bool,
}

pub fn decode(ids: &[u32]) -> Result<Decoded> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= VOCAB_SIZE {
            return Err(Error::contract(format!("token id {id} outside vocabulary of {VOCAB_SIZE}")));
        }
        if id < 256 {
            bytes.push(id as u8);
        }
    }
    Ok(match String::from_utf8(bytes) {
        Ok(text) => Decoded { text, lossy: false },
        Err(e) => Decoded { text: String::from_utf8_lossy(e.as_bytes()).into_owned(), lossy: true },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_with_specials() {
        assert_eq!(encode("", true, true), vec![BOS, EOS]);
    }

    #[test]
    fn ascii_bytes() {
        assert_eq!(encode("ab", false, false), vec![97, 98]);
        assert_eq!(decode(&[104, 105]).unwrap().text, "hi");
        assert_eq!(decode(&[BOS, 104, 105, EOS]).unwrap().text, "hi");
    }

    #[test]
    fn out_of_range_id() {
        assert!(matches!(decode(&[VOCAB_SIZE as u32]), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_utf8_is_flagged() {
        let d = decode(&[0xff, 104]).unwrap();
        assert!(d.lossy);
        assert!(d.text.ends_with('h'));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(s in any::<String>(), bos in any::<bool>(), eos in any::<bool>()) {
            let ids = encode(&s, bos, eos);
            prop_assert_eq!(ids.len(), s.len() + bos as usize + eos as usize);
            let d = decode(&ids).unwrap();
            prop_assert!(!d.lossy);
            prop_assert_eq!(d.text, s);
        }

        #[test]
        fn counts_are_additive(a in any::<String>(), b in any::<String>()) {
            let joined = format!("{a}{b}");
            prop_assert_eq!(encode(&joined, false, false).len(), encode(&a, false, false).len() + encode(&b, false, false).len());
        }
    }
}
