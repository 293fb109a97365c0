//! Character-level toy tokenizer.
//!
//! Id 0 is the pad symbol and id 1 the mask symbol; the remaining ids map
//! one-to-one onto the characters of the alphabet in order.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub type Token = u32;

pub const PAD: Token = 0;
pub const MASK: Token = 1;
const RESERVED: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    alphabet: Vec<char>,
}

impl Vocab {
    /// Characters must be unique.
    pub fn new(alphabet: &str) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(domain(format!("duplicate character {c:?} in alphabet")));
            }
        }
        if chars.is_empty() {
            return Err(domain("empty alphabet"));
        }
        Ok(Self { alphabet: chars })
    }

    /// Printable ASCII plus newline.
    pub fn ascii() -> Self {
        let mut s: String = (32u8..127).map(char::from).collect();
        s.push('\n');
        Self::new(&s).expect("ascii alphabet is unique")
    }

    pub fn size(&self) -> usize {
        self.alphabet.len() + RESERVED
    }

    pub fn alphabet(&self) -> String {
        self.alphabet.iter().collect()
    }

    pub fn id(&self, c: char) -> Option<Token> {
        self.alphabet
            .iter()
            .position(|&a| a == c)
            .map(|i| (i + RESERVED) as Token)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<Token>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| domain(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Pads decode to nothing and masks to `_`.
    pub fn decode(&self, ids: &[Token]) -> String {
        ids.iter()
            .filter_map(|&t| match t {
                PAD => None,
                MASK => Some('_'),
                t => self.alphabet.get(t as usize - RESERVED).copied(),
            })
            .collect()
    }

    /// Ids the sampler may emit: everything except the mask symbol.
    pub fn is_emittable(t: Token) -> bool {
        t != MASK
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_reserved_ids() {
        let v = Vocab::new("01234").unwrap();
        assert_eq!(v.size(), 7);
        let ids = v.encode("4210").unwrap();
        assert_eq!(ids, vec![6, 4, 3, 2]);
        assert_eq!(v.decode(&ids), "4210");
        assert_eq!(v.decode(&[MASK, PAD, 2]), "_0");
    }

    #[test]
    fn unknown_and_duplicate_characters_rejected() {
        assert!(Vocab::new("aa").is_err());
        assert!(Vocab::new("01").unwrap().encode("2").is_err());
    }

    #[test]
    fn ascii_covers_prompt_text() {
        let v = Vocab::ascii();
        let text = "<answer>\n92 -72 + 47\n</answer>";
        assert_eq!(v.decode(&v.encode(text).unwrap()), text);
    }
}
