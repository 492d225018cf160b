use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Placeholder word resolved at tokenization; never a vocabulary entry of
/// its own once substituted.
pub const SLOT_MARKER: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    /// Token position (0 is the start token).
    pub position: usize,
    /// Concept id the slot binds to: the class word that follows the marker.
    pub concept: String,
}

/// Tokenized prompt with concept placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptWithSlot {
    pub words: Vec<String>,
    /// Token ids including the leading start token.
    pub tokens: Vec<u32>,
    pub slots: Vec<Slot>,
    /// Token positions of the class words that follow each slot.
    pub class_positions: Vec<usize>,
}

impl PromptWithSlot {
    pub fn slot_for(&self, concept: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.concept == concept)
    }

    /// Template text without substitution, e.g. `"* face"`.
    pub fn render(&self) -> String {
        self.words.join(" ")
    }
}

/// Whitespace tokenizer hashing words into a fixed vocabulary. Id 0 is the
/// start token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashTokenizer {
    pub vocab_size: u32,
    pub max_tokens: usize,
}

impl HashTokenizer {
    pub fn word_id(&self, word: &str) -> u32 {
        let digest = Sha256::digest(word.as_bytes());
        let n = u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]);
        1 + n % (self.vocab_size - 1)
    }

    pub fn normalize(word: &str) -> String {
        if word == SLOT_MARKER {
            return word.to_string();
        }
        word.trim_matches(|c: char| !c.is_alphanumeric() && c != '*' && c != '-' && c != '\'')
            .to_lowercase()
    }

    pub fn tokenize(&self, template: &str) -> Result<PromptWithSlot> {
        let words: Vec<String> = template
            .split_whitespace()
            .map(Self::normalize)
            .filter(|w| !w.is_empty())
            .collect();
        if words.len() + 1 > self.max_tokens {
            return Err(Error::Config(format!(
                "prompt has {} words; at most {} fit",
                words.len(),
                self.max_tokens - 1
            )));
        }
        let mut tokens = vec![0];
        tokens.extend(words.iter().map(|w| self.word_id(w)));
        let mut slots = Vec::new();
        let mut class_positions = Vec::new();
        for (i, w) in words.iter().enumerate() {
            if w == SLOT_MARKER {
                let concept = words.get(i + 1).cloned().unwrap_or_default();
                if !concept.is_empty() {
                    class_positions.push(i + 2);
                }
                slots.push(Slot {
                    position: i + 1,
                    concept,
                });
            }
        }
        Ok(PromptWithSlot {
            words,
            tokens,
            slots,
            class_positions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> HashTokenizer {
        HashTokenizer {
            vocab_size: 1024,
            max_tokens: 32,
        }
    }

    #[test]
    fn slot_template_renders_back() {
        let p = tok().tokenize("* face").unwrap();
        assert_eq!(p.render(), "* face");
        assert_eq!(p.tokens.len(), 3);
        assert_eq!(p.slots, vec![Slot { position: 1, concept: "face".into() }]);
        assert_eq!(p.class_positions, vec![2]);
        assert!(p.slots.iter().all(|s| s.position < p.tokens.len()));
    }

    #[test]
    fn multi_slot_binds_by_following_word() {
        let p = tok().tokenize("A photo of * face with * hair.").unwrap();
        let concepts: Vec<_> = p.slots.iter().map(|s| s.concept.as_str()).collect();
        assert_eq!(concepts, ["face", "hair"]);
        assert_eq!(p.slot_for("hair").unwrap().position, 7);
    }

    #[test]
    fn ids_are_stable_and_in_range() {
        let t = tok();
        assert_eq!(t.word_id("face"), t.word_id("face"));
        assert!((1..1024).contains(&t.word_id("hair")));
        assert!(t.tokenize(&"w ".repeat(40)).is_err());
    }
}
