//! Word-level tokenizer over a fixed vocabulary, plus the answer schema the
//! language model is trained to emit.
//!
//! The vocabulary is a built-in word list: specials, label words, structural
//! words for prefixes and instructions, number words, and the content words
//! that transcript templates draw from. Corpus manifests record the
//! vocabulary version and digest so checkpoints and data cannot silently
//! disagree about token meaning.

use crate::labels::{Emotion, Intensity, EMOTIONS, INTENSITIES};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

pub type TokenId = usize;

pub const VOCAB_VERSION: u32 = 1;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const END: &str = "<end>";
pub const MASK: &str = "<mask>";

/// Cue word whose presence in the current transcript flips the context rule.
pub const CUE_WORD: &str = "honestly";

const SPECIALS: [&str; 4] = [PAD, UNK, END, MASK];

const SCHEMA_WORDS: [&str; 2] = ["emotion:", "intensity:"];

const STRUCTURE_WORDS: [&str; 3] = ["turn", "speaker", ":"];

const NUMBER_WORDS: [&str; 16] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12", "13", "14", "15",
];

const INSTRUCTION_WORDS: [&str; 11] = [
    "task", "identify", "the", "and", "of", "given", "utterance", "conversation", "predict",
    "current", ".",
];

pub const PRONOUNS: [&str; 6] = ["i", "you", "we", "they", "he", "she"];
pub const VERBS: [&str; 14] = [
    "feel", "felt", "think", "thought", "know", "said", "say", "tell", "told", "saw", "heard",
    "went", "came", "got",
];
pub const ADVERBS: [&str; 10] = [
    "really", "quite", "very", "so", "again", "always", "never", "sometimes", "just", "still",
];
pub const ADJECTIVES: [&str; 10] =
    ["well", "fine", "good", "bad", "ok", "right", "wrong", "sure", "maybe", "strange"];
pub const NOUNS: [&str; 12] = [
    "home", "work", "day", "night", "time", "thing", "friend", "news", "story", "plan", "idea",
    "weather",
];
const LINK_WORDS: [&str; 17] = [
    "about", "that", "this", "what", "how", "why", "when", "where", "who", "yes", "no", "not",
    "but", "because", "if", "was", "is",
];

/// Word-id maps over the built-in list. Construction is cheap; every caller
/// may hold its own copy.
pub struct Tokenizer {
    words: Vec<&'static str>,
    ids: HashMap<&'static str, TokenId>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut words: Vec<&'static str> = Vec::new();
        words.extend(SPECIALS);
        words.extend(EMOTIONS.iter().map(|e| e.as_str()));
        words.extend(INTENSITIES.iter().map(|i| i.as_str()));
        words.extend(SCHEMA_WORDS);
        words.extend(STRUCTURE_WORDS);
        words.extend(NUMBER_WORDS);
        words.extend(INSTRUCTION_WORDS);
        words.extend(PRONOUNS);
        words.extend(VERBS);
        words.extend(ADVERBS);
        words.extend(ADJECTIVES);
        words.extend(NOUNS);
        words.extend(LINK_WORDS);
        words.push(CUE_WORD);
        let ids = words.iter().enumerate().map(|(i, &w)| (w, i)).collect::<HashMap<_, _>>();
        assert_eq!(ids.len(), words.len(), "vocabulary words must be unique");
        Tokenizer { words, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// SHA-256 over the word list; manifests store it to pin token meaning.
    pub fn vocab_digest(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn id(&self, word: &str) -> TokenId {
        *self.ids.get(word).unwrap_or(&self.ids[UNK])
    }

    /// Id lookup that distinguishes unknown words from the UNK token.
    pub fn known_id(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &'static str {
        self.words.get(id).copied().unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.word(id)).collect::<Vec<_>>().join(" ")
    }

    pub fn end_id(&self) -> TokenId {
        self.ids[END]
    }

    pub fn unk_id(&self) -> TokenId {
        self.ids[UNK]
    }

    pub fn cue_id(&self) -> TokenId {
        self.ids[CUE_WORD]
    }

    pub fn emotion_id(&self, e: Emotion) -> TokenId {
        self.ids[e.as_str()]
    }

    pub fn intensity_id(&self, i: Intensity) -> TokenId {
        self.ids[i.as_str()]
    }

    pub fn number_id(&self, n: usize) -> TokenId {
        assert!(n < NUMBER_WORDS.len(), "number word out of range: {n}");
        self.ids[NUMBER_WORDS[n]]
    }
}

/// Decoded-answer outcome. Parse failure is an explicit data outcome that
/// preserves the raw ids; it is never folded into a default label.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Answer {
    Labels { emotion: Emotion, intensity: Intensity },
    Unparseable { raw: Vec<TokenId> },
}

/// Fixed answer template: `emotion: <label> intensity: <label>` plus a
/// terminator token.
pub struct AnswerSchema {
    emotion_key: TokenId,
    intensity_key: TokenId,
    terminator: TokenId,
    emotion_ids: Vec<(TokenId, Emotion)>,
    intensity_ids: Vec<(TokenId, Intensity)>,
}

impl AnswerSchema {
    pub fn new(tok: &Tokenizer) -> Self {
        AnswerSchema {
            emotion_key: tok.id("emotion:"),
            intensity_key: tok.id("intensity:"),
            terminator: tok.end_id(),
            emotion_ids: EMOTIONS.iter().map(|&e| (tok.emotion_id(e), e)).collect(),
            intensity_ids: INTENSITIES.iter().map(|&i| (tok.intensity_id(i), i)).collect(),
        }
    }

    pub fn terminator(&self) -> TokenId {
        self.terminator
    }

    /// Target ids for ground truth: the rendered template plus terminator.
    pub fn render(&self, emotion: Emotion, intensity: Intensity, tok: &Tokenizer) -> Vec<TokenId> {
        vec![
            self.emotion_key,
            tok.emotion_id(emotion),
            self.intensity_key,
            tok.intensity_id(intensity),
            self.terminator,
        ]
    }

    pub fn parse(&self, ids: &[TokenId]) -> Answer {
        let body = match ids.last() {
            Some(&t) if t == self.terminator => &ids[..ids.len() - 1],
            _ => ids,
        };
        if body.len() == 4 && body[0] == self.emotion_key && body[2] == self.intensity_key {
            let emotion = self.emotion_ids.iter().find(|(id, _)| *id == body[1]).map(|&(_, e)| e);
            let intensity =
                self.intensity_ids.iter().find(|(id, _)| *id == body[3]).map(|&(_, i)| i);
            if let (Some(emotion), Some(intensity)) = (emotion, intensity) {
                return Answer::Labels { emotion, intensity };
            }
        }
        Answer::Unparseable { raw: ids.to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_small_and_has_reserved_specials() {
        let tok = Tokenizer::new();
        assert!(
            (110..=130).contains(&tok.vocab_size()),
            "vocab size {} outside expected band",
            tok.vocab_size()
        );
        assert_eq!(tok.id(PAD), 0);
        assert_eq!(tok.id(UNK), 1);
        assert_eq!(tok.id(END), 2);
    }

    #[test]
    fn round_trip_on_vocabulary_text() {
        let tok = Tokenizer::new();
        let text = "turn 3 speaker 1 : i felt so good about work .";
        assert_eq!(tok.detokenize(&tok.tokenize(text)), text);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tok = Tokenizer::new();
        let ids = tok.tokenize("i zorp you");
        assert_eq!(ids[1], tok.unk_id());
    }

    #[test]
    fn answer_template_round_trips_for_every_label_pair() {
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        for e in EMOTIONS {
            for i in INTENSITIES {
                let ids = schema.render(e, i, &tok);
                assert_eq!(ids.len(), 5);
                assert_eq!(schema.parse(&ids), Answer::Labels { emotion: e, intensity: i });
            }
        }
    }

    #[test]
    fn fixed_answer_text_parses_back() {
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        let ids = tok.tokenize("emotion: happy intensity: strong");
        assert_eq!(
            schema.parse(&ids),
            Answer::Labels { emotion: Emotion::Happy, intensity: Intensity::Strong }
        );
    }

    #[test]
    fn label_token_sequences_are_prefix_free() {
        let tok = Tokenizer::new();
        let mut sequences: Vec<Vec<TokenId>> = Vec::new();
        for e in EMOTIONS {
            sequences.push(tok.tokenize(e.as_str()));
        }
        for i in INTENSITIES {
            sequences.push(tok.tokenize(i.as_str()));
        }
        for (a, sa) in sequences.iter().enumerate() {
            for (b, sb) in sequences.iter().enumerate() {
                if a != b {
                    assert!(
                        !sb.starts_with(sa),
                        "label sequence {a} is a prefix of {b}: {sa:?} vs {sb:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn garbage_answers_are_unparseable_and_preserved() {
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        let raw = vec![5, 9, 9, 1];
        match schema.parse(&raw) {
            Answer::Unparseable { raw: r } => assert_eq!(r, raw),
            other => panic!("expected unparseable, got {other:?}"),
        }
    }
}
