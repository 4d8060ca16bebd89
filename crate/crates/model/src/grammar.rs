//! Word-class lexicon for the centre-embedding scenarios: a small closed
//! map from words to {Noun, Verb, That, Det, Other}, plus the noun-to-verb
//! pairing the sentence generator uses for expected completions.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Outcome of analysing a (possibly incomplete) centre-embedded sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// All dependencies resolved.
    Complete,
    /// Exactly the outermost subject still lacks its main verb.
    NeedsVerb { noun: String },
    /// Structurally broken input.
    Invalid { reason: InvalidReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InvalidReason {
    /// A verb arrived with no open subject to close.
    Underflow,
    /// More than one subject left unresolved.
    Leftover,
    /// Token sequence does not fit the clause shape at all.
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordClass {
    Noun,
    Verb,
    That,
    Det,
    Other,
}

/// Nouns paired with the verb a completed clause assigns them. The first
/// three pairs reproduce the walkthrough sentence: the cat fled, the dog
/// chased, the mouse feared.
pub const NOUN_VERB_PAIRS: &[(&str, &str)] = &[
    ("cat", "fled"),
    ("dog", "chased"),
    ("mouse", "feared"),
    ("rat", "saw"),
    ("bird", "heard"),
    ("fox", "bit"),
    ("horse", "kicked"),
    ("sheep", "nudged"),
    ("goat", "poked"),
    ("wolf", "licked"),
    ("bear", "hugged"),
    ("lion", "watched"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    map: BTreeMap<String, WordClass>,
}

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("lexicon file: {0}")]
    Io(#[from] std::io::Error),
    #[error("lexicon schema: {0}")]
    Schema(String),
}

impl Lexicon {
    /// The lexicon shipped with the scenarios.
    pub fn scenario() -> Lexicon {
        let mut map = BTreeMap::new();
        for (noun, verb) in NOUN_VERB_PAIRS {
            map.insert((*noun).to_owned(), WordClass::Noun);
            map.insert((*verb).to_owned(), WordClass::Verb);
        }
        map.insert("that".to_owned(), WordClass::That);
        map.insert("the".to_owned(), WordClass::Det);
        map.insert("The".to_owned(), WordClass::Det);
        map.insert("Complete".to_owned(), WordClass::Other);
        map.insert("sentence".to_owned(), WordClass::Other);
        Lexicon { map }
    }

    /// Words absent from the lexicon classify as Other.
    pub fn class_of(&self, word: &str) -> WordClass {
        self.map.get(word).copied().unwrap_or(WordClass::Other)
    }

    /// The verb the scenario pairing assigns to a noun.
    pub fn verb_for(noun: &str) -> Option<&'static str> {
        NOUN_VERB_PAIRS
            .iter()
            .find(|(n, _)| *n == noun)
            .map(|(_, v)| *v)
    }

    pub fn nouns() -> impl Iterator<Item = &'static str> {
        NOUN_VERB_PAIRS.iter().map(|(n, _)| *n)
    }

    pub fn save(&self, path: &Path) -> Result<(), LexiconError> {
        let json = serde_json::to_string_pretty(&self.map)
            .map_err(|e| LexiconError::Schema(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Lexicon, LexiconError> {
        let text = std::fs::read_to_string(path)?;
        let map: BTreeMap<String, WordClass> =
            serde_json::from_str(&text).map_err(|e| LexiconError::Schema(e.to_string()))?;
        Ok(Lexicon { map })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walkthrough_pairing() {
        assert_eq!(Lexicon::verb_for("cat"), Some("fled"));
        assert_eq!(Lexicon::verb_for("dog"), Some("chased"));
        assert_eq!(Lexicon::verb_for("mouse"), Some("feared"));
    }

    #[test]
    fn classes() {
        let lex = Lexicon::scenario();
        assert_eq!(lex.class_of("cat"), WordClass::Noun);
        assert_eq!(lex.class_of("chased"), WordClass::Verb);
        assert_eq!(lex.class_of("that"), WordClass::That);
        assert_eq!(lex.class_of("the"), WordClass::Det);
        assert_eq!(lex.class_of("zebra"), WordClass::Other);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lexicon.json");
        let lex = Lexicon::scenario();
        lex.save(&p).unwrap();
        assert_eq!(Lexicon::load(&p).unwrap(), lex);
    }
}
