//! BPE merge rules, vocabulary, tokenisation and its inverse.
//!
//! Token pieces are byte strings. Merge application is priority-driven: the
//! applicable rule with the lowest priority number fires first, leftmost
//! occurrence on ties, until no rule applies. The scenario vocabularies are
//! built by simulating that discipline while inserting each word's merge
//! chain, so every listed word reduces to a single token and the two
//! Strawberry regimes reproduce their stated segmentations exactly.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// One priority-ordered merge: adjacent pieces `left` + `right` fuse into
/// their concatenation. Lower priority numbers apply earlier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeRule {
    pub left: Vec<u8>,
    pub right: Vec<u8>,
    pub priority: u32,
}

/// Special token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

/// Bijective token-string <-> token-id map with special tokens and optional
/// byte fallback (all 256 single bytes present).
///
/// The frequency table and subword-regularisation parameters are carried
/// because they are part of the tape contents, but tokenisation never
/// consults them.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    by_bytes: HashMap<Vec<u8>, u32>,
    by_id: BTreeMap<u32, Vec<u8>>,
    pub specials: Specials,
    pub byte_fallback: bool,
    pub frequency: BTreeMap<u32, u64>,
    pub subword_regularisation: Option<serde_json::Value>,
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("unknown token id {id} at position {position}")]
    UnknownId { id: u32, position: usize },
    #[error("duplicate token id {id}")]
    DuplicateId { id: u32 },
    #[error("duplicate token string {0:?}")]
    DuplicateString(String),
    #[error("duplicate merge priority {priority}")]
    DuplicatePriority { priority: u32 },
    #[error("missing special token {0}")]
    MissingSpecial(&'static str),
    #[error("vocabulary file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file schema: {0}")]
    Schema(String),
}

impl Vocabulary {
    pub fn id_of(&self, piece: &[u8]) -> Option<u32> {
        self.by_bytes.get(piece).copied()
    }

    pub fn bytes_of(&self, id: u32) -> Option<&[u8]> {
        self.by_id.get(&id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Highest id + 1; the logit row length models must produce.
    pub fn id_bound(&self) -> u32 {
        self.by_id.keys().next_back().map_or(0, |k| k + 1)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.specials.bos || id == self.specials.eos || id == self.specials.unk
    }

    fn insert(&mut self, id: u32, bytes: Vec<u8>) -> Result<(), VocabError> {
        if self.by_id.contains_key(&id) {
            return Err(VocabError::DuplicateId { id });
        }
        if self.by_bytes.contains_key(&bytes) {
            return Err(VocabError::DuplicateString(render_piece(&bytes)));
        }
        self.by_bytes.insert(bytes.clone(), id);
        self.by_id.insert(id, bytes);
        Ok(())
    }
}

/// Result of tokenisation: the id sequence plus a side report of `<unk>`
/// substitutions (piece, piece index) when byte fallback is off.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokeniseOutput {
    pub ids: Vec<u32>,
    pub unk_substitutions: Vec<(Vec<u8>, usize)>,
}

/// Apply merge rules to raw bytes, returning the final piece segmentation.
pub fn apply_merges(bytes: &[u8], rules: &[MergeRule]) -> Vec<Vec<u8>> {
    let mut pieces: Vec<Vec<u8>> = bytes.iter().map(|&b| vec![b]).collect();
    if pieces.len() < 2 || rules.is_empty() {
        return pieces;
    }
    let table: HashMap<(&[u8], &[u8]), u32> = rules
        .iter()
        .map(|r| ((r.left.as_slice(), r.right.as_slice()), r.priority))
        .collect();
    loop {
        let mut best: Option<(u32, usize)> = None;
        for i in 0..pieces.len() - 1 {
            let key = (pieces[i].as_slice(), pieces[i + 1].as_slice());
            if let Some(&prio) = table.get(&key) {
                if best.map_or(true, |(b, _)| prio < b) {
                    best = Some((prio, i));
                }
            }
        }
        match best {
            Some((_, i)) => {
                let right = pieces.remove(i + 1);
                pieces[i].extend_from_slice(&right);
            }
            None => return pieces,
        }
    }
}

/// Segment `text` into token ids by iterated merge-rule application.
pub fn tokenise(text: &str, vocab: &Vocabulary, rules: &[MergeRule]) -> TokeniseOutput {
    let pieces = apply_merges(text.as_bytes(), rules);
    let mut ids = Vec::with_capacity(pieces.len());
    let mut unk = Vec::new();
    for (i, piece) in pieces.into_iter().enumerate() {
        match vocab.id_of(&piece) {
            Some(id) => ids.push(id),
            None if vocab.byte_fallback => {
                // Fall back to the single-byte entries.
                for b in &piece {
                    ids.push(vocab.id_of(&[*b]).expect("byte fallback entry"));
                }
            }
            None => {
                ids.push(vocab.specials.unk);
                unk.push((piece, i));
            }
        }
    }
    TokeniseOutput {
        ids,
        unk_substitutions: unk,
    }
}

/// Inverse tokenisation: concatenated token bytes. Specials render empty.
pub fn detokenise_bytes(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<u8>, VocabError> {
    let mut out = Vec::new();
    for (position, &id) in ids.iter().enumerate() {
        if vocab.is_special(id) {
            continue;
        }
        match vocab.bytes_of(id) {
            Some(bytes) => out.extend_from_slice(bytes),
            None => return Err(VocabError::UnknownId { id, position }),
        }
    }
    Ok(out)
}

pub fn detokenise(ids: &[u32], vocab: &Vocabulary) -> Result<String, VocabError> {
    Ok(String::from_utf8_lossy(&detokenise_bytes(ids, vocab)?).into_owned())
}

/// The two Strawberry tokenisation regimes plus a pure byte-level control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Whole-word: `Strawberry` is a single token.
    A,
    /// Subword: `Strawberry` segments as `Str` + `aw` + `berry`.
    B,
    /// No merges at all; every byte is its own token.
    ByteLevel,
}

impl Regime {
    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "A" | "a" => Some(Regime::A),
            "B" | "b" => Some(Regime::B),
            "byte" | "bytelevel" | "ByteLevel" => Some(Regime::ByteLevel),
            _ => None,
        }
    }
}

/// Words every scenario vocabulary carries as whole tokens: the
/// centre-embedding lexicon plus the framing words of both demo prompts.
pub const SCENARIO_WORDS: &[&str] = &[
    "the", "The", "that", "cat", "dog", "mouse", "rat", "bird", "fox", "horse", "sheep", "goat",
    "wolf", "bear", "lion", "fled", "chased", "feared", "saw", "heard", "bit", "kicked", "nudged",
    "poked", "licked", "hugged", "watched", "Complete", "sentence",
];

struct VocabBuilder {
    vocab: Vocabulary,
    rules: Vec<MergeRule>,
    next_id: u32,
}

impl VocabBuilder {
    fn new() -> Self {
        let mut vocab = Vocabulary {
            by_bytes: HashMap::new(),
            by_id: BTreeMap::new(),
            specials: Specials {
                bos: 0,
                eos: 1,
                unk: 2,
            },
            byte_fallback: true,
            frequency: BTreeMap::new(),
            subword_regularisation: None,
        };
        vocab.insert(0, BOS.as_bytes().to_vec()).unwrap();
        vocab.insert(1, EOS.as_bytes().to_vec()).unwrap();
        vocab.insert(2, UNK.as_bytes().to_vec()).unwrap();
        for b in 0u16..=255 {
            vocab.insert(3 + b as u32, vec![b as u8]).unwrap();
        }
        VocabBuilder {
            vocab,
            rules: Vec::new(),
            next_id: 259,
        }
    }

    fn intern(&mut self, bytes: Vec<u8>) {
        if self.vocab.id_of(&bytes).is_none() {
            self.vocab.insert(self.next_id, bytes).unwrap();
            self.next_id += 1;
        }
    }

    /// Add a word so it tokenises to a single token: segment it under the
    /// rules accumulated so far, then append a left-fold merge chain over
    /// those pieces. Earlier rules keep lower priorities, so previously
    /// added words are undisturbed.
    fn add_word(&mut self, word: &str) {
        let pieces = apply_merges(word.as_bytes(), &self.rules);
        let mut acc = pieces[0].clone();
        self.intern(acc.clone());
        for piece in &pieces[1..] {
            let prio = self.rules.len() as u32;
            self.rules.push(MergeRule {
                left: acc.clone(),
                right: piece.clone(),
                priority: prio,
            });
            acc.extend_from_slice(piece);
            self.intern(acc.clone());
        }
    }
}

/// Build the vocabulary and merge rules for one regime.
pub fn build_regime_vocab(regime: Regime) -> (Vocabulary, Vec<MergeRule>) {
    let mut b = VocabBuilder::new();
    if regime != Regime::ByteLevel {
        // The Strawberry pieces come first so no later word chain can steal
        // characters across their boundaries.
        b.add_word("Str");
        b.add_word("aw");
        b.add_word("berry");
        if regime == Regime::A {
            b.add_word("Strawberry");
        }
        for word in SCENARIO_WORDS {
            b.add_word(word);
        }
    }
    (b.vocab, b.rules)
}

// --- file format ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VocabFile {
    entries: Vec<EntryRecord>,
    merges: Vec<MergeRecord>,
    specials: Specials,
    byte_fallback: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    frequency: BTreeMap<u32, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subword_regularisation: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    id: u32,
    string: String,
}

#[derive(Serialize, Deserialize)]
struct MergeRecord {
    left: String,
    right: String,
    priority: u32,
}

/// Render token bytes as a string; bytes that do not form clean UTF-8 are
/// escaped as `<0xHH>` per byte.
fn render_piece(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) if !s.contains("<0x") => s.to_owned(),
        _ => bytes.iter().map(|b| format!("<0x{b:02X}>")).collect(),
    }
}

fn parse_piece(s: &str) -> Vec<u8> {
    if s.starts_with("<0x") {
        let mut out = Vec::new();
        let mut rest = s;
        while let Some(stripped) = rest.strip_prefix("<0x") {
            if let (Some(hex), Some(tail)) = (stripped.get(..2), stripped.get(2..)) {
                if let (Ok(b), Some(tail)) = (u8::from_str_radix(hex, 16), tail.strip_prefix('>')) {
                    out.push(b);
                    rest = tail;
                    continue;
                }
            }
            break;
        }
        if rest.is_empty() {
            return out;
        }
    }
    s.as_bytes().to_vec()
}

/// Serialise vocabulary + merges. Entries are ordered by id and merges by
/// priority, so save/load round-trips byte-identically.
pub fn save_vocab(
    path: &Path,
    vocab: &Vocabulary,
    rules: &[MergeRule],
) -> Result<(), VocabError> {
    let mut merges: Vec<MergeRecord> = rules
        .iter()
        .map(|r| MergeRecord {
            left: render_piece(&r.left),
            right: render_piece(&r.right),
            priority: r.priority,
        })
        .collect();
    merges.sort_by_key(|m| m.priority);
    let file = VocabFile {
        entries: vocab
            .by_id
            .iter()
            .map(|(&id, bytes)| EntryRecord {
                id,
                string: render_piece(bytes),
            })
            .collect(),
        merges,
        specials: vocab.specials,
        byte_fallback: vocab.byte_fallback,
        frequency: vocab.frequency.clone(),
        subword_regularisation: vocab.subword_regularisation.clone(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| VocabError::Schema(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<(Vocabulary, Vec<MergeRule>), VocabError> {
    let text = std::fs::read_to_string(path)?;
    let file: VocabFile =
        serde_json::from_str(&text).map_err(|e| VocabError::Schema(e.to_string()))?;
    let mut vocab = Vocabulary {
        by_bytes: HashMap::new(),
        by_id: BTreeMap::new(),
        specials: file.specials,
        byte_fallback: file.byte_fallback,
        frequency: file.frequency,
        subword_regularisation: file.subword_regularisation,
    };
    for entry in &file.entries {
        vocab.insert(entry.id, parse_piece(&entry.string))?;
    }
    for (name, id) in [("<bos>", file.specials.bos), ("<eos>", file.specials.eos), ("<unk>", file.specials.unk)] {
        if !vocab.by_id.contains_key(&id) {
            return Err(VocabError::MissingSpecial(match name {
                "<bos>" => "<bos>",
                "<eos>" => "<eos>",
                _ => "<unk>",
            }));
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut rules = Vec::with_capacity(file.merges.len());
    for m in &file.merges {
        if !seen.insert(m.priority) {
            return Err(VocabError::DuplicatePriority {
                priority: m.priority,
            });
        }
        rules.push(MergeRule {
            left: parse_piece(&m.left),
            right: parse_piece(&m.right),
            priority: m.priority,
        });
    }
    rules.sort_by_key(|r| r.priority);
    Ok((vocab, rules))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids_for(text: &str, regime: Regime) -> (Vec<u32>, Vocabulary, Vec<MergeRule>) {
        let (vocab, rules) = build_regime_vocab(regime);
        let out = tokenise(text, &vocab, &rules);
        (out.ids, vocab, rules)
    }

    #[test]
    fn regime_a_single_token() {
        let (ids, vocab, _) = ids_for("Strawberry", Regime::A);
        assert_eq!(ids.len(), 1);
        assert_eq!(vocab.bytes_of(ids[0]).unwrap(), b"Strawberry");
    }

    #[test]
    fn regime_b_three_pieces() {
        let (ids, vocab, _) = ids_for("Strawberry", Regime::B);
        let pieces: Vec<&[u8]> = ids.iter().map(|&i| vocab.bytes_of(i).unwrap()).collect();
        assert_eq!(pieces, vec![b"Str".as_slice(), b"aw", b"berry"]);
    }

    #[test]
    fn byte_level_one_per_char() {
        let (ids, _, _) = ids_for("Strawberry", Regime::ByteLevel);
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn empty_input() {
        let (ids, _, _) = ids_for("", Regime::A);
        assert!(ids.is_empty());
    }

    #[test]
    fn round_trip_identity() {
        for regime in [Regime::A, Regime::B, Regime::ByteLevel] {
            let (vocab, rules) = build_regime_vocab(regime);
            for text in [
                "How many times does the letter 'r' appear in 'Strawberry'?",
                "Complete the sentence: The cat that the dog that the mouse feared chased",
                "xyzzy  plugh!",
            ] {
                let out = tokenise(text, &vocab, &rules);
                assert_eq!(detokenise(&out.ids, &vocab).unwrap(), text);
            }
        }
    }

    #[test]
    fn same_word_same_token() {
        let (vocab, rules) = build_regime_vocab(Regime::A);
        let text = "The cat that the dog that the mouse feared chased";
        let out = tokenise(text, &vocab, &rules);
        let that = vocab.id_of(b"that").unwrap();
        let count = out.ids.iter().filter(|&&i| i == that).count();
        assert_eq!(count, 2);
    }

    #[test]
    fn specials_render_empty() {
        let (vocab, _) = build_regime_vocab(Regime::A);
        let cat = vocab.id_of(b"cat").unwrap();
        let ids = vec![vocab.specials.bos, cat, vocab.specials.eos];
        assert_eq!(detokenise(&ids, &vocab).unwrap(), "cat");
    }

    #[test]
    fn unknown_id_errors_with_position() {
        let (vocab, _) = build_regime_vocab(Regime::ByteLevel);
        let err = detokenise(&[3, 999_999], &vocab).unwrap_err();
        match err {
            VocabError::UnknownId { id, position } => {
                assert_eq!(id, 999_999);
                assert_eq!(position, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn merge_order_independent_of_storage_order() {
        let (vocab, rules) = build_regime_vocab(Regime::B);
        let mut shuffled = rules.clone();
        shuffled.reverse();
        let text = "Strawberry and the cat sentence";
        assert_eq!(
            tokenise(text, &vocab, &rules).ids,
            tokenise(text, &vocab, &shuffled).ids
        );
    }

    #[test]
    fn file_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("v1.json");
        let p2 = dir.path().join("v2.json");
        let (vocab, rules) = build_regime_vocab(Regime::A);
        save_vocab(&p1, &vocab, &rules).unwrap();
        let (v2, r2) = load_vocab(&p1).unwrap();
        save_vocab(&p2, &v2, &r2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_rejects_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(
            &p,
            r#"{"entries":[{"id":0,"string":"<bos>"},{"id":0,"string":"x"},{"id":1,"string":"<eos>"},{"id":2,"string":"<unk>"}],"merges":[],"specials":{"bos":0,"eos":1,"unk":2},"byte_fallback":false}"#,
        )
        .unwrap();
        assert!(matches!(
            load_vocab(&p),
            Err(VocabError::DuplicateId { id: 0 })
        ));
    }

    #[test]
    fn load_rejects_missing_eos() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(
            &p,
            r#"{"entries":[{"id":0,"string":"<bos>"},{"id":2,"string":"<unk>"}],"merges":[],"specials":{"bos":0,"eos":1,"unk":2},"byte_fallback":false}"#,
        )
        .unwrap();
        assert!(matches!(load_vocab(&p), Err(VocabError::MissingSpecial(_))));
    }

    #[test]
    fn load_rejects_duplicate_priority() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(
            &p,
            r#"{"entries":[{"id":0,"string":"<bos>"},{"id":1,"string":"<eos>"},{"id":2,"string":"<unk>"},{"id":3,"string":"a"},{"id":4,"string":"b"},{"id":5,"string":"ab"},{"id":6,"string":"ba"}],"merges":[{"left":"a","right":"b","priority":0},{"left":"b","right":"a","priority":0}],"specials":{"bos":0,"eos":1,"unk":2},"byte_fallback":false}"#,
        )
        .unwrap();
        assert!(matches!(
            load_vocab(&p),
            Err(VocabError::DuplicatePriority { priority: 0 })
        ));
    }

    #[test]
    fn unk_substitution_reported_without_fallback() {
        let (mut vocab, rules) = build_regime_vocab(Regime::A);
        vocab.byte_fallback = false;
        // Remove the 'z' byte entry so "z" has nowhere to go.
        let z = vocab.id_of(b"z").unwrap();
        vocab.by_bytes.remove(b"z".as_slice());
        vocab.by_id.remove(&z);
        let out = tokenise("z", &vocab, &rules);
        assert_eq!(out.ids, vec![vocab.specials.unk]);
        assert_eq!(out.unk_substitutions.len(), 1);
    }
}
