//! Centre-embedded sentence generator and shape checker.
//!
//! The generator expands the schema
//! `S -> Det N (that S') V` with verbs emitted in last-in-first-out order,
//! omitting the outermost verb for depth >= 1 (that verb is the expected
//! completion). The checker verifies the shape by counting, without any
//! stack, so it is structurally independent of the stack recogniser it is
//! used to judge.

use tapeline_model::grammar::{InvalidReason, Lexicon, Verdict, WordClass, NOUN_VERB_PAIRS};
use tapeline_model::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedSentence {
    pub words: Vec<String>,
    /// Depth counted as number of embedded clauses.
    pub depth: usize,
    /// The missing outermost verb, None when the sentence is complete.
    pub completion: Option<String>,
}

fn build(pairs: &[(&str, &str)], depth: usize) -> GeneratedSentence {
    assert!(pairs.len() > depth, "lexicon too small for depth");
    let mut words: Vec<String> = Vec::new();
    words.push("The".to_owned());
    words.push(pairs[0].0.to_owned());
    for pair in &pairs[1..=depth] {
        words.push("that".to_owned());
        words.push("the".to_owned());
        words.push(pair.0.to_owned());
    }
    // Verbs close innermost-first; the outermost is withheld unless depth 0.
    for pair in pairs[1..=depth].iter().rev() {
        words.push(pair.1.to_owned());
    }
    let completion = if depth == 0 {
        words.push(pairs[0].1.to_owned());
        None
    } else {
        Some(pairs[0].1.to_owned())
    };
    GeneratedSentence {
        words,
        depth,
        completion,
    }
}

/// The fixed walkthrough sentence for a given depth: nouns in lexicon
/// order, so depth 2 yields
/// "The cat that the dog that the mouse feared chased" completing as "fled".
pub fn walkthrough_sentence(depth: usize) -> GeneratedSentence {
    build(NOUN_VERB_PAIRS, depth)
}

/// A randomised sentence of the given depth: a seeded shuffle picks which
/// noun/verb pairs participate and in what order.
pub fn generate_sentence(depth: usize, rng: &mut SplitMix64) -> GeneratedSentence {
    let mut pairs: Vec<(&str, &str)> = NOUN_VERB_PAIRS.to_vec();
    // Fisher-Yates.
    for i in (1..pairs.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        pairs.swap(i, j);
    }
    build(&pairs, depth)
}

/// Count-based shape check: Det N (that Det N)^d V^k, where k = d means the
/// outermost subject still needs its verb and k = d + 1 means complete.
pub fn check_sentence(words: &[String], lexicon: &Lexicon) -> Verdict {
    let classes: Vec<WordClass> = words.iter().map(|w| lexicon.class_of(w)).collect();
    let mut i = 0;
    let mut depth = 0usize;
    let mut outermost: Option<&str> = None;
    loop {
        if i + 1 >= classes.len()
            || classes[i] != WordClass::Det
            || classes[i + 1] != WordClass::Noun
        {
            return Verdict::Invalid {
                reason: InvalidReason::Malformed,
            };
        }
        if outermost.is_none() {
            outermost = Some(&words[i + 1]);
        }
        i += 2;
        if i < classes.len() && classes[i] == WordClass::That {
            depth += 1;
            i += 1;
            continue;
        }
        break;
    }
    let verbs = classes[i..].iter().filter(|c| **c == WordClass::Verb).count();
    if verbs != classes.len() - i {
        return Verdict::Invalid {
            reason: InvalidReason::Malformed,
        };
    }
    if verbs == depth {
        Verdict::NeedsVerb {
            noun: outermost.unwrap().to_owned(),
        }
    } else if verbs == depth + 1 {
        Verdict::Complete
    } else if verbs > depth + 1 {
        Verdict::Invalid {
            reason: InvalidReason::Underflow,
        }
    } else {
        Verdict::Invalid {
            reason: InvalidReason::Leftover,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_two_is_the_walkthrough() {
        let s = walkthrough_sentence(2);
        assert_eq!(
            s.words.join(" "),
            "The cat that the dog that the mouse feared chased"
        );
        assert_eq!(s.completion.as_deref(), Some("fled"));
    }

    #[test]
    fn depth_zero_complete() {
        let s = walkthrough_sentence(0);
        assert_eq!(s.words.join(" "), "The cat fled");
        assert_eq!(s.completion, None);
        let lex = Lexicon::scenario();
        assert_eq!(check_sentence(&s.words, &lex), Verdict::Complete);
    }

    #[test]
    fn generated_sentences_check_out() {
        let lex = Lexicon::scenario();
        let mut rng = SplitMix64::new(1234);
        for depth in 0..=10 {
            for _ in 0..10 {
                let s = generate_sentence(depth, &mut rng);
                let verdict = check_sentence(&s.words, &lex);
                match s.completion {
                    None => assert_eq!(verdict, Verdict::Complete),
                    Some(_) => match verdict {
                        Verdict::NeedsVerb { ref noun } => assert_eq!(noun, &s.words[1]),
                        other => panic!("depth {depth}: {other:?}"),
                    },
                }
            }
        }
    }

    #[test]
    fn extra_verb_is_underflow() {
        let lex = Lexicon::scenario();
        let mut s = walkthrough_sentence(1);
        s.words.push("fled".to_owned());
        s.words.push("saw".to_owned());
        assert_eq!(
            check_sentence(&s.words, &lex),
            Verdict::Invalid {
                reason: InvalidReason::Underflow
            }
        );
    }
}
