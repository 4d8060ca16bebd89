//! Property tests: encoding round trips, pipeline round trips, and
//! step-level determinism.

use proptest::prelude::*;
use tapeline_core::machine::{Machine, MachineOptions};
use tapeline_core::tape::{read_all_token_ids, write_token_id, Alphabet, Tape};
use tapeline_core::validate_trace;
use tapeline_model::spec::{ModelSpec, SpecDims};
use tapeline_model::vocab::{build_regime_vocab, detokenise, tokenise, Regime};

proptest! {
    #[test]
    fn token_id_encoding_round_trips(ids in proptest::collection::vec(any::<u32>(), 0..50)) {
        let mut tape = Tape::new(2, Alphabet::BinaryDelim);
        for &id in &ids {
            write_token_id(&mut tape, id).unwrap();
        }
        prop_assert_eq!(read_all_token_ids(&tape).unwrap(), ids);
    }

    #[test]
    fn tokenise_detokenise_round_trips(text in "[ -~]{0,60}") {
        // Printable ASCII; byte fallback guarantees losslessness.
        let (vocab, rules) = build_regime_vocab(Regime::B);
        let out = tokenise(&text, &vocab, &rules);
        prop_assert!(out.unk_substitutions.is_empty());
        prop_assert_eq!(detokenise(&out.ids, &vocab).unwrap(), text);
    }
}

fn tiny_machine(seed: u64) -> Machine {
    let (vocab, rules) = build_regime_vocab(Regime::A);
    let spec = ModelSpec::generate(
        seed,
        SpecDims {
            layers: 1,
            heads: 1,
            d_model: 4,
            d_ff: 4,
            l_max: 32,
            vocab_size: vocab.id_bound() as usize,
            frac_bits: 16,
        },
    )
    .unwrap();
    Machine::new(vocab, rules, spec, MachineOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn each_step_is_a_function_of_the_configuration(
        seed in 0u64..1000,
        word in prop::sample::select(vec!["cat", "dog", "mouse", "rat"]),
    ) {
        let m = tiny_machine(seed);
        let mut cfg = m.init_configuration(&format!("the {word}")).unwrap();
        for _ in 0..200 {
            let (a, ev_a) = m.step(&cfg).unwrap();
            let (b, ev_b) = m.step(&cfg).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(ev_a, ev_b);
            if a.state.phase == tapeline_core::Phase::Halt {
                break;
            }
            cfg = a;
        }
    }

    #[test]
    fn whole_runs_produce_legal_traces(seed in 0u64..500) {
        let m = tiny_machine(seed);
        let out = m.run_text("the cat fled", 1_000_000, 3).unwrap();
        validate_trace(&out.trace).unwrap();
    }
}
