//! The release gate: one test per acceptance criterion, each printing a
//! single PASS/FAIL line (visible with `--nocapture`; a FAIL also fails
//! the test the normal way).

use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::process::Command;
use std::time::Instant;

use tapeline_core::diagnostics::{localise_failure, DiagnosticTask, Stage};
use tapeline_core::machine::{
    DecodeMode, Machine, MachineOptions, RandomSource, RunStatus,
};
use tapeline_core::{
    bounded_window_baseline, count_letter, forward_all, internal_detok,
    recognise_centre_embedding, run_beam, select_greedy, select_sample, validate_trace,
    CountTask, RandomTape,
};
use tapeline_model::numerics::{FixedPoint, FxpCtx, ProbRow};
use tapeline_model::rng::SplitMix64;
use tapeline_model::spec::{ModelSpec, SpecDims};
use tapeline_model::vocab::{build_regime_vocab, detokenise, tokenise, Regime};
use tapeline_oracle::cfg::{check_sentence, generate_sentence};
use tapeline_oracle::{oracle_beam, oracle_count, oracle_forward};

fn criterion<F: FnOnce() + UnwindSafe>(n: u32, name: &str, body: F) {
    let start = Instant::now();
    let result = catch_unwind(body);
    let verdict = if result.is_ok() { "PASS" } else { "FAIL" };
    println!(
        "criterion {n} ({name}): {verdict} [{:.1}s]",
        start.elapsed().as_secs_f64()
    );
    if let Err(panic) = result {
        resume_unwind(panic);
    }
}

/// A random small architecture: L<=2, H<=2, d_model<=16, vocab<=64.
fn random_spec(rng: &mut SplitMix64) -> ModelSpec {
    let heads = 1 + rng.below(2) as usize;
    let d_k = 1 + rng.below(8) as usize; // d_model = heads * d_k <= 16
    let dims = SpecDims {
        layers: 1 + rng.below(2) as usize,
        heads,
        d_model: heads * d_k,
        d_ff: 1 + rng.below(16) as usize,
        l_max: 16,
        vocab_size: 2 + rng.below(63) as usize,
        frac_bits: 16,
    };
    ModelSpec::generate(rng.next_u64(), dims).unwrap()
}

fn random_ids(rng: &mut SplitMix64, spec: &ModelSpec, len: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.below(spec.dims.vocab_size as u64) as u32)
        .collect()
}

#[test]
fn criterion_1_oracle_equivalence() {
    criterion(1, "oracle equivalence", || {
        let ctx = FxpCtx::new(16);
        let mut rng = SplitMix64::new(0xACCE01);
        for _ in 0..100 {
            let spec = random_spec(&mut rng);
            let len = 1 + rng.below(16) as usize;
            let ids = random_ids(&mut rng, &spec, len);
            let pipeline = forward_all(&ctx, &spec, &ids).unwrap();
            let reference = oracle_forward(&ids, &spec, &ctx).unwrap();
            assert_eq!(pipeline, reference);
        }
    });
}

#[test]
fn criterion_2_tokenise_round_trip() {
    criterion(2, "tokenisation round trip", || {
        let (vocab, rules) = build_regime_vocab(Regime::B);
        let mut rng = SplitMix64::new(0xACCE02);
        for _ in 0..10_000 {
            let len = rng.below(257) as usize;
            let text: String = (0..len)
                .map(|_| (b' ' + rng.below(95) as u8) as char)
                .collect();
            let out = tokenise(&text, &vocab, &rules);
            assert!(out.unk_substitutions.is_empty());
            assert_eq!(detokenise(&out.ids, &vocab).unwrap(), text);
        }
    });
}

fn run_cli(args: &[&str]) -> (String, String, bool) {
    let out = Command::new(env!("CARGO_BIN_EXE_tapeline"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
        out.status.success(),
    )
}

#[test]
fn criterion_3_strawberry_scenario() {
    criterion(3, "letter-counting scenario", || {
        let dir = tempfile::tempdir().unwrap();
        for regime in ["A", "B"] {
            let (stdout, _, ok) =
                run_cli(&["demo-strawberry", "--regime", regime, "--with-counting"]);
            assert!(ok, "regime {regime} with counting should succeed");
            assert_eq!(stdout.trim_end(), "3");

            let report_path = dir.path().join(format!("report-{regime}.json"));
            let (_, _, ok) = run_cli(&[
                "demo-strawberry",
                "--regime",
                regime,
                "--report",
                report_path.to_str().unwrap(),
            ]);
            assert!(!ok, "regime {regime} without counting should fail");
            let report: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
            assert_eq!(report["stage"], "Tokenisation");
            let exposure = report["evidence"]
                .as_array()
                .unwrap()
                .iter()
                .find(|e| e["name"].as_str().unwrap().starts_with("boundary_exposure"))
                .unwrap()["value"]
                .as_f64()
                .unwrap();
            let expected = if regime == "A" { 0.0 } else { 2.0 / 9.0 };
            assert!((exposure - expected).abs() < 1e-9, "regime {regime}");
        }
    });
}

#[test]
fn criterion_4_counting_exactness() {
    criterion(4, "counting exactness", || {
        let regimes = [Regime::A, Regime::B, Regime::ByteLevel].map(build_regime_vocab);
        let mut rng = SplitMix64::new(0xACCE04);
        for _ in 0..1000 {
            let len = rng.below(65) as usize;
            let text: String = (0..len)
                .map(|_| (b' ' + rng.below(95) as u8) as char)
                .collect();
            let letter = (b'a' + rng.below(26) as u8) as char;
            let expected = oracle_count(&text, letter, false) as u32;
            assert_eq!(count_letter(text.as_bytes(), letter, false), expected);
            // The same count survives every tokenisation regime.
            for (vocab, rules) in &regimes {
                let ids = tokenise(&text, vocab, rules).ids;
                let bytes = internal_detok(&ids, vocab);
                assert_eq!(count_letter(&bytes, letter, false), expected);
            }
        }
    });
}

#[test]
fn criterion_5_centre_embedding() {
    criterion(5, "centre embedding", || {
        let start = Instant::now();
        let lexicon = tapeline_model::grammar::Lexicon::scenario();
        let mut rng = SplitMix64::new(0xACCE05);
        let mut baseline_wrong_by_depth = [0usize; 11];
        let mut total = 0usize;
        for depth in 0..=10usize {
            for _ in 0..50 {
                let sentence = generate_sentence(depth, &mut rng);
                let truth = check_sentence(&sentence.words, &lexicon);
                let stack = recognise_centre_embedding(&sentence.words, &lexicon);
                assert_eq!(stack.verdict, truth, "depth {depth}");
                validate_trace(&stack.trace).unwrap();
                if bounded_window_baseline(&sentence.words, 4, &lexicon) != truth {
                    baseline_wrong_by_depth[depth] += 1;
                }
                total += 1;
            }
        }
        assert!(total >= 550);
        assert_eq!(baseline_wrong_by_depth[0], 0, "baseline exact at depth 0");
        assert_eq!(baseline_wrong_by_depth[1], 0, "baseline exact at depth 1");
        for depth in 3..=10 {
            assert!(
                baseline_wrong_by_depth[depth] > 0,
                "baseline must fail at depth {depth}"
            );
        }
        assert!(start.elapsed().as_secs() < 30);
    });
}

#[test]
fn criterion_6_decode_equivalences() {
    criterion(6, "decode equivalences", || {
        let ctx = FxpCtx::new(16);
        let mut rng = SplitMix64::new(0xACCE06);
        // Beam width 1 is greedy, bit-exactly.
        for _ in 0..50 {
            let spec = random_spec(&mut rng);
            let len = 1 + rng.below(4) as usize;
            let prompt = random_ids(&mut rng, &spec, len);
            let eos = rng.below(spec.dims.vocab_size as u64) as u32;
            let beam = run_beam(&ctx, &spec, &prompt, eos, 1, 4).unwrap();
            let mut ids = prompt.clone();
            let mut greedy = Vec::new();
            for _ in 0..4 {
                let logits = forward_all(&ctx, &spec, &ids).unwrap();
                let row = ctx.softmax(logits.last().unwrap(), ctx.one());
                let id = select_greedy(&row).unwrap();
                greedy.push(id);
                ids.push(id);
                if id == eos {
                    break;
                }
            }
            assert_eq!(beam, greedy);
        }
        // Beam width 2 matches the independent beam decoder.
        for _ in 0..20 {
            let spec = random_spec(&mut rng);
            let len = 1 + rng.below(3) as usize;
            let prompt = random_ids(&mut rng, &spec, len);
            let eos = rng.below(spec.dims.vocab_size as u64) as u32;
            let ours = run_beam(&ctx, &spec, &prompt, eos, 2, 3).unwrap();
            let theirs = oracle_beam(&prompt, &spec, eos, 2, 3, &ctx).unwrap();
            assert_eq!(ours, theirs);
        }
        // Sampling frequencies track the probability row within 3 sigma.
        let logits: Vec<FixedPoint> = [0.0, 0.4, -0.3, 0.8, 0.1, -0.6, 0.2, -0.1]
            .iter()
            .map(|v| ctx.from_f64(*v))
            .collect();
        let row: ProbRow = ctx.softmax(&logits, ctx.one());
        let width = 16u32;
        let draws = 100_000usize;
        let mut tape = RandomTape::seeded(0xACCE06);
        let mut counts = vec![0usize; row.entries.len()];
        for _ in 0..draws {
            let u = tape.next_bits(width).unwrap();
            counts[select_sample(&ctx, &row, u, width).unwrap() as usize] += 1;
        }
        let one = ctx.one().raw as f64;
        for (k, p) in row.entries.iter().enumerate() {
            let p = p.raw as f64 / one;
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            let diff = (counts[k] as f64 - draws as f64 * p).abs();
            // One extra quantum of slack for the inverse-CDF rounding.
            assert!(
                diff <= 3.0 * sigma + draws as f64 / (1u64 << width) as f64,
                "token {k}: observed {}, expected {:.1}",
                counts[k],
                draws as f64 * p
            );
        }
    });
}

fn small_machine(seed: u64, opts: MachineOptions) -> Machine {
    let (vocab, rules) = build_regime_vocab(Regime::A);
    let dims = SpecDims {
        layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 8,
        l_max: 64,
        vocab_size: vocab.id_bound() as usize,
        frac_bits: 16,
    };
    let spec = ModelSpec::generate(seed, dims).unwrap();
    Machine::new(vocab, rules, spec, opts).unwrap()
}

#[test]
fn criterion_7_kv_cache_equivalence() {
    criterion(7, "kv-cache equivalence", || {
        for seed in 0..50u64 {
            let cached = small_machine(seed, MachineOptions::default());
            let recomputed = small_machine(
                seed,
                MachineOptions {
                    use_cache: false,
                    ..MachineOptions::default()
                },
            );
            let a = cached.run_text("the cat fled", 2_000_000, 2).unwrap();
            let b = recomputed.run_text("the cat fled", 2_000_000, 2).unwrap();
            assert_eq!(a.status, b.status, "seed {seed}");
            assert_eq!(a.config, b.config, "seed {seed}");
        }
    });
}

#[test]
fn criterion_8_machine_legality() {
    criterion(8, "machine legality", || {
        let scenarios: Vec<(Machine, &str)> = vec![
            (small_machine(1, MachineOptions::default()), "the dog chased"),
            (
                small_machine(
                    2,
                    MachineOptions {
                        decode: DecodeMode::Sample { width: 12 },
                        random: RandomSource::Seeded(7),
                        ..MachineOptions::default()
                    },
                ),
                "the mouse",
            ),
            (
                small_machine(
                    3,
                    MachineOptions {
                        counting: Some(CountTask {
                            word: "Strawberry".into(),
                            letter: 'r',
                            case_sensitive: false,
                        }),
                        ..MachineOptions::default()
                    },
                ),
                "How many r's are in Strawberry?",
            ),
        ];
        for (machine, prompt) in &scenarios {
            let init = machine.init_configuration(prompt).unwrap();
            let vocab_cells = init.tapes.vocab.cells().to_vec();
            let param_cells = init.tapes.params.cells().to_vec();
            let out = machine.run(init, 5_000_000, 4).unwrap();
            // Finite budgets always terminate in a classified status.
            assert!(matches!(
                out.status,
                RunStatus::Halted
                    | RunStatus::StepLimit
                    | RunStatus::TokenLimit
                    | RunStatus::ContextViolation { .. }
            ));
            validate_trace(&out.trace).unwrap();
            assert_eq!(out.config.tapes.vocab.cells(), &vocab_cells[..]);
            assert_eq!(out.config.tapes.params.cells(), &param_cells[..]);
            // Determinism: an identical rerun reproduces the trace.
            let again = machine.run_text(prompt, 5_000_000, 4).unwrap();
            assert_eq!(again.trace, out.trace);
            // A passing scenario never gets blamed.
            if prompt.starts_with("How many") {
                assert_eq!(out.config.output_text(), "3");
                let task = DiagnosticTask {
                    focus_word: Some("Strawberry"),
                    requires_counting: true,
                    requires_stack: false,
                };
                let report = localise_failure(machine, &out, "legality", "3", &task);
                assert_eq!(report.stage, None);
                assert_ne!(report.stage, Some(Stage::Selection));
            }
        }
    });
}

#[test]
fn criterion_9_numerics() {
    criterion(9, "numerics", || {
        let ctx = FxpCtx::new(16);
        let one = ctx.one().raw;
        let mut rng = SplitMix64::new(0xACCE09);
        for _ in 0..10_000 {
            let n = 2 + rng.below(15) as usize;
            let logits: Vec<FixedPoint> = (0..n)
                .map(|_| FixedPoint::from_raw(rng.unit_raw(16) * 4))
                .collect();
            let row = ctx.softmax(&logits, ctx.one());
            let sum: i64 = row.entries.iter().map(|p| p.raw as i64).sum();
            assert!((sum - one as i64).abs() <= 1, "sum {sum} vs one {one}");
            // Argmax preservation (on a strict logit argmax).
            let max = logits.iter().map(|x| x.raw).max().unwrap();
            if logits.iter().filter(|x| x.raw == max).count() == 1 {
                let arg = logits.iter().position(|x| x.raw == max).unwrap();
                let pmax = row.entries.iter().map(|p| p.raw).max().unwrap();
                assert_eq!(row.entries[arg].raw, pmax);
            }
            // Shift invariance.
            let shift = rng.unit_raw(16);
            let shifted: Vec<FixedPoint> = logits
                .iter()
                .map(|x| FixedPoint::from_raw(x.raw + shift))
                .collect();
            assert_eq!(ctx.softmax(&shifted, ctx.one()), row);
        }
        // Saturation flags the dominant-key row, not the uniform one.
        let dominant = ProbRow {
            entries: vec![FixedPoint::from_raw(0), ctx.one(), FixedPoint::from_raw(0)],
        };
        assert!(tapeline_core::head_saturation(&ctx, &dominant));
        let uniform = ProbRow {
            entries: vec![ctx.from_f64(0.25); 4],
        };
        assert!(!tapeline_core::head_saturation(&ctx, &uniform));
    });
}
