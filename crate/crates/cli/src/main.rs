//! Command-line entry point: run scenario files through the tape machine,
//! execute the two canonical demos (letter counting and centre-embedding),
//! generate reproducible model specs and vocabularies, and re-analyse
//! saved traces. In non-verbose mode stdout carries only the machine's
//! output text so runs compose in shell pipelines; reports and traces go
//! to files named by flags (or the `TAPELINE_REPORT` / `TAPELINE_TRACE`
//! environment variables when no flag is given).

mod scenario;

use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use tapeline_core::diagnostics::{localise_failure, DiagnosticTask, FailureReport, Stage};
use tapeline_core::machine::{Machine, RunOutcome};
use tapeline_core::{
    bounded_window_baseline, context_violation_report, export_trace, import_trace,
    recognise_centre_embedding, run_beam, validate_trace, Fidelity, TraceEvent,
};
use tapeline_model::grammar::{Lexicon, Verdict};
use tapeline_model::numerics::FxpCtx;
use tapeline_model::spec::{ModelSpec, SpecDims};
use tapeline_model::vocab::{
    build_regime_vocab, detokenise, save_vocab, tokenise, Regime,
};
use tapeline_oracle::cfg::{check_sentence, generate_sentence, walkthrough_sentence};

use scenario::{DecodeCfg, Scenario};

#[derive(Parser)]
#[command(name = "tapeline", about = "Tape-machine LLM pipeline runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file through the pipeline.
    Run {
        scenario: PathBuf,
        /// Write the step trace as JSONL.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the failure report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Override the scenario's spec generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario's vocabulary regime (A|B|byte).
        #[arg(long)]
        regime: Option<String>,
        /// Override the decode mode with beam search of this width.
        #[arg(long)]
        beam: Option<usize>,
        /// Also print status and report details to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// The letter-counting walkthrough: how many r's in Strawberry?
    DemoStrawberry {
        #[arg(long, default_value = "A")]
        regime: String,
        /// Route the question through the counting subroutine.
        #[arg(long)]
        with_counting: bool,
        #[arg(long, default_value_t = 5)]
        seed: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// The centre-embedding walkthrough: complete "The cat that ...".
    DemoEmbedding {
        #[arg(long, default_value_t = 2)]
        depth: usize,
        /// Use the dependency stack instead of the bounded-window baseline.
        #[arg(long)]
        with_stack: bool,
        /// Baseline window size in content words.
        #[arg(long, default_value_t = 4)]
        window: usize,
        /// Evaluate a whole generated suite instead of a single sentence.
        #[arg(long)]
        suite: bool,
        /// Parallel workers for suite evaluation.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate a reproducible model spec file.
    GenSpec {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 8)]
        d_ff: usize,
        #[arg(long, default_value_t = 64)]
        l_max: usize,
        /// Defaults to the regime vocabulary's id bound.
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long, default_value = "A")]
        regime: String,
        #[arg(long, default_value_t = 16)]
        frac_bits: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a vocabulary file for a regime.
    GenVocab {
        #[arg(long)]
        regime: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-analyse a saved JSONL trace: legality and a step summary.
    Diagnose {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn env_path(flag: Option<PathBuf>, var: &str) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(var).map(PathBuf::from))
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            scenario,
            trace,
            report,
            seed,
            regime,
            beam,
            verbose,
        } => cmd_run(&scenario, trace, report, seed, regime, beam, verbose),
        Command::DemoStrawberry {
            regime,
            with_counting,
            seed,
            trace,
            report,
        } => cmd_demo_strawberry(&regime, with_counting, seed, trace, report),
        Command::DemoEmbedding {
            depth,
            with_stack,
            window,
            suite,
            jobs,
            seed,
            trace,
        } => cmd_demo_embedding(depth, with_stack, window, suite, jobs, seed, trace),
        Command::GenSpec {
            seed,
            layers,
            heads,
            d_model,
            d_ff,
            l_max,
            vocab_size,
            regime,
            frac_bits,
            out,
        } => {
            let regime = parse_regime(&regime)?;
            let (vocab, _) = build_regime_vocab(regime);
            let dims = SpecDims {
                layers,
                heads,
                d_model,
                d_ff,
                l_max,
                vocab_size: vocab_size.unwrap_or(vocab.id_bound() as usize),
                frac_bits,
            };
            let spec = ModelSpec::generate(seed, dims).context("generating spec")?;
            spec.save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GenVocab { regime, out } => {
            let regime = parse_regime(&regime)?;
            let (vocab, rules) = build_regime_vocab(regime);
            save_vocab(&out, &vocab, &rules)
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnose { trace, report } => cmd_diagnose(&trace, report),
    }
}

fn parse_regime(name: &str) -> Result<Regime> {
    Regime::parse(name).with_context(|| format!("unknown regime {name:?}"))
}

fn write_trace(path: &Path, events: &[TraceEvent]) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    export_trace(events, std::io::BufWriter::new(file))
        .with_context(|| format!("writing {}", path.display()))
}

fn write_report(path: &Path, report: &FailureReport) -> Result<()> {
    let json = serde_json::to_string_pretty(&report.to_json())?;
    std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Run one machine scenario: print the output tape, persist artifacts, and
/// turn the expectation into an exit code.
fn finish_machine_run(
    machine: &Machine,
    outcome: &RunOutcome,
    scenario_name: &str,
    expect: Option<&str>,
    focus_word: Option<&str>,
    trace_path: Option<PathBuf>,
    report_path: Option<PathBuf>,
    verbose: bool,
) -> Result<ExitCode> {
    let actual = outcome.config.output_text();
    println!("{actual}");
    if let Some(path) = env_path(trace_path, "TAPELINE_TRACE") {
        write_trace(&path, &outcome.trace)?;
    }
    if verbose {
        eprintln!("status: {:?}", outcome.status);
        if let Some(msg) = context_violation_report(outcome) {
            eprintln!("{msg}");
        }
    }
    let Some(expect) = expect else {
        return Ok(ExitCode::SUCCESS);
    };
    let task = DiagnosticTask {
        focus_word,
        requires_counting: machine.opts.counting.is_some(),
        requires_stack: false,
    };
    let report = localise_failure(machine, outcome, scenario_name, expect, &task);
    if let Some(path) = env_path(report_path, "TAPELINE_REPORT") {
        write_report(&path, &report)?;
    }
    if report.stage.is_none() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprint!("{}", report.render_text());
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_run(
    path: &Path,
    trace: Option<PathBuf>,
    report: Option<PathBuf>,
    seed: Option<u64>,
    regime: Option<String>,
    beam: Option<usize>,
    verbose: bool,
) -> Result<ExitCode> {
    let mut scenario = Scenario::load(path)?;
    // Precedence: flags > file > defaults.
    if let Some(seed) = seed {
        scenario.spec_seed = Some(seed);
    }
    if let Some(regime) = regime {
        scenario.regime = Some(regime);
    }
    if let Some(beams) = beam {
        scenario.decode = DecodeCfg::Beam { beams };
    }
    scenario.validate()?;
    if scenario.stack {
        return run_stack_scenario(&scenario, trace, report);
    }
    if let DecodeCfg::Beam { beams } = scenario.decode {
        return run_beam_scenario(&scenario, beams);
    }
    let machine = scenario.build_machine()?;
    let outcome = machine
        .run_text(&scenario.prompt, scenario.max_steps, scenario.max_tokens)
        .map_err(|e| anyhow::anyhow!("machine run failed: {e}"))?;
    finish_machine_run(
        &machine,
        &outcome,
        &scenario.name,
        scenario.expect.as_deref(),
        scenario.focus_word.as_deref(),
        trace,
        report,
        verbose,
    )
}

fn render_verdict(verdict: &Verdict) -> String {
    match verdict {
        Verdict::Complete => "complete".to_owned(),
        Verdict::NeedsVerb { noun } => match Lexicon::verb_for(noun) {
            Some(verb) => format!("needs verb for '{noun}': {verb}"),
            None => format!("needs verb for '{noun}'"),
        },
        Verdict::Invalid { reason } => format!("invalid ({reason:?})"),
    }
}

fn run_stack_scenario(
    scenario: &Scenario,
    trace: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<ExitCode> {
    let lexicon = Lexicon::scenario();
    let words: Vec<String> = scenario
        .prompt
        .split_whitespace()
        .map(str::to_owned)
        .collect();
    let outcome = recognise_centre_embedding(&words, &lexicon);
    let actual = render_verdict(&outcome.verdict);
    println!("{actual}");
    if let Some(path) = env_path(trace, "TAPELINE_TRACE") {
        write_trace(&path, &outcome.trace)?;
    }
    let Some(expect) = scenario.expect.as_deref() else {
        return Ok(ExitCode::SUCCESS);
    };
    let matched = actual == expect;
    let failure = FailureReport {
        scenario: scenario.name.clone(),
        expected: expect.to_owned(),
        actual,
        stage: if matched { None } else { Some(Stage::Forward) },
        evidence: Vec::new(),
    };
    if let Some(path) = env_path(report, "TAPELINE_REPORT") {
        write_report(&path, &failure)?;
    }
    Ok(if matched {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run_beam_scenario(scenario: &Scenario, beams: usize) -> Result<ExitCode> {
    let (vocab, rules) = scenario.build_vocab()?;
    let spec = scenario.build_spec(&vocab)?;
    let ctx = FxpCtx::new(spec.dims.frac_bits);
    let mut ids = vec![vocab.specials.bos];
    ids.extend(tokenise(&scenario.prompt, &vocab, &rules).ids);
    let generated = run_beam(
        &ctx,
        &spec,
        &ids,
        vocab.specials.eos,
        beams,
        scenario.max_tokens as usize,
    )
    .map_err(|e| anyhow::anyhow!("beam decode failed: {e}"))?;
    let content: Vec<u32> = generated
        .into_iter()
        .filter(|id| !vocab.is_special(*id))
        .collect();
    let text = detokenise(&content, &vocab).map_err(|e| anyhow::anyhow!("{e}"))?;
    println!("{text}");
    Ok(match scenario.expect.as_deref() {
        None => ExitCode::SUCCESS,
        Some(expect) if expect == text => ExitCode::SUCCESS,
        Some(_) => ExitCode::FAILURE,
    })
}

const STRAWBERRY_PROMPT: &str = "How many r's are in Strawberry?";

fn cmd_demo_strawberry(
    regime: &str,
    with_counting: bool,
    seed: u64,
    trace: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<ExitCode> {
    let scenario = Scenario {
        name: format!("strawberry-{regime}"),
        prompt: STRAWBERRY_PROMPT.to_owned(),
        regime: Some(regime.to_owned()),
        vocab_file: None,
        spec_file: None,
        spec_seed: Some(seed),
        dims: None,
        decode: DecodeCfg::Greedy,
        counting: with_counting.then(|| scenario::CountCfg {
            word: "Strawberry".to_owned(),
            letter: 'r',
            case_sensitive: false,
        }),
        stack: false,
        max_steps: scenario::DEFAULT_MAX_STEPS,
        max_tokens: 8,
        expect: Some("3".to_owned()),
        focus_word: Some("Strawberry".to_owned()),
    };
    let machine = scenario.build_machine()?;
    let outcome = machine
        .run_text(&scenario.prompt, scenario.max_steps, scenario.max_tokens)
        .map_err(|e| anyhow::anyhow!("machine run failed: {e}"))?;
    let actual = outcome.config.output_text();
    println!("{actual}");
    if let Some(path) = env_path(trace, "TAPELINE_TRACE") {
        write_trace(&path, &outcome.trace)?;
    }
    // The demo always explains itself: the question is a counting task, so
    // diagnosis demands the subroutine states whether or not they ran.
    let task = DiagnosticTask {
        focus_word: Some("Strawberry"),
        requires_counting: true,
        requires_stack: false,
    };
    let failure = localise_failure(&machine, &outcome, &scenario.name, "3", &task);
    if let Some(path) = env_path(report, "TAPELINE_REPORT") {
        write_report(&path, &failure)?;
    }
    if failure.stage.is_none() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprint!("{}", failure.render_text());
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_demo_embedding(
    depth: usize,
    with_stack: bool,
    window: usize,
    suite: bool,
    jobs: Option<usize>,
    seed: u64,
    trace: Option<PathBuf>,
) -> Result<ExitCode> {
    let lexicon = Lexicon::scenario();
    if !suite {
        let sentence = walkthrough_sentence(depth);
        let verdict = if with_stack {
            let outcome = recognise_centre_embedding(&sentence.words, &lexicon);
            if let Some(path) = env_path(trace, "TAPELINE_TRACE") {
                write_trace(&path, &outcome.trace)?;
            }
            outcome.verdict
        } else {
            bounded_window_baseline(&sentence.words, window, &lexicon)
        };
        println!("sentence: {}", sentence.words.join(" "));
        println!("verdict:  {}", render_verdict(&verdict));
        return Ok(ExitCode::SUCCESS);
    }
    // Suite: 50 random sentences per depth from 0 to `depth`, judged
    // against the count-based shape checker.
    let mut cases: Vec<(usize, Vec<String>)> = Vec::new();
    for d in 0..=depth {
        let mut rng = tapeline_model::rng::SplitMix64::new(seed ^ (d as u64).wrapping_mul(0x9e37));
        for _ in 0..50 {
            cases.push((d, generate_sentence(d, &mut rng).words));
        }
    }
    let evaluate = |cases: &[(usize, Vec<String>)]| -> Vec<(usize, bool)> {
        cases
            .par_iter()
            .map(|(d, words)| {
                let truth = check_sentence(words, &lexicon);
                let got = if with_stack {
                    recognise_centre_embedding(words, &lexicon).verdict
                } else {
                    bounded_window_baseline(words, window, &lexicon)
                };
                (*d, got == truth)
            })
            .collect()
    };
    let results = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building worker pool")?
            .install(|| evaluate(&cases)),
        None => evaluate(&cases),
    };
    let mut correct_total = 0usize;
    for d in 0..=depth {
        let at_depth: Vec<_> = results.iter().filter(|(rd, _)| *rd == d).collect();
        let correct = at_depth.iter().filter(|(_, ok)| *ok).count();
        correct_total += correct;
        println!(
            "depth {d}: {correct}/{} ({:.1}%)",
            at_depth.len(),
            100.0 * correct as f64 / at_depth.len() as f64
        );
    }
    println!(
        "overall: {correct_total}/{} ({:.1}%)",
        results.len(),
        100.0 * correct_total as f64 / results.len() as f64
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_diagnose(trace_path: &Path, report: Option<PathBuf>) -> Result<ExitCode> {
    let file = std::fs::File::open(trace_path)
        .with_context(|| format!("opening {}", trace_path.display()))?;
    let events = import_trace(BufReader::new(file))
        .with_context(|| format!("parsing {}", trace_path.display()))?;
    let legality = validate_trace(&events);
    let micro = events
        .iter()
        .filter(|e| e.fidelity == Fidelity::Micro)
        .count();
    let mut annotations: std::collections::BTreeMap<&str, usize> = Default::default();
    for ev in &events {
        if let Some(a) = ev.annotation.as_deref() {
            *annotations.entry(a).or_default() += 1;
        }
    }
    println!("events: {}", events.len());
    println!("micro:  {micro} / macro: {}", events.len() - micro);
    for (state, n) in &annotations {
        println!("  {state}: {n}");
    }
    match &legality {
        Ok(()) => println!("legality: ok"),
        Err(e) => println!("legality: VIOLATION - {e}"),
    }
    if let Some(path) = env_path(report, "TAPELINE_REPORT") {
        let summary = serde_json::json!({
            "events": events.len(),
            "micro": micro,
            "annotations": annotations,
            "legal": legality.is_ok(),
            "violation": legality.as_ref().err().map(|e| e.to_string()),
        });
        std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if legality.is_ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
