//! Failure measurement and localisation.
//!
//! The measures quantify the structural effects behind most wrong answers:
//! token boundaries hiding characters from the model (boundary exposure)
//! and attention spreading over too many positions (dilution) or
//! collapsing onto one (saturation). `localise_failure` walks the pipeline
//! stages in a fixed order — tokenisation outranks forward outranks
//! selection outranks detokenisation, because upstream causes dominate
//! downstream symptoms — and blames the first stage whose signature is
//! present. A run whose output matches the expectation is never blamed.

use serde::{Deserialize, Serialize};
use tapeline_model::numerics::{FxpCtx, ProbRow};
use tapeline_model::vocab::{apply_merges, detokenise, detokenise_bytes, MergeRule};
use tapeline_model::FixedPoint;

use crate::machine::{Machine, RunOutcome, RunStatus};
use crate::tape::{Symbol, Tape};

/// Fraction of the word's internal character boundaries that are also
/// token boundaries: 0 for a single-token word, 1 for pure
/// character-level splitting.
pub fn boundary_exposure(word: &str, rules: &[MergeRule]) -> f64 {
    let internal = word.chars().count().saturating_sub(1);
    if internal == 0 {
        return 0.0;
    }
    let pieces = apply_merges(word.as_bytes(), rules).len();
    (pieces - 1) as f64 / internal as f64
}

/// 1 minus the largest attention weight: 0 when one position takes all
/// the mass, approaching 1 as the row flattens.
pub fn attention_dilution(ctx: &FxpCtx, row: &ProbRow) -> f64 {
    let max = row.entries.iter().map(|p| p.raw).max().unwrap_or(0);
    1.0 - ctx.to_f64(FixedPoint::from_raw(max))
}

/// Dilution scores above this are flagged as evidence (overridable per
/// call site; the measure itself is threshold-free).
pub const DILUTION_THRESHOLD: f64 = 0.5;

/// Whether a head has effectively committed to a single position: its
/// largest weight is within four quanta of one.
pub fn head_saturation(ctx: &FxpCtx, row: &ProbRow) -> bool {
    let max = row.entries.iter().map(|p| p.raw).max().unwrap_or(0);
    max >= ctx.one().raw - 4
}

/// The probability rows written on tape 6, one per processed position.
pub fn prob_rows(tape: &Tape) -> Vec<ProbRow> {
    let mut rows = Vec::new();
    let mut current: Option<ProbRow> = None;
    for sym in tape.cells() {
        match sym {
            Symbol::Delim => {
                if let Some(row) = current.take() {
                    rows.push(row);
                }
                current = Some(ProbRow {
                    entries: Vec::new(),
                });
            }
            Symbol::Prob(p) => {
                if let Some(row) = current.as_mut() {
                    row.entries.push(FixedPoint::from_raw(*p));
                }
            }
            _ => {}
        }
    }
    rows.extend(current);
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Tokenisation,
    Forward,
    Selection,
    Detokenisation,
}

/// One metric record backing an attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub threshold: Option<f64>,
    /// Tape, position or trace-step reference the value came from.
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub scenario: String,
    pub expected: String,
    pub actual: String,
    /// None exactly when the output matched the expectation.
    pub stage: Option<Stage>,
    pub evidence: Vec<Evidence>,
}

impl FailureReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serialises")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("scenario: {}\n", self.scenario));
        out.push_str(&format!("expected: {:?}\n", self.expected));
        out.push_str(&format!("actual:   {:?}\n", self.actual));
        out.push_str(&format!(
            "attributed stage: {}\n",
            match self.stage {
                None => "none (output matched)".to_owned(),
                Some(s) => format!("{s:?}"),
            }
        ));
        for e in &self.evidence {
            let thr = e
                .threshold
                .map(|t| format!(" (threshold {t})"))
                .unwrap_or_default();
            out.push_str(&format!("  {} = {:.4}{thr} [{}]\n", e.name, e.value, e.reference));
        }
        out
    }
}

/// What the scenario demanded, for attribution purposes.
#[derive(Debug, Clone, Default)]
pub struct DiagnosticTask<'a> {
    /// The character-level-critical word, when the task is about characters.
    pub focus_word: Option<&'a str>,
    /// The scenario requires the counting subroutine states in the trace.
    pub requires_counting: bool,
    /// The scenario requires dependency-stack states in the trace.
    pub requires_stack: bool,
}

fn trace_has_annotation(outcome: &RunOutcome, needle: &str) -> bool {
    outcome
        .trace
        .iter()
        .any(|ev| ev.annotation.as_deref() == Some(needle))
}

/// Blame the earliest pipeline stage consistent with the evidence.
///
/// In order: (1) tokenisation, when the prompt does not round-trip through
/// the tokeniser or the focus word's character boundaries are not fully
/// exposed to the model; (2) forward, when required subroutine states are
/// missing from the trace; (3) selection, when an emitted token differs
/// from its row's argmax; (4) detokenisation, when the output characters
/// disagree with the emitted tokens. A wrong answer with none of these
/// signatures is still the model's own distribution, so it falls back to
/// the forward stage (keeping the stage-None-iff-matched invariant).
pub fn localise_failure(
    machine: &Machine,
    outcome: &RunOutcome,
    scenario: &str,
    expectation: &str,
    task: &DiagnosticTask,
) -> FailureReport {
    let actual = outcome.config.output_text();
    let mut report = FailureReport {
        scenario: scenario.to_owned(),
        expected: expectation.to_owned(),
        actual: actual.clone(),
        stage: None,
        evidence: Vec::new(),
    };
    // Standing evidence: exposure, dilution and saturation at the last
    // processed position, subroutine-state presence.
    let exposure = task.focus_word.map(|w| boundary_exposure(w, &machine.rules));
    if let (Some(word), Some(e)) = (task.focus_word, exposure) {
        report.evidence.push(Evidence {
            name: format!("boundary_exposure({word:?})"),
            value: e,
            threshold: Some(1.0),
            reference: "tokeniser merge rules".into(),
        });
    }
    let last_position = outcome.config.attention.iter().map(|r| r.position).max();
    let final_rows: Vec<_> = outcome
        .config
        .attention
        .iter()
        .filter(|r| Some(r.position) == last_position)
        .collect();
    for r in &final_rows {
        let d = attention_dilution(&machine.ctx, &r.row);
        if d > DILUTION_THRESHOLD {
            report.evidence.push(Evidence {
                name: format!("attention_dilution(layer {}, head {})", r.layer, r.head),
                value: d,
                threshold: Some(DILUTION_THRESHOLD),
                reference: format!("tape 5 attention, position {}", r.position),
            });
        }
        if head_saturation(&machine.ctx, &r.row) {
            report.evidence.push(Evidence {
                name: format!("head_saturation(layer {}, head {})", r.layer, r.head),
                value: 1.0,
                threshold: None,
                reference: format!("tape 5 attention, position {}", r.position),
            });
        }
    }
    let counting_seen = trace_has_annotation(outcome, "q_count");
    let stack_seen = trace_has_annotation(outcome, "q_push");
    if task.requires_counting {
        report.evidence.push(Evidence {
            name: "counting_states_present".into(),
            value: counting_seen as u8 as f64,
            threshold: Some(1.0),
            reference: "trace annotations".into(),
        });
    }
    if task.requires_stack {
        report.evidence.push(Evidence {
            name: "stack_states_present".into(),
            value: stack_seen as u8 as f64,
            threshold: Some(1.0),
            reference: "trace annotations".into(),
        });
    }
    if actual == expectation {
        return report;
    }
    // (1) Tokenisation.
    let input_text = String::from_utf8_lossy(&outcome.config.tapes.input.text_bytes()).into_owned();
    let round_trip_ok = outcome
        .config
        .token_ids()
        .ok()
        .and_then(|ids| {
            let prompt = &ids[..ids.len() - outcome.config.regs.tokens_emitted as usize];
            let content: Vec<u32> = prompt
                .iter()
                .copied()
                .filter(|id| !machine.vocab.is_special(*id))
                .collect();
            detokenise(&content, &machine.vocab).ok()
        })
        .is_some_and(|text| text == input_text);
    if !round_trip_ok {
        report.stage = Some(Stage::Tokenisation);
        report.evidence.push(Evidence {
            name: "prompt_round_trip".into(),
            value: 0.0,
            threshold: Some(1.0),
            reference: "tape 1 vs detokenised tape 2 prefix".into(),
        });
        return report;
    }
    if exposure.is_some_and(|e| e < 1.0) {
        // A character-level task whose critical word is not fully exposed.
        report.stage = Some(Stage::Tokenisation);
        return report;
    }
    // (2) Forward: demanded subroutine states absent.
    if (task.requires_counting && !counting_seen) || (task.requires_stack && !stack_seen) {
        report.stage = Some(Stage::Forward);
        return report;
    }
    // (3) Selection: a model-driven pick that was not the argmax.
    if let Ok(ids) = outcome.config.token_ids() {
        let rows = prob_rows(&outcome.config.tapes.probs);
        let emitted = outcome.config.regs.tokens_emitted as usize;
        let prompt_len = ids.len() - emitted;
        let forced = outcome
            .trace
            .iter()
            .filter(|ev| ev.annotation.as_deref() == Some("q_select_forced"))
            .count();
        for k in 0..emitted {
            if k < forced {
                continue; // subroutine emissions bypass the row argmax
            }
            let row_idx = prompt_len - 1 + k;
            if let Some(row) = rows.get(row_idx) {
                if row.argmax().map(|a| a as u32) != Some(ids[prompt_len + k]) {
                    report.stage = Some(Stage::Selection);
                    report.evidence.push(Evidence {
                        name: format!("emission_{k}_vs_argmax"),
                        value: ids[prompt_len + k] as f64,
                        threshold: None,
                        reference: format!("tape 6 row {row_idx}"),
                    });
                    return report;
                }
            }
        }
    }
    // (4) Detokenisation: output disagrees with the emitted tokens.
    if let Ok(ids) = outcome.config.token_ids() {
        let emitted = outcome.config.regs.tokens_emitted as usize;
        let generated: Vec<u32> = ids[ids.len() - emitted..]
            .iter()
            .copied()
            .filter(|id| !machine.vocab.is_special(*id))
            .collect();
        if let Ok(bytes) = detokenise_bytes(&generated, &machine.vocab) {
            if bytes != outcome.config.tapes.output.text_bytes() {
                report.stage = Some(Stage::Detokenisation);
                report.evidence.push(Evidence {
                    name: "output_vs_emitted_tokens".into(),
                    value: 0.0,
                    threshold: Some(1.0),
                    reference: "tape 7 vs detokenised tape 2 suffix".into(),
                });
                return report;
            }
        }
    }
    // No upstream signature: the distribution itself produced the answer.
    report.stage = Some(Stage::Forward);
    report.evidence.push(Evidence {
        name: "argmax_consistent_but_wrong".into(),
        value: 1.0,
        threshold: None,
        reference: "tape 6 rows vs emissions".into(),
    });
    report
}

/// Human-readable account of a context-window overflow, if one occurred.
pub fn context_violation_report(outcome: &RunOutcome) -> Option<String> {
    match outcome.status {
        RunStatus::ContextViolation { position, l_max } => Some(format!(
            "position {position} does not fit the context window of {l_max}: \
             the run stopped before computing logits for it"
        )),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tapeline_model::vocab::{build_regime_vocab, Regime};

    #[test]
    fn exposure_zero_for_whole_word_regime() {
        let (_, rules) = build_regime_vocab(Regime::A);
        assert_eq!(boundary_exposure("Strawberry", &rules), 0.0);
    }

    #[test]
    fn exposure_two_ninths_for_split_regime() {
        let (_, rules) = build_regime_vocab(Regime::B);
        assert!((boundary_exposure("Strawberry", &rules) - 2.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn exposure_one_for_byte_level() {
        let (_, rules) = build_regime_vocab(Regime::ByteLevel);
        assert_eq!(boundary_exposure("Strawberry", &rules), 1.0);
    }

    #[test]
    fn dilution_and_saturation_extremes() {
        let ctx = FxpCtx::new(16);
        let one_hot = ProbRow {
            entries: vec![FixedPoint::ZERO, ctx.one()],
        };
        assert_eq!(attention_dilution(&ctx, &one_hot), 0.0);
        assert!(head_saturation(&ctx, &one_hot));
        let uniform = ProbRow {
            entries: vec![ctx.from_f64(0.25); 4],
        };
        assert!((attention_dilution(&ctx, &uniform) - 0.75).abs() < 1e-9);
        assert!(!head_saturation(&ctx, &uniform));
        let uniform8 = ProbRow {
            entries: vec![ctx.from_f64(0.125); 8],
        };
        assert!((attention_dilution(&ctx, &uniform8) - 0.875).abs() < 1e-9);
    }

    #[test]
    fn prob_rows_parse_back() {
        let mut tape = Tape::new(6, crate::tape::Alphabet::ProbabilityCells);
        let cells = [
            Symbol::Delim,
            Symbol::Prob(10),
            Symbol::Prob(20),
            Symbol::Delim,
            Symbol::Prob(30),
        ];
        for (i, s) in cells.iter().enumerate() {
            tape.write_at(i, *s).unwrap();
        }
        let rows = prob_rows(&tape);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].entries.len(), 2);
        assert_eq!(rows[1].entries[0].raw, 30);
    }
}
