//! Trace events, legality checking, and JSONL import/export.
//!
//! Every step of the machine produces one [`TraceEvent`] recording, for each
//! of the seven tapes, the symbol read, the cells written, and the head
//! movement. Events carry a fidelity tag: `micro` events obey the strict
//! one-write/one-move discipline of a textbook transition; `macro` events
//! (the forward phase only) may write whole blocks at once. The read-only
//! tapes (3: vocabulary, 4: parameters) must never be written at either
//! fidelity.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::machine::{ControlState, Phase};
use crate::tape::Symbol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    Micro,
    Macro,
}

/// What one step did to one tape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeOp {
    /// 1-based tape number.
    pub index: u8,
    /// Symbol under the head before the step.
    pub read: Symbol,
    /// Head position before the step.
    pub head: usize,
    /// Cells written, as (cell, symbol) pairs. Empty when the tape was
    /// only read. Micro events write at most one cell, at the head.
    #[serde(rename = "write")]
    pub writes: Vec<(usize, Symbol)>,
    /// Signed head movement; -1/0/+1 for micro events.
    #[serde(rename = "move")]
    pub head_delta: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub state_before: ControlState,
    pub state_after: ControlState,
    pub tapes: Vec<TapeOp>,
    pub fidelity: Fidelity,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub annotation: Option<String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("step {step}: expected step number {expected}")]
    StepNumbering { step: u64, expected: u64 },
    #[error("step {step}: state_before {found} does not chain from {expected}")]
    BrokenChain {
        step: u64,
        found: String,
        expected: String,
    },
    #[error("step {step}: illegal phase transition {from} -> {to}")]
    IllegalTransition {
        step: u64,
        from: String,
        to: String,
    },
    #[error("step {step}: tape {tape} is read-only but was written")]
    ReadOnlyWrite { step: u64, tape: u8 },
    #[error("step {step}: micro event writes {writes} cells on tape {tape}")]
    MicroMultiWrite { step: u64, tape: u8, writes: usize },
    #[error("step {step}: micro event moves tape {tape} head by {delta}")]
    MicroLongMove { step: u64, tape: u8, delta: i64 },
    #[error("step {step}: micro event writes tape {tape} away from its head")]
    MicroOffHeadWrite { step: u64, tape: u8 },
    #[error("step {step}: macro fidelity outside the forward phase")]
    MacroOutsideForward { step: u64 },
    #[error("step {step}: event after the halting state")]
    StepAfterHalt { step: u64 },
    #[error("step {step}: event carries {count} tape records instead of 7")]
    WrongTapeCount { step: u64, count: usize },
}

fn transition_allowed(from: &ControlState, to: &ControlState) -> bool {
    use Phase::*;
    matches!(
        (from.phase, to.phase),
        (Init, Tok)
            | (Tok, Tok)
            | (Tok, Fwd)
            | (Fwd, Fwd)
            | (Fwd, Select)
            | (Select, Select)
            | (Select, Emit)
            | (Emit, Emit)
            | (Emit, Detok)
            | (Emit, Halt)
            | (Detok, Detok)
            | (Detok, Fwd)
    )
}

/// Check a trace for structural legality: consecutive step numbers, state
/// chaining, the phase-transition graph, read-only tapes untouched, micro
/// discipline on micro events, and nothing after the halt.
pub fn validate_trace(events: &[TraceEvent]) -> Result<(), TraceError> {
    let mut expected_step: Option<u64> = None;
    let mut prev_after: Option<&ControlState> = None;
    for ev in events {
        if let Some(exp) = expected_step {
            if ev.step != exp {
                return Err(TraceError::StepNumbering {
                    step: ev.step,
                    expected: exp,
                });
            }
        }
        expected_step = Some(ev.step + 1);
        if let Some(prev) = prev_after {
            if prev.phase == Phase::Halt {
                return Err(TraceError::StepAfterHalt { step: ev.step });
            }
            if *prev != ev.state_before {
                return Err(TraceError::BrokenChain {
                    step: ev.step,
                    found: ev.state_before.label(),
                    expected: prev.label(),
                });
            }
        }
        if !transition_allowed(&ev.state_before, &ev.state_after) {
            return Err(TraceError::IllegalTransition {
                step: ev.step,
                from: ev.state_before.label(),
                to: ev.state_after.label(),
            });
        }
        if ev.tapes.len() != 7 {
            return Err(TraceError::WrongTapeCount {
                step: ev.step,
                count: ev.tapes.len(),
            });
        }
        for op in &ev.tapes {
            if (op.index == 3 || op.index == 4) && !op.writes.is_empty() {
                return Err(TraceError::ReadOnlyWrite {
                    step: ev.step,
                    tape: op.index,
                });
            }
            if ev.fidelity == Fidelity::Micro {
                if op.writes.len() > 1 {
                    return Err(TraceError::MicroMultiWrite {
                        step: ev.step,
                        tape: op.index,
                        writes: op.writes.len(),
                    });
                }
                if op.head_delta.abs() > 1 {
                    return Err(TraceError::MicroLongMove {
                        step: ev.step,
                        tape: op.index,
                        delta: op.head_delta,
                    });
                }
                if let Some(&(cell, _)) = op.writes.first() {
                    if cell != op.head {
                        return Err(TraceError::MicroOffHeadWrite {
                            step: ev.step,
                            tape: op.index,
                        });
                    }
                }
            }
        }
        if ev.fidelity == Fidelity::Macro && ev.state_before.phase != Phase::Fwd {
            return Err(TraceError::MacroOutsideForward { step: ev.step });
        }
        prev_after = Some(&ev.state_after);
    }
    Ok(())
}

/// Write the trace as one JSON object per line.
pub fn export_trace<W: Write>(events: &[TraceEvent], mut out: W) -> std::io::Result<()> {
    for ev in events {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a trace previously written by [`export_trace`].
pub fn import_trace<R: BufRead>(input: R) -> std::io::Result<Vec<TraceEvent>> {
    let mut events = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line)?);
    }
    Ok(events)
}
