//! A deterministic multi-tape machine that runs the whole LLM inference
//! pipeline — tokenise, forward, select, emit, detokenise — as explicit
//! tape operations, together with the algorithmic extensions (character
//! counting, a dependency stack) and diagnostics for localising wrong
//! answers to a pipeline stage.

pub mod decode;
pub mod diagnostics;
pub mod extensions;
pub mod forward;
pub mod machine;
pub mod tape;
pub mod trace;

pub use decode::{beam_step, run_beam, select_greedy, select_sample, BeamState, RandomTape};
pub use diagnostics::{
    attention_dilution, boundary_exposure, context_violation_report, head_saturation,
    localise_failure, prob_rows, DiagnosticTask, Evidence, FailureReport, Stage,
};
pub use extensions::{
    bounded_window_baseline, count_letter, emit_count, internal_detok, locate_span,
    recognise_centre_embedding, recognise_token_ids, CountTask, DependencyStack,
    RecogniserOutcome,
};
pub use forward::{forward_all, forward_position, AttnRow, KvCache};
pub use machine::{
    Configuration, ControlState, DecodeMode, Machine, MachineOptions, Phase, RandomSource,
    RunOutcome, RunStatus, StepError,
};
pub use tape::{
    encode_token_id, read_all_token_ids, read_token_id, write_token_id, Alphabet, Symbol, Tape,
};
pub use trace::{export_trace, import_trace, validate_trace, Fidelity, TapeOp, TraceEvent};
