//! The seven-tape machine.
//!
//! Tape layout (1-based, as reported in traces):
//!
//! 1. input characters (read during tokenisation)
//! 2. token ids, `#`-delimited binary, prompt then generated tokens
//! 3. vocabulary inventory (read-only)
//! 4. model parameters (read-only)
//! 5. workspace: cached keys/values per position, plus counting scratch
//! 6. logit/probability rows, one `#`-delimited row per processed position
//! 7. output characters
//!
//! Control states are a phase plus a sub-state. The tokenisation,
//! selection, emission and detokenisation phases (and the extension
//! sub-states) move one cell and write at most one cell per step; the
//! forward phase writes a whole position's worth of cells in one macro
//! step. Reaching `<eos>` in the emission phase moves to the halting state.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tapeline_model::numerics::FxpCtx;
use tapeline_model::spec::ModelSpec;
use tapeline_model::vocab::{tokenise, MergeRule, Vocabulary};

use crate::decode::RandomTape;
use crate::extensions::{count_step, CountTask};
use crate::forward::{context_window_check, forward_position, AttnRow, ForwardError, KvCache};
use crate::tape::{
    encode_token_id, read_all_token_ids, Alphabet, Symbol, Tape, TapeError,
};
use crate::trace::{Fidelity, TapeOp, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Init,
    Tok,
    Fwd,
    Select,
    Emit,
    Detok,
    Halt,
}

/// Sub-states of the tokenisation phase.
pub const TOK_SCAN: u32 = 0;
pub const TOK_WRITE: u32 = 1;
/// Sub-states of the selection phase.
pub const SELECT_SCAN: u32 = 0;
pub const SELECT_MAX: u32 = 1;
/// Sub-states of the emission phase.
pub const EMIT_WRITE: u32 = 0;
pub const EMIT_DECIDE: u32 = 1;

/// Forward-phase sub-states at and above this value belong to extension
/// subroutines rather than to a sequence position.
pub const EXT_BASE: u32 = 1 << 24;
pub const EXT_LOCATE_REWIND: u32 = EXT_BASE;
pub const EXT_LOCATE_SCAN: u32 = EXT_BASE + 1;
pub const EXT_DETOK_INTERNAL: u32 = EXT_BASE + 2;
pub const EXT_COUNT_REWIND: u32 = EXT_BASE + 3;
pub const EXT_COUNT_SCAN: u32 = EXT_BASE + 4;
pub const EXT_EMIT_COUNT: u32 = EXT_BASE + 5;
/// Stack-recogniser states (used by the standalone recogniser harness).
pub const EXT_PUSH: u32 = EXT_BASE + 16;
pub const EXT_POP: u32 = EXT_BASE + 17;
pub const EXT_CHECK: u32 = EXT_BASE + 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlState {
    pub phase: Phase,
    pub sub: u32,
}

impl ControlState {
    pub fn initial() -> ControlState {
        ControlState {
            phase: Phase::Init,
            sub: 0,
        }
    }

    pub fn halt() -> ControlState {
        ControlState {
            phase: Phase::Halt,
            sub: 0,
        }
    }

    fn at(phase: Phase, sub: u32) -> ControlState {
        ControlState { phase, sub }
    }

    /// Human-readable state name, as used in trace annotations.
    pub fn label(&self) -> String {
        match (self.phase, self.sub) {
            (Phase::Init, _) => "q_0".into(),
            (Phase::Halt, _) => "q_halt".into(),
            (Phase::Tok, TOK_SCAN) => "q_tok_scan".into(),
            (Phase::Tok, _) => "q_tok_write".into(),
            (Phase::Fwd, s) if s < EXT_BASE => format!("q_fwd_{s}"),
            (Phase::Fwd, EXT_LOCATE_REWIND | EXT_LOCATE_SCAN) => "q_locate".into(),
            (Phase::Fwd, EXT_DETOK_INTERNAL) => "q_detok_internal".into(),
            (Phase::Fwd, EXT_COUNT_REWIND | EXT_COUNT_SCAN) => "q_count".into(),
            (Phase::Fwd, EXT_EMIT_COUNT) => "q_emit_count".into(),
            (Phase::Fwd, EXT_PUSH) => "q_push".into(),
            (Phase::Fwd, EXT_POP) => "q_pop".into(),
            (Phase::Fwd, EXT_CHECK) => "q_check".into(),
            (Phase::Fwd, s) => format!("q_fwd_ext_{}", s - EXT_BASE),
            (Phase::Select, SELECT_SCAN) => "q_select_scan".into(),
            (Phase::Select, _) => "q_select_max".into(),
            (Phase::Emit, EMIT_WRITE) => "q_emit_write".into(),
            (Phase::Emit, _) => "q_emit_decide".into(),
            (Phase::Detok, _) => "q_detok".into(),
        }
    }
}

/// Tape indices into [`Tapes::get`] (0-based; trace records are 1-based).
pub const T_IN: usize = 0;
pub const T_TOK: usize = 1;
pub const T_VOCAB: usize = 2;
pub const T_PARAM: usize = 3;
pub const T_WORK: usize = 4;
pub const T_PROB: usize = 5;
pub const T_OUT: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tapes {
    pub input: Tape,
    pub tokens: Tape,
    pub vocab: Arc<Tape>,
    pub params: Arc<Tape>,
    pub work: Tape,
    pub probs: Tape,
    pub output: Tape,
}

impl Tapes {
    pub fn get(&self, i: usize) -> &Tape {
        match i {
            T_IN => &self.input,
            T_TOK => &self.tokens,
            T_VOCAB => &self.vocab,
            T_PARAM => &self.params,
            T_WORK => &self.work,
            T_PROB => &self.probs,
            T_OUT => &self.output,
            _ => panic!("no tape {i}"),
        }
    }

    fn get_mut(&mut self, i: usize) -> &mut Tape {
        match i {
            T_IN => &mut self.input,
            T_TOK => &mut self.tokens,
            T_WORK => &mut self.work,
            T_PROB => &mut self.probs,
            T_OUT => &mut self.output,
            T_VOCAB | T_PARAM => panic!("tape {} is read-only", i + 1),
            _ => panic!("no tape {i}"),
        }
    }
}

/// Scratch registers of the finite control. These model the finite-state
/// bookkeeping a textbook construction would fold into the state set; they
/// are bounded per phase and never hold unbounded tape content beyond the
/// queues currently being drained cell by cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Registers {
    /// Token-tape cells waiting to be written (tokenisation and emission).
    pub write_queue: VecDeque<Symbol>,
    /// Output bytes waiting to be written (detokenisation).
    pub detok_queue: VecDeque<u8>,
    /// Next row entry to examine during selection.
    pub scan_cursor: u32,
    /// Best (raw probability, token id) seen so far (greedy).
    pub best: Option<(i32, u32)>,
    /// Running cumulative raw probability (sampling).
    pub cum: i64,
    pub last_nonzero: Option<u32>,
    /// The drawn threshold for the current sampling step.
    pub draw: Option<u64>,
    pub selected: Option<u32>,
    /// Token ids queued by a subroutine, emitted ahead of model selection.
    pub forced: VecDeque<u32>,
    pub tokens_emitted: u32,
    pub rand: Option<RandomTape>,
    pub count: CountRegs,
}

/// Counting-subroutine bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CountRegs {
    pub done: bool,
    /// Token index range of the located word on the token tape.
    pub span: Option<(usize, usize)>,
    /// Bytes of the located span, drained onto the workspace tape.
    pub queue: VecDeque<u8>,
    /// First workspace cell of the scratch character region.
    pub chars_start: Option<usize>,
    pub chars_len: usize,
    pub tally: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub state: ControlState,
    pub step_count: u64,
    pub tapes: Tapes,
    pub regs: Registers,
    /// Structured mirror of the key/value cells on the workspace tape.
    pub cache: KvCache,
    /// Attention rows recorded by the forward phase, for diagnostics.
    pub attention: Vec<AttnRow>,
}

impl Configuration {
    /// The text currently on the output tape.
    pub fn output_text(&self) -> String {
        String::from_utf8_lossy(&self.tapes.output.text_bytes()).into_owned()
    }

    /// All token ids on the token tape.
    pub fn token_ids(&self) -> Result<Vec<u32>, TapeError> {
        read_all_token_ids(&self.tapes.tokens)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serialises")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Sample { width: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RandomSource {
    Seeded(u64),
    Bits(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineOptions {
    pub decode: DecodeMode,
    pub random: RandomSource,
    /// Run the character-counting subroutine before free generation.
    pub counting: Option<CountTask>,
    /// Reuse cached keys/values (true) or recompute every prefix position
    /// each forward step (false). Both produce bit-identical configurations.
    pub use_cache: bool,
}

impl Default for MachineOptions {
    fn default() -> Self {
        MachineOptions {
            decode: DecodeMode::Greedy,
            random: RandomSource::Seeded(0),
            counting: None,
            use_cache: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MachineError {
    #[error("vocabulary id bound {vocab} does not match model vocab size {spec}")]
    VocabSpecMismatch { vocab: u32, spec: usize },
    #[error(transparent)]
    Spec(#[from] tapeline_model::spec::SpecError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, thiserror::Error)]
pub enum StepError {
    #[error("machine already halted")]
    Halted,
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error("position {position} outside context window of {l_max}")]
    ContextViolation { position: usize, l_max: usize },
    #[error("input tape is not valid UTF-8")]
    BadInput,
    #[error("token id {id} has no vocabulary entry")]
    UnknownTokenId { id: u32 },
    #[error("counted word {word:?} does not align with a token span")]
    WordNotFound { word: String },
    #[error("randomness tape exhausted")]
    RandomExhausted,
    #[error("expected a probability cell on tape 6 at cell {cell}")]
    BadProbCell { cell: usize },
    #[error("probability row is all zero")]
    DegenerateRow,
}

pub struct Machine {
    pub vocab: Vocabulary,
    pub rules: Vec<MergeRule>,
    pub spec: ModelSpec,
    pub ctx: FxpCtx,
    pub opts: MachineOptions,
}

/// Per-step effect recorder: clones the configuration, applies writes and
/// head moves to the clone while logging them as tape operations.
pub(crate) struct Effects {
    pub(crate) next: Configuration,
    ops: Vec<TapeOp>,
}

impl Effects {
    fn new(cfg: &Configuration) -> Effects {
        let next = cfg.clone();
        let ops = (0..7)
            .map(|i| {
                let t = next.tapes.get(i);
                TapeOp {
                    index: i as u8 + 1,
                    read: t.read(),
                    head: t.head,
                    writes: Vec::new(),
                    head_delta: 0,
                }
            })
            .collect();
        Effects { next, ops }
    }

    /// Write at the tape's current head position.
    pub(crate) fn write_head(&mut self, i: usize, sym: Symbol) -> Result<(), TapeError> {
        let tape = self.next.tapes.get_mut(i);
        let pos = tape.head;
        tape.write_at(pos, sym)?;
        self.ops[i].writes.push((pos, sym));
        Ok(())
    }

    /// Bulk write at an explicit cell (macro steps only).
    pub(crate) fn write_at(&mut self, i: usize, pos: usize, sym: Symbol) -> Result<(), TapeError> {
        self.next.tapes.get_mut(i).write_at(pos, sym)?;
        self.ops[i].writes.push((pos, sym));
        Ok(())
    }

    pub(crate) fn move_head(&mut self, i: usize, delta: i64) -> Result<(), TapeError> {
        self.next.tapes.get_mut(i).move_head(delta)?;
        self.ops[i].head_delta += delta;
        Ok(())
    }

    /// Place the head at an absolute cell (macro steps only).
    pub(crate) fn set_head(&mut self, i: usize, pos: usize) -> Result<(), TapeError> {
        let delta = pos as i64 - self.next.tapes.get(i).head as i64;
        self.move_head(i, delta)
    }

    pub(crate) fn finish(
        mut self,
        state: ControlState,
        fidelity: Fidelity,
        annotation: &str,
    ) -> (Configuration, TraceEvent) {
        let before = self.next.state;
        let step = self.next.step_count;
        self.next.state = state;
        self.next.step_count += 1;
        let event = TraceEvent {
            step,
            state_before: before,
            state_after: state,
            tapes: self.ops,
            fidelity,
            annotation: Some(annotation.to_owned()),
        };
        (self.next, event)
    }
}

impl Machine {
    pub fn new(
        vocab: Vocabulary,
        rules: Vec<MergeRule>,
        spec: ModelSpec,
        opts: MachineOptions,
    ) -> Result<Machine, MachineError> {
        spec.validate()?;
        if vocab.id_bound() as usize != spec.dims.vocab_size {
            return Err(MachineError::VocabSpecMismatch {
                vocab: vocab.id_bound(),
                spec: spec.dims.vocab_size,
            });
        }
        let ctx = FxpCtx::new(spec.dims.frac_bits);
        Ok(Machine {
            vocab,
            rules,
            spec,
            ctx,
            opts,
        })
    }

    /// The starting configuration for a prompt: input characters on tape 1,
    /// vocabulary inventory on tape 3, parameters on tape 4, everything
    /// else blank, control in the start state.
    pub fn init_configuration(&self, prompt: &str) -> Result<Configuration, TapeError> {
        let mut input = Tape::new(1, Alphabet::CharBytes);
        for (i, b) in prompt.bytes().enumerate() {
            input.write_at(i, Symbol::Byte(b))?;
        }
        let mut vocab_tape = Tape::new(3, Alphabet::VocabEntries);
        let mut pos = 0usize;
        for id in 0..self.vocab.id_bound() {
            if self.vocab.bytes_of(id).is_none() {
                continue;
            }
            for sym in encode_token_id(id) {
                vocab_tape.write_at(pos, sym)?;
                pos += 1;
            }
        }
        let mut params = Tape::new(4, Alphabet::ParameterCells);
        let mut pos = 0usize;
        let block = |tape: &mut Tape, pos: &mut usize, vals: &[i32]| -> Result<(), TapeError> {
            for &v in vals {
                tape.write_at(*pos, Symbol::Param(v))?;
                *pos += 1;
            }
            tape.write_at(*pos, Symbol::Delim)?;
            *pos += 1;
            Ok(())
        };
        block(&mut params, &mut pos, &self.spec.embed)?;
        block(&mut params, &mut pos, &self.spec.pos)?;
        for layer in &self.spec.layers {
            block(&mut params, &mut pos, &layer.wq)?;
            block(&mut params, &mut pos, &layer.wk)?;
            block(&mut params, &mut pos, &layer.wv)?;
            block(&mut params, &mut pos, &layer.wo)?;
            block(&mut params, &mut pos, &layer.w_ff_in)?;
            block(&mut params, &mut pos, &layer.w_ff_out)?;
        }
        block(&mut params, &mut pos, &self.spec.w_out)?;
        let rand = match self.opts.random {
            RandomSource::Seeded(seed) => Some(RandomTape::seeded(seed)),
            RandomSource::Bits(ref bits) => Some(RandomTape::from_bits(bits.clone())),
        };
        Ok(Configuration {
            state: ControlState::initial(),
            step_count: 0,
            tapes: Tapes {
                input,
                tokens: Tape::new(2, Alphabet::BinaryDelim),
                vocab: Arc::new(vocab_tape),
                params: Arc::new(params),
                work: Tape::new(5, Alphabet::WorkCells),
                probs: Tape::new(6, Alphabet::ProbabilityCells),
                output: Tape::new(7, Alphabet::CharBytes),
            },
            regs: Registers {
                rand,
                ..Registers::default()
            },
            cache: KvCache::empty(self.spec.dims.layers, self.spec.dims.heads),
            attention: Vec::new(),
        })
    }

    /// Apply one transition. Pure in (machine, configuration): repeated
    /// calls on equal inputs yield equal outputs.
    pub fn step(&self, cfg: &Configuration) -> Result<(Configuration, TraceEvent), StepError> {
        let fx = Effects::new(cfg);
        match cfg.state.phase {
            Phase::Halt => Err(StepError::Halted),
            Phase::Init => Ok(fx.finish(
                ControlState::at(Phase::Tok, TOK_SCAN),
                Fidelity::Micro,
                "q_0",
            )),
            Phase::Tok => self.step_tok(cfg, fx),
            Phase::Fwd if cfg.state.sub >= EXT_BASE => count_step(self, cfg, fx),
            Phase::Fwd => self.step_fwd(cfg, fx),
            Phase::Select => self.step_select(cfg, fx),
            Phase::Emit => self.step_emit(cfg, fx),
            Phase::Detok => self.step_detok(cfg, fx),
        }
    }

    fn step_tok(
        &self,
        cfg: &Configuration,
        mut fx: Effects,
    ) -> Result<(Configuration, TraceEvent), StepError> {
        if cfg.state.sub == TOK_SCAN {
            if cfg.tapes.input.read() != Symbol::Blank {
                fx.move_head(T_IN, 1)?;
                return Ok(fx.finish(cfg.state, Fidelity::Micro, "q_tok_scan"));
            }
            // End of input: tokenise and queue the delimited binary cells.
            let text = String::from_utf8(cfg.tapes.input.text_bytes())
                .map_err(|_| StepError::BadInput)?;
            let mut ids = vec![self.vocab.specials.bos];
            ids.extend(tokenise(&text, &self.vocab, &self.rules).ids);
            fx.next.regs.write_queue = ids.iter().flat_map(|&id| encode_token_id(id)).collect();
            return Ok(fx.finish(
                ControlState::at(Phase::Tok, TOK_WRITE),
                Fidelity::Micro,
                "q_tok_scan",
            ));
        }
        let sym = fx
            .next
            .regs
            .write_queue
            .pop_front()
            .expect("tokeniser write state implies a queued cell");
        fx.write_head(T_TOK, sym)?;
        fx.move_head(T_TOK, 1)?;
        let next = if fx.next.regs.write_queue.is_empty() {
            ControlState::at(Phase::Fwd, 0)
        } else {
            ControlState::at(Phase::Tok, TOK_WRITE)
        };
        Ok(fx.finish(next, Fidelity::Micro, "q_tok_write"))
    }

    fn step_fwd(
        &self,
        cfg: &Configuration,
        mut fx: Effects,
    ) -> Result<(Configuration, TraceEvent), StepError> {
        let t = cfg.state.sub as usize;
        let l_max = self.spec.dims.l_max;
        if !context_window_check(t, l_max) {
            return Err(StepError::ContextViolation { position: t, l_max });
        }
        let ids = read_all_token_ids(&cfg.tapes.tokens)?;
        let out = if self.opts.use_cache {
            forward_position(&self.ctx, &self.spec, &ids, t, &mut fx.next.cache)?
        } else {
            let mut cache =
                KvCache::empty(self.spec.dims.layers, self.spec.dims.heads);
            let mut out = None;
            for i in 0..=t {
                out = Some(forward_position(&self.ctx, &self.spec, &ids, i, &mut cache)?);
            }
            fx.next.cache = cache;
            out.expect("at least one position")
        };
        // Workspace tape: `#` then this position's key/value cells; the head
        // parks after the block.
        let mut pos = fx.next.tapes.work.written_len();
        fx.write_at(T_WORK, pos, Symbol::Delim)?;
        pos += 1;
        for raw in fx.next.cache.position_cells(t) {
            fx.write_at(T_WORK, pos, Symbol::Cell(raw))?;
            pos += 1;
        }
        fx.set_head(T_WORK, pos)?;
        // Probability tape: `#` then the softmaxed row; the head parks on
        // the row's first entry, ready for the selection scan.
        let row = self.ctx.softmax(&out.logits, self.ctx.one());
        let mut pos = fx.next.tapes.probs.written_len();
        let row_start = pos;
        fx.write_at(T_PROB, pos, Symbol::Delim)?;
        pos += 1;
        for p in &row.entries {
            fx.write_at(T_PROB, pos, Symbol::Prob(p.raw))?;
            pos += 1;
        }
        fx.set_head(T_PROB, row_start + 1)?;
        fx.next.attention.extend(out.attention);
        let label = format!("q_fwd_{t}");
        let next = if t + 1 < ids.len() {
            ControlState::at(Phase::Fwd, t as u32 + 1)
        } else if self.opts.counting.is_some() && !cfg.regs.count.done {
            ControlState::at(Phase::Fwd, EXT_LOCATE_REWIND)
        } else {
            self.reset_selection(&mut fx);
            ControlState::at(Phase::Select, SELECT_SCAN)
        };
        Ok(fx.finish(next, Fidelity::Macro, &label))
    }

    pub(crate) fn reset_selection(&self, fx: &mut Effects) {
        let regs = &mut fx.next.regs;
        regs.scan_cursor = 0;
        regs.best = None;
        regs.cum = 0;
        regs.last_nonzero = None;
        regs.draw = None;
        regs.selected = None;
    }

    fn step_select(
        &self,
        cfg: &Configuration,
        mut fx: Effects,
    ) -> Result<(Configuration, TraceEvent), StepError> {
        if cfg.state.sub == SELECT_MAX {
            let id = match cfg.regs.selected.or(cfg.regs.best.map(|(_, id)| id)) {
                Some(id) => id,
                None => return Err(StepError::DegenerateRow),
            };
            fx.next.regs.selected = Some(id);
            fx.next.regs.write_queue = encode_token_id(id).into_iter().collect();
            return Ok(fx.finish(
                ControlState::at(Phase::Emit, EMIT_WRITE),
                Fidelity::Micro,
                "q_select_max",
            ));
        }
        if let Some(&id) = cfg.regs.forced.front() {
            fx.next.regs.forced.pop_front();
            fx.next.regs.selected = Some(id);
            return Ok(fx.finish(
                ControlState::at(Phase::Select, SELECT_MAX),
                Fidelity::Micro,
                "q_select_forced",
            ));
        }
        let width = match self.opts.decode {
            DecodeMode::Greedy => None,
            DecodeMode::Sample { width } => Some(width),
        };
        if let Some(width) = width {
            if cfg.regs.draw.is_none() {
                let rand = fx.next.regs.rand.as_mut().expect("sampling needs a tape");
                fx.next.regs.draw =
                    Some(rand.next_bits(width).ok_or(StepError::RandomExhausted)?);
            }
        }
        let head = cfg.tapes.probs.head;
        let p = match cfg.tapes.probs.read() {
            Symbol::Prob(p) => p,
            _ => return Err(StepError::BadProbCell { cell: head }),
        };
        let k = cfg.regs.scan_cursor;
        let vocab_size = self.spec.dims.vocab_size as u32;
        let regs = &mut fx.next.regs;
        let mut found = false;
        match width {
            None => {
                if regs.best.map_or(true, |(bp, _)| p > bp) {
                    regs.best = Some((p, k));
                }
            }
            Some(width) => {
                if p > 0 {
                    regs.last_nonzero = Some(k);
                }
                regs.cum += p.max(0) as i64;
                let one = self.ctx.one().raw as i64;
                let effective = if k + 1 == vocab_size { one } else { regs.cum };
                let u = regs.draw.expect("drawn above");
                if (effective as u128) << width > u as u128 * one as u128 {
                    regs.selected = if p > 0 {
                        Some(k)
                    } else {
                        Some(regs.last_nonzero.ok_or(StepError::DegenerateRow)?)
                    };
                    found = true;
                }
            }
        }
        regs.scan_cursor = k + 1;
        fx.move_head(T_PROB, 1)?;
        let next = if found || k + 1 == vocab_size {
            ControlState::at(Phase::Select, SELECT_MAX)
        } else {
            ControlState::at(Phase::Select, SELECT_SCAN)
        };
        Ok(fx.finish(next, Fidelity::Micro, "q_select_scan"))
    }

    fn step_emit(
        &self,
        cfg: &Configuration,
        mut fx: Effects,
    ) -> Result<(Configuration, TraceEvent), StepError> {
        if cfg.state.sub == EMIT_WRITE {
            let sym = fx
                .next
                .regs
                .write_queue
                .pop_front()
                .expect("emit write state implies a queued cell");
            fx.write_head(T_TOK, sym)?;
            fx.move_head(T_TOK, 1)?;
            let next = if fx.next.regs.write_queue.is_empty() {
                ControlState::at(Phase::Emit, EMIT_DECIDE)
            } else {
                ControlState::at(Phase::Emit, EMIT_WRITE)
            };
            return Ok(fx.finish(next, Fidelity::Micro, "q_emit_write"));
        }
        let id = cfg.regs.selected.expect("emitted token was selected");
        fx.next.regs.tokens_emitted += 1;
        if id == self.vocab.specials.eos {
            return Ok(fx.finish(ControlState::halt(), Fidelity::Micro, "q_emit_decide"));
        }
        let bytes = if self.vocab.is_special(id) {
            Vec::new()
        } else {
            self.vocab
                .bytes_of(id)
                .ok_or(StepError::UnknownTokenId { id })?
                .to_vec()
        };
        fx.next.regs.detok_queue = bytes.into_iter().collect();
        Ok(fx.finish(
            ControlState::at(Phase::Detok, 0),
            Fidelity::Micro,
            "q_emit_decide",
        ))
    }

    fn step_detok(
        &self,
        cfg: &Configuration,
        mut fx: Effects,
    ) -> Result<(Configuration, TraceEvent), StepError> {
        let next_position = || -> Result<u32, StepError> {
            let ids = read_all_token_ids(&cfg.tapes.tokens)?;
            Ok(ids.len() as u32 - 1)
        };
        if cfg.regs.detok_queue.is_empty() {
            let next = ControlState::at(Phase::Fwd, next_position()?);
            return Ok(fx.finish(next, Fidelity::Micro, "q_detok"));
        }
        let b = fx.next.regs.detok_queue.pop_front().expect("checked");
        fx.write_head(T_OUT, Symbol::Byte(b))?;
        fx.move_head(T_OUT, 1)?;
        let next = if fx.next.regs.detok_queue.is_empty() {
            ControlState::at(Phase::Fwd, next_position()?)
        } else {
            ControlState::at(Phase::Detok, 0)
        };
        Ok(fx.finish(next, Fidelity::Micro, "q_detok"))
    }

    /// Run until the machine halts or a budget is hit.
    pub fn run(
        &self,
        cfg: Configuration,
        max_steps: u64,
        max_tokens: u32,
    ) -> Result<RunOutcome, RunError> {
        assert!(max_tokens >= 1, "token budget must be positive");
        let mut cfg = cfg;
        let mut trace = Vec::new();
        loop {
            if cfg.state.phase == Phase::Halt {
                return Ok(RunOutcome {
                    status: RunStatus::Halted,
                    config: cfg,
                    trace,
                });
            }
            if cfg.state.phase == Phase::Fwd
                && cfg.state.sub < EXT_BASE
                && cfg.regs.tokens_emitted >= max_tokens
            {
                return Ok(RunOutcome {
                    status: RunStatus::TokenLimit,
                    config: cfg,
                    trace,
                });
            }
            if cfg.step_count >= max_steps {
                return Ok(RunOutcome {
                    status: RunStatus::StepLimit,
                    config: cfg,
                    trace,
                });
            }
            match self.step(&cfg) {
                Ok((next, event)) => {
                    trace.push(event);
                    cfg = next;
                }
                Err(StepError::ContextViolation { position, l_max }) => {
                    return Ok(RunOutcome {
                        status: RunStatus::ContextViolation { position, l_max },
                        config: cfg,
                        trace,
                    });
                }
                Err(error) => return Err(RunError { error, trace }),
            }
        }
    }

    /// Tokenise and run in one call.
    pub fn run_text(
        &self,
        prompt: &str,
        max_steps: u64,
        max_tokens: u32,
    ) -> Result<RunOutcome, RunError> {
        let cfg = self.init_configuration(prompt).map_err(|e| RunError {
            error: StepError::Tape(e),
            trace: Vec::new(),
        })?;
        self.run(cfg, max_steps, max_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Halted,
    StepLimit,
    TokenLimit,
    ContextViolation { position: usize, l_max: usize },
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub config: Configuration,
    pub trace: Vec<TraceEvent>,
}

impl RunOutcome {
    /// Token ids generated after the prompt (the prompt is everything the
    /// tokeniser wrote before the first emission).
    pub fn generated_ids(&self) -> Result<Vec<u32>, TapeError> {
        let ids = read_all_token_ids(&self.config.tapes.tokens)?;
        let emitted = self.config.regs.tokens_emitted as usize;
        Ok(ids[ids.len() - emitted..].to_vec())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunError {
    pub error: StepError,
    /// Partial trace up to the failing step.
    pub trace: Vec<TraceEvent>,
}
