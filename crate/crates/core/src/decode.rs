//! Selection strategies: greedy argmax, inverse-CDF sampling from a
//! randomness tape, and beam search.
//!
//! Sampling reads `width` bits from the randomness tape, most significant
//! first, forming an integer u in [0, 2^width), and picks the smallest k
//! whose cumulative probability (times 2^width) exceeds u; the final
//! cumulative value is treated as exactly one, so a well-formed row always
//! selects. Beam search scores candidates by cumulative base-2 log
//! probability and orders ties by parent beam index, then token id; a beam
//! that emits `<eos>` freezes but keeps its slot.

use serde::{Deserialize, Serialize};
use tapeline_model::numerics::{FxpCtx, ProbRow};
use tapeline_model::rng::SplitMix64;
use tapeline_model::spec::ModelSpec;

use crate::forward::{forward_all, ForwardError};

/// A stream of random bits consumed most significant bit first: either
/// generated from a seed or replayed from an explicit bit vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RandomTape {
    Seeded {
        rng: SplitMix64,
        /// Remaining bits of the last generated word, left-aligned.
        buffer: u64,
        available: u32,
    },
    Fixed {
        /// Bit values (0/1), consumed front to back.
        bits: Vec<u8>,
        cursor: usize,
    },
}

impl RandomTape {
    pub fn seeded(seed: u64) -> RandomTape {
        RandomTape::Seeded {
            rng: SplitMix64::new(seed),
            buffer: 0,
            available: 0,
        }
    }

    pub fn from_bits(bits: Vec<u8>) -> RandomTape {
        assert!(bits.iter().all(|b| *b <= 1), "bits must be 0 or 1");
        RandomTape::Fixed { bits, cursor: 0 }
    }

    /// Parse a tape from text of `0`/`1` characters (whitespace ignored).
    pub fn from_text(text: &str) -> Option<RandomTape> {
        let mut bits = Vec::new();
        for c in text.chars() {
            match c {
                '0' => bits.push(0),
                '1' => bits.push(1),
                c if c.is_whitespace() => {}
                _ => return None,
            }
        }
        Some(RandomTape::from_bits(bits))
    }

    fn next_bit(&mut self) -> Option<u8> {
        match self {
            RandomTape::Seeded {
                rng,
                buffer,
                available,
            } => {
                if *available == 0 {
                    *buffer = rng.next_u64();
                    *available = 64;
                }
                let bit = (*buffer >> 63) as u8;
                *buffer <<= 1;
                *available -= 1;
                Some(bit)
            }
            RandomTape::Fixed { bits, cursor } => {
                let bit = *bits.get(*cursor)?;
                *cursor += 1;
                Some(bit)
            }
        }
    }

    /// The next `width` bits as an integer, most significant bit first.
    /// None when a fixed tape runs out.
    pub fn next_bits(&mut self, width: u32) -> Option<u64> {
        assert!(width >= 1 && width <= 64);
        let mut u = 0u64;
        for _ in 0..width {
            u = (u << 1) | self.next_bit()? as u64;
        }
        Some(u)
    }
}

/// Greedy selection: argmax with ties resolved to the lowest token id.
pub fn select_greedy(row: &ProbRow) -> Option<u32> {
    row.argmax().map(|k| k as u32)
}

/// Inverse-CDF selection: the smallest k with cumsum(p[0..=k]) * 2^width > u.
/// The final cumulative value is forced to one, so the last nonzero entry
/// catches any rounding shortfall.
pub fn select_sample(ctx: &FxpCtx, row: &ProbRow, u: u64, width: u32) -> Option<u32> {
    let one = ctx.one().raw as i64;
    let mut cum: i64 = 0;
    let mut last_nonzero = None;
    for (k, p) in row.entries.iter().enumerate() {
        if p.raw > 0 {
            last_nonzero = Some(k as u32);
        }
        cum += p.raw.max(0) as i64;
        let effective = if k + 1 == row.entries.len() { one } else { cum };
        // cum * 2^width > u, both sides scaled by the fixed-point unit.
        if (effective as u128) << width > u as u128 * one as u128 {
            return Some(k as u32).filter(|_| p.raw > 0).or(last_nonzero);
        }
    }
    last_nonzero
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeamState {
    pub ids: Vec<u32>,
    /// Raw fixed-point cumulative log2 probability.
    pub score: i64,
    pub alive: bool,
}

/// One beam expansion: build every candidate (frozen beams contribute
/// themselves), order by score descending / parent ascending / token
/// ascending, keep the best `width`, and extend.
pub fn beam_step(
    ctx: &FxpCtx,
    beams: &[BeamState],
    rows: &[Option<ProbRow>],
    eos: u32,
    width: usize,
) -> Vec<BeamState> {
    let mut candidates: Vec<(i64, usize, u32)> = Vec::new();
    for (parent, beam) in beams.iter().enumerate() {
        if !beam.alive {
            candidates.push((beam.score, parent, eos));
            continue;
        }
        let row = rows[parent].as_ref().expect("alive beam needs a row");
        for (tok, p) in row.entries.iter().enumerate() {
            if p.raw <= 0 {
                continue;
            }
            let lp = ctx.log2(*p).expect("positive probability");
            candidates.push((beam.score + lp.raw as i64, parent, tok as u32));
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    candidates.truncate(width);
    candidates
        .into_iter()
        .map(|(score, parent, tok)| {
            let src = &beams[parent];
            if !src.alive {
                src.clone()
            } else {
                let mut ids = src.ids.clone();
                ids.push(tok);
                BeamState {
                    ids,
                    score,
                    alive: tok != eos,
                }
            }
        })
        .collect()
}

/// Beam-search decode driver over the cached forward pass. Returns the
/// generated suffix (including the final `<eos>` if reached) of the best
/// frozen beam, or of the best beam overall when the budget runs out.
pub fn run_beam(
    ctx: &FxpCtx,
    spec: &ModelSpec,
    prompt: &[u32],
    eos: u32,
    width: usize,
    max_tokens: usize,
) -> Result<Vec<u32>, ForwardError> {
    assert!(width >= 1);
    let mut beams = vec![BeamState {
        ids: prompt.to_vec(),
        score: 0,
        alive: true,
    }];
    for _ in 0..max_tokens {
        if beams.iter().all(|b| !b.alive) {
            break;
        }
        let mut rows = Vec::with_capacity(beams.len());
        for beam in &beams {
            if beam.alive {
                let logits = forward_all(ctx, spec, &beam.ids)?;
                rows.push(Some(ctx.softmax(logits.last().unwrap(), ctx.one())));
            } else {
                rows.push(None);
            }
        }
        beams = beam_step(ctx, &beams, &rows, eos, width);
    }
    let best = beams
        .iter()
        .find(|b| !b.alive)
        .or_else(|| beams.first())
        .expect("at least one beam");
    Ok(best.ids[prompt.len()..].to_vec())
}
