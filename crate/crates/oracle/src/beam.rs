//! Plain list-based beam search over the array forward pass. Scoring and
//! tie rules are the fixed decode contract: cumulative base-2 log
//! probability, candidates ordered by score descending, then parent beam
//! index ascending, then token id ascending; beams that choose `<eos>`
//! freeze but keep their slot.

use crate::forward::{oracle_forward, OracleError};
use tapeline_model::numerics::FxpCtx;
use tapeline_model::spec::ModelSpec;

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<u32>,
    score: i64, // raw fixed-point cumulative log2 probability
    alive: bool,
}

/// Generated token ids (including the final `<eos>` when reached) for the
/// highest-scoring frozen beam, or the best beam overall if the budget ran
/// out before any froze.
pub fn oracle_beam(
    prompt: &[u32],
    spec: &ModelSpec,
    eos: u32,
    beam_width: usize,
    max_tokens: usize,
    ctx: &FxpCtx,
) -> Result<Vec<u32>, OracleError> {
    assert!(beam_width >= 1);
    let mut beams = vec![Beam {
        tokens: prompt.to_vec(),
        score: 0,
        alive: true,
    }];
    for _ in 0..max_tokens {
        if beams.iter().all(|b| !b.alive) {
            break;
        }
        // (score desc via negated key, parent asc, token asc)
        let mut candidates: Vec<(i64, usize, u32)> = Vec::new();
        for (parent, beam) in beams.iter().enumerate() {
            if !beam.alive {
                candidates.push((beam.score, parent, eos));
                continue;
            }
            let logits = oracle_forward(&beam.tokens, spec, ctx)?;
            let row = ctx.softmax(logits.last().unwrap(), ctx.one());
            for (tok, p) in row.entries.iter().enumerate() {
                if p.raw <= 0 {
                    continue;
                }
                let lp = ctx.log2(*p).expect("positive probability");
                candidates.push((beam.score + lp.raw as i64, parent, tok as u32));
            }
        }
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(beam_width);
        beams = candidates
            .into_iter()
            .map(|(score, parent, tok)| {
                let src = &beams[parent];
                if !src.alive {
                    src.clone()
                } else {
                    let mut tokens = src.tokens.clone();
                    tokens.push(tok);
                    Beam {
                        tokens,
                        score,
                        alive: tok != eos,
                    }
                }
            })
            .collect();
    }
    // Beams are already in candidate order; prefer the first frozen one.
    let best = beams
        .iter()
        .find(|b| !b.alive)
        .or_else(|| beams.first())
        .expect("at least one beam");
    Ok(best.tokens[prompt.len()..].to_vec())
}
