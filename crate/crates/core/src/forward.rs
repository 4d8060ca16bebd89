//! Position-at-a-time transformer forward pass with an explicit key/value
//! cache.
//!
//! The machine's forward phase processes one position per (macro) step. The
//! cache holds every earlier position's per-layer, per-head key and value
//! vectors, mirroring the cells the machine has written to the work tape.
//! Recomputation mode re-derives those vectors from scratch instead of
//! reusing them; because the arithmetic is deterministic fixed-point and
//! the accumulation order is fixed, both modes are bit-identical.

use serde::{Deserialize, Serialize};
use tapeline_model::numerics::{FixedPoint, FxpCtx, ProbRow};
use tapeline_model::spec::ModelSpec;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ForwardError {
    #[error("token id {id} out of range for vocab size {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("cache holds {cached} positions but position {position} was requested")]
    CacheMismatch { cached: usize, position: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct HeadCache {
    pub keys: Vec<Vec<FixedPoint>>,
    pub values: Vec<Vec<FixedPoint>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCache {
    /// layers[l].heads[h] holds one key and one value vector per position.
    pub layers: Vec<LayerCache>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCache {
    pub heads: Vec<HeadCache>,
}

impl KvCache {
    pub fn empty(layers: usize, heads: usize) -> KvCache {
        KvCache {
            layers: (0..layers)
                .map(|_| LayerCache {
                    heads: vec![HeadCache::default(); heads],
                })
                .collect(),
        }
    }

    /// Number of positions cached so far.
    pub fn positions(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.heads.first())
            .map_or(0, |h| h.keys.len())
    }

    /// The raw cell values for one position, in work-tape order: for each
    /// layer, for each head, the key vector then the value vector.
    pub fn position_cells(&self, t: usize) -> Vec<i32> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for head in &layer.heads {
                out.extend(head.keys[t].iter().map(|f| f.raw));
                out.extend(head.values[t].iter().map(|f| f.raw));
            }
        }
        out
    }
}

/// Attention weights of one head at one query position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnRow {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub row: ProbRow,
}

pub struct PositionOutput {
    pub logits: Vec<FixedPoint>,
    pub attention: Vec<AttnRow>,
}

/// Whether a position index is inside the model's context window.
pub fn context_window_check(position: usize, l_max: usize) -> bool {
    position < l_max
}

/// y[j] = sum_i x[i] * w[i*cols + j], accumulated in ascending i.
fn project(ctx: &FxpCtx, x: &[FixedPoint], w: &[i32], cols: usize) -> Vec<FixedPoint> {
    let mut y = vec![FixedPoint::ZERO; cols];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (j, &wij) in row.iter().enumerate() {
            y[j] = ctx.mul_acc(y[j], xi, FixedPoint::from_raw(wij));
        }
    }
    y
}

fn dot(ctx: &FxpCtx, a: &[FixedPoint], b: &[FixedPoint]) -> FixedPoint {
    let mut s = FixedPoint::ZERO;
    for (x, y) in a.iter().zip(b) {
        s = ctx.mul_acc(s, *x, *y);
    }
    s
}

/// Token embedding plus positional embedding.
pub fn embed(ctx: &FxpCtx, spec: &ModelSpec, id: u32, position: usize) -> Vec<FixedPoint> {
    spec.embed_row(id)
        .iter()
        .zip(spec.pos_row(position))
        .map(|(&e, &p)| ctx.add(FixedPoint::from_raw(e), FixedPoint::from_raw(p)))
        .collect()
}

/// Process position `t` of `ids`, extending `cache` (which must already
/// hold exactly the first `t` positions) and returning the logits plus the
/// attention rows of every head at this position.
pub fn forward_position(
    ctx: &FxpCtx,
    spec: &ModelSpec,
    ids: &[u32],
    t: usize,
    cache: &mut KvCache,
) -> Result<PositionOutput, ForwardError> {
    let d = &spec.dims;
    let id = ids[t];
    if id as usize >= d.vocab_size {
        return Err(ForwardError::BadToken {
            id,
            vocab: d.vocab_size,
        });
    }
    if cache.positions() != t {
        return Err(ForwardError::CacheMismatch {
            cached: cache.positions(),
            position: t,
        });
    }
    let d_k = d.d_k();
    let scale = ctx.inv_sqrt_int(d_k as u32);
    let mut attention = Vec::new();
    let mut x = embed(ctx, spec, id, t);
    for (l, layer) in spec.layers.iter().enumerate() {
        let mut concat = Vec::with_capacity(d.d_model);
        for h in 0..d.heads {
            let q = project(ctx, &x, spec.head_slice(&layer.wq, h), d_k);
            let k = project(ctx, &x, spec.head_slice(&layer.wk, h), d_k);
            let v = project(ctx, &x, spec.head_slice(&layer.wv, h), d_k);
            let hc = &mut cache.layers[l].heads[h];
            hc.keys.push(k);
            hc.values.push(v);
            let scores: Vec<FixedPoint> =
                hc.keys.iter().map(|ki| dot(ctx, &q, ki)).collect();
            let alpha = ctx.softmax(&scores, scale);
            let mut o = vec![FixedPoint::ZERO; d_k];
            for (i, a) in alpha.entries.iter().enumerate() {
                for (oj, vj) in o.iter_mut().zip(&hc.values[i]) {
                    *oj = ctx.mul_acc(*oj, *a, *vj);
                }
            }
            attention.push(AttnRow {
                layer: l,
                head: h,
                position: t,
                row: alpha,
            });
            concat.extend(o);
        }
        let attn = project(ctx, &concat, &layer.wo, d.d_model);
        let x1: Vec<FixedPoint> = x.iter().zip(&attn).map(|(a, b)| ctx.add(*a, *b)).collect();
        let hidden: Vec<FixedPoint> = project(ctx, &x1, &layer.w_ff_in, d.d_ff)
            .into_iter()
            .map(|v| if v.raw < 0 { FixedPoint::ZERO } else { v })
            .collect();
        let ff = project(ctx, &hidden, &layer.w_ff_out, d.d_model);
        x = x1.iter().zip(&ff).map(|(a, b)| ctx.add(*a, *b)).collect();
    }
    Ok(PositionOutput {
        logits: project(ctx, &x, &spec.w_out, d.vocab_size),
        attention,
    })
}

/// All logits for a sequence, position by position with a fresh cache.
/// Convenience wrapper used by the beam driver and tests.
pub fn forward_all(
    ctx: &FxpCtx,
    spec: &ModelSpec,
    ids: &[u32],
) -> Result<Vec<Vec<FixedPoint>>, ForwardError> {
    let mut cache = KvCache::empty(spec.dims.layers, spec.dims.heads);
    let mut out = Vec::with_capacity(ids.len());
    for t in 0..ids.len() {
        out.push(forward_position(ctx, spec, ids, t, &mut cache)?.logits);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tapeline_model::spec::SpecDims;
    use tapeline_oracle::oracle_forward;

    fn dims() -> SpecDims {
        SpecDims {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 8,
            l_max: 16,
            vocab_size: 11,
            frac_bits: 16,
        }
    }

    #[test]
    fn cached_pass_is_bit_identical_to_reference() {
        let spec = ModelSpec::generate(42, dims()).unwrap();
        let ctx = FxpCtx::new(16);
        let ids = [1u32, 4, 9, 2, 2, 7];
        let got = forward_all(&ctx, &spec, &ids).unwrap();
        let want = oracle_forward(&ids, &spec, &ctx).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn recomputing_a_prefix_reproduces_the_cache() {
        let spec = ModelSpec::generate(7, dims()).unwrap();
        let ctx = FxpCtx::new(16);
        let ids = [3u32, 1, 4, 1, 5];
        let mut incr = KvCache::empty(2, 2);
        for t in 0..ids.len() {
            forward_position(&ctx, &spec, &ids, t, &mut incr).unwrap();
        }
        let mut fresh = KvCache::empty(2, 2);
        let mut last = None;
        for t in 0..ids.len() {
            last = Some(forward_position(&ctx, &spec, &ids, t, &mut fresh).unwrap());
        }
        assert_eq!(incr, fresh);
        // And the final position's logits agree with the all-at-once pass.
        let all = forward_all(&ctx, &spec, &ids).unwrap();
        assert_eq!(last.unwrap().logits, *all.last().unwrap());
    }

    #[test]
    fn cache_mismatch_is_detected() {
        let spec = ModelSpec::generate(7, dims()).unwrap();
        let ctx = FxpCtx::new(16);
        let mut cache = KvCache::empty(2, 2);
        assert!(matches!(
            forward_position(&ctx, &spec, &[1, 2], 1, &mut cache),
            Err(ForwardError::CacheMismatch { .. })
        ));
    }

    #[test]
    fn attention_rows_are_causal() {
        let spec = ModelSpec::generate(9, dims()).unwrap();
        let ctx = FxpCtx::new(16);
        let ids = [1u32, 2, 3, 4];
        let mut cache = KvCache::empty(2, 2);
        for t in 0..ids.len() {
            let out = forward_position(&ctx, &spec, &ids, t, &mut cache).unwrap();
            for row in &out.attention {
                assert_eq!(row.row.entries.len(), t + 1);
            }
        }
    }
}
