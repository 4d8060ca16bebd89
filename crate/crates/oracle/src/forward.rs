//! Direct array-based transformer forward pass over the deterministic
//! fixed-point kernel: no tapes, no KV cache, every position recomputed
//! from scratch. Serves as the bit-exact ground truth for the tape
//! pipeline, plus a float shadow of the same structure as a sanity check
//! on the kernel itself.

use tapeline_model::numerics::{FixedPoint, FxpCtx, ProbRow};
use tapeline_model::spec::ModelSpec;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("sequence length {len} exceeds context bound {l_max}")]
    TooLong { len: usize, l_max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    BadToken { id: u32, vocab: usize },
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

fn embed(ctx: &FxpCtx, spec: &ModelSpec, id: u32, position: usize) -> Vec<FixedPoint> {
    spec.embed_row(id)
        .iter()
        .zip(spec.pos_row(position))
        .map(|(&e, &p)| ctx.add(FixedPoint::from_raw(e), FixedPoint::from_raw(p)))
        .collect()
}

/// Logits for every position of `ids`, no caching.
pub fn oracle_forward(
    ids: &[u32],
    spec: &ModelSpec,
    ctx: &FxpCtx,
) -> Result<Vec<Vec<FixedPoint>>, OracleError> {
    let d = &spec.dims;
    if ids.len() > d.l_max {
        return Err(OracleError::TooLong {
            len: ids.len(),
            l_max: d.l_max,
        });
    }
    for &id in ids {
        if id as usize >= d.vocab_size {
            return Err(OracleError::BadToken {
                id,
                vocab: d.vocab_size,
            });
        }
    }
    let d_k = d.d_k();
    let scale = ctx.inv_sqrt_int(d_k as u32);
    let mut states: Vec<Vec<FixedPoint>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| embed(ctx, spec, id, t))
        .collect();
    for layer in &spec.layers {
        // Per-position projections for the whole layer.
        let qkv: Vec<Vec<(Vec<FixedPoint>, Vec<FixedPoint>, Vec<FixedPoint>)>> = states
            .iter()
            .map(|x| {
                (0..d.heads)
                    .map(|h| {
                        (
                            project(ctx, x, spec.head_slice(&layer.wq, h), d_k),
                            project(ctx, x, spec.head_slice(&layer.wk, h), d_k),
                            project(ctx, x, spec.head_slice(&layer.wv, h), d_k),
                        )
                    })
                    .collect()
            })
            .collect();
        let mut next = Vec::with_capacity(states.len());
        for (t, x) in states.iter().enumerate() {
            let mut concat = Vec::with_capacity(d.d_model);
            for h in 0..d.heads {
                let q = &qkv[t][h].0;
                let mut scores = Vec::with_capacity(t + 1);
                for u in qkv.iter().take(t + 1) {
                    let k = &u[h].1;
                    let mut s = FixedPoint::ZERO;
                    for (a, b) in q.iter().zip(k) {
                        s = ctx.mul_acc(s, *a, *b);
                    }
                    scores.push(s);
                }
                let alpha = ctx.softmax(&scores, scale);
                let mut o = vec![FixedPoint::ZERO; d_k];
                for (i, a) in alpha.entries.iter().enumerate() {
                    let v = &qkv[i][h].2;
                    for (oj, vj) in o.iter_mut().zip(v) {
                        *oj = ctx.mul_acc(*oj, *a, *vj);
                    }
                }
                concat.extend(o);
            }
            let attn = project(ctx, &concat, &layer.wo, d.d_model);
            let x1: Vec<FixedPoint> = x.iter().zip(&attn).map(|(a, b)| ctx.add(*a, *b)).collect();
            let hidden = project(ctx, &x1, &layer.w_ff_in, d.d_ff);
            let hidden: Vec<FixedPoint> = hidden
                .into_iter()
                .map(|v| if v.raw < 0 { FixedPoint::ZERO } else { v })
                .collect();
            let ff = project(ctx, &hidden, &layer.w_ff_out, d.d_model);
            let x2: Vec<FixedPoint> = x1.iter().zip(&ff).map(|(a, b)| ctx.add(*a, *b)).collect();
            next.push(x2);
        }
        states = next;
    }
    Ok(states
        .iter()
        .map(|x| project(ctx, x, &spec.w_out, d.vocab_size))
        .collect())
}

/// Probability rows (softmax of the logits, scale 1) for every position.
pub fn oracle_prob_rows(
    ids: &[u32],
    spec: &ModelSpec,
    ctx: &FxpCtx,
) -> Result<Vec<ProbRow>, OracleError> {
    let logits = oracle_forward(ids, spec, ctx)?;
    Ok(logits.iter().map(|l| ctx.softmax(l, ctx.one())).collect())
}

/// Float shadow of the same block structure; used only to cross-check the
/// fixed-point kernel, never in the measured pipeline.
pub fn oracle_forward_f64(ids: &[u32], spec: &ModelSpec) -> Vec<Vec<f64>> {
    let d = &spec.dims;
    let unit = (1u64 << d.frac_bits) as f64;
    let w = |raw: i32| raw as f64 / unit;
    let proj = |x: &[f64], m: &[i32], cols: usize| -> Vec<f64> {
        let mut y = vec![0.0; cols];
        for (i, xi) in x.iter().enumerate() {
            for j in 0..cols {
                y[j] += xi * w(m[i * cols + j]);
            }
        }
        y
    };
    let d_k = d.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut states: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            spec.embed_row(id)
                .iter()
                .zip(spec.pos_row(t))
                .map(|(&e, &p)| w(e) + w(p))
                .collect()
        })
        .collect();
    for layer in &spec.layers {
        let qkv: Vec<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> = states
            .iter()
            .map(|x| {
                (0..d.heads)
                    .map(|h| {
                        (
                            proj(x, spec.head_slice(&layer.wq, h), d_k),
                            proj(x, spec.head_slice(&layer.wk, h), d_k),
                            proj(x, spec.head_slice(&layer.wv, h), d_k),
                        )
                    })
                    .collect()
            })
            .collect();
        let mut next = Vec::with_capacity(states.len());
        for (t, x) in states.iter().enumerate() {
            let mut concat = Vec::with_capacity(d.d_model);
            for h in 0..d.heads {
                let q = &qkv[t][h].0;
                let scores: Vec<f64> = (0..=t)
                    .map(|i| q.iter().zip(&qkv[i][h].1).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let mut o = vec![0.0; d_k];
                for (i, e) in exps.iter().enumerate() {
                    for (oj, vj) in o.iter_mut().zip(&qkv[i][h].2) {
                        *oj += e / sum * vj;
                    }
                }
                concat.extend(o);
            }
            let attn = proj(&concat, &layer.wo, d.d_model);
            let x1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let hidden: Vec<f64> = proj(&x1, &layer.w_ff_in, d.d_ff)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let ff = proj(&hidden, &layer.w_ff_out, d.d_model);
            next.push(x1.iter().zip(&ff).map(|(a, b)| a + b).collect());
        }
        states = next;
    }
    states
        .iter()
        .map(|x| proj(x, &spec.w_out, d.vocab_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tapeline_model::spec::SpecDims;

    fn small_dims() -> SpecDims {
        SpecDims {
            layers: 1,
            heads: 1,
            d_model: 4,
            d_ff: 4,
            l_max: 8,
            vocab_size: 6,
            frac_bits: 16,
        }
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let spec = ModelSpec::zeros(small_dims()).unwrap();
        let ctx = FxpCtx::new(16);
        let rows = oracle_prob_rows(&[0, 1, 2], &spec, &ctx).unwrap();
        for row in rows {
            let first = row.entries[1]; // entry 0 may carry the residue
            for p in &row.entries[1..] {
                assert_eq!(*p, first);
            }
        }
    }

    #[test]
    fn residual_only_path_is_w_out_times_embedding() {
        // W^O = 0 and FFN = 0 leave only the residual stream, so logits are
        // W_out applied to the embedding directly.
        let mut spec = ModelSpec::generate(5, small_dims()).unwrap();
        spec.layers[0].wo.iter_mut().for_each(|w| *w = 0);
        spec.layers[0].w_ff_in.iter_mut().for_each(|w| *w = 0);
        spec.layers[0].w_ff_out.iter_mut().for_each(|w| *w = 0);
        let ctx = FxpCtx::new(16);
        let logits = oracle_forward(&[3], &spec, &ctx).unwrap();
        let x = embed(&ctx, &spec, 3, 0);
        let expect = project(&ctx, &x, &spec.w_out, spec.dims.vocab_size);
        assert_eq!(logits[0], expect);
    }

    #[test]
    fn length_beyond_context_rejected() {
        let spec = ModelSpec::zeros(small_dims()).unwrap();
        let ctx = FxpCtx::new(16);
        assert!(oracle_forward(&[0; 9], &spec, &ctx).is_err());
    }

    #[test]
    fn float_shadow_tracks_fixed_point() {
        let spec = ModelSpec::generate(11, small_dims()).unwrap();
        let ctx = FxpCtx::new(16);
        let fx = oracle_forward(&[1, 2, 3, 4], &spec, &ctx).unwrap();
        assert!(!ctx.saturated(), "saturated kernel invalidates comparison");
        let fl = oracle_forward_f64(&[1, 2, 3, 4], &spec);
        for (frow, lrow) in fx.iter().zip(&fl) {
            let mag = lrow.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in frow.iter().zip(lrow) {
                assert!(
                    (ctx.to_f64(*a) - b).abs() <= 1e-3 * mag,
                    "fixed {} vs float {}",
                    ctx.to_f64(*a),
                    b
                );
            }
        }
    }
}
