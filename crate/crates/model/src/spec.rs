//! Model specification: architecture dims, context bound, and quantised
//! weights. This is the read-only content of the parameter tape.
//!
//! Weights are raw fixed-point integers in row-major order. The synthetic
//! generator draws them uniformly from [-1, 1] with a seeded splitmix
//! sequence in a fixed field order (embedding, positional table, then per
//! layer: per-head W^Q, per-head W^K, per-head W^V, W^O, FFN in, FFN out,
//! and finally the output matrix), so the same seed always produces the
//! same file.

use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecDims {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub l_max: usize,
    pub vocab_size: usize,
    pub frac_bits: u32,
}

impl SpecDims {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Per-layer weight matrices, raw fixed-point, row-major. The Q/K/V blocks
/// concatenate all heads: head h occupies rows `[h*d_model*d_k, (h+1)*d_model*d_k)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Vec<i32>, // heads * d_model * d_k
    pub wk: Vec<i32>, // heads * d_model * d_k
    pub wv: Vec<i32>, // heads * d_model * d_k
    pub wo: Vec<i32>, // d_model * d_model
    pub w_ff_in: Vec<i32>,  // d_model * d_ff
    pub w_ff_out: Vec<i32>, // d_ff * d_model
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: SpecDims,
    pub embed: Vec<i32>, // vocab_size * d_model
    pub pos: Vec<i32>,   // l_max * d_model
    pub layers: Vec<LayerWeights>,
    pub w_out: Vec<i32>, // d_model * vocab_size
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("model spec file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model spec schema: {0}")]
    Schema(String),
}

impl ModelSpec {
    /// Generate a synthetic spec from a seed; reproducible byte-for-byte.
    pub fn generate(seed: u64, dims: SpecDims) -> Result<ModelSpec, SpecError> {
        check_dims(&dims)?;
        let mut rng = SplitMix64::new(seed);
        let fb = dims.frac_bits;
        let mut draw = |n: usize| -> Vec<i32> { (0..n).map(|_| rng.unit_raw(fb)).collect() };
        let d_k = dims.d_k();
        let embed = draw(dims.vocab_size * dims.d_model);
        let pos = draw(dims.l_max * dims.d_model);
        let mut layers = Vec::with_capacity(dims.layers);
        for _ in 0..dims.layers {
            layers.push(LayerWeights {
                wq: draw(dims.heads * dims.d_model * d_k),
                wk: draw(dims.heads * dims.d_model * d_k),
                wv: draw(dims.heads * dims.d_model * d_k),
                wo: draw(dims.d_model * dims.d_model),
                w_ff_in: draw(dims.d_model * dims.d_ff),
                w_ff_out: draw(dims.d_ff * dims.d_model),
            });
        }
        let w_out = draw(dims.d_model * dims.vocab_size);
        Ok(ModelSpec {
            dims,
            embed,
            pos,
            layers,
            w_out,
        })
    }

    /// An all-zero-weight spec; useful for hand-built toy models.
    pub fn zeros(dims: SpecDims) -> Result<ModelSpec, SpecError> {
        check_dims(&dims)?;
        let d_k = dims.d_k();
        Ok(ModelSpec {
            dims,
            embed: vec![0; dims.vocab_size * dims.d_model],
            pos: vec![0; dims.l_max * dims.d_model],
            layers: (0..dims.layers)
                .map(|_| LayerWeights {
                    wq: vec![0; dims.heads * dims.d_model * d_k],
                    wk: vec![0; dims.heads * dims.d_model * d_k],
                    wv: vec![0; dims.heads * dims.d_model * d_k],
                    wo: vec![0; dims.d_model * dims.d_model],
                    w_ff_in: vec![0; dims.d_model * dims.d_ff],
                    w_ff_out: vec![0; dims.d_ff * dims.d_model],
                })
                .collect(),
            w_out: vec![0; dims.d_model * dims.vocab_size],
        })
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        check_dims(&self.dims)?;
        let d = &self.dims;
        let d_k = d.d_k();
        let expect = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(SpecError::Dimension(format!(
                    "{name}: length {got}, expected {want}"
                )))
            }
        };
        expect("embed", self.embed.len(), d.vocab_size * d.d_model)?;
        expect("pos", self.pos.len(), d.l_max * d.d_model)?;
        expect("layers", self.layers.len(), d.layers)?;
        for (i, l) in self.layers.iter().enumerate() {
            expect(&format!("layer {i} wq"), l.wq.len(), d.heads * d.d_model * d_k)?;
            expect(&format!("layer {i} wk"), l.wk.len(), d.heads * d.d_model * d_k)?;
            expect(&format!("layer {i} wv"), l.wv.len(), d.heads * d.d_model * d_k)?;
            expect(&format!("layer {i} wo"), l.wo.len(), d.d_model * d.d_model)?;
            expect(&format!("layer {i} ff in"), l.w_ff_in.len(), d.d_model * d.d_ff)?;
            expect(&format!("layer {i} ff out"), l.w_ff_out.len(), d.d_ff * d.d_model)?;
        }
        expect("w_out", self.w_out.len(), d.d_model * d.vocab_size)?;
        Ok(())
    }

    /// Head h slice of a concatenated Q/K/V block.
    pub fn head_slice<'a>(&self, block: &'a [i32], h: usize) -> &'a [i32] {
        let n = self.dims.d_model * self.dims.d_k();
        &block[h * n..(h + 1) * n]
    }

    pub fn embed_row(&self, id: u32) -> &[i32] {
        let d = self.dims.d_model;
        &self.embed[id as usize * d..(id as usize + 1) * d]
    }

    pub fn pos_row(&self, position: usize) -> &[i32] {
        let d = self.dims.d_model;
        &self.pos[position * d..(position + 1) * d]
    }

    pub fn save(&self, path: &Path) -> Result<(), SpecError> {
        let json =
            serde_json::to_string(self).map_err(|e| SpecError::Schema(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelSpec, SpecError> {
        let text = std::fs::read_to_string(path)?;
        let spec: ModelSpec =
            serde_json::from_str(&text).map_err(|e| SpecError::Schema(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn check_dims(d: &SpecDims) -> Result<(), SpecError> {
    if d.heads == 0 || d.layers == 0 || d.d_model == 0 || d.vocab_size == 0 || d.l_max == 0 {
        return Err(SpecError::Dimension("all dims must be positive".into()));
    }
    if d.d_model % d.heads != 0 {
        return Err(SpecError::Dimension(format!(
            "d_model {} not divisible by heads {}",
            d.d_model, d.heads
        )));
    }
    if !(1..=30).contains(&d.frac_bits) {
        return Err(SpecError::Dimension(format!(
            "frac_bits {} out of range",
            d.frac_bits
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> SpecDims {
        SpecDims {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 8,
            l_max: 16,
            vocab_size: 16,
            frac_bits: 16,
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let a = ModelSpec::generate(99, dims()).unwrap();
        let b = ModelSpec::generate(99, dims()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_spec_validates_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spec.json");
        let spec = ModelSpec::generate(7, dims()).unwrap();
        spec.validate().unwrap();
        spec.save(&p).unwrap();
        let loaded = ModelSpec::load(&p).unwrap();
        assert_eq!(spec, loaded);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut d = dims();
        d.heads = 3;
        assert!(ModelSpec::generate(0, d).is_err());
    }

    #[test]
    fn rejects_truncated_weights() {
        let mut spec = ModelSpec::generate(1, dims()).unwrap();
        spec.w_out.pop();
        assert!(spec.validate().is_err());
    }
}
