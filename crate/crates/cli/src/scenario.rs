//! Scenario files: a JSON description of one pipeline run — prompt,
//! vocabulary regime, model spec source, decode mode, extensions, budgets
//! and an optional expected output. Command-line flags override file
//! fields, which override defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tapeline_core::machine::{DecodeMode, Machine, MachineOptions, RandomSource};
use tapeline_core::CountTask;
use tapeline_model::spec::{ModelSpec, SpecDims};
use tapeline_model::vocab::{build_regime_vocab, load_vocab, MergeRule, Regime, Vocabulary};

pub const DEFAULT_MAX_STEPS: u64 = 50_000_000;
pub const DEFAULT_MAX_TOKENS: u32 = 16;
pub const DEFAULT_SAMPLE_WIDTH: u32 = 16;

fn default_max_steps() -> u64 {
    DEFAULT_MAX_STEPS
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

fn default_width() -> u32 {
    DEFAULT_SAMPLE_WIDTH
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimsCfg {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub l_max: usize,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default = "FxpDefault::frac_bits")]
    pub frac_bits: u32,
}

struct FxpDefault;

impl FxpDefault {
    fn frac_bits() -> u32 {
        16
    }
}

impl Default for DimsCfg {
    fn default() -> Self {
        DimsCfg {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 8,
            l_max: 64,
            vocab_size: None,
            frac_bits: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeCfg {
    Greedy,
    Sample {
        #[serde(default = "default_width")]
        width: u32,
        #[serde(default)]
        seed: Option<u64>,
        /// File of ASCII 0/1 characters used as the randomness tape.
        #[serde(default)]
        bits_file: Option<PathBuf>,
    },
    Beam {
        beams: usize,
    },
}

impl Default for DecodeCfg {
    fn default() -> Self {
        DecodeCfg::Greedy
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountCfg {
    pub word: String,
    pub letter: char,
    #[serde(default)]
    pub case_sensitive: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub prompt: String,
    /// "A" | "B" | "byte"; ignored when vocab_file is given.
    #[serde(default)]
    pub regime: Option<String>,
    #[serde(default)]
    pub vocab_file: Option<PathBuf>,
    #[serde(default)]
    pub spec_file: Option<PathBuf>,
    #[serde(default)]
    pub spec_seed: Option<u64>,
    #[serde(default)]
    pub dims: Option<DimsCfg>,
    #[serde(default)]
    pub decode: DecodeCfg,
    #[serde(default)]
    pub counting: Option<CountCfg>,
    /// Treat the prompt as a centre-embedding sentence and run the
    /// dependency-stack recogniser over it instead of the model pipeline.
    #[serde(default)]
    pub stack: bool,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Expected Tape 7 text; exit status reflects whether it was met.
    #[serde(default)]
    pub expect: Option<String>,
    /// Word whose character boundaries matter for diagnosis.
    #[serde(default)]
    pub focus_word: Option<String>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading scenario {}", path.display()))?;
        let scenario: Scenario = serde_json::from_str(&text)
            .with_context(|| format!("parsing scenario {}", path.display()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.max_tokens == 0 {
            bail!("budgets must be positive");
        }
        if let DecodeCfg::Beam { beams } = self.decode {
            if beams == 0 {
                bail!("beam width must be positive");
            }
        }
        Ok(())
    }

    pub fn parse_regime(&self) -> Result<Regime> {
        let name = self.regime.as_deref().unwrap_or("A");
        Regime::parse(name).with_context(|| format!("unknown regime {name:?}"))
    }

    /// Resolve the vocabulary from the file field or the regime.
    pub fn build_vocab(&self) -> Result<(Vocabulary, Vec<MergeRule>)> {
        if let Some(path) = &self.vocab_file {
            return load_vocab(path)
                .with_context(|| format!("loading vocabulary {}", path.display()));
        }
        Ok(build_regime_vocab(self.parse_regime()?))
    }

    /// Resolve the model spec from the file field or a seeded generator.
    pub fn build_spec(&self, vocab: &Vocabulary) -> Result<ModelSpec> {
        if let Some(path) = &self.spec_file {
            let spec = ModelSpec::load(path)
                .with_context(|| format!("loading model spec {}", path.display()))?;
            return Ok(spec);
        }
        let d = self.dims.clone().unwrap_or_default();
        let dims = SpecDims {
            layers: d.layers,
            heads: d.heads,
            d_model: d.d_model,
            d_ff: d.d_ff,
            l_max: d.l_max,
            vocab_size: d.vocab_size.unwrap_or(vocab.id_bound() as usize),
            frac_bits: d.frac_bits,
        };
        ModelSpec::generate(self.spec_seed.unwrap_or(0), dims).context("generating model spec")
    }

    /// Assemble a machine for greedy or sampled decoding.
    pub fn build_machine(&self) -> Result<Machine> {
        let (vocab, rules) = self.build_vocab()?;
        let spec = self.build_spec(&vocab)?;
        let decode = match &self.decode {
            DecodeCfg::Greedy => DecodeMode::Greedy,
            DecodeCfg::Sample { width, .. } => DecodeMode::Sample { width: *width },
            DecodeCfg::Beam { .. } => bail!("beam decoding runs outside the machine"),
        };
        let random = match &self.decode {
            DecodeCfg::Sample {
                bits_file: Some(path),
                ..
            } => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading bit file {}", path.display()))?;
                let bits: Vec<u8> = text
                    .chars()
                    .filter_map(|c| match c {
                        '0' => Some(0),
                        '1' => Some(1),
                        _ => None,
                    })
                    .collect();
                if bits.is_empty() {
                    bail!("bit file {} holds no 0/1 characters", path.display());
                }
                RandomSource::Bits(bits)
            }
            DecodeCfg::Sample { seed, .. } => RandomSource::Seeded(seed.unwrap_or(0)),
            _ => RandomSource::Seeded(0),
        };
        let counting = self.counting.as_ref().map(|c| CountTask {
            word: c.word.clone(),
            letter: c.letter,
            case_sensitive: c.case_sensitive,
        });
        let opts = MachineOptions {
            decode,
            random,
            counting,
            use_cache: true,
        };
        Machine::new(vocab, rules, spec, opts).context("assembling machine")
    }
}
