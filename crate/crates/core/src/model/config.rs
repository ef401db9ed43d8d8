use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which positional machinery the encoder instantiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Learned absolute position embeddings plus Toeplitz kernel scores.
    CaseAWithPe,
    /// Toeplitz kernel scores only; inputs are word embeddings alone.
    CaseBTisaOnly,
    /// Learned absolute position embeddings only.
    BaselinePeOnly,
    /// No positional information at all.
    BagOfWords,
}

impl PositionMode {
    pub const ALL: [PositionMode; 4] = [
        PositionMode::CaseAWithPe,
        PositionMode::CaseBTisaOnly,
        PositionMode::BaselinePeOnly,
        PositionMode::BagOfWords,
    ];

    pub fn uses_position_embeddings(self) -> bool {
        matches!(self, PositionMode::CaseAWithPe | PositionMode::BaselinePeOnly)
    }

    pub fn uses_kernels(self) -> bool {
        matches!(self, PositionMode::CaseAWithPe | PositionMode::CaseBTisaOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            PositionMode::CaseAWithPe => "case_a_with_pe",
            PositionMode::CaseBTisaOnly => "case_b_tisa_only",
            PositionMode::BaselinePeOnly => "baseline_pe_only",
            PositionMode::BagOfWords => "bag_of_words",
        }
    }
}

impl std::str::FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PositionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown mode {s:?}")))
    }
}

impl std::fmt::Display for PositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab: usize,
    /// Embedding width; must equal `heads * d_k`.
    pub d: usize,
    pub d_k: usize,
    pub heads: usize,
    pub layers: usize,
    /// Kernels per head.
    pub kernels: usize,
    pub n_max: usize,
    pub mode: PositionMode,
    pub seed: u64,
    /// Keep position embeddings at their initial values during training.
    #[serde(default)]
    pub freeze_position_embeddings: bool,
}

impl ToyModelConfig {
    /// A config with `d = heads * d_k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vocab: usize,
        d_k: usize,
        heads: usize,
        layers: usize,
        kernels: usize,
        n_max: usize,
        mode: PositionMode,
        seed: u64,
    ) -> Self {
        Self {
            vocab,
            d: heads * d_k,
            d_k,
            heads,
            layers,
            kernels,
            n_max,
            mode,
            seed,
            freeze_position_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_k == 0 || self.heads == 0 || self.n_max == 0 {
            return Err(Error::domain("vocab, d_k, heads and n_max must be positive"));
        }
        if self.d != self.heads * self.d_k {
            return Err(Error::domain(format!(
                "width {} must equal heads ({}) x d_k ({})",
                self.d, self.heads, self.d_k
            )));
        }
        Ok(())
    }

    /// Feed-forward hidden width.
    pub fn d_ff(&self) -> usize {
        4 * self.d
    }

    pub fn kernels_active(&self) -> bool {
        self.mode.uses_kernels() && self.kernels > 0
    }

    pub fn positional_param_count(&self) -> u64 {
        let mut total = 0;
        if self.mode.uses_position_embeddings() {
            total += count_positional_params(&ArchSpec {
                n: self.n_max,
                d: self.d,
                kernels: self.kernels,
                heads: self.heads,
                layers: self.layers,
                scheme: Scheme::Standard,
            });
        }
        if self.mode.uses_kernels() {
            total += count_positional_params(&ArchSpec {
                n: self.n_max,
                d: self.d,
                kernels: self.kernels,
                heads: self.heads,
                layers: self.layers,
                scheme: Scheme::Tisa,
            });
        }
        total
    }
}

/// Positional-parameter accounting scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One learned embedding per absolute position.
    Standard,
    /// Absolute embeddings plus separate positional query/key projections.
    Untied,
    /// Radial-basis kernels per head and layer.
    Tisa,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Scheme::Standard),
            "untied" => Ok(Scheme::Untied),
            "tisa" => Ok(Scheme::Tisa),
            other => Err(Error::domain(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub n: usize,
    pub d: usize,
    pub kernels: usize,
    pub heads: usize,
    pub layers: usize,
    pub scheme: Scheme,
}

/// `n·d` for standard embeddings, `n·d + 2d²` for untied positional
/// projections, `3·S·H·L` for kernels.
pub fn count_positional_params(spec: &ArchSpec) -> u64 {
    let (n, d) = (spec.n as u64, spec.d as u64);
    match spec.scheme {
        Scheme::Standard => n * d,
        Scheme::Untied => n * d + 2 * d * d,
        Scheme::Tisa => 3 * (spec.kernels * spec.heads * spec.layers) as u64,
    }
}
