//! The radial-basis positional scoring function and its parameters.
//!
//! For one head, `f(k) = Σ_s a_s · exp(-|b_s| · (k - c_s)²)` gives the
//! additive attention-score contribution for a query at position `i` looking
//! at a key at position `j = i + k`. Because the function is defined on every
//! integer, the Toeplitz score matrix it generates exists for any sequence
//! length.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::toeplitz::OffsetProfile;

/// One radial-basis kernel. `width` is stored raw; evaluation uses `|width|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub amplitude: f64,
    pub width: f64,
    pub center: f64,
}

impl Kernel {
    pub fn new(amplitude: f64, width: f64, center: f64) -> Self {
        Self {
            amplitude,
            width,
            center,
        }
    }

    #[inline]
    fn basis(&self, k: f64) -> f64 {
        let x = k - self.center;
        (-self.width.abs() * x * x).exp()
    }

    #[inline]
    pub fn eval(&self, k: f64) -> f64 {
        self.amplitude * self.basis(k)
    }
}

/// Partial derivatives of `f(k)` with respect to one kernel's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KernelGradient {
    pub amplitude: f64,
    pub width: f64,
    pub center: f64,
}

/// The kernels of a single `(layer, head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub kernels: Vec<Kernel>,
    pub layer: usize,
    pub head: usize,
}

impl KernelParams {
    pub fn new(kernels: Vec<Kernel>, layer: usize, head: usize) -> Self {
        Self { kernels, layer, head }
    }

    /// No kernels: the scoring function is identically zero.
    pub fn empty(layer: usize, head: usize) -> Self {
        Self::new(Vec::new(), layer, head)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Parameters flattened as `[a_0, b_0, c_0, a_1, b_1, c_1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.kernels
            .iter()
            .flat_map(|k| [k.amplitude, k.width, k.center])
            .collect()
    }

    pub fn from_flat(flat: &[f64], layer: usize, head: usize) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::domain(format!(
                "flattened kernel parameters must come in triples, got {} values",
                flat.len()
            )));
        }
        let kernels = flat.chunks_exact(3).map(|c| Kernel::new(c[0], c[1], c[2])).collect();
        Ok(Self::new(kernels, layer, head))
    }

    /// `Σ_s |a_s|`, an upper bound on `|f(k)|`.
    pub fn amplitude_bound(&self) -> f64 {
        self.kernels.iter().map(|k| k.amplitude.abs()).sum()
    }

    pub fn eval(&self, k: i64) -> f64 {
        self.eval_real(k as f64)
    }

    /// `f` at a real-valued offset; used for plotting and peak searches.
    pub fn eval_real(&self, k: f64) -> f64 {
        self.kernels.iter().map(|kern| kern.eval(k)).sum()
    }

    /// Analytic gradient of `upstream · f(k)` for each kernel.
    ///
    /// The derivative of `|b|` at `b = 0` is taken to be 0.
    pub fn gradients(&self, k: i64, upstream: f64) -> Vec<KernelGradient> {
        self.gradients_real(k as f64, upstream)
    }

    /// [`KernelParams::gradients`] at a real-valued offset.
    pub fn gradients_real(&self, kf: f64, upstream: f64) -> Vec<KernelGradient> {
        self.kernels
            .iter()
            .map(|kern| {
                let x = kf - kern.center;
                let e = kern.basis(kf);
                let sign = if kern.width > 0.0 {
                    1.0
                } else if kern.width < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                KernelGradient {
                    amplitude: upstream * e,
                    width: -upstream * sign * x * x * kern.amplitude * e,
                    center: upstream * 2.0 * kern.width.abs() * x * kern.amplitude * e,
                }
            })
            .collect()
    }

    /// `f(k)` for `k = -(n-1) ..= n-1`; the O(n) generator of the score matrix.
    pub fn score_profile(&self, n: usize) -> OffsetProfile {
        assert!(n >= 1, "sequence length must be positive");
        let span = n as i64 - 1;
        OffsetProfile::new(-span, (-span..=span).map(|k| self.eval(k)).collect())
    }

    /// Dense `n × n` Toeplitz score matrix with entry `(i, j) = f(j - i)`.
    pub fn materialize(&self, n: usize) -> Matrix {
        let profile = self.score_profile(n);
        let values = profile.values();
        let offset = n - 1;
        Matrix::from_fn(n, n, |i, j| values[j + offset - i])
    }
}

pub fn eval_kernel(params: &KernelParams, k: i64) -> f64 {
    params.eval(k)
}

pub fn materialize_fp(params: &KernelParams, n: usize) -> Matrix {
    params.materialize(n)
}

pub fn kernel_gradients(params: &KernelParams, k: i64, upstream: f64) -> Vec<KernelGradient> {
    params.gradients(k, upstream)
}

/// Scoring functions for every `(layer, head)` of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TisaStack {
    pub heads: usize,
    pub layers: usize,
    pub d_k: usize,
    /// Indexed `layer * heads + head`.
    params: Vec<KernelParams>,
}

impl TisaStack {
    pub fn new(heads: usize, layers: usize, d_k: usize, params: Vec<KernelParams>) -> Result<Self> {
        if params.len() != heads * layers {
            return Err(Error::domain(format!(
                "expected {} kernel sets for {layers} layers x {heads} heads, got {}",
                heads * layers,
                params.len()
            )));
        }
        let mut params = params;
        params.sort_by_key(|p| (p.layer, p.head));
        for (idx, p) in params.iter().enumerate() {
            if p.layer != idx / heads || p.head != idx % heads {
                return Err(Error::domain(format!(
                    "missing or duplicate kernel set for layer {}, head {}",
                    idx / heads,
                    idx % heads
                )));
            }
        }
        Ok(Self {
            heads,
            layers,
            d_k,
            params,
        })
    }

    /// Every head gets `kernels_per_head` copies of `template`.
    pub fn uniform(heads: usize, layers: usize, d_k: usize, template: &[Kernel]) -> Self {
        let params = (0..layers)
            .flat_map(|l| (0..heads).map(move |h| (l, h)))
            .map(|(l, h)| KernelParams::new(template.to_vec(), l, h))
            .collect();
        Self {
            heads,
            layers,
            d_k,
            params,
        }
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&KernelParams> {
        if layer < self.layers && head < self.heads {
            Some(&self.params[layer * self.heads + head])
        } else {
            None
        }
    }

    pub fn get_mut(&mut self, layer: usize, head: usize) -> Option<&mut KernelParams> {
        if layer < self.layers && head < self.heads {
            Some(&mut self.params[layer * self.heads + head])
        } else {
            None
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &KernelParams> {
        self.params.iter()
    }

    /// Kernel count when every head uses the same number, else `None`.
    pub fn kernels_per_head(&self) -> Option<usize> {
        let s = self.params.first().map_or(0, KernelParams::len);
        self.params.iter().all(|p| p.len() == s).then_some(s)
    }

    /// Number of trainable positional parameters (3 per kernel).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| 3 * p.len()).sum()
    }
}
