//! A small pre-norm transformer encoder for exercising positional schemes
//! end to end.
//!
//! Each layer is `x + MHA(LN(x))` followed by `x + FFN(LN(x))` with a GELU
//! feed-forward of width `4d`. Logits are a linear readout of the final
//! residual stream (no final norm), so a zero-layer model is a linear map of
//! the input embeddings.

mod config;
mod task;
mod train;

pub use config::{count_positional_params, ArchSpec, PositionMode, Scheme, ToyModelConfig};
pub use task::{make_task, shift_targets, Example, TaskGenerator, TaskKind, TokenSampling, MARKER};
pub use train::{evaluate, train, TrainOptions, TrainOutcome, TrainReport};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelParams, TisaStack};
use crate::matrix::Matrix;
use crate::rng::SeededRng;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Matrix)>,
}

impl ModelParams {
    pub fn new(entries: Vec<(String, Matrix)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::domain(format!("missing parameter {name:?}")))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.as_slice().len()).sum()
    }
}

pub fn kernel_name(layer: usize, head: usize) -> String {
    format!("layer{layer}.attn.kernel.h{head}")
}

pub const POSITION_EMBEDDING: &str = "embed.position";
pub const WORD_EMBEDDING: &str = "embed.word";

/// Evenly spaced centers over `[-S, S]`, amplitudes uniform in
/// `(-0.1, 0.1)`, widths 0.1.
fn initial_kernels(count: usize, rng: &mut SeededRng) -> Vec<Kernel> {
    (0..count)
        .map(|s| {
            let center = if count == 1 {
                0.0
            } else {
                -(count as f64) + 2.0 * count as f64 * s as f64 / (count - 1) as f64
            };
            Kernel::new(rng.uniform_in(-0.1, 0.1), 0.1, center)
        })
        .collect()
}

/// Parameter indices for one layer.
struct LayerIdx {
    ln1_gain: usize,
    ln1_bias: usize,
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_o: usize,
    kernels: Vec<usize>,
    ln2_gain: usize,
    ln2_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub params: ModelParams,
}

impl ToyModel {
    /// Seeded random initialization.
    pub fn init(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(config.seed, 0);
        let (v, d, ff) = (config.vocab, config.d, config.d_ff());
        let mut entries = Vec::new();
        let mut push = |name: String, m: Matrix| entries.push((name, m));

        push(WORD_EMBEDDING.into(), rng.normal_matrix(v, d, 1.0));
        if config.mode.uses_position_embeddings() {
            push(POSITION_EMBEDDING.into(), rng.normal_matrix(config.n_max, d, 1.0));
        }
        let std_d = 1.0 / (d as f64).sqrt();
        let std_ff = 1.0 / (ff as f64).sqrt();
        for l in 0..config.layers {
            push(format!("layer{l}.ln1.gain"), Matrix::filled(1, d, 1.0));
            push(format!("layer{l}.ln1.bias"), Matrix::zeros(1, d));
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                push(format!("layer{l}.attn.{w}"), rng.normal_matrix(d, d, std_d));
            }
            if config.kernels_active() {
                for h in 0..config.heads {
                    let ks = initial_kernels(config.kernels, &mut rng);
                    let flat = KernelParams::new(ks, l, h).to_flat();
                    push(kernel_name(l, h), Matrix::row_vector(&flat));
                }
            }
            push(format!("layer{l}.ln2.gain"), Matrix::filled(1, d, 1.0));
            push(format!("layer{l}.ln2.bias"), Matrix::zeros(1, d));
            push(format!("layer{l}.ffn.w1"), rng.normal_matrix(d, ff, std_d));
            push(format!("layer{l}.ffn.b1"), Matrix::zeros(1, ff));
            push(format!("layer{l}.ffn.w2"), rng.normal_matrix(ff, d, std_ff));
            push(format!("layer{l}.ffn.b2"), Matrix::zeros(1, d));
        }
        push("readout.w".into(), rng.normal_matrix(d, v, std_d));
        push("readout.b".into(), Matrix::zeros(1, v));

        Ok(Self {
            config,
            params: ModelParams::new(entries),
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh initialization.
    pub fn from_params(config: ToyModelConfig, params: ModelParams) -> Result<Self> {
        let reference = Self::init(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(Error::domain(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((rn, rm), (n, m)) in reference.params.iter().zip(params.iter()) {
            if rn != n || rm.shape() != m.shape() {
                return Err(Error::domain(format!(
                    "parameter {n:?} {:?} does not match expected {rn:?} {:?}",
                    m.shape(),
                    rm.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// The kernels of every head as a [`TisaStack`], when the mode uses them.
    pub fn tisa_stack(&self) -> Option<TisaStack> {
        if !self.config.kernels_active() {
            return None;
        }
        let mut sets = Vec::new();
        for l in 0..self.config.layers {
            for h in 0..self.config.heads {
                let row = self.params.get(&kernel_name(l, h))?;
                sets.push(KernelParams::from_flat(row.as_slice(), l, h).ok()?);
            }
        }
        TisaStack::new(self.config.heads, self.config.layers, self.config.d_k, sets).ok()
    }

    /// Replaces kernel parameters from a stack with matching dimensions.
    pub fn set_tisa_stack(&mut self, stack: &TisaStack) -> Result<()> {
        for p in stack.iter() {
            let name = kernel_name(p.layer, p.head);
            let slot = self
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::domain(format!("model has no parameter {name:?}")))?;
            let flat = p.to_flat();
            if flat.len() != slot.cols() {
                return Err(Error::domain(format!(
                    "{name}: expected {} kernels, got {}",
                    slot.cols() / 3,
                    p.len()
                )));
            }
            *slot = Matrix::row_vector(&flat);
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::domain("empty token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::OutOfBounds {
                index: bad,
                len: self.config.vocab,
            });
        }
        if self.config.mode.uses_position_embeddings() && tokens.len() > self.config.n_max {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.n_max,
            });
        }
        Ok(())
    }

    /// Puts every parameter on `tape` as a leaf, in storage order.
    pub(crate) fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|(_, m)| tape.leaf(m.clone())).collect()
    }

    fn layer_indices(&self, l: usize) -> Result<LayerIdx> {
        let p = &self.params;
        let name = |s: &str| format!("layer{l}.{s}");
        let kernels = if self.config.kernels_active() {
            (0..self.config.heads)
                .map(|h| p.index_of(&kernel_name(l, h)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(LayerIdx {
            ln1_gain: p.index_of(&name("ln1.gain"))?,
            ln1_bias: p.index_of(&name("ln1.bias"))?,
            w_q: p.index_of(&name("attn.w_q"))?,
            w_k: p.index_of(&name("attn.w_k"))?,
            w_v: p.index_of(&name("attn.w_v"))?,
            w_o: p.index_of(&name("attn.w_o"))?,
            kernels,
            ln2_gain: p.index_of(&name("ln2.gain"))?,
            ln2_bias: p.index_of(&name("ln2.bias"))?,
            w1: p.index_of(&name("ffn.w1"))?,
            b1: p.index_of(&name("ffn.b1"))?,
            w2: p.index_of(&name("ffn.w2"))?,
            b2: p.index_of(&name("ffn.b2"))?,
        })
    }

    /// Records the forward pass for one sequence on `tape` and returns the
    /// `n × vocab` logits node. `mask` (`n × n`, `0` or `-inf`) is added to
    /// every attention score matrix.
    pub(crate) fn build(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        tokens: &[usize],
        mask: Option<&Matrix>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let n = tokens.len();
        let p = &self.params;

        let mut x = tape.gather(leaves[p.index_of(WORD_EMBEDDING)?], tokens)?;
        if cfg.mode.uses_position_embeddings() {
            let pe = tape.slice_rows(leaves[p.index_of(POSITION_EMBEDDING)?], 0, n)?;
            x = tape.add(x, pe)?;
        }

        let scale = (cfg.d_k as f64).sqrt();
        for l in 0..cfg.layers {
            let idx = self.layer_indices(l)?;
            let h = layer_norm(tape, x, leaves[idx.ln1_gain], leaves[idx.ln1_bias])?;
            let q = tape.matmul(h, leaves[idx.w_q])?;
            let k = tape.matmul(h, leaves[idx.w_k])?;
            let v = tape.matmul(h, leaves[idx.w_v])?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let start = head * cfg.d_k;
                let qh = tape.slice_cols(q, start, cfg.d_k)?;
                let kh = tape.slice_cols(k, start, cfg.d_k)?;
                let vh = tape.slice_cols(v, start, cfg.d_k)?;
                let raw = tape.matmul_transposed(qh, kh)?;
                let mut scores = tape.div(raw, scale);
                if let Some(&ki) = idx.kernels.get(head) {
                    let fp = tape.toeplitz(leaves[ki], n)?;
                    scores = tape.add(scores, fp)?;
                }
                if let Some(mask) = mask {
                    scores = tape.add_const(scores, mask)?;
                }
                let weights = tape.softmax_rows(scores);
                heads.push(tape.matmul(weights, vh)?);
            }
            let joined = tape.concat_cols(&heads)?;
            let attn = tape.matmul(joined, leaves[idx.w_o])?;
            x = tape.add(x, attn)?;

            let h = layer_norm(tape, x, leaves[idx.ln2_gain], leaves[idx.ln2_bias])?;
            let hidden = tape.matmul(h, leaves[idx.w1])?;
            let hidden = tape.add_row(hidden, leaves[idx.b1])?;
            let hidden = tape.gelu(hidden);
            let out = tape.matmul(hidden, leaves[idx.w2])?;
            let out = tape.add_row(out, leaves[idx.b2])?;
            x = tape.add(x, out)?;
        }

        let logits = tape.matmul(x, leaves[p.index_of("readout.w")?])?;
        tape.add_row(logits, leaves[p.index_of("readout.b")?])
    }

    /// `n × vocab` logits for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix> {
        self.forward_masked(tokens, None)
    }

    pub fn forward_masked(&self, tokens: &[usize], mask: Option<&Matrix>) -> Result<Matrix> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let out = self.build(&mut tape, &leaves, tokens, mask)?;
        Ok(tape.value(out).clone())
    }

    /// Mean per-sequence cross-entropy over `batch` and its gradient for every
    /// parameter tensor, in storage order.
    pub fn loss_and_gradients(&self, batch: &[Example]) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let logits = self.build(&mut tape, &leaves, &ex.tokens, None)?;
            losses.push(tape.cross_entropy(logits, &ex.targets)?);
        }
        let total = tape.sum_scalars(&losses);
        let mean = tape.scale(total, 1.0 / batch.len() as f64);
        let loss = tape.scalar(mean);
        let mut grads = tape.backward(mean);
        let out = leaves
            .iter()
            .zip(self.params.iter())
            .map(|(&v, (_, m))| grads.take(v).unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
            .collect();
        Ok((loss, out))
    }

    /// Mean loss only.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let logits = self.build(&mut tape, &leaves, &ex.tokens, None)?;
            losses.push(tape.cross_entropy(logits, &ex.targets)?);
        }
        let total = tape.sum_scalars(&losses);
        Ok(tape.scalar(total) / batch.len() as f64)
    }

    /// `(correct, counted)` argmax predictions over targeted positions.
    pub fn score(&self, ex: &Example) -> Result<(usize, usize)> {
        let logits = self.forward(&ex.tokens)?;
        let mut correct = 0;
        let mut counted = 0;
        for (i, t) in ex.targets.iter().enumerate() {
            if let Some(t) = *t {
                counted += 1;
                let row = logits.row(i);
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(j, _)| j)
                    .expect("non-empty row");
                if pred == t {
                    correct += 1;
                }
            }
        }
        Ok((correct, counted))
    }
}

fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.normalize_rows(x);
    let g = tape.mul_row(n, gain)?;
    tape.add_row(g, bias)
}

/// Free-function spelling of [`ToyModel::forward`].
pub fn forward(model: &ToyModel, tokens: &[usize]) -> Result<Matrix> {
    model.forward(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: PositionMode, layers: usize) -> ToyModel {
        ToyModel::init(ToyModelConfig::new(7, 4, 2, layers, 2, 5, mode, 11)).unwrap()
    }

    #[test]
    fn logits_shape() {
        for mode in PositionMode::ALL {
            let m = tiny(mode, 2);
            let out = m.forward(&[1, 2, 3]).unwrap();
            assert_eq!(out.shape(), (3, 7));
            assert!(out.is_finite());
        }
    }

    #[test]
    fn zero_layers_is_linear_readout() {
        let m = tiny(PositionMode::BagOfWords, 0);
        let tokens = [3, 0, 6];
        let emb = m.params.get(WORD_EMBEDDING).unwrap();
        let w = m.params.get("readout.w").unwrap();
        let b = m.params.get("readout.b").unwrap();
        let out = m.forward(&tokens).unwrap();
        for (i, &t) in tokens.iter().enumerate() {
            let row = Matrix::row_vector(emb.row(t)).matmul(w).unwrap().add(b).unwrap();
            for j in 0..7 {
                assert!((out.get(i, j) - row.get(0, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn deterministic_init() {
        let a = tiny(PositionMode::CaseAWithPe, 1);
        let b = tiny(PositionMode::CaseAWithPe, 1);
        assert_eq!(a.params, b.params);
        assert_eq!(a.forward(&[1, 2]).unwrap(), b.forward(&[1, 2]).unwrap());
    }

    #[test]
    fn embedding_modes_reject_long_sequences() {
        let m = tiny(PositionMode::BaselinePeOnly, 1);
        assert!(matches!(m.forward(&[0; 6]), Err(Error::Length { len: 6, max: 5 })));
        let m = tiny(PositionMode::CaseBTisaOnly, 1);
        assert!(m.forward(&[0; 20]).is_ok());
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        assert!(tiny(PositionMode::BagOfWords, 1).forward(&[7]).is_err());
    }

    #[test]
    fn initial_kernel_centers() {
        let mut rng = SeededRng::new(0);
        let ks = initial_kernels(3, &mut rng);
        let centers: Vec<f64> = ks.iter().map(|k| k.center).collect();
        assert_eq!(centers, vec![-3.0, 0.0, 3.0]);
        assert!(ks.iter().all(|k| k.width == 0.1 && k.amplitude.abs() < 0.1));
    }

    #[test]
    fn stack_round_trip() {
        let mut m = tiny(PositionMode::CaseBTisaOnly, 2);
        let mut stack = m.tisa_stack().unwrap();
        assert_eq!(stack.parameter_count(), 3 * 2 * 2 * 2);
        stack.get_mut(1, 0).unwrap().kernels[0].amplitude = 5.0;
        m.set_tisa_stack(&stack).unwrap();
        assert_eq!(m.tisa_stack().unwrap(), stack);
        assert!(tiny(PositionMode::BagOfWords, 2).tisa_stack().is_none());
    }
}
