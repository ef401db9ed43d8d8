//! Positional analysis of trained embedding/projection matrices.
//!
//! Given position embeddings `E_P`, word embeddings `E_W` and per-head query
//! and key projections, these routines isolate the average positional
//! contribution to the attention logits by swapping every word embedding for
//! the vocabulary mean.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::toeplitz::{toeplitzness, ToeplitzFit};

/// Query/key projections of one head. Shared projections (one pair reused by
/// several heads or layers) are expressed by cloning the `Arc`s.
#[derive(Debug, Clone)]
pub struct Projection {
    pub w_q: Arc<Matrix>,
    pub w_k: Arc<Matrix>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    pub e_p: Arc<Matrix>,
    pub e_w: Arc<Matrix>,
    pub d_k: usize,
    pub heads: usize,
    pub layers: usize,
    projections: BTreeMap<(usize, usize), Projection>,
}

impl EmbeddingBundle {
    pub fn new(
        e_p: Arc<Matrix>,
        e_w: Arc<Matrix>,
        d_k: usize,
        heads: usize,
        layers: usize,
        projections: BTreeMap<(usize, usize), Projection>,
    ) -> Result<Self> {
        if e_p.cols() != e_w.cols() {
            return Err(e_p.shape_error("bundle (e_p vs e_w)", &e_w));
        }
        if projections.is_empty() {
            return Err(Error::domain("bundle needs at least one projection pair"));
        }
        let d = e_p.cols();
        for (&(layer, head), p) in &projections {
            if layer >= layers || head >= heads {
                return Err(Error::domain(format!(
                    "projection for layer {layer}, head {head} outside {layers} layers x {heads} heads"
                )));
            }
            for w in [&p.w_q, &p.w_k] {
                if w.shape() != (d, d_k) {
                    return Err(Error::Shape {
                        op: "bundle projection",
                        left: w.shape(),
                        right: (d, d_k),
                    });
                }
            }
        }
        Ok(Self {
            e_p,
            e_w,
            d_k,
            heads,
            layers,
            projections,
        })
    }

    /// Number of positions.
    pub fn n(&self) -> usize {
        self.e_p.rows()
    }

    /// Embedding width.
    pub fn d(&self) -> usize {
        self.e_p.cols()
    }

    pub fn projection(&self, layer: usize, head: usize) -> Result<&Projection> {
        self.projections
            .get(&(layer, head))
            .ok_or(Error::MissingProjection { layer, head })
    }

    pub fn heads_present(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.projections.keys().copied()
    }
}

pub fn average_word_embedding(e_w: &Matrix) -> Vec<f64> {
    e_w.column_means()
}

/// The average positional contribution to the attention logits of one head:
///
/// `(Ē M E_Pᵀ + E_P M Ēᵀ + E_P M E_Pᵀ) / √d_k` with `M = W_Q W_Kᵀ` and `Ē`
/// the vocabulary-mean word embedding repeated for every position.
pub fn extract_positional_scores(bundle: &EmbeddingBundle, layer: usize, head: usize) -> Result<Matrix> {
    let proj = bundle.projection(layer, head)?;
    let e_p = bundle.e_p.as_ref();
    let n = bundle.n();
    let e_bar = Matrix::repeat_row(&average_word_embedding(&bundle.e_w), n);

    let q_p = e_p.matmul(&proj.w_q)?;
    let k_p = e_p.matmul(&proj.w_k)?;
    let q_bar = e_bar.matmul(&proj.w_q)?;
    let k_bar = e_bar.matmul(&proj.w_k)?;

    let word_pos = q_bar.matmul_transpose(&k_p)?;
    let pos_word = q_p.matmul_transpose(&k_bar)?;
    let pos_pos = q_p.matmul_transpose(&k_p)?;

    let scale = (bundle.d_k as f64).sqrt();
    Ok(word_pos.add(&pos_word)?.add(&pos_pos)?.map(|v| v / scale))
}

/// Extracted scores and their Toeplitz fit for one head.
#[derive(Debug, Clone)]
pub struct HeadScores {
    pub layer: usize,
    pub head: usize,
    pub scores: Matrix,
    pub fit: ToeplitzFit,
}

/// Runs extraction for every head present in the bundle on up to `jobs`
/// worker threads. Output is ordered by `(layer, head)` regardless of
/// scheduling.
pub fn extract_all(bundle: &EmbeddingBundle, jobs: usize) -> Result<Vec<HeadScores>> {
    let keys: Vec<(usize, usize)> = bundle.heads_present().collect();
    let run = |&(layer, head): &(usize, usize)| -> Result<HeadScores> {
        let scores = extract_positional_scores(bundle, layer, head)?;
        let fit = toeplitzness(&scores)?;
        Ok(HeadScores {
            layer,
            head,
            scores,
            fit,
        })
    };
    if jobs <= 1 {
        return keys.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::domain(format!("cannot start worker pool: {e}")))?;
    pool.install(|| keys.par_iter().map(run).collect())
}

/// Replaces every position embedding with their mean, so the model sees the
/// same average input without any position-dependent variation.
///
/// Means are taken as deviations from the first row, so constant columns are
/// reproduced exactly and the operation is idempotent.
pub fn neutralize_position_embeddings(e_p: &Matrix) -> Matrix {
    let first = e_p.row(0);
    let n = e_p.rows() as f64;
    let mut dev = vec![0.0; e_p.cols()];
    for r in 0..e_p.rows() {
        for ((d, x), f) in dev.iter_mut().zip(e_p.row(r)).zip(first) {
            *d += x - f;
        }
    }
    let mean: Vec<f64> = first.iter().zip(&dev).map(|(f, d)| f + d / n).collect();
    Matrix::repeat_row(&mean, e_p.rows())
}

/// How position-embedding similarity is measured before the Toeplitz fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    /// `P = E_P E_Pᵀ`.
    InnerProduct,
    /// Inner products of unit-normalized rows.
    Cosine,
}

pub fn position_similarity(e_p: &Matrix, similarity: Similarity) -> Matrix {
    match similarity {
        Similarity::InnerProduct => e_p.gram(),
        Similarity::Cosine => e_p.normalize_rows().gram(),
    }
}

/// A window of one row of `f`, centered on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub row: usize,
    /// `(offset, value)` with `offset = j - row`.
    pub points: Vec<(i64, f64)>,
    /// True when the requested window ran past the matrix edge and was cut.
    pub clipped: bool,
}

/// For each requested row `i`, the values `f[i][i + k]` for
/// `k ∈ [-half_width, half_width]`, clipped to the matrix.
pub fn aligned_sections(f: &Matrix, rows: &[usize], half_width: usize) -> Result<Vec<Section>> {
    let n = f.cols();
    rows.iter()
        .map(|&i| {
            if i >= f.rows() {
                return Err(Error::OutOfBounds {
                    index: i,
                    len: f.rows(),
                });
            }
            let w = half_width as i64;
            let mut points = Vec::with_capacity(2 * half_width + 1);
            let mut clipped = false;
            for k in -w..=w {
                let j = i as i64 + k;
                if j < 0 || j >= n as i64 {
                    clipped = true;
                    continue;
                }
                points.push((k, f.get(i, j as usize)));
            }
            Ok(Section {
                row: i,
                points,
                clipped,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Kernel, KernelParams};

    fn bundle(e_p: Matrix, e_w: Matrix, w_q: Matrix, w_k: Matrix) -> EmbeddingBundle {
        let d_k = w_q.cols();
        let mut proj = BTreeMap::new();
        proj.insert(
            (0, 0),
            Projection {
                w_q: Arc::new(w_q),
                w_k: Arc::new(w_k),
            },
        );
        EmbeddingBundle::new(Arc::new(e_p), Arc::new(e_w), d_k, 1, 1, proj).unwrap()
    }

    #[test]
    fn average_embedding_examples() {
        assert_eq!(
            average_word_embedding(&Matrix::row_vector(&[1.0, -2.0])),
            vec![1.0, -2.0]
        );
        assert_eq!(
            average_word_embedding(&Matrix::from_rows(&[[1.5, -2.0], [-1.5, 2.0]])),
            vec![0.0, 0.0]
        );
        assert_eq!(
            average_word_embedding(&Matrix::from_rows(&[[1.0, 3.0], [3.0, 5.0]])),
            vec![2.0, 4.0]
        );
    }

    #[test]
    fn zero_position_embeddings_give_zero_scores() {
        let b = bundle(
            Matrix::zeros(3, 2),
            Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]),
            Matrix::identity(2),
            Matrix::identity(2),
        );
        assert_eq!(extract_positional_scores(&b, 0, 0).unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn zero_query_projection_gives_zero_scores() {
        let b = bundle(
            Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]),
            Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]),
            Matrix::zeros(2, 2),
            Matrix::identity(2),
        );
        assert_eq!(extract_positional_scores(&b, 0, 0).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn missing_projection_is_lookup_error() {
        let b = bundle(
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::identity(2),
        );
        assert!(matches!(
            extract_positional_scores(&b, 0, 1),
            Err(Error::MissingProjection { layer: 0, head: 1 })
        ));
    }

    #[test]
    fn neutralize_examples() {
        let constant = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]);
        assert_eq!(neutralize_position_embeddings(&constant), constant);
        let opposite = Matrix::from_rows(&[[1.0, -2.0], [-1.0, 2.0]]);
        assert_eq!(neutralize_position_embeddings(&opposite), Matrix::zeros(2, 2));
    }

    #[test]
    fn sections_of_toeplitz_are_identical() {
        let p = KernelParams::new(vec![Kernel::new(1.0, 0.3, -1.0)], 0, 0);
        let f = p.materialize(20);
        let sections = aligned_sections(&f, &[5, 9, 14], 4).unwrap();
        for s in &sections {
            assert!(!s.clipped);
            assert_eq!(s.points, sections[0].points);
            for &(k, v) in &s.points {
                assert_eq!(v, p.eval(k));
            }
        }
    }

    #[test]
    fn sections_half_width_zero_and_clipping() {
        let f = Matrix::from_fn(4, 4, |i, j| (10 * i + j) as f64);
        let s = aligned_sections(&f, &[2], 0).unwrap();
        assert_eq!(s[0].points, vec![(0, 22.0)]);
        let s = aligned_sections(&f, &[0], 2).unwrap();
        assert!(s[0].clipped);
        assert_eq!(s[0].points, vec![(0, 0.0), (1, 1.0), (2, 2.0)]);
        assert!(matches!(aligned_sections(&f, &[4], 1), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn cosine_similarity_has_unit_diagonal() {
        let e = Matrix::from_rows(&[[3.0, 4.0], [1.0, 0.0], [0.0, -2.0]]);
        let c = position_similarity(&e, Similarity::Cosine);
        for i in 0..3 {
            assert!((c.get(i, i) - 1.0).abs() < 1e-15);
        }
        assert_eq!(position_similarity(&e, Similarity::InnerProduct), e.gram());
    }
}
