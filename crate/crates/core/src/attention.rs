//! Scaled dot-product attention with an additive positional score matrix.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(q.shape_error("attention (q vs k)", k));
    }
    if k.rows() != v.rows() {
        return Err(k.shape_error("attention (k vs v)", v));
    }
    Ok(())
}

fn check_square(name: &'static str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Shape {
            op: name,
            left: m.shape(),
            right: (rows, cols),
        });
    }
    Ok(())
}

fn scaled_scores(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let scale = (q.cols() as f64).sqrt();
    Ok(q.matmul_transpose(k)?.map(|s| s / scale))
}

/// `softmax(q kᵀ / √d_k) v`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    scaled_scores(q, k)?.softmax_rows().matmul(v)
}

/// `softmax(q kᵀ / √d_k + bias + mask) v`.
///
/// `bias` is the positional score matrix; `mask` holds `0` for visible and
/// `-inf` for hidden positions. Both are `q.rows × k.rows`.
pub fn attention_with_bias(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    bias: Option<&Matrix>,
    mask: Option<&Matrix>,
) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    let mut scores = scaled_scores(q, k)?;
    if let Some(bias) = bias {
        check_square("attention bias", bias, q.rows(), k.rows())?;
        scores = scores.add(bias)?;
    }
    if let Some(mask) = mask {
        check_square("attention mask", mask, q.rows(), k.rows())?;
        for (s, m) in scores.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *s += m;
        }
    }
    scores.softmax_rows().matmul(v)
}

/// Case a: queries and keys still carry absolute position embeddings and the
/// Toeplitz score matrix is added on top.
pub fn attention_case_a(q: &Matrix, k: &Matrix, v: &Matrix, fp: &Matrix) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    check_square("case a positional scores", fp, q.rows(), k.rows())?;
    scaled_scores(q, k)?.add(fp)?.softmax_rows().matmul(v)
}

/// Case b: queries, keys and values come from word embeddings only, and the
/// Toeplitz score matrix is the only source of positional information.
pub fn attention_case_b(qw: &Matrix, kw: &Matrix, vw: &Matrix, fp: &Matrix) -> Result<Matrix> {
    attention_case_a(qw, kw, vw, fp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Kernel, KernelParams};
    use crate::rng::SeededRng;

    #[test]
    fn zero_bias_is_plain_attention() {
        let mut rng = SeededRng::new(3);
        let q = rng.normal_matrix(5, 4, 1.0);
        let k = rng.normal_matrix(5, 4, 1.0);
        let v = rng.normal_matrix(5, 3, 1.0);
        let plain = attention(&q, &k, &v).unwrap();
        let a = attention_case_a(&q, &k, &v, &Matrix::zeros(5, 5)).unwrap();
        assert_eq!(plain, a);
    }

    #[test]
    fn positional_only_attention() {
        let mut rng = SeededRng::new(5);
        let n = 6;
        let zeros = Matrix::zeros(n, 4);
        let v = rng.normal_matrix(n, 3, 1.0);
        let fp = KernelParams::new(vec![Kernel::new(2.0, 0.5, -1.0)], 0, 0).materialize(n);
        let out = attention_case_b(&zeros, &zeros, &v, &fp).unwrap();
        let oracle = fp.softmax_rows().matmul(&v).unwrap();
        for (a, b) in out.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_position_returns_value_row() {
        let q = Matrix::row_vector(&[0.3, -1.0]);
        let k = Matrix::row_vector(&[2.0, 0.5]);
        let v = Matrix::row_vector(&[4.0, 5.0, 6.0]);
        let fp = Matrix::from_rows(&[[123.0]]);
        assert_eq!(attention_case_a(&q, &k, &v, &fp).unwrap(), v);
    }

    #[test]
    fn shape_errors() {
        let q = Matrix::zeros(3, 4);
        let k = Matrix::zeros(3, 5);
        let v = Matrix::zeros(3, 2);
        assert!(attention(&q, &k, &v).is_err());
        let k = Matrix::zeros(3, 4);
        assert!(attention_case_a(&q, &k, &v, &Matrix::zeros(2, 2)).is_err());
        assert!(attention_case_a(&q, &k, &Matrix::zeros(4, 2), &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn mask_hides_positions() {
        let q = Matrix::zeros(2, 2);
        let v = Matrix::from_rows(&[[1.0], [3.0]]);
        let mask = Matrix::from_rows(&[[0.0, f64::NEG_INFINITY], [0.0, 0.0]]);
        let out = attention_with_bias(&q, &q, &v, None, Some(&mask)).unwrap();
        assert_eq!(out.get(0, 0), 1.0);
        assert_eq!(out.get(1, 0), 2.0);
    }
}
