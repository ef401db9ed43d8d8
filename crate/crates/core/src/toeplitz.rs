//! Degree-of-Toeplitzness analysis.
//!
//! The closest Toeplitz matrix under the Frobenius norm takes, on each
//! diagonal, the mean of that diagonal. The fit quality is reported as an R²
//! against the grand-mean baseline.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Values indexed by integer offset `k = j - i`, covering
/// `first_offset ..= first_offset + len - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetProfile {
    first_offset: i64,
    values: Vec<f64>,
}

impl OffsetProfile {
    pub fn new(first_offset: i64, values: Vec<f64>) -> Self {
        Self { first_offset, values }
    }

    /// Builds a profile from `(offset, value)` pairs that must form a
    /// contiguous run of offsets (any order).
    pub fn from_pairs(pairs: &[(i64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::domain("profile is empty"));
        }
        let mut sorted = pairs.to_vec();
        sorted.sort_by_key(|p| p.0);
        for w in sorted.windows(2) {
            if w[1].0 != w[0].0 + 1 {
                return Err(Error::domain(format!(
                    "profile offsets must be contiguous; gap or duplicate between {} and {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Self::new(sorted[0].0, sorted.into_iter().map(|p| p.1).collect()))
    }

    pub fn first_offset(&self) -> i64 {
        self.first_offset
    }

    pub fn last_offset(&self) -> i64 {
        self.first_offset + self.values.len() as i64 - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, offset: i64) -> Option<f64> {
        let idx = offset.checked_sub(self.first_offset)?;
        usize::try_from(idx).ok().and_then(|i| self.values.get(i).copied())
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, &v)| (self.first_offset + i as i64, v))
    }

    /// Shifts every offset label by `delta`.
    pub fn shifted(&self, delta: i64) -> Self {
        Self::new(self.first_offset + delta, self.values.clone())
    }
}

#[derive(Debug, Clone)]
pub struct ToeplitzFit {
    /// Per-diagonal means, offsets `-(n-1) ..= n-1`.
    pub profile: OffsetProfile,
    /// Dense Toeplitz matrix with `fitted[i][j] == profile[j - i]`.
    pub fitted: Matrix,
    pub rss: f64,
    pub tss: f64,
    pub r2: f64,
}

/// Below `TSS_TOLERANCE · n²` the total sum of squares is treated as zero and
/// R² is reported as 1.
pub const TSS_TOLERANCE: f64 = 1e-12;

fn require_square(a: &Matrix) -> Result<usize> {
    if !a.is_square() {
        return Err(Error::Shape {
            op: "toeplitz",
            left: a.shape(),
            right: (a.cols(), a.rows()),
        });
    }
    Ok(a.rows())
}

/// Mean of each diagonal of a square matrix, indexed by `k = j - i`.
///
/// Each mean is accumulated as deviations from the diagonal's first entry,
/// so a constant diagonal yields its value exactly.
pub fn diagonal_profile(a: &Matrix) -> Result<OffsetProfile> {
    let n = require_square(a)?;
    let base = |idx: usize| {
        let k = idx as i64 - (n as i64 - 1);
        if k >= 0 {
            a.get(0, k as usize)
        } else {
            a.get((-k) as usize, 0)
        }
    };
    let mut sums = vec![0.0; 2 * n - 1];
    for i in 0..n {
        for j in 0..n {
            let idx = j + n - 1 - i;
            sums[idx] += a.get(i, j) - base(idx);
        }
    }
    let values = sums
        .into_iter()
        .enumerate()
        .map(|(idx, s)| {
            let k = idx as i64 - (n as i64 - 1);
            base(idx) + s / (n - k.unsigned_abs() as usize) as f64
        })
        .collect();
    Ok(OffsetProfile::new(-(n as i64 - 1), values))
}

/// Expands a profile into the `n × n` Toeplitz matrix `t[i][j] = profile[j - i]`.
pub fn toeplitz_from_profile(profile: &OffsetProfile, n: usize) -> Result<Matrix> {
    let span = n as i64 - 1;
    if profile.first_offset() > -span || profile.last_offset() < span {
        return Err(Error::domain(format!(
            "profile covers offsets {}..={} but a {n}x{n} matrix needs {}..={}",
            profile.first_offset(),
            profile.last_offset(),
            -span,
            span
        )));
    }
    Ok(Matrix::from_fn(n, n, |i, j| {
        profile.get(j as i64 - i as i64).expect("range checked")
    }))
}

pub fn toeplitzness(a: &Matrix) -> Result<ToeplitzFit> {
    let n = require_square(a)?;
    let profile = diagonal_profile(a)?;
    let fitted = toeplitz_from_profile(&profile, n)?;

    let rss: f64 = a
        .as_slice()
        .iter()
        .zip(fitted.as_slice())
        .map(|(x, t)| (x - t) * (x - t))
        .sum();
    let mean = a.mean();
    let tss: f64 = a.as_slice().iter().map(|x| (x - mean) * (x - mean)).sum();

    let r2 = if tss <= TSS_TOLERANCE * (n * n) as f64 {
        1.0
    } else {
        (1.0 - rss / tss).clamp(0.0, 1.0)
    };

    Ok(ToeplitzFit {
        profile,
        fitted,
        rss,
        tss,
        r2,
    })
}
