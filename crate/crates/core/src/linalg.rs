//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

/// Relative singular-value cutoff used by [`pinv`].
pub const PINV_RTOL: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - m'`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..m.nrows() {
        for c in (r + 1)..m.ncols() {
            worst = worst.max((m[(r, c)] - m[(c, r)]).abs());
        }
    }
    worst
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Smallest eigenvalue of a symmetric matrix (0 for an empty matrix).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Moore-Penrose pseudo-inverse by truncated SVD. Singular values below
/// `PINV_RTOL * s_max` are treated as zero.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.as_ref().expect("svd u");
    let v_t = svd.v_t.as_ref().expect("svd v_t");
    let s_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let mut out = DMatrix::zeros(c, r);
    if s_max == 0.0 {
        return out;
    }
    let cut = PINV_RTOL * s_max;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            out += (v_t.row(k).transpose() * u.column(k).transpose()) / s;
        }
    }
    out
}

/// Symmetric square root factor `R` of a PSD matrix, with `R R' = m`.
/// Negative eigenvalues from round-off are clipped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut scaled = eig.eigenvectors.clone();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        scaled.column_mut(k).scale_mut(s);
    }
    scaled
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Vertical concatenation.
pub fn vstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), b.shape()).copy_from(b);
        r += b.nrows();
    }
    out
}

pub fn block(m: &DMatrix<f64>, r: usize, c: usize, nr: usize, nc: usize) -> DMatrix<f64> {
    m.view((r, c), (nr, nc)).into_owned()
}

pub fn set_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &DMatrix<f64>) {
    m.view_mut((r, c), b.shape()).copy_from(b);
}

pub fn add_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &DMatrix<f64>) {
    let mut v = m.view_mut((r, c), b.shape());
    v += b;
}

pub fn segment(v: &DVector<f64>, start: usize, len: usize) -> DVector<f64> {
    v.rows(start, len).into_owned()
}

/// Column-major vectorisation, matching `kronecker`-based identities
/// `vec(A X B) = (B' ⊗ A) vec(X)`.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pinv_matches_inverse_when_nonsingular() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = m.clone().try_inverse().unwrap();
        assert!(max_abs_diff(&pinv(&m), &inv) < 1e-14);
    }

    #[test]
    fn pinv_truncates_rank_deficient() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        let p = pinv(&m);
        assert_relative_eq!(p[(0, 0)], 1.0);
        assert_eq!(p[(1, 1)], 0.0);
        assert!(max_abs(&pinv(&DMatrix::zeros(3, 2))) == 0.0);
    }

    #[test]
    fn psd_factor_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let r = psd_factor(&m);
        assert!(max_abs_diff(&(&r * r.transpose()), &m) < 1e-14);
    }

    #[test]
    fn kron_vec_identity() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 0.5, 2.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.7]);
        let lhs = vec_of(&(&a * &x * &b));
        let rhs = b.transpose().kronecker(&a) * vec_of(&x);
        assert!((lhs - rhs).amax() < 1e-14);
    }
}

/// Serde adapters storing matrices as row-major nested arrays.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nr = rows.len();
        let nc = rows.first().map(|r| r.len()).unwrap_or(0);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != nc) {
            return Err(format!("ragged matrix: row {i} has {} entries, expected {nc}", r.len()));
        }
        Ok(DMatrix::from_fn(nr, nc, |r, c| rows[r][c]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            all.iter()
                .map(|rows| from_rows(rows).map_err(D::Error::custom))
                .collect()
        }
    }

    pub mod nested {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[Vec<DMatrix<f64>>], s: S) -> Result<S::Ok, S::Error> {
            ms.iter()
                .map(|row| row.iter().map(to_rows).collect::<Vec<_>>())
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Vec<Vec<DMatrix<f64>>>, D::Error> {
            let all = Vec::<Vec<Vec<Vec<f64>>>>::deserialize(d)?;
            all.iter()
                .map(|row| {
                    row.iter()
                        .map(|rows| from_rows(rows).map_err(D::Error::custom))
                        .collect()
                })
                .collect()
        }
    }
}

/// Sub-matrix on arbitrary row and column index lists.
pub fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

/// Serde adapter for floats that may be non-finite: JSON has no infinity or
/// NaN, so those are written as `null` and read back as NaN.
pub mod serde_nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}
