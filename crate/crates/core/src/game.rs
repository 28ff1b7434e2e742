//! Game primitives: hidden Gaussian state, private noisy signals and
//! quadratic stage rewards.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows};

/// Matrices whose asymmetry is at most this are silently symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Lower bound on eigenvalues of the prior covariance.
pub const PSD_TOL: f64 = -1e-10;
/// Lower bound on eigenvalues of the signal noise covariances.
pub const PD_TOL: f64 = 1e-10;

/// Primitives of an N-player LQG game with hidden state `V ~ N(0, prior_cov)`
/// and private signals `x^i_t = v + w^i_t`, `w^i_t ~ N(0, noise_cov[i])`.
///
/// The stacked action vector is ordered by player index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub n_players: usize,
    pub horizon: usize,
    pub dim_v: usize,
    pub dim_a: usize,
    #[serde(with = "serde_rows")]
    pub prior_cov: DMatrix<f64>,
    #[serde(with = "serde_rows::vec")]
    pub noise_cov: Vec<DMatrix<f64>>,
    #[serde(with = "serde_rows::vec")]
    pub reward_mat: Vec<DMatrix<f64>>,
}

impl GameSpec {
    /// Side of each reward matrix, `N_v + N * N_a`.
    pub fn joint_dim(&self) -> usize {
        self.dim_v + self.n_players * self.dim_a
    }

    /// Offset of player `j`'s action inside `[v; a]`.
    pub fn action_offset(&self, j: usize) -> usize {
        self.dim_v + j * self.dim_a
    }

    pub fn validate(self) -> Result<Self> {
        validate_game(self)
    }
}

fn positive(field: &'static str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(Error::InvalidArgument {
            arg: field,
            reason: "must be a positive integer".into(),
        });
    }
    Ok(())
}

fn check_square(field: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::dims(
            field,
            format!("{n}x{n}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument {
            arg: "matrix",
            reason: format!("`{field}` has non-finite entries"),
        });
    }
    Ok(())
}

fn symmetric_or_err(field: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = linalg::asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            field: field.to_string(),
            asymmetry: asym,
        });
    }
    Ok(linalg::symmetrize(m))
}

/// Checks every invariant of [`GameSpec`] and returns it with
/// near-symmetric matrices symmetrized.
pub fn validate_game(mut spec: GameSpec) -> Result<GameSpec> {
    positive("n_players", spec.n_players)?;
    positive("horizon", spec.horizon)?;
    positive("dim_v", spec.dim_v)?;
    positive("dim_a", spec.dim_a)?;
    let n = spec.n_players;
    let nv = spec.dim_v;
    let nb = spec.joint_dim();

    check_square("prior_cov", &spec.prior_cov, nv)?;
    if spec.noise_cov.len() != n {
        return Err(Error::dims("noise_cov", format!("{n} matrices"), spec.noise_cov.len()));
    }
    if spec.reward_mat.len() != n {
        return Err(Error::dims("reward_mat", format!("{n} matrices"), spec.reward_mat.len()));
    }
    for (i, q) in spec.noise_cov.iter().enumerate() {
        check_square(&format!("noise_cov[{i}]"), q, nv)?;
    }
    for (i, b) in spec.reward_mat.iter().enumerate() {
        check_square(&format!("reward_mat[{i}]"), b, nb)?;
    }

    spec.prior_cov = symmetric_or_err("prior_cov", &spec.prior_cov)?;
    let lo = linalg::min_eigenvalue(&spec.prior_cov);
    if lo < PSD_TOL {
        return Err(Error::Definiteness {
            field: "prior_cov".into(),
            eigenvalue: lo,
            bound: PSD_TOL,
        });
    }
    for i in 0..n {
        let field = format!("noise_cov[{i}]");
        let q = symmetric_or_err(&field, &spec.noise_cov[i])?;
        let lo = linalg::min_eigenvalue(&q);
        if lo < PD_TOL {
            return Err(Error::Definiteness {
                field,
                eigenvalue: lo,
                bound: PD_TOL,
            });
        }
        spec.noise_cov[i] = q;
    }
    for i in 0..n {
        spec.reward_mat[i] = symmetric_or_err(&format!("reward_mat[{i}]"), &spec.reward_mat[i])?;
    }
    Ok(spec)
}

/// Stage reward `[v; a]' B^i [v; a]`.
pub fn reward(spec: &GameSpec, player: usize, v: &DVector<f64>, a: &DVector<f64>) -> Result<f64> {
    if player >= spec.n_players {
        return Err(Error::dims("player", format!("< {}", spec.n_players), player));
    }
    if v.len() != spec.dim_v {
        return Err(Error::dims("v", spec.dim_v, v.len()));
    }
    if a.len() != spec.n_players * spec.dim_a {
        return Err(Error::dims("a", spec.n_players * spec.dim_a, a.len()));
    }
    Ok(quad_reward(&spec.reward_mat[player], v.as_slice(), a.as_slice()))
}

/// Unchecked quadratic form over the concatenation `[v; a]`.
pub(crate) fn quad_reward(b: &DMatrix<f64>, v: &[f64], a: &[f64]) -> f64 {
    let nv = v.len();
    let at = |k: usize| if k < nv { v[k] } else { a[k - nv] };
    let n = nv + a.len();
    let mut acc = 0.0;
    for r in 0..n {
        let zr = at(r);
        if zr == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for c in 0..n {
            row += b[(r, c)] * at(c);
        }
        acc += zr * row;
    }
    acc
}

/// Partition of a reward matrix by `v, a^1, ..., a^N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBlocks {
    pub vv: DMatrix<f64>,
    /// `va[j]` is `B_{v, a^j}`.
    pub va: Vec<DMatrix<f64>>,
    /// `aa[j][k]` is `B_{a^j, a^k}`.
    pub aa: Vec<Vec<DMatrix<f64>>>,
}

impl RewardBlocks {
    pub fn reassemble(&self) -> DMatrix<f64> {
        let nv = self.vv.nrows();
        let n = self.va.len();
        let na = self.va.first().map(|b| b.ncols()).unwrap_or(0);
        let mut out = DMatrix::zeros(nv + n * na, nv + n * na);
        linalg::set_block(&mut out, 0, 0, &self.vv);
        for j in 0..n {
            linalg::set_block(&mut out, 0, nv + j * na, &self.va[j]);
            linalg::set_block(&mut out, nv + j * na, 0, &self.va[j].transpose());
            for k in 0..n {
                linalg::set_block(&mut out, nv + j * na, nv + k * na, &self.aa[j][k]);
            }
        }
        out
    }

    /// Reward evaluated block by block.
    pub fn eval(&self, v: &DVector<f64>, a: &[DVector<f64>]) -> f64 {
        let mut acc = (v.transpose() * &self.vv * v)[(0, 0)];
        for j in 0..a.len() {
            acc += 2.0 * (v.transpose() * &self.va[j] * &a[j])[(0, 0)];
            for k in 0..a.len() {
                acc += (a[j].transpose() * &self.aa[j][k] * &a[k])[(0, 0)];
            }
        }
        acc
    }
}

pub fn reward_blocks(spec: &GameSpec, player: usize) -> RewardBlocks {
    let b = &spec.reward_mat[player];
    let (nv, na, n) = (spec.dim_v, spec.dim_a, spec.n_players);
    RewardBlocks {
        vv: linalg::block(b, 0, 0, nv, nv),
        va: (0..n)
            .map(|j| linalg::block(b, 0, nv + j * na, nv, na))
            .collect(),
        aa: (0..n)
            .map(|j| {
                (0..n)
                    .map(|k| linalg::block(b, nv + j * na, nv + k * na, na, na))
                    .collect()
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_two_player(b: DMatrix<f64>) -> GameSpec {
        GameSpec {
            n_players: 2,
            horizon: 2,
            dim_v: 1,
            dim_a: 1,
            prior_cov: DMatrix::from_element(1, 1, 1.0),
            noise_cov: vec![DMatrix::from_element(1, 1, 1.0); 2],
            reward_mat: vec![b.clone(), b],
        }
    }

    #[test]
    fn accepts_consistent_spec() {
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, -1.0, 0.1, 0.0, 0.1, -2.0]);
        let spec = scalar_two_player(b);
        assert_eq!(validate_game(spec.clone()).unwrap(), spec);
    }

    #[test]
    fn rejects_singular_noise() {
        let mut spec = scalar_two_player(DMatrix::identity(3, 3));
        spec.noise_cov[0] = DMatrix::zeros(1, 1);
        match validate_game(spec) {
            Err(Error::Definiteness { field, eigenvalue, .. }) => {
                assert_eq!(field, "noise_cov[0]");
                assert_eq!(eigenvalue, 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_reward_size() {
        let mut spec = scalar_two_player(DMatrix::identity(3, 3));
        spec.reward_mat[0] = DMatrix::identity(2, 2);
        let err = validate_game(spec).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { ref field, .. } if field == "reward_mat[0]"));
    }

    #[test]
    fn symmetrizes_small_noise_rejects_large() {
        let mut b = DMatrix::identity(3, 3);
        b[(0, 1)] = 1e-11;
        let spec = validate_game(scalar_two_player(b.clone())).unwrap();
        assert_eq!(spec.reward_mat[0][(0, 1)], spec.reward_mat[0][(1, 0)]);
        b[(0, 1)] = 1e-3;
        assert!(matches!(
            validate_game(scalar_two_player(b)),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn reward_examples() {
        let spec = scalar_two_player(DMatrix::identity(3, 3));
        let v = DVector::from_element(1, 1.0);
        assert_eq!(reward(&spec, 0, &v, &DVector::from_vec(vec![1.0, 1.0])).unwrap(), 3.0);
        assert_eq!(reward(&spec, 0, &DVector::zeros(1), &DVector::zeros(2)).unwrap(), 0.0);
        let neg = scalar_two_player(-DMatrix::<f64>::identity(3, 3));
        assert_eq!(reward(&neg, 1, &v, &DVector::from_vec(vec![0.0, 2.0])).unwrap(), -5.0);
        assert!(reward(&spec, 0, &v, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn block_examples() {
        let spec = scalar_two_player(DMatrix::identity(3, 3));
        let blocks = reward_blocks(&spec, 0);
        assert_eq!(blocks.vv[(0, 0)], 1.0);
        assert_eq!(blocks.aa[0][0][(0, 0)], 1.0);
        assert_eq!(blocks.aa[1][1][(0, 0)], 1.0);
        assert_eq!(blocks.aa[0][1][(0, 0)], 0.0);
        assert_eq!(blocks.va[0][(0, 0)], 0.0);

        let ones = scalar_two_player(DMatrix::from_element(3, 3, 1.0));
        let blocks = reward_blocks(&ones, 1);
        assert!(blocks.reassemble().iter().all(|&x| x == 1.0));
        assert_eq!(blocks.va[1][(0, 0)], 1.0);
    }

    fn random_symmetric(n: usize, vals: &[f64]) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |r, c| vals[(r * n + c) % vals.len()]);
        linalg::symmetrize(&m)
    }

    proptest! {
        #[test]
        fn blocks_reassemble_and_agree(vals in prop::collection::vec(-3.0f64..3.0, 25),
                                       v in prop::collection::vec(-2.0f64..2.0, 1),
                                       a in prop::collection::vec(-2.0f64..2.0, 4)) {
            let spec = GameSpec {
                n_players: 2,
                horizon: 1,
                dim_v: 1,
                dim_a: 2,
                prior_cov: DMatrix::identity(1, 1),
                noise_cov: vec![DMatrix::identity(1, 1); 2],
                reward_mat: vec![random_symmetric(5, &vals), DMatrix::identity(5, 5)],
            };
            let blocks = reward_blocks(&spec, 0);
            prop_assert_eq!(blocks.reassemble(), spec.reward_mat[0].clone());
            let v = DVector::from_vec(v);
            let av = DVector::from_vec(a.clone());
            let parts = vec![DVector::from_vec(a[0..2].to_vec()), DVector::from_vec(a[2..4].to_vec())];
            let direct = reward(&spec, 0, &v, &av).unwrap();
            prop_assert!((direct - blocks.eval(&v, &parts)).abs() < 1e-12 * (1.0 + direct.abs()));
        }

        #[test]
        fn reward_invariant_under_symmetrization(vals in prop::collection::vec(-3.0f64..3.0, 9),
                                                 z in prop::collection::vec(-2.0f64..2.0, 3)) {
            let raw = DMatrix::from_row_slice(3, 3, &vals);
            let sym = linalg::symmetrize(&raw);
            let r1 = quad_reward(&raw, &z[0..1], &z[1..3]);
            let r2 = quad_reward(&sym, &z[0..1], &z[1..3]);
            prop_assert!((r1 - r2).abs() < 1e-12 * (1.0 + r1.abs()));
        }
    }
}
