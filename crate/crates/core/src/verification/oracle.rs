//! Brute-force Gaussian conditioning. Every signal, estimate, offset and
//! action on the equilibrium path is a linear function of the primitive
//! vector `ζ = (V, W^j_τ for all j, τ)` plus a constant; estimates are
//! obtained by conditioning the joint Gaussian directly, without any
//! recursive filter.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::profile::StrategyProfile;
use crate::GameSpec;

/// Largest joint Gaussian the oracle will condition.
pub const DIM_GUARD: usize = 200;

/// Relative eigenvalue cutoff for the oracle's own pseudo-inverse.
const EIG_RTOL: f64 = 1e-11;

/// Affine function `map ζ + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub map: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl Affine {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            map: DMatrix::zeros(rows, cols),
            shift: DVector::zeros(rows),
        }
    }

    pub fn eval(&self, zeta: &DVector<f64>) -> DVector<f64> {
        &self.map * zeta + &self.shift
    }

    fn stack(parts: &[&Affine]) -> Affine {
        let cols = parts.first().map_or(0, |p| p.map.ncols());
        let rows: usize = parts.iter().map(|p| p.map.nrows()).sum();
        let mut out = Affine::zeros(rows, cols);
        let mut r = 0;
        for p in parts {
            out.map.view_mut((r, 0), (p.map.nrows(), cols)).copy_from(&p.map);
            out.shift.rows_mut(r, p.shift.len()).copy_from(&p.shift);
            r += p.map.nrows();
        }
        out
    }
}

/// Oracle output for one stage, indexed by player.
#[derive(Debug, Clone)]
pub struct OracleStage {
    pub signal: Vec<Affine>,
    pub v_hat: Vec<Affine>,
    /// Offsets `f^j`, with `E[v̂^{-j} | h^j] = cross_coeff[j] v̂^j + f^j`.
    pub offset: Vec<Affine>,
    pub cross_coeff: Vec<DMatrix<f64>>,
    pub action: Vec<Affine>,
}

#[derive(Debug, Clone)]
pub struct ConditioningOracle {
    /// Covariance of `ζ`.
    pub zeta_cov: DMatrix<f64>,
    pub stages: Vec<OracleStage>,
}

/// Index of `W^j_τ` inside `ζ`.
pub fn noise_index(spec: &GameSpec, player: usize, stage: usize) -> usize {
    spec.dim_v * (1 + stage * spec.n_players + player)
}

pub fn zeta_dim(spec: &GameSpec) -> usize {
    spec.dim_v * (1 + spec.horizon * spec.n_players)
}

/// Assembles `ζ` from a hidden state and per-stage, per-player noises.
pub fn zeta_from(spec: &GameSpec, v: &DVector<f64>, noise: &[Vec<DVector<f64>>]) -> DVector<f64> {
    let mut z = DVector::zeros(zeta_dim(spec));
    z.rows_mut(0, spec.dim_v).copy_from(v);
    for (t, row) in noise.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            z.rows_mut(noise_index(spec, j, t), spec.dim_v).copy_from(w);
        }
    }
    z
}

fn pinv_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut inv = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam.abs() > EIG_RTOL * top && top > 0.0 {
            let u = eig.eigenvectors.column(k);
            inv += (u * u.transpose()) / lam;
        }
    }
    inv
}

/// Linear regression coefficient `Cov(target, reg) Cov(reg)^+` for
/// zero-mean parts `target = T ζ`, `reg = R ζ`.
fn regress(target: &DMatrix<f64>, reg: &DMatrix<f64>, cov: &DMatrix<f64>) -> DMatrix<f64> {
    let cross = target * cov * reg.transpose();
    let auto = reg * cov * reg.transpose();
    cross * pinv_sym(&auto)
}

/// Runs the oracle for `profile` on `spec`.
pub fn conditioning_oracle(spec: &GameSpec, profile: &StrategyProfile) -> Result<ConditioningOracle> {
    profile.check(spec)?;
    let (n, nv, na) = (spec.n_players, spec.dim_v, spec.dim_a);
    let dz = zeta_dim(spec);
    // The largest conditioned vector: all signals and actions plus the state.
    let size = dz + spec.horizon * n * na;
    if size > DIM_GUARD {
        return Err(Error::DimensionGuard { size, limit: DIM_GUARD });
    }
    let mut blocks = vec![spec.prior_cov.clone()];
    for _ in 0..spec.horizon {
        blocks.extend(spec.noise_cov.iter().cloned());
    }
    let zeta_cov = crate::linalg::block_diag(&blocks);

    let state = {
        let mut a = Affine::zeros(nv, dz);
        a.map.view_mut((0, 0), (nv, nv)).fill_with_identity();
        a
    };
    let mut signals: Vec<Vec<Affine>> = vec![Vec::new(); n];
    let mut actions: Vec<Affine> = Vec::new();
    let mut stages = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let mut st = OracleStage {
            signal: Vec::new(),
            v_hat: Vec::new(),
            offset: Vec::new(),
            cross_coeff: Vec::new(),
            action: Vec::new(),
        };
        for (j, sig) in signals.iter_mut().enumerate() {
            let mut x = state.clone();
            let w = noise_index(spec, j, t);
            x.map.view_mut((0, w), (nv, nv)).fill_with_identity();
            sig.push(x.clone());
            st.signal.push(x);
        }
        let past: Vec<&Affine> = actions.iter().collect();
        for j in 0..n {
            let mut parts: Vec<&Affine> = signals[j].iter().collect();
            parts.extend(past.iter().copied());
            let obs = Affine::stack(&parts);
            let k = regress(&state.map, &obs.map, &zeta_cov);
            st.v_hat.push(Affine {
                map: &k * &obs.map,
                shift: DVector::zeros(nv),
            });
        }
        // E[v̂^{-j} | V, a_{<t}] = cross_coeff V + offset(a).
        let mut reg_parts = vec![&state];
        reg_parts.extend(past.iter().copied());
        let reg = Affine::stack(&reg_parts);
        for j in 0..n {
            let others: Vec<&Affine> = (0..n).filter(|&k| k != j).map(|k| &st.v_hat[k]).collect();
            let target = Affine::stack(&others);
            let w = regress(&target.map, &reg.map, &zeta_cov);
            let w_v = w.columns(0, nv).into_owned();
            let w_a = w.columns(nv, w.ncols() - nv).into_owned();
            let mut off = Affine::zeros(target.map.nrows(), dz);
            if t > 0 {
                let act = Affine::stack(&past);
                off.map = &w_a * &act.map;
            }
            st.cross_coeff.push(w_v);
            st.offset.push(off);
        }
        let f_all = Affine::stack(&st.offset.iter().collect::<Vec<_>>());
        for j in 0..n {
            let s = profile.get(j, t);
            let a = Affine {
                map: &s.l_mat * &st.v_hat[j].map + &s.m_f * &f_all.map,
                shift: s.constant(),
            };
            st.action.push(a);
        }
        actions.extend(st.action.iter().cloned());
        stages.push(st);
    }
    Ok(ConditioningOracle { zeta_cov, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;

    #[test]
    fn first_stage_weights() {
        let spec = instances::canonical(2, 1);
        let oracle = conditioning_oracle(&spec, &StrategyProfile::zeros(&spec)).unwrap();
        let st = &oracle.stages[0];
        // v̂ = (V + W)/2 with unit variances.
        assert!((st.v_hat[0].map[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((st.v_hat[0].map[(0, noise_index(&spec, 0, 0))] - 0.5).abs() < 1e-14);
        assert!((st.cross_coeff[0][(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn silent_actions_accumulate_signals() {
        // Zero strategies reveal nothing, so v̂ averages own signals only.
        let spec = instances::canonical(3, 1);
        let oracle = conditioning_oracle(&spec, &StrategyProfile::zeros(&spec)).unwrap();
        let k = &oracle.stages[2].v_hat[1].map;
        assert!((k[(0, 0)] - 0.75).abs() < 1e-12);
        for t in 0..3 {
            assert!((k[(0, noise_index(&spec, 1, t))] - 0.25).abs() < 1e-12);
            assert!(k[(0, noise_index(&spec, 0, t))].abs() < 1e-12);
        }
    }

    #[test]
    fn guard_rejects_large_instances() {
        let spec = instances::random_game(4, 3, 2, 12, 0);
        let err = conditioning_oracle(&spec, &StrategyProfile::zeros(&spec)).unwrap_err();
        assert!(matches!(err, Error::DimensionGuard { .. }));
    }
}
