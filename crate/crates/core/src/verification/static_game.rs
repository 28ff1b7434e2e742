//! Closed-form equilibrium of the one-stage game.
//!
//! With a single stage, player `i` only sees `x^i = V + W^i`, so
//! `v̂^i = Σ(Σ+Q^i)^{-1} x^i` and `E[v̂^j | x^i] = K^j v̂^i` with
//! `K^j = Σ(Σ+Q^j)^{-1}`. Plugging `a^j = L^j v̂^j + c^j` into player `i`'s
//! first-order condition gives, for every `i`,
//!
//! ```text
//! B^i_{ii} L^i + Σ_{j≠i} B^i_{ij} L^j K^j = -B^i_{i,v}
//! Σ_j B^i_{ij} c^j = 0
//! ```
//!
//! Both are assembled as dense systems and solved once.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::profile::{AffineStrategy, StrategyProfile};
use crate::GameSpec;

/// Relative threshold on the smallest singular value of the stacked system.
const SINGULAR_RTOL: f64 = 1e-12;

fn signal_weight(spec: &GameSpec, player: usize) -> Result<DMatrix<f64>> {
    let total = &spec.prior_cov + &spec.noise_cov[player];
    let inv = total.try_inverse().ok_or_else(|| {
        Error::OraclePrecondition(format!("prior plus noise covariance of player {player} is singular"))
    })?;
    Ok(&spec.prior_cov * inv)
}

fn solve_dense(sys: DMatrix<f64>, rhs: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let sv = sys.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if max == 0.0 || min <= SINGULAR_RTOL * max {
        return Err(Error::OraclePrecondition(format!("singular {what} system")));
    }
    sys.full_piv_lu()
        .solve(&rhs)
        .ok_or_else(|| Error::OraclePrecondition(format!("singular {what} system")))
}

/// Equilibrium profile of a one-stage game. Errors if the horizon is not 1
/// or the stacked first-order system is singular.
pub fn one_stage_oracle(spec: &GameSpec) -> Result<StrategyProfile> {
    if spec.horizon != 1 {
        return Err(Error::OraclePrecondition(format!(
            "one-stage oracle needs horizon 1, got {}",
            spec.horizon
        )));
    }
    let (n, nv, na) = (spec.n_players, spec.dim_v, spec.dim_a);
    let weights = (0..n).map(|j| signal_weight(spec, j)).collect::<Result<Vec<_>>>()?;
    let act = |j: usize| nv + j * na;

    // Unknowns vec(L^1), ..., vec(L^N), each na*nv long, column-major.
    let block = na * nv;
    let mut sys = DMatrix::zeros(n * block, n * block);
    let mut rhs = DVector::zeros(n * block);
    let mut c_sys = DMatrix::zeros(n * na, n * na);
    for i in 0..n {
        let b = &spec.reward_mat[i];
        for j in 0..n {
            let bij = b.view((act(i), act(j)), (na, na)).into_owned();
            // vec(B L K) = (K' ⊗ B) vec(L); K = I for the player's own term.
            let k = if i == j { DMatrix::identity(nv, nv) } else { weights[j].clone() };
            sys.view_mut((i * block, j * block), (block, block))
                .copy_from(&k.transpose().kronecker(&bij));
            c_sys.view_mut((i * na, j * na), (na, na)).copy_from(&bij);
        }
        let b_av = b.view((act(i), 0), (na, nv)).into_owned();
        rhs.rows_mut(i * block, block).copy_from_slice((-b_av).as_slice());
    }
    let l = solve_dense(sys, rhs, "gain")?;
    // The constants solve a homogeneous system, so they vanish when it is
    // nonsingular; the check still guards against a degenerate game.
    let c = solve_dense(c_sys, DVector::zeros(n * na), "constant")?;

    let layout = Layout::of(spec);
    let stage = (0..n)
        .map(|i| {
            let mut s = AffineStrategy::zeros(&layout);
            s.l_mat = DMatrix::from_column_slice(na, nv, &l.as_slice()[i * block..(i + 1) * block]);
            s.m_const = c.as_slice()[i * na..(i + 1) * na].to_vec();
            s
        })
        .collect();
    Ok(StrategyProfile { stages: vec![stage] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;

    #[test]
    fn decoupled_game_gives_single_agent_rule() {
        let spec = instances::decoupled(3, 2, 2, 1, 4);
        let p = one_stage_oracle(&spec).unwrap();
        for i in 0..3 {
            let b = &spec.reward_mat[i];
            let o = 2 + 2 * i;
            let b_aa = b.view((o, o), (2, 2)).into_owned();
            let b_av = b.view((o, 0), (2, 2)).into_owned();
            let want = -b_aa.try_inverse().unwrap() * b_av;
            assert!((&p.get(i, 0).l_mat - want).amax() < 1e-12);
        }
    }

    #[test]
    fn no_state_coupling_means_no_action() {
        let mut spec = instances::canonical(1, 3);
        for b in &mut spec.reward_mat {
            b[(0, 1)] = 0.0;
            b[(1, 0)] = 0.0;
            b[(0, 2)] = 0.0;
            b[(2, 0)] = 0.0;
        }
        let p = one_stage_oracle(&spec).unwrap();
        for s in &p.stages[0] {
            assert_eq!(s.l_mat[(0, 0)], 0.0);
            assert_eq!(s.m_const[0], 0.0);
        }
    }

    #[test]
    fn symmetric_game_gives_symmetric_gains() {
        let spec = instances::symmetric(1, 12);
        let p = one_stage_oracle(&spec).unwrap();
        assert!((p.get(0, 0).l_mat[(0, 0)] - p.get(1, 0).l_mat[(0, 0)]).abs() < 1e-14);
    }

    #[test]
    fn rejects_longer_horizons_and_singular_games() {
        assert!(one_stage_oracle(&instances::canonical(2, 1)).is_err());
        let spec = instances::zero_reward(2, 1);
        assert!(matches!(one_stage_oracle(&spec), Err(Error::OraclePrecondition(_))));
    }
}
