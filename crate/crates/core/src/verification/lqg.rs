//! Reference policy for a player whose reward ignores everyone else's
//! actions.
//!
//! Such a player faces a single-agent problem with state `v̂^i_t`. The state
//! is a martingale whose increments do not depend on her own action (her own
//! action never informs her), so the problem is a finite-horizon LQ control
//! problem with transition `v̂_{t+1} = v̂_t + ε_t`. It is solved here with the
//! textbook backward Riccati recursion, written for a general transition
//! `x' = F x + G a + ε` and instantiated with `F = I`, `G = 0`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::profile::AffineStrategy;
use crate::GameSpec;

/// Optimal affine rules of `player`, one per stage.
pub fn single_agent_lqg_oracle(spec: &GameSpec, player: usize) -> Result<Vec<AffineStrategy>> {
    let (n, nv, na) = (spec.n_players, spec.dim_v, spec.dim_a);
    if player >= n {
        return Err(Error::OraclePrecondition(format!("no player {player}")));
    }
    let b = &spec.reward_mat[player];
    let own = nv + player * na;
    for j in (0..n).filter(|&j| j != player) {
        let o = nv + j * na;
        if b.rows(o, na).amax() != 0.0 || b.columns(o, na).amax() != 0.0 {
            return Err(Error::OraclePrecondition(format!(
                "reward of player {player} depends on the action of player {j}"
            )));
        }
    }
    let q_state = b.view((0, 0), (nv, nv)).into_owned();
    let cross = b.view((own, 0), (na, nv)).into_owned();
    let r_act = b.view((own, own), (na, na)).into_owned();

    let trans = DMatrix::<f64>::identity(nv, nv);
    let ctrl = DMatrix::<f64>::zeros(nv, na);
    let layout = Layout::of(spec);
    let mut value = DMatrix::<f64>::zeros(nv, nv);
    let mut rules = Vec::with_capacity(spec.horizon);
    for t in (0..spec.horizon).rev() {
        // Maximise x'Qx + 2a'Sx + a'Ra + E[x'' P x''] over a.
        let r_eff = &r_act + ctrl.transpose() * &value * &ctrl;
        let s_eff = &cross + ctrl.transpose() * &value * &trans;
        let r_inv = r_eff.clone().try_inverse().ok_or_else(|| {
            Error::OraclePrecondition(format!("singular action curvature at stage {t}"))
        })?;
        if r_eff.symmetric_eigenvalues().max() >= 0.0 {
            return Err(Error::OraclePrecondition(format!(
                "action curvature of player {player} is not negative definite at stage {t}"
            )));
        }
        let gain = -&r_inv * &s_eff;
        value = &q_state + trans.transpose() * &value * &trans - s_eff.transpose() * &r_inv * &s_eff;
        value = (&value + value.transpose()) * 0.5;
        let mut rule = AffineStrategy::zeros(&layout);
        rule.l_mat = gain;
        rules.push(rule);
    }
    rules.reverse();
    Ok(rules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::verification::static_game::one_stage_oracle;

    #[test]
    fn one_stage_matches_static_oracle() {
        let spec = instances::decoupled(2, 2, 2, 1, 5);
        let p = one_stage_oracle(&spec).unwrap();
        for i in 0..2 {
            let rules = single_agent_lqg_oracle(&spec, i).unwrap();
            assert!(rules[0].sup_diff(p.get(i, 0)) < 1e-12);
        }
    }

    #[test]
    fn terminal_rule_does_not_depend_on_horizon() {
        let short = single_agent_lqg_oracle(&instances::decoupled(2, 2, 1, 1, 8), 1).unwrap();
        let long = single_agent_lqg_oracle(&instances::decoupled(2, 2, 1, 5, 8), 1).unwrap();
        for rule in &long {
            assert!(rule.l_mat.relative_eq(&short[0].l_mat, 1e-12, 1e-12));
        }
    }

    #[test]
    fn coupled_rewards_are_rejected() {
        let spec = instances::canonical(2, 1);
        assert!(matches!(single_agent_lqg_oracle(&spec, 0), Err(Error::OraclePrecondition(_))));
    }
}
