//! Per-player Gauss-Markov model of the stacked state
//! `s^i_t = [v; v̂^i_{t-1}; v̂^{-i}_{t-1}; x^i_t]`:
//!
//! `s^i_{t+1} = A^i_t s^i_t + H^i_t [w^{-i}_t; w^i_{t+1}] + d^i_t`, observed
//! through `y^i_t = C^i_t s^i_t`.
//!
//! Stages are zero-based in code: `stage == 0` is the first decision stage.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::linalg::{self, block_diag};
use crate::GameSpec;

/// Transition, noise and observation structure for one player at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModel {
    pub player: usize,
    pub stage: usize,
    /// `A^i_t`, maps `s^i_t` to `s^i_{t+1}`.
    pub a_mat: DMatrix<f64>,
    /// `H^i_t`, acts on `[w^{-i}_t; w^i_{t+1}]`.
    pub h_mat: DMatrix<f64>,
    /// `C^i_t`; rows `[own action; others' actions; own signal]`, or only
    /// the signal rows at the first stage.
    pub c_mat: DMatrix<f64>,
    /// Row block of `a_mat` producing `v̂^i_t`.
    pub g_self: DMatrix<f64>,
    /// Row block of `a_mat` producing `v̂^{-i}_t`.
    pub g_others: DMatrix<f64>,
    /// Offset `d^i_t = d_act (a_{t-1} - m_{t-1}) + d_off f_{t-1}`.
    pub d_act: DMatrix<f64>,
    pub d_off: DMatrix<f64>,
}

impl StageModel {
    /// Evaluates the offset vector for realized action innovations
    /// `u = a_{t-1} - m_{t-1}` and previous public offsets.
    pub fn offset(&self, u_prev: &DVector<f64>, f_prev: &DVector<f64>) -> DVector<f64> {
        &self.d_act * u_prev + &self.d_off * f_prev
    }

    /// One step of the stacked model.
    pub fn propagate(
        &self,
        s: &DVector<f64>,
        noise: &DVector<f64>,
        u_prev: &DVector<f64>,
        f_prev: &DVector<f64>,
    ) -> DVector<f64> {
        &self.a_mat * s + &self.h_mat * noise + self.offset(u_prev, f_prev)
    }
}

/// `Σ (Σ + Q^j)^{-1}`, the first-stage weight on a player's own signal.
pub(crate) fn first_signal_weight(spec: &GameSpec, j: usize) -> DMatrix<f64> {
    let total = &spec.prior_cov + &spec.noise_cov[j];
    let inv = total
        .clone()
        .try_inverse()
        .expect("prior + noise covariance is positive definite after validation");
    &spec.prior_cov * inv
}

/// The `v̂` row of a player's Kalman gain, split into its columns on the
/// other players' action innovations and on the own-signal innovation.
#[derive(Debug, Clone)]
pub(crate) struct EstimateRows {
    pub on_actions: DMatrix<f64>,
    pub on_signal: DMatrix<f64>,
}

pub(crate) fn estimate_rows(layout: &Layout, stage: usize, gain: &DMatrix<f64>) -> EstimateRows {
    let (nv, na, n) = (layout.nv, layout.na, layout.n);
    if stage == 0 {
        EstimateRows {
            on_actions: DMatrix::zeros(nv, (n - 1) * na),
            on_signal: linalg::block(gain, layout.s_v(), 0, nv, nv),
        }
    } else {
        EstimateRows {
            on_actions: linalg::block(gain, layout.s_v(), layout.y_others(), nv, (n - 1) * na),
            on_signal: linalg::block(gain, layout.s_v(), layout.y_x(), nv, nv),
        }
    }
}

/// `D(L^{-i})` for the gains of all players.
pub(crate) fn others_block_diag(layout: &Layout, i: usize, gains: &[DMatrix<f64>]) -> DMatrix<f64> {
    let blocks: Vec<_> = layout.others(i).map(|j| gains[j].clone()).collect();
    block_diag(&blocks)
}

/// Stage-one model: `v̂^j_1 = Σ(Σ+Q^j)^{-1} x^j_1` for every player and no offset.
pub fn init_stage_model(spec: &GameSpec, player: usize) -> StageModel {
    let layout = Layout::of(spec);
    let (nv, n) = (layout.nv, layout.n);
    let sd = layout.s_dim();
    let eye = DMatrix::<f64>::identity(nv, nv);

    let mut a = DMatrix::zeros(sd, sd);
    let mut h = DMatrix::zeros(sd, layout.noise_dim());
    linalg::set_block(&mut a, layout.s_v(), layout.s_v(), &eye);
    linalg::set_block(&mut a, layout.s_x(), layout.s_v(), &eye);
    linalg::set_block(&mut a, layout.s_own(), layout.s_x(), &first_signal_weight(spec, player));
    for j in layout.others(player) {
        let k = first_signal_weight(spec, j);
        let row = layout.s_other(player, j);
        linalg::set_block(&mut a, row, layout.s_v(), &k);
        linalg::set_block(&mut h, row, layout.noise_other(player, j), &k);
    }
    linalg::set_block(&mut h, layout.s_x(), layout.noise_own(), &eye);

    let mut c = DMatrix::zeros(nv, sd);
    linalg::set_block(&mut c, 0, layout.s_x(), &eye);

    StageModel {
        player,
        stage: 0,
        g_self: linalg::block(&a, layout.s_own(), 0, nv, sd),
        g_others: linalg::block(&a, layout.s_others(), 0, (n - 1) * nv, sd),
        a_mat: a,
        h_mat: h,
        c_mat: c,
        d_act: DMatrix::zeros(sd, layout.a_dim()),
        d_off: DMatrix::zeros(sd, layout.n_f()),
    }
}

/// Observation matrix `C^i_t` for `t >= 1`, built from the previous stage's
/// `L` coefficients of every player.
pub fn build_observation_matrix(spec: &GameSpec, player: usize, prev_l: &[DMatrix<f64>]) -> DMatrix<f64> {
    let layout = Layout::of(spec);
    let mut c = DMatrix::zeros(layout.y_dim(), layout.s_dim());
    linalg::set_block(&mut c, layout.y_own(), layout.s_own(), &prev_l[player]);
    for j in layout.others(player) {
        linalg::set_block(&mut c, layout.y_other(player, j), layout.s_other(player, j), &prev_l[j]);
    }
    let eye = DMatrix::<f64>::identity(layout.nv, layout.nv);
    linalg::set_block(&mut c, layout.y_x(), layout.s_x(), &eye);
    c
}

/// Model for `stage >= 1` given every player's Kalman gain at `stage`, the
/// cross-estimate coefficients at `stage - 1` and the `L` coefficients at
/// `stage - 1`. Stage zero delegates to [`init_stage_model`].
pub fn build_stage_model(
    spec: &GameSpec,
    player: usize,
    stage: usize,
    prev_l: &[DMatrix<f64>],
    gains: &[DMatrix<f64>],
    prev_cross: &[DMatrix<f64>],
) -> Result<StageModel> {
    if stage == 0 {
        return Ok(init_stage_model(spec, player));
    }
    let layout = Layout::of(spec);
    let (nv, n) = (layout.nv, layout.n);
    if gains.len() != n || prev_cross.len() != n || prev_l.len() != n {
        return Err(Error::MissingStage { stage });
    }
    let sd = layout.s_dim();
    let eye = DMatrix::<f64>::identity(nv, nv);

    let mut a = DMatrix::zeros(sd, sd);
    let mut h = DMatrix::zeros(sd, layout.noise_dim());
    let mut d_act = DMatrix::zeros(sd, layout.a_dim());
    let mut d_off = DMatrix::zeros(sd, layout.n_f());
    linalg::set_block(&mut a, layout.s_v(), layout.s_v(), &eye);
    linalg::set_block(&mut a, layout.s_x(), layout.s_v(), &eye);
    linalg::set_block(&mut h, layout.s_x(), layout.noise_own(), &eye);

    // Each v̂^j_t row: persistence on v̂^j_{t-1}, signal weight on x^j_t
    // (x^j_t = v + w^j_t for j != i), action-innovation offset.
    for j in 0..n {
        let rows = estimate_rows(&layout, stage, &gains[j]);
        let dl = others_block_diag(&layout, j, prev_l);
        let persist = &eye - &rows.on_actions * &dl * &prev_cross[j] - &rows.on_signal;
        let (row, prev_col) = if j == player {
            (layout.s_own(), layout.s_own())
        } else {
            (layout.s_other(player, j), layout.s_other(player, j))
        };
        linalg::set_block(&mut a, row, prev_col, &persist);
        if j == player {
            linalg::set_block(&mut a, row, layout.s_x(), &rows.on_signal);
        } else {
            linalg::set_block(&mut a, row, layout.s_v(), &rows.on_signal);
            linalg::set_block(&mut h, row, layout.noise_other(player, j), &rows.on_signal);
        }
        for k in layout.others(j) {
            let col = linalg::block(&rows.on_actions, 0, layout.pos(j, k) * layout.na, nv, layout.na);
            linalg::set_block(&mut d_act, row, layout.a_of(k), &col);
        }
        linalg::set_block(&mut d_off, row, layout.f_block(j), &(-(&rows.on_actions * &dl)));
    }

    Ok(StageModel {
        player,
        stage,
        g_self: linalg::block(&a, layout.s_own(), 0, nv, sd),
        g_others: linalg::block(&a, layout.s_others(), 0, (n - 1) * nv, sd),
        a_mat: a,
        h_mat: h,
        c_mat: build_observation_matrix(spec, player, prev_l),
        d_act,
        d_off,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;

    fn scalar(q2: f64) -> GameSpec {
        let mut spec = instances::canonical(2, 1);
        spec.noise_cov[1] = DMatrix::from_element(1, 1, q2);
        spec
    }

    #[test]
    fn first_stage_coefficients() {
        let m = init_stage_model(&scalar(1.0), 0);
        // s = [v, v̂^1, v̂^2, x^1]
        assert_eq!(m.a_mat[(1, 3)], 0.5);
        assert_eq!(m.a_mat[(2, 0)], 0.5);
        assert_eq!(m.h_mat[(2, 0)], 0.5);
        assert_eq!(m.h_mat[(3, 1)], 1.0);
        assert_eq!(m.d_act.amax(), 0.0);

        let m = init_stage_model(&scalar(3.0), 0);
        assert_eq!(m.a_mat[(2, 0)], 0.25);
    }

    #[test]
    fn degenerate_prior_gives_zero_weights() {
        let mut spec = scalar(1.0);
        spec.prior_cov = DMatrix::zeros(1, 1);
        let m = init_stage_model(&spec, 1);
        assert_eq!(m.g_self.amax(), 0.0);
        assert_eq!(m.g_others.amax(), 0.0);
    }

    #[test]
    fn fixed_rows_are_identity_selectors() {
        let spec = instances::random_game(3, 2, 1, 3, 4);
        let layout = Layout::of(&spec);
        let m = init_stage_model(&spec, 1);
        let v_rows = linalg::block(&m.a_mat, 0, 0, 2, layout.s_dim());
        let x_rows = linalg::block(&m.a_mat, layout.s_x(), 0, 2, layout.s_dim());
        assert_eq!(v_rows, x_rows);
        assert_eq!(linalg::block(&v_rows, 0, 0, 2, 2), DMatrix::identity(2, 2));
        assert_eq!(linalg::block(&m.h_mat, 0, 0, 2, layout.noise_dim()).amax(), 0.0);
    }

    #[test]
    fn observation_matrix_placement() {
        let spec = scalar(1.0);
        let l = vec![DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 3.0)];
        let c = build_observation_matrix(&spec, 0, &l);
        let expected = DMatrix::from_row_slice(3, 4, &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(c, expected);
        let zero = vec![DMatrix::zeros(1, 1); 2];
        let c = build_observation_matrix(&spec, 1, &zero);
        assert_eq!(c.rows(0, 2).amax(), 0.0);
        assert_eq!(c[(2, 3)], 1.0);
    }

    #[test]
    fn zero_strategies_collapse_persistence() {
        let spec = scalar(1.0);
        let layout = Layout::of(&spec);
        let mut gain = DMatrix::zeros(layout.s_dim(), layout.y_dim());
        gain[(0, layout.y_x())] = 0.3;
        gain[(0, layout.y_other(0, 1))] = 0.7;
        let gains = vec![gain.clone(), gain];
        let zero_l = vec![DMatrix::zeros(1, 1); 2];
        let cross = vec![DMatrix::from_element(1, 1, 0.5); 2];
        let m = build_stage_model(&spec, 0, 1, &zero_l, &gains, &cross).unwrap();
        assert!((m.a_mat[(1, 1)] - 0.7).abs() < 1e-15);
        assert_eq!(m.d_act[(1, 1)], 0.7);
        assert_eq!(m.d_off.amax(), 0.0);
        assert!(build_stage_model(&spec, 0, 1, &zero_l, &gains[..1], &cross).is_err());
    }
}
