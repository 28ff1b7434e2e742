//! Coupled Kalman recursions for the private estimates `v̂^i_t`, the public
//! covariances `Σ^i_t`, and the cross-estimate coefficients `(E^i_t, f^i_t)`
//! with `E[v̂^{-i}_t | h^i_t] = E^i_t v̂^i_t + f^i_t`.
//!
//! Everything in [`PublicRecursion`] depends only on the `L` coefficients of
//! the strategy profile; no observation enters it. The online pieces
//! (`v̂`, `f`) are updated with the affine maps stored there.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::linalg::{self, block_diag, pinv, symmetrize};
use crate::profile::StrategyProfile;
use crate::state_evolution::{
    self, build_stage_model, estimate_rows, init_stage_model, others_block_diag, StageModel,
};
use crate::GameSpec;

/// Covariance updates failing PSD by more than this are numerical failures.
pub const PSD_FAILURE: f64 = -1e-6;

/// Affine map producing `v̂^i_t` from the previous estimate:
/// `v̂^i_t = persist v̂^i_{t-1} + on_signal x^i_t + on_actions u^{-i}_{t-1} + on_offsets f^i_{t-1}`,
/// with `u = a - m` the action innovation of the previous stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateUpdate {
    pub persist: DMatrix<f64>,
    pub on_signal: DMatrix<f64>,
    pub on_actions: DMatrix<f64>,
    pub on_offsets: DMatrix<f64>,
}

/// Stacked public offset update `f_t = lin f_{t-1} + act u_{t-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetUpdate {
    pub lin: DMatrix<f64>,
    pub act: DMatrix<f64>,
}

/// Public filter quantities of one player at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStage {
    /// `Σ^i_{t|t-1}`; at the first stage, the prior covariance of `s^i_1`.
    pub sigma_pred: DMatrix<f64>,
    /// `Σ^i_t`, covariance of `s^i_t` given `h^i_t`.
    pub sigma: DMatrix<f64>,
    /// Kalman gain `J^i_t`.
    pub gain: DMatrix<f64>,
    /// Transition `A^i_t`, noise map, observation matrix `C^i_t` and offsets.
    pub model: StageModel,
    /// `E^i_t`.
    pub cross_coeff: DMatrix<f64>,
    pub tilde_sigma_pred: DMatrix<f64>,
    pub tilde_sigma: DMatrix<f64>,
    pub tilde_gain: DMatrix<f64>,
    /// Coefficient of `f^i_{t-1}` in the own-block offset update (without the `d` term).
    pub f_update_lin: DMatrix<f64>,
    /// Coefficient of `u^{-i}_{t-1}` in the own-block offset update (without the `d` term).
    pub f_update_act: DMatrix<f64>,
    pub estimate: EstimateUpdate,
    /// `Σ^i_{t+1|t}`.
    pub next_pred: DMatrix<f64>,
    /// Covariance of `(V, v̂^{-i}_t)` given `h^i_t`.
    pub belief_cov: DMatrix<f64>,
}

/// Strategy-dependent, observation-independent filter data for all players
/// and stages, indexed `[stage][player]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicRecursion {
    pub layout: Layout,
    pub stages: Vec<Vec<FilterStage>>,
    /// Offset updates; entry 0 is unused (`f_1 = 0`).
    pub offsets: Vec<OffsetUpdate>,
}

impl PublicRecursion {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn at(&self, player: usize, stage: usize) -> &FilterStage {
        &self.stages[stage][player]
    }
}

/// `D(Q^{-i}, Q^i)`.
pub fn stage_noise_cov(spec: &GameSpec, player: usize) -> DMatrix<f64> {
    let layout = Layout::of(spec);
    let mut blocks: Vec<_> = layout.others(player).map(|j| spec.noise_cov[j].clone()).collect();
    blocks.push(spec.noise_cov[player].clone());
    block_diag(&blocks)
}

/// `Σ_{k|k-1} = A Σ A' + H D(Q^{-i}, Q^i) H'`, symmetrized.
pub fn predict_cov(sigma: &DMatrix<f64>, model: &StageModel, noise_cov: &DMatrix<f64>) -> DMatrix<f64> {
    let a = &model.a_mat;
    let h = &model.h_mat;
    symmetrize(&(a * sigma * a.transpose() + h * noise_cov * h.transpose()))
}

/// `J = Σ C' (C Σ C')^+` with a truncated-SVD pseudo-inverse.
pub fn gain(sigma_pred: &DMatrix<f64>, c_mat: &DMatrix<f64>) -> DMatrix<f64> {
    let sc = sigma_pred * c_mat.transpose();
    let inner = symmetrize(&(c_mat * &sc));
    sc * pinv(&inner)
}

fn correct(
    sigma_pred: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    c_mat: &DMatrix<f64>,
    player: usize,
    stage: usize,
) -> Result<DMatrix<f64>> {
    let n = sigma_pred.nrows();
    let out = symmetrize(&((DMatrix::identity(n, n) - gain * c_mat) * sigma_pred));
    let lo = linalg::min_eigenvalue(&out);
    if lo < PSD_FAILURE {
        return Err(Error::Numerical {
            player,
            stage,
            reason: format!("covariance update lost PSD (eigenvalue {lo:e})"),
        });
    }
    Ok(out)
}

/// `Σ^i_{k+1} = (I - J C)(A Σ A' + H D(Q) H')`.
pub fn update_cov(
    sigma: &DMatrix<f64>,
    model: &StageModel,
    noise_cov: &DMatrix<f64>,
    gain_next: &DMatrix<f64>,
    c_next: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pred = predict_cov(sigma, model, noise_cov);
    correct(&pred, gain_next, c_next, model.player, model.stage + 1)
}

/// Prior covariance of `s^i_1 = [v; 0; 0; x^i_1]`.
fn initial_state_cov(spec: &GameSpec, player: usize) -> DMatrix<f64> {
    let layout = Layout::of(spec);
    let mut p = DMatrix::zeros(layout.s_dim(), layout.s_dim());
    let sig = &spec.prior_cov;
    linalg::set_block(&mut p, layout.s_v(), layout.s_v(), sig);
    linalg::set_block(&mut p, layout.s_v(), layout.s_x(), sig);
    linalg::set_block(&mut p, layout.s_x(), layout.s_v(), sig);
    linalg::set_block(&mut p, layout.s_x(), layout.s_x(), &(sig + &spec.noise_cov[player]));
    p
}

/// Indices of `(v, v̂^{-i})` inside `s^i`.
fn tilde_indices(layout: &Layout) -> Vec<usize> {
    (0..layout.nv)
        .chain(layout.s_others()..layout.s_others() + layout.f_len())
        .collect()
}

/// `Ã^i_t` and `H̃^i_t` of the conditional model, read off the stage model.
fn tilde_model(layout: &Layout, model: &StageModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let idx = tilde_indices(layout);
    let a = linalg::select(&model.a_mat, &idx, &idx);
    let noise_cols: Vec<usize> = (0..layout.f_len()).collect();
    let h = linalg::select(&model.h_mat, &idx, &noise_cols);
    (a, h)
}

fn tilde_observation(layout: &Layout, player: usize, prev_l: Option<&[DMatrix<f64>]>) -> DMatrix<f64> {
    let nv = layout.nv;
    let eye = DMatrix::<f64>::identity(nv, nv);
    match prev_l {
        None => {
            let mut c = DMatrix::zeros(nv, layout.n * nv);
            linalg::set_block(&mut c, 0, 0, &eye);
            c
        }
        Some(l) => block_diag(&[eye, others_block_diag(layout, player, l)]),
    }
}

/// Public recursion at the first stage for every player.
pub fn init_filters(spec: &GameSpec) -> Result<Vec<FilterStage>> {
    let layout = Layout::of(spec);
    let (n, nv) = (layout.n, layout.nv);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let model = init_stage_model(spec, i);
        let sigma_pred = initial_state_cov(spec, i);
        let j = gain(&sigma_pred, &model.c_mat);
        let sigma = correct(&sigma_pred, &j, &model.c_mat, i, 0)?;

        let weights: Vec<_> = layout
            .others(i)
            .map(|k| state_evolution::first_signal_weight(spec, k))
            .collect();
        let cross_coeff = linalg::vstack(&weights);

        // Conditional model state [v; v̂^{-i}_0] observed through v alone.
        let mut tilde_sigma_pred = DMatrix::zeros(n * nv, n * nv);
        linalg::set_block(&mut tilde_sigma_pred, 0, 0, &spec.prior_cov);
        let c_tilde = tilde_observation(&layout, i, None);
        let tilde_gain = gain(&tilde_sigma_pred, &c_tilde);
        let tilde_sigma = correct(&tilde_sigma_pred, &tilde_gain, &c_tilde, i, 0)?;

        let rows = estimate_rows(&layout, 0, &j);
        let estimate = EstimateUpdate {
            persist: DMatrix::zeros(nv, nv),
            on_signal: rows.on_signal,
            on_actions: rows.on_actions,
            on_offsets: DMatrix::zeros(nv, layout.f_len()),
        };
        let next_pred = predict_cov(&sigma, &model, &stage_noise_cov(spec, i));
        out.push(FilterStage {
            belief_cov: belief_block(&layout, &next_pred),
            next_pred,
            sigma_pred,
            sigma,
            gain: j,
            model,
            cross_coeff,
            tilde_sigma_pred,
            tilde_sigma,
            tilde_gain,
            f_update_lin: DMatrix::zeros(layout.f_len(), layout.f_len()),
            f_update_act: DMatrix::zeros(layout.f_len(), (n - 1) * layout.na),
            estimate,
        });
    }
    Ok(out)
}

fn belief_block(layout: &Layout, next_pred: &DMatrix<f64>) -> DMatrix<f64> {
    let idx = tilde_indices(layout);
    symmetrize(&linalg::select(next_pred, &idx, &idx))
}

/// One forward step of the public recursion, from stage `t - 1` to `t >= 1`.
fn step_filters(
    spec: &GameSpec,
    t: usize,
    prev: &[FilterStage],
    prev_l: &[DMatrix<f64>],
) -> Result<(Vec<FilterStage>, OffsetUpdate)> {
    let layout = Layout::of(spec);
    let (n, nv, na) = (layout.n, layout.nv, layout.na);

    // Covariance prediction and Kalman gains of every player.
    let mut preds = Vec::with_capacity(n);
    let mut gains = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    for i in 0..n {
        let c = state_evolution::build_observation_matrix(spec, i, prev_l);
        let pred = prev[i].next_pred.clone();
        let j = gain(&pred, &c);
        sigmas.push(correct(&pred, &j, &c, i, t)?);
        preds.push(pred);
        gains.push(j);
    }
    let prev_cross: Vec<_> = prev.iter().map(|p| p.cross_coeff.clone()).collect();

    let mut lin = DMatrix::zeros(layout.n_f(), layout.n_f());
    let mut act = DMatrix::zeros(layout.n_f(), layout.a_dim());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let model = build_stage_model(spec, i, t, prev_l, &gains, &prev_cross)?;
        let dl = others_block_diag(&layout, i, prev_l);

        // Conditional model: given v, only v̂^{-i} is uncertain.
        let (a_prev, h_prev) = tilde_model(&layout, &prev[i].model);
        let q_others = block_diag(&layout.others(i).map(|j| spec.noise_cov[j].clone()).collect::<Vec<_>>());
        let tilde_sigma_pred =
            symmetrize(&(&a_prev * &prev[i].tilde_sigma * a_prev.transpose() + &h_prev * q_others * h_prev.transpose()));
        let c_tilde = tilde_observation(&layout, i, Some(prev_l));
        let tilde_gain = gain(&tilde_sigma_pred, &c_tilde);
        let tilde_sigma = correct(&tilde_sigma_pred, &tilde_gain, &c_tilde, i, t)?;

        let (a_now, _) = tilde_model(&layout, &model);
        let g_tilde = a_now.rows(nv, layout.f_len()).into_owned();
        let g_v = g_tilde.columns(0, nv).into_owned();
        let g_hat = g_tilde.columns(nv, layout.f_len()).into_owned();
        let aj = &g_tilde * &tilde_gain;
        let aj_act = aj.columns(nv, (n - 1) * na).into_owned();

        let f_update_lin = &g_hat - &aj_act * &dl;
        let cross_coeff = &g_v + &f_update_lin * &prev_cross[i];

        // Stacked offsets: own-block terms plus the d-offset rows for v̂^{-i}.
        let fb = layout.f_block(i);
        linalg::add_block(&mut lin, fb, fb, &f_update_lin);
        for j in layout.others(i) {
            let cols = linalg::block(&aj_act, 0, layout.pos(i, j) * na, layout.f_len(), na);
            linalg::add_block(&mut act, fb, layout.a_of(j), &cols);
        }
        let d_off = model.d_off.rows(layout.s_others(), layout.f_len()).into_owned();
        let d_act = model.d_act.rows(layout.s_others(), layout.f_len()).into_owned();
        linalg::add_block(&mut lin, fb, 0, &d_off);
        linalg::add_block(&mut act, fb, 0, &d_act);

        let rows = estimate_rows(&layout, t, &gains[i]);
        let eye = DMatrix::<f64>::identity(nv, nv);
        let estimate = EstimateUpdate {
            persist: &eye - &rows.on_actions * &dl * &prev_cross[i] - &rows.on_signal,
            on_offsets: -(&rows.on_actions * &dl),
            on_signal: rows.on_signal,
            on_actions: rows.on_actions,
        };

        let next_pred = predict_cov(&sigmas[i], &model, &stage_noise_cov(spec, i));
        out.push(FilterStage {
            belief_cov: belief_block(&layout, &next_pred),
            next_pred,
            sigma_pred: preds[i].clone(),
            sigma: sigmas[i].clone(),
            gain: gains[i].clone(),
            model,
            cross_coeff,
            tilde_sigma_pred,
            tilde_sigma,
            tilde_gain,
            f_update_lin,
            f_update_act: aj_act,
            estimate,
        });
    }
    Ok((out, OffsetUpdate { lin, act }))
}

/// Builds the full public recursion for the `L` coefficients of `profile`.
pub fn build_public_recursion(spec: &GameSpec, profile: &StrategyProfile) -> Result<PublicRecursion> {
    profile.check(spec)?;
    let layout = Layout::of(spec);
    let mut stages = vec![init_filters(spec)?];
    let mut offsets = vec![OffsetUpdate {
        lin: DMatrix::zeros(layout.n_f(), layout.n_f()),
        act: DMatrix::zeros(layout.n_f(), layout.a_dim()),
    }];
    for t in 1..spec.horizon {
        let prev_l = profile.gains_at(t - 1);
        let (next, off) = step_filters(spec, t, stages.last().expect("non-empty"), &prev_l)?;
        stages.push(next);
        offsets.push(off);
    }
    Ok(PublicRecursion { layout, stages, offsets })
}

/// Per-player online state: private estimates and the shared public offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateState {
    pub v_hat: Vec<DVector<f64>>,
    /// Stacked `f = [f^1; ...; f^N]`.
    pub f_off: DVector<f64>,
}

impl PrivateState {
    /// State after the first signals: `v̂^i_1 = Σ(Σ+Q^i)^{-1} x^i_1`, `f_1 = 0`.
    pub fn initial(rec: &PublicRecursion, signals: &[DVector<f64>]) -> Self {
        let v_hat = signals
            .iter()
            .enumerate()
            .map(|(i, x)| &rec.at(i, 0).estimate.on_signal * x)
            .collect();
        Self {
            v_hat,
            f_off: DVector::zeros(rec.layout.n_f()),
        }
    }
}

/// Stacked action innovations `u = a - (M f + c)` under the announced profile.
pub fn action_innovation(profile: &StrategyProfile, stage: usize, actions: &DVector<f64>, f: &DVector<f64>) -> DVector<f64> {
    let na = actions.len() / profile.stages[stage].len();
    let mut u = actions.clone();
    for (j, s) in profile.stages[stage].iter().enumerate() {
        let m = s.offset(f);
        for k in 0..na {
            u[j * na + k] -= m[k];
        }
    }
    u
}

fn others_part(layout: &Layout, i: usize, stacked: &DVector<f64>) -> DVector<f64> {
    let na = layout.na;
    let mut out = DVector::zeros((layout.n - 1) * na);
    for j in layout.others(i) {
        out.rows_mut(layout.pos(i, j) * na, na).copy_from(&stacked.rows(layout.a_of(j), na));
    }
    out
}

/// Private estimate update. Only the other players' action innovations
/// enter; a player's own action carries no information to herself.
pub fn update_private(
    rec: &PublicRecursion,
    player: usize,
    stage: usize,
    v_hat_prev: &DVector<f64>,
    signal: &DVector<f64>,
    u_prev: &DVector<f64>,
    f_prev: &DVector<f64>,
) -> DVector<f64> {
    let layout = &rec.layout;
    let up = &rec.at(player, stage).estimate;
    if stage == 0 {
        return &up.on_signal * signal;
    }
    let f_own = f_prev.rows(layout.f_block(player), layout.f_len()).into_owned();
    &up.persist * v_hat_prev
        + &up.on_signal * signal
        + &up.on_actions * others_part(layout, player, u_prev)
        + &up.on_offsets * f_own
}

/// Player `i`'s cross-estimate coefficients and offsets at `stage`.
pub fn update_public_ef(
    rec: &PublicRecursion,
    player: usize,
    stage: usize,
    f_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let layout = &rec.layout;
    let f = update_offsets(rec, stage, f_prev, u_prev);
    let own = f.rows(layout.f_block(player), layout.f_len()).into_owned();
    (rec.at(player, stage).cross_coeff.clone(), own)
}

/// Stacked offsets at `stage` from those of the previous stage.
pub fn update_offsets(rec: &PublicRecursion, stage: usize, f_prev: &DVector<f64>, u_prev: &DVector<f64>) -> DVector<f64> {
    if stage == 0 {
        return DVector::zeros(rec.layout.n_f());
    }
    let off = &rec.offsets[stage];
    &off.lin * f_prev + &off.act * u_prev
}

/// `ṽ^{i,-i} = E v̂^i + f^i`.
pub fn cross_estimate(v_hat: &DVector<f64>, cross_coeff: &DMatrix<f64>, f_own: &DVector<f64>) -> DVector<f64> {
    cross_coeff * v_hat + f_own
}
