//! Backward programming over affine strategies and the damped fixed-point
//! loop that makes strategies and public recursions mutually consistent.
//!
//! From player `i`'s side at stage `t`, everything is written in terms of the
//! known vector `z = [v̂^i_t; f_t; 1]` and the uncertain vector
//! `y = [V; a^1_t; ...; a^N_t; w^i_{t+1}]`. The stage reward plus continuation
//! is `y'Ay + 2 y'Bz z + z'Cz z`, whose conditional expectation is quadratic in
//! `z` once others' actions are replaced by their affine rules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{build_public_recursion, PublicRecursion};
use crate::layout::Layout;
use crate::linalg::{self, serde_rows, symmetrize};
use crate::profile::{AffineStrategy, StrategyProfile};
use crate::GameSpec;

/// A stage Hessian whose largest eigenvalue exceeds `-HESSIAN_TOL` is rejected.
pub const HESSIAN_TOL: f64 = 1e-12;
/// Relative pivot size below which a stacked first-order system counts as singular.
const SINGULAR_RTOL: f64 = 1e-13;

/// Reward-to-go `z' sym_mat z` over `z = [v̂^i_t; f_t; 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticValue {
    #[serde(with = "serde_rows")]
    pub sym_mat: DMatrix<f64>,
}

impl QuadraticValue {
    pub fn zeros(layout: &Layout) -> Self {
        let nz = z_dim(layout);
        Self {
            sym_mat: DMatrix::zeros(nz, nz),
        }
    }

    pub fn value(&self, v_hat: &DVector<f64>, f: &DVector<f64>) -> f64 {
        let z = extended(v_hat, f);
        z.dot(&(&self.sym_mat * &z))
    }

    /// The constant term, i.e. the value at `v̂ = 0, f = 0`.
    pub fn constant(&self) -> f64 {
        let n = self.sym_mat.nrows();
        self.sym_mat[(n - 1, n - 1)]
    }
}

/// `[v̂; f; 1]`.
pub fn extended(v_hat: &DVector<f64>, f: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(v_hat.len() + f.len() + 1);
    z.rows_mut(0, v_hat.len()).copy_from(v_hat);
    z.rows_mut(v_hat.len(), f.len()).copy_from(f);
    z[v_hat.len() + f.len()] = 1.0;
    z
}

fn z_dim(layout: &Layout) -> usize {
    layout.nv + layout.n_f() + 1
}

fn y_dim(layout: &Layout) -> usize {
    2 * layout.nv + layout.a_dim()
}

/// How the outer loop values the continuation when computing a new profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Continuation {
    /// Continuation values of the current iterate (policy evaluation), so
    /// every stage problem is the exact one-shot deviation problem against it.
    #[default]
    Evaluated,
    /// Values of the freshly computed later-stage best responses, as in a
    /// plain backward pass.
    Chained,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_outer_iters: usize,
    #[serde(default)]
    pub continuation: Continuation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_profile: Option<StrategyProfile>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-9,
            max_outer_iters: 500,
            continuation: Continuation::Evaluated,
            init_profile: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument {
                arg: "damping",
                reason: format!("must lie in (0, 1], got {}", self.damping),
            });
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument {
                arg: "tol",
                reason: format!("must be positive, got {}", self.tol),
            });
        }
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidArgument {
                arg: "max_outer_iters",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// The stage objective of one player: `y'Ay + 2 y'Bz z + z'Cz z`.
#[derive(Debug, Clone)]
pub struct StageObjective {
    pub player: usize,
    pub stage: usize,
    pub a_mat: DMatrix<f64>,
    pub bz: DMatrix<f64>,
    pub cz: DMatrix<f64>,
}

impl StageObjective {
    fn action_rows(&self, layout: &Layout) -> std::ops::Range<usize> {
        let start = layout.nv + layout.a_of(self.player);
        start..start + layout.na
    }

    /// Whether the player's action enters the objective at all.
    fn is_indifferent(&self, layout: &Layout) -> bool {
        let r = self.action_rows(layout);
        self.a_mat.rows(r.start, layout.na).iter().all(|x| *x == 0.0)
            && self.bz.rows(r.start, layout.na).iter().all(|x| *x == 0.0)
    }

    /// Largest eigenvalue of the own-action Hessian block.
    pub fn hessian_max_eig(&self, layout: &Layout) -> f64 {
        let r = self.action_rows(layout);
        linalg::max_eigenvalue(&linalg::block(&self.a_mat, r.start, r.start, layout.na, layout.na))
    }

    fn block(&self, layout: &Layout, j: usize) -> DMatrix<f64> {
        let r = self.action_rows(layout).start;
        linalg::block(&self.a_mat, r, layout.nv + layout.a_of(j), layout.na, layout.na)
    }
}

fn const_col(s: &AffineStrategy) -> DMatrix<f64> {
    DMatrix::from_column_slice(s.m_const.len(), 1, &s.m_const)
}

/// Reward selector: `[V; a] = S y`.
fn reward_selector(layout: &Layout) -> DMatrix<f64> {
    let k = layout.nv + layout.a_dim();
    let mut s = DMatrix::zeros(k, y_dim(layout));
    for r in 0..k {
        s[(r, r)] = 1.0;
    }
    s
}

/// Affine maps `z_{t+1} = G_y y + G_z z` of player `i`'s extended state,
/// with others reading actions against the offsets of `interp`.
fn continuation_maps(
    layout: &Layout,
    rec: &PublicRecursion,
    player: usize,
    next: usize,
    interp: &[AffineStrategy],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nv, na, nf) = (layout.nv, layout.na, layout.n_f());
    let nz = z_dim(layout);
    let up = &rec.at(player, next).estimate;
    let off = &rec.offsets[next];
    let a0 = nv;
    let w0 = nv + layout.a_dim();
    let one = nz - 1;

    let mut gy = DMatrix::zeros(nz, y_dim(layout));
    let mut gz = DMatrix::zeros(nz, nz);

    // Private estimate.
    linalg::set_block(&mut gy, 0, 0, &up.on_signal);
    linalg::set_block(&mut gy, 0, w0, &up.on_signal);
    linalg::set_block(&mut gz, 0, 0, &up.persist);
    linalg::set_block(&mut gz, 0, nv + layout.f_block(player), &up.on_offsets);
    for j in layout.others(player) {
        let k = linalg::block(&up.on_actions, 0, layout.pos(player, j) * na, nv, na);
        linalg::set_block(&mut gy, 0, a0 + layout.a_of(j), &k);
        linalg::add_block(&mut gz, 0, nv, &(-(&k * &interp[j].m_f)));
        linalg::add_block(&mut gz, 0, one, &(-(&k * const_col(&interp[j]))));
    }

    // Public offsets.
    linalg::set_block(&mut gy, nv, a0, &off.act);
    linalg::set_block(&mut gz, nv, nv, &off.lin);
    for (j, s) in interp.iter().enumerate() {
        let k = linalg::block(&off.act, 0, layout.a_of(j), nf, na);
        linalg::add_block(&mut gz, nv, nv, &(-(&k * &s.m_f)));
        linalg::add_block(&mut gz, nv, one, &(-(&k * const_col(s))));
    }
    gz[(one, one)] = 1.0;
    (gy, gz)
}

/// Builds player `i`'s stage objective with continuation value `cont`
/// (`None` at the last stage).
pub fn stage_objective(
    spec: &GameSpec,
    rec: &PublicRecursion,
    player: usize,
    stage: usize,
    cont: Option<&QuadraticValue>,
    interp: &[AffineStrategy],
) -> Result<StageObjective> {
    let layout = Layout::of(spec);
    let s = reward_selector(&layout);
    let mut a_mat = s.transpose() * &spec.reward_mat[player] * &s;
    let nz = z_dim(&layout);
    let mut bz = DMatrix::zeros(y_dim(&layout), nz);
    let mut cz = DMatrix::zeros(nz, nz);
    if let Some(v) = cont {
        if stage + 1 >= rec.horizon() {
            return Err(Error::MissingStage { stage: stage + 1 });
        }
        let (gy, gz) = continuation_maps(&layout, rec, player, stage + 1, interp);
        let p = &v.sym_mat;
        a_mat += gy.transpose() * p * &gy;
        bz = gy.transpose() * p * &gz;
        cz = gz.transpose() * p * &gz;
    }
    Ok(StageObjective {
        player,
        stage,
        a_mat: symmetrize(&a_mat),
        bz,
        cz,
    })
}

/// `y = T z + U e`, with `e = [V - v̂^i; v̂^{-i} - E[v̂^{-i}|h^i]; w^i_{t+1}]`.
fn action_maps(
    layout: &Layout,
    rec: &PublicRecursion,
    player: usize,
    stage: usize,
    coeffs: &[AffineStrategy],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nv, na) = (layout.nv, layout.na);
    let nz = z_dim(layout);
    let ny = y_dim(layout);
    let ne = 2 * nv + layout.f_len();
    let cross = &rec.at(player, stage).cross_coeff;
    let mut t = DMatrix::zeros(ny, nz);
    let mut u = DMatrix::zeros(ny, ne);
    let eye = DMatrix::<f64>::identity(nv, nv);
    linalg::set_block(&mut t, 0, 0, &eye);
    linalg::set_block(&mut u, 0, 0, &eye);
    linalg::set_block(&mut u, nv + layout.a_dim(), nv + layout.f_len(), &eye);
    for (j, s) in coeffs.iter().enumerate() {
        let r = nv + layout.a_of(j);
        linalg::set_block(&mut t, r, nv, &s.m_f);
        for k in 0..na {
            t[(r + k, nz - 1)] = s.m_const[k];
        }
        if j == player {
            linalg::set_block(&mut t, r, 0, &s.l_mat);
        } else {
            let e = linalg::block(cross, layout.pos(player, j) * nv, 0, nv, nv);
            linalg::set_block(&mut t, r, 0, &(&s.l_mat * e));
            linalg::add_block(&mut t, r, nv + layout.f_sub(player, j), &s.l_mat);
            linalg::set_block(&mut u, r, nv + layout.pos(player, j) * nv, &s.l_mat);
        }
    }
    (t, u)
}

/// Conditional expectation of the objective when every player follows
/// `coeffs` at this stage.
pub fn evaluate_stage(
    spec: &GameSpec,
    rec: &PublicRecursion,
    obj: &StageObjective,
    coeffs: &[AffineStrategy],
) -> QuadraticValue {
    let layout = Layout::of(spec);
    let (i, t) = (obj.player, obj.stage);
    let (tm, um) = action_maps(&layout, rec, i, t, coeffs);
    let omega = linalg::block_diag(&[rec.at(i, t).belief_cov.clone(), spec.noise_cov[i].clone()]);
    let tb = tm.transpose() * &obj.bz;
    let mut p = tm.transpose() * &obj.a_mat * &tm + &tb + tb.transpose() + &obj.cz;
    let nz = p.nrows();
    p[(nz - 1, nz - 1)] += (um.transpose() * &obj.a_mat * &um * omega).trace();
    QuadraticValue { sym_mat: symmetrize(&p) }
}

/// `E[R^i(V, a_t) | v̂^i_t, f_t]` as a quadratic form in `[v̂^i; f; 1]` when all
/// players follow `coeffs`.
pub fn stage_expected_reward(
    spec: &GameSpec,
    rec: &PublicRecursion,
    player: usize,
    stage: usize,
    coeffs: &[AffineStrategy],
) -> Result<QuadraticValue> {
    let obj = stage_objective(spec, rec, player, stage, None, coeffs)?;
    Ok(evaluate_stage(spec, rec, &obj, coeffs))
}

fn check_hessian(layout: &Layout, obj: &StageObjective) -> Result<f64> {
    let eig = obj.hessian_max_eig(layout);
    if eig > -HESSIAN_TOL {
        return Err(Error::IllPosedStage {
            player: obj.player,
            stage: obj.stage,
            eigenvalue: eig,
        });
    }
    Ok(eig)
}

/// Right-hand sides of player `i`'s first-order conditions, split into the
/// `v̂`, `f` and constant parts.
fn foc_rhs(layout: &Layout, obj: &StageObjective) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let r = obj.action_rows(layout).start;
    let (nv, na, nf) = (layout.nv, layout.na, layout.n_f());
    let on_v = -(linalg::block(&obj.a_mat, r, 0, na, nv) + linalg::block(&obj.bz, r, 0, na, nv));
    let on_f = -linalg::block(&obj.bz, r, nv, na, nf);
    let on_1 = -linalg::block(&obj.bz, r, nv + nf, na, 1);
    (on_v, on_f, on_1)
}

/// Player `i`'s best response at one stage given the others' coefficients
/// in `coeffs`, together with the resulting value.
pub fn stage_best_response(
    spec: &GameSpec,
    rec: &PublicRecursion,
    player: usize,
    stage: usize,
    cont: Option<&QuadraticValue>,
    coeffs: &[AffineStrategy],
    interp: &[AffineStrategy],
) -> Result<(AffineStrategy, QuadraticValue)> {
    let layout = Layout::of(spec);
    let obj = stage_objective(spec, rec, player, stage, cont, interp)?;
    let mut own = AffineStrategy::zeros(&layout);
    if !obj.is_indifferent(&layout) {
        check_hessian(&layout, &obj)?;
        let (mut on_v, mut on_f, mut on_1) = foc_rhs(&layout, &obj);
        let nv = layout.nv;
        let cross = &rec.at(player, stage).cross_coeff;
        for j in layout.others(player) {
            let aij = obj.block(&layout, j);
            let e = linalg::block(cross, layout.pos(player, j) * nv, 0, nv, nv);
            let l = &coeffs[j].l_mat;
            on_v -= &aij * l * e;
            on_f -= &aij * &coeffs[j].m_f;
            linalg::add_block(&mut on_f, 0, layout.f_sub(player, j), &(-(&aij * l)));
            on_1 -= &aij * const_col(&coeffs[j]);
        }
        let lu = obj.block(&layout, player).lu();
        let singular = || Error::StageSingular { stage, block: "own-action" };
        own.l_mat = lu.solve(&on_v).ok_or_else(singular)?;
        if stage > 0 {
            own.m_f = lu.solve(&on_f).ok_or_else(singular)?;
        }
        own.m_const = lu.solve(&on_1).ok_or_else(singular)?.column(0).iter().copied().collect();
    }
    let mut all = coeffs.to_vec();
    all[player] = own.clone();
    let value = evaluate_stage(spec, rec, &obj, &all);
    Ok((own, value))
}

fn solve_checked(m: DMatrix<f64>, rhs: &DMatrix<f64>, stage: usize, block: &'static str) -> Result<DMatrix<f64>> {
    let scale = linalg::max_abs(&m);
    let lu = m.full_piv_lu();
    let u = lu.u();
    let smallest = u.diagonal().iter().fold(f64::INFINITY, |acc, x| acc.min(x.abs()));
    if scale == 0.0 || smallest <= SINGULAR_RTOL * scale {
        return Err(Error::StageSingular { stage, block });
    }
    lu.solve(rhs).ok_or(Error::StageSingular { stage, block })
}

/// Simultaneous solution of all players' first-order conditions at one stage.
/// Players whose action does not enter their objective play zero.
pub fn stage_nash(
    spec: &GameSpec,
    rec: &PublicRecursion,
    stage: usize,
    conts: Option<&[QuadraticValue]>,
    interp: &[AffineStrategy],
) -> Result<StageSolution> {
    let layout = Layout::of(spec);
    let (n, nv, na, nf) = (layout.n, layout.nv, layout.na, layout.n_f());
    let objs = (0..n)
        .map(|i| stage_objective(spec, rec, i, stage, conts.map(|c| &c[i]), interp))
        .collect::<Result<Vec<_>>>()?;
    let active: Vec<bool> = objs.iter().map(|o| !o.is_indifferent(&layout)).collect();
    let mut hessian_max_eig = f64::NEG_INFINITY;
    for (o, &act) in objs.iter().zip(&active) {
        if act {
            hessian_max_eig = hessian_max_eig.max(check_hessian(&layout, o)?);
        }
    }

    // L system in vectorized form: for each player i,
    // sum_j (X_ij' ⊗ A^i_ij) vec(L^j) = vec(rhs_i), X_ii = I, X_ij = E^{ij}.
    let bl = na * nv;
    let mut big_l = DMatrix::zeros(n * bl, n * bl);
    let mut rhs_l = DMatrix::zeros(n * bl, 1);
    // M and c systems share the action-block matrix.
    let mut big = DMatrix::zeros(n * na, n * na);
    let mut rhs_m = DMatrix::zeros(n * na, nf);
    let mut rhs_c = DMatrix::zeros(n * na, 1);
    let eye_v = DMatrix::<f64>::identity(nv, nv);
    let eye_a = DMatrix::<f64>::identity(na, na);
    for (i, o) in objs.iter().enumerate() {
        if !active[i] {
            linalg::set_block(&mut big_l, i * bl, i * bl, &DMatrix::identity(bl, bl));
            linalg::set_block(&mut big, i * na, i * na, &eye_a);
            continue;
        }
        let (on_v, on_f, on_1) = foc_rhs(&layout, o);
        linalg::set_block(&mut rhs_l, i * bl, 0, &DMatrix::from_column_slice(bl, 1, on_v.as_slice()));
        linalg::set_block(&mut rhs_m, i * na, 0, &on_f);
        linalg::set_block(&mut rhs_c, i * na, 0, &on_1);
        let cross = &rec.at(i, stage).cross_coeff;
        for j in 0..n {
            let aij = o.block(&layout, j);
            let x = if j == i {
                eye_v.clone()
            } else {
                linalg::block(cross, layout.pos(i, j) * nv, 0, nv, nv)
            };
            linalg::set_block(&mut big_l, i * bl, j * bl, &x.transpose().kronecker(&aij));
            linalg::set_block(&mut big, i * na, j * na, &aij);
        }
    }
    let l_vec = solve_checked(big_l, &rhs_l, stage, "L")?;
    let mut out: Vec<AffineStrategy> = (0..n).map(|_| AffineStrategy::zeros(&layout)).collect();
    for (j, s) in out.iter_mut().enumerate() {
        s.l_mat = linalg::unvec(&l_vec.as_slice()[j * bl..(j + 1) * bl], na, nv);
    }
    // Others' estimated-offset terms: A^i_ij L^j acts on f^{ij}.
    for (i, o) in objs.iter().enumerate() {
        if !active[i] {
            continue;
        }
        for j in layout.others(i) {
            let term = o.block(&layout, j) * &out[j].l_mat;
            linalg::add_block(&mut rhs_m, i * na, layout.f_sub(i, j), &(-term));
        }
    }
    let m_all = if stage > 0 {
        solve_checked(big.clone(), &rhs_m, stage, "M")?
    } else {
        DMatrix::zeros(n * na, nf)
    };
    let c_all = solve_checked(big, &rhs_c, stage, "c")?;
    for (j, s) in out.iter_mut().enumerate() {
        s.m_f = linalg::block(&m_all, j * na, 0, na, nf);
        s.m_const = c_all.rows(j * na, na).iter().copied().collect();
    }
    let values = objs.iter().map(|o| evaluate_stage(spec, rec, o, &out)).collect();
    Ok(StageSolution {
        strategies: out,
        values,
        hessian_max_eig,
    })
}

#[derive(Debug, Clone)]
pub struct StageSolution {
    pub strategies: Vec<AffineStrategy>,
    pub values: Vec<QuadraticValue>,
    /// Largest own-action Hessian eigenvalue over active players.
    pub hessian_max_eig: f64,
}

/// Values indexed `[stage][player]`.
pub type ValueTable = Vec<Vec<QuadraticValue>>;

/// Best-response profile against the recursion `rec`, with others reading
/// actions against the offsets of `interp`.
pub fn backward_pass(
    spec: &GameSpec,
    rec: &PublicRecursion,
    interp: &StrategyProfile,
) -> Result<(StrategyProfile, ValueTable, f64)> {
    let horizon = spec.horizon;
    if rec.horizon() != horizon {
        return Err(Error::MissingStage { stage: rec.horizon() });
    }
    let mut stages = vec![Vec::new(); horizon];
    let mut values: ValueTable = vec![Vec::new(); horizon];
    let mut worst = f64::NEG_INFINITY;
    for t in (0..horizon).rev() {
        let cont = (t + 1 < horizon).then(|| values[t + 1].as_slice());
        let sol = stage_nash(spec, rec, t, cont, &interp.stages[t])?;
        worst = worst.max(sol.hessian_max_eig);
        stages[t] = sol.strategies;
        values[t] = sol.values;
    }
    Ok((StrategyProfile { stages }, values, worst))
}

/// Stage-by-stage equilibrium against continuation values of `current`
/// itself. Its fixed points are exactly the profiles in which no player
/// gains from a one-shot deviation at any stage.
pub fn improvement_step(
    spec: &GameSpec,
    rec: &PublicRecursion,
    current: &StrategyProfile,
) -> Result<(StrategyProfile, f64)> {
    let values = evaluate_profile(spec, rec, current)?;
    let mut stages = Vec::with_capacity(spec.horizon);
    let mut worst = f64::NEG_INFINITY;
    for t in 0..spec.horizon {
        let cont = (t + 1 < spec.horizon).then(|| values[t + 1].as_slice());
        let sol = stage_nash(spec, rec, t, cont, &current.stages[t])?;
        worst = worst.max(sol.hessian_max_eig);
        stages.push(sol.strategies);
    }
    Ok((StrategyProfile { stages }, worst))
}

/// Reward-to-go of every player under `profile`, with `rec` built from it.
pub fn evaluate_profile(spec: &GameSpec, rec: &PublicRecursion, profile: &StrategyProfile) -> Result<ValueTable> {
    let horizon = spec.horizon;
    let mut values: ValueTable = vec![Vec::new(); horizon];
    for t in (0..horizon).rev() {
        let coeffs = &profile.stages[t];
        let mut row = Vec::with_capacity(spec.n_players);
        for i in 0..spec.n_players {
            let cont = (t + 1 < horizon).then(|| &values[t + 1][i]);
            let obj = stage_objective(spec, rec, i, t, cont, coeffs)?;
            row.push(evaluate_stage(spec, rec, &obj, coeffs));
        }
        values[t] = row;
    }
    Ok(values)
}

/// Expected total reward before any signal is drawn:
/// `E[z_1' P z_1]` with `z_1 = [v̂^i_1; 0; 1]`.
pub fn ex_ante_value(spec: &GameSpec, rec: &PublicRecursion, value: &QuadraticValue, player: usize) -> f64 {
    let k = &rec.at(player, 0).estimate.on_signal;
    let cov = k * (&spec.prior_cov + &spec.noise_cov[player]) * k.transpose();
    let nv = spec.dim_v;
    let p_vv = value.sym_mat.view((0, 0), (nv, nv));
    (p_vv * cov).trace() + value.constant()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of `BR(π) - π` at the last iterate.
    pub residual: f64,
    pub residual_history: Vec<f64>,
    /// Largest own-action Hessian eigenvalue seen at the last iteration;
    /// `None` when every player was indifferent.
    pub hessian_max_eig: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub profile: StrategyProfile,
    pub recursion: PublicRecursion,
    pub values: ValueTable,
    pub report: ConvergenceReport,
}

/// Damped Picard iteration on the coefficient sequence. Each iteration
/// rebuilds the public recursion for the current profile and computes a new
/// profile according to `opts.continuation`. Non-convergence is reported
/// through `report.converged`, with the last computed profile returned.
pub fn solve_equilibrium(spec: &GameSpec, opts: &SolverOptions) -> Result<Equilibrium> {
    opts.validate()?;
    let mut current = match &opts.init_profile {
        Some(p) => {
            p.check(spec)?;
            p.clone()
        }
        None => StrategyProfile::zeros(spec),
    };
    let mut history = Vec::new();
    let mut converged = false;
    let mut best;
    let mut worst;
    loop {
        let rec = build_public_recursion(spec, &current)?;
        let (br, eig) = match opts.continuation {
            Continuation::Evaluated => improvement_step(spec, &rec, &current)?,
            Continuation::Chained => {
                let (p, _, e) = backward_pass(spec, &rec, &current)?;
                (p, e)
            }
        };
        let residual = br.sup_diff(&current);
        history.push(residual);
        best = br;
        worst = eig;
        if residual <= opts.tol {
            converged = true;
            break;
        }
        if history.len() >= opts.max_outer_iters {
            break;
        }
        current = current.blend(&best, opts.damping);
    }
    let recursion = build_public_recursion(spec, &best)?;
    let values = evaluate_profile(spec, &recursion, &best)?;
    Ok(Equilibrium {
        profile: best,
        recursion,
        values,
        report: ConvergenceReport {
            converged,
            iterations: history.len(),
            residual: *history.last().expect("at least one iteration"),
            residual_history: history,
            hessian_max_eig: worst.is_finite().then_some(worst),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;

    fn scalar_spec(b: DMatrix<f64>) -> GameSpec {
        let mut spec = instances::zero_reward(2, 1);
        spec.reward_mat = vec![b.clone(), b];
        spec
    }

    #[test]
    fn terminal_stage_own_quadratic_plays_zero() {
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, -1.0, -1.0]));
        let spec = scalar_spec(b);
        let eq = solve_equilibrium(&spec, &SolverOptions::default()).unwrap();
        assert!(eq.report.converged);
        for s in &eq.profile.stages[0] {
            assert_eq!(s.l_mat[(0, 0)], 0.0);
            assert_eq!(s.m_const[0], 0.0);
        }
    }

    #[test]
    fn terminal_stage_tracks_estimate() {
        // 2 v a^1 - (a^1)^2 for player 1 and the mirror for player 2.
        let mut b1 = DMatrix::zeros(3, 3);
        b1[(0, 1)] = 1.0;
        b1[(1, 0)] = 1.0;
        b1[(1, 1)] = -1.0;
        let mut b2 = DMatrix::zeros(3, 3);
        b2[(0, 2)] = 1.0;
        b2[(2, 0)] = 1.0;
        b2[(2, 2)] = -1.0;
        let mut spec = instances::zero_reward(2, 1);
        spec.reward_mat = vec![b1, b2];
        let rec = build_public_recursion(&spec, &StrategyProfile::zeros(&spec)).unwrap();
        let sol = stage_nash(&spec, &rec, 0, None, &StrategyProfile::zeros(&spec).stages[0]).unwrap();
        for s in &sol.strategies {
            assert!((s.l_mat[(0, 0)] - 1.0).abs() < 1e-14);
            assert!(s.m_const[0].abs() < 1e-14);
        }
        assert!(sol.hessian_max_eig < 0.0);
    }

    #[test]
    fn zero_rewards_converge_immediately() {
        let spec = instances::zero_reward(3, 3);
        let eq = solve_equilibrium(&spec, &SolverOptions::default()).unwrap();
        assert!(eq.report.converged);
        assert_eq!(eq.report.iterations, 1);
        assert_eq!(eq.profile.sup_diff(&StrategyProfile::zeros(&spec)), 0.0);
        for row in &eq.values {
            for v in row {
                assert_eq!(v.sym_mat.amax(), 0.0);
            }
        }
    }

    #[test]
    fn convex_stage_is_rejected() {
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, -1.0]));
        let spec = scalar_spec(b);
        let err = solve_equilibrium(&spec, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::IllPosedStage { player: 0, stage: 0, .. }));
    }

    #[test]
    fn options_are_validated() {
        let spec = instances::canonical(1, 1);
        for opts in [
            SolverOptions { damping: 0.0, ..Default::default() },
            SolverOptions { damping: 1.5, ..Default::default() },
            SolverOptions { tol: 0.0, ..Default::default() },
        ] {
            assert!(matches!(solve_equilibrium(&spec, &opts), Err(Error::InvalidArgument { .. })));
        }
    }

    #[test]
    fn expected_reward_without_action_coupling() {
        // Only B_vv is nonzero: E[V'B V | h] = v̂'Bv̂ + tr(B Cov(V|h)).
        let mut spec = instances::canonical(2, 3);
        for b in &mut spec.reward_mat {
            let vv = b[(0, 0)];
            b.fill(0.0);
            b[(0, 0)] = vv;
        }
        let profile = StrategyProfile::zeros(&spec);
        let rec = build_public_recursion(&spec, &profile).unwrap();
        for t in 0..2 {
            let q = stage_expected_reward(&spec, &rec, 0, t, &profile.stages[t]).unwrap();
            let b = spec.reward_mat[0][(0, 0)];
            assert!((q.sym_mat[(0, 0)] - b).abs() < 1e-14);
            let var = rec.at(0, t).belief_cov[(0, 0)];
            assert!((q.constant() - b * var).abs() < 1e-14);
            // No action coupling, so f does not appear.
            assert!(q.sym_mat.row(1).amax() < 1e-15 && q.sym_mat.row(2).amax() < 1e-15);
        }
    }

    #[test]
    fn continuation_zero_matches_terminal_formula() {
        let spec = instances::canonical(2, 5);
        let profile = StrategyProfile::zeros(&spec);
        let rec = build_public_recursion(&spec, &profile).unwrap();
        let layout = Layout::of(&spec);
        let zero = vec![QuadraticValue::zeros(&layout); 2];
        let a = stage_nash(&spec, &rec, 0, Some(&zero), &profile.stages[0]).unwrap();
        let b = stage_nash(&spec, &rec, 0, None, &profile.stages[0]).unwrap();
        for (x, y) in a.strategies.iter().zip(&b.strategies) {
            assert!(x.sup_diff(y) < 1e-14);
        }
    }

    #[test]
    fn single_best_response_agrees_with_stage_nash() {
        let spec = instances::random_game(3, 2, 2, 3, 21);
        let profile = StrategyProfile::zeros(&spec);
        let rec = build_public_recursion(&spec, &profile).unwrap();
        let (_, values, _) = backward_pass(&spec, &rec, &profile).unwrap();
        let sol = stage_nash(&spec, &rec, 1, Some(&values[2]), &profile.stages[1]).unwrap();
        for i in 0..3 {
            let (own, val) =
                stage_best_response(&spec, &rec, i, 1, Some(&values[2][i]), &sol.strategies, &profile.stages[1]).unwrap();
            assert!(own.sup_diff(&sol.strategies[i]) < 1e-9);
            assert!(linalg::max_abs_diff(&val.sym_mat, &sol.values[i].sym_mat) < 1e-9);
        }
    }

    #[test]
    fn values_are_symmetric() {
        let spec = instances::canonical(3, 8);
        let eq = solve_equilibrium(&spec, &SolverOptions::default()).unwrap();
        for row in &eq.values {
            for v in row {
                assert!(linalg::asymmetry(&v.sym_mat) < 1e-10);
            }
        }
    }
}
