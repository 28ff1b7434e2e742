//! Forward simulation of the game under a strategy profile, with every
//! player's filter and the public offset recursion running online.
//!
//! Random numbers: path `p` under master seed `s` draws from a ChaCha8
//! stream keyed by `(s, tag)` with stream id `p`, so paths are reproducible
//! regardless of how they are scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{action_innovation, update_offsets, update_private, PublicRecursion};
use crate::game::quad_reward;
use crate::layout::Layout;
use crate::linalg::psd_factor;
use crate::profile::{AffineStrategy, StrategyProfile};
use crate::GameSpec;

/// Stream tag for primitive draws (hidden state and signal noise).
pub const PRIMITIVE_STREAM: u64 = 0x5052_494d;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// RNG for path `path` under `seed`.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ PRIMITIVE_STREAM));
    rng.set_stream(path);
    rng
}

/// Order-independent-enough summation used for all Monte Carlo aggregates.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error (sample std over `sqrt(n)`).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One sampled path. Vectors are stored as plain arrays; stage-indexed
/// fields are `[stage][player]` unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub v: Vec<f64>,
    pub noise: Vec<Vec<Vec<f64>>>,
    pub x: Vec<Vec<Vec<f64>>>,
    pub v_hat: Vec<Vec<Vec<f64>>>,
    /// Stacked public offsets per stage.
    pub f: Vec<Vec<f64>>,
    /// Stacked actions per stage.
    pub a: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn total_reward(&self, player: usize) -> f64 {
        self.r.iter().map(|row| row[player]).sum()
    }
}

/// A one-shot replacement of one player's rule at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub player: usize,
    pub stage: usize,
    pub rule: AffineStrategy,
}

/// Primitive randomness of one path.
#[derive(Debug, Clone)]
pub struct Primitives {
    pub v: DVector<f64>,
    /// `[stage][player]`.
    pub noise: Vec<Vec<DVector<f64>>>,
}

/// Square-root factors of the primitive covariances.
#[derive(Debug, Clone)]
pub struct Sampler {
    prior: DMatrix<f64>,
    noise: Vec<DMatrix<f64>>,
    horizon: usize,
}

impl Sampler {
    pub fn new(spec: &GameSpec) -> Self {
        Self {
            prior: psd_factor(&spec.prior_cov),
            noise: spec.noise_cov.iter().map(psd_factor).collect(),
            horizon: spec.horizon,
        }
    }

    fn gaussian(rng: &mut ChaCha8Rng, factor: &DMatrix<f64>) -> DVector<f64> {
        let e = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        factor * e
    }

    /// Draws `V`, then stage by stage each player's noise in player order.
    pub fn draw(&self, seed: u64, path: u64) -> Primitives {
        let mut rng = path_rng(seed, path);
        let v = Self::gaussian(&mut rng, &self.prior);
        let noise = (0..self.horizon)
            .map(|_| self.noise.iter().map(|q| Self::gaussian(&mut rng, q)).collect())
            .collect();
        Primitives { v, noise }
    }
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

/// Plays one path from given primitives. Deviations are observed by everyone
/// as ordinary actions; the deviator's own filter never uses her own action.
pub fn play(
    spec: &GameSpec,
    profile: &StrategyProfile,
    rec: &PublicRecursion,
    prims: &Primitives,
    deviation: Option<&Deviation>,
) -> Trajectory {
    let layout = Layout::of(spec);
    let n = layout.n;
    let mut tr = Trajectory {
        v: to_vec(&prims.v),
        noise: Vec::with_capacity(spec.horizon),
        x: Vec::with_capacity(spec.horizon),
        v_hat: Vec::with_capacity(spec.horizon),
        f: Vec::with_capacity(spec.horizon),
        a: Vec::with_capacity(spec.horizon),
        r: Vec::with_capacity(spec.horizon),
    };
    let mut v_hat = vec![DVector::zeros(layout.nv); n];
    let mut f = DVector::zeros(layout.n_f());
    let mut u_prev = DVector::zeros(layout.a_dim());
    let mut a = DVector::zeros(layout.a_dim());
    for t in 0..spec.horizon {
        let xs: Vec<DVector<f64>> = prims.noise[t].iter().map(|w| &prims.v + w).collect();
        for i in 0..n {
            v_hat[i] = update_private(rec, i, t, &v_hat[i], &xs[i], &u_prev, &f);
        }
        f = update_offsets(rec, t, &f, &u_prev);
        for i in 0..n {
            let rule = match deviation {
                Some(d) if d.player == i && d.stage == t => &d.rule,
                _ => profile.get(i, t),
            };
            a.rows_mut(layout.a_of(i), layout.na).copy_from(&rule.action(&v_hat[i], &f));
        }
        let r = (0..n).map(|i| quad_reward(&spec.reward_mat[i], prims.v.as_slice(), a.as_slice())).collect();
        u_prev = action_innovation(profile, t, &a, &f);
        tr.noise.push(prims.noise[t].iter().map(to_vec).collect());
        tr.x.push(xs.iter().map(to_vec).collect());
        tr.v_hat.push(v_hat.iter().map(to_vec).collect());
        tr.f.push(to_vec(&f));
        tr.a.push(to_vec(&a));
        tr.r.push(r);
    }
    tr
}

/// Samples path 0 under `seed`.
pub fn sample_path(spec: &GameSpec, profile: &StrategyProfile, rec: &PublicRecursion, seed: u64) -> Trajectory {
    sample_path_at(spec, profile, rec, seed, 0, None)
}

/// Samples path `path` under `seed`, optionally with a one-shot deviation.
pub fn sample_path_at(
    spec: &GameSpec,
    profile: &StrategyProfile,
    rec: &PublicRecursion,
    seed: u64,
    path: u64,
    deviation: Option<&Deviation>,
) -> Trajectory {
    let prims = Sampler::new(spec).draw(seed, path);
    play(spec, profile, rec, &prims, deviation)
}

/// Per-path total rewards `[path][player]`, computed in parallel and
/// returned in path order.
pub fn path_totals(
    spec: &GameSpec,
    profile: &StrategyProfile,
    rec: &PublicRecursion,
    n_paths: usize,
    seed: u64,
    deviation: Option<&Deviation>,
) -> Vec<Vec<f64>> {
    let sampler = Sampler::new(spec);
    (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let prims = sampler.draw(seed, p);
            let tr = play(spec, profile, rec, &prims, deviation);
            (0..spec.n_players).map(|i| tr.total_reward(i)).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
}

/// Monte Carlo estimate of every player's expected total reward.
pub fn monte_carlo(
    spec: &GameSpec,
    profile: &StrategyProfile,
    rec: &PublicRecursion,
    n_paths: usize,
    seed: u64,
) -> Result<McReport> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument {
            arg: "n_paths",
            reason: format!("need at least 2 paths, got {n_paths}"),
        });
    }
    let totals = path_totals(spec, profile, rec, n_paths, seed, None);
    let mut mean = Vec::with_capacity(spec.n_players);
    let mut std_err = Vec::with_capacity(spec.n_players);
    for i in 0..spec.n_players {
        let col: Vec<f64> = totals.iter().map(|row| row[i]).collect();
        let (m, se) = mean_and_se(&col);
        mean.push(m);
        std_err.push(se);
    }
    Ok(McReport {
        mean,
        std_err,
        n_paths,
        seed,
    })
}

/// Recomputes the public offsets from actions alone.
#[derive(Debug, Clone)]
pub struct PublicObserver<'a> {
    rec: &'a PublicRecursion,
    profile: &'a StrategyProfile,
    stage: usize,
    f: DVector<f64>,
    u_prev: DVector<f64>,
}

impl<'a> PublicObserver<'a> {
    pub fn new(rec: &'a PublicRecursion, profile: &'a StrategyProfile) -> Self {
        Self {
            rec,
            profile,
            stage: 0,
            f: DVector::zeros(rec.layout.n_f()),
            u_prev: DVector::zeros(rec.layout.a_dim()),
        }
    }

    /// Offsets in force at the current stage.
    pub fn offsets(&mut self) -> &DVector<f64> {
        &self.f
    }

    /// Records the stacked actions of the current stage and advances.
    pub fn observe(&mut self, actions: &DVector<f64>) {
        self.u_prev = action_innovation(self.profile, self.stage, actions, &self.f);
        self.stage += 1;
        if self.stage < self.rec.horizon() {
            self.f = update_offsets(self.rec, self.stage, &self.f, &self.u_prev);
        }
    }
}

/// Affine function of the primitive vector `ζ = (V, W^j_τ)`, with noise
/// blocks ordered stage-major then by player.
#[derive(Debug, Clone)]
struct Lin {
    map: DMatrix<f64>,
    shift: DVector<f64>,
}

impl Lin {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            map: DMatrix::zeros(rows, cols),
            shift: DVector::zeros(rows),
        }
    }

    fn mul(m: &DMatrix<f64>, x: &Lin) -> Lin {
        Lin {
            map: m * &x.map,
            shift: m * &x.shift,
        }
    }

    fn add(&mut self, other: &Lin) {
        self.map += &other.map;
        self.shift += &other.shift;
    }

    fn rows(&self, start: usize, len: usize) -> Lin {
        Lin {
            map: self.map.rows(start, len).into_owned(),
            shift: self.shift.rows(start, len).into_owned(),
        }
    }
}

/// A player's total reward as a quadratic function of the primitive vector:
/// `ζ' quad ζ + lin' ζ + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardForm {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
}

impl RewardForm {
    pub fn eval(&self, zeta: &[f64]) -> f64 {
        let n = zeta.len();
        let mut acc = self.constant;
        for c in 0..n {
            let mut col = self.lin[c];
            for r in 0..n {
                col += self.quad[(r, c)] * zeta[r];
            }
            acc += col * zeta[c];
        }
        acc
    }

    /// Expectation under a zero-mean `ζ` with covariance `cov`.
    pub fn mean(&self, cov: &DMatrix<f64>) -> f64 {
        (&self.quad * cov).trace() + self.constant
    }
}

/// Covariance of the primitive vector `ζ = (V, W^j_τ)`, noise blocks
/// stage-major then by player.
pub fn primitive_cov(spec: &GameSpec) -> DMatrix<f64> {
    let mut blocks = vec![spec.prior_cov.clone()];
    for _ in 0..spec.horizon {
        blocks.extend(spec.noise_cov.iter().cloned());
    }
    crate::linalg::block_diag(&blocks)
}

impl Primitives {
    /// Stacked `ζ` in the order used by [`reward_forms`].
    pub fn zeta(&self) -> Vec<f64> {
        let mut z = self.v.as_slice().to_vec();
        for stage in &self.noise {
            for w in stage {
                z.extend_from_slice(w.as_slice());
            }
        }
        z
    }
}

/// Every player's total reward as an exact quadratic form in `ζ`, obtained
/// by propagating the (linear) closed-loop dynamics as affine maps of the
/// primitives. Evaluating the form on a draw reproduces [`play`].
pub fn reward_forms(
    spec: &GameSpec,
    profile: &StrategyProfile,
    rec: &PublicRecursion,
    deviation: Option<&Deviation>,
) -> Vec<RewardForm> {
    let layout = Layout::of(spec);
    let (n, nv, na) = (layout.n, layout.nv, layout.na);
    let dz = nv * (1 + spec.horizon * n);

    let mut state = Lin::zeros(nv, dz);
    state.map.view_mut((0, 0), (nv, nv)).fill_with_identity();
    let mut v_hat = vec![Lin::zeros(nv, dz); n];
    let mut f = Lin::zeros(layout.n_f(), dz);
    let mut u_prev = Lin::zeros(layout.a_dim(), dz);
    let mut forms = vec![
        RewardForm {
            quad: DMatrix::zeros(dz, dz),
            lin: DVector::zeros(dz),
            constant: 0.0,
        };
        n
    ];
    for t in 0..spec.horizon {
        let mut next_hat = Vec::with_capacity(n);
        for (i, prev) in v_hat.iter().enumerate() {
            let mut x = state.clone();
            x.map.view_mut((0, nv * (1 + t * n + i)), (nv, nv)).fill_with_identity();
            let up = &rec.at(i, t).estimate;
            let mut h = Lin::mul(&up.on_signal, &x);
            if t > 0 {
                h.add(&Lin::mul(&up.persist, prev));
                let mut others = Lin::zeros((n - 1) * na, dz);
                for j in layout.others(i) {
                    let r = layout.pos(i, j) * na;
                    let src = u_prev.rows(layout.a_of(j), na);
                    others.map.rows_mut(r, na).copy_from(&src.map);
                    others.shift.rows_mut(r, na).copy_from(&src.shift);
                }
                h.add(&Lin::mul(&up.on_actions, &others));
                h.add(&Lin::mul(&up.on_offsets, &f.rows(layout.f_block(i), layout.f_len())));
            }
            next_hat.push(h);
        }
        v_hat = next_hat;
        if t > 0 {
            let off = &rec.offsets[t];
            let mut next = Lin::mul(&off.lin, &f);
            next.add(&Lin::mul(&off.act, &u_prev));
            f = next;
        }
        let mut a = Lin::zeros(layout.a_dim(), dz);
        let mut m = Lin::zeros(layout.a_dim(), dz);
        for i in 0..n {
            let rule = match deviation {
                Some(d) if d.player == i && d.stage == t => &d.rule,
                _ => profile.get(i, t),
            };
            let mut ai = Lin::mul(&rule.l_mat, &v_hat[i]);
            ai.add(&Lin::mul(&rule.m_f, &f));
            ai.shift += rule.constant();
            let announced = profile.get(i, t);
            let mut mi = Lin::mul(&announced.m_f, &f);
            mi.shift += announced.constant();
            let r = layout.a_of(i);
            a.map.rows_mut(r, na).copy_from(&ai.map);
            a.shift.rows_mut(r, na).copy_from(&ai.shift);
            m.map.rows_mut(r, na).copy_from(&mi.map);
            m.shift.rows_mut(r, na).copy_from(&mi.shift);
        }
        // q = [V; a] and the stage reward is q'Bq.
        let mut q = Lin::zeros(nv + layout.a_dim(), dz);
        q.map.rows_mut(0, nv).copy_from(&state.map);
        q.map.rows_mut(nv, layout.a_dim()).copy_from(&a.map);
        q.shift.rows_mut(nv, layout.a_dim()).copy_from(&a.shift);
        for (i, form) in forms.iter_mut().enumerate() {
            let b = &spec.reward_mat[i];
            let bq = b * &q.map;
            form.quad += q.map.transpose() * &bq;
            form.lin += bq.transpose() * &q.shift * 2.0;
            form.constant += q.shift.dot(&(b * &q.shift));
        }
        u_prev = Lin {
            map: &a.map - &m.map,
            shift: &a.shift - &m.shift,
        };
    }
    for form in &mut forms {
        form.quad = crate::linalg::symmetrize(&form.quad);
    }
    forms
}

/// Exact expected total reward of every player. The deterministic
/// counterpart of [`monte_carlo`].
pub fn exact_rewards(
    spec: &GameSpec,
    profile: &StrategyProfile,
    rec: &PublicRecursion,
    deviation: Option<&Deviation>,
) -> Vec<f64> {
    let cov = primitive_cov(spec);
    reward_forms(spec, profile, rec, deviation)
        .iter()
        .map(|form| form.mean(&cov))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::build_public_recursion;
    use crate::instances;

    #[test]
    fn same_seed_same_path() {
        let spec = instances::canonical(3, 1);
        let mut profile = StrategyProfile::zeros(&spec);
        profile.get_mut(0, 1).l_mat[(0, 0)] = 0.7;
        let rec = build_public_recursion(&spec, &profile).unwrap();
        let a = sample_path(&spec, &profile, &rec, 9);
        let b = sample_path(&spec, &profile, &rec, 9);
        assert_eq!(a, b);
        assert_ne!(a, sample_path(&spec, &profile, &rec, 10));
    }

    #[test]
    fn degenerate_randomness_gives_zero_path() {
        let mut spec = instances::canonical(2, 1);
        spec.prior_cov.fill(0.0);
        for q in &mut spec.noise_cov {
            q[(0, 0)] = 1e-12;
        }
        let profile = StrategyProfile::zeros(&spec);
        let rec = build_public_recursion(&spec, &profile).unwrap();
        let tr = sample_path(&spec, &profile, &rec, 3);
        for t in 0..2 {
            for i in 0..2 {
                assert!(tr.v_hat[t][i][0].abs() < 1e-5);
                assert_eq!(tr.r[t][i], 0.0);
            }
        }
    }

    #[test]
    fn monte_carlo_needs_two_paths() {
        let spec = instances::zero_reward(2, 1);
        let profile = StrategyProfile::zeros(&spec);
        let rec = build_public_recursion(&spec, &profile).unwrap();
        assert!(monte_carlo(&spec, &profile, &rec, 1, 0).is_err());
        let rep = monte_carlo(&spec, &profile, &rec, 50, 0).unwrap();
        assert_eq!(rep.mean, vec![0.0, 0.0]);
        assert_eq!(rep.std_err, vec![0.0, 0.0]);
    }

    #[test]
    fn pairwise_sum_is_accurate() {
        let xs: Vec<f64> = (0..1000).map(|k| 0.1 * k as f64).collect();
        assert!((pairwise_sum(&xs) - 49950.0).abs() < 1e-9);
    }

    #[test]
    fn exact_rewards_match_monte_carlo() {
        let spec = instances::canonical(3, 2);
        let mut profile = StrategyProfile::zeros(&spec);
        for t in 0..3 {
            for i in 0..2 {
                let s = profile.get_mut(i, t);
                s.l_mat[(0, 0)] = 0.4 - 0.3 * i as f64 + 0.1 * t as f64;
                s.m_const[0] = 0.2;
                s.m_f.fill(0.1);
            }
        }
        let rec = build_public_recursion(&spec, &profile).unwrap();
        let exact = exact_rewards(&spec, &profile, &rec, None);
        let mc = monte_carlo(&spec, &profile, &rec, 20_000, 4).unwrap();
        for i in 0..2 {
            assert!((exact[i] - mc.mean[i]).abs() < 4.0 * mc.std_err[i], "{exact:?} {mc:?}");
        }
    }

    #[test]
    fn reward_forms_reproduce_played_paths() {
        let spec = instances::random_game(3, 2, 1, 3, 6);
        let mut profile = StrategyProfile::zeros(&spec);
        for t in 0..3 {
            for i in 0..3 {
                let s = profile.get_mut(i, t);
                s.l_mat.fill(0.3 - 0.2 * i as f64);
                s.m_f.fill(0.05 * t as f64);
                s.m_const[0] = 0.1;
            }
        }
        let rec = build_public_recursion(&spec, &profile).unwrap();
        let mut rule = profile.get(1, 1).clone();
        rule.l_mat.fill(-0.5);
        rule.m_const[0] = 0.7;
        let dev = Deviation { player: 1, stage: 1, rule };
        let sampler = Sampler::new(&spec);
        for d in [None, Some(&dev)] {
            let forms = reward_forms(&spec, &profile, &rec, d);
            for p in 0..20 {
                let prims = sampler.draw(5, p);
                let tr = play(&spec, &profile, &rec, &prims, d);
                let z = prims.zeta();
                for i in 0..3 {
                    let want = tr.total_reward(i);
                    assert!((forms[i].eval(&z) - want).abs() < 1e-9 * (1.0 + want.abs()));
                }
            }
        }
    }
}
