//! Monte Carlo checks of the filtering claims: public covariances, affine
//! cross-estimates, martingale estimates and white innovations.
//!
//! Every statistical entry is a z-score compared against [`SE_TOL`]; exact
//! entries compare a maximum absolute difference against a fixed bound.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::filters::{build_public_recursion, PublicRecursion};
use crate::layout::Layout;
use crate::profile::StrategyProfile;
use crate::simulation::{play, PublicObserver, Sampler, Trajectory};
use crate::verification::oracle::conditioning_oracle;
use crate::verification::stats::{cov_entry_se, ols, sample_cov};
use crate::GameSpec;

/// Number of standard errors a statistic may deviate.
pub const SE_TOL: f64 = 3.0;
/// Below this many paths statistical entries are flagged, not judged.
pub const MIN_SAMPLES: usize = 1000;
/// Absolute slack for covariance entries whose analytic value is degenerate.
const COV_FLOOR: f64 = 1e-9;
/// Bound on the own-action innovation along the path.
const OWN_INNOVATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Claim {
    /// `E[v̂^{-i}_t | h^i_t] = E^i_t v̂^i_t + f^i_t`.
    CrossEstimateAffine,
    /// `Cov(V - v̂^i_t, v̂^{-i}_t - ṽ^{i,-i}_t)` equals the public belief covariance.
    BeliefCovariance,
    /// Covariances and cross coefficients depend on the profile only.
    CovariancePublic,
    /// Offsets are recomputable from actions alone.
    OffsetsPublic,
    /// A player's own action carries no innovation to herself.
    OwnActionInnovation,
    /// `(V, v̂^i_t, v̂^{-i}_t, x^i_{t+1})` has the analytic joint covariance.
    StackedCovariance,
    /// `E[v̂^i_{t+1} - v̂^i_t | h^i_t] = 0`.
    EstimateMartingale,
    /// Successive estimate increments are uncorrelated.
    InnovationWhiteness,
    /// `E[x^i_{t+1} - v̂^i_t | h^i_t] = 0`.
    SignalPrediction,
}

impl Claim {
    pub fn describe(self) -> &'static str {
        match self {
            Claim::CrossEstimateAffine => "cross-estimates are affine in the private estimate with public coefficients",
            Claim::BeliefCovariance => "estimate errors have the public conditional covariance",
            Claim::CovariancePublic => "covariances and cross coefficients are independent of realized observations",
            Claim::OffsetsPublic => "public offsets are recomputed from actions alone",
            Claim::OwnActionInnovation => "own actions carry no innovation",
            Claim::StackedCovariance => "state, estimates and next signal form a linear Gaussian process",
            Claim::EstimateMartingale => "private estimates are martingales",
            Claim::InnovationWhiteness => "estimate innovations are white",
            Claim::SignalPrediction => "the next signal is predicted by the current estimate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    InsufficientSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub claim: Claim,
    pub label: String,
    pub player: Option<usize>,
    pub stage: Option<usize>,
    /// `|z|` for statistical entries, a maximum absolute difference otherwise.
    #[serde(with = "crate::linalg::serde_nullable")]
    pub statistic: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub n_paths: usize,
    pub seed: u64,
    pub entries: Vec<CheckEntry>,
    pub notes: Vec<String>,
}

impl ConsistencyReport {
    /// True when no entry failed. Insufficient-sample entries do not fail.
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.status != CheckStatus::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| e.status == CheckStatus::Fail)
    }

    pub fn insufficient(&self) -> bool {
        self.entries.iter().any(|e| e.status == CheckStatus::InsufficientSamples)
    }

    /// Entries testing `claim`.
    pub fn claim(&self, claim: Claim) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(move |e| e.claim == claim)
    }

    /// All entries of `claim` passed (and at least one exists).
    pub fn claim_passed(&self, claim: Claim) -> bool {
        let mut any = false;
        for e in self.claim(claim) {
            any = true;
            if e.status != CheckStatus::Pass {
                return false;
            }
        }
        any
    }
}

struct Builder {
    n: usize,
    entries: Vec<CheckEntry>,
}

impl Builder {
    fn stat(&mut self, claim: Claim, label: String, who: (Option<usize>, Option<usize>), z: f64) {
        let status = if self.n < MIN_SAMPLES {
            CheckStatus::InsufficientSamples
        } else if z.is_finite() && z <= SE_TOL {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        self.entries.push(CheckEntry {
            claim,
            label,
            player: who.0,
            stage: who.1,
            statistic: z,
            tolerance: SE_TOL,
            status,
            samples: self.n,
        });
    }

    fn exact(&mut self, claim: Claim, label: String, who: (Option<usize>, Option<usize>), diff: f64, tol: f64) {
        let status = if diff <= tol { CheckStatus::Pass } else { CheckStatus::Fail };
        self.entries.push(CheckEntry {
            claim,
            label,
            player: who.0,
            stage: who.1,
            statistic: diff,
            tolerance: tol,
            status,
            samples: self.n,
        });
    }

    /// Regresses `y` on `[x, 1]` and scores each coefficient against `want`.
    fn regression(&mut self, claim: Claim, label: String, who: (Option<usize>, Option<usize>), x: &DMatrix<f64>, y: &DVector<f64>, want: &[f64]) {
        let design = DMatrix::from_fn(x.nrows(), x.ncols() + 1, |r, c| if c < x.ncols() { x[(r, c)] } else { 1.0 });
        let z = match ols(&design, y) {
            Some(fit) => (0..want.len())
                .map(|c| {
                    let d = (fit.coef[c] - want[c]).abs();
                    if fit.std_err[c] > 0.0 {
                        d / fit.std_err[c]
                    } else if d <= COV_FLOOR {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                })
                .fold(0.0, f64::max),
            None => f64::NAN,
        };
        self.stat(claim, label, who, z);
    }

    /// Scores the upper triangle of the sample covariance of `data` against `want`.
    fn covariance(&mut self, claim: Claim, label: &str, who: (Option<usize>, Option<usize>), data: &DMatrix<f64>, want: &DMatrix<f64>) {
        let emp = sample_cov(data);
        let n = data.nrows();
        for a in 0..want.nrows() {
            for b in a..want.ncols() {
                let d = (emp[(a, b)] - want[(a, b)]).abs();
                let se = cov_entry_se(want, a, b, n);
                let z = if d <= COV_FLOOR { 0.0 } else { d / se };
                self.stat(claim, format!("{label}[{a},{b}]"), who, z);
            }
        }
    }
}

fn column(paths: &[Trajectory], get: impl Fn(&Trajectory) -> Vec<f64>) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = paths.iter().map(get).collect();
    let k = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), k, |r, c| rows[r][c])
}

fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Runs every check on `n_paths` on-path simulations of `profile`.
pub fn consistency_report(spec: &GameSpec, profile: &StrategyProfile, n_paths: usize, seed: u64) -> Result<ConsistencyReport> {
    let rec = build_public_recursion(spec, profile)?;
    consistency_report_with(spec, profile, &rec, n_paths, seed)
}

/// As [`consistency_report`], judging against the supplied public recursion.
/// Paths are always simulated with `rec`, so a recursion whose coefficients
/// were altered after the fact is tested against honest data.
pub fn consistency_report_with(
    spec: &GameSpec,
    profile: &StrategyProfile,
    rec: &PublicRecursion,
    n_paths: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    let layout = Layout::of(spec);
    let (n, nv, na) = (layout.n, layout.nv, layout.na);
    let horizon = spec.horizon;
    let sampler = Sampler::new(spec);
    let paths: Vec<Trajectory> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| play(spec, profile, rec, &sampler.draw(seed, p), None))
        .collect();
    let mut out = Builder { n: n_paths, entries: Vec::new() };
    let mut notes = Vec::new();
    if n_paths < MIN_SAMPLES {
        notes.push(format!("only {n_paths} paths; statistical entries need {MIN_SAMPLES}"));
    }

    // Publicness: an independent rebuild from the profile alone.
    let again = build_public_recursion(spec, profile)?;
    for t in 0..horizon {
        for i in 0..n {
            let (a, b) = (rec.at(i, t), again.at(i, t));
            let diff = max_diff(&a.sigma, &b.sigma)
                .max(max_diff(&a.cross_coeff, &b.cross_coeff))
                .max(max_diff(&a.belief_cov, &b.belief_cov));
            out.exact(Claim::CovariancePublic, "rebuild".into(), (Some(i), Some(t)), diff, 0.0);
        }
    }

    // Offsets from actions alone, and own-action innovations.
    let mut offset_diff = 0.0f64;
    let mut own_innov = 0.0f64;
    for tr in &paths {
        let mut observer = PublicObserver::new(rec, profile);
        for t in 0..horizon {
            let f = DVector::from_column_slice(&tr.f[t]);
            offset_diff = observer
                .offsets()
                .iter()
                .zip(f.iter())
                .fold(offset_diff, |m, (a, b)| m.max((a - b).abs()));
            for i in 0..n {
                let v_hat = DVector::from_column_slice(&tr.v_hat[t][i]);
                let want = profile.get(i, t).action(&v_hat, &f);
                for k in 0..na {
                    own_innov = own_innov.max((tr.a[t][layout.a_of(i) + k] - want[k]).abs());
                }
            }
            observer.observe(&DVector::from_column_slice(&tr.a[t]));
        }
    }
    out.exact(Claim::OffsetsPublic, "public observer".into(), (None, None), offset_diff, 0.0);
    out.exact(Claim::OwnActionInnovation, "max |a - L v̂ - M f - c|".into(), (None, None), own_innov, OWN_INNOVATION_TOL);

    let oracle = match conditioning_oracle(spec, profile) {
        Ok(o) => Some(o),
        Err(e) => {
            notes.push(format!("stacked covariance skipped: {e}"));
            None
        }
    };

    for t in 0..horizon {
        for i in 0..n {
            let who = (Some(i), Some(t));
            let fs = rec.at(i, t);
            let own = column(&paths, |tr| tr.v_hat[t][i].clone());

            // Cross-estimates: v̂^j - f^{ij} regressed on [v̂^i, 1].
            for j in layout.others(i) {
                for k in 0..nv {
                    let row = layout.pos(i, j) * nv + k;
                    let off = layout.f_sub(i, j) + k;
                    let y = DVector::from_iterator(n_paths, paths.iter().map(|tr| tr.v_hat[t][j][k] - tr.f[t][off]));
                    let mut want: Vec<f64> = fs.cross_coeff.row(row).iter().copied().collect();
                    want.push(0.0);
                    out.regression(Claim::CrossEstimateAffine, format!("v̂^{j}[{k}]"), who, &own, &y, &want);
                }
            }

            // Errors of own and cross estimates against the belief covariance.
            let errs = column(&paths, |tr| {
                let mut e: Vec<f64> = (0..nv).map(|k| tr.v[k] - tr.v_hat[t][i][k]).collect();
                for j in layout.others(i) {
                    for k in 0..nv {
                        let cross: f64 = (0..nv)
                            .map(|m| fs.cross_coeff[(layout.pos(i, j) * nv + k, m)] * tr.v_hat[t][i][m])
                            .sum();
                        e.push(tr.v_hat[t][j][k] - cross - tr.f[t][layout.f_sub(i, j) + k]);
                    }
                }
                e
            });
            out.covariance(Claim::BeliefCovariance, "err", who, &errs, &fs.belief_cov);

            if let Some(oracle) = &oracle {
                let mut state = DMatrix::zeros(nv, oracle.zeta_cov.nrows());
                state.view_mut((0, 0), (nv, nv)).fill_with_identity();
                let mut maps = vec![state];
                maps.push(oracle.stages[t].v_hat[i].map.clone());
                for j in layout.others(i) {
                    maps.push(oracle.stages[t].v_hat[j].map.clone());
                }
                if t + 1 < horizon {
                    maps.push(oracle.stages[t + 1].signal[i].map.clone());
                }
                let stacked = crate::linalg::vstack(&maps);
                let want = &stacked * &oracle.zeta_cov * stacked.transpose();
                let data = column(&paths, |tr| {
                    let mut row = tr.v.clone();
                    row.extend_from_slice(&tr.v_hat[t][i]);
                    for j in layout.others(i) {
                        row.extend_from_slice(&tr.v_hat[t][j]);
                    }
                    if t + 1 < horizon {
                        row.extend_from_slice(&tr.x[t + 1][i]);
                    }
                    row
                });
                out.covariance(Claim::StackedCovariance, "joint", who, &data, &crate::linalg::symmetrize(&want));
            }

            if t + 1 < horizon {
                let zeros = vec![0.0; nv + 1];
                for k in 0..nv {
                    let inc = DVector::from_iterator(n_paths, paths.iter().map(|tr| tr.v_hat[t + 1][i][k] - tr.v_hat[t][i][k]));
                    out.regression(Claim::EstimateMartingale, format!("Δv̂[{k}]"), who, &own, &inc, &zeros);
                    let pred = DVector::from_iterator(n_paths, paths.iter().map(|tr| tr.x[t + 1][i][k] - tr.v_hat[t][i][k]));
                    out.regression(Claim::SignalPrediction, format!("x - v̂ [{k}]"), who, &own, &pred, &zeros);
                }
            }

            if t + 2 < horizon {
                let data = column(&paths, |tr| {
                    let mut row: Vec<f64> = (0..nv).map(|k| tr.v_hat[t + 1][i][k] - tr.v_hat[t][i][k]).collect();
                    row.extend((0..nv).map(|k| tr.v_hat[t + 2][i][k] - tr.v_hat[t + 1][i][k]));
                    row
                });
                let cov = sample_cov(&data);
                for a in 0..nv {
                    for b in 0..nv {
                        let z = cov[(a, nv + b)].abs() / cov_entry_se(&cov, a, nv + b, n_paths);
                        out.stat(Claim::InnovationWhiteness, format!("Δv̂_t[{a}] Δv̂_t+1[{b}]"), who, z);
                    }
                }
            }
        }
    }
    Ok(ConsistencyReport {
        n_paths,
        seed,
        entries: out.entries,
        notes,
    })
}
