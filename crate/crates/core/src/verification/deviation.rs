//! One-shot deviation tests of sequential rationality.
//!
//! A deviation replaces one player's rule at one stage. Both arms are scored
//! on the same primitive draws (common random numbers). Per-path totals come
//! from [`reward_forms`], the exact closed-loop reward of a draw, which is
//! what [`crate::simulation::play`] computes step by step; the deviator keeps
//! filtering correctly while everyone else processes her off-path actions
//! through the ordinary affine update.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::PublicRecursion;
use crate::layout::Layout;
use crate::linalg::serde_rows;
use crate::profile::{AffineStrategy, StrategyProfile};
use crate::simulation::{mean_and_se, primitive_cov, reward_forms, Deviation, RewardForm, Sampler};
use crate::GameSpec;

/// Fewest paths accepted by [`deviation_gain`].
pub const MIN_PATHS: usize = 1000;
/// A gain this many standard errors above zero is a detected deviation.
pub const GAIN_SE_TOL: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DeviationKind {
    /// Unit-norm direction in `(L, M, c)`, scaled by the magnitude.
    Perturbation {
        #[serde(with = "serde_rows")]
        gain: DMatrix<f64>,
        #[serde(with = "serde_rows")]
        offset: DMatrix<f64>,
        constant: Vec<f64>,
    },
    /// Play `magnitude` in every action coordinate, ignoring information.
    Override,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSpec {
    pub player: usize,
    pub stage: usize,
    pub kind: DeviationKind,
    pub magnitude: f64,
}

impl DeviationSpec {
    fn check(&self, spec: &GameSpec) -> Result<()> {
        if self.player >= spec.n_players || self.stage >= spec.horizon {
            return Err(Error::InvalidArgument {
                arg: "deviation",
                reason: format!("no player {} at stage {}", self.player, self.stage),
            });
        }
        if !self.magnitude.is_finite() {
            return Err(Error::InvalidArgument {
                arg: "deviation",
                reason: "magnitude must be finite".into(),
            });
        }
        Ok(())
    }

    /// The deviating rule that replaces the announced one.
    pub fn rule(&self, profile: &StrategyProfile) -> AffineStrategy {
        let base = profile.get(self.player, self.stage);
        match &self.kind {
            DeviationKind::Perturbation { gain, offset, constant } => AffineStrategy {
                l_mat: &base.l_mat + gain * self.magnitude,
                m_f: &base.m_f + offset * self.magnitude,
                m_const: base.m_const.iter().zip(constant).map(|(c, d)| c + d * self.magnitude).collect(),
            },
            DeviationKind::Override => AffineStrategy {
                l_mat: base.l_mat.map(|_| 0.0),
                m_f: base.m_f.map(|_| 0.0),
                m_const: vec![self.magnitude; base.m_const.len()],
            },
        }
    }

    fn as_deviation(&self, profile: &StrategyProfile) -> Deviation {
        Deviation {
            player: self.player,
            stage: self.stage,
            rule: self.rule(profile),
        }
    }
}

/// Estimated gain of a deviation for the deviating player.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEstimate {
    pub gain: f64,
    pub std_err: f64,
    /// Closed-form expected gain, for reference.
    pub exact_gain: f64,
    pub n_paths: usize,
}

impl GainEstimate {
    /// Gain in standard errors; zero when both arms coincide.
    pub fn z(&self) -> f64 {
        if self.std_err > 0.0 {
            self.gain / self.std_err
        } else if self.gain > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

fn gain_form(spec: &GameSpec, profile: &StrategyProfile, rec: &PublicRecursion, dev: &DeviationSpec) -> RewardForm {
    let p = dev.player;
    let base = reward_forms(spec, profile, rec, None).swap_remove(p);
    let moved = reward_forms(spec, profile, rec, Some(&dev.as_deviation(profile))).swap_remove(p);
    RewardForm {
        quad: moved.quad - base.quad,
        lin: moved.lin - base.lin,
        constant: moved.constant - base.constant,
    }
}

fn draws(spec: &GameSpec, n_paths: usize, seed: u64) -> Vec<Vec<f64>> {
    let sampler = Sampler::new(spec);
    (0..n_paths as u64)
        .into_par_iter()
        .map(|p| sampler.draw(seed, p).zeta())
        .collect()
}

fn estimate(form: &RewardForm, zetas: &[Vec<f64>], cov: &DMatrix<f64>) -> GainEstimate {
    let diffs: Vec<f64> = zetas.par_iter().map(|z| form.eval(z)).collect();
    let (gain, std_err) = mean_and_se(&diffs);
    GainEstimate {
        gain,
        std_err,
        exact_gain: form.mean(cov),
        n_paths: zetas.len(),
    }
}

/// Monte Carlo estimate of `E[deviator's total | deviation] - E[deviator's total]`.
pub fn deviation_gain(
    spec: &GameSpec,
    profile: &StrategyProfile,
    rec: &PublicRecursion,
    dev: &DeviationSpec,
    n_paths: usize,
    seed: u64,
) -> Result<GainEstimate> {
    dev.check(spec)?;
    if n_paths < MIN_PATHS {
        return Err(Error::InvalidArgument {
            arg: "n_paths",
            reason: format!("deviation tests need at least {MIN_PATHS} paths, got {n_paths}"),
        });
    }
    let zetas = draws(spec, n_paths, seed);
    Ok(estimate(&gain_form(spec, profile, rec, dev), &zetas, &primitive_cov(spec)))
}

/// Composition of the per-(player, stage) deviation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Random perturbation directions, each tried with both signs.
    pub directions: usize,
    pub magnitudes: Vec<f64>,
    /// Constant actions tried as overrides.
    pub overrides: Vec<f64>,
}

impl Default for GridOptions {
    /// 3 directions x 2 signs x 2 magnitudes + 4 overrides = 16 points.
    fn default() -> Self {
        Self {
            directions: 3,
            magnitudes: vec![1e-2, 1e-1],
            overrides: vec![-1.0, 0.0, 1.0, 2.0],
        }
    }
}

impl GridOptions {
    pub fn points(&self) -> usize {
        2 * self.directions * self.magnitudes.len() + self.overrides.len()
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, layout: &Layout) -> DeviationKind {
    let mut draw = |r: usize, c: usize| DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(rng));
    let gain = draw(layout.na, layout.nv);
    let offset = draw(layout.na, layout.n_f());
    let constant = draw(layout.na, 1);
    let norm = (gain.norm_squared() + offset.norm_squared() + constant.norm_squared()).sqrt();
    DeviationKind::Perturbation {
        gain: gain / norm,
        offset: offset / norm,
        constant: constant.iter().map(|x| x / norm).collect(),
    }
}

/// The deviation grid for one player and stage; directions are drawn from
/// a generator keyed by `(seed, player, stage)`.
pub fn deviation_grid(spec: &GameSpec, player: usize, stage: usize, opts: &GridOptions, seed: u64) -> Vec<DeviationSpec> {
    let layout = Layout::of(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4445_5649);
    rng.set_stream(((player as u64) << 32) | stage as u64);
    let mut out = Vec::with_capacity(opts.points());
    for _ in 0..opts.directions {
        let kind = unit_direction(&mut rng, &layout);
        for &m in &opts.magnitudes {
            for sign in [1.0, -1.0] {
                out.push(DeviationSpec {
                    player,
                    stage,
                    kind: kind.clone(),
                    magnitude: sign * m,
                });
            }
        }
    }
    for &c in &opts.overrides {
        out.push(DeviationSpec {
            player,
            stage,
            kind: DeviationKind::Override,
            magnitude: c,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub deviation: DeviationSpec,
    pub estimate: GainEstimate,
    #[serde(with = "crate::linalg::serde_nullable")]
    pub z: f64,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationCertificate {
    pub n_paths: usize,
    pub seed: u64,
    pub grid: GridOptions,
    pub entries: Vec<GridEntry>,
}

impl DeviationCertificate {
    /// No deviation gained more than [`GAIN_SE_TOL`] standard errors.
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.detected)
    }

    pub fn max_z(&self) -> f64 {
        self.entries.iter().map(|e| e.z).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn detected(&self) -> impl Iterator<Item = &GridEntry> {
        self.entries.iter().filter(|e| e.detected)
    }
}

/// Runs the deviation grid at every (player, stage). All deviations share
/// one set of primitive draws.
pub fn deviation_certificate(
    spec: &GameSpec,
    profile: &StrategyProfile,
    rec: &PublicRecursion,
    opts: &GridOptions,
    n_paths: usize,
    seed: u64,
) -> Result<DeviationCertificate> {
    if n_paths < MIN_PATHS {
        return Err(Error::InvalidArgument {
            arg: "n_paths",
            reason: format!("deviation tests need at least {MIN_PATHS} paths, got {n_paths}"),
        });
    }
    let zetas = draws(spec, n_paths, seed);
    let cov = primitive_cov(spec);
    let mut entries = Vec::new();
    for stage in 0..spec.horizon {
        for player in 0..spec.n_players {
            for dev in deviation_grid(spec, player, stage, opts, seed) {
                let est = estimate(&gain_form(spec, profile, rec, &dev), &zetas, &cov);
                let z = est.z();
                entries.push(GridEntry {
                    deviation: dev,
                    estimate: est,
                    z,
                    detected: z > GAIN_SE_TOL,
                });
            }
        }
    }
    Ok(DeviationCertificate {
        n_paths,
        seed,
        grid: opts.clone(),
        entries,
    })
}
