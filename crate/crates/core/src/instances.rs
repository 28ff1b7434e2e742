//! Reproducible game instances used by the test suites and the CLI examples.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg;
use crate::GameSpec;

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn random_pd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let g = uniform(rng, n, n, 1.0);
    linalg::symmetrize(&(&g * g.transpose() * 0.5 + DMatrix::identity(n, n) * floor))
}

/// Random reward matrix with a negative definite action block.
fn random_reward(rng: &mut ChaCha8Rng, n: usize, nv: usize, na: usize) -> DMatrix<f64> {
    let nb = nv + n * na;
    let mut b = DMatrix::zeros(nb, nb);
    let vv = uniform(rng, nv, nv, 1.0);
    linalg::set_block(&mut b, 0, 0, &linalg::symmetrize(&vv));
    let va = uniform(rng, nv, n * na, 1.0);
    linalg::set_block(&mut b, 0, nv, &va);
    linalg::set_block(&mut b, nv, 0, &va.transpose());
    let aa = -random_pd(rng, n * na, 1.0);
    linalg::set_block(&mut b, nv, nv, &aa);
    b
}

/// Two players, scalar state and actions, unit prior and noise. Each
/// player's reward tracks the state through her own action, with weak and
/// random dependence on the other player's action; the joint action block is
/// negative definite.
pub fn canonical(horizon: usize, seed: u64) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reward_mat = (0..2)
        .map(|i| {
            let mut b = DMatrix::zeros(3, 3);
            b[(0, 0)] = rng.random_range(-1.0..1.0);
            for j in 0..2 {
                let w = if i == j {
                    let m = rng.random_range(0.5..1.5);
                    if rng.random_bool(0.5) { m } else { -m }
                } else {
                    rng.random_range(-0.3..0.3)
                };
                b[(0, 1 + j)] = w;
                b[(1 + j, 0)] = w;
            }
            let cross = rng.random_range(-0.2..0.2);
            let (own, other) = (1 + i, 2 - i);
            b[(own, own)] = -1.0;
            b[(other, other)] = -0.1;
            b[(own, other)] = cross;
            b[(other, own)] = cross;
            b
        })
        .collect();
    GameSpec {
        n_players: 2,
        horizon,
        dim_v: 1,
        dim_a: 1,
        prior_cov: DMatrix::identity(1, 1),
        noise_cov: vec![DMatrix::identity(1, 1); 2],
        reward_mat,
    }
}

/// Fully random instance: random PD prior and noise covariances.
pub fn random_game(n: usize, nv: usize, na: usize, horizon: usize, seed: u64) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior_cov = random_pd(&mut rng, nv, 0.3);
    let noise_cov = (0..n).map(|_| random_pd(&mut rng, nv, 0.3)).collect();
    let reward_mat = (0..n).map(|_| random_reward(&mut rng, n, nv, na)).collect();
    GameSpec {
        n_players: n,
        horizon,
        dim_v: nv,
        dim_a: na,
        prior_cov,
        noise_cov,
        reward_mat,
    }
}

/// Two-player instance that is invariant under swapping the players.
pub fn symmetric(horizon: usize, seed: u64) -> GameSpec {
    let mut spec = canonical(horizon, seed);
    let swap = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    spec.reward_mat[1] = &swap * &spec.reward_mat[0] * &swap;
    spec
}

/// Rewards that depend only on `(v, a^i)` for each player `i`.
pub fn decoupled(n: usize, nv: usize, na: usize, horizon: usize, seed: u64) -> GameSpec {
    let mut spec = random_game(n, nv, na, horizon, seed);
    for (i, b) in spec.reward_mat.iter_mut().enumerate() {
        for j in (0..n).filter(|&j| j != i) {
            let o = nv + j * na;
            b.rows_mut(o, na).fill(0.0);
            b.columns_mut(o, na).fill(0.0);
        }
    }
    spec
}

/// All reward matrices zero.
pub fn zero_reward(n: usize, horizon: usize) -> GameSpec {
    GameSpec {
        n_players: n,
        horizon,
        dim_v: 1,
        dim_a: 1,
        prior_cov: DMatrix::identity(1, 1),
        noise_cov: vec![DMatrix::identity(1, 1); n],
        reward_mat: vec![DMatrix::zeros(1 + n, 1 + n); n],
    }
}
