use lqg_pbe::filters::{action_innovation, build_public_recursion};
use lqg_pbe::layout::Layout;
use lqg_pbe::simulation::{exact_rewards, pairwise_sum, sample_path_at, Deviation};
use lqg_pbe::solver::{solve_equilibrium, SolverOptions};
use lqg_pbe::state_evolution::build_observation_matrix;
use lqg_pbe::{instances, linalg, GameSpec, StrategyProfile};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_profile(spec: &GameSpec, seed: u64, scale: f64) -> StrategyProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = StrategyProfile::zeros(spec);
    for stage in &mut p.stages {
        for s in stage.iter_mut() {
            s.l_mat = s.l_mat.map(|_| rng.random_range(-scale..scale));
            s.m_f = s.m_f.map(|_| rng.random_range(-0.5..0.5));
            for c in &mut s.m_const {
                *c = rng.random_range(-0.5..0.5);
            }
        }
    }
    p
}

fn small_game() -> impl Strategy<Value = GameSpec> {
    (2usize..4, 1usize..3, 1usize..3, 1usize..4, any::<u64>())
        .prop_map(|(n, nv, na, t, seed)| instances::random_game(n, nv, na, t, seed))
}

fn col(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Iterating the stacked model reproduces the tuple built from each
    /// player's own filter.
    #[test]
    fn stacked_model_matches_filters(spec in small_game(), pseed in any::<u64>(), path in 0u64..1000) {
        let profile = random_profile(&spec, pseed, 1.0);
        let rec = build_public_recursion(&spec, &profile).unwrap();
        let layout = Layout::of(&spec);
        let tr = sample_path_at(&spec, &profile, &rec, 7, path, None);
        for i in 0..layout.n {
            let state = |t: usize| {
                let mut s = tr.v.clone();
                let prev = |j: usize| if t == 0 { vec![0.0; layout.nv] } else { tr.v_hat[t - 1][j].clone() };
                s.extend(prev(i));
                for j in layout.others(i) {
                    s.extend(prev(j));
                }
                s.extend(&tr.x[t][i]);
                col(&s)
            };
            for t in 0..spec.horizon - 1 {
                let mut noise: Vec<f64> = Vec::new();
                for j in layout.others(i) {
                    noise.extend(&tr.noise[t][j]);
                }
                noise.extend(&tr.noise[t + 1][i]);
                let (u_prev, f_prev) = if t == 0 {
                    (DVector::zeros(layout.a_dim()), DVector::zeros(layout.n_f()))
                } else {
                    let f = col(&tr.f[t - 1]);
                    (action_innovation(&profile, t - 1, &col(&tr.a[t - 1]), &f), f)
                };
                let next = rec.at(i, t).model.propagate(&state(t), &col(&noise), &u_prev, &f_prev);
                let want = state(t + 1);
                prop_assert!((next - &want).amax() < 1e-9 * (1.0 + want.amax()));
            }
        }
    }

    /// Public covariances are symmetric and PSD for arbitrary profiles.
    #[test]
    fn covariances_are_symmetric_psd(spec in small_game(), pseed in any::<u64>()) {
        let profile = random_profile(&spec, pseed, 2.0);
        let rec = build_public_recursion(&spec, &profile).unwrap();
        for stage in &rec.stages {
            for fs in stage {
                for m in [&fs.sigma, &fs.next_pred, &fs.belief_cov, &fs.tilde_sigma] {
                    prop_assert!(linalg::asymmetry(m) == 0.0);
                    prop_assert!(linalg::min_eigenvalue(m) > -1e-9);
                }
            }
        }
    }

    /// With zero gains no action carries information.
    #[test]
    fn silent_gains_give_zero_action_rows(spec in small_game()) {
        let layout = Layout::of(&spec);
        let zeros = vec![DMatrix::zeros(layout.na, layout.nv); layout.n];
        for i in 0..layout.n {
            let c = build_observation_matrix(&spec, i, &zeros);
            prop_assert_eq!(c.rows(0, layout.n * layout.na).amax(), 0.0);
        }
    }

    /// Recomputing the recursion gives bit-identical public data.
    #[test]
    fn recursion_is_public_and_deterministic(spec in small_game(), pseed in any::<u64>()) {
        let profile = random_profile(&spec, pseed, 1.0);
        let a = build_public_recursion(&spec, &profile).unwrap();
        let b = build_public_recursion(&spec, &profile).unwrap();
        prop_assert!(a == b);
    }

    /// Identical seeds give identical paths.
    #[test]
    fn paths_are_reproducible(seed in any::<u64>(), path in any::<u64>()) {
        let spec = instances::canonical(3, 42);
        let profile = random_profile(&spec, 3, 1.0);
        let rec = build_public_recursion(&spec, &profile).unwrap();
        let a = sample_path_at(&spec, &profile, &rec, seed, path, None);
        let b = sample_path_at(&spec, &profile, &rec, seed, path, None);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pairwise_sum_is_close_to_naive(xs in prop::collection::vec(-1e3f64..1e3, 0..400)) {
        let naive: f64 = xs.iter().sum();
        let scale: f64 = xs.iter().map(|x| x.abs()).sum::<f64>() + 1.0;
        prop_assert!((pairwise_sum(&xs) - naive).abs() <= 1e-12 * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// At a converged profile no single-stage coefficient perturbation of
    /// norm 1e-2 raises the deviator's exact expected payoff.
    #[test]
    fn converged_profile_is_locally_optimal(
        t in 0usize..3,
        i in 0usize..2,
        dir in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let spec = instances::canonical(3, 42);
        let eq = solve_equilibrium(&spec, &SolverOptions::default()).unwrap();
        prop_assume!(dir.iter().any(|x| *x != 0.0));
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d: Vec<f64> = dir.iter().map(|x| 1e-2 * x / norm).collect();
        let mut rule = eq.profile.get(i, t).clone();
        rule.l_mat[(0, 0)] += d[0];
        rule.m_f[(0, 0)] += d[1];
        rule.m_f[(0, 1)] += d[2];
        rule.m_const[0] += d[3];
        let base = exact_rewards(&spec, &eq.profile, &eq.recursion, None)[i];
        let dev = Deviation { player: i, stage: t, rule };
        let moved = exact_rewards(&spec, &eq.profile, &eq.recursion, Some(&dev))[i];
        prop_assert!(moved <= base + 1e-10 * (1.0 + base.abs()), "gain {}", moved - base);
    }
}

#[test]
fn converged_stage_hessians_are_negative() {
    for horizon in 1..=4 {
        let eq = solve_equilibrium(&instances::canonical(horizon, 42), &SolverOptions::default()).unwrap();
        assert!(eq.report.converged);
        assert!(eq.report.residual <= 1e-9);
        assert!(eq.report.hessian_max_eig.unwrap() < 0.0);
    }
}
