//! Cross-module invariants checked on generated inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use racer_core::metrics::{evaluate_probs, EvalMode};
use racer_core::reweight::{tilt_weights, Direction};
use racer_core::saddle::{dual_function, solve_saddle, ConvergenceConstants, TabularProblem};
use racer_core::trainer::{batch_objective, DualState};
use racer_core::{Dataset, Instance, PolicySpec};

fn instance_strategy(dim: usize) -> impl Strategy<Value = Instance> {
    (
        prop::collection::vec(-5.0f64..5.0, dim),
        any::<[bool; 2]>(),
        0.1f64..10.0,
        0.1f64..50.0,
    )
        .prop_map(|(features, correct, c0, c1)| Instance::new("x", features, correct, [c0, c1], None))
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..5).prop_flat_map(|dim| {
        prop::collection::vec(instance_strategy(dim), 1..40).prop_map(|mut xs| {
            for (i, x) in xs.iter_mut().enumerate() {
                x.id = format!("x{i}");
            }
            Dataset::new(xs).unwrap().normalize()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_instruct_cost_has_unit_mean(data in dataset_strategy()) {
        prop_assert!((data.mean_cost(0) - 1.0).abs() < 1e-9);
        let again = data.clone().normalize();
        prop_assert_eq!(again.instances(), data.instances());
    }

    #[test]
    fn policies_output_probabilities(data in dataset_strategy(), seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mut policy in [PolicySpec::linear_zeros(data.dim()), PolicySpec::feedforward(data.dim(), &[8, 4], &mut rng)] {
            let theta: Vec<f64> = policy.params().iter().enumerate().map(|(i, _)| scale * ((i as f64 * 1.7 + seed as f64).sin())).collect();
            policy.set_params(&theta);
            for x in data.instances() {
                let p = policy.prob(x).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn metrics_stay_in_range(data in dataset_strategy(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let probs = vec![p; data.len()];
        for mode in [EvalMode::Expected, EvalMode::Sampled] {
            let m = evaluate_probs(&probs, &data, mode, seed).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.accuracy));
            prop_assert!((0.0..=1.0).contains(&m.reasoning_fraction));
            prop_assert!(m.realized_cost > 0.0);
        }
    }

    #[test]
    fn saddle_solution_satisfies_kkt(
        n in 1usize..16,
        seed in any::<u64>(),
        beta in 0.05f64..3.0,
        max_cost in 0.5f64..3.0,
        max_weight in 0.5f64..3.0,
    ) {
        let p = TabularProblem::random(n, seed, beta, max_cost, max_weight).unwrap();
        let c = ConvergenceConstants::from_problem(&p).unwrap();
        prop_assert!(c.kappa > 0.0 && c.kappa < 1.0 && c.eta > 0.0);
        let s = solve_saddle(&p, 1e-10).unwrap();
        prop_assert!(c.lambda_cap.is_finite() && c.lambda_cap >= s.lambda_star);
        let g = dual_function(&p, s.lambda_star).d1;
        if s.lambda_star > 0.0 {
            prop_assert!(g.abs() <= 1e-9, "d'(lambda*) = {}", g);
        } else {
            prop_assert!(g >= 0.0);
        }
        prop_assert!(s.probs.iter().all(|q| *q > 0.0 && *q < 1.0));
    }

    #[test]
    fn indifferent_policy_objective_has_closed_form(data in dataset_strategy(), lambda in 0.0f64..5.0, beta in 0.001f64..1.0) {
        let batch: Vec<&Instance> = data.instances().iter().collect();
        let flat = vec![1.0; batch.len()];
        let uniform = tilt_weights(&flat, 1.0, Direction::WorstHigh).unwrap();
        let dual = DualState { lambda, eta: 0.01, beta };
        let policy = PolicySpec::linear_zeros(data.dim());
        let (value, grad) = batch_objective(&policy, &batch, &uniform, &uniform, &dual).unwrap();
        let n = batch.len() as f64;
        let reward: f64 = batch.iter().map(|x| 0.5 * (x.reward(0) + x.reward(1))).sum::<f64>() / n;
        let cost: f64 = batch.iter().map(|x| 0.5 * (x.cost[0] + x.cost[1])).sum::<f64>() / n;
        let expected = reward - lambda * cost + beta * std::f64::consts::LN_2;
        prop_assert!((value - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "{} vs {}", value, expected);
        prop_assert_eq!(grad.len(), policy.num_params());
    }
}
