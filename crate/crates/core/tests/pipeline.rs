//! End-to-end behaviour of the training pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uniq_core::baselines::iq_objective;
use uniq_core::eval::evaluate;
use uniq_core::experiment::{
    build_datasets, generate_pools, prepare_environment, train_method, ExperimentConfig, Method,
};
use uniq_core::mdp::{QTable, Table};
use uniq_core::ratio::{fit_ratio, RatioConfig, RatioEstimate};
use uniq_core::uniq::{f_objective, train_uniq, TransitionBatch, ValueMode};
use uniq_core::{OccupancyWeighting, Regularizer};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::level2();
    cfg.data.pool_size = 1_500;
    cfg.data.n_safe = 100;
    cfg.data.n_undesired = 400;
    cfg.data.n_un = 100;
    cfg.data.un_reserve = 150;
    cfg.eval.episodes = 500;
    cfg
}

#[test]
fn training_is_deterministic() {
    let cfg = small_config();
    let env = prepare_environment(&cfg).unwrap();
    let data = build_datasets(&cfg, &env, &generate_pools(&cfg, &env, 3), 3, cfg.data.n_un).unwrap();
    let mut uniq = cfg.uniq;
    uniq.steps = 300;
    uniq.ratio.steps = 2_000;
    let a = train_uniq(&data.un, &data.mix, &uniq, 11).unwrap();
    let b = train_uniq(&data.un, &data.mix, &uniq, 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unit_ratio_matches_imitation_with_negated_regulariser() {
    let cfg = small_config();
    let env = prepare_environment(&cfg).unwrap();
    let data = build_datasets(&cfg, &env, &generate_pools(&cfg, &env, 0), 0, cfg.data.n_un).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mode in [ValueMode::Full, ValueMode::Sampled] {
        let batch = TransitionBatch::from_dataset(&data.un, OccupancyWeighting::Discounted, mode).unwrap();
        let ones = RatioEstimate::ones(batch.pair_weights().mapv(|w| w > 0.0));
        let psi = Regularizer::quadratic(0.7);
        let g = data.un.discount();
        for _ in 0..5 {
            let q = Table::from_shape_fn((batch.num_states(), batch.num_actions()), |_| {
                rng.random_range(-3.0..3.0)
            });
            let q = QTable::new(q).unwrap();
            let f = f_objective(&q, &ones, &batch, g, &psi);
            let phi = iq_objective(&q, &batch, g, &psi.negated());
            assert!((f - phi).abs() < 1e-10 * (1.0 + f.abs()), "{f} vs {phi}");
        }
    }
}

#[test]
fn identical_datasets_give_unit_ratio() {
    let cfg = small_config();
    let env = prepare_environment(&cfg).unwrap();
    let data = build_datasets(&cfg, &env, &generate_pools(&cfg, &env, 1), 1, cfg.data.n_un).unwrap();
    let fit = fit_ratio(&data.mix, &data.mix, &RatioConfig::default(), 0).unwrap();
    let est = fit.estimate();
    for ((&tau, &m), &w) in est.tau.iter().zip(est.support_mask.iter()).zip(fit.w_mix.iter()) {
        if m {
            assert!((tau - 1.0).abs() < 1e-3, "τ = {tau} at weight {w}");
        } else {
            assert_eq!(tau, 0.0);
        }
    }
}

#[test]
fn learned_policy_is_safer_than_cloning_the_mix() {
    let cfg = small_config();
    let env = prepare_environment(&cfg).unwrap();
    let data = build_datasets(&cfg, &env, &generate_pools(&cfg, &env, 0), 0, cfg.data.n_un).unwrap();
    let report = |m: Method| {
        let pi = train_method(&cfg, m, &data, 0).unwrap();
        evaluate(&env.mdp, &pi, cfg.eval.episodes, cfg.eval.horizon, 99).unwrap()
    };
    let uniq = report(Method::Uniq);
    let bc = report(Method::BcMix);
    assert!(
        uniq.mean_cost < bc.mean_cost,
        "uniq {} vs bc-mix {}",
        uniq.mean_cost,
        bc.mean_cost
    );
    assert!(
        uniq.mean_return > 0.5 * bc.mean_return,
        "uniq return {} vs {}",
        uniq.mean_return,
        bc.mean_return
    );
}
