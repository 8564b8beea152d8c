use context_insert::gmm::{effective_components, fit_em, fit_em_traced, mean_loglik, FitConfig, GmmError};
use context_insert::scene_model::PairFeature;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cloud(seed: u64, n: usize, centres: &[[f64; 4]]) -> Vec<PairFeature> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = centres[i % centres.len()];
            let mut x = c;
            for v in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += 0.1 * z;
            }
            PairFeature(x)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn log_likelihood_never_drops(seed in any::<u64>(), n in 5usize..120, k in 1usize..5) {
        let samples = cloud(seed, n, &[[0.0, 0.0, 0.5, 0.5], [1.0, 0.3, 0.2, 0.9]]);
        let (model, trace) = fit_em_traced(&samples, &FitConfig { k, seed, ..FitConfig::default() }).unwrap();
        prop_assert_eq!(model.k(), effective_components(k, n));
        for w in trace.mean_loglik.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        prop_assert!((model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_ignores_sample_order(seed in any::<u64>(), n in 10usize..80) {
        let samples = cloud(seed, n, &[[0.0, 0.0, 0.5, 0.5], [0.8, 0.8, 0.3, 0.3]]);
        let mut reversed = samples.clone();
        reversed.reverse();
        let cfg = FitConfig { k: 2, seed: 3, ..FitConfig::default() };
        prop_assert_eq!(fit_em(&samples, &cfg).unwrap(), fit_em(&reversed, &cfg).unwrap());
    }
}

#[test]
fn component_count_shrinks_with_few_samples() {
    assert_eq!(effective_components(4, 3), 1);
    assert_eq!(effective_components(4, 10), 2);
    assert_eq!(effective_components(4, 1000), 4);
}

#[test]
fn single_sample_fits_a_ridge_gaussian() {
    let x = PairFeature([0.2, 0.4, 0.1, 0.3]);
    let g = fit_em(&[x], &FitConfig { reg_covar: 1e-3, ..FitConfig::default() }).unwrap();
    assert_eq!(g.k(), 1);
    let c = &g.components()[0];
    for d in 0..4 {
        assert!((c.mean()[d] - x.0[d]).abs() < 1e-12);
        assert!((c.covariance()[d][d] - 1e-3).abs() < 1e-12);
    }
    assert!(mean_loglik(&g, &[x]).unwrap().is_finite());
}

#[test]
fn empty_input_and_bad_config_are_rejected() {
    assert!(matches!(fit_em(&[], &FitConfig::default()), Err(GmmError::NoSamples)));
    let x = [PairFeature([0.0; 4])];
    assert!(matches!(fit_em(&x, &FitConfig { k: 0, ..FitConfig::default() }), Err(GmmError::InvalidConfig(_))));
}

#[test]
fn more_restarts_never_lower_the_final_fit() {
    let samples = cloud(9, 300, &[[0.0, 0.0, 0.5, 0.5], [1.0, 1.0, 0.5, 0.5], [2.0, 0.0, 0.5, 0.5]]);
    let one = fit_em(&samples, &FitConfig { k: 3, n_init: 1, seed: 5, ..FitConfig::default() }).unwrap();
    let many = fit_em(&samples, &FitConfig { k: 3, n_init: 4, seed: 5, ..FitConfig::default() }).unwrap();
    assert!(mean_loglik(&many, &samples).unwrap() >= mean_loglik(&one, &samples).unwrap() - 1e-12);
}
