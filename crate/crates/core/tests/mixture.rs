use latent_scope::mixture::{
    posterior_cluster_prob, sample_posterior, split_rhat, ChainConfig, MixtureModel, NigPosterior, Prior,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn bimodal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mu = if rng.random::<bool>() { 1.0 } else { -1.0 };
            mu + 0.1 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

#[test]
fn recovers_two_separated_components() {
    let x = bimodal(500, 11);
    let config = ChainConfig {
        burn_in: 500,
        samples: 500,
        seed: 3,
        ..Default::default()
    };
    let post = sample_posterior(&x, &config).unwrap();
    assert!((post.mean.mu[0] + 1.0).abs() < 0.05, "{:?}", post.mean);
    assert!((post.mean.mu[1] - 1.0).abs() < 0.05, "{:?}", post.mean);
    assert!((post.mean.theta[0] - 0.5).abs() < 0.05);
    assert!((post.mean.sigma[1] - 0.1).abs() < 0.02);
    assert!(post.rhat.max() < 1.05, "{:?}", post.rhat);
    assert!(post.converged());
    assert!(post.samples().all(|m| m.mu[0] <= m.mu[1]));
    assert_eq!(post.sample_count(), 4 * 500);
}

#[test]
fn single_chain_is_reproducible() {
    let x = bimodal(100, 5);
    let config = ChainConfig {
        chains: 1,
        burn_in: 20,
        samples: 30,
        seed: 9,
        ..Default::default()
    };
    let a = sample_posterior(&x, &config).unwrap();
    let b = sample_posterior(&x, &config).unwrap();
    assert_eq!(a.chains, b.chains);
    let c = sample_posterior(&x, &ChainConfig { seed: 10, ..config }).unwrap();
    assert_ne!(a.chains, c.chains);
}

#[test]
fn constant_data_is_flagged_and_sigma_stays_positive() {
    let x = vec![0.25; 200];
    let config = ChainConfig {
        chains: 2,
        burn_in: 50,
        samples: 50,
        ..Default::default()
    };
    let post = sample_posterior(&x, &config).unwrap();
    assert!(post.degenerate);
    assert!(!post.converged());
    assert!(post.samples().all(|m| m.sigma[0] > 0.0 && m.sigma[1] > 0.0));
}

#[test]
fn too_few_observations() {
    assert!(sample_posterior(&[1.0], &ChainConfig::default()).is_err());
    let bad = ChainConfig {
        burn_in: 0,
        ..Default::default()
    };
    assert!(sample_posterior(&[1.0, 2.0], &bad).is_err());
}

/// With every point in one component the mu draws must match the
/// closed-form Normal-Inverse-Gamma posterior mean.
#[test]
fn conjugate_draws_match_closed_form() {
    let prior = Prior::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let normal = Normal::new(0.7, 0.3).unwrap();
    let x: Vec<f64> = (0..40).map(|_| normal.sample(&mut rng)).collect();
    let post = NigPosterior::from_data(&prior, &x);

    // closed form computed independently of the sampler
    let n = x.len() as f64;
    let xbar = x.iter().sum::<f64>() / n;
    let kappa_n = prior.kappa0 + n;
    let m_n = (prior.kappa0 * prior.m0 + n * xbar) / kappa_n;
    let a_n = prior.a0 + n / 2.0;
    let b_n = prior.b0
        + 0.5 * x.iter().map(|v| (v - xbar).powi(2)).sum::<f64>()
        + prior.kappa0 * n * (xbar - prior.m0).powi(2) / (2.0 * kappa_n);
    // marginal of mu is Student-t with 2 a_n dof and scale^2 b_n / (a_n kappa_n)
    let var_mu = b_n / (a_n * kappa_n) * (2.0 * a_n) / (2.0 * a_n - 2.0);

    let draws = 20_000;
    let mean: f64 = (0..draws).map(|_| post.sample(&mut rng).0).sum::<f64>() / draws as f64;
    let se = (var_mu / draws as f64).sqrt();
    assert!((mean - m_n).abs() < 3.0 * se, "mean {mean} vs {m_n} (se {se})");
    assert!((post.mean_mu() - m_n).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cluster_probabilities_lie_on_the_simplex(
        mu in prop::array::uniform2(-3.0f64..3.0),
        sigma in prop::array::uniform2(0.01f64..3.0),
        t in 0.01f64..0.99,
        z in prop::collection::vec(-20.0f32..20.0, 1..30),
    ) {
        let m = MixtureModel { mu, sigma, theta: [t, 1.0 - t] }.canonicalize();
        let post = latent_scope::mixture::MixturePosterior::from_chains(vec![vec![m; 2]], false, 0).unwrap();
        let p = posterior_cluster_prob(&post, &z).unwrap();
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rhat_near_one_for_iid_chains(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2500).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        prop_assert!(split_rhat(&chains) < 1.05);
    }
}
