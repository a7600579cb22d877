//! Model-level gradients against central finite differences (f64).

mod support {
    pub mod grad_suite;
}

use latent_scope::vae::{Objective, VaeConfig};
use support::grad_suite::{self as suite, TOL};

#[test]
fn every_primitive() {
    for (name, err) in suite::primitives() {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn vae_objective_mmd_mode() {
    let cfg = VaeConfig {
        latent_dim: 3,
        ..Default::default()
    };
    let err = suite::vae(&cfg);
    assert!(err < TOL, "{err:e}");
}

#[test]
fn vae_objective_kl_mode() {
    let cfg = VaeConfig {
        latent_dim: 3,
        objective: Objective::Kl,
        ..Default::default()
    };
    let err = suite::vae(&cfg);
    assert!(err < TOL, "{err:e}");
}

#[test]
fn lstm_three_step_unroll() {
    let err = suite::lstm_unroll();
    assert!(err < TOL, "{err:e}");
}

#[test]
fn mixture_density_nll() {
    let err = suite::mdn_nll();
    assert!(err < TOL, "{err:e}");
}

#[test]
fn full_future_model() {
    let err = suite::future_model();
    assert!(err < TOL, "{err:e}");
}
