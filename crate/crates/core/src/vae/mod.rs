//! Convolutional MMD-VAE over 64x64 RGB frames.
//!
//! Encoder: two stride-2 4x4 convolutions (3->32->64 channels) followed by
//! three fully connected layers (16384->512->256->2d) emitting the posterior
//! mean and log-variance. The decoder mirrors it with three fully connected
//! layers (d->256->512->16384) and two stride-2 transposed convolutions
//! (64->32->3) ending in a sigmoid.

mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{kl_divergence_gaussian, mmd_vstat, reconstruction_loss, vae_loss, vae_loss_grad, LossTerms};
pub use model::{reparameterize, VaeParams, LOGVAR_CLAMP};
pub use train::{encode_dataset, fit, fit_images, EpochLoss, VaeFit};

/// Divergence between the aggregate posterior and the N(0, I) prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// reconstruction + lambda * MMD^2
    Mmd,
    /// reconstruction + KL (classic ELBO; lambda unused)
    Kl,
}

/// RBF bandwidth gamma in `k(a, b) = exp(-|a - b|^2 / (2 gamma))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// gamma = latent dimension
    LatentDim,
    Fixed(f64),
}

impl Bandwidth {
    pub fn gamma(self, latent_dim: usize) -> f64 {
        match self {
            Bandwidth::LatentDim => latent_dim as f64,
            Bandwidth::Fixed(g) => g,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub objective: Objective,
    pub bandwidth: Bandwidth,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 20,
            lambda: 5.0,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 80,
            objective: Objective::Mmd,
            bandwidth: Bandwidth::LatentDim,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if let Bandwidth::Fixed(g) = self.bandwidth {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::invalid("fixed bandwidth must be positive"));
            }
        }
        Ok(())
    }
}

/// Latent record for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub index: usize,
    pub mean: Vec<f32>,
    pub log_variance: Vec<f32>,
    /// `mean + exp(log_variance / 2) * noise`
    pub sample: Vec<f32>,
}

impl Encoding {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// The standard-normal draw that produced `sample`.
    pub fn noise(&self) -> Vec<f32> {
        self.mean
            .iter()
            .zip(&self.log_variance)
            .zip(&self.sample)
            .map(|((m, lv), s)| (s - m) / (lv / 2.0).exp())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_recipe() {
        let c = VaeConfig::default();
        assert_eq!((c.latent_dim, c.batch_size, c.epochs), (20, 32, 80));
        assert_eq!((c.lambda, c.learning_rate), (5.0, 1e-3));
        assert_eq!(c.objective, Objective::Mmd);
        assert_eq!(c.bandwidth.gamma(c.latent_dim), 20.0);
    }

    #[test]
    fn validation() {
        let ok = VaeConfig::default();
        assert!(ok.validate().is_ok());
        assert!(VaeConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(VaeConfig { latent_dim: 0, ..ok.clone() }.validate().is_err());
        assert!(VaeConfig { lambda: -1.0, ..ok.clone() }.validate().is_err());
        assert!(VaeConfig { bandwidth: Bandwidth::Fixed(0.0), ..ok }.validate().is_err());
    }

    #[test]
    fn bandwidth_json_forms() {
        let fixed: Bandwidth = serde_json::from_str(r#"{"fixed": 2.5}"#).unwrap();
        assert_eq!(fixed, Bandwidth::Fixed(2.5));
        let dim: Bandwidth = serde_json::from_str(r#""latent_dim""#).unwrap();
        assert_eq!(dim, Bandwidth::LatentDim);
    }
}
