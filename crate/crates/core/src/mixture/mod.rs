//! Two-component scalar Gaussian mixture over latent coordinates.
//!
//! Every coordinate of every encoding is treated as an independent draw from
//! `theta_1 N(mu_1, sigma_1) + theta_2 N(mu_2, sigma_2)`. The posterior over
//! `(mu, sigma, theta)` is sampled by collapsed Gibbs under a
//! Normal-Inverse-Gamma prior on each component and a symmetric Dirichlet on
//! the weights.

mod eval;
mod sampler;

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eval::{cluster_log_odds, evaluate_mixture, posterior_cluster_prob, MixtureReport, Orientation};
pub use sampler::{sample_posterior, NigPosterior};

pub const K: usize = 2;
/// R-hat above this flags a run as not converged.
pub const RHAT_LIMIT: f64 = 1.1;

/// One draw of the mixture parameters. Components are kept with ascending
/// means once canonicalized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub mu: [f64; K],
    pub sigma: [f64; K],
    pub theta: [f64; K],
}

impl MixtureModel {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("component std must be positive, got {:?}", self.sigma)));
        }
        if self.theta.iter().any(|&t| !(0.0..=1.0).contains(&t)) || (self.theta.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("weights {:?} are not on the simplex", self.theta)));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("component means must be finite"));
        }
        Ok(())
    }

    /// Swaps the components if needed so that `mu[0] <= mu[1]`.
    pub fn canonicalize(mut self) -> Self {
        if self.mu[0] > self.mu[1] {
            self.mu.swap(0, 1);
            self.sigma.swap(0, 1);
            self.theta.swap(0, 1);
        }
        self
    }

    /// `log theta_c + log N(x | mu_c, sigma_c)`.
    pub fn log_joint(&self, c: usize, x: f64) -> f64 {
        let s = self.sigma[c];
        let r = (x - self.mu[c]) / s;
        self.theta[c].ln() - s.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * r * r
    }
}

pub(crate) fn logsumexp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `sum_x log sum_c theta_c N(x | mu_c, sigma_c)` over scalar observations.
pub fn mixture_log_likelihood(model: &MixtureModel, values: &[f64]) -> Result<f64> {
    model.validate()?;
    Ok(values.iter().map(|&x| logsumexp2(model.log_joint(0, x), model.log_joint(1, x))).sum())
}

/// Flattens vectors into the scalar observations the mixture models.
pub fn flatten<V: AsRef<[f32]>>(vectors: &[V]) -> Vec<f64> {
    vectors
        .iter()
        .flat_map(|v| v.as_ref().iter().map(|&x| f64::from(x)))
        .collect()
}

/// Conjugate prior hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prior {
    pub m0: f64,
    pub kappa0: f64,
    pub a0: f64,
    pub b0: f64,
    /// Symmetric Dirichlet concentration.
    pub alpha: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Prior {
            m0: 0.0,
            kappa0: 0.01,
            a0: 2.0,
            b0: 0.1,
            alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub chains: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub seed: u64,
    pub prior: Prior,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            chains: 4,
            burn_in: 2500,
            samples: 2500,
            seed: 0,
            prior: Prior::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.burn_in == 0 || self.samples == 0 {
            return Err(Error::invalid("chains, burn_in and samples must all be at least 1"));
        }
        let p = &self.prior;
        if !(p.kappa0 > 0.0 && p.a0 > 0.0 && p.b0 > 0.0 && p.alpha > 0.0 && p.m0.is_finite()) {
            return Err(Error::invalid("prior needs kappa0, a0, b0, alpha > 0 and finite m0"));
        }
        Ok(())
    }
}

/// Potential scale reduction for each scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRhat {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl ParamRhat {
    pub fn values(&self) -> [f64; 6] {
        [self.mu1, self.mu2, self.sigma1, self.sigma2, self.theta1, self.theta2]
    }

    /// Largest value; NaN counts as infinite.
    pub fn max(&self) -> f64 {
        self.values()
            .into_iter()
            .map(|v| if v.is_nan() { f64::INFINITY } else { v })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn param_columns(m: &MixtureModel) -> [f64; 6] {
    [m.mu[0], m.mu[1], m.sigma[0], m.sigma[1], m.theta[0], m.theta[1]]
}

/// Kept samples of every chain plus convergence diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePosterior {
    pub chains: Vec<Vec<MixtureModel>>,
    pub rhat: ParamRhat,
    pub mean: MixtureModel,
    /// Observations had (near) zero spread.
    pub degenerate: bool,
    pub observations: usize,
}

impl MixturePosterior {
    /// Builds the summary from canonicalized chains.
    pub fn from_chains(chains: Vec<Vec<MixtureModel>>, degenerate: bool, observations: usize) -> Result<Self> {
        let total: usize = chains.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::invalid("posterior has no samples"));
        }
        let mut acc = [0.0; 6];
        for m in chains.iter().flatten() {
            for (a, v) in acc.iter_mut().zip(param_columns(m)) {
                *a += v;
            }
        }
        let a = acc.map(|v| v / total as f64);
        let rhat = rhat(&chains);
        Ok(MixturePosterior {
            chains,
            rhat,
            mean: MixtureModel {
                mu: [a[0], a[1]],
                sigma: [a[2], a[3]],
                theta: [a[4], a[5]],
            },
            degenerate,
            observations,
        })
    }

    pub fn samples(&self) -> impl Iterator<Item = &MixtureModel> {
        self.chains.iter().flatten()
    }

    pub fn sample_count(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    /// Every R-hat at or below [`RHAT_LIMIT`] and data not degenerate.
    pub fn converged(&self) -> bool {
        self.rhat.max() <= RHAT_LIMIT && !self.degenerate
    }

    /// `chain,iter,mu1,mu2,sigma1,sigma2,theta1,theta2` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "chain,iter,mu1,mu2,sigma1,sigma2,theta1,theta2").map_err(io)?;
        for (c, chain) in self.chains.iter().enumerate() {
            for (i, m) in chain.iter().enumerate() {
                let [a, b, s1, s2, t1, t2] = param_columns(m);
                writeln!(w, "{c},{i},{a},{b},{s1},{s2},{t1},{t2}").map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads back a posterior CSV written by [`write_csv`](Self::write_csv).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut chains: Vec<Vec<MixtureModel>> = Vec::new();
        for row in r.records() {
            let row = row?;
            let f = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad field {i} in row {:?}", row.position())))
            };
            let chain = f(0)? as usize;
            if chain > chains.len() {
                return Err(Error::format(path, "chains are not contiguous"));
            }
            if chain == chains.len() {
                chains.push(Vec::new());
            }
            chains[chain].push(MixtureModel {
                mu: [f(2)?, f(3)?],
                sigma: [f(4)?, f(5)?],
                theta: [f(6)?, f(7)?],
            });
        }
        Self::from_chains(chains, false, 0)
    }

    pub fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            chains: self.chains.len(),
            samples_per_chain: self.chains.first().map_or(0, Vec::len),
            observations: self.observations,
            rhat: self.rhat,
            max_rhat: self.rhat.max(),
            rhat_limit: RHAT_LIMIT,
            converged: self.converged(),
            degenerate: self.degenerate,
            posterior_mean: self.mean,
        }
    }
}

/// JSON summary written next to the posterior samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub chains: usize,
    pub samples_per_chain: usize,
    pub observations: usize,
    pub rhat: ParamRhat,
    pub max_rhat: f64,
    pub rhat_limit: f64,
    pub converged: bool,
    pub degenerate: bool,
    pub posterior_mean: MixtureModel,
}

/// Split-chain R-hat of one scalar trace per chain. Every chain is cut in
/// half so a single chain can still be diagnosed. Zero spread everywhere
/// gives 1.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .filter(|h| h.len() >= 2)
        .collect();
    let Some(n) = halves.iter().map(|h| h.len()).min() else {
        return f64::NAN;
    };
    if halves.len() < 2 {
        return f64::NAN;
    }
    let n = n as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect();
    let grand = means.iter().sum::<f64>() / m;
    let between = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let within = halves
        .iter()
        .zip(&means)
        .map(|(h, mean)| h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (h.len() as f64 - 1.0))
        .sum::<f64>()
        / m;
    if within == 0.0 {
        return if between == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    (var_plus / within).sqrt()
}

/// Split R-hat for every mixture parameter.
pub fn rhat(chains: &[Vec<MixtureModel>]) -> ParamRhat {
    let column = |k: usize| -> f64 {
        let traces: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.iter().map(|m| param_columns(m)[k]).collect())
            .collect();
        split_rhat(&traces)
    };
    ParamRhat {
        mu1: column(0),
        mu2: column(1),
        sigma1: column(2),
        sigma2: column(3),
        theta1: column(4),
        theta2: column(5),
    }
}
