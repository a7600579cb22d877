use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{logsumexp2, MixturePosterior};
use crate::direct_eval::average_precision;
use crate::error::{Error, Result};

/// Per-sample constants for scoring whole encodings.
struct Scorer {
    /// `log theta_2 - log theta_1`
    log_theta_ratio: f64,
    log_sigma: [f64; 2],
    mu: [f64; 2],
    inv_two_var: [f64; 2],
}

fn scorers(posterior: &MixturePosterior) -> Vec<Scorer> {
    posterior
        .samples()
        .map(|m| Scorer {
            log_theta_ratio: m.theta[1].ln() - m.theta[0].ln(),
            log_sigma: [m.sigma[0].ln(), m.sigma[1].ln()],
            mu: m.mu,
            inv_two_var: [0.5 / (m.sigma[0] * m.sigma[0]), 0.5 / (m.sigma[1] * m.sigma[1])],
        })
        .collect()
}

/// `log p(c=2 | z, sample) - log p(c=1 | z, sample)` for each posterior sample.
fn sample_log_odds(scorers: &[Scorer], z: &[f32]) -> Vec<f64> {
    let d = z.len() as f64;
    scorers
        .iter()
        .map(|s| {
            let mut acc = s.log_theta_ratio - d * (s.log_sigma[1] - s.log_sigma[0]);
            for &x in z {
                let x = f64::from(x);
                acc += (x - s.mu[0]).powi(2) * s.inv_two_var[0] - (x - s.mu[1]).powi(2) * s.inv_two_var[1];
            }
            acc
        })
        .collect()
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_mean_exp(values: impl Iterator<Item = f64>) -> f64 {
    let mut acc = f64::NEG_INFINITY;
    let mut n = 0usize;
    for v in values {
        acc = logsumexp2(acc, v);
        n += 1;
    }
    acc - (n as f64).ln()
}

fn averaged_log_odds(l: &[f64]) -> f64 {
    // log mean sigmoid(l) - log mean sigmoid(-l)
    let upper = log_mean_exp(l.iter().map(|&v| -softplus(-v)));
    let lower = log_mean_exp(l.iter().map(|&v| -softplus(v)));
    upper - lower
}

/// Log-odds of the upper-mean cluster after Monte Carlo averaging the
/// normalized cluster probabilities over posterior samples. A strictly
/// increasing function of [`posterior_cluster_prob`]`[1]` that does not
/// saturate at 0 or 1.
pub fn cluster_log_odds(posterior: &MixturePosterior, z: &[f32]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::invalid("empty encoding"));
    }
    Ok(averaged_log_odds(&sample_log_odds(&scorers(posterior), z)))
}

/// Monte Carlo average over posterior samples of
/// `theta_c prod_j N(z_j | mu_c, sigma_c)` normalized over the two clusters.
pub fn posterior_cluster_prob(posterior: &MixturePosterior, z: &[f32]) -> Result<[f64; 2]> {
    if z.is_empty() {
        return Err(Error::invalid("empty encoding"));
    }
    let l = sample_log_odds(&scorers(posterior), z);
    let upper = l.iter().map(|&v| (-softplus(-v)).exp()).sum::<f64>() / l.len() as f64;
    Ok([1.0 - upper, upper])
}

/// Which cluster is read as "tool present".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// The cluster with the larger mean.
    UpperIsTool,
    LowerIsTool,
}

impl Orientation {
    pub fn apply(self, log_odds: f64) -> f64 {
        match self {
            Orientation::UpperIsTool => log_odds,
            Orientation::LowerIsTool => -log_odds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    /// Frame indices in evaluation order.
    pub indices: Vec<usize>,
    /// Log-odds of the upper cluster per frame.
    pub log_odds: Vec<f64>,
    pub labels: Vec<bool>,
    /// Leading frames used only to pick the orientation.
    pub calibration_len: usize,
    /// Calibration APs for (upper, lower) as tool; `None` if the
    /// calibration frames contain no tool.
    pub calibration_ap: Option<[f64; 2]>,
    pub orientation: Orientation,
    /// Held-out APs for (upper, lower) as tool.
    pub holdout_ap: [f64; 2],
    /// Held-out AP under the calibrated orientation.
    pub average_precision: f64,
}

impl MixtureReport {
    /// Oriented scores of the held-out frames.
    pub fn holdout_scores(&self) -> (Vec<f64>, Vec<bool>) {
        let s = self.log_odds[self.calibration_len..]
            .iter()
            .map(|&l| self.orientation.apply(l))
            .collect();
        (s, self.labels[self.calibration_len..].to_vec())
    }

    /// `index,label,log_odds,prob_upper,calibration` rows.
    pub fn write_scores(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "label", "log_odds", "prob_upper", "calibration"])?;
        for (k, ((&i, &l), &lo)) in self.indices.iter().zip(&self.labels).zip(&self.log_odds).enumerate() {
            let p = (-softplus(-lo)).exp();
            w.write_record([
                i.to_string(),
                u8::from(l).to_string(),
                lo.to_string(),
                p.to_string(),
                u8::from(k < self.calibration_len).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn both_orientations(log_odds: &[f64], labels: &[bool]) -> Result<[f64; 2]> {
    let reversed: Vec<f64> = log_odds.iter().map(|&l| -l).collect();
    Ok([average_precision(log_odds, labels)?, average_precision(&reversed, labels)?])
}

/// Scores every frame by the posterior probability of the upper cluster,
/// picks the orientation on the first `calibration_fraction` of frames and
/// reports AP on the rest.
pub fn evaluate_mixture<V: AsRef<[f32]> + Sync>(
    posterior: &MixturePosterior,
    indices: &[usize],
    vectors: &[V],
    labels: &[bool],
    calibration_fraction: f64,
) -> Result<MixtureReport> {
    if vectors.len() != labels.len() || indices.len() != labels.len() {
        return Err(Error::invalid("indices, vectors and labels differ in length"));
    }
    if !(0.0..1.0).contains(&calibration_fraction) {
        return Err(Error::invalid("calibration fraction must be in [0, 1)"));
    }
    let n = labels.len();
    let calibration_len = ((n as f64 * calibration_fraction).round() as usize).min(n.saturating_sub(1));
    if !labels[calibration_len..].contains(&true) {
        return Err(Error::invalid("no tool-labeled frame outside the calibration subset"));
    }
    let sc = scorers(posterior);
    let log_odds: Vec<f64> = vectors
        .par_iter()
        .map(|v| {
            let z = v.as_ref();
            if z.is_empty() {
                return Err(Error::invalid("empty encoding"));
            }
            Ok(averaged_log_odds(&sample_log_odds(&sc, z)))
        })
        .collect::<Result<_>>()?;

    let calibration_ap = if labels[..calibration_len].contains(&true) {
        Some(both_orientations(&log_odds[..calibration_len], &labels[..calibration_len])?)
    } else {
        log::warn!("calibration frames contain no tool; defaulting to the upper cluster");
        None
    };
    let orientation = match calibration_ap {
        Some([up, down]) if down > up => Orientation::LowerIsTool,
        _ => Orientation::UpperIsTool,
    };
    let holdout_ap = both_orientations(&log_odds[calibration_len..], &labels[calibration_len..])?;
    let average_precision = match orientation {
        Orientation::UpperIsTool => holdout_ap[0],
        Orientation::LowerIsTool => holdout_ap[1],
    };
    Ok(MixtureReport {
        indices: indices.to_vec(),
        log_odds,
        labels: labels.to_vec(),
        calibration_len,
        calibration_ap,
        orientation,
        holdout_ap,
        average_precision,
    })
}

#[cfg(test)]
mod tests {
    use super::super::MixtureModel;
    use super::*;

    fn posterior(models: Vec<MixtureModel>) -> MixturePosterior {
        MixturePosterior::from_chains(vec![models], false, 0).unwrap()
    }

    fn model(mu: [f64; 2], sigma: [f64; 2], theta: [f64; 2]) -> MixtureModel {
        MixtureModel { mu, sigma, theta }
    }

    #[test]
    fn tight_cluster_wins() {
        let p = posterior(vec![model([-1.0, 1.0], [0.1, 0.1], [0.5, 0.5]); 3]);
        let pr = posterior_cluster_prob(&p, &[1.0, 1.0]).unwrap();
        assert!(pr[1] > 0.99);
        assert!(cluster_log_odds(&p, &[1.0, 1.0]).unwrap() > 100.0);
    }

    #[test]
    fn symmetric_midpoint() {
        let p = posterior(vec![model([-1.0, 1.0], [0.5, 0.5], [0.5, 0.5]); 2]);
        let pr = posterior_cluster_prob(&p, &[0.0, 0.0, 0.0]).unwrap();
        assert!((pr[0] - 0.5).abs() < 0.01 && (pr[1] - 0.5).abs() < 0.01);
        assert!(cluster_log_odds(&p, &[0.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn averaged_log_odds_matches_probability() {
        let p = posterior(vec![
            model([-0.5, 0.2], [0.3, 0.4], [0.6, 0.4]),
            model([-0.4, 0.3], [0.2, 0.5], [0.5, 0.5]),
        ]);
        let z = [0.1f32, -0.2, 0.05];
        let pr = posterior_cluster_prob(&p, &z).unwrap();
        let lo = cluster_log_odds(&p, &z).unwrap();
        assert!((lo - (pr[1] / pr[0]).ln()).abs() < 1e-10);
        assert!((pr[0] + pr[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orientation_picks_the_better_direction() {
        let p = posterior(vec![model([-1.0, 1.0], [0.3, 0.3], [0.5, 0.5]); 2]);
        // tools sit in the lower cluster
        let vectors: Vec<Vec<f32>> = (0..20).map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 }]).collect();
        let labels: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let idx: Vec<usize> = (0..20).collect();
        let r = evaluate_mixture(&p, &idx, &vectors, &labels, 0.2).unwrap();
        assert_eq!(r.calibration_len, 4);
        assert_eq!(r.orientation, Orientation::LowerIsTool);
        assert_eq!(r.average_precision, 1.0);
        let (s, l) = r.holdout_scores();
        assert_eq!(average_precision(&s, &l).unwrap(), r.average_precision);
        let rev: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_eq!(average_precision(&rev, &l).unwrap(), r.holdout_ap[0]);
    }
}
