use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;

use super::{ChainConfig, MixtureModel, MixturePosterior, Prior, K};
use crate::error::{Error, Result};
use crate::rng::stage_rng;

#[derive(Clone, Copy, Debug, Default)]
struct Stats {
    n: usize,
    sum: f64,
    sumsq: f64,
}

impl Stats {
    fn add(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sumsq += x * x;
    }

    fn remove(&mut self, x: f64) {
        self.n -= 1;
        self.sum -= x;
        self.sumsq -= x * x;
    }
}

/// Normal-Inverse-Gamma posterior of one component given its members.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NigPosterior {
    pub m: f64,
    pub kappa: f64,
    pub a: f64,
    pub b: f64,
}

impl NigPosterior {
    fn from_stats(prior: &Prior, s: &Stats) -> Self {
        let n = s.n as f64;
        let kappa = prior.kappa0 + n;
        let m = (prior.kappa0 * prior.m0 + s.sum) / kappa;
        let a = prior.a0 + 0.5 * n;
        let b = if s.n == 0 {
            prior.b0
        } else {
            let mean = s.sum / n;
            let centered = (s.sumsq - s.sum * mean).max(0.0);
            prior.b0 + 0.5 * centered + prior.kappa0 * n * (mean - prior.m0).powi(2) / (2.0 * kappa)
        };
        NigPosterior { m, kappa, a, b }
    }

    pub fn from_data(prior: &Prior, values: &[f64]) -> Self {
        let mut s = Stats::default();
        values.iter().for_each(|&x| s.add(x));
        Self::from_stats(prior, &s)
    }

    /// `E[mu]`.
    pub fn mean_mu(&self) -> f64 {
        self.m
    }

    /// `E[sigma^2]`, finite when `a > 1`.
    pub fn mean_variance(&self) -> f64 {
        self.b / (self.a - 1.0)
    }

    /// Draws `(mu, sigma)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let precision = Gamma::new(self.a, 1.0 / self.b).expect("positive shape").sample(rng);
        let var = 1.0 / precision;
        let mu = Normal::new(self.m, (var / self.kappa).sqrt()).expect("finite").sample(rng);
        (mu, var.sqrt())
    }
}

/// Student-t posterior predictive, cached between point moves.
#[derive(Clone, Copy, Debug)]
struct Predictive {
    loc: f64,
    log_norm: f64,
    inv_nu_scale2: f64,
    half_nu_plus_one: f64,
}

struct Collapsed<'a> {
    prior: Prior,
    /// `lgamma(a0 + (n + 1) / 2) - lgamma(a0 + n / 2)` by member count.
    lgamma_step: &'a [f64],
}

impl Collapsed<'_> {
    fn predictive(&self, s: &Stats) -> Predictive {
        let post = NigPosterior::from_stats(&self.prior, s);
        let nu = 2.0 * post.a;
        let scale2 = post.b * (post.kappa + 1.0) / (post.a * post.kappa);
        Predictive {
            loc: post.m,
            log_norm: self.lgamma_step[s.n] - 0.5 * (nu * PI * scale2).ln(),
            inv_nu_scale2: 1.0 / (nu * scale2),
            half_nu_plus_one: 0.5 * (nu + 1.0),
        }
    }
}

impl Predictive {
    fn log_density(&self, x: f64) -> f64 {
        let r = x - self.loc;
        self.log_norm - self.half_nu_plus_one * (r * r * self.inv_nu_scale2).ln_1p()
    }
}

fn draw_model<R: Rng + ?Sized>(prior: &Prior, stats: &[Stats; K], rng: &mut R) -> MixtureModel {
    let mut mu = [0.0; K];
    let mut sigma = [0.0; K];
    for c in 0..K {
        (mu[c], sigma[c]) = NigPosterior::from_stats(prior, &stats[c]).sample(rng);
    }
    let g: [f64; K] = std::array::from_fn(|c| {
        Gamma::new(prior.alpha + stats[c].n as f64, 1.0)
            .expect("positive shape")
            .sample(rng)
    });
    let total: f64 = g.iter().sum();
    MixtureModel {
        mu,
        sigma,
        theta: [g[0] / total, g[1] / total],
    }
}

fn run_chain(values: &[f64], config: &ChainConfig, lgamma_step: &[f64], chain: usize) -> Vec<MixtureModel> {
    let mut rng = stage_rng(config.seed, "mixture-chain", chain as u64);
    let collapsed = Collapsed {
        prior: config.prior,
        lgamma_step,
    };
    let mut assign: Vec<u8> = values.iter().map(|_| rng.random_range(0..K as u8)).collect();
    let mut kept = Vec::with_capacity(config.samples);
    for sweep in 0..config.burn_in + config.samples {
        // exact recount every sweep keeps rounding drift out of the sums
        let mut stats = [Stats::default(); K];
        for (&x, &c) in values.iter().zip(&assign) {
            stats[c as usize].add(x);
        }
        let mut pred: [Predictive; K] = std::array::from_fn(|c| collapsed.predictive(&stats[c]));
        let log_alpha = |n: usize| (n as f64 + config.prior.alpha).ln();
        for (&x, slot) in values.iter().zip(assign.iter_mut()) {
            let old = *slot as usize;
            stats[old].remove(x);
            pred[old] = collapsed.predictive(&stats[old]);
            let l0 = log_alpha(stats[0].n) + pred[0].log_density(x);
            let l1 = log_alpha(stats[1].n) + pred[1].log_density(x);
            let p1 = 1.0 / (1.0 + (l0 - l1).exp());
            let new = usize::from(rng.random::<f64>() < p1);
            stats[new].add(x);
            pred[new] = collapsed.predictive(&stats[new]);
            *slot = new as u8;
        }
        let model = draw_model(&config.prior, &stats, &mut rng);
        if sweep >= config.burn_in {
            kept.push(model.canonicalize());
        }
    }
    kept
}

/// Runs `config.chains` independent collapsed-Gibbs chains over the scalar
/// observations. Chains run in parallel; results are ordered by chain index
/// and independent of the thread count.
pub fn sample_posterior(values: &[f64], config: &ChainConfig) -> Result<MixturePosterior> {
    config.validate()?;
    if values.len() < 2 {
        return Err(Error::invalid("mixture fitting needs at least two observations"));
    }
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("observation {i} is not finite")));
    }
    let a0 = config.prior.a0;
    let lgamma_step: Vec<f64> = (0..=values.len())
        .map(|n| libm::lgamma(a0 + (n as f64 + 1.0) / 2.0) - libm::lgamma(a0 + n as f64 / 2.0))
        .collect();
    let chains: Vec<Vec<MixtureModel>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(values, config, &lgamma_step, c))
        .collect();

    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let degenerate = var <= 1e-12 * mean.abs().max(1.0).powi(2);
    if degenerate {
        log::warn!("mixture observations have no spread; posterior is prior-dominated");
    }
    MixturePosterior::from_chains(chains, degenerate, values.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn predictive_matches_direct_student_t() {
        let prior = Prior::default();
        let s = Stats {
            n: 3,
            sum: 0.6,
            sumsq: 0.5,
        };
        let table: Vec<f64> = (0..5)
            .map(|n| libm::lgamma(prior.a0 + (n as f64 + 1.0) / 2.0) - libm::lgamma(prior.a0 + n as f64 / 2.0))
            .collect();
        let p = Collapsed {
            prior,
            lgamma_step: &table,
        }
        .predictive(&s);
        let post = NigPosterior::from_stats(&prior, &s);
        let nu = 2.0 * post.a;
        let scale = (post.b * (post.kappa + 1.0) / (post.a * post.kappa)).sqrt();
        let x = 0.9;
        let t = (x - post.m) / scale;
        let direct = libm::lgamma((nu + 1.0) / 2.0)
            - libm::lgamma(nu / 2.0)
            - 0.5 * (nu * PI).ln()
            - scale.ln()
            - (nu + 1.0) / 2.0 * (1.0 + t * t / nu).ln();
        assert!((p.log_density(x) - direct).abs() < 1e-12);
    }

    #[test]
    fn nig_update_matches_textbook_form() {
        let prior = Prior {
            m0: 0.5,
            kappa0: 2.0,
            a0: 3.0,
            b0: 1.0,
            alpha: 1.0,
        };
        let x = [1.0, 2.0, 4.0];
        let p = NigPosterior::from_data(&prior, &x);
        let xbar = 7.0 / 3.0;
        let ss: f64 = x.iter().map(|v| (v - xbar).powi(2)).sum();
        assert!((p.kappa - 5.0).abs() < 1e-15);
        assert!((p.m - (2.0 * 0.5 + 7.0) / 5.0).abs() < 1e-15);
        assert!((p.a - 4.5).abs() < 1e-15);
        let b = 1.0 + 0.5 * ss + 2.0 * 3.0 * (xbar - 0.5f64).powi(2) / (2.0 * 5.0);
        assert!((p.b - b).abs() < 1e-12);
    }

    #[test]
    fn draws_are_positive_and_seeded() {
        let p = NigPosterior::from_data(&Prior::default(), &[0.0; 10]);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = p.sample(&mut r1);
            assert!(a.1 > 0.0);
            assert_eq!(a, p.sample(&mut r2));
        }
    }
}
