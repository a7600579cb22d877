use latent_scope_tensor::{Real, Tape, Tensor, Var};
use rand::Rng;

use super::model::{decode_on, encode_on, normal_tensor, reparameterize_on};
use super::{Objective, VaeConfig, VaeParams};
use crate::error::{Error, Result};

/// Per-batch objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub reconstruction: f64,
    /// MMD^2 or KL, before weighting.
    pub divergence: f64,
}

/// Sum of squared pixel errors divided by batch size.
pub fn reconstruction_loss<T: Real>(decoded: &Tensor<T>, original: &Tensor<T>) -> Result<f64> {
    if decoded.shape() != original.shape() || decoded.ndim() == 0 {
        return Err(Error::invalid(format!(
            "reconstruction_loss: {:?} vs {:?}",
            decoded.shape(),
            original.shape()
        )));
    }
    let sse: f64 = decoded
        .data()
        .iter()
        .zip(original.data())
        .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum();
    Ok(sse / decoded.shape()[0] as f64)
}

/// Batch mean of `KL(N(mean, exp(lv)) || N(0, I))`.
pub fn kl_divergence_gaussian<T: Real>(mean: &Tensor<T>, log_variance: &Tensor<T>) -> Result<f64> {
    if mean.shape() != log_variance.shape() || mean.ndim() != 2 {
        return Err(Error::invalid(format!(
            "kl_divergence_gaussian: {:?} vs {:?}",
            mean.shape(),
            log_variance.shape()
        )));
    }
    let total: f64 = mean
        .data()
        .iter()
        .zip(log_variance.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.to_f64_lossy(), lv.to_f64_lossy());
            0.5 * (m * m + lv.exp() - lv - 1.0)
        })
        .sum();
    Ok(total / mean.shape()[0] as f64)
}

/// Biased (V-statistic) MMD^2 between two sample sets `[n, d]` and `[m, d]`
/// under `k(a, b) = exp(-|a - b|^2 / (2 gamma))`.
pub fn mmd_vstat<T: Real>(q: &Tensor<T>, p: &Tensor<T>, gamma: f64) -> Result<f64> {
    if q.ndim() != 2 || p.ndim() != 2 || q.shape()[1] != p.shape()[1] {
        return Err(Error::invalid(format!(
            "mmd_vstat: sample sets {:?} and {:?} differ in dimension",
            q.shape(),
            p.shape()
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid("mmd_vstat: bandwidth must be positive"));
    }
    let d = q.shape()[1];
    let kernel_mean = |a: &Tensor<T>, b: &Tensor<T>| {
        let mut s = 0.0;
        for i in 0..a.shape()[0] {
            let ra = &a.data()[i * d..(i + 1) * d];
            for j in 0..b.shape()[0] {
                let rb = &b.data()[j * d..(j + 1) * d];
                let sq: f64 = ra
                    .iter()
                    .zip(rb)
                    .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
                    .sum();
                s += (-sq / (2.0 * gamma)).exp();
            }
        }
        s / (a.shape()[0] * b.shape()[0]) as f64
    };
    Ok(kernel_mean(q, q) + kernel_mean(p, p) - 2.0 * kernel_mean(q, p))
}

pub(crate) fn reconstruction_on<T: Real>(tape: &mut Tape<T>, decoded: Var, original: Var) -> Result<Var> {
    let batch = tape.shape(original)[0];
    let diff = tape.sub(decoded, original)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, T::one() / T::from_usize(batch).unwrap())?)
}

pub(crate) fn kl_on<T: Real>(tape: &mut Tape<T>, mean: Var, lv: Var) -> Result<Var> {
    let batch = tape.shape(mean)[0];
    let m2 = tape.square(mean)?;
    let var = tape.exp(lv)?;
    let a = tape.add(m2, var)?;
    let a = tape.sub(a, lv)?;
    let a = tape.add_scalar(a, -T::one())?;
    let s = tape.sum(a)?;
    Ok(tape.scale(s, T::from_f64_lossy(0.5 / batch as f64))?)
}

fn kernel_mean_on<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, gamma: f64) -> Result<Var> {
    let (na, nb) = (tape.shape(a)[0], tape.shape(b)[0]);
    let a2 = tape.square(a)?;
    let a2 = tape.sum_last(a2)?;
    let a2 = tape.reshape(a2, &[na, 1])?;
    let b2 = tape.square(b)?;
    let b2 = tape.sum_last(b2)?;
    let b2 = tape.reshape(b2, &[1, nb])?;
    let bt = tape.transpose(b)?;
    let ab = tape.matmul(a, bt)?;
    let ab = tape.scale(ab, T::from_f64_lossy(-2.0))?;
    let dist = tape.add(ab, a2)?;
    let dist = tape.add(dist, b2)?;
    let k = tape.scale(dist, T::from_f64_lossy(-1.0 / (2.0 * gamma)))?;
    let k = tape.exp(k)?;
    Ok(tape.mean(k)?)
}

/// Differentiable V-statistic MMD^2.
pub(crate) fn mmd_on<T: Real>(tape: &mut Tape<T>, q: Var, p: Var, gamma: f64) -> Result<Var> {
    let kqq = kernel_mean_on(tape, q, q, gamma)?;
    let kpp = kernel_mean_on(tape, p, p, gamma)?;
    let kqp = kernel_mean_on(tape, q, p, gamma)?;
    let s = tape.add(kqq, kpp)?;
    let cross = tape.scale(kqp, T::from_f64_lossy(2.0))?;
    Ok(tape.sub(s, cross)?)
}

/// Vars for the total loss and its two terms.
pub(crate) struct LossGraph {
    pub total: Var,
    pub reconstruction: Var,
    pub divergence: Var,
}

pub(crate) fn loss_graph<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    p: &[Var],
    images: Var,
    latent_dim: usize,
    config: &VaeConfig,
    rng: &mut R,
) -> Result<LossGraph> {
    let (mean, lv) = encode_on(tape, p, images, latent_dim)?;
    let z = reparameterize_on(tape, mean, lv, rng)?;
    let decoded = decode_on(tape, p, z, latent_dim)?;
    let reconstruction = reconstruction_on(tape, decoded, images)?;
    let (divergence, weight) = match config.objective {
        Objective::Mmd => {
            let prior = normal_tensor::<T, R>(tape.shape(z), rng);
            let prior = tape.constant(prior);
            let gamma = config.bandwidth.gamma(latent_dim);
            (mmd_on(tape, z, prior, gamma)?, config.lambda)
        }
        Objective::Kl => (kl_on(tape, mean, lv)?, 1.0),
    };
    let weighted = tape.scale(divergence, T::from_f64_lossy(weight))?;
    let total = tape.add(reconstruction, weighted)?;
    Ok(LossGraph {
        total,
        reconstruction,
        divergence,
    })
}

/// MMD mode: `recon + lambda * MMD^2`; KL mode: `recon + KL`.
pub fn vae_loss<T: Real, R: Rng + ?Sized>(
    params: &VaeParams<T>,
    images: &Tensor<T>,
    config: &VaeConfig,
    rng: &mut R,
) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let p = params.params().bind_constant(&mut tape);
    let x = tape.constant(images.clone());
    let g = loss_graph(&mut tape, &p, x, params.latent_dim(), config, rng)?;
    let read = |v| tape.value(v).item().map(|x: T| x.to_f64_lossy());
    Ok(LossTerms {
        total: read(g.total)?,
        reconstruction: read(g.reconstruction)?,
        divergence: read(g.divergence)?,
    })
}

/// [`vae_loss`] together with the gradient of the total with respect to
/// every parameter tensor, in parameter order.
pub fn vae_loss_grad<T: Real, R: Rng + ?Sized>(
    params: &VaeParams<T>,
    images: &Tensor<T>,
    config: &VaeConfig,
    rng: &mut R,
) -> Result<(LossTerms, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let p = params.params().bind(&mut tape);
    let x = tape.constant(images.clone());
    let g = loss_graph(&mut tape, &p, x, params.latent_dim(), config, rng)?;
    let read = |v| tape.value(v).item().map(|x: T| x.to_f64_lossy());
    let terms = LossTerms {
        total: read(g.total)?,
        reconstruction: read(g.reconstruction)?,
        divergence: read(g.divergence)?,
    };
    let mut grads = tape.backward(g.total)?;
    Ok((terms, p.iter().map(|&v| grads.take(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reconstruction_examples() {
        let x = Tensor::full([1, 3, 64, 64], 0.4f64);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let y = x.map(|v| v + 0.1);
        let l = reconstruction_loss(&y, &x).unwrap();
        assert!((l - 122.88).abs() < 1e-9, "{l}");
    }

    #[test]
    fn kl_examples() {
        let z = Tensor::<f64>::zeros([4, 3]);
        assert_eq!(kl_divergence_gaussian(&z, &z).unwrap(), 0.0);
        let m = Tensor::<f64>::ones([1, 1]);
        assert!((kl_divergence_gaussian(&m, &Tensor::zeros([1, 1])).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mmd_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Tensor<f64> = normal_tensor(&[16, 5], &mut rng);
        assert!(mmd_vstat(&q, &q, 5.0).unwrap().abs() < 1e-12);
        let mut tape = Tape::new();
        let a = tape.constant(q.clone());
        let b = tape.constant(q);
        let m = mmd_on(&mut tape, a, b, 5.0).unwrap();
        assert!(tape.value(m).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn mmd_graph_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q: Tensor<f64> = normal_tensor(&[12, 4], &mut rng);
        let p: Tensor<f64> = normal_tensor(&[12, 4], &mut rng).map(|v| v + 0.7);
        let direct = mmd_vstat(&q, &p, 4.0).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(q), tape.constant(p));
        let m = mmd_on(&mut tape, a, b, 4.0).unwrap();
        assert!((tape.value(m).item().unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn mmd_dimension_mismatch() {
        let q = Tensor::<f64>::zeros([3, 2]);
        let p = Tensor::<f64>::zeros([3, 4]);
        assert!(mmd_vstat(&q, &p, 1.0).is_err());
    }

    fn tiny_batch() -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Tensor::new(
            vec![2, 3, 64, 64],
            (0..2 * 3 * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn lambda_zero_is_reconstruction_only() {
        let params = VaeParams::<f64>::init(4, 0).unwrap();
        let cfg = VaeConfig {
            latent_dim: 4,
            lambda: 0.0,
            ..Default::default()
        };
        let t = vae_loss(&params, &tiny_batch(), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t.total, t.reconstruction);
    }

    #[test]
    fn terms_recombine_in_both_modes() {
        let params = VaeParams::<f64>::init(4, 0).unwrap();
        let x = tiny_batch();
        let mmd = VaeConfig {
            latent_dim: 4,
            ..Default::default()
        };
        let t = vae_loss(&params, &x, &mmd, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(t.total.is_finite() && t.divergence >= -1e-12);
        assert!((t.total - (t.reconstruction + 5.0 * t.divergence)).abs() < 1e-9);

        let kl = VaeConfig {
            objective: Objective::Kl,
            ..mmd
        };
        let t = vae_loss(&params, &x, &kl, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(t.total.is_finite());
        assert!((t.total - t.reconstruction - t.divergence).abs() < 1e-9);

        // the KL term is the closed form evaluated on the encoder output
        let (m, lv) = params.encode(&x).unwrap();
        assert!((t.divergence - kl_divergence_gaussian(&m, &lv).unwrap()).abs() < 1e-9);
    }
}
