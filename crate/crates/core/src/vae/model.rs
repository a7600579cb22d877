use latent_scope_tensor::{ParamSet, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{CHANNELS, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::rng::stage_rng;

/// Log-variance is clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub const LOGVAR_CLAMP: f64 = 20.0;

const C1: usize = 32;
const C2: usize = 64;
const K: usize = 4;
const BOTTLENECK: usize = C2 * 16 * 16;
const FC1: usize = 512;
const FC2: usize = 256;

// parameter slots, in checkpoint order
const ENC_C1_W: usize = 0;
const ENC_C1_B: usize = 1;
const ENC_C2_W: usize = 2;
const ENC_C2_B: usize = 3;
const ENC_FC1_W: usize = 4;
const ENC_FC1_B: usize = 5;
const ENC_FC2_W: usize = 6;
const ENC_FC2_B: usize = 7;
const ENC_FC3_W: usize = 8;
const ENC_FC3_B: usize = 9;
const DEC_FC1_W: usize = 10;
const DEC_FC1_B: usize = 11;
const DEC_FC2_W: usize = 12;
const DEC_FC2_B: usize = 13;
const DEC_FC3_W: usize = 14;
const DEC_FC3_B: usize = 15;
const DEC_T1_W: usize = 16;
const DEC_T1_B: usize = 17;
const DEC_T2_W: usize = 18;
const DEC_T2_B: usize = 19;

/// Trainable weights of the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams<T> {
    latent_dim: usize,
    params: ParamSet<T>,
}

/// Names and shapes of every tensor for a given latent size.
pub(crate) fn layout(latent_dim: usize) -> Vec<(&'static str, Vec<usize>, usize)> {
    let d = latent_dim;
    // (name, shape, fan_in)
    vec![
        ("encoder.conv1.weight", vec![C1, CHANNELS, K, K], CHANNELS * K * K),
        ("encoder.conv1.bias", vec![C1], CHANNELS * K * K),
        ("encoder.conv2.weight", vec![C2, C1, K, K], C1 * K * K),
        ("encoder.conv2.bias", vec![C2], C1 * K * K),
        ("encoder.fc1.weight", vec![BOTTLENECK, FC1], BOTTLENECK),
        ("encoder.fc1.bias", vec![FC1], BOTTLENECK),
        ("encoder.fc2.weight", vec![FC1, FC2], FC1),
        ("encoder.fc2.bias", vec![FC2], FC1),
        ("encoder.fc3.weight", vec![FC2, 2 * d], FC2),
        ("encoder.fc3.bias", vec![2 * d], FC2),
        ("decoder.fc1.weight", vec![d, FC2], d),
        ("decoder.fc1.bias", vec![FC2], d),
        ("decoder.fc2.weight", vec![FC2, FC1], FC2),
        ("decoder.fc2.bias", vec![FC1], FC2),
        ("decoder.fc3.weight", vec![FC1, BOTTLENECK], FC1),
        ("decoder.fc3.bias", vec![BOTTLENECK], FC1),
        ("decoder.deconv1.weight", vec![C2, C1, K, K], C1 * K * K),
        ("decoder.deconv1.bias", vec![C1], C1 * K * K),
        ("decoder.deconv2.weight", vec![C1, CHANNELS, K, K], CHANNELS * K * K),
        ("decoder.deconv2.bias", vec![CHANNELS], CHANNELS * K * K),
    ]
}

impl<T: Real> VaeParams<T> {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
    pub fn init(latent_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be at least 1"));
        }
        let mut rng = stage_rng(seed, "vae-init", 0);
        let mut params = ParamSet::new();
        for (name, shape, fan_in) in layout(latent_dim) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect();
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(VaeParams { latent_dim, params })
    }

    /// Wraps loaded tensors after checking them against the architecture.
    pub fn from_params(latent_dim: usize, params: ParamSet<T>) -> Result<Self> {
        let expected = layout(latent_dim);
        if params.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(params.iter()) {
            if *name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "tensor `{got_name}` has shape {:?}; architecture expects `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(VaeParams { latent_dim, params })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> VaeParams<U> {
        VaeParams {
            latent_dim: self.latent_dim,
            params: self.params.cast(),
        }
    }

    /// Posterior means and clamped log-variances, each `[batch, d]`.
    pub fn encode(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let x = tape.constant(images.clone());
        let (m, lv) = encode_on(&mut tape, &p, x, self.latent_dim)?;
        Ok((tape.value(m).clone(), tape.value(lv).clone()))
    }

    /// Decoded images `[batch, 3, 64, 64]` in `(0, 1)`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let z = tape.constant(z.clone());
        let out = decode_on(&mut tape, &p, z, self.latent_dim)?;
        Ok(tape.value(out).clone())
    }
}

pub(crate) fn check_images(shape: &[usize]) -> Result<usize> {
    if shape.len() != 4 || shape[1..] != [CHANNELS, FRAME_SIZE, FRAME_SIZE] {
        return Err(Error::invalid(format!(
            "encoder expects [batch, {CHANNELS}, {FRAME_SIZE}, {FRAME_SIZE}] images, got {shape:?}"
        )));
    }
    Ok(shape[0])
}

pub(crate) fn encode_on<T: Real>(tape: &mut Tape<T>, p: &[Var], x: Var, d: usize) -> Result<(Var, Var)> {
    let batch = check_images(tape.shape(x))?;
    let h = tape.conv2d(x, p[ENC_C1_W], Some(p[ENC_C1_B]), 2, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, p[ENC_C2_W], Some(p[ENC_C2_B]), 2, 1)?;
    let h = tape.relu(h)?;
    let h = tape.reshape(h, &[batch, BOTTLENECK])?;
    let h = tape.linear(h, p[ENC_FC1_W], p[ENC_FC1_B])?;
    let h = tape.relu(h)?;
    let h = tape.linear(h, p[ENC_FC2_W], p[ENC_FC2_B])?;
    let h = tape.relu(h)?;
    let out = tape.linear(h, p[ENC_FC3_W], p[ENC_FC3_B])?;
    let mean = tape.slice(out, 1, 0, d)?;
    let lv = tape.slice(out, 1, d, 2 * d)?;
    let c = T::from_f64_lossy(LOGVAR_CLAMP);
    let lv = tape.clamp(lv, -c, c)?;
    Ok((mean, lv))
}

pub(crate) fn decode_on<T: Real>(tape: &mut Tape<T>, p: &[Var], z: Var, d: usize) -> Result<Var> {
    let shape = tape.shape(z);
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::invalid(format!("decoder expects [batch, {d}] latents, got {shape:?}")));
    }
    let batch = shape[0];
    let h = tape.linear(z, p[DEC_FC1_W], p[DEC_FC1_B])?;
    let h = tape.relu(h)?;
    let h = tape.linear(h, p[DEC_FC2_W], p[DEC_FC2_B])?;
    let h = tape.relu(h)?;
    let h = tape.linear(h, p[DEC_FC3_W], p[DEC_FC3_B])?;
    let h = tape.relu(h)?;
    let h = tape.reshape(h, &[batch, C2, 16, 16])?;
    let h = tape.conv_transpose2d(h, p[DEC_T1_W], Some(p[DEC_T1_B]), 2, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv_transpose2d(h, p[DEC_T2_W], Some(p[DEC_T2_B]), 2, 1)?;
    Ok(tape.sigmoid(h)?)
}

/// Standard-normal draws shaped like `shape`.
pub(crate) fn normal_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// `z = mean + exp(log_variance / 2) * eps`, returning `(z, eps)`.
/// Log-variance is clamped to `[-20, 20]` first.
pub fn reparameterize<T: Real, R: Rng + ?Sized>(
    mean: &Tensor<T>,
    log_variance: &Tensor<T>,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if mean.shape() != log_variance.shape() {
        return Err(Error::invalid(format!(
            "reparameterize: mean {:?} vs log-variance {:?}",
            mean.shape(),
            log_variance.shape()
        )));
    }
    let eps: Tensor<T> = normal_tensor(mean.shape(), rng);
    let c = T::from_f64_lossy(LOGVAR_CLAMP);
    let half = T::from_f64_lossy(0.5);
    let z: Vec<T> = mean
        .data()
        .iter()
        .zip(log_variance.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (lv.max(-c).min(c) * half).exp() * e)
        .collect();
    Ok((Tensor::new(mean.shape().to_vec(), z)?, eps))
}

/// Records `mean + exp(lv / 2) * eps` with `eps` drawn from `rng`.
pub(crate) fn reparameterize_on<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    mean: Var,
    lv: Var,
    rng: &mut R,
) -> Result<Var> {
    let eps = normal_tensor(tape.shape(mean), rng);
    let eps = tape.constant(eps);
    let half = tape.scale(lv, T::from_f64_lossy(0.5))?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, eps)?;
    Ok(tape.add(mean, noise)?)
}
