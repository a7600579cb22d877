use latent_scope_tensor::{Adam, AdamConfig, Tape, Tensor};

use super::model::loss_on;
use super::{build_sequences, FpConfig, FpParams};
use crate::dataset::minibatches;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Debug)]
pub struct FpFit {
    pub params: FpParams<f32>,
    /// Mean training NLL per epoch.
    pub history: Vec<f64>,
    pub windows: usize,
}

/// Gathers windows into `[B, len, d]` past and future tensors.
fn gather(vectors: &[&[f32]], starts: &[usize], past: usize, future: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let d = vectors[0].len();
    let mut p = Vec::with_capacity(starts.len() * past * d);
    let mut f = Vec::with_capacity(starts.len() * future * d);
    for &s in starts {
        for v in &vectors[s..s + past] {
            p.extend_from_slice(v);
        }
        for v in &vectors[s + past..s + past + future] {
            f.extend_from_slice(v);
        }
    }
    Ok((
        Tensor::new(vec![starts.len(), past, d], p)?,
        Tensor::new(vec![starts.len(), future, d], f)?,
    ))
}

/// Trains on sliding windows of `vectors` (one per frame, ordered by
/// `indices`), calling `on_epoch(epoch, mean_nll)` after every epoch.
pub fn fit_fp(
    indices: &[usize],
    vectors: &[&[f32]],
    config: &FpConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<FpFit> {
    config.validate()?;
    if indices.len() != vectors.len() {
        return Err(Error::invalid("indices and vectors differ in length"));
    }
    let d = vectors.first().map_or(0, |v| v.len());
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("encodings must share a nonzero dimension"));
    }
    let windows = build_sequences(indices, config.past, config.future, config.max_index_step)?;
    if windows.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "{} training sequences, fewer than one batch of {}",
            windows.len(),
            config.batch_size
        )));
    }
    let mut params = FpParams::<f32>::init(d, config.hidden, config.components, config.seed)?;
    let dims = params.dims();
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), params.params());
    let batch_seed = derive_seed(config.seed, "fp-batches", 0);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let batches = minibatches(windows.len(), config.batch_size, batch_seed, epoch)?;
        let mut sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let starts: Vec<usize> = batch.iter().map(|&w| windows[w].start).collect();
            let (past, future) = gather(vectors, &starts, config.past, config.future)?;
            let training = |source| Error::Training { epoch, batch: b, source };
            let mut tape = Tape::new();
            let p = params.params().bind(&mut tape);
            let (past, future) = (tape.constant(past), tape.constant(future));
            let loss = loss_on(&mut tape, &p, past, future, dims).map_err(|e| match e {
                Error::Tensor(t) => training(t),
                other => other,
            })?;
            let value = f64::from(tape.value(loss).item()?);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sum += value;
            let mut g = tape.backward(loss).map_err(training)?;
            let grads: Vec<_> = p.iter().map(|&v| g.take(v)).collect();
            adam.step(params.params_mut(), &grads).map_err(training)?;
        }
        let mean = sum / batches.len() as f64;
        if epoch == 1 || epoch % 50 == 0 || epoch == config.epochs {
            log::info!("fp epoch {epoch}/{}: nll {mean:.4}", config.epochs);
        }
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(FpFit {
        params,
        history,
        windows: windows.len(),
    })
}
