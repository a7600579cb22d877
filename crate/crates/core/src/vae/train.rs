use latent_scope_tensor::{Adam, AdamConfig, Tape};

use super::loss::loss_graph;
use super::model::reparameterize;
use super::{Encoding, VaeConfig, VaeParams};
use crate::dataset::{minibatches, stack_images, FrameDataset, ImageView, Selector};
use crate::error::{Error, Result};
use crate::rng::stage_rng;

const ENCODE_CHUNK: usize = 64;

/// Mean of the per-batch losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub divergence: f64,
}

#[derive(Clone, Debug)]
pub struct VaeFit {
    pub params: VaeParams<f32>,
    pub history: Vec<EpochLoss>,
}

/// Trains on the train split of `dataset`.
pub fn fit(dataset: &FrameDataset, config: &VaeConfig) -> Result<VaeFit> {
    fit_images(&dataset.images(Selector::Train), config, |_| {})
}

/// Trains on an explicit image list, calling `on_epoch` after every epoch.
pub fn fit_images(
    images: &[ImageView<'_>],
    config: &VaeConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<VaeFit> {
    config.validate()?;
    if images.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "need at least {} training frames, have {}",
            config.batch_size,
            images.len()
        )));
    }
    let d = config.latent_dim;
    let mut params = VaeParams::<f32>::init(d, config.seed)?;
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), params.params());
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut rng = stage_rng(config.seed, "vae-train", epoch as u64);
        let batches = minibatches(images.len(), config.batch_size, config.seed, epoch)?;
        let (mut total, mut recon, mut div) = (0.0, 0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let views: Vec<ImageView<'_>> = batch.iter().map(|&i| images[i]).collect();
            let x = stack_images::<f32>(&views)?;
            let training = |source| Error::Training { epoch, batch: b, source };

            let mut tape = Tape::new();
            let p = params.params().bind(&mut tape);
            let x = tape.constant(x);
            let g = loss_graph(&mut tape, &p, x, d, config, &mut rng).map_err(|e| match e {
                Error::Tensor(t) => training(t),
                other => other,
            })?;
            let t = f64::from(tape.value(g.total).item()?);
            if !t.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += t;
            recon += f64::from(tape.value(g.reconstruction).item()?);
            div += f64::from(tape.value(g.divergence).item()?);

            let mut grads = tape.backward(g.total).map_err(training)?;
            let grads: Vec<_> = p.iter().map(|&v| grads.take(v)).collect();
            adam.step(params.params_mut(), &grads).map_err(training)?;
        }
        let n = batches.len() as f64;
        let record = EpochLoss {
            epoch,
            total: total / n,
            reconstruction: recon / n,
            divergence: div / n,
        };
        log::info!(
            "vae epoch {epoch}/{}: loss {:.4} (recon {:.4}, divergence {:.6})",
            config.epochs,
            record.total,
            record.reconstruction,
            record.divergence
        );
        on_epoch(&record);
        history.push(record);
    }
    Ok(VaeFit { params, history })
}

/// Encodes the selected frames in frame order. The latent sample for each
/// frame is drawn once from a stream seeded by `seed`.
pub fn encode_dataset(
    params: &VaeParams<f32>,
    dataset: &FrameDataset,
    selector: Selector,
    seed: u64,
) -> Result<Vec<Encoding>> {
    let images = dataset.images(selector);
    let mut rng = stage_rng(seed, "encode", 0);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(ENCODE_CHUNK) {
        let x = stack_images::<f32>(chunk)?;
        let (mean, lv) = params.encode(&x)?;
        let (z, _) = reparameterize(&mean, &lv, &mut rng)?;
        for (i, view) in chunk.iter().enumerate() {
            out.push(Encoding {
                index: view.index,
                mean: mean.row(i).to_vec(),
                log_variance: lv.row(i).to_vec(),
                sample: z.row(i).to_vec(),
            });
        }
    }
    Ok(out)
}
