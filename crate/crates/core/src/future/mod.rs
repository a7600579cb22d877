//! Future prediction over sequences of frame encodings.
//!
//! An LSTM encoder reads the past window; its final state seeds an LSTM
//! decoder that emits, for every future step, a diagonal Gaussian mixture
//! over the next encoding. The encoder's final hidden state is the sequence
//! encoding used for retrieval.

mod eval;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::direct_eval::LatentVector;
use crate::error::{Error, Result};

pub use eval::{evaluate_fp, frame_max, FpReport, FpQuery};
pub use model::{
    decode_future, encode_sequence, encode_state, fp_loss, fp_loss_grad, lstm_step, lstm_unroll_grad, mdn_nll,
    mdn_nll_grad, FpParams, LstmRole, StepMixture, LOG_STD_CLAMP,
};
pub use train::{fit_fp, FpFit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpConfig {
    pub past: usize,
    pub future: usize,
    pub hidden: usize,
    pub components: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Largest index gap allowed between neighbouring frames of a window.
    /// 1 means strictly consecutive frames.
    pub max_index_step: usize,
    pub input: LatentVector,
}

impl Default for FpConfig {
    fn default() -> Self {
        FpConfig {
            past: 5,
            future: 5,
            hidden: 64,
            components: 16,
            learning_rate: 0.005,
            epochs: 1000,
            batch_size: 50,
            seed: 0,
            max_index_step: 1,
            input: LatentVector::Sample,
        }
    }
}

impl FpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.past == 0 || self.future == 0 {
            return Err(Error::invalid("past and future lengths must be at least 1"));
        }
        if self.hidden == 0 || self.components == 0 {
            return Err(Error::invalid("hidden size and mixture components must be at least 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_index_step == 0 {
            return Err(Error::invalid("epochs, batch_size and max_index_step must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Window of `past + future` frames starting at `start` (a position in the
/// encoding list).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceWindow {
    pub start: usize,
    /// Frame indices covered, in order.
    pub frames: Vec<usize>,
}

/// Sliding windows with stride 1 over frames in index order. A window is
/// skipped if any two neighbouring frames are more than `max_index_step`
/// apart.
pub fn build_sequences(
    indices: &[usize],
    past: usize,
    future: usize,
    max_index_step: usize,
) -> Result<Vec<SequenceWindow>> {
    let len = past + future;
    if len == 0 || max_index_step == 0 {
        return Err(Error::invalid("window length and max_index_step must be at least 1"));
    }
    if indices.len() < len {
        return Err(Error::invalid(format!(
            "{} frames cannot hold a window of {len}",
            indices.len()
        )));
    }
    if indices.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("frame indices must be strictly increasing"));
    }
    // `run[i]`: length of the gap-free run ending at position i
    let mut run = vec![1usize; indices.len()];
    for i in 1..indices.len() {
        if indices[i] - indices[i - 1] <= max_index_step {
            run[i] = run[i - 1] + 1;
        }
    }
    let windows: Vec<SequenceWindow> = (0..=indices.len() - len)
        .filter(|&s| run[s + len - 1] >= len)
        .map(|s| SequenceWindow {
            start: s,
            frames: indices[s..s + len].to_vec(),
        })
        .collect();
    if windows.is_empty() {
        return Err(Error::invalid(format!("no run of {len} frames without a gap")));
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        let idx: Vec<usize> = (0..20).collect();
        assert_eq!(build_sequences(&idx, 5, 5, 1).unwrap().len(), 11);
        assert_eq!(build_sequences(&idx[..10], 5, 5, 1).unwrap().len(), 1);
        assert!(build_sequences(&idx[..9], 5, 5, 1).is_err());
    }

    #[test]
    fn gaps_are_never_crossed() {
        let idx: Vec<usize> = (0..8).chain(9..30).collect();
        let w = build_sequences(&idx, 5, 5, 1).unwrap();
        assert!(w.iter().all(|w| !(w.frames.contains(&7) && w.frames.contains(&9))));
        assert_eq!(w.len(), 21 - 10 + 1);
        // a looser step lets windows bridge the gap
        assert_eq!(build_sequences(&idx, 5, 5, 2).unwrap().len(), idx.len() - 9);
    }

    #[test]
    fn strided_indices() {
        let idx: Vec<usize> = (0..12).map(|i| 3 + 5 * i).collect();
        assert!(build_sequences(&idx, 5, 5, 1).is_err());
        let w = build_sequences(&idx, 5, 5, 5).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].frames[0], 13);
    }

    #[test]
    fn every_future_frame_appears_in_min_five_windows() {
        let idx: Vec<usize> = (0..40).collect();
        let w = build_sequences(&idx, 5, 5, 1).unwrap();
        for (pos, &f) in idx.iter().enumerate().skip(5) {
            let as_future = w.iter().filter(|w| w.frames[5..].contains(&f)).count();
            let possible = (pos - 4).min(idx.len() - pos).min(5);
            assert_eq!(as_future, possible, "frame {f}");
        }
    }

    #[test]
    fn defaults_and_validation() {
        let c = FpConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.hidden, c.components), (1000, 50, 64, 16));
        assert_eq!(c.learning_rate, 0.005);
        assert!(c.validate().is_ok());
        assert!(FpConfig { components: 0, ..c }.validate().is_err());
    }
}
