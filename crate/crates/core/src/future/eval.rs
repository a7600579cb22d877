use latent_scope_tensor::Tensor;
use rayon::prelude::*;

use super::model::encode_sequence;
use super::{build_sequences, FpParams};
use crate::artifact::SequenceRecord;
use crate::direct_eval::{average_precision, cosine};
use crate::error::{Error, Result};

/// AP of one query sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FpQuery {
    pub window: usize,
    pub average_precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpReport {
    pub sequences: Vec<SequenceRecord>,
    pub queries: Vec<FpQuery>,
    pub mean_ap: f64,
}

/// Per-frame maximum of window scores. `windows[w]` lists positions covered
/// by window `w`; windows scored `None` are ignored. Returns
/// `(position, max score)` sorted by position.
pub fn frame_max(windows: &[Vec<usize>], scores: &[Option<f64>]) -> Vec<(usize, f64)> {
    let mut best: std::collections::BTreeMap<usize, f64> = Default::default();
    for (frames, score) in windows.iter().zip(scores) {
        let Some(s) = *score else { continue };
        for &f in frames {
            best.entry(f).and_modify(|b| *b = b.max(s)).or_insert(s);
        }
    }
    best.into_iter().collect()
}

/// Encodes every past-length window of the test frames, then for each
/// window whose frames are mostly tool-labeled: score every other window
/// by cosine, give each frame the maximum over the windows containing it,
/// and compute AP against the frame labels. Returns the mean over queries.
pub fn evaluate_fp(
    params: &FpParams<f32>,
    indices: &[usize],
    vectors: &[&[f32]],
    labels: &[bool],
    past: usize,
    max_index_step: usize,
) -> Result<FpReport> {
    if indices.len() != vectors.len() || indices.len() != labels.len() {
        return Err(Error::invalid("indices, vectors and labels differ in length"));
    }
    let windows = build_sequences(indices, past, 0, max_index_step)?;
    let d = params.input_dim();
    let mut data = Vec::with_capacity(windows.len() * past * d);
    for w in &windows {
        for v in &vectors[w.start..w.start + past] {
            if v.len() != d {
                return Err(Error::invalid(format!("encoding has dimension {}, model expects {d}", v.len())));
            }
            data.extend_from_slice(v);
        }
    }
    let encoded = encode_sequence(params, &Tensor::new(vec![windows.len(), past, d], data)?)?;
    let sequences: Vec<SequenceRecord> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| SequenceRecord {
            window: i,
            vector: encoded.row(i).to_vec(),
            frames: w.frames.clone(),
        })
        .collect();
    let positions: Vec<Vec<usize>> = windows.iter().map(|w| (w.start..w.start + past).collect()).collect();
    let query_ids: Vec<usize> = (0..windows.len())
        .filter(|&i| 2 * positions[i].iter().filter(|&&p| labels[p]).count() > past)
        .collect();
    if query_ids.is_empty() {
        return Err(Error::invalid("no sequence is mostly tool-labeled"));
    }
    let queries: Vec<Option<FpQuery>> = query_ids
        .par_iter()
        .map(|&q| -> Result<Option<FpQuery>> {
            let scores: Vec<Option<f64>> = (0..sequences.len())
                .map(|j| {
                    if j == q {
                        Ok(None)
                    } else {
                        cosine(&sequences[q].vector, &sequences[j].vector).map(Some)
                    }
                })
                .collect::<Result<_>>()?;
            let responses = frame_max(&positions, &scores);
            let s: Vec<f64> = responses.iter().map(|r| r.1).collect();
            let l: Vec<bool> = responses.iter().map(|r| labels[r.0]).collect();
            if !l.contains(&true) {
                return Ok(None);
            }
            Ok(Some(FpQuery {
                window: q,
                average_precision: average_precision(&s, &l)?,
            }))
        })
        .collect::<Result<_>>()?;
    let queries: Vec<FpQuery> = queries.into_iter().flatten().collect();
    if queries.is_empty() {
        return Err(Error::invalid("no query sequence has a tool-labeled target frame"));
    }
    let mean_ap = queries.iter().map(|q| q.average_precision).sum::<f64>() / queries.len() as f64;
    Ok(FpReport {
        sequences,
        queries,
        mean_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_max_takes_the_best_covering_window() {
        let windows = vec![vec![0, 1, 2], vec![1, 2, 3], vec![2, 3, 4]];
        let r = frame_max(&windows, &[Some(0.1), Some(0.9), None]);
        assert_eq!(r, vec![(0, 0.1), (1, 0.9), (2, 0.9), (3, 0.9)]);
    }

    #[test]
    fn frame_max_is_idempotent() {
        let windows = vec![vec![0, 1], vec![1, 2], vec![2, 5]];
        let once = frame_max(&windows, &[Some(0.3), Some(-0.2), Some(0.8)]);
        let singles: Vec<Vec<usize>> = once.iter().map(|r| vec![r.0]).collect();
        let twice = frame_max(&singles, &once.iter().map(|r| Some(r.1)).collect::<Vec<_>>());
        assert_eq!(once, twice);
    }

    #[test]
    fn edge_frames_use_fewer_windows() {
        // frame 0 is covered only by the first window
        let windows: Vec<Vec<usize>> = (0..4).map(|s| (s..s + 5).collect()).collect();
        let r = frame_max(&windows, &[Some(0.5), Some(0.7), Some(0.6), Some(0.4)]);
        assert_eq!(r[0], (0, 0.5));
        assert_eq!(r[1], (1, 0.7));
        assert_eq!(r.last(), Some(&(7, 0.4)));
    }
}
