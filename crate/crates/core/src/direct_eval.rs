//! Query-based evaluation: cosine responses between encodings, the
//! average-precision metric shared by every evaluator, and PR-curve output.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vae::Encoding;

/// Which vector of an [`Encoding`] is compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentVector {
    #[default]
    Sample,
    Mean,
}

impl LatentVector {
    pub fn pick(self, e: &Encoding) -> &[f32] {
        match self {
            LatentVector::Sample => &e.sample,
            LatentVector::Mean => &e.mean,
        }
    }
}

/// How per-query responses become one number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the per-query APs.
    #[default]
    MeanOfQueries,
    /// One AP over all responses of all queries.
    Pooled,
}

/// `a . b / (|a| |b|)`.
pub fn cosine<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("cosine: lengths {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y): (f64, f64) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero vector is undefined"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Indices sorted by descending score; ties keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(Ordering::Equal));
    order
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score {i} is not finite")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::invalid("average precision is undefined without positives"));
    }
    Ok(positives)
}

/// `sum_n (R_n - R_{n-1}) P_n` over successive ranks of the descending
/// ranking (stable on ties).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let positives = check_scores(scores, labels)?;
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct score used as a threshold
/// (`score >= threshold` predicts positive), from the highest down.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    let positives = check_scores(scores, labels)? as f64;
    let order = ranking(scores);
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += usize::from(labels[i]);
        let last_of_group = order.get(rank + 1).is_none_or(|&next| scores[next] != scores[i]);
        if last_of_group {
            points.push(PrPoint {
                threshold: scores[i],
                precision: tp as f64 / (rank + 1) as f64,
                recall: tp as f64 / positives,
            });
        }
    }
    Ok(PrCurve {
        points,
        average_precision: average_precision(scores, labels)?,
    })
}

/// Writes `threshold,precision,recall` rows and an `# average_precision=`
/// footer.
pub fn emit_pr_curve(scores: &[f64], labels: &[bool], path: &Path) -> Result<PrCurve> {
    let curve = pr_curve(scores, labels)?;
    write_pr_curve(&curve, path)?;
    Ok(curve)
}

pub fn write_pr_curve(curve: &PrCurve, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "threshold,precision,recall").map_err(io)?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall).map_err(io)?;
    }
    writeln!(w, "# average_precision={}", curve.average_precision).map_err(io)?;
    w.flush().map_err(io)
}

/// Reads the footer AP back from a PR-curve file.
pub fn read_pr_curve_ap(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .find_map(|l| l.strip_prefix("# average_precision="))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::format(path, "missing average_precision footer"))
}

/// Responses of one query frame against every other frame.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query: usize,
    pub targets: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub average_precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectReport {
    pub queries: Vec<QueryResult>,
    /// Mean of per-query APs.
    pub mean_ap: f64,
    /// AP over all responses pooled together.
    pub pooled_ap: f64,
    pub aggregation: Aggregation,
}

impl DirectReport {
    /// The number selected by `aggregation`.
    pub fn headline(&self) -> f64 {
        match self.aggregation {
            Aggregation::MeanOfQueries => self.mean_ap,
            Aggregation::Pooled => self.pooled_ap,
        }
    }

    /// Concatenated responses of all queries, for the pooled PR curve.
    pub fn pooled(&self) -> (Vec<f64>, Vec<bool>) {
        let scores = self.queries.iter().flat_map(|q| q.scores.iter().copied()).collect();
        let labels = self.queries.iter().flat_map(|q| q.labels.iter().copied()).collect();
        (scores, labels)
    }
}

/// Every positive item queries all other items by cosine; queries whose
/// targets contain no positive are skipped.
pub fn evaluate_queries(
    ids: &[usize],
    vectors: &[&[f32]],
    labels: &[bool],
    aggregation: Aggregation,
) -> Result<DirectReport> {
    if vectors.len() != labels.len() || ids.len() != labels.len() {
        return Err(Error::invalid("ids, vectors and labels differ in length"));
    }
    if vectors.len() < 2 {
        return Err(Error::invalid("need at least two frames to evaluate queries"));
    }
    let queries: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if queries.is_empty() {
        return Err(Error::invalid("no tool-labeled frame to use as a query"));
    }
    let results: Vec<Option<QueryResult>> = queries
        .par_iter()
        .map(|&q| -> Result<Option<QueryResult>> {
            let mut targets = Vec::with_capacity(labels.len() - 1);
            let mut scores = Vec::with_capacity(labels.len() - 1);
            let mut target_labels = Vec::with_capacity(labels.len() - 1);
            for j in (0..labels.len()).filter(|&j| j != q) {
                targets.push(ids[j]);
                scores.push(cosine(vectors[q], vectors[j])?);
                target_labels.push(labels[j]);
            }
            if !target_labels.contains(&true) {
                return Ok(None);
            }
            let ap = average_precision(&scores, &target_labels)?;
            Ok(Some(QueryResult {
                query: ids[q],
                targets,
                scores,
                labels: target_labels,
                average_precision: ap,
            }))
        })
        .collect::<Result<_>>()?;
    let queries: Vec<QueryResult> = results.into_iter().flatten().collect();
    if queries.is_empty() {
        return Err(Error::invalid("only one tool-labeled frame; no query has a positive target"));
    }
    let mean_ap = queries.iter().map(|q| q.average_precision).sum::<f64>() / queries.len() as f64;
    let mut report = DirectReport {
        queries,
        mean_ap,
        pooled_ap: 0.0,
        aggregation,
    };
    let (s, l) = report.pooled();
    report.pooled_ap = average_precision(&s, &l)?;
    Ok(report)
}

/// Direct evaluation of frame encodings against their evaluation labels.
pub fn evaluate_direct(
    encodings: &[Encoding],
    labels: &[bool],
    vector: LatentVector,
    aggregation: Aggregation,
) -> Result<DirectReport> {
    let ids: Vec<usize> = encodings.iter().map(|e| e.index).collect();
    let vectors: Vec<&[f32]> = encodings.iter().map(|e| vector.pick(e)).collect();
    evaluate_queries(&ids, &vectors, labels, aggregation)
}

/// `query_index,ap` rows.
pub fn write_query_aps(path: &Path, queries: &[QueryResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["query_index", "ap"])?;
    for q in queries {
        w.write_record([q.query.to_string(), q.average_precision.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
