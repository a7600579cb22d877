use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use latent_scope::artifact::{
    read_checkpoint_of_kind, read_encodings, write_checkpoint, write_encodings, write_sequence_encodings, Checkpoint,
};
use latent_scope::dataset::{
    generate_synthetic, load_frames, read_labels, write_frames, write_labels, FrameDataset, Selector, Split,
};
use latent_scope::direct_eval::{emit_pr_curve, evaluate_direct, write_query_aps, LatentVector};
use latent_scope::future::{evaluate_fp, fit_fp, FpParams};
use latent_scope::mixture::{evaluate_mixture, flatten, sample_posterior, Diagnostics, MixturePosterior};
use latent_scope::rng::derive_seed;
use latent_scope::vae::{encode_dataset, fit, Encoding, VaeParams};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, RunConfig, StageHashes};
use crate::error::{CliError, CliResult};
use crate::manifest::{file_digest, unix_now, ArtifactRecord, RunManifest, StageRecord};
use crate::report::ReportTable;

pub const DATA_DIR: &str = "data";
pub const FRAMES_DIR: &str = "data/frames";
pub const LABELS_FILE: &str = "data/labels.csv";
pub const SPLIT_FILE: &str = "data/split.csv";
pub const DATASET_FILE: &str = "data/dataset.json";
pub const VAE_CHECKPOINT: &str = "vae.ckpt";
pub const VAE_HISTORY: &str = "vae_history.csv";
pub const ENCODINGS_TRAIN: &str = "encodings_train.bin";
pub const ENCODINGS_TEST: &str = "encodings_test.bin";
pub const DIRECT_PR: &str = "direct_pr.csv";
pub const DIRECT_QUERIES: &str = "direct_queries.csv";
pub const DIRECT_METRICS: &str = "direct_metrics.json";
pub const MIXTURE_POSTERIOR: &str = "mixture_posterior.csv";
pub const MIXTURE_DIAGNOSTICS: &str = "mixture_diagnostics.json";
pub const MIXTURE_SCORES: &str = "mixture_scores.csv";
pub const MIXTURE_METRICS: &str = "mixture_metrics.json";
pub const FP_CHECKPOINT: &str = "fp.ckpt";
pub const FP_HISTORY: &str = "fp_history.csv";
pub const FP_SEQUENCES: &str = "sequences_test.bin";
pub const FP_QUERIES: &str = "fp_queries.csv";
pub const FP_METRICS: &str = "fp_metrics.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

/// Result of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Artifacts were written but a convergence diagnostic failed.
    Flagged,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Flagged => 2,
        }
    }

    fn and(self, other: Status) -> Status {
        if self == Status::Flagged || other == Status::Flagged {
            Status::Flagged
        } else {
            Status::Ok
        }
    }
}

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub hashes: StageHashes,
    pub force: bool,
}

impl Context {
    /// Resolves seeds and hashes. `out` overrides the config's output directory.
    pub fn new(config: RunConfig, out: Option<PathBuf>, force: bool) -> CliResult<Self> {
        let config = config.resolve()?;
        let out = out
            .or_else(|| config.out.clone())
            .ok_or_else(|| CliError::Config("no output directory; pass --out or set `out`".into()))?;
        let hashes = config.hashes();
        Ok(Context {
            config,
            out,
            hashes,
            force,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Path of an upstream artifact, which must exist.
    fn input(&self, rel: &str, producer: &'static str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact { path: p, producer })
        }
    }

    fn frames_dir(&self) -> PathBuf {
        match &self.config.dataset {
            DatasetSource::Synthetic(_) => self.path(FRAMES_DIR),
            DatasetSource::Directory { path, .. } => path.clone(),
        }
    }

    fn labels_path(&self) -> CliResult<PathBuf> {
        match &self.config.dataset {
            DatasetSource::Synthetic(_) => self.input(LABELS_FILE, "synth"),
            DatasetSource::Directory { labels: Some(l), .. } => Ok(l.clone()),
            DatasetSource::Directory { labels: None, .. } => Err(CliError::Config(
                "evaluation needs labels; set dataset.labels to a filename,label CSV".into(),
            )),
        }
    }
}

fn check_hash(path: &Path, found: Option<&str>, expected: &str, producer: &'static str) -> CliResult<()> {
    match found {
        Some(h) if h == expected => Ok(()),
        other => Err(CliError::HashMismatch {
            path: path.to_path_buf(),
            found: other.unwrap_or("none").to_string(),
            expected: expected.to_string(),
            producer,
        }),
    }
}

/// Tracks one command's manifest entry.
struct StageRun<'a> {
    ctx: &'a Context,
    name: &'static str,
    hash: String,
    started: u64,
    artifacts: Vec<ArtifactRecord>,
    metrics: BTreeMap<String, f64>,
}

impl<'a> StageRun<'a> {
    fn start(ctx: &'a Context, name: &'static str, hash: &str) -> Self {
        log::info!("{name}: stage hash {}", &hash[..12]);
        StageRun {
            ctx,
            name,
            hash: hash.to_string(),
            started: unix_now(),
            artifacts: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    fn artifact(&mut self, rel: &str) -> CliResult<()> {
        self.artifacts.push(ArtifactRecord {
            path: rel.to_string(),
            sha256: file_digest(&self.ctx.path(rel))?,
            config_hash: self.hash.clone(),
        });
        Ok(())
    }

    fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    fn finish(self, flagged: bool, headline: impl FnOnce(&mut RunManifest)) -> CliResult<Status> {
        let mut m = RunManifest::load_or_default(&self.ctx.out)?;
        m.config_hash = self.ctx.hashes.full.clone();
        m.record(
            self.name,
            StageRecord {
                config_hash: self.hash,
                started: self.started,
                finished: unix_now(),
                artifacts: self.artifacts,
                metrics: self.metrics,
                flagged,
            },
        );
        headline(&mut m);
        m.save(&self.ctx.out)?;
        Ok(if flagged { Status::Flagged } else { Status::Ok })
    }
}

/// Stage hash recorded in the manifest for artifacts without an embedded one.
fn manifest_hash(ctx: &Context, stage: &str) -> CliResult<Option<String>> {
    let m = RunManifest::load_or_default(&ctx.out)?;
    Ok(m.stages.get(stage).map(|s| s.config_hash.clone()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetInfo {
    config_hash: String,
    frames: usize,
    train_frames: usize,
    test_frames: usize,
    skipped: usize,
}

fn write_split(dataset: &FrameDataset, path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(latent_scope::Error::from)?;
    w.write_record(["index", "filename", "split"]).map_err(latent_scope::Error::from)?;
    for (f, s) in dataset.frames().iter().zip(dataset.splits()) {
        w.write_record([f.index.to_string().as_str(), f.filename.as_str(), s.as_str()])
            .map_err(latent_scope::Error::from)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `(index, filename, split)` rows of the split file.
fn read_split(path: &Path) -> CliResult<Vec<(usize, String, Split)>> {
    let mut r = csv::Reader::from_path(path).map_err(latent_scope::Error::from)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(latent_scope::Error::from)?;
        let bad = || CliError::Other(format!("{}: malformed row {:?}", path.display(), rec));
        let index = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let name = rec.get(1).ok_or_else(bad)?.to_string();
        let split = match rec.get(2) {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            _ => return Err(bad()),
        };
        rows.push((index, name, split));
    }
    Ok(rows)
}

/// Renders synthetic frames, or indexes a frame directory, and fixes the
/// train/test split.
pub fn synth(ctx: &Context) -> CliResult<Status> {
    if ctx.out.exists() {
        let non_empty = fs::read_dir(&ctx.out).map_err(|e| CliError::io(&ctx.out, e))?.next().is_some();
        if non_empty && !ctx.force {
            return Err(CliError::NotEmpty(ctx.out.clone()));
        }
        // a fresh dataset invalidates every recorded stage
        let data = ctx.path(DATA_DIR);
        if data.exists() {
            fs::remove_dir_all(&data).map_err(|e| CliError::io(&data, e))?;
        }
        let manifest = ctx.path(crate::manifest::MANIFEST_FILE);
        if manifest.exists() {
            fs::remove_file(&manifest).map_err(|e| CliError::io(&manifest, e))?;
        }
    }
    fs::create_dir_all(ctx.path(DATA_DIR)).map_err(|e| CliError::io(ctx.path(DATA_DIR), e))?;
    let mut run = StageRun::start(ctx, "synth", &ctx.hashes.data);
    let c = &ctx.config;
    let dataset = match &c.dataset {
        DatasetSource::Synthetic(s) => {
            let d = generate_synthetic(s)?.split(c.test_fraction, ctx.config.split_seed())?;
            write_frames(&d, &ctx.path(FRAMES_DIR))?;
            write_labels(&d, &ctx.path(LABELS_FILE))?;
            run.artifact(FRAMES_DIR)?;
            run.artifact(LABELS_FILE)?;
            d
        }
        DatasetSource::Directory { path, .. } => load_frames(path, None)?.split(c.test_fraction, ctx.config.split_seed())?,
    };
    write_split(&dataset, &ctx.path(SPLIT_FILE))?;
    let info = DatasetInfo {
        config_hash: ctx.hashes.data.clone(),
        frames: dataset.len(),
        train_frames: dataset.count(Selector::Train),
        test_frames: dataset.count(Selector::Test),
        skipped: dataset.skipped,
    };
    write_json(&ctx.path(DATASET_FILE), &info)?;
    run.artifact(SPLIT_FILE)?;
    run.artifact(DATASET_FILE)?;
    run.metric("frames", info.frames as f64);
    run.metric("test_frames", info.test_frames as f64);
    log::info!("synth: {} frames ({} test)", info.frames, info.test_frames);
    run.finish(false, |_| {})
}

/// Frames with their split and no labels.
fn load_dataset(ctx: &Context) -> CliResult<FrameDataset> {
    let info_path = ctx.input(DATASET_FILE, "synth")?;
    let info: DatasetInfo = read_json(&info_path)?;
    check_hash(&info_path, Some(&info.config_hash), &ctx.hashes.data, "synth")?;
    let split = read_split(&ctx.input(SPLIT_FILE, "synth")?)?;
    let dataset = load_frames(&ctx.frames_dir(), None)?;
    let matches = dataset.len() == split.len()
        && dataset
            .frames()
            .iter()
            .zip(&split)
            .all(|(f, (i, name, _))| f.index == *i && &f.filename == name);
    if !matches {
        return Err(CliError::Other(format!(
            "frames in {} no longer match {SPLIT_FILE}; rerun `latent-scope synth --force`",
            ctx.frames_dir().display()
        )));
    }
    Ok(dataset.with_splits(split.into_iter().map(|r| r.2).collect())?)
}

/// Evaluation labels for the given frame indices.
fn labels_for(ctx: &Context, indices: &[usize]) -> CliResult<Vec<bool>> {
    let by_name = read_labels(&ctx.labels_path()?)?;
    let names: HashMap<usize, String> = read_split(&ctx.input(SPLIT_FILE, "synth")?)?
        .into_iter()
        .map(|(i, n, _)| (i, n))
        .collect();
    indices
        .iter()
        .map(|i| {
            let name = names
                .get(i)
                .ok_or_else(|| CliError::Other(format!("frame {i} is not in {SPLIT_FILE}")))?;
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| CliError::Other(format!("no label for evaluated frame `{name}`")))
        })
        .collect()
}

pub fn train_vae(ctx: &Context) -> CliResult<Status> {
    let dataset = load_dataset(ctx)?;
    let mut run = StageRun::start(ctx, "train-vae", &ctx.hashes.vae);
    let fitted = fit(&dataset, &ctx.config.vae)?;
    write_checkpoint(
        &ctx.path(VAE_CHECKPOINT),
        &Checkpoint {
            kind: "vae".into(),
            config: serde_json::to_value(&ctx.config.vae).map_err(|e| CliError::Other(e.to_string()))?,
            config_hash: Some(ctx.hashes.vae.clone()),
            params: fitted.params.params().clone(),
        },
    )?;
    let mut history = String::from("epoch,total,reconstruction,divergence\n");
    for e in &fitted.history {
        history.push_str(&format!("{},{},{},{}\n", e.epoch, e.total, e.reconstruction, e.divergence));
    }
    write_text(&ctx.path(VAE_HISTORY), &history)?;
    run.artifact(VAE_CHECKPOINT)?;
    run.artifact(VAE_HISTORY)?;
    if let (Some(first), Some(last)) = (fitted.history.first(), fitted.history.last()) {
        run.metric("first_epoch_loss", first.total);
        run.metric("final_epoch_loss", last.total);
    }
    run.finish(false, |_| {})
}

fn load_vae(ctx: &Context) -> CliResult<VaeParams<f32>> {
    let path = ctx.input(VAE_CHECKPOINT, "train-vae")?;
    let ckpt = read_checkpoint_of_kind(&path, "vae")?;
    check_hash(&path, ckpt.config_hash.as_deref(), &ctx.hashes.vae, "train-vae")?;
    Ok(VaeParams::from_params(ctx.config.vae.latent_dim, ckpt.params)?)
}

pub fn encode(ctx: &Context) -> CliResult<Status> {
    let params = load_vae(ctx)?;
    let dataset = load_dataset(ctx)?;
    let mut run = StageRun::start(ctx, "encode", &ctx.hashes.encode);
    let seed = ctx.config.encode_seed();
    for (selector, rel, stream) in [(Selector::Train, ENCODINGS_TRAIN, 0), (Selector::Test, ENCODINGS_TEST, 1)] {
        let enc = encode_dataset(&params, &dataset, selector, derive_seed(seed, "split-stream", stream))?;
        write_encodings(&ctx.path(rel), &enc, Some(&ctx.hashes.encode))?;
        run.artifact(rel)?;
        run.metric(&format!("{}_frames", selector_name(selector)), enc.len() as f64);
    }
    run.finish(false, |_| {})
}

fn selector_name(s: Selector) -> &'static str {
    match s {
        Selector::Train => "train",
        Selector::Test => "test",
        Selector::All => "all",
    }
}

fn load_encodings(ctx: &Context, rel: &str) -> CliResult<Vec<Encoding>> {
    let path = ctx.input(rel, "encode")?;
    let (enc, hash) = read_encodings(&path)?;
    check_hash(&path, hash.as_deref(), &ctx.hashes.encode, "encode")?;
    Ok(enc)
}

fn prevalence(labels: &[bool]) -> f64 {
    labels.iter().filter(|&&l| l).count() as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Serialize, Deserialize)]
struct DirectMetrics {
    config_hash: String,
    average_precision: f64,
    mean_query_ap: f64,
    pooled_ap: f64,
    queries: usize,
    test_frames: usize,
    prevalence: f64,
}

pub fn eval_direct(ctx: &Context) -> CliResult<Status> {
    let test = load_encodings(ctx, ENCODINGS_TEST)?;
    let indices: Vec<usize> = test.iter().map(|e| e.index).collect();
    let labels = labels_for(ctx, &indices)?;
    let mut run = StageRun::start(ctx, "eval-direct", &ctx.hashes.direct);
    let d = &ctx.config.direct;
    let report = evaluate_direct(&test, &labels, d.vector, d.aggregation)?;
    let (scores, pooled_labels) = report.pooled();
    emit_pr_curve(&scores, &pooled_labels, &ctx.path(DIRECT_PR))?;
    write_query_aps(&ctx.path(DIRECT_QUERIES), &report.queries)?;
    let metrics = DirectMetrics {
        config_hash: ctx.hashes.direct.clone(),
        average_precision: report.headline(),
        mean_query_ap: report.mean_ap,
        pooled_ap: report.pooled_ap,
        queries: report.queries.len(),
        test_frames: test.len(),
        prevalence: prevalence(&labels),
    };
    write_json(&ctx.path(DIRECT_METRICS), &metrics)?;
    for rel in [DIRECT_PR, DIRECT_QUERIES, DIRECT_METRICS] {
        run.artifact(rel)?;
    }
    run.metric("average_precision", metrics.average_precision);
    run.metric("prevalence", metrics.prevalence);
    log::info!("eval-direct: AP {}", metrics.average_precision);
    run.finish(false, |m| m.headline.direct_ap = Some(metrics.average_precision))
}

#[derive(Debug, Serialize, Deserialize)]
struct MixtureDiagnostics {
    config_hash: String,
    #[serde(flatten)]
    diagnostics: Diagnostics,
}

fn vectors(encodings: &[Encoding], which: LatentVector) -> Vec<&[f32]> {
    encodings.iter().map(|e| which.pick(e)).collect()
}

pub fn fit_mixture(ctx: &Context) -> CliResult<Status> {
    let train = load_encodings(ctx, ENCODINGS_TRAIN)?;
    let mut run = StageRun::start(ctx, "fit-mixture", &ctx.hashes.mixture);
    let values = flatten(&vectors(&train, ctx.config.mixture.vector));
    let posterior = sample_posterior(&values, &ctx.config.mixture.sampler)?;
    posterior.write_csv(&ctx.path(MIXTURE_POSTERIOR))?;
    let diagnostics = posterior.diagnostics();
    let flagged = !diagnostics.converged;
    if flagged {
        log::warn!(
            "fit-mixture: chains did not converge (max R-hat {}, degenerate {})",
            diagnostics.max_rhat,
            diagnostics.degenerate
        );
    }
    run.metric("max_rhat", diagnostics.max_rhat);
    write_json(
        &ctx.path(MIXTURE_DIAGNOSTICS),
        &MixtureDiagnostics {
            config_hash: ctx.hashes.mixture.clone(),
            diagnostics,
        },
    )?;
    run.artifact(MIXTURE_POSTERIOR)?;
    run.artifact(MIXTURE_DIAGNOSTICS)?;
    run.finish(flagged, |_| {})
}

#[derive(Debug, Serialize, Deserialize)]
struct MixtureMetrics {
    config_hash: String,
    average_precision: f64,
    orientation: latent_scope::mixture::Orientation,
    /// Held-out AP with the upper and the lower cluster taken as "tool".
    holdout_ap: [f64; 2],
    calibration_ap: Option<[f64; 2]>,
    calibration_frames: usize,
    holdout_frames: usize,
    holdout_prevalence: f64,
    converged: bool,
}

pub fn eval_mixture(ctx: &Context) -> CliResult<Status> {
    let post_path = ctx.input(MIXTURE_POSTERIOR, "fit-mixture")?;
    let diag_path = ctx.input(MIXTURE_DIAGNOSTICS, "fit-mixture")?;
    let diag: MixtureDiagnostics = read_json(&diag_path)?;
    check_hash(&diag_path, Some(&diag.config_hash), &ctx.hashes.mixture, "fit-mixture")?;
    check_hash(
        &post_path,
        manifest_hash(ctx, "fit-mixture")?.as_deref(),
        &ctx.hashes.mixture,
        "fit-mixture",
    )?;
    let posterior = MixturePosterior::read_csv(&post_path)?;
    let test = load_encodings(ctx, ENCODINGS_TEST)?;
    let indices: Vec<usize> = test.iter().map(|e| e.index).collect();
    let labels = labels_for(ctx, &indices)?;
    let mut run = StageRun::start(ctx, "eval-mixture", &ctx.hashes.mixture);
    let mc = &ctx.config.mixture;
    let report = evaluate_mixture(&posterior, &indices, &vectors(&test, mc.vector), &labels, mc.calibration_fraction)?;
    report.write_scores(&ctx.path(MIXTURE_SCORES))?;
    let (_, holdout_labels) = report.holdout_scores();
    let converged = diag.diagnostics.converged;
    let metrics = MixtureMetrics {
        config_hash: ctx.hashes.mixture.clone(),
        average_precision: report.average_precision,
        orientation: report.orientation,
        holdout_ap: report.holdout_ap,
        calibration_ap: report.calibration_ap,
        calibration_frames: report.calibration_len,
        holdout_frames: holdout_labels.len(),
        holdout_prevalence: prevalence(&holdout_labels),
        converged,
    };
    write_json(&ctx.path(MIXTURE_METRICS), &metrics)?;
    run.artifact(MIXTURE_SCORES)?;
    run.artifact(MIXTURE_METRICS)?;
    run.metric("average_precision", metrics.average_precision);
    run.metric("prevalence", metrics.holdout_prevalence);
    log::info!("eval-mixture: AP {}", metrics.average_precision);
    run.finish(!converged, |m| m.headline.mixture_ap = Some(metrics.average_precision))
}

#[derive(Debug, Serialize, Deserialize)]
struct FpCheckpointConfig {
    input_dim: usize,
    #[serde(flatten)]
    fp: latent_scope::future::FpConfig,
}

pub fn train_fp(ctx: &Context) -> CliResult<Status> {
    let train = load_encodings(ctx, ENCODINGS_TRAIN)?;
    let mut run = StageRun::start(ctx, "train-fp", &ctx.hashes.fp);
    let fc = &ctx.config.fp;
    let indices: Vec<usize> = train.iter().map(|e| e.index).collect();
    let fitted = fit_fp(&indices, &vectors(&train, fc.input), fc, |_, _| {})?;
    let config = FpCheckpointConfig {
        input_dim: fitted.params.input_dim(),
        fp: fc.clone(),
    };
    write_checkpoint(
        &ctx.path(FP_CHECKPOINT),
        &Checkpoint {
            kind: "fp".into(),
            config: serde_json::to_value(&config).map_err(|e| CliError::Other(e.to_string()))?,
            config_hash: Some(ctx.hashes.fp.clone()),
            params: fitted.params.params().clone(),
        },
    )?;
    let mut history = String::from("epoch,nll\n");
    for (i, v) in fitted.history.iter().enumerate() {
        history.push_str(&format!("{},{v}\n", i + 1));
    }
    write_text(&ctx.path(FP_HISTORY), &history)?;
    run.artifact(FP_CHECKPOINT)?;
    run.artifact(FP_HISTORY)?;
    run.metric("training_windows", fitted.windows as f64);
    if let (Some(first), Some(last)) = (fitted.history.first(), fitted.history.last()) {
        run.metric("first_epoch_nll", *first);
        run.metric("final_epoch_nll", *last);
    }
    run.finish(false, |_| {})
}

#[derive(Debug, Serialize, Deserialize)]
struct FpMetrics {
    config_hash: String,
    average_precision: f64,
    queries: usize,
    sequences: usize,
    prevalence: f64,
}

pub fn eval_fp(ctx: &Context) -> CliResult<Status> {
    let path = ctx.input(FP_CHECKPOINT, "train-fp")?;
    let ckpt = read_checkpoint_of_kind(&path, "fp")?;
    check_hash(&path, ckpt.config_hash.as_deref(), &ctx.hashes.fp, "train-fp")?;
    let saved: FpCheckpointConfig = serde_json::from_value(ckpt.config)
        .map_err(|e| CliError::Other(format!("{}: bad config block: {e}", path.display())))?;
    let params = FpParams::from_params(saved.input_dim, saved.fp.hidden, saved.fp.components, ckpt.params)?;
    let test = load_encodings(ctx, ENCODINGS_TEST)?;
    let indices: Vec<usize> = test.iter().map(|e| e.index).collect();
    let labels = labels_for(ctx, &indices)?;
    let mut run = StageRun::start(ctx, "eval-fp", &ctx.hashes.fp);
    let fc = &ctx.config.fp;
    let report = evaluate_fp(&params, &indices, &vectors(&test, fc.input), &labels, fc.past, fc.max_index_step)?;
    write_sequence_encodings(&ctx.path(FP_SEQUENCES), &report.sequences, Some(&ctx.hashes.fp))?;
    let mut rows = String::from("window,first_frame,ap\n");
    for q in &report.queries {
        let first = report.sequences[q.window].frames.first().copied().unwrap_or_default();
        rows.push_str(&format!("{},{first},{}\n", q.window, q.average_precision));
    }
    write_text(&ctx.path(FP_QUERIES), &rows)?;
    let metrics = FpMetrics {
        config_hash: ctx.hashes.fp.clone(),
        average_precision: report.mean_ap,
        queries: report.queries.len(),
        sequences: report.sequences.len(),
        prevalence: prevalence(&labels),
    };
    write_json(&ctx.path(FP_METRICS), &metrics)?;
    for rel in [FP_SEQUENCES, FP_QUERIES, FP_METRICS] {
        run.artifact(rel)?;
    }
    run.metric("average_precision", metrics.average_precision);
    log::info!("eval-fp: AP {}", metrics.average_precision);
    run.finish(false, |m| m.headline.fp_ap = Some(metrics.average_precision))
}

/// Writes `report.txt` and `report.csv` from the manifest and returns the text.
pub fn report(out: &Path) -> CliResult<String> {
    let path = out.join(crate::manifest::MANIFEST_FILE);
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path,
            producer: "run --all",
        });
    }
    let m = RunManifest::load(&path)?;
    m.verify(out)?;
    let table = ReportTable::from_headline(&m.headline)?;
    let text = table.text();
    write_text(&out.join(REPORT_TEXT), &text)?;
    write_text(&out.join(REPORT_CSV), &table.csv())?;
    Ok(text)
}

/// Every stage in pipeline order; convergence flags do not stop the run.
pub fn run_all(ctx: &Context) -> CliResult<Status> {
    let stages: [(&str, fn(&Context) -> CliResult<Status>); 8] = [
        ("synth", synth),
        ("train-vae", train_vae),
        ("encode", encode),
        ("eval-direct", eval_direct),
        ("fit-mixture", fit_mixture),
        ("eval-mixture", eval_mixture),
        ("train-fp", train_fp),
        ("eval-fp", eval_fp),
    ];
    let mut status = Status::Ok;
    for (name, stage) in stages {
        log::info!("== {name}");
        status = status.and(stage(ctx)?);
    }
    print!("{}", report(&ctx.out)?);
    Ok(status)
}
