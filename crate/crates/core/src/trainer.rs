//! Two-pass training iteration, ablation modes, schedule and run output.

use std::fmt::{self, Write as _};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{epoch_batches, Corpus, DataError, MiniBatch};
use crate::imaging::{apply_augmentation, sample_augmentation, AugmentationPolicy, Image, ImagingError, PolicyPreset};
use crate::mining::{build_hard_batch, select_hardest, CandidateAugmentation, MiningError, MiningStreams};
use crate::model::{
    backward, ce_label_smoothing_with_grad, classify, forward_features, sgd_step, write_checkpoint, ArchSpec, Logits,
    Matrix, ModelError, ModelParams, Mode,
};
use crate::rng::{stream, tag};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("empty window {start}..{end} over {len} records")]
    EmptyWindow { start: usize, end: usize, len: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mining(#[from] MiningError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Flip-only input batch, no hard branch.
    Baseline,
    /// Full policy on the input batch, no hard branch.
    Augment,
    /// One flip-only hard candidate per anchor, no selection.
    Mining,
    /// Full policy on the input batch and on the single hard candidate.
    AugmentMining,
    /// Flip-only input batch, `n_h` candidates, hardest one selected.
    AugMiningSelect,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] =
        [TrainMode::Baseline, TrainMode::Augment, TrainMode::Mining, TrainMode::AugmentMining, TrainMode::AugMiningSelect];

    pub fn has_hard_branch(self) -> bool {
        matches!(self, TrainMode::Mining | TrainMode::AugmentMining | TrainMode::AugMiningSelect)
    }

    fn augments_input(self) -> bool {
        matches!(self, TrainMode::Augment | TrainMode::AugmentMining)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Augment => "augment",
            TrainMode::Mining => "mining",
            TrainMode::AugmentMining => "augment_mining",
            TrainMode::AugMiningSelect => "aug_mining_select",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected baseline, augment, mining, augment_mining or aug_mining_select)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_bs: usize,
    pub n_h: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    /// First epoch (0-based) trained at the decayed rate. `None` scales the
    /// 20-of-30 split to `epochs`.
    pub decay_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub smoothing: f64,
    pub dropout: f64,
    pub policy: PolicyPreset,
    pub mode: TrainMode,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub embedding_dim: usize,
}

impl Default for TrainConfig {
    /// Desk scale: 10 epochs, decay at epoch 7.
    fn default() -> Self {
        TrainConfig {
            n_bs: 16,
            n_h: 4,
            epochs: 10,
            initial_lr: 0.01,
            lr_decay: 0.1,
            decay_epoch: None,
            momentum: 0.9,
            weight_decay: 0.0005,
            smoothing: 0.1,
            dropout: 0.5,
            policy: PolicyPreset::Moderate,
            mode: TrainMode::AugMiningSelect,
            seed: 0,
            height: 64,
            width: 32,
            embedding_dim: 64,
        }
    }
}

impl TrainConfig {
    /// Full 30-epoch schedule with decay after epoch 20.
    pub fn paper() -> Self {
        TrainConfig { epochs: 30, ..Self::default() }
    }

    pub fn decay_epoch(&self) -> usize {
        self.decay_epoch.unwrap_or_else(|| (self.epochs as f64 * 20.0 / 30.0).round() as usize)
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.initial_lr * self.lr_decay
        } else {
            self.initial_lr
        }
    }

    /// Candidates per anchor actually drawn: the single-candidate modes use one.
    pub fn effective_n_h(&self) -> usize {
        match self.mode {
            TrainMode::Mining | TrainMode::AugmentMining => 1,
            _ => self.n_h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Invalid(m.to_string()));
        if self.n_bs == 0 {
            return bad("n_bs must be at least 1");
        }
        if self.n_h == 0 {
            return bad("n_h must be at least 1");
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) || !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("momentum must be in [0,1) and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.smoothing) || !(0.0..1.0).contains(&self.dropout) {
            return bad("smoothing and dropout must be in [0,1)");
        }
        if self.height == 0 || self.width == 0 || self.embedding_dim == 0 {
            return bad("height, width and embedding_dim must be positive");
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec::reference(self.embedding_dim)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_bs={}", self.n_bs)?;
        writeln!(f, "n_h={}", self.n_h)?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "initial_lr={}", self.initial_lr)?;
        writeln!(f, "lr_decay={}", self.lr_decay)?;
        writeln!(f, "decay_epoch={}", self.decay_epoch())?;
        writeln!(f, "momentum={}", self.momentum)?;
        writeln!(f, "weight_decay={}", self.weight_decay)?;
        writeln!(f, "smoothing={}", self.smoothing)?;
        writeln!(f, "dropout={}", self.dropout)?;
        writeln!(f, "policy={}", self.policy)?;
        writeln!(f, "mode={}", self.mode)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "height={}", self.height)?;
        writeln!(f, "width={}", self.width)?;
        writeln!(f, "embedding_dim={}", self.embedding_dim)
    }
}

impl FromStr for TrainConfig {
    type Err = TrainError;

    /// `key=value` lines over the defaults; blank lines and `#` comments are
    /// skipped, unknown or repeated keys are rejected.
    fn from_str(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| TrainError::Config { line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            seen.push(key);
            fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
                v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
            }
            let parsed: std::result::Result<(), String> = (|| {
                match key {
                    "n_bs" => config.n_bs = num(key, value)?,
                    "n_h" => config.n_h = num(key, value)?,
                    "epochs" => config.epochs = num(key, value)?,
                    "initial_lr" => config.initial_lr = num(key, value)?,
                    "lr_decay" => config.lr_decay = num(key, value)?,
                    "decay_epoch" => config.decay_epoch = Some(num(key, value)?),
                    "momentum" => config.momentum = num(key, value)?,
                    "weight_decay" => config.weight_decay = num(key, value)?,
                    "smoothing" => config.smoothing = num(key, value)?,
                    "dropout" => config.dropout = num(key, value)?,
                    "policy" => config.policy = value.parse()?,
                    "mode" => config.mode = value.parse()?,
                    "seed" => config.seed = num(key, value)?,
                    "height" => config.height = num(key, value)?,
                    "width" => config.width = num(key, value)?,
                    "embedding_dim" => config.embedding_dim = num(key, value)?,
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            parsed.map_err(err)?;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Statistics of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_batch: f32,
    /// Absent in modes without a hard branch.
    pub l_aug: Option<f32>,
    pub l_total: f32,
    /// Fraction of anchors whose selected candidate is the flip-only one.
    pub flip_only_fraction: Option<f64>,
    /// Selected candidate index per anchor.
    pub selected: Vec<usize>,
    pub forward_passes: usize,
    pub input_batch: usize,
    pub candidate_batch: usize,
    /// Parameter version seen by the input and hard passes.
    pub input_version: u64,
    pub hard_version: Option<u64>,
}

/// Where an iteration sits in the run; seeds its random streams.
#[derive(Debug, Clone, Copy)]
pub struct IterationContext {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Augment images on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

fn augment_inputs(
    corpus: &Corpus,
    batch: &MiniBatch,
    policy: &AugmentationPolicy,
    seed: u64,
    iteration: usize,
    parallel: bool,
) -> Result<Vec<Image>> {
    let one = |(i, r): (usize, &crate::data::ImageRef)| {
        let mut rng = stream(seed, &[tag::INPUT_AUG, iteration as u64, i as u64]);
        let params = sample_augmentation(policy, &mut rng);
        apply_augmentation(corpus.image(*r), &params)
    };
    let images = if parallel {
        batch.refs.par_iter().enumerate().map(one).collect::<Result<Vec<_>, _>>()?
    } else {
        batch.refs.iter().enumerate().map(one).collect::<Result<Vec<_>, _>>()?
    };
    Ok(images)
}

fn scaled(mut m: Matrix, factor: f32) -> Matrix {
    m.data.iter_mut().for_each(|g| *g *= factor);
    m
}

/// Inputs of the loss as seen by one iteration, for inspection and oracles.
#[derive(Debug, Clone, Default)]
pub struct IterationTrace {
    pub labels: Vec<usize>,
    pub input_images: Vec<Image>,
    pub input_mask: Option<Vec<f32>>,
    /// All candidates, anchor-major, `n_h` per anchor.
    pub hard_images: Vec<Image>,
    pub hard_mask: Option<Vec<f32>>,
    /// Row of `hard_images` selected for each anchor.
    pub selected_rows: Vec<usize>,
    pub selected_labels: Vec<usize>,
}

/// Forward passes, mining and selection of one iteration. Leaves the
/// gradient of the iteration loss in `params` without stepping.
pub fn iteration_gradients(
    params: &mut ModelParams,
    corpus: &Corpus,
    batch: &MiniBatch,
    config: &TrainConfig,
    ctx: IterationContext,
) -> Result<(IterationRecord, IterationTrace)> {
    if batch.is_empty() {
        return Err(TrainError::Invalid("empty mini-batch".into()));
    }
    let eps = config.smoothing as f32;
    let mode = Mode::Train { dropout: config.dropout as f32 };
    let mut rng = stream(config.seed, &[tag::ITERATION, ctx.iteration as u64]);
    let policy = config.policy.policy();
    let input_policy = if config.mode.augments_input() { policy } else { AugmentationPolicy::FLIP_ONLY };
    let labels = batch.labels();

    let inputs = augment_inputs(corpus, batch, &input_policy, config.seed, ctx.iteration, ctx.parallel)?;
    let input_refs: Vec<&Image> = inputs.iter().collect();
    let input_version = params.version();
    let (emb, cache) = forward_features(params, &input_refs, mode, &mut rng)?;
    let logits = classify(params, &emb)?;
    let (l_batch, d_batch) = ce_label_smoothing_with_grad(&logits, &labels, eps)?;

    params.zero_grad();
    let mut record = IterationRecord {
        iteration: ctx.iteration,
        epoch: ctx.epoch,
        lr: ctx.lr,
        l_batch,
        l_aug: None,
        l_total: l_batch,
        flip_only_fraction: None,
        selected: Vec::new(),
        forward_passes: 1,
        input_batch: labels.len(),
        candidate_batch: 0,
        input_version,
        hard_version: None,
    };
    let mut trace =
        IterationTrace { input_mask: cache.dropout_mask().map(<[f32]>::to_vec), ..IterationTrace::default() };
    if !config.mode.has_hard_branch() {
        backward(params, &cache, &d_batch)?;
        trace.labels = labels;
        trace.input_images = inputs;
        return Ok((record, trace));
    }

    let n_h = config.effective_n_h();
    let augmentation = match config.mode {
        TrainMode::Mining => CandidateAugmentation::AllFlipOnly,
        TrainMode::AugmentMining => CandidateAugmentation::AllPolicy,
        _ => CandidateAugmentation::FlipOnlyFirst,
    };
    let streams = MiningStreams { seed: config.seed, iteration: ctx.iteration as u64, parallel: ctx.parallel };
    let mut sets = build_hard_batch(&logits, &labels, corpus, &policy, n_h, augmentation, streams, &mut rng)?;

    let hard_images: Vec<&Image> = sets.iter().flat_map(|s| s.candidates.iter().map(|c| &c.image)).collect();
    let hard_version = params.version();
    let (hard_emb, hard_cache) = forward_features(params, &hard_images, mode, &mut rng)?;
    let hard_logits = classify(params, &hard_emb)?;
    let candidate_batch = hard_images.len();

    let mut rows = Vec::with_capacity(sets.len());
    let mut selected_labels = Vec::with_capacity(sets.len());
    for (a, set) in sets.iter_mut().enumerate() {
        let block = hard_logits.0.gather(&(a * n_h..(a + 1) * n_h).collect::<Vec<_>>());
        let pick = select_hardest(&block, set.anchor_class)?;
        rows.push(a * n_h + pick);
        selected_labels.push(set.candidates[pick].class());
        set.logits = Some(block);
        set.selected = Some(pick);
    }
    let selected_logits = Logits(hard_logits.0.gather(&rows));
    let (l_aug, d_sel) = ce_label_smoothing_with_grad(&selected_logits, &selected_labels, eps)?;

    let mut d_hard = Matrix::zeros(hard_logits.rows(), hard_logits.classes());
    for (i, &r) in rows.iter().enumerate() {
        d_hard.row_mut(r).copy_from_slice(d_sel.row(i));
    }
    backward(params, &cache, &scaled(d_batch, 0.5))?;
    backward(params, &hard_cache, &scaled(d_hard, 0.5))?;

    let flip_only = sets.iter().filter(|s| s.selected.is_some_and(|k| s.candidates[k].flip_only)).count();
    record.l_aug = Some(l_aug);
    record.l_total = total_loss(l_batch, l_aug);
    record.flip_only_fraction = Some(flip_only as f64 / sets.len() as f64);
    record.selected = sets.iter().map(|s| s.selected.unwrap_or(0)).collect();
    record.forward_passes = 2;
    record.candidate_batch = candidate_batch;
    record.hard_version = Some(hard_version);

    trace.labels = labels;
    trace.input_images = inputs;
    trace.hard_mask = hard_cache.dropout_mask().map(<[f32]>::to_vec);
    trace.hard_images = sets.into_iter().flat_map(|s| s.candidates.into_iter().map(|c| c.image)).collect();
    trace.selected_rows = rows;
    trace.selected_labels = selected_labels;
    Ok((record, trace))
}

/// One optimizer step. Selection modes run the input pass, mine and augment
/// hard candidates from its logits, run them through the same parameters,
/// pick the hardest per anchor and step on `(L_batch + L_aug) / 2`.
pub fn train_iteration(
    params: &mut ModelParams,
    corpus: &Corpus,
    batch: &MiniBatch,
    config: &TrainConfig,
    ctx: IterationContext,
) -> Result<IterationRecord> {
    let (record, _) = iteration_gradients(params, corpus, batch, config, ctx)?;
    sgd_step(params, ctx.lr as f32, config.momentum as f32, config.weight_decay as f32);
    Ok(record)
}

/// Combined objective of the selection modes.
pub fn total_loss(l_batch: f32, l_aug: f32) -> f32 {
    (l_batch + l_aug) / 2.0
}

/// Mean flip-only fraction over `records[window]`, skipping records without
/// a hard branch.
pub fn flip_only_rate(records: &[IterationRecord], window: Range<usize>) -> Result<f64> {
    let empty = || TrainError::EmptyWindow { start: window.start, end: window.end, len: records.len() };
    let slice = records.get(window.clone()).ok_or_else(empty)?;
    let values: Vec<f64> = slice.iter().filter_map(|r| r.flip_only_fraction).collect();
    if values.is_empty() {
        return Err(empty());
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Index range of the records trained before the learning-rate decay.
pub fn pre_decay_window(records: &[IterationRecord], config: &TrainConfig) -> Range<usize> {
    0..records.iter().take_while(|r| r.epoch < config.decay_epoch()).count()
}

pub const METRICS_HEADER: &str = "iteration,epoch,lr,L_batch,L_aug,L_total,flip_only_rate";

/// One CSV row; absent values are left empty.
pub fn metrics_row(r: &IterationRecord) -> String {
    let opt = |v: Option<String>| v.unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{}",
        r.iteration,
        r.epoch,
        r.lr,
        r.l_batch,
        opt(r.l_aug.map(|v| v.to_string())),
        r.l_total,
        opt(r.flip_only_fraction.map(|v| v.to_string()))
    )
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<IterationRecord>,
}

/// Output options of a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for checkpoints and `metrics.csv`; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    pub parallel: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

fn save(params: &ModelParams, seed: u64, dir: &Path, name: &str) -> Result<()> {
    Ok(write_checkpoint(&dir.join(name), params, seed)?)
}

/// Trains from scratch on an in-memory corpus. With an output directory it
/// writes `checkpoint_epoch{NN}.ckpt` after every epoch (`00` is the
/// initial state), `final.ckpt` and `metrics.csv`.
pub fn train_on_corpus(config: &TrainConfig, corpus: &Corpus, options: &RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = ModelParams::new(config.arch(), (config.height, config.width), corpus.num_classes(), config.seed)?;
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save(&params, config.seed, dir, "checkpoint_epoch00.ckpt")?;
    }
    let mut records = Vec::new();
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        let mut rng = stream(config.seed, &[tag::EPOCH, epoch as u64]);
        let lr = config.lr_at(epoch);
        for batch in epoch_batches(corpus, config.n_bs, &mut rng) {
            let ctx = IterationContext { iteration, epoch, lr, parallel: options.parallel };
            records.push(train_iteration(&mut params, corpus, &batch, config, ctx)?);
            iteration += 1;
        }
        if let Some(dir) = &options.out_dir {
            save(&params, config.seed, dir, &format!("checkpoint_epoch{:02}.ckpt", epoch + 1))?;
        }
    }
    if let Some(dir) = &options.out_dir {
        save(&params, config.seed, dir, "final.ckpt")?;
        let mut csv = String::from(METRICS_HEADER);
        csv.push('\n');
        for r in &records {
            let _ = writeln!(csv, "{}", metrics_row(r));
        }
        let path = dir.join("metrics.csv");
        fs::write(&path, csv).map_err(io_err(&path))?;
    }
    if !params.is_finite() {
        return Err(TrainError::Invalid("training diverged to non-finite parameters".into()));
    }
    Ok(TrainOutcome { params, records })
}

/// Loads every domain under `data_root` as source data and trains.
pub fn train(config: &TrainConfig, data_root: &Path, out_dir: &Path, parallel: bool) -> Result<TrainOutcome> {
    let corpus = Corpus::load(data_root, config.height, config.width)?;
    train_on_corpus(config, &corpus, &RunOptions { out_dir: Some(out_dir.to_path_buf()), parallel })
}
