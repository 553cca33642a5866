//! Matching scores and single-shot CMC evaluation.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::data::Corpus;
use crate::imaging::Image;
use crate::model::{extract_features, l2_normalize, Embedding, ModelError, ModelParams};
use crate::rng::{stream, tag};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("feature row has norm {norm}, expected a unit vector")]
    NotNormalized { norm: f64 },
    #[error("feature widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("probe identity {0} has no match in the gallery")]
    MissingMatch(usize),
    #[error("probe identity {0} appears more than once in the gallery")]
    DuplicateMatch(usize),
    #[error("{what}: {features} feature rows for {ids} identities")]
    Count { what: &'static str, features: usize, ids: usize },
    #[error("ranks must be positive, got {0:?}")]
    BadRanks(Vec<usize>),
    #[error("protocol needs {needed} identities with at least {images} images each, dataset has {available}")]
    InsufficientIdentities { needed: usize, images: usize, available: usize },
    #[error("probe identity {class} has {images} image(s), needs 2 distinct images")]
    TooFewImages { class: usize, images: usize },
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

const UNIT_TOLERANCE: f64 = 1e-4;

fn check_unit(v: &[f32]) -> Result<()> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(EvalError::NotNormalized { norm });
    }
    Ok(())
}

fn score_unchecked(p: &[f32], g: &[f32]) -> f64 {
    let d2: f64 = p.iter().zip(g).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    1.0 - d2.sqrt() / 2.0
}

/// `1 - |z_p - z_g| / 2` for unit vectors, in `[0, 1]`.
pub fn match_score(probe: &[f32], gallery: &[f32]) -> Result<f64> {
    if probe.len() != gallery.len() {
        return Err(EvalError::WidthMismatch(probe.len(), gallery.len()));
    }
    check_unit(probe)?;
    check_unit(gallery)?;
    Ok(score_unchecked(probe, gallery).clamp(0.0, 1.0))
}

/// Cumulative matching accuracy at each requested rank.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    pub ranks: Vec<usize>,
    pub accuracies: Vec<f64>,
}

impl CmcCurve {
    pub fn at(&self, rank: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == rank).map(|i| self.accuracies[i])
    }

    /// Elementwise arithmetic mean of curves over the same ranks.
    pub fn mean(curves: &[CmcCurve]) -> Option<CmcCurve> {
        let first = curves.first()?;
        if curves.iter().any(|c| c.ranks != first.ranks) {
            return None;
        }
        let n = curves.len() as f64;
        let accuracies =
            (0..first.ranks.len()).map(|i| curves.iter().map(|c| c.accuracies[i]).sum::<f64>() / n).collect();
        Some(CmcCurve { ranks: first.ranks.clone(), accuracies })
    }
}

/// 1-based rank of each probe's true match, scores tied with the match
/// counting ahead of it only when they sit at a lower gallery index.
pub fn match_ranks(probe: &Embedding, probe_ids: &[usize], gallery: &Embedding, gallery_ids: &[usize]) -> Result<Vec<usize>> {
    if probe.rows() != probe_ids.len() {
        return Err(EvalError::Count { what: "probe", features: probe.rows(), ids: probe_ids.len() });
    }
    if gallery.rows() != gallery_ids.len() {
        return Err(EvalError::Count { what: "gallery", features: gallery.rows(), ids: gallery_ids.len() });
    }
    if probe.rows() > 0 && gallery.rows() > 0 && probe.dim() != gallery.dim() {
        return Err(EvalError::WidthMismatch(probe.dim(), gallery.dim()));
    }
    for r in 0..probe.rows() {
        check_unit(probe.row(r))?;
    }
    for r in 0..gallery.rows() {
        check_unit(gallery.row(r))?;
    }
    let mut ranks = Vec::with_capacity(probe.rows());
    for (p, &pid) in probe_ids.iter().enumerate() {
        let mut matches = gallery_ids.iter().enumerate().filter(|(_, &g)| g == pid).map(|(i, _)| i);
        let truth = matches.next().ok_or(EvalError::MissingMatch(pid))?;
        if matches.next().is_some() {
            return Err(EvalError::DuplicateMatch(pid));
        }
        let pr = probe.row(p);
        let true_score = score_unchecked(pr, gallery.row(truth));
        let ahead = (0..gallery.rows())
            .filter(|&g| {
                let s = score_unchecked(pr, gallery.row(g));
                s > true_score || (s == true_score && g < truth)
            })
            .count();
        ranks.push(ahead + 1);
    }
    Ok(ranks)
}

/// Single-shot CMC: fraction of probes whose match ranks within each `k`.
pub fn cmc_single_shot(
    probe: &Embedding,
    probe_ids: &[usize],
    gallery: &Embedding,
    gallery_ids: &[usize],
    ranks: &[usize],
) -> Result<CmcCurve> {
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(EvalError::BadRanks(ranks.to_vec()));
    }
    let positions = match_ranks(probe, probe_ids, gallery, gallery_ids)?;
    let n = positions.len().max(1) as f64;
    let accuracies = ranks.iter().map(|&k| positions.iter().filter(|&&p| p <= k).count() as f64 / n).collect();
    Ok(CmcCurve { ranks: ranks.to_vec(), accuracies })
}

/// Repeated random probe/gallery splits of a held-out dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalProtocol {
    pub probe_id_count: usize,
    pub gallery_id_count: usize,
    pub trials: usize,
    pub ranks: Vec<usize>,
    pub seed: u64,
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.probe_id_count == 0 || self.gallery_id_count == 0 || self.trials == 0 {
            return Err(EvalError::InvalidProtocol("identity counts and trials must be at least 1".into()));
        }
        if self.probe_id_count > self.gallery_id_count {
            return Err(EvalError::InvalidProtocol(format!(
                "{} probe identities cannot all have a match among {} gallery identities",
                self.probe_id_count, self.gallery_id_count
            )));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(EvalError::BadRanks(self.ranks.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub trials: Vec<CmcCurve>,
    pub mean: CmcCurve,
}

impl TrialReport {
    /// `trial,rank,accuracy` rows per trial, then the averaged block with
    /// `mean` in the trial column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,rank,accuracy\n");
        for (t, curve) in self.trials.iter().enumerate() {
            for (r, a) in curve.ranks.iter().zip(&curve.accuracies) {
                let _ = writeln!(out, "{t},{r},{a:.6}");
            }
        }
        for (r, a) in self.mean.ranks.iter().zip(&self.mean.accuracies) {
            let _ = writeln!(out, "mean,{r},{a:.6}");
        }
        out
    }
}

/// Probe and gallery images for one trial as `(class, image index)` pairs.
/// Probe identities are the first `probe_id_count` sampled gallery identities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialSplit {
    pub probe: Vec<(usize, usize)>,
    pub gallery: Vec<(usize, usize)>,
}

pub fn sample_trial(corpus: &Corpus, protocol: &EvalProtocol, rng: &mut impl Rng) -> Result<TrialSplit> {
    let classes = corpus.num_classes();
    if protocol.gallery_id_count > classes {
        return Err(EvalError::InsufficientIdentities { needed: protocol.gallery_id_count, images: 1, available: classes });
    }
    let ids = sample(rng, classes, protocol.gallery_id_count).into_vec();
    let mut probe = Vec::with_capacity(protocol.probe_id_count);
    let mut gallery = Vec::with_capacity(ids.len());
    for (slot, &c) in ids.iter().enumerate() {
        let count = corpus.images_of(c).map_err(|_| EvalError::InvalidProtocol(format!("class {c} missing")))?.len();
        if slot < protocol.probe_id_count {
            if count < 2 {
                return Err(EvalError::TooFewImages { class: c, images: count });
            }
            let pair = sample(rng, count, 2);
            probe.push((c, pair.index(0)));
            gallery.push((c, pair.index(1)));
        } else {
            gallery.push((c, rng.gen_range(0..count)));
        }
    }
    Ok(TrialSplit { probe, gallery })
}

fn features(params: &ModelParams, corpus: &Corpus, items: &[(usize, usize)], parallel: bool) -> Result<Embedding> {
    let images: Vec<&Image> = items.iter().map(|&(c, i)| &corpus.images_of(c).expect("sampled class")[i]).collect();
    let emb = if parallel && images.len() > 1 {
        let parts: Vec<Embedding> =
            images.par_chunks(16).map(|chunk| extract_features(params, chunk)).collect::<Result<_, _>>()?;
        let mut values = parts[0].values.clone();
        for p in &parts[1..] {
            values.data.extend_from_slice(&p.values.data);
            values.rows += p.values.rows;
        }
        Embedding::new(values)
    } else {
        extract_features(params, &images)?
    };
    Ok(l2_normalize(&emb))
}

/// Runs `protocol.trials` random splits, each with eval-mode features,
/// L2 normalization and single-shot CMC, and averages the curves.
pub fn run_trials(params: &ModelParams, corpus: &Corpus, protocol: &EvalProtocol, parallel: bool) -> Result<TrialReport> {
    protocol.validate()?;
    let mut trials = Vec::with_capacity(protocol.trials);
    for t in 0..protocol.trials {
        let mut rng = stream(protocol.seed, &[tag::EVAL_TRIAL, t as u64]);
        let split = sample_trial(corpus, protocol, &mut rng)?;
        let probe = features(params, corpus, &split.probe, parallel)?;
        let gallery = features(params, corpus, &split.gallery, parallel)?;
        let probe_ids: Vec<usize> = split.probe.iter().map(|p| p.0).collect();
        let gallery_ids: Vec<usize> = split.gallery.iter().map(|g| g.0).collect();
        trials.push(cmc_single_shot(&probe, &probe_ids, &gallery, &gallery_ids, &protocol.ranks)?);
    }
    let mean = CmcCurve::mean(&trials).expect("at least one trial with shared ranks");
    Ok(TrialReport { trials, mean })
}
