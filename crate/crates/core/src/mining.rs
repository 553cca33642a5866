//! Hard example mining from classifier outputs and selection of the hardest
//! augmented candidate per anchor.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;

use crate::data::{Corpus, DataError, ImageRef};
use crate::imaging::{apply_augmentation, sample_augmentation, AugmentationParams, AugmentationPolicy, Image, ImagingError};
use crate::model::{ce_label_smoothing, Logits, Matrix, ModelError};
use crate::rng::{stream, tag};

#[derive(Debug, thiserror::Error)]
pub enum MiningError {
    #[error("hard example distribution needs at least two classes, got {0}")]
    SingleClass(usize),
    #[error("anchor class {anchor} outside [0, {classes})")]
    AnchorOutOfRange { anchor: usize, classes: usize },
    #[error("logit row contains a non-finite value")]
    NonFinite,
    #[error("need at least one candidate per anchor")]
    NoCandidates,
    #[error("{logits} logit rows for {labels} labels")]
    BatchMismatch { logits: usize, labels: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = MiningError> = std::result::Result<T, E>;

/// Class probabilities with the anchor's own class removed from the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct HardDistribution {
    pub anchor_class: usize,
    pub probs: Vec<f64>,
}

/// `P(i | anchor j) = exp(p_i) / sum_{k != j} exp(p_k)` for `i != j`, and 0 at `j`.
pub fn hard_probabilities(logits: &[f32], anchor_class: usize) -> Result<HardDistribution> {
    let n = logits.len();
    if n < 2 {
        return Err(MiningError::SingleClass(n));
    }
    if anchor_class >= n {
        return Err(MiningError::AnchorOutOfRange { anchor: anchor_class, classes: n });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MiningError::NonFinite);
    }
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != anchor_class)
        .map(|(_, &v)| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if i == anchor_class { 0.0 } else { (v as f64 - max).exp() })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(HardDistribution { anchor_class, probs })
}

/// `n_h` independent categorical draws (with replacement).
pub fn sample_hard_identities(dist: &HardDistribution, n_h: usize, rng: &mut impl Rng) -> Vec<usize> {
    let index = WeightedIndex::new(&dist.probs).expect("hard distribution has positive mass");
    (0..n_h).map(|_| index.sample(rng)).collect()
}

/// How candidates of one anchor are augmented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateAugmentation {
    /// Candidate 0 is flipped only; the rest use the full policy.
    FlipOnlyFirst,
    /// Every candidate uses the full policy.
    AllPolicy,
    /// Every candidate is flipped only.
    AllFlipOnly,
}

#[derive(Debug, Clone)]
pub struct HardCandidate {
    pub source: ImageRef,
    pub params: AugmentationParams,
    /// True for the candidate restricted to a random horizontal flip.
    pub flip_only: bool,
    pub image: Image,
}

impl HardCandidate {
    pub fn class(&self) -> usize {
        self.source.class
    }
}

#[derive(Debug, Clone)]
pub struct HardCandidateSet {
    pub anchor_index: usize,
    pub anchor_class: usize,
    pub candidates: Vec<HardCandidate>,
    /// One row per candidate, filled after the hard-example forward pass.
    pub logits: Option<Matrix>,
    pub selected: Option<usize>,
}

impl HardCandidateSet {
    pub fn flip_only_count(&self) -> usize {
        self.candidates.iter().filter(|c| c.flip_only).count()
    }
}

/// Streams used while building one hard batch.
#[derive(Debug, Clone, Copy)]
pub struct MiningStreams {
    pub seed: u64,
    pub iteration: u64,
    /// Augment candidates on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

/// For every anchor: exclusion-softmax distribution over its logit row, `n_h`
/// identity draws, one random image per drawn identity, and augmentation.
///
/// Identity and image draws consume `rng` in anchor order. Augmentation of
/// candidate `c` of anchor `a` uses its own stream derived from
/// `(seed, iteration, a, c)`, so it may run in parallel.
#[allow(clippy::too_many_arguments)]
pub fn build_hard_batch(
    input_logits: &Logits,
    input_labels: &[usize],
    corpus: &Corpus,
    policy: &AugmentationPolicy,
    n_h: usize,
    augmentation: CandidateAugmentation,
    streams: MiningStreams,
    rng: &mut impl Rng,
) -> Result<Vec<HardCandidateSet>> {
    if n_h == 0 {
        return Err(MiningError::NoCandidates);
    }
    if input_logits.rows() != input_labels.len() {
        return Err(MiningError::BatchMismatch { logits: input_logits.rows(), labels: input_labels.len() });
    }
    let mut draws = Vec::with_capacity(input_labels.len());
    for (a, &anchor) in input_labels.iter().enumerate() {
        let dist = hard_probabilities(input_logits.row(a), anchor)?;
        let classes = sample_hard_identities(&dist, n_h, rng);
        let refs = classes.into_iter().map(|c| corpus.image_of_identity(c, rng)).collect::<Result<Vec<_>, _>>()?;
        draws.push(refs);
    }

    let jobs: Vec<(usize, usize, ImageRef)> = draws
        .iter()
        .enumerate()
        .flat_map(|(a, refs)| refs.iter().enumerate().map(move |(c, &r)| (a, c, r)))
        .collect();
    let augment = |&(a, c, source): &(usize, usize, ImageRef)| -> Result<HardCandidate> {
        let mut rng = stream(streams.seed, &[tag::CANDIDATE_AUG, streams.iteration, a as u64, c as u64]);
        let flip_only = match augmentation {
            CandidateAugmentation::FlipOnlyFirst => c == 0,
            CandidateAugmentation::AllPolicy => false,
            CandidateAugmentation::AllFlipOnly => true,
        };
        let params = if flip_only {
            sample_augmentation(&AugmentationPolicy::FLIP_ONLY, &mut rng)
        } else {
            sample_augmentation(policy, &mut rng)
        };
        let image = apply_augmentation(corpus.image(source), &params)?;
        Ok(HardCandidate { source, params, flip_only, image })
    };
    let candidates: Vec<HardCandidate> = if streams.parallel {
        jobs.par_iter().map(augment).collect::<Result<_>>()?
    } else {
        jobs.iter().map(augment).collect::<Result<_>>()?
    };

    let mut it = candidates.into_iter();
    Ok(input_labels
        .iter()
        .enumerate()
        .map(|(a, &anchor)| HardCandidateSet {
            anchor_index: a,
            anchor_class: anchor,
            candidates: it.by_ref().take(n_h).collect(),
            logits: None,
            selected: None,
        })
        .collect())
}

/// Index of the candidate whose raw logit at the anchor's class is largest;
/// ties go to the lowest index.
pub fn select_hardest(candidate_logits: &Matrix, anchor_class: usize) -> Result<usize> {
    if candidate_logits.rows == 0 {
        return Err(MiningError::NoCandidates);
    }
    if anchor_class >= candidate_logits.cols {
        return Err(MiningError::AnchorOutOfRange { anchor: anchor_class, classes: candidate_logits.cols });
    }
    let mut best = 0;
    for r in 1..candidate_logits.rows {
        if candidate_logits.row(r)[anchor_class] > candidate_logits.row(best)[anchor_class] {
            best = r;
        }
    }
    Ok(best)
}

/// Mean label-smoothed cross-entropy of the selected candidates, each
/// against its own (sampled) identity label.
pub fn aug_loss(selected_logits: &Logits, selected_labels: &[usize], eps: f32) -> Result<f32> {
    Ok(ce_label_smoothing(selected_logits, selected_labels, eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exclusion_softmax_examples() {
        let d = hard_probabilities(&[0.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(d.probs, vec![0.0, 0.5, 0.5]);
        let d = hard_probabilities(&[1.0, 2.0, 3.0], 2).unwrap();
        let (e1, e2) = (1f64.exp(), 2f64.exp());
        assert!((d.probs[0] - e1 / (e1 + e2)).abs() < 1e-12);
        assert!((d.probs[1] - e2 / (e1 + e2)).abs() < 1e-12);
        assert!((d.probs[0] - 0.2689).abs() < 1e-4 && (d.probs[1] - 0.7311).abs() < 1e-4);
        assert_eq!(d.probs[2], 0.0);
        let shifted = hard_probabilities(&[8.0, 9.0, 10.0], 2).unwrap();
        for (a, b) in d.probs.iter().zip(&shifted.probs) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn exclusion_softmax_errors() {
        assert!(matches!(hard_probabilities(&[1.0], 0), Err(MiningError::SingleClass(1))));
        assert!(matches!(hard_probabilities(&[1.0, 2.0], 2), Err(MiningError::AnchorOutOfRange { .. })));
        assert!(matches!(hard_probabilities(&[1.0, f32::NAN], 0), Err(MiningError::NonFinite)));
    }

    #[test]
    fn huge_anchor_logit_does_not_underflow_others() {
        let d = hard_probabilities(&[1000.0, 1.0, 2.0], 0).unwrap();
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.probs[2] > d.probs[1]);
    }

    #[test]
    fn sampling_examples() {
        let point = HardDistribution { anchor_class: 0, probs: vec![0.0, 0.0, 1.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_hard_identities(&point, 6, &mut rng), vec![2; 6]);
        let d = HardDistribution { anchor_class: 0, probs: vec![0.0, 0.25, 0.75] };
        let a = sample_hard_identities(&d, 10, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_hard_identities(&d, 10, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn selection_examples() {
        let q = Matrix::from_rows(&[vec![0.0, 0.1], vec![5.0, 0.9], vec![0.0, 0.3], vec![0.0, 0.2]]).unwrap();
        assert_eq!(select_hardest(&q, 1).unwrap(), 1);
        let tied = Matrix::from_rows(&[vec![0.4, 1.0], vec![0.4, 2.0], vec![0.4, 3.0]]).unwrap();
        assert_eq!(select_hardest(&tied, 0).unwrap(), 0);
        let single = Matrix::from_rows(&[vec![-3.0, 2.0]]).unwrap();
        assert_eq!(select_hardest(&single, 0).unwrap(), 0);
        assert!(select_hardest(&Matrix::zeros(0, 2), 0).is_err());
    }

    #[test]
    fn aug_loss_is_ce_of_selected_rows() {
        let q = Logits(Matrix::from_rows(&[vec![0.0; 4], vec![0.0; 4]]).unwrap());
        let l = aug_loss(&q, &[1, 3], 0.1).unwrap();
        assert!((l as f64 - 4f64.ln()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn distribution_properties(row in proptest::collection::vec(-30.0f32..30.0, 2..50), seed in any::<usize>(), shift in -10.0f32..10.0) {
            let anchor = seed % row.len();
            let d = hard_probabilities(&row, anchor).unwrap();
            prop_assert_eq!(d.probs[anchor], 0.0);
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted: Vec<f32> = row.iter().map(|v| v + shift).collect();
            let s = hard_probabilities(&shifted, anchor).unwrap();
            for (a, b) in d.probs.iter().zip(&s.probs) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn selection_follows_permutation(col in proptest::collection::vec(-5.0f32..5.0, 1..10), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let rows: Vec<Vec<f32>> = col.iter().map(|&v| vec![0.0, v]).collect();
            let k = select_hardest(&Matrix::from_rows(&rows).unwrap(), 1).unwrap();
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<Vec<f32>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let kp = select_hardest(&Matrix::from_rows(&permuted).unwrap(), 1).unwrap();
            // Same maximal value; identical index when the maximum is unique.
            prop_assert_eq!(permuted[kp][1], rows[k][1]);
            if col.iter().filter(|&&v| v == col[k]).count() == 1 {
                prop_assert_eq!(perm[kp], k);
            }
        }
    }
}
