//! Evaluation measurements: mean pair distance, feature-space Fréchet
//! distance, Rank-1 identification, verification rate at a fixed false
//! accept rate, and ROC curves. All pure functions.

mod eigen;

pub use eigen::{sym_eigen, sym_sqrt};

use crate::error::MetricsError;
use crate::synthdata::{gather_images, Modality, PairRecord};
use crate::tensor::Tensor;

/// Covariance jitter added when estimating statistics from samples; keeps
/// nearly singular covariances invertible-ish for the square-root path.
pub const COV_JITTER: f64 = 1e-6;

/// Genuine (same identity, cross modality) and impostor (different
/// identity) similarity scores.
#[derive(Clone, Debug, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostors: Vec<f64>,
}

/// First two moments of a feature set.
#[derive(Clone, Debug)]
pub struct FeatureSetStats {
    dim: usize,
    mean: Vec<f64>,
    /// Row-major dim×dim covariance.
    cov: Vec<f64>,
}

impl FeatureSetStats {
    /// Wrap explicit moments. The covariance is used verbatim (no jitter);
    /// it must be symmetric.
    pub fn from_parts(mean: Vec<f64>, cov: Vec<f64>) -> Self {
        let dim = mean.len();
        assert_eq!(cov.len(), dim * dim, "covariance storage does not match dimension");
        for i in 0..dim {
            for j in 0..i {
                assert!(
                    (cov[i * dim + j] - cov[j * dim + i]).abs() <= 1e-9,
                    "covariance must be symmetric"
                );
            }
        }
        FeatureSetStats { dim, mean, cov }
    }

    /// Estimate moments from samples: mean plus the unbiased covariance
    /// with `COV_JITTER` added to the diagonal.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self, MetricsError> {
        if features.is_empty() {
            return Err(MetricsError::EmptyInput("features"));
        }
        if features.len() < 2 {
            return Err(MetricsError::TooFewSamples { got: features.len(), needed: 2 });
        }
        let dim = features[0].len();
        let count = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            if f.len() != dim {
                return Err(MetricsError::DimMismatch(dim, f.len()));
            }
            if !f.iter().all(|x| x.is_finite()) {
                return Err(MetricsError::NonFinite);
            }
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        let mut cov = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for f in features {
            for ((c, x), m) in centered.iter_mut().zip(f).zip(&mean) {
                *c = x - m;
            }
            for i in 0..dim {
                let ci = centered[i];
                for j in i..dim {
                    cov[i * dim + j] += ci * centered[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let val = cov[i * dim + j] / (count - 1.0);
                cov[i * dim + j] = val;
                cov[j * dim + i] = val;
            }
            cov[i * dim + i] += COV_JITTER;
        }
        Ok(FeatureSetStats { dim, mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn trace(n: usize, a: &[f64]) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}

/// Fréchet distance between two Gaussian approximations:
/// ‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2·(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2}).
pub fn frechet_distance(a: &FeatureSetStats, b: &FeatureSetStats) -> Result<f64, MetricsError> {
    if a.dim != b.dim {
        return Err(MetricsError::DimMismatch(a.dim, b.dim));
    }
    let n = a.dim;
    let mean_term: f64 =
        a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = sym_sqrt(n, &a.cov)?;
    let mut inner = eigen::mat_mul(n, &eigen::mat_mul(n, &root_a, &b.cov), &root_a);
    // The product is symmetric in exact arithmetic; restore that exactly.
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inner[i * n + j] + inner[j * n + i]);
            inner[i * n + j] = m;
            inner[j * n + i] = m;
        }
    }
    let (evals, _) = sym_eigen(n, &inner)?;
    let trace_sqrt: f64 = evals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let value = mean_term + trace(n, &a.cov) + trace(n, &b.cov) - 2.0 * trace_sqrt;
    if !value.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    Ok(value.max(0.0))
}

/// Pairs per extractor call in [`mean_pair_distance`]; large pools would
/// otherwise pay one network bind per image.
const PAIR_CHUNK: usize = 512;

/// Mean over pairs of the L2 distance between the extracted features of
/// the two modalities. The extractor maps a `[rows, pixels]` batch to a
/// `[rows, feature_dim]` batch and is fed chunks, never single rows.
pub fn mean_pair_distance<F>(pairs: &[PairRecord], mut extract: F) -> Result<f64, MetricsError>
where
    F: FnMut(&Tensor) -> Tensor,
{
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput("pairs"));
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(PAIR_CHUNK) {
        let idxs: Vec<usize> = (0..chunk.len()).collect();
        let feat_n = extract(&gather_images(chunk, &idxs, Modality::N));
        let feat_v = extract(&gather_images(chunk, &idxs, Modality::V));
        if feat_n.shape() != feat_v.shape() {
            return Err(MetricsError::DimMismatch(feat_n.shape()[1], feat_v.shape()[1]));
        }
        assert_eq!(feat_n.shape()[0], chunk.len(), "extractor must keep one row per image");
        for r in 0..chunk.len() {
            let d2: f64 = feat_n
                .row(r)
                .iter()
                .zip(feat_v.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if !d2.is_finite() {
                return Err(MetricsError::NonFinite);
            }
            total += d2.sqrt();
        }
    }
    Ok(total / pairs.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Fraction of probes whose best-scoring gallery item (cosine similarity,
/// ties broken by lowest gallery index) shares their identity.
pub fn rank1(
    gallery: &[Vec<f64>],
    gallery_ids: &[u32],
    probes: &[Vec<f64>],
    probe_ids: &[u32],
) -> Result<f64, MetricsError> {
    assert_eq!(gallery.len(), gallery_ids.len(), "gallery features/ids length mismatch");
    assert_eq!(probes.len(), probe_ids.len(), "probe features/ids length mismatch");
    if gallery.is_empty() {
        return Err(MetricsError::EmptyInput("gallery"));
    }
    if probes.is_empty() {
        return Err(MetricsError::EmptyInput("probes"));
    }
    let dim = gallery[0].len();
    for f in gallery.iter().chain(probes.iter()) {
        if f.len() != dim {
            return Err(MetricsError::DimMismatch(dim, f.len()));
        }
    }
    for &id in probe_ids {
        if !gallery_ids.contains(&id) {
            return Err(MetricsError::ProbeIdentityMissing(id));
        }
    }
    let mut hits = 0usize;
    for (probe, &pid) in probes.iter().zip(probe_ids) {
        let mut best_idx = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (idx, item) in gallery.iter().enumerate() {
            let score = cosine(probe, item);
            if !score.is_finite() {
                return Err(MetricsError::NonFinite);
            }
            if score > best_score {
                best_score = score;
                best_idx = idx;
            }
        }
        if gallery_ids[best_idx] == pid {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Smallest threshold admitting at most k impostor scores (scores pass at
/// or above the threshold). Input must be sorted ascending. Candidates are
/// the impostor values themselves; when ties push every value over budget
/// (k = 0 included), the threshold steps just past the maximum impostor.
fn far_threshold(sorted_asc: &[f64], k: usize) -> f64 {
    let m = sorted_asc.len();
    // Index arithmetic: a threshold at sorted_asc[j] admits m − j scores,
    // provided j is the first occurrence of that value.
    let mut j = m.saturating_sub(k);
    while j < m {
        if j == 0 || sorted_asc[j] > sorted_asc[j - 1] {
            return sorted_asc[j];
        }
        j += 1;
    }
    sorted_asc[m - 1].next_up()
}

fn checked_sorted(scores: &[f64], name: &'static str) -> Result<Vec<f64>, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput(name));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

fn fraction_at_or_above(sorted_asc: &[f64], threshold: f64) -> f64 {
    let below = sorted_asc.partition_point(|&s| s < threshold);
    (sorted_asc.len() - below) as f64 / sorted_asc.len() as f64
}

/// Verification rate at a false accept rate: the fraction of genuine
/// scores at or above the deterministic impostor threshold for `far`.
pub fn vr_at_far(scores: &ScoreSet, far: f64) -> Result<f64, MetricsError> {
    assert!(far > 0.0 && far < 1.0, "far must lie in (0, 1)");
    let genuine = checked_sorted(&scores.genuine, "genuine scores")?;
    let impostors = checked_sorted(&scores.impostors, "impostor scores")?;
    let needed = (1.0 / far).ceil() as usize;
    if impostors.len() < needed {
        return Err(MetricsError::InsufficientImpostors {
            needed,
            got: impostors.len(),
            far,
        });
    }
    let k = (far * impostors.len() as f64).floor() as usize;
    let threshold = far_threshold(&impostors, k);
    Ok(fraction_at_or_above(&genuine, threshold))
}

/// (FAR, VR) pairs at `points` evenly spaced FAR targets ending at 1.0.
/// Reported FAR is the achieved impostor fraction, so both coordinates
/// are monotone non-decreasing.
pub fn roc_curve(scores: &ScoreSet, points: usize) -> Result<Vec<(f64, f64)>, MetricsError> {
    assert!(points > 0, "roc_curve needs at least one point");
    let genuine = checked_sorted(&scores.genuine, "genuine scores")?;
    let impostors = checked_sorted(&scores.impostors, "impostor scores")?;
    let m = impostors.len();
    let mut curve = Vec::with_capacity(points);
    for i in 1..=points {
        let target = i as f64 / points as f64;
        let threshold = if i == points {
            // FAR target 1: accept everything.
            f64::NEG_INFINITY
        } else {
            far_threshold(&impostors, (target * m as f64).floor() as usize)
        };
        let achieved_far = fraction_at_or_above(&impostors, threshold);
        let vr = fraction_at_or_above(&genuine, threshold);
        curve.push((achieved_far, vr));
    }
    Ok(curve)
}
