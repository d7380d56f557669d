//! Comparison systems: GMM-UBM log-likelihood ratio (UV1), left-to-right HMM
//! log-likelihood ratio (UV2), DTW template matching (UV3) and a z-norm
//! score fusion.

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::gmm::DiagonalGmm;
use crate::hmm::{self, PhraseHmm};
use crate::real::Real;

/// `avg_loglik(phrase_model) − avg_loglik(ubm)`.
pub fn uv1_score<T: Real>(phrase_model: &DiagonalGmm<T>, ubm: &DiagonalGmm<T>, features: &FeatureMatrix<T>) -> Result<T> {
    Ok(phrase_model.avg_loglik(features)? - ubm.avg_loglik(features)?)
}

/// Per-frame Viterbi path log-likelihood minus the UBM average
/// log-likelihood. Utterances too short to traverse every state score
/// `-∞`, a rejection.
pub fn uv2_score<T: Real>(phrase_hmm: &PhraseHmm<T>, ubm: &DiagonalGmm<T>, features: &FeatureMatrix<T>) -> Result<T> {
    let background = ubm.avg_loglik(features)?;
    match hmm::viterbi_align(phrase_hmm, features) {
        Ok(path) => Ok(path.log_likelihood() / T::of_usize(features.num_frames()) - background),
        Err(Error::AlignmentInfeasible { .. }) => Ok(T::neg_infinity()),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult<T> {
    /// Sum of Euclidean frame distances along the optimal path.
    pub cost: T,
    /// `(i, j)` cells from `(0, 0)` to `(T₁−1, T₂−1)`.
    pub path: Vec<(usize, usize)>,
}

impl<T: Real> DtwResult<T> {
    pub fn path_length(&self) -> usize {
        self.path.len()
    }

    pub fn normalized_cost(&self) -> T {
        self.cost / T::of_usize(self.path.len())
    }
}

fn euclidean<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Boundary-anchored DTW with steps (1,0), (0,1) and (1,1), no slope
/// weights. Among equal-cost predecessors the diagonal is preferred, then
/// (1,0).
pub fn dtw_distance<T: Real>(a: &FeatureMatrix<T>, b: &FeatureMatrix<T>) -> Result<DtwResult<T>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (n, m) = (a.num_frames(), b.num_frames());
    let inf = T::infinity();
    let mut acc = vec![inf; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = euclidean(a.frame(i), b.frame(j));
            let best = if i == 0 && j == 0 {
                T::zero()
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { inf };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { inf };
                let left = if j > 0 { acc[i * m + j - 1] } else { inf };
                diag.min(up).min(left)
            };
            acc[i * m + j] = best + d;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { inf };
        let up = if i > 0 { acc[(i - 1) * m + j] } else { inf };
        let left = if j > 0 { acc[i * m + j - 1] } else { inf };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        cost: acc[n * m - 1],
        path,
    })
}

/// Negated minimum normalized DTW cost over the enrollment templates.
pub fn uv3_score<T: Real>(enrollment: &[FeatureMatrix<T>], test: &FeatureMatrix<T>) -> Result<T> {
    if enrollment.is_empty() {
        return Err(Error::InsufficientData("no enrollment templates".into()));
    }
    let mut best = T::infinity();
    for e in enrollment {
        best = best.min(dtw_distance(e, test)?.normalized_cost());
    }
    Ok(-best)
}

/// Development-set score statistics for z-normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZNorm {
    pub mean: f64,
    pub std: f64,
}

impl ZNorm {
    /// Mean and population standard deviation of the finite scores.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        let finite: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::InsufficientData("no finite development scores".into()));
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let var = finite.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: if var > 0.0 { var.sqrt() } else { 1.0 },
        })
    }

    pub fn apply(&self, s: f64) -> f64 {
        (s - self.mean) / self.std
    }
}

/// Weighted sum of per-system z-normalized scores; equal weights by default.
pub fn fuse_scores(systems: &[Vec<f64>], norms: &[ZNorm], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let first = systems
        .first()
        .ok_or_else(|| Error::InvalidInput("no systems to fuse".into()))?;
    if norms.len() != systems.len() {
        return Err(Error::DimensionMismatch {
            expected: systems.len(),
            found: norms.len(),
        });
    }
    if let Some(s) = systems.iter().find(|s| s.len() != first.len()) {
        return Err(Error::DimensionMismatch {
            expected: first.len(),
            found: s.len(),
        });
    }
    let equal = vec![1.0 / systems.len() as f64; systems.len()];
    let weights = weights.unwrap_or(&equal);
    if weights.len() != systems.len() {
        return Err(Error::DimensionMismatch {
            expected: systems.len(),
            found: weights.len(),
        });
    }
    Ok((0..first.len())
        .map(|t| {
            systems
                .iter()
                .zip(norms)
                .zip(weights)
                .filter(|(_, &w)| w != 0.0)
                .map(|((s, z), &w)| w * z.apply(s[t]))
                .sum()
        })
        .collect())
}
