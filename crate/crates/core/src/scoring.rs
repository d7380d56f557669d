//! Phrase backends over i-vectors: the linear Gaussian classifier (class
//! means, one shared within-class covariance, posteriors under equal priors)
//! and cosine similarity against averaged enrollment vectors, with optional
//! max-normalization.

use std::collections::HashMap;
use std::path::Path;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Cholesky, Matrix};
use crate::real::{ln_2pi, Real};

pub const LGC_MAGIC: &[u8; 4] = b"PKLG";
pub const COSINE_MAGIC: &[u8; 4] = b"PKCS";

/// `ε` in the `ε·tr(Σ)/R·I` regularizer.
pub const COVARIANCE_EPSILON: f64 = 1e-6;

/// Shrinkage forced when there are fewer within-class degrees of freedom
/// than dimensions.
pub const FORCED_MIN_SHRINKAGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    MaxNorm,
    Posterior,
}

impl Normalization {
    /// Max-norm and posterior scores depend on competing classes.
    pub fn is_close_set(self) -> bool {
        self != Self::None
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::MaxNorm => "max-norm",
            Self::Posterior => "posterior",
        })
    }
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "max-norm" | "maxnorm" => Ok(Self::MaxNorm),
            "posterior" => Ok(Self::Posterior),
            other => Err(Error::InvalidConfig(format!(
                "unknown normalization '{other}' (none|max-norm|posterior)"
            ))),
        }
    }
}

/// Per-class scores for one test vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector<T> {
    pub scores: Vec<T>,
    pub normalization: Normalization,
}

impl<T: Real> ScoreVector<T> {
    pub fn new(scores: Vec<T>, normalization: Normalization) -> Self {
        Self { scores, normalization }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// `out_i = s_i − max_{j≠i} s_j`.
pub fn max_norm<T: Real>(scores: &ScoreVector<T>) -> Result<ScoreVector<T>> {
    let k = scores.len();
    if k < 2 {
        return Err(Error::TooFewClasses { needed: 2, found: k });
    }
    if scores.normalization != Normalization::None {
        return Err(Error::InvalidInput(format!(
            "max-norm expects raw scores, got {}",
            scores.normalization
        )));
    }
    // Best and second best give the competitor maximum for every class.
    let mut best = 0;
    for i in 1..k {
        if scores.scores[i] > scores.scores[best] {
            best = i;
        }
    }
    let second = (0..k)
        .filter(|&i| i != best)
        .map(|i| scores.scores[i])
        .fold(T::neg_infinity(), T::max);
    let out = scores
        .scores
        .iter()
        .enumerate()
        .map(|(i, &s)| s - if i == best { second } else { scores.scores[best] })
        .collect();
    Ok(ScoreVector::new(out, Normalization::MaxNorm))
}

/// Index of the highest score; ties go to the lowest index.
pub fn classify<T: Real>(scores: &ScoreVector<T>) -> usize {
    let mut best = 0;
    for (i, &s) in scores.scores.iter().enumerate().skip(1) {
        if s > scores.scores[best] {
            best = i;
        }
    }
    best
}

/// Class labels in first-appearance order, per-class means and counts.
pub fn class_means<T: Real, S: AsRef<str>>(samples: &[(S, Vec<T>)]) -> Result<(Vec<String>, Matrix<T>, Vec<usize>)> {
    let r = samples
        .first()
        .ok_or_else(|| Error::InsufficientData("no enrollment vectors".into()))?
        .1
        .len();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut sums: Vec<Vec<T>> = Vec::new();
    let mut counts = Vec::new();
    for (label, w) in samples {
        if w.len() != r {
            return Err(Error::DimensionMismatch { expected: r, found: w.len() });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite i-vector".into()));
        }
        let i = *index.entry(label.as_ref()).or_insert_with(|| {
            labels.push(label.as_ref().to_string());
            sums.push(vec![T::zero(); r]);
            counts.push(0);
            labels.len() - 1
        });
        sums[i].iter_mut().zip(w).for_each(|(s, &x)| *s += x);
        counts[i] += 1;
    }
    let mut means = Matrix::zeros(labels.len(), r);
    for (i, s) in sums.iter().enumerate() {
        let n = T::of_usize(counts[i]);
        for (m, &v) in means.row_mut(i).iter_mut().zip(s) {
            *m = v / n;
        }
    }
    Ok((labels, means, counts))
}

/// Class means and the shared, regularized within-class covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct WithinClassEstimate<T> {
    pub labels: Vec<String>,
    pub means: Matrix<T>,
    pub counts: Vec<usize>,
    pub covariance: Matrix<T>,
    /// Shrinkage actually applied, after any forced minimum.
    pub shrinkage: f64,
}

/// Class means and `Σ = 1/N Σ_i Σ_n (w − m_i)(w − m_i)ᵀ`, regularized as
/// `(1−λ)Σ + λ·diag(Σ) + ε·tr(Σ)/R·I`. When every sample is its class mean
/// the regularizer falls back to `ε·I`.
pub fn estimate_within_class_cov<T: Real, S: AsRef<str>>(
    samples: &[(S, Vec<T>)],
    shrinkage: f64,
) -> Result<WithinClassEstimate<T>> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::InvalidConfig(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    let (labels, means, counts) = class_means(samples)?;
    let k = labels.len();
    if k < 2 {
        return Err(Error::TooFewClasses { needed: 2, found: k });
    }
    let r = means.cols();
    let n = samples.len();
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut sigma = Matrix::zeros(r, r);
    let mut d = vec![T::zero(); r];
    for (label, w) in samples {
        let m = means.row(index[label.as_ref()]);
        for j in 0..r {
            d[j] = w[j] - m[j];
        }
        sigma.add_outer(&d, &d, T::one());
    }
    sigma.scale(T::one() / T::of_usize(n));

    let mut lambda = shrinkage;
    if n - k < r && lambda < FORCED_MIN_SHRINKAGE {
        log::warn!(
            "within-class covariance from {n} vectors of {k} classes is rank deficient in {r} dimensions; \
             forcing shrinkage {FORCED_MIN_SHRINKAGE}"
        );
        lambda = FORCED_MIN_SHRINKAGE;
    }
    let covariance = regularize(&sigma, lambda);
    Ok(WithinClassEstimate {
        labels,
        means,
        counts,
        covariance,
        shrinkage: lambda,
    })
}

fn regularize<T: Real>(sigma: &Matrix<T>, lambda: f64) -> Matrix<T> {
    let r = sigma.rows();
    let l = T::of(lambda);
    let mut out = sigma.clone();
    for i in 0..r {
        for j in 0..r {
            if i != j {
                out[(i, j)] = (T::one() - l) * sigma[(i, j)];
            }
        }
    }
    let tr = sigma.trace();
    let eps = T::of(COVARIANCE_EPSILON);
    let ridge = if tr > T::zero() { eps * tr / T::of_usize(r) } else { eps };
    for i in 0..r {
        out[(i, i)] += ridge;
    }
    out
}

/// Linear Gaussian classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LgcModel<T> {
    labels: Vec<String>,
    means: Matrix<T>,
    covariance: Matrix<T>,
    priors: Vec<T>,
    chol: Cholesky<T>,
}

impl<T: Real> LgcModel<T> {
    /// `priors` default to uniform; they are renormalized to sum to one.
    pub fn new(labels: Vec<String>, means: Matrix<T>, covariance: Matrix<T>, priors: Option<Vec<T>>) -> Result<Self> {
        let (k, r) = (means.rows(), means.cols());
        if labels.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: labels.len() });
        }
        if covariance.rows() != r || covariance.cols() != r {
            return Err(Error::DimensionMismatch { expected: r, found: covariance.rows() });
        }
        if !means.is_finite() || !covariance.is_finite() {
            return Err(Error::InvalidInput("LGC parameters must be finite".into()));
        }
        if covariance.max_asymmetry() > T::of(1e-10) {
            return Err(Error::InvalidInput("within-class covariance is not symmetric".into()));
        }
        let priors = match priors {
            Some(p) => {
                if p.len() != k || p.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
                    return Err(Error::InvalidInput("priors must be K positive values".into()));
                }
                let s: T = p.iter().copied().sum();
                p.into_iter().map(|v| v / s).collect()
            }
            None => vec![T::one() / T::of_usize(k.max(1)); k],
        };
        let chol = Cholesky::new(&covariance)?;
        Ok(Self {
            labels,
            means,
            covariance,
            priors,
            chol,
        })
    }

    /// Means and covariance from the same labelled vectors.
    pub fn train<S: AsRef<str>>(samples: &[(S, Vec<T>)], shrinkage: f64) -> Result<Self> {
        let e = estimate_within_class_cov(samples, shrinkage)?;
        Self::new(e.labels, e.means, e.covariance, None)
    }

    /// Means from `samples`, covariance supplied from elsewhere.
    pub fn with_covariance<S: AsRef<str>>(samples: &[(S, Vec<T>)], covariance: Matrix<T>) -> Result<Self> {
        let (labels, means, _) = class_means(samples)?;
        Self::new(labels, means, covariance, None)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn means(&self) -> &Matrix<T> {
        &self.means
    }

    pub fn covariance(&self) -> &Matrix<T> {
        &self.covariance
    }

    pub fn priors(&self) -> &[T] {
        &self.priors
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// `ln N(w | m_i, Σ) + ln P(i)` per class.
    pub fn log_joint(&self, w: &[T]) -> Result<Vec<T>> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: w.len() });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite i-vector".into()));
        }
        let chol = &self.chol;
        let half = T::of(0.5);
        let base = -half * (T::of_usize(self.dim()) * ln_2pi::<T>() + chol.log_det());
        let mut d = vec![T::zero(); self.dim()];
        Ok((0..self.num_classes())
            .map(|i| {
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj = w[j] - self.means[(i, j)];
                }
                base - half * chol.quad_form_inv(&d) + self.priors[i].ln()
            })
            .collect())
    }

    /// Class posteriors `P(i | w)`.
    pub fn posteriors(&self, w: &[T]) -> Result<ScoreVector<T>> {
        lgc_posteriors(self, w)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(LGC_MAGIC);
        w.len_u32(self.num_classes())?;
        w.len_u32(self.dim())?;
        for l in &self.labels {
            w.string(l)?;
        }
        w.f64s(self.priors.iter().map(|v| v.f64()));
        w.f64s(self.means.as_slice().iter().map(|v| v.f64()));
        w.f64s(self.covariance.as_slice().iter().map(|v| v.f64()));
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, LGC_MAGIC, "PKLG")?;
        let k = r.usize()?;
        let dim = r.usize()?;
        let labels = (0..k).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
        let priors = cast(r.f64s(k)?);
        let means = Matrix::from_vec(k, dim, cast(r.f64s(k * dim)?))?;
        let cov = Matrix::from_vec(dim, dim, cast(r.f64s(dim * dim)?))?;
        r.finish()?;
        let mut m = Self::new(labels, means, cov, None)?;
        // Stored priors are already normalized; keep them bit-exact.
        m.priors = priors;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Posteriors from log densities, shifted by their maximum before
/// exponentiating. Dividing by the sum (rather than subtracting a log-sum-exp)
/// keeps the total at one even when the log densities are large.
pub fn lgc_posteriors<T: Real>(model: &LgcModel<T>, w: &[T]) -> Result<ScoreVector<T>> {
    if model.num_classes() < 2 {
        return Err(Error::TooFewClasses { needed: 2, found: model.num_classes() });
    }
    let lj = model.log_joint(w)?;
    let top = lj.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = lj.into_iter().map(|v| (v - top).exp()).collect();
    let z: T = e.iter().copied().sum();
    Ok(ScoreVector::new(e.into_iter().map(|v| v / z).collect(), Normalization::Posterior))
}

/// Cosine backend: one averaged enrollment vector per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineModel<T> {
    labels: Vec<String>,
    means: Matrix<T>,
}

impl<T: Real> CosineModel<T> {
    pub fn new(labels: Vec<String>, means: Matrix<T>) -> Result<Self> {
        if labels.len() != means.rows() {
            return Err(Error::DimensionMismatch { expected: means.rows(), found: labels.len() });
        }
        if let Some(i) = (0..means.rows()).find(|&i| norm(means.row(i)) == T::zero()) {
            return Err(Error::ZeroVector(format!("mean of class '{}'", labels[i])));
        }
        if !means.is_finite() {
            return Err(Error::InvalidInput("class means must be finite".into()));
        }
        Ok(Self { labels, means })
    }

    pub fn enroll<S: AsRef<str>>(samples: &[(S, Vec<T>)]) -> Result<Self> {
        let (labels, means, _) = class_means(samples)?;
        Self::new(labels, means)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn means(&self) -> &Matrix<T> {
        &self.means
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn scores(&self, w: &[T]) -> Result<ScoreVector<T>> {
        cosine_scores(self, w)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(COSINE_MAGIC);
        w.len_u32(self.num_classes())?;
        w.len_u32(self.dim())?;
        for l in &self.labels {
            w.string(l)?;
        }
        w.f64s(self.means.as_slice().iter().map(|v| v.f64()));
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, COSINE_MAGIC, "PKCS")?;
        let k = r.usize()?;
        let dim = r.usize()?;
        let labels = (0..k).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let means = r.f64s(k * dim)?;
        r.finish()?;
        Self::new(labels, Matrix::from_vec(k, dim, means.into_iter().map(T::of).collect())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// `⟨w, m_i⟩ / (‖w‖‖m_i‖)` per class.
pub fn cosine_scores<T: Real>(model: &CosineModel<T>, w: &[T]) -> Result<ScoreVector<T>> {
    if w.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), found: w.len() });
    }
    let nw = norm(w);
    if nw == T::zero() {
        return Err(Error::ZeroVector("test i-vector".into()));
    }
    if !nw.is_finite() {
        return Err(Error::InvalidInput("non-finite i-vector".into()));
    }
    let scores = (0..model.num_classes())
        .map(|i| {
            let m = model.means.row(i);
            let s = dot(w, m) / (nw * norm(m));
            s.max(-T::one()).min(T::one())
        })
        .collect();
    Ok(ScoreVector::new(scores, Normalization::None))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(v: &[f64]) -> ScoreVector<f64> {
        ScoreVector::new(v.to_vec(), Normalization::None)
    }

    #[test]
    fn max_norm_examples() {
        let out = max_norm(&sv(&[0.9, 0.5, 0.3])).unwrap();
        let expect = [0.4, -0.4, -0.6];
        for (a, b) in out.scores.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(max_norm(&sv(&[0.2; 4])).unwrap().scores, vec![0.0; 4]);
        assert!(matches!(max_norm(&sv(&[1.0])), Err(Error::TooFewClasses { .. })));
        assert!(max_norm(&out).is_err());
    }

    #[test]
    fn classify_ties_go_low() {
        assert_eq!(classify(&sv(&[0.1, 0.9])), 1);
        assert_eq!(classify(&sv(&[0.5, 0.5])), 0);
    }

    fn two_class() -> LgcModel<f64> {
        let means = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        LgcModel::new(vec!["a".into(), "b".into()], means, Matrix::identity(2), None).unwrap()
    }

    #[test]
    fn lgc_examples() {
        let m = two_class();
        let p = m.posteriors(&[1.0, 0.0]).unwrap();
        assert!((p.scores[0] - 0.5).abs() < 1e-12);
        let p = m.posteriors(&[0.0, 0.0]).unwrap();
        assert!((p.scores[0] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
        assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.normalization, Normalization::Posterior);
        assert!(m.posteriors(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn priors_are_scale_invariant() {
        let means = Matrix::<f64>::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let cov = Matrix::identity(1);
        let a = LgcModel::new(labels.clone(), means.clone(), cov.clone(), Some(vec![1.0, 2.0, 3.0])).unwrap();
        let b = LgcModel::new(labels, means, cov, Some(vec![10.0, 20.0, 30.0])).unwrap();
        let (pa, pb) = (a.posteriors(&[0.7]).unwrap(), b.posteriors(&[0.7]).unwrap());
        for (x, y) in pa.scores.iter().zip(&pb.scores) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn covariance_by_direct_summation() {
        let samples = vec![
            ("a", vec![1.0, 1.0]),
            ("a", vec![-1.0, -1.0]),
            ("b", vec![5.0, 4.0]),
            ("b", vec![3.0, 6.0]),
            ("a", vec![0.5, -0.5]),
            ("a", vec![-0.5, 0.5]),
            ("b", vec![4.0, 5.0]),
        ];
        let e = estimate_within_class_cov(&samples, 0.0).unwrap();
        assert_eq!(e.labels, vec!["a", "b"]);
        assert_eq!(e.means.row(1), &[4.0, 5.0]);
        let mut direct = [[0.0_f64; 2]; 2];
        for (l, w) in &samples {
            let m = if *l == "a" { [0.0, 0.0] } else { [4.0, 5.0] };
            for i in 0..2 {
                for j in 0..2 {
                    direct[i][j] += (w[i] - m[i]) * (w[j] - m[j]) / 7.0;
                }
            }
        }
        let tr = direct[0][0] + direct[1][1];
        for i in 0..2 {
            for j in 0..2 {
                let reg = if i == j { 1e-6 * tr / 2.0 } else { 0.0 };
                assert!((e.covariance[(i, j)] - direct[i][j] - reg).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_sample_classes_give_epsilon_identity() {
        let samples = vec![("a", vec![1.0, 2.0]), ("b", vec![3.0, -1.0])];
        let e = estimate_within_class_cov(&samples, 0.0).unwrap();
        assert_eq!(e.covariance, Matrix::diagonal(&[1e-6, 1e-6]));
        assert_eq!(e.shrinkage, FORCED_MIN_SHRINKAGE);
    }

    #[test]
    fn full_shrinkage_is_diagonal() {
        let samples = vec![("a", vec![1.0, 2.0]), ("a", vec![2.0, 3.5]), ("b", vec![0.0, 0.0]), ("b", vec![1.0, -1.0])];
        let e = estimate_within_class_cov(&samples, 1.0).unwrap();
        assert_eq!(e.covariance[(0, 1)], 0.0);
        assert_eq!(e.covariance[(1, 0)], 0.0);
        assert!(estimate_within_class_cov(&samples[..2], 0.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        let m = CosineModel::new(vec!["x".into()], Matrix::from_rows(&[vec![4.0, 5.0, 6.0]]).unwrap()).unwrap();
        let s = m.scores(&[1.0, 2.0, 3.0]).unwrap();
        assert!((s.scores[0] - 32.0 / (14f64.sqrt() * 77f64.sqrt())).abs() < 1e-12);
        assert!((m.scores(&[4.0, 5.0, 6.0]).unwrap().scores[0] - 1.0).abs() < 1e-12);
        assert!(m.scores(&[5.0, -4.0, 0.0]).unwrap().scores[0].abs() < 1e-12);
        assert!(matches!(m.scores(&[0.0; 3]), Err(Error::ZeroVector(_))));
        assert!(matches!(CosineModel::enroll(&[("z", vec![0.0, 0.0])]), Err(Error::ZeroVector(_))));
    }

    #[test]
    fn round_trips_are_bit_exact() {
        let samples = vec![("a", vec![1.0, 2.0]), ("a", vec![2.0, 3.5]), ("b", vec![0.1, 0.0]), ("b", vec![1.0, -1.0])];
        let l = LgcModel::train(&samples, 0.3).unwrap();
        assert_eq!(LgcModel::decode(&l.encode().unwrap()).unwrap(), l);
        let c = CosineModel::enroll(&samples).unwrap();
        assert_eq!(CosineModel::decode(&c.encode().unwrap()).unwrap(), c);
        assert!(matches!(CosineModel::<f64>::decode(&l.encode().unwrap()), Err(Error::BadMagic { .. })));
    }
}
