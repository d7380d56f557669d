//! Baum-Welch statistics, total-variability training and i-vector
//! extraction.
//!
//! For an utterance with zeroth-order counts `N_c` and centered first-order
//! sums `F_c`, the latent `w` has a Gaussian posterior with precision
//! `L = I + Σ_c N_c T_cᵀ Σ_c⁻¹ T_c` and mean `L⁻¹ Σ_c T_cᵀ Σ_c⁻¹ F_c`. The
//! i-vector is that mean.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::gmm::DiagonalGmm;
use crate::hmm::{self, MonophoneSet, PhraseHmm};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::real::Real;
use crate::rng;

pub const STATS_MAGIC: &[u8; 4] = b"PKST";
pub const TV_MAGIC: &[u8; 4] = b"PKTV";
pub const IVECTOR_MAGIC: &[u8; 4] = b"PKIV";

pub const DEFAULT_TV_RANK: usize = 50;
pub const DEFAULT_TV_ITERS: usize = 10;

/// Ridge added to singular M-step normal equations.
pub const SINGULAR_RIDGE: f64 = 1e-8;

/// Zeroth-order counts and first-order sums centered on component means.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats<T> {
    zeroth: Vec<T>,
    /// `C × F`, row-major.
    first: Vec<T>,
    dim: usize,
}

impl<T: Real> SufficientStats<T> {
    pub fn new(zeroth: Vec<T>, first: Vec<T>, dim: usize) -> Result<Self> {
        if zeroth.is_empty() || dim == 0 {
            return Err(Error::InvalidInput("statistics need components and dimensions".into()));
        }
        if first.len() != zeroth.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: zeroth.len() * dim,
                found: first.len(),
            });
        }
        if zeroth.iter().any(|n| !(*n >= T::zero()) || !n.is_finite()) || first.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidInput("statistics must be finite with non-negative counts".into()));
        }
        Ok(Self { zeroth, first, dim })
    }

    pub fn zeros(num_components: usize, dim: usize) -> Self {
        Self {
            zeroth: vec![T::zero(); num_components],
            first: vec![T::zero(); num_components * dim],
            dim,
        }
    }

    pub fn num_components(&self) -> usize {
        self.zeroth.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn zeroth(&self) -> &[T] {
        &self.zeroth
    }

    pub fn first(&self) -> &[T] {
        &self.first
    }

    pub fn first_of(&self, c: usize) -> &[T] {
        &self.first[c * self.dim..(c + 1) * self.dim]
    }

    /// `Σ_c N_c`.
    pub fn total_count(&self) -> T {
        self.zeroth.iter().copied().sum()
    }

    fn add_frame(&mut self, c: usize, gamma: T, x: &[T], mean: &[T]) {
        self.zeroth[c] += gamma;
        let row = &mut self.first[c * self.dim..(c + 1) * self.dim];
        for j in 0..x.len() {
            row[j] += gamma * (x[j] - mean[j]);
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(STATS_MAGIC);
        w.len_u32(self.num_components())?;
        w.len_u32(self.dim)?;
        w.f64s(self.zeroth.iter().map(|v| v.f64()));
        w.f64s(self.first.iter().map(|v| v.f64()));
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, STATS_MAGIC, "PKST")?;
        let c = r.usize()?;
        let f = r.usize()?;
        let zeroth = r.f64s(c)?;
        let first = r.f64s(c * f)?;
        r.finish()?;
        Self::new(
            zeroth.into_iter().map(T::of).collect(),
            first.into_iter().map(T::of).collect(),
            f,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Statistics under UBM frame posteriors.
pub fn collect_stats_gmm<T: Real>(ubm: &DiagonalGmm<T>, features: &FeatureMatrix<T>) -> Result<SufficientStats<T>> {
    let post = ubm.frame_posteriors(features)?;
    let mut stats = SufficientStats::zeros(ubm.num_components(), ubm.dim());
    for (x, row) in features.frames().zip(post.rows()) {
        for (c, &g) in row.iter().enumerate() {
            if g > T::zero() {
                stats.add_frame(c, g, x, ubm.mean(c));
            }
        }
    }
    Ok(stats)
}

/// Statistics under Viterbi alignment to `phrase`. Each frame is shared
/// among the components of its aligned state by their posteriors within
/// that state, and accumulated at the components' global inventory indices.
pub fn collect_stats_hmm<T: Real>(
    mono: &MonophoneSet<T>,
    phrase: &PhraseHmm<T>,
    features: &FeatureMatrix<T>,
) -> Result<SufficientStats<T>> {
    if phrase.num_components() != mono.num_components() {
        return Err(Error::LayoutMismatch(format!(
            "phrase HMM indexes {} components, inventory has {}",
            phrase.num_components(),
            mono.num_components()
        )));
    }
    let path = hmm::viterbi_align(phrase, features)?;
    collect_stats_aligned(phrase, features, &path)
}

/// Statistics for a precomputed alignment.
pub fn collect_stats_aligned<T: Real>(
    phrase: &PhraseHmm<T>,
    features: &FeatureMatrix<T>,
    path: &hmm::AlignmentPath<T>,
) -> Result<SufficientStats<T>> {
    let post = path.within_state_posteriors(phrase, features)?;
    let mut stats = SufficientStats::zeros(phrase.num_components(), phrase.dim());
    for ((x, row), &s) in features.frames().zip(&post).zip(path.states()) {
        let st = &phrase.states()[s];
        for (k, &g) in row.iter().enumerate() {
            if g > T::zero() {
                stats.add_frame(st.component_ids[k], g, x, st.gmm.mean(k));
            }
        }
    }
    Ok(stats)
}

/// Total-variability subspace `T` (`C·F × R`) with the fixed diagonal
/// covariances `Σ_c` it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalVariabilityModel<T> {
    t: Matrix<T>,
    variances: Vec<T>,
    num_components: usize,
    dim: usize,
    /// `T_cᵀ Σ_c⁻¹ T_c` per component.
    precision_terms: Vec<Matrix<T>>,
}

impl<T: Real> TotalVariabilityModel<T> {
    pub fn new(t: Matrix<T>, variances: Vec<T>, num_components: usize) -> Result<Self> {
        if num_components == 0 || t.cols() == 0 {
            return Err(Error::InvalidInput("TV model needs components and rank ≥ 1".into()));
        }
        if t.rows() % num_components != 0 || t.rows() == 0 {
            return Err(Error::DimensionMismatch {
                expected: num_components,
                found: t.rows(),
            });
        }
        if variances.len() != t.rows() {
            return Err(Error::DimensionMismatch {
                expected: t.rows(),
                found: variances.len(),
            });
        }
        if !t.is_finite() || variances.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidInput("TV matrix must be finite and variances positive".into()));
        }
        let dim = t.rows() / num_components;
        let mut m = Self {
            t,
            variances,
            num_components,
            dim,
            precision_terms: Vec::new(),
        };
        m.precision_terms = (0..num_components)
            .into_par_iter()
            .map(|c| m.precision_term(c))
            .collect();
        Ok(m)
    }

    pub fn rank(&self) -> usize {
        self.t.cols()
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.t
    }

    pub fn variances(&self) -> &[T] {
        &self.variances
    }

    fn precision_term(&self, c: usize) -> Matrix<T> {
        let r = self.rank();
        let mut p = Matrix::zeros(r, r);
        for j in 0..self.dim {
            let row = c * self.dim + j;
            p.add_outer(self.t.row(row), self.t.row(row), T::one() / self.variances[row]);
        }
        p
    }

    fn check_layout(&self, stats: &SufficientStats<T>) -> Result<()> {
        if stats.num_components() != self.num_components || stats.dim() != self.dim {
            return Err(Error::LayoutMismatch(format!(
                "stats are {}×{}, model expects {}×{}",
                stats.num_components(),
                stats.dim(),
                self.num_components,
                self.dim
            )));
        }
        Ok(())
    }

    /// Posterior precision `L` of `w`.
    pub fn posterior_precision(&self, stats: &SufficientStats<T>) -> Result<Matrix<T>> {
        self.check_layout(stats)?;
        let mut l = Matrix::identity(self.rank());
        for (c, &n) in stats.zeroth().iter().enumerate() {
            if n > T::zero() {
                l.add_scaled(&self.precision_terms[c], n);
            }
        }
        Ok(l)
    }

    /// `Σ_c T_cᵀ Σ_c⁻¹ F_c`.
    pub fn projected_first_order(&self, stats: &SufficientStats<T>) -> Result<Vec<T>> {
        self.check_layout(stats)?;
        let mut b = vec![T::zero(); self.rank()];
        for c in 0..self.num_components {
            if stats.zeroth()[c] == T::zero() && stats.first_of(c).iter().all(|&f| f == T::zero()) {
                continue;
            }
            for (j, &f) in stats.first_of(c).iter().enumerate() {
                let row = c * self.dim + j;
                let s = f / self.variances[row];
                for (bi, &ti) in b.iter_mut().zip(self.t.row(row)) {
                    *bi += ti * s;
                }
            }
        }
        Ok(b)
    }

    /// Posterior of `w`: Cholesky factor of `L`, the mean and `b`.
    fn posterior(&self, stats: &SufficientStats<T>) -> Result<(Cholesky<T>, Vec<T>, Vec<T>)> {
        let l = self.posterior_precision(stats)?;
        let b = self.projected_first_order(stats)?;
        let chol = Cholesky::new(&l)?;
        let w = chol.solve(&b);
        Ok((chol, w, b))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(TV_MAGIC);
        w.len_u32(self.num_components)?;
        w.len_u32(self.dim)?;
        w.len_u32(self.rank())?;
        w.f64s(self.t.as_slice().iter().map(|v| v.f64()));
        Ok(w.into_bytes())
    }

    /// The file holds only `T`; `variances` (`C × F`) must be the ones the
    /// model was trained with.
    pub fn decode(bytes: &[u8], variances: &[T]) -> Result<Self> {
        let mut r = Reader::new(bytes, TV_MAGIC, "PKTV")?;
        let c = r.usize()?;
        let f = r.usize()?;
        let rank = r.usize()?;
        let t = r.f64s(c * f * rank)?;
        r.finish()?;
        let t = Matrix::from_vec(c * f, rank, t.into_iter().map(T::of).collect())?;
        Self::new(t, variances.to_vec(), c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path, variances: &[T]) -> Result<Self> {
        Self::decode(&read_file(path)?, variances)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentKind {
    Gmm,
    Hmm,
}

impl std::fmt::Display for AlignmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gmm => "gmm",
            Self::Hmm => "hmm",
        })
    }
}

impl std::str::FromStr for AlignmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(Self::Gmm),
            "hmm" => Ok(Self::Hmm),
            other => Err(Error::InvalidConfig(format!("unknown alignment '{other}' (gmm|hmm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVector<T> {
    pub w: Vec<T>,
    pub alignment: AlignmentKind,
    /// Free-form description of the features, e.g. `mfcc`.
    pub features: String,
}

impl<T: Real> IVector<T> {
    pub fn new(w: Vec<T>, alignment: AlignmentKind, features: impl Into<String>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("i-vector must be non-empty and finite".into()));
        }
        Ok(Self {
            w,
            alignment,
            features: features.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// Copy scaled to unit Euclidean length. Zero vectors are returned as is.
    pub fn length_normalized(&self) -> Self {
        let n = crate::linalg::norm(&self.w);
        let mut out = self.clone();
        if n > T::zero() {
            out.w.iter_mut().for_each(|v| *v /= n);
        }
        out
    }
}

/// Posterior mean of `w`.
pub fn extract_ivector<T: Real>(tv: &TotalVariabilityModel<T>, stats: &SufficientStats<T>) -> Result<Vec<T>> {
    Ok(tv.posterior(stats)?.1)
}

#[derive(Debug, Clone)]
pub struct TvTraining<T> {
    pub model: TotalVariabilityModel<T>,
    /// `Σ_u ½ bᵀL⁻¹b − ½ ln|L|` before each M-step and for the final model.
    pub objective: Vec<f64>,
    /// Components whose normal equations needed the ridge.
    pub ridged: usize,
}

/// Random initial `T`: standard normal entries scaled by `0.1·√(mean Σ)`.
pub fn initial_tv_matrix<T: Real>(variances: &[T], rows: usize, rank: usize, seed: u64) -> Matrix<T> {
    let mean_var = variances.iter().map(|v| v.f64()).sum::<f64>() / variances.len().max(1) as f64;
    let scale = 0.1 * mean_var.sqrt();
    let mut r = rng::stream(seed, "tv-init", 0);
    let data = (0..rows * rank)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            T::of(z * scale)
        })
        .collect();
    Matrix::from_vec(rows, rank, data).expect("sizes match")
}

/// Total-variability EM. `variances` are the `C × F` diagonal covariances
/// (usually the UBM's) and are not re-estimated.
pub fn train_tv<T: Real>(
    stats: &[SufficientStats<T>],
    variances: &[T],
    rank: usize,
    iters: usize,
    seed: u64,
) -> Result<TvTraining<T>> {
    let first = stats
        .first()
        .ok_or_else(|| Error::InsufficientData("no statistics for TV training".into()))?;
    let (c, f) = (first.num_components(), first.dim());
    if rank == 0 {
        return Err(Error::InvalidConfig("TV rank must be at least 1".into()));
    }
    if stats.len() < rank {
        return Err(Error::InsufficientData(format!(
            "{} utterances for rank {rank}",
            stats.len()
        )));
    }
    if let Some(s) = stats.iter().find(|s| s.num_components() != c || s.dim() != f) {
        return Err(Error::LayoutMismatch(format!(
            "stats {}×{} mixed with {c}×{f}",
            s.num_components(),
            s.dim()
        )));
    }
    let t = initial_tv_matrix(variances, c * f, rank, seed);
    let mut model = TotalVariabilityModel::new(t, variances.to_vec(), c)?;
    let mut objective = Vec::with_capacity(iters + 1);
    let mut ridged = 0;
    for it in 0..=iters {
        // E-step: posterior mean and second moment per utterance.
        let posts: Vec<(Vec<T>, Matrix<T>, f64)> = stats
            .par_iter()
            .map(|s| {
                let (chol, w, b) = model.posterior(s)?;
                let mut e = chol.inverse();
                e.add_outer(&w, &w, T::one());
                let obj = 0.5 * dot(&b, &w).f64() - 0.5 * chol.log_det().f64();
                Ok((w, e, obj))
            })
            .collect::<Result<_>>()?;
        let total: f64 = posts.iter().map(|p| p.2).sum();
        log::debug!("TV iteration {it}: objective {total}");
        objective.push(total);
        if it == iters {
            break;
        }
        // M-step per component: T_c = (Σ_u F_c wᵀ)(Σ_u N_c E[wwᵀ])⁻¹.
        let blocks: Vec<(Option<Matrix<T>>, bool)> = (0..c)
            .into_par_iter()
            .map(|comp| {
                let mut a = Matrix::zeros(rank, rank);
                let mut cc = Matrix::zeros(rank, f);
                let mut occupied = false;
                for (s, (w, e, _)) in stats.iter().zip(&posts) {
                    let n = s.zeroth()[comp];
                    if n > T::zero() {
                        occupied = true;
                        a.add_scaled(e, n);
                    }
                    let fc = s.first_of(comp);
                    if fc.iter().any(|&v| v != T::zero()) {
                        cc.add_outer(w, fc, T::one());
                    }
                }
                if !occupied {
                    return Ok((None, false));
                }
                // A is symmetric, so T_cᵀ = A⁻¹ Cᵀ with Cᵀ stored as `cc`.
                let (x, ridge) = crate::linalg::solve_spd_with_ridge(&a, &cc, T::of(SINGULAR_RIDGE))?;
                Ok((Some(x), ridge))
            })
            .collect::<Result<_>>()?;
        let mut t = model.t.clone();
        for (comp, (block, ridge)) in blocks.into_iter().enumerate() {
            if ridge {
                ridged += 1;
                log::warn!("TV M-step: singular normal equations for component {comp}; added ridge");
            }
            if let Some(x) = block {
                for j in 0..f {
                    let row = t.row_mut(comp * f + j);
                    for (k, v) in row.iter_mut().enumerate() {
                        *v = x[(k, j)];
                    }
                }
            }
        }
        model = TotalVariabilityModel::new(t, variances.to_vec(), c)?;
    }
    Ok(TvTraining {
        model,
        objective,
        ridged,
    })
}

/// Utterance-id keyed i-vectors of one rank, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IVectorArchive<T> {
    rank: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<T>>,
}

impl<T: Real> IVectorArchive<T> {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: impl Into<String>, w: Vec<T>) -> Result<()> {
        if w.len() != self.rank {
            return Err(Error::DimensionMismatch {
                expected: self.rank,
                found: w.len(),
            });
        }
        self.ids.push(id.into());
        self.vectors.push(w);
        Ok(())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> + '_ {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    pub fn get(&self, id: &str) -> Option<&[T]> {
        self.ids.iter().position(|i| i == id).map(|p| self.vectors[p].as_slice())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(IVECTOR_MAGIC);
        w.len_u32(self.rank)?;
        w.len_u32(self.ids.len())?;
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            w.string(id)?;
            w.f64s(v.iter().map(|x| x.f64()));
        }
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, IVECTOR_MAGIC, "PKIV")?;
        let rank = r.usize()?;
        let n = r.usize()?;
        let mut out = Self::new(rank);
        for _ in 0..n {
            let id = r.string()?;
            let v = r.f64s(rank)?;
            out.push(id, v.into_iter().map(T::of).collect())?;
        }
        r.finish()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::HmmState;
    use rand::Rng as _;
    use rand_distr::Normal;

    fn feats(rows: Vec<Vec<f64>>) -> FeatureMatrix<f64> {
        FeatureMatrix::from_rows(&rows, 0.01).unwrap()
    }

    fn random_model(seed: u64, c: usize, f: usize, r: usize) -> TotalVariabilityModel<f64> {
        let mut g = rng::stream(seed, "tv-test", 0);
        let t = Matrix::from_vec(c * f, r, (0..c * f * r).map(|_| g.gen_range(-1.0..1.0)).collect()).unwrap();
        let v = (0..c * f).map(|_| g.gen_range(0.5..2.0)).collect();
        TotalVariabilityModel::new(t, v, c).unwrap()
    }

    fn random_stats(seed: u64, c: usize, f: usize) -> SufficientStats<f64> {
        let mut g = rng::stream(seed, "stats-test", 0);
        let n = (0..c).map(|_| g.gen_range(0.0..20.0)).collect();
        let first = (0..c * f).map(|_| g.gen_range(-5.0..5.0)).collect();
        SufficientStats::new(n, first, f).unwrap()
    }

    #[test]
    fn single_component_stats() {
        let ubm = DiagonalGmm::single(vec![1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let f = feats(vec![vec![2.0, 0.0], vec![0.5, -3.0], vec![1.0, 1.0]]);
        let s = collect_stats_gmm(&ubm, &f).unwrap();
        assert_eq!(s.zeroth(), &[3.0]);
        assert!((s.first()[0] - 0.5).abs() < 1e-12);
        assert!((s.first()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frames_at_separated_means_have_zero_first_order() {
        let ubm = DiagonalGmm::new(vec![0.5, 0.5], vec![-100.0, 100.0], vec![1.0, 1.0]).unwrap();
        let f = feats(vec![vec![-100.0], vec![100.0], vec![100.0]]);
        let s = collect_stats_gmm(&ubm, &f).unwrap();
        assert!(s.first().iter().all(|v| v.abs() < 1e-9));
        assert!((s.zeroth()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gmm_stats_match_double_loop() {
        let ubm = DiagonalGmm::new(vec![0.2, 0.3, 0.5], vec![0.0, 1.0, -1.0, 2.0, 0.5, 0.5], vec![1.0, 2.0, 0.5, 1.0, 1.5, 0.7]).unwrap();
        let mut g = rng::stream(1, "dl", 0);
        let f = feats((0..15).map(|_| vec![g.gen_range(-2.0..2.0), g.gen_range(-2.0..2.0)]).collect());
        let s = collect_stats_gmm(&ubm, &f).unwrap();
        let mut n = [0.0; 3];
        let mut fo = [0.0; 6];
        for x in f.frames() {
            let dens: Vec<f64> = (0..3)
                .map(|c| {
                    let mut p = ubm.weights()[c];
                    for j in 0..2 {
                        let v = ubm.variance(c)[j];
                        let d = x[j] - ubm.mean(c)[j];
                        p *= (-(d * d) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                    }
                    p
                })
                .collect();
            let z: f64 = dens.iter().sum();
            for c in 0..3 {
                n[c] += dens[c] / z;
                for j in 0..2 {
                    fo[c * 2 + j] += dens[c] / z * (x[j] - ubm.mean(c)[j]);
                }
            }
        }
        for c in 0..3 {
            assert!((s.zeroth()[c] - n[c]).abs() < 1e-10);
        }
        for i in 0..6 {
            assert!((s.first()[i] - fo[i]).abs() < 1e-10);
        }
        assert!((s.total_count() - 15.0).abs() < 1e-9);
    }

    fn mono_two_states() -> MonophoneSet<f64> {
        let st = |m: f64, id: usize| HmmState::new(DiagonalGmm::single(vec![m], vec![1.0]).unwrap(), vec![id], 0.5).unwrap();
        MonophoneSet::new(vec!["a".into(), "b".into()], 1, vec![st(-5.0, 0), st(5.0, 1)], 2).unwrap()
    }

    #[test]
    fn hmm_stats_follow_the_staircase() {
        let mono = mono_two_states();
        let h = mono.compose(&["a", "b"]).unwrap();
        let f = feats(vec![vec![-5.0], vec![-4.0], vec![-6.0], vec![5.0], vec![4.5]]);
        let s = collect_stats_hmm(&mono, &h, &f).unwrap();
        assert_eq!(s.zeroth(), &[3.0, 2.0]);
        assert!((s.first()[0] - 0.0).abs() < 1e-12);
        assert!((s.first()[1] + 0.5).abs() < 1e-12);
        let g = collect_stats_gmm(&mono.inventory_gmm().unwrap(), &f).unwrap();
        assert_eq!(g.num_components(), s.num_components());
        assert!((g.total_count() - s.total_count()).abs() < 1e-9);
    }

    #[test]
    fn single_state_hmm_equals_single_component_gmm() {
        let g = DiagonalGmm::single(vec![0.3, -0.2], vec![1.5, 0.5]).unwrap();
        let mono = MonophoneSet::new(vec!["x".into()], 1, vec![HmmState::new(g.clone(), vec![0], 0.9).unwrap()], 1).unwrap();
        let h = mono.compose(&["x"]).unwrap();
        let f = feats(vec![vec![1.0, 2.0], vec![-1.0, 0.0], vec![0.0, 0.5]]);
        assert_eq!(collect_stats_hmm(&mono, &h, &f).unwrap(), collect_stats_gmm(&g, &f).unwrap());
    }

    #[test]
    fn empty_stats_and_zero_subspace_give_zero() {
        let m = random_model(3, 4, 3, 2);
        assert_eq!(extract_ivector(&m, &SufficientStats::zeros(4, 3)).unwrap(), vec![0.0, 0.0]);
        let zero = TotalVariabilityModel::new(Matrix::zeros(12, 2), vec![1.0; 12], 4).unwrap();
        assert_eq!(extract_ivector(&zero, &random_stats(1, 4, 3)).unwrap(), vec![0.0, 0.0]);
    }

    /// Exact log posterior of `w` up to a constant.
    fn log_posterior(m: &TotalVariabilityModel<f64>, s: &SufficientStats<f64>, w: &[f64]) -> f64 {
        let mut lp = -0.5 * dot(w, w);
        for c in 0..m.num_components() {
            for j in 0..m.dim() {
                let row = c * m.dim() + j;
                let mu = dot(m.matrix().row(row), w);
                let v = m.variances()[row];
                lp += (s.first_of(c)[j] * mu - 0.5 * s.zeroth()[c] * mu * mu) / v;
            }
        }
        lp
    }

    #[test]
    fn extraction_maximizes_the_posterior() {
        for seed in 0..5 {
            let m = random_model(seed, 4, 3, 2);
            let s = random_stats(seed, 4, 3);
            let w = extract_ivector(&m, &s).unwrap();
            let best = log_posterior(&m, &s, &w);
            for d in [[1e-3, 0.0], [0.0, 1e-3], [-1e-3, 1e-3]] {
                let moved = [w[0] + d[0], w[1] + d[1]];
                assert!(log_posterior(&m, &s, &moved) < best);
            }
        }
    }

    #[test]
    fn extraction_is_linear_in_first_order() {
        let m = random_model(7, 4, 3, 2);
        let a = random_stats(1, 4, 3);
        let b = SufficientStats::new(a.zeroth().to_vec(), random_stats(2, 4, 3).first().to_vec(), 3).unwrap();
        let sum_first: Vec<f64> = a.first().iter().zip(b.first()).map(|(x, y)| x + y).collect();
        let ab = SufficientStats::new(a.zeroth().to_vec(), sum_first, 3).unwrap();
        let (wa, wb, wab) = (
            extract_ivector(&m, &a).unwrap(),
            extract_ivector(&m, &b).unwrap(),
            extract_ivector(&m, &ab).unwrap(),
        );
        for i in 0..2 {
            assert!((wa[i] + wb[i] - wab[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn more_frames_increase_the_smallest_precision_eigenvalue() {
        let m = random_model(5, 4, 3, 3);
        let s = random_stats(5, 4, 3);
        let doubled = SufficientStats::new(s.zeroth().iter().map(|n| 2.0 * n).collect(), s.first().to_vec(), 3).unwrap();
        let min_eig = |l: Matrix<f64>| {
            let n = nalgebra::DMatrix::from_row_slice(3, 3, l.as_slice());
            n.symmetric_eigen().eigenvalues.min()
        };
        let a = min_eig(m.posterior_precision(&s).unwrap());
        let b = min_eig(m.posterior_precision(&doubled).unwrap());
        assert!(b > a);
    }

    #[test]
    fn tv_objective_is_monotone() {
        let stats: Vec<_> = (0..30).map(|i| random_stats(100 + i, 4, 3)).collect();
        let out = train_tv(&stats, &[1.0; 12], 2, 8, 3).unwrap();
        assert_eq!(out.objective.len(), 9);
        for w in out.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{:?}", out.objective);
        }
    }

    #[test]
    fn empty_stats_leave_t_at_its_initial_value() {
        let stats = vec![SufficientStats::<f64>::zeros(2, 2); 4];
        let out = train_tv(&stats, &[1.0; 4], 2, 3, 9).unwrap();
        assert_eq!(out.model.matrix(), &initial_tv_matrix(&[1.0; 4], 4, 2, 9));
        for s in &stats {
            assert_eq!(out.model.posterior_precision(s).unwrap(), Matrix::identity(2));
        }
    }

    #[test]
    fn recovers_a_one_factor_loading() {
        let loading = 2.0;
        let mut g = rng::stream(11, "one-factor", 0);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let stats: Vec<SufficientStats<f64>> = (0..1500)
            .map(|_| {
                let w: f64 = noise.sample(&mut g);
                let n = 20;
                let sum: f64 = (0..n).map(|_| loading * w + noise.sample(&mut g)).sum();
                SufficientStats::new(vec![n as f64], vec![sum], 1).unwrap()
            })
            .collect();
        let out = train_tv(&stats, &[1.0], 1, 60, 0).unwrap();
        let t = out.model.matrix()[(0, 0)].abs();
        assert!((t - loading).abs() < 0.1 * loading, "recovered {t}");
    }

    #[test]
    fn round_trips_are_bit_exact() {
        let s = random_stats(4, 4, 3);
        assert_eq!(SufficientStats::decode(&s.encode().unwrap()).unwrap(), s);
        let m = random_model(4, 4, 3, 2);
        assert_eq!(TotalVariabilityModel::decode(&m.encode().unwrap(), m.variances()).unwrap(), m);
        assert!(TotalVariabilityModel::decode(&m.encode().unwrap(), &[1.0; 3]).is_err());
        let mut a = IVectorArchive::new(2);
        a.push("u1", vec![0.1, -1e-300]).unwrap();
        a.push("ü2", vec![f64::MAX, 3.0]).unwrap();
        let back = IVectorArchive::decode(&a.encode().unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.get("ü2"), Some(&[f64::MAX, 3.0][..]));
        assert!(a.push("bad", vec![1.0]).is_err());
        assert!(matches!(SufficientStats::<f64>::decode(&m.encode().unwrap()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let m = random_model(4, 4, 3, 2);
        assert!(matches!(extract_ivector(&m, &random_stats(1, 3, 3)), Err(Error::LayoutMismatch(_))));
    }
}
