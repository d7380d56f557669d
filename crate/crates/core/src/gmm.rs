//! Diagonal-covariance Gaussian mixtures: EM training by binary splitting,
//! relevance-MAP mean adaptation, frame posteriors and likelihoods.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::real::{ln_2pi, log_sum_exp, Real};
use crate::rng;

pub const GMM_MAGIC: &[u8; 4] = b"PKGM";

/// Variance floor as a fraction of the global per-dimension variance.
pub const VARIANCE_FLOOR_FRACTION: f64 = 1e-4;

/// Relevance factor used by the GMM-UBM baseline.
pub const DEFAULT_RELEVANCE_FACTOR: f64 = 16.0;

/// Utterances accumulated sequentially per parallel work item. Fixed so that
/// summation order, and therefore every trained model, does not depend on
/// the thread count.
pub(crate) const ACCUMULATION_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGmm<T> {
    weights: Vec<T>,
    means: Vec<T>,
    variances: Vec<T>,
    dim: usize,
    inv_var: Vec<T>,
    /// `ln w_c - ½(F ln 2π + Σ ln σ²)` per component.
    log_norm: Vec<T>,
}

impl<T: Real> DiagonalGmm<T> {
    /// Builds a model from flat row-major `C × F` means and variances.
    pub fn new(weights: Vec<T>, means: Vec<T>, variances: Vec<T>) -> Result<Self> {
        let c = weights.len();
        if c == 0 {
            return Err(Error::InvalidInput("GMM needs at least one component".into()));
        }
        if means.len() % c != 0 || means.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: c,
                found: means.len(),
            });
        }
        let dim = means.len() / c;
        if variances.len() != means.len() {
            return Err(Error::DimensionMismatch {
                expected: means.len(),
                found: variances.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
            return Err(Error::InvalidInput("GMM weights must be finite and non-negative".into()));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs().f64() > 1e-8 {
            return Err(Error::InvalidInput(format!(
                "GMM weights sum to {total}, not 1"
            )));
        }
        if variances.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidInput("GMM variances must be finite and positive".into()));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("GMM means must be finite".into()));
        }
        let inv_var = variances.iter().map(|&v| T::one() / v).collect();
        let half = T::of(0.5);
        let log_norm = (0..c)
            .map(|k| {
                let log_det: T = variances[k * dim..(k + 1) * dim].iter().map(|v| v.ln()).sum();
                weights[k].ln() - half * (T::of_usize(dim) * ln_2pi::<T>() + log_det)
            })
            .collect();
        Ok(Self {
            weights,
            means,
            variances,
            dim,
            inv_var,
            log_norm,
        })
    }

    /// A single Gaussian.
    pub fn single(mean: Vec<T>, variance: Vec<T>) -> Result<Self> {
        Self::new(vec![T::one()], mean, variance)
    }

    #[inline]
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn variances(&self) -> &[T] {
        &self.variances
    }

    #[inline]
    pub fn mean(&self, c: usize) -> &[T] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    #[inline]
    pub fn variance(&self, c: usize) -> &[T] {
        &self.variances[c * self.dim..(c + 1) * self.dim]
    }

    /// Same weights and variances, new means.
    pub fn with_means(&self, means: Vec<T>) -> Result<Self> {
        Self::new(self.weights.clone(), means, self.variances.clone())
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found,
            });
        }
        Ok(())
    }

    /// `ln w_c + ln N(x | μ_c, Σ_c)` for every component, written into `out`.
    pub fn component_log_densities(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.dim);
        let half = T::of(0.5);
        for (c, o) in out.iter_mut().enumerate() {
            let base = c * self.dim;
            let mean = &self.means[base..base + self.dim];
            let iv = &self.inv_var[base..base + self.dim];
            let mut q = T::zero();
            for j in 0..self.dim {
                let d = x[j] - mean[j];
                q += d * d * iv[j];
            }
            *o = self.log_norm[c] - half * q;
        }
    }

    /// `ln p(x)`.
    pub fn frame_log_likelihood(&self, x: &[T]) -> T {
        let mut buf = vec![T::zero(); self.num_components()];
        self.component_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// Per-frame component posteriors, computed with log-sum-exp.
    pub fn frame_posteriors(&self, features: &FeatureMatrix<T>) -> Result<Responsibilities<T>> {
        self.check_dim(features.dim())?;
        let c = self.num_components();
        let mut data = vec![T::zero(); features.num_frames() * c];
        for (t, x) in features.frames().enumerate() {
            let row = &mut data[t * c..(t + 1) * c];
            self.posteriors_into(x, row);
        }
        Ok(Responsibilities {
            data,
            num_frames: features.num_frames(),
            num_components: c,
        })
    }

    /// Writes the posterior of each component for frame `x` into `row` and
    /// returns `ln p(x)`.
    pub fn posteriors_into(&self, x: &[T], row: &mut [T]) -> T {
        self.component_log_densities(x, row);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        lse
    }

    /// Mean over frames of `ln p(x_t)`.
    pub fn avg_loglik(&self, features: &FeatureMatrix<T>) -> Result<T> {
        self.check_dim(features.dim())?;
        let mut buf = vec![T::zero(); self.num_components()];
        let mut total = T::zero();
        for x in features.frames() {
            self.component_log_densities(x, &mut buf);
            total += log_sum_exp(&buf);
        }
        Ok(total / T::of_usize(features.num_frames()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(GMM_MAGIC);
        w.len_u32(self.num_components())?;
        w.len_u32(self.dim)?;
        w.f64s(self.weights.iter().map(|v| v.f64()));
        w.f64s(self.means.iter().map(|v| v.f64()));
        w.f64s(self.variances.iter().map(|v| v.f64()));
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, GMM_MAGIC, "PKGM")?;
        let c = r.usize()?;
        let f = r.usize()?;
        let weights = r.f64s(c)?;
        let means = r.f64s(c * f)?;
        let variances = r.f64s(c * f)?;
        r.finish()?;
        let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
        Self::new(cast(weights), cast(means), cast(variances))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Per-frame posterior distribution over mixture components.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities<T> {
    data: Vec<T>,
    num_frames: usize,
    num_components: usize,
}

impl<T: Real> Responsibilities<T> {
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.num_components..(t + 1) * self.num_components]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.num_components)
    }
}

/// Zeroth, first and second order statistics per component. Combine
/// per-utterance accumulators with [`GaussianAccumulator::merge`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAccumulator<T> {
    pub zeroth: Vec<T>,
    pub first: Vec<T>,
    pub second: Vec<T>,
    pub log_likelihood: T,
    pub frames: usize,
    dim: usize,
}

impl<T: Real> GaussianAccumulator<T> {
    pub fn new(num_components: usize, dim: usize) -> Self {
        Self {
            zeroth: vec![T::zero(); num_components],
            first: vec![T::zero(); num_components * dim],
            second: vec![T::zero(); num_components * dim],
            log_likelihood: T::zero(),
            frames: 0,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds frame `x` with component weights `gamma`.
    pub fn add(&mut self, x: &[T], gamma: &[T]) {
        for (c, &g) in gamma.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            self.zeroth[c] += g;
            let base = c * self.dim;
            for j in 0..self.dim {
                let gx = g * x[j];
                self.first[base + j] += gx;
                self.second[base + j] += gx * x[j];
            }
        }
        self.frames += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        let add = |a: &mut [T], b: &[T]| a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        add(&mut self.zeroth, &other.zeroth);
        add(&mut self.first, &other.first);
        add(&mut self.second, &other.second);
        self.log_likelihood += other.log_likelihood;
        self.frames += other.frames;
    }

    /// E-step of `gmm` over one utterance.
    pub fn accumulate(&mut self, gmm: &DiagonalGmm<T>, features: &FeatureMatrix<T>) {
        let mut row = vec![T::zero(); gmm.num_components()];
        for x in features.frames() {
            self.log_likelihood += gmm.posteriors_into(x, &mut row);
            self.add(x, &row);
        }
    }
}

/// Runs `accumulate` over utterances in parallel and sums the chunk results
/// in a fixed order.
pub(crate) fn parallel_accumulate<U, A, F>(items: &[U], init: impl Fn() -> A + Sync, f: F, merge: impl Fn(&mut A, &A)) -> A
where
    U: Sync,
    A: Send,
    F: Fn(&mut A, &U) + Sync,
{
    let partial: Vec<A> = items
        .par_chunks(ACCUMULATION_CHUNK)
        .map(|chunk| {
            let mut acc = init();
            for item in chunk {
                f(&mut acc, item);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in &partial {
        merge(&mut total, p);
    }
    total
}

/// Per-dimension mean and population variance over all frames.
pub fn global_mean_variance<T: Real>(features: &[FeatureMatrix<T>]) -> Result<(Vec<T>, Vec<T>)> {
    let dim = features
        .first()
        .ok_or_else(|| Error::InsufficientData("no feature matrices".into()))?
        .dim();
    let mut sum = vec![T::zero(); dim];
    let mut sq = vec![T::zero(); dim];
    let mut n = 0usize;
    for f in features {
        if f.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: f.dim(),
            });
        }
        for x in f.frames() {
            for j in 0..dim {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
        }
        n += f.num_frames();
    }
    let nn = T::of_usize(n);
    let mean: Vec<T> = sum.iter().map(|&s| s / nn).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(&s, &m)| (s / nn - m * m).max(T::zero()))
        .collect();
    Ok((mean, var))
}

/// M-step from accumulated statistics. Components with (numerically) zero
/// occupancy are reported in the returned list and keep their old
/// parameters with weight zero.
pub fn m_step<T: Real>(
    previous: &DiagonalGmm<T>,
    acc: &GaussianAccumulator<T>,
    variance_floor: &[T],
) -> Result<(DiagonalGmm<T>, Vec<usize>)> {
    let c = previous.num_components();
    let dim = previous.dim();
    let total: T = acc.zeroth.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::InsufficientData("no frames accumulated".into()));
    }
    let tiny = total * T::of(1e-10);
    let mut weights = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c * dim);
    let mut vars = Vec::with_capacity(c * dim);
    let mut empty = Vec::new();
    for k in 0..c {
        let n = acc.zeroth[k];
        if n <= tiny {
            empty.push(k);
            weights.push(T::zero());
            means.extend_from_slice(previous.mean(k));
            vars.extend_from_slice(previous.variance(k));
            continue;
        }
        weights.push(n / total);
        for j in 0..dim {
            let m = acc.first[k * dim + j] / n;
            let v = acc.second[k * dim + j] / n - m * m;
            means.push(m);
            vars.push(v.max(variance_floor[j]));
        }
    }
    // Renormalize away rounding so the weights sum to one.
    let wsum: T = weights.iter().copied().sum();
    weights.iter_mut().for_each(|w| *w /= wsum);
    Ok((DiagonalGmm::new(weights, means, vars)?, empty))
}

/// Result of UBM training.
#[derive(Debug, Clone)]
pub struct UbmTraining<T> {
    pub gmm: DiagonalGmm<T>,
    /// Total log-likelihood of the training data before each EM iteration at
    /// the final model size, plus one entry for the final model.
    pub log_likelihoods: Vec<f64>,
    /// Empty components that had to be re-split.
    pub resplits: usize,
}

/// Splits component `k` into two, moving the means by `±0.1 σ ⊙ s` for a
/// random sign vector `s`.
fn split_component<T: Real>(
    weights: &mut Vec<T>,
    means: &mut Vec<T>,
    vars: &mut Vec<T>,
    dim: usize,
    k: usize,
    into: Option<usize>,
    rng: &mut rng::Rng,
) {
    let offset: Vec<T> = (0..dim)
        .map(|j| {
            let sign = if rng.gen::<bool>() { T::one() } else { -T::one() };
            sign * T::of(0.1) * vars[k * dim + j].sqrt()
        })
        .collect();
    let half = weights[k] * T::of(0.5);
    weights[k] = half;
    let mean_k: Vec<T> = means[k * dim..(k + 1) * dim].to_vec();
    let var_k: Vec<T> = vars[k * dim..(k + 1) * dim].to_vec();
    for j in 0..dim {
        means[k * dim + j] = mean_k[j] - offset[j];
    }
    let new_mean: Vec<T> = mean_k.iter().zip(&offset).map(|(&m, &o)| m + o).collect();
    match into {
        Some(slot) => {
            weights[slot] = half;
            means[slot * dim..(slot + 1) * dim].copy_from_slice(&new_mean);
            vars[slot * dim..(slot + 1) * dim].copy_from_slice(&var_k);
        }
        None => {
            weights.push(half);
            means.extend_from_slice(&new_mean);
            vars.extend_from_slice(&var_k);
        }
    }
}

/// Indices of the `n` heaviest components, ties broken by lower index.
fn heaviest<T: Real>(weights: &[T], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// One EM iteration; returns the new model, the log-likelihood of the input
/// model and the number of re-split empty components.
fn em_iteration<T: Real>(
    gmm: &DiagonalGmm<T>,
    features: &[FeatureMatrix<T>],
    floor: &[T],
    rng: &mut rng::Rng,
) -> Result<(DiagonalGmm<T>, f64, usize)> {
    let (c, dim) = (gmm.num_components(), gmm.dim());
    let acc = parallel_accumulate(
        features,
        || GaussianAccumulator::new(c, dim),
        |acc, f| acc.accumulate(gmm, f),
        GaussianAccumulator::merge,
    );
    let ll = acc.log_likelihood.f64();
    let (mut next, empty) = m_step(gmm, &acc, floor)?;
    let resplits = empty.len();
    if resplits > 0 {
        log::debug!("{resplits} empty GMM component(s); re-splitting the heaviest");
        let mut w = next.weights.clone();
        let mut m = next.means.clone();
        let mut v = next.variances.clone();
        for k in empty {
            let donor = heaviest(&w, 1)[0];
            split_component(&mut w, &mut m, &mut v, dim, donor, Some(k), rng);
        }
        next = DiagonalGmm::new(w, m, v)?;
    }
    Ok((next, ll, resplits))
}

/// Trains a UBM by binary splitting from the global Gaussian followed by EM.
///
/// After each split round `em_iters` EM iterations are run; the history in
/// the result covers the iterations at the final size.
pub fn train_ubm<T: Real>(
    features: &[FeatureMatrix<T>],
    num_components: usize,
    em_iters: usize,
    seed: u64,
) -> Result<UbmTraining<T>> {
    if num_components == 0 {
        return Err(Error::InvalidConfig("num_components must be positive".into()));
    }
    let total_frames: usize = features.iter().map(FeatureMatrix::num_frames).sum();
    if total_frames < 10 * num_components {
        return Err(Error::InsufficientData(format!(
            "{total_frames} frames for {num_components} components (need at least {})",
            10 * num_components
        )));
    }
    let (mean, var) = global_mean_variance(features)?;
    let floor = variance_floor(&var);
    let var: Vec<T> = var.iter().zip(&floor).map(|(&v, &f)| v.max(f)).collect();
    let start = DiagonalGmm::single(mean, var)?;
    let mut rng = rng::stream(seed, "ubm-split", 0);
    let out = fit_by_splitting(start, features, num_components, em_iters, &floor, &mut rng)?;
    if out.resplits > 0 {
        log::warn!("UBM training re-split {} empty component(s)", out.resplits);
    }
    Ok(out)
}

/// Per-dimension variance floor from global variances.
pub fn variance_floor<T: Real>(global_variance: &[T]) -> Vec<T> {
    global_variance
        .iter()
        .map(|&v| (v * T::of(VARIANCE_FLOOR_FRACTION)).max(T::min_positive_value()))
        .collect()
}

/// Binary splitting from `start` up to `num_components`, with `em_iters` EM
/// iterations after every split round and at the final size.
pub(crate) fn fit_by_splitting<T: Real>(
    start: DiagonalGmm<T>,
    features: &[FeatureMatrix<T>],
    num_components: usize,
    em_iters: usize,
    floor: &[T],
    rng: &mut rng::Rng,
) -> Result<UbmTraining<T>> {
    let dim = start.dim();
    let total_frames: usize = features.iter().map(FeatureMatrix::num_frames).sum();
    let mut gmm = start;
    let mut resplits = 0;

    while gmm.num_components() < num_components {
        let c = gmm.num_components();
        let n_split = c.min(num_components - c);
        let mut w = gmm.weights.clone();
        let mut m = gmm.means.clone();
        let mut v = gmm.variances.clone();
        for k in heaviest(&w, n_split) {
            split_component(&mut w, &mut m, &mut v, dim, k, None, rng);
        }
        gmm = DiagonalGmm::new(w, m, v)?;
        log::debug!("GMM split to {} components", gmm.num_components());
        if gmm.num_components() < num_components {
            for _ in 0..em_iters.max(1) {
                let (next, _, r) = em_iteration(&gmm, features, floor, rng)?;
                gmm = next;
                resplits += r;
            }
        }
    }

    let mut history = Vec::with_capacity(em_iters + 1);
    for it in 0..em_iters {
        let (next, ll, r) = em_iteration(&gmm, features, floor, rng)?;
        log::debug!("GMM EM iteration {it}: avg log-likelihood {}", ll / total_frames as f64);
        history.push(ll);
        gmm = next;
        resplits += r;
    }
    let final_ll: f64 = features
        .par_iter()
        .map(|f| gmm.avg_loglik(f).map(|a| a.f64() * f.num_frames() as f64))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    history.push(final_ll);
    Ok(UbmTraining {
        gmm,
        log_likelihoods: history,
        resplits,
    })
}

/// Relevance-MAP adaptation of the means; weights and variances are kept.
/// Components with zero occupancy keep the UBM mean.
pub fn map_adapt_means<T: Real>(
    ubm: &DiagonalGmm<T>,
    features: &FeatureMatrix<T>,
    relevance_factor: T,
) -> Result<DiagonalGmm<T>> {
    let mut acc = GaussianAccumulator::new(ubm.num_components(), ubm.dim());
    ubm.check_dim(features.dim())?;
    acc.accumulate(ubm, features);
    map_means_from_stats(ubm, &acc.zeroth, &acc.first, relevance_factor)
}

/// `(F_c + r m_c) / (n_c + r)` with uncentered first-order sums `F_c`.
pub fn map_means_from_stats<T: Real>(ubm: &DiagonalGmm<T>, zeroth: &[T], first: &[T], r: T) -> Result<DiagonalGmm<T>> {
    let dim = ubm.dim();
    let mut means = Vec::with_capacity(ubm.means.len());
    for c in 0..ubm.num_components() {
        let n = zeroth[c];
        let prior = ubm.mean(c);
        if n + r <= T::zero() {
            means.extend_from_slice(prior);
            continue;
        }
        for j in 0..dim {
            means.push((first[c * dim + j] + r * prior[j]) / (n + r));
        }
    }
    ubm.with_means(means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn feats(rows: Vec<Vec<f64>>) -> FeatureMatrix<f64> {
        FeatureMatrix::from_rows(&rows, 0.01).unwrap()
    }

    fn random_feats(seed: u64, n: usize, dim: usize) -> FeatureMatrix<f64> {
        let mut r = rng::stream(seed, "test", 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let rows = (0..n)
            .map(|i| (0..dim).map(|j| normal.sample(&mut r) + ((i + j) % 3) as f64).collect())
            .collect();
        feats(rows)
    }

    /// Direct per-component Gaussian density, no caching or log-sum-exp.
    fn density(g: &DiagonalGmm<f64>, c: usize, x: &[f64]) -> f64 {
        let mut p = g.weights()[c];
        for j in 0..x.len() {
            let v = g.variance(c)[j];
            let d = x[j] - g.mean(c)[j];
            p *= (-(d * d) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        }
        p
    }

    fn random_gmm(seed: u64, c: usize, dim: usize) -> DiagonalGmm<f64> {
        let mut r = rng::stream(seed, "gmm", 0);
        let mut w: Vec<f64> = (0..c).map(|_| r.gen_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let m = (0..c * dim).map(|_| r.gen_range(-2.0..2.0)).collect();
        let v = (0..c * dim).map(|_| r.gen_range(0.5..2.0)).collect();
        DiagonalGmm::new(w, m, v).unwrap()
    }

    #[test]
    fn validation() {
        assert!(DiagonalGmm::<f64>::new(vec![], vec![], vec![]).is_err());
        assert!(DiagonalGmm::new(vec![0.5, 0.4], vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(DiagonalGmm::new(vec![1.0], vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn single_component_posteriors_are_one() {
        let g = DiagonalGmm::single(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        let f = random_feats(1, 10, 2);
        let r = g.frame_posteriors(&f).unwrap();
        assert!(r.rows().all(|row| row == [1.0]));
    }

    #[test]
    fn dominant_component() {
        let g = DiagonalGmm::new(vec![0.5, 0.5], vec![0.0, 100.0], vec![1.0, 1.0]).unwrap();
        let r = g.frame_posteriors(&feats(vec![vec![0.0]])).unwrap();
        assert!(r.row(0)[0] > 0.999);
    }

    #[test]
    fn posteriors_match_direct_density_oracle() {
        let g = random_gmm(3, 3, 4);
        let f = random_feats(4, 5, 4);
        let r = g.frame_posteriors(&f).unwrap();
        for (t, x) in f.frames().enumerate() {
            let dens: Vec<f64> = (0..3).map(|c| density(&g, c, x)).collect();
            let total: f64 = dens.iter().sum();
            for c in 0..3 {
                assert!((r.row(t)[c] - dens[c] / total).abs() < 1e-10);
            }
            assert!((r.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let g = random_gmm(3, 2, 4);
        let f = random_feats(4, 5, 3);
        assert!(matches!(g.frame_posteriors(&f), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(g.avg_loglik(&f), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn avg_loglik_closed_form_and_oracle() {
        let g = DiagonalGmm::single(vec![1.0, 2.0, 3.0], vec![1.0; 3]).unwrap();
        let ll = g.avg_loglik(&feats(vec![vec![1.0, 2.0, 3.0]])).unwrap();
        assert!((ll + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

        let g = random_gmm(9, 3, 2);
        let f = random_feats(10, 6, 2);
        let direct: f64 = f
            .frames()
            .map(|x| (0..3).map(|c| density(&g, c, x)).sum::<f64>().ln())
            .sum::<f64>()
            / 6.0;
        assert!((g.avg_loglik(&f).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn ml_fit_beats_shifted_model() {
        let f = random_feats(5, 200, 2);
        let fit = train_ubm(&[f.clone()], 1, 1, 0).unwrap().gmm;
        let shifted = fit.with_means(fit.means().iter().map(|m| m + 0.5).collect()).unwrap();
        assert!(fit.avg_loglik(&f).unwrap() > shifted.avg_loglik(&f).unwrap());
    }

    #[test]
    fn one_component_is_global_gaussian() {
        let f = random_feats(11, 50, 3);
        let g = train_ubm(&[f.clone()], 1, 3, 7).unwrap().gmm;
        let (m, v) = global_mean_variance(&[f]).unwrap();
        assert_eq!(g.weights(), &[1.0]);
        for j in 0..3 {
            assert!((g.mean(0)[j] - m[j]).abs() < 1e-12);
            assert!((g.variance(0)[j] - v[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn insufficient_data() {
        let f = random_feats(1, 50, 2);
        assert!(matches!(train_ubm(&[f], 8, 2, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let data: Vec<_> = (0..4).map(|s| random_feats(s, 150, 3)).collect();
        let t = train_ubm(&data, 8, 10, 42).unwrap();
        assert_eq!(t.log_likelihoods.len(), 11);
        for w in t.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn recovers_mixture_weights() {
        let mut r = rng::stream(99, "mix", 0);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..4000)
            .map(|_| {
                let mu = if r.gen::<f64>() < 0.7 { -5.0 } else { 5.0 };
                vec![mu + noise.sample(&mut r)]
            })
            .collect();
        let g = train_ubm(&[feats(rows)], 2, 20, 3).unwrap().gmm;
        let (lo, hi) = if g.mean(0)[0] < g.mean(1)[0] { (0, 1) } else { (1, 0) };
        assert!((g.weights()[lo] - 0.7).abs() < 0.05);
        assert!((g.weights()[hi] - 0.3).abs() < 0.05);
    }

    #[test]
    fn map_limits() {
        let ubm = random_gmm(21, 2, 2);
        let f = random_feats(22, 30, 2);
        let stiff = map_adapt_means(&ubm, &f, 1e12).unwrap();
        for (a, b) in stiff.means().iter().zip(ubm.means()) {
            assert!((a - b).abs() < 1e-6);
        }
        let loose = map_adapt_means(&ubm, &f, 0.0).unwrap();
        let post = ubm.frame_posteriors(&f).unwrap();
        for c in 0..2 {
            let n: f64 = post.rows().map(|r| r[c]).sum();
            for j in 0..2 {
                let m: f64 = post.rows().zip(f.frames()).map(|(r, x)| r[c] * x[j]).sum::<f64>() / n;
                assert!((loose.mean(c)[j] - m).abs() < 1e-10);
            }
        }
        assert_eq!(loose.weights(), ubm.weights());
        assert_eq!(loose.variances(), ubm.variances());
    }

    #[test]
    fn map_matches_direct_interpolation() {
        let ubm = DiagonalGmm::new(vec![0.5, 0.5], vec![-1.0, 0.0, 1.0, 0.0], vec![1.0; 4]).unwrap();
        let f = feats(vec![vec![-1.2, 0.3], vec![-0.8, -0.1], vec![1.1, 0.2], vec![0.0, 0.0]]);
        let adapted = map_adapt_means(&ubm, &f, 16.0).unwrap();
        for c in 0..2 {
            let g: Vec<f64> = f
                .frames()
                .map(|x| density(&ubm, c, x) / (density(&ubm, 0, x) + density(&ubm, 1, x)))
                .collect();
            let n: f64 = g.iter().sum();
            for j in 0..2 {
                let sum: f64 = g.iter().zip(f.frames()).map(|(g, x)| g * x[j]).sum();
                let expected = (n * (sum / n) + 16.0 * ubm.mean(c)[j]) / (n + 16.0);
                assert!((adapted.mean(c)[j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn map_with_unoccupied_component_keeps_ubm_mean() {
        let ubm = DiagonalGmm::new(vec![0.5, 0.5], vec![0.0, 1e4], vec![1.0, 1.0]).unwrap();
        let f = feats(vec![vec![0.5], vec![-0.5]]);
        let a = map_adapt_means(&ubm, &f, 0.0).unwrap();
        assert_eq!(a.mean(1), &[1e4]);
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let g = random_gmm(5, 3, 4);
        let back = DiagonalGmm::<f64>::decode(&g.encode().unwrap()).unwrap();
        assert_eq!(back, g);
        let mut bad = g.encode().unwrap();
        bad[1] = b'X';
        assert!(matches!(DiagonalGmm::<f64>::decode(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn generic_over_f32() {
        let f: FeatureMatrix<f32> = random_feats(1, 100, 2).cast();
        let t = train_ubm(&[f.clone()], 2, 3, 1).unwrap();
        assert_eq!(t.gmm.num_components(), 2);
        assert!(t.gmm.avg_loglik(&f).unwrap().is_finite());
    }
}
