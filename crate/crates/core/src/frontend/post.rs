use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::real::Real;

/// Raw per-dimension variance below which CMVN only removes the mean.
pub const CMVN_VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmvnStatus {
    /// Mean and variance normalized.
    Full,
    /// Single-frame input: only the mean was removed.
    MeanOnly,
}

/// Regression deltas over `±window` frames with edge replication.
fn regression_deltas<T: Real>(rows: &[Vec<T>], window: usize) -> Vec<Vec<T>> {
    let n = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    let denom = T::of_usize(2 * (1..=window).map(|k| k * k).sum::<usize>());
    let clamp = |t: isize| t.clamp(0, n as isize - 1) as usize;
    (0..n)
        .map(|t| {
            let mut d = vec![T::zero(); dim];
            for k in 1..=window {
                let plus = &rows[clamp(t as isize + k as isize)];
                let minus = &rows[clamp(t as isize - k as isize)];
                let kk = T::of_usize(k);
                for j in 0..dim {
                    d[j] += kk * (plus[j] - minus[j]);
                }
            }
            d.iter_mut().for_each(|v| *v /= denom);
            d
        })
        .collect()
}

/// Appends first (delta) and second (acceleration) order regression
/// coefficients; output dimension is three times the input dimension.
pub fn append_deltas<T: Real>(feat: &FeatureMatrix<T>, window: usize) -> FeatureMatrix<T> {
    let window = window.max(1);
    let base: Vec<Vec<T>> = feat.frames().map(<[T]>::to_vec).collect();
    let delta = regression_deltas(&base, window);
    let accel = regression_deltas(&delta, window);
    let mut data = Vec::with_capacity(feat.num_frames() * feat.dim() * 3);
    for t in 0..base.len() {
        data.extend_from_slice(&base[t]);
        data.extend_from_slice(&delta[t]);
        data.extend_from_slice(&accel[t]);
    }
    FeatureMatrix::new(data, feat.num_frames(), feat.dim() * 3, feat.frame_shift())
        .expect("deltas of finite features are finite")
}

/// Per-utterance, per-dimension mean and variance normalization. Dimensions
/// whose raw variance is below [`CMVN_VARIANCE_FLOOR`] are only centered.
pub fn apply_cmvn<T: Real>(feat: &FeatureMatrix<T>) -> (FeatureMatrix<T>, CmvnStatus) {
    let n = feat.num_frames();
    let dim = feat.dim();
    let count = T::of_usize(n);
    let mut mean = vec![T::zero(); dim];
    for f in feat.frames() {
        for (m, &x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);

    let status = if n >= 2 { CmvnStatus::Full } else { CmvnStatus::MeanOnly };
    let mut scale = vec![T::one(); dim];
    if status == CmvnStatus::Full {
        let mut var = vec![T::zero(); dim];
        for f in feat.frames() {
            for j in 0..dim {
                let d = f[j] - mean[j];
                var[j] += d * d;
            }
        }
        let floor = T::of(CMVN_VARIANCE_FLOOR);
        for j in 0..dim {
            let v = var[j] / count;
            if v >= floor {
                scale[j] = T::one() / v.sqrt();
            }
        }
    }
    let data = feat
        .frames()
        .flat_map(|f| {
            f.iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((&x, &m), &s)| (x - m) * s)
                .collect::<Vec<_>>()
        })
        .collect();
    let out = FeatureMatrix::new(data, n, dim, feat.frame_shift()).expect("normalized features are finite");
    (out, status)
}

/// Drops frames whose log energy is more than `drop` below the utterance
/// maximum. At least the highest-energy frame is always kept.
pub fn drop_low_energy_frames<T: Real>(
    feat: &FeatureMatrix<T>,
    log_energies: &[T],
    drop: f64,
) -> Result<FeatureMatrix<T>> {
    if log_energies.len() != feat.num_frames() {
        return Err(Error::DimensionMismatch {
            expected: feat.num_frames(),
            found: log_energies.len(),
        });
    }
    let max = log_energies.iter().copied().fold(T::neg_infinity(), T::max);
    let threshold = max - T::of(drop);
    let keep: Vec<usize> = (0..log_energies.len())
        .filter(|&t| log_energies[t] >= threshold)
        .collect();
    feat.select_frames(&keep)
}
