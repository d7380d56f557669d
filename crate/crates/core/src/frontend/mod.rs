//! Audio decoding and MFCC front end.

mod featfile;
mod mfcc;
mod post;
mod wav;

pub use featfile::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC};
pub use mfcc::{compute_mfcc, hz_to_mel, mel_to_hz, MfccExtractor};
pub use post::{append_deltas, apply_cmvn, drop_low_energy_frames, CmvnStatus, CMVN_VARIANCE_FLOOR};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::real::Real;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> AudioBuffer<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("audio buffer is empty".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Sequence of equal-length feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    data: Vec<T>,
    num_frames: usize,
    dim: usize,
    frame_shift: f64,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn new(data: Vec<T>, num_frames: usize, dim: usize, frame_shift: f64) -> Result<Self> {
        if dim == 0 || num_frames == 0 {
            return Err(Error::InvalidInput(format!(
                "feature matrix must be non-empty, got {num_frames}x{dim}"
            )));
        }
        if data.len() != num_frames * dim {
            return Err(Error::DimensionMismatch {
                expected: num_frames * dim,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "feature value at frame {} dim {} is not finite",
                i / dim,
                i % dim
            )));
        }
        Ok(Self {
            data,
            num_frames,
            dim,
            frame_shift,
        })
    }

    pub fn from_rows(rows: &[Vec<T>], frame_shift: f64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, rows.len(), dim, frame_shift)
    }

    #[inline]
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn frame_shift(&self) -> f64 {
        self.frame_shift
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[T] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Keeps the frames whose index satisfies `keep`.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &t in indices {
            data.extend_from_slice(self.frame(t));
        }
        Self::new(data, indices.len(), self.dim, self.frame_shift)
    }

    /// Frames in the given order (used for permutation tests and shuffles).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        self.select_frames(order)
    }

    pub fn cast<U: Real>(&self) -> FeatureMatrix<U> {
        FeatureMatrix {
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            num_frames: self.num_frames,
            dim: self.dim,
            frame_shift: self.frame_shift,
        }
    }
}

/// MFCC front-end settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    /// Analysis window length in seconds.
    pub window_length: f64,
    /// Hop between frames in seconds.
    pub frame_shift: f64,
    pub num_mel_filters: usize,
    /// Cepstra kept, `c0` included.
    pub num_cepstra: usize,
    pub preemphasis: f64,
    /// Half-width of the delta regression window; 0 disables deltas.
    pub delta_window: usize,
    pub apply_cmvn: bool,
    pub low_freq: f64,
    /// Upper filterbank edge; Nyquist when `None`.
    pub high_freq: Option<f64>,
    /// Expected sample rate; audio at any other rate is rejected.
    pub sample_rate: u32,
    /// Drop frames whose log energy lies more than this many nats below the
    /// utterance maximum. Off when `None`.
    pub energy_drop: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_length: 0.025,
            frame_shift: 0.010,
            num_mel_filters: 24,
            num_cepstra: 20,
            preemphasis: 0.97,
            delta_window: 2,
            apply_cmvn: true,
            low_freq: 20.0,
            high_freq: None,
            sample_rate: 16_000,
            energy_drop: None,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.frame_shift > 0.0) || !(self.window_length >= self.frame_shift) {
            return bad(format!(
                "need window_length ({}) >= frame_shift ({}) > 0",
                self.window_length, self.frame_shift
            ));
        }
        if self.num_cepstra == 0 || self.num_cepstra > self.num_mel_filters {
            return bad(format!(
                "need 0 < num_cepstra ({}) <= num_mel_filters ({})",
                self.num_cepstra, self.num_mel_filters
            ));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad(format!("preemphasis {} outside [0, 1)", self.preemphasis));
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        let high = self.high_freq.unwrap_or(nyquist);
        if !(self.low_freq >= 0.0 && self.low_freq < high && high <= nyquist) {
            return bad(format!(
                "filterbank range [{}, {high}] invalid for Nyquist {nyquist}",
                self.low_freq
            ));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_length * f64::from(self.sample_rate)).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.frame_shift * f64::from(self.sample_rate)).round() as usize
    }

    /// Final feature dimension after deltas.
    pub fn output_dim(&self) -> usize {
        if self.delta_window > 0 {
            3 * self.num_cepstra
        } else {
            self.num_cepstra
        }
    }
}

/// Frame count for `num_samples` under the framing rule, `None` if the
/// signal is shorter than one window.
pub fn frame_count(num_samples: usize, window: usize, shift: usize) -> Option<usize> {
    if num_samples < window || shift == 0 {
        return None;
    }
    Some((num_samples - window) / shift + 1)
}

/// Full front end: MFCC, optional energy-based frame dropping, deltas and
/// accelerations, then per-utterance CMVN.
pub fn extract_features<T>(audio: &AudioBuffer<T>, extractor: &MfccExtractor<T>) -> Result<FeatureMatrix<T>>
where
    T: Real + rustfft::FftNum,
{
    let cfg = extractor.config();
    let mut feats = extractor.compute(audio)?;
    if let Some(drop) = cfg.energy_drop {
        let energies = extractor.frame_log_energies(audio)?;
        feats = drop_low_energy_frames(&feats, &energies, drop)?;
    }
    if cfg.delta_window > 0 {
        feats = append_deltas(&feats, cfg.delta_window);
    }
    if cfg.apply_cmvn {
        let (normalized, status) = apply_cmvn(&feats);
        if status == CmvnStatus::MeanOnly {
            log::warn!("single-frame utterance: CMVN applied mean-only");
        }
        feats = normalized;
    }
    Ok(feats)
}
