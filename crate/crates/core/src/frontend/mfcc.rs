use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

use crate::error::{Error, Result};
use crate::frontend::{frame_count, AudioBuffer, FeatureMatrix, MfccConfig};
use crate::real::Real;

/// Floor applied to filterbank energies before the logarithm.
pub const LOG_ENERGY_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, mel filterbank, DCT matrix and FFT plan for one
/// configuration.
pub struct MfccExtractor<T: FftNum> {
    config: MfccConfig,
    window: Vec<T>,
    fft_size: usize,
    fft: Arc<dyn Fft<T>>,
    /// `(first_bin, weights)` per filter.
    filters: Vec<(usize, Vec<T>)>,
    centers_hz: Vec<f64>,
    /// `num_cepstra × num_mel_filters`, orthonormal DCT-II rows.
    dct: Vec<Vec<T>>,
}

impl<T: Real + FftNum> MfccExtractor<T> {
    pub fn new(config: MfccConfig) -> Result<Self> {
        config.validate()?;
        let window_len = config.window_samples();
        if window_len < 2 {
            return Err(Error::InvalidConfig("window shorter than 2 samples".into()));
        }
        let window = (0..window_len)
            .map(|n| {
                T::of(0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (window_len - 1) as f64).cos())
            })
            .collect();
        let fft_size = window_len.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(fft_size);

        let sr = f64::from(config.sample_rate);
        let high = config.high_freq.unwrap_or(sr / 2.0);
        let (mel_lo, mel_hi) = (hz_to_mel(config.low_freq), hz_to_mel(high));
        let m = config.num_mel_filters;
        let mel_points: Vec<f64> = (0..m + 2)
            .map(|i| mel_lo + (mel_hi - mel_lo) * i as f64 / (m + 1) as f64)
            .collect();
        let num_bins = fft_size / 2 + 1;
        let mut filters = Vec::with_capacity(m);
        for f in 0..m {
            let (left, center, right) = (mel_points[f], mel_points[f + 1], mel_points[f + 2]);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..num_bins {
                let mel = hz_to_mel(k as f64 * sr / fft_size as f64);
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(T::of(w));
                } else if first.is_some() {
                    break;
                }
            }
            let first = first.ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "mel filter {f} covers no FFT bin; use fewer filters or a longer window"
                ))
            })?;
            filters.push((first, weights));
        }
        let centers_hz = (1..=m).map(|i| mel_to_hz(mel_points[i])).collect();

        let dct = (0..config.num_cepstra)
            .map(|k| {
                let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
                (0..m)
                    .map(|j| T::of(scale * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m as f64).cos()))
                    .collect()
            })
            .collect();

        Ok(Self {
            config,
            window,
            fft_size,
            fft,
            filters,
            centers_hz,
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    /// Center frequency of every mel filter.
    pub fn filter_centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Triangular weights of filter `f` over the full one-sided spectrum.
    pub fn filter_weights(&self, f: usize) -> Vec<T> {
        let mut full = vec![T::zero(); self.fft_size / 2 + 1];
        let (first, w) = &self.filters[f];
        full[*first..first + w.len()].copy_from_slice(w);
        full
    }

    fn check_audio(&self, audio: &AudioBuffer<T>) -> Result<usize> {
        if audio.sample_rate() != self.config.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: self.config.sample_rate,
                found: audio.sample_rate(),
            });
        }
        let window = self.window.len();
        frame_count(audio.len(), window, self.config.shift_samples()).ok_or(Error::AudioTooShort {
            samples: audio.len(),
            window,
        })
    }

    fn frame_samples<'a>(&self, audio: &'a AudioBuffer<T>, t: usize) -> &'a [T] {
        let start = t * self.config.shift_samples();
        &audio.samples()[start..start + self.window.len()]
    }

    /// Mel filterbank energies of one raw frame of `window_samples` samples:
    /// pre-emphasis, Hamming window, power spectrum, filterbank.
    pub fn filterbank_energies(&self, frame: &[T]) -> Vec<T> {
        assert_eq!(frame.len(), self.window.len(), "frame length must equal the window length");
        let p = T::of(self.config.preemphasis);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.fft_size];
        for i in 0..frame.len() {
            // Pre-emphasis stays inside the frame; the first sample uses itself.
            let prev = if i == 0 { frame[0] } else { frame[i - 1] };
            buf[i].re = (frame[i] - p * prev) * self.window[i];
        }
        self.fft.process(&mut buf);
        let power: Vec<T> = buf[..self.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        self.filters
            .iter()
            .map(|(first, w)| w.iter().zip(&power[*first..]).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// Cepstra of one raw frame.
    pub fn frame_cepstra(&self, frame: &[T]) -> Vec<T> {
        let floor = T::of(LOG_ENERGY_FLOOR);
        let log_e: Vec<T> = self
            .filterbank_energies(frame)
            .into_iter()
            .map(|e| e.max(floor).ln())
            .collect();
        self.dct
            .iter()
            .map(|row| row.iter().zip(&log_e).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// Raw MFCCs (no deltas, no normalization).
    pub fn compute(&self, audio: &AudioBuffer<T>) -> Result<FeatureMatrix<T>> {
        let n = self.check_audio(audio)?;
        let mut data = Vec::with_capacity(n * self.config.num_cepstra);
        for t in 0..n {
            data.extend(self.frame_cepstra(self.frame_samples(audio, t)));
        }
        FeatureMatrix::new(data, n, self.config.num_cepstra, self.config.frame_shift)
    }

    /// Natural-log energy of each raw frame, floored like the filterbank.
    pub fn frame_log_energies(&self, audio: &AudioBuffer<T>) -> Result<Vec<T>> {
        let n = self.check_audio(audio)?;
        let floor = T::of(LOG_ENERGY_FLOOR);
        Ok((0..n)
            .map(|t| {
                let e: T = self.frame_samples(audio, t).iter().map(|&x| x * x).sum();
                e.max(floor).ln()
            })
            .collect())
    }
}

/// Raw MFCCs for a single utterance.
pub fn compute_mfcc<T: Real + FftNum>(audio: &AudioBuffer<T>, cfg: &MfccConfig) -> Result<FeatureMatrix<T>> {
    MfccExtractor::new(cfg.clone())?.compute(audio)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize, sr: u32) -> AudioBuffer<f64> {
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(sr)).sin())
            .collect();
        AudioBuffer::new(s, sr).unwrap()
    }

    /// Direct O(N²) DFT power spectrum followed by the filterbank.
    fn dft_oracle(ex: &MfccExtractor<f64>, frame: &[f64]) -> Vec<f64> {
        let p = ex.config().preemphasis;
        let n = frame.len();
        let nfft = ex.fft_size();
        let windowed: Vec<f64> = (0..n)
            .map(|i| {
                let prev = if i == 0 { frame[0] } else { frame[i - 1] };
                let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
                (frame[i] - p * prev) * w
            })
            .collect();
        let power: Vec<f64> = (0..=nfft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &x) in windowed.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / nfft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        (0..ex.config().num_mel_filters)
            .map(|f| ex.filter_weights(f).iter().zip(&power).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn one_second_yields_98_frames() {
        let a = AudioBuffer::new(vec![0.01_f64; 16_000], 16_000).unwrap();
        let f = compute_mfcc(&a, &MfccConfig::default()).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 20);
    }

    #[test]
    fn silence_gives_identical_frames() {
        let a = AudioBuffer::new(vec![0.0_f64; 4_000], 16_000).unwrap();
        let f = compute_mfcc(&a, &MfccConfig::default()).unwrap();
        for t in 1..f.num_frames() {
            assert_eq!(f.frame(t), f.frame(0));
        }
        // Every log energy is the floor, so c0 = sqrt(M)·ln(1e-10) and the rest vanish.
        let expected_c0 = (24f64).sqrt() * LOG_ENERGY_FLOOR.ln();
        assert!((f.frame(0)[0] - expected_c0).abs() < 1e-9);
        assert!(f.frame(0)[1..].iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn tone_peaks_in_the_filter_containing_it() {
        let cfg = MfccConfig::default();
        let ex = MfccExtractor::<f64>::new(cfg.clone()).unwrap();
        let a = tone(1_000.0, 400, 16_000);
        let fb = ex.filterbank_energies(&a.samples()[..400]);
        let oracle = dft_oracle(&ex, &a.samples()[..400]);
        for (x, y) in fb.iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{x} vs {y}");
        }
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                .0
        };
        let peak = argmax(&fb);
        assert_eq!(peak, argmax(&oracle));
        // The peak filter's support contains 1 kHz and its center is the closest.
        let mel = hz_to_mel(1_000.0);
        let lo = hz_to_mel(cfg.low_freq);
        let hi = hz_to_mel(8_000.0);
        let step = (hi - lo) / 25.0;
        let (left, right) = (lo + step * peak as f64, lo + step * (peak + 2) as f64);
        assert!(left < mel && mel < right);
        let nearest = ex
            .filter_centers_hz()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        assert_eq!(peak, nearest);
    }

    #[test]
    fn too_short_and_wrong_rate_are_errors() {
        let cfg = MfccConfig::default();
        let a = AudioBuffer::new(vec![0.0_f64; 399], 16_000).unwrap();
        assert!(matches!(
            compute_mfcc(&a, &cfg),
            Err(Error::AudioTooShort { samples: 399, window: 400 })
        ));
        let b = AudioBuffer::new(vec![0.0_f64; 8_000], 8_000).unwrap();
        assert!(matches!(compute_mfcc(&b, &cfg), Err(Error::SampleRateMismatch { .. })));
    }

    #[test]
    fn deterministic_bitwise() {
        let a = tone(440.0, 8_000, 16_000);
        let cfg = MfccConfig::default();
        let f1 = compute_mfcc(&a, &cfg).unwrap();
        let f2 = compute_mfcc(&a, &cfg).unwrap();
        assert_eq!(f1.as_slice(), f2.as_slice());
    }

    #[test]
    fn leading_silence_leaves_signal_frames_unchanged() {
        let cfg = MfccConfig::default();
        let signal = tone(700.0, 4_000, 16_000);
        let shift = cfg.shift_samples();
        let pad = 5 * shift;
        let mut padded = vec![0.0; pad];
        padded.extend_from_slice(signal.samples());
        let padded = AudioBuffer::new(padded, 16_000).unwrap();
        let a = compute_mfcc(&signal, &cfg).unwrap();
        let b = compute_mfcc(&padded, &cfg).unwrap();
        for t in 0..a.num_frames() {
            assert_eq!(a.frame(t), b.frame(t + 5));
        }
    }

    #[test]
    fn works_in_single_precision() {
        let a = AudioBuffer::new(
            (0..4_000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect::<Vec<f32>>(),
            16_000,
        )
        .unwrap();
        let f = compute_mfcc(&a, &MfccConfig::default()).unwrap();
        assert_eq!(f.num_frames(), 23);
    }
}
