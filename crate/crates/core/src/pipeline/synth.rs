//! Synthetic pass-phrase corpus.
//!
//! A seeded inventory of segment types stands in for phones. Each segment
//! type is white noise through a bank of parallel two-pole resonators
//! (formant-like peaks); "sil" is silence. A phrase is a fixed sequence of
//! 4–8 segment labels framed by "sil" with phrase-specific durations.
//! Speakers scale every resonance, nudge each segment's envelope and change
//! the speaking rate; every utterance adds its own duration jitter and
//! white background noise at the configured SNR.
//!
//! All randomness comes from [`crate::rng::stream`] under the corpus seed, so
//! a configuration always produces the same audio.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::manifest::{Manifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::frontend::{write_wav, AudioBuffer};
use crate::rng;

pub const SILENCE_LABEL: &str = "sil";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_phrases: usize,
    pub num_speakers: usize,
    pub reps_per_speaker: usize,
    /// The last `num_eval_speakers` speakers go to the eval split, the rest
    /// to train.
    pub num_eval_speakers: usize,
    /// Repetitions for eval speakers; `reps_per_speaker` when `None`.
    pub eval_reps: Option<usize>,
    /// Index of the first phrase, for generating disjoint phrase sets.
    pub first_phrase: usize,
    /// Index of the first speaker.
    pub first_speaker: usize,
    /// Number of non-silence segment types.
    pub inventory_size: usize,
    /// Scale of the speaker-specific offsets (resonance shifts, envelope
    /// changes, channel tilt); 0 makes all speakers alike.
    pub speaker_variability: f64,
    pub snr_db: f64,
    pub sample_rate: u32,
    /// Target utterance duration range in seconds.
    pub min_duration: f64,
    pub max_duration: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_phrases: 10,
            num_speakers: 30,
            reps_per_speaker: 3,
            num_eval_speakers: 10,
            eval_reps: Some(2),
            first_phrase: 0,
            first_speaker: 0,
            inventory_size: 8,
            speaker_variability: 2.0,
            snr_db: 20.0,
            sample_rate: 16_000,
            min_duration: 1.5,
            max_duration: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.num_phrases == 0 || self.num_speakers == 0 || self.reps_per_speaker == 0 {
            return bad("synthetic corpus needs phrases, speakers and repetitions");
        }
        if self.num_eval_speakers > self.num_speakers {
            return bad("more eval speakers than speakers");
        }
        if self.eval_reps == Some(0) {
            return bad("eval_reps must be positive");
        }
        if self.inventory_size < 2 {
            return bad("segment inventory needs at least two types");
        }
        if !(self.min_duration > 0.1 && self.min_duration <= self.max_duration) {
            return bad("need 0.1 < min_duration <= max_duration");
        }
        if self.sample_rate < 8_000 {
            return bad("sample rate must be at least 8 kHz");
        }
        if !(self.speaker_variability >= 0.0 && self.speaker_variability <= 4.0) {
            return bad("speaker_variability must lie in [0, 4]");
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Resonance {
    freq: f64,
    bandwidth: f64,
    amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct SegmentType {
    label: String,
    resonances: Vec<Resonance>,
    /// Linear RMS level.
    level: f64,
    nominal_duration: f64,
}

fn segment_label(k: usize) -> String {
    format!("g{k:02}")
}

fn inventory(cfg: &SynthConfig) -> Vec<SegmentType> {
    (0..cfg.inventory_size)
        .map(|k| {
            let mut r = rng::stream(cfg.seed, "synth-inventory", k as u64);
            let noisy = r.gen_bool(0.25);
            let resonances = if noisy {
                let lo = r.gen_range(2_500.0..4_500.0);
                vec![
                    Resonance {
                        freq: lo,
                        bandwidth: r.gen_range(300.0..800.0),
                        amplitude: 1.0,
                    },
                    Resonance {
                        freq: lo + r.gen_range(1_000.0..2_500.0),
                        bandwidth: r.gen_range(400.0..1_000.0),
                        amplitude: r.gen_range(0.3..1.0),
                    },
                ]
            } else {
                let f1: f64 = r.gen_range(250.0..900.0);
                let f2 = (f1 + r.gen_range(400.0..1_600.0)).min(2_600.0);
                let f3 = f2 + r.gen_range(500.0..1_200.0);
                vec![
                    Resonance {
                        freq: f1,
                        bandwidth: r.gen_range(60.0..150.0),
                        amplitude: 1.0,
                    },
                    Resonance {
                        freq: f2,
                        bandwidth: r.gen_range(80.0..180.0),
                        amplitude: r.gen_range(0.3..1.0),
                    },
                    Resonance {
                        freq: f3,
                        bandwidth: r.gen_range(100.0..250.0),
                        amplitude: r.gen_range(0.1..0.6),
                    },
                ]
            };
            SegmentType {
                label: segment_label(k),
                resonances,
                level: 10f64.powf(r.gen_range(-6.0..0.0) / 20.0) * 0.1,
                nominal_duration: r.gen_range(0.12..0.26),
            }
        })
        .collect()
}

/// A phrase: segment indices (`None` for silence) with durations in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseSpec {
    pub id: String,
    pub labels: Vec<String>,
    segments: Vec<Option<usize>>,
    durations: Vec<f64>,
}

fn phrase_id(i: usize) -> String {
    format!("p{i:02}")
}

/// Phrase definitions for indices `0..first_phrase + num_phrases`, drawn in
/// order with duplicate label sequences redrawn, so any two phrases of one
/// seed differ.
fn phrases(cfg: &SynthConfig, inv: &[SegmentType]) -> Vec<PhraseSpec> {
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::new();
    for i in 0..cfg.first_phrase + cfg.num_phrases {
        let mut r = rng::stream(cfg.seed, "synth-phrase", i as u64);
        let seq = loop {
            let n = r.gen_range(4..=8);
            let mut seq: Vec<usize> = Vec::with_capacity(n);
            while seq.len() < n {
                let k = r.gen_range(0..inv.len());
                if seq.last() != Some(&k) {
                    seq.push(k);
                }
            }
            if seen.insert(seq.clone()) {
                break seq;
            }
        };
        let mut segments = vec![None];
        segments.extend(seq.iter().map(|&k| Some(k)));
        segments.push(None);
        let mut durations: Vec<f64> = segments
            .iter()
            .map(|s| match s {
                Some(k) => inv[*k].nominal_duration * r.gen_range(0.85..1.15),
                None => r.gen_range(0.12..0.2),
            })
            .collect();
        // Stretch to a phrase length inside the middle of the duration range,
        // leaving room for speaking-rate changes.
        let span = cfg.max_duration - cfg.min_duration;
        let target = if span > 0.0 {
            r.gen_range(cfg.min_duration + 0.15 * span..cfg.max_duration - 0.15 * span)
        } else {
            cfg.min_duration
        };
        let total: f64 = durations.iter().sum();
        durations.iter_mut().for_each(|d| *d *= target / total);
        let labels = segments
            .iter()
            .map(|s| s.map_or_else(|| SILENCE_LABEL.to_string(), |k| inv[k].label.clone()))
            .collect();
        out.push(PhraseSpec {
            id: phrase_id(i),
            labels,
            segments,
            durations,
        });
    }
    out
}

#[derive(Debug, Clone)]
struct SpeakerSpec {
    id: String,
    formant_scale: f64,
    rate: f64,
    gain: f64,
    /// First-order channel filter coefficient, `y[n] = x[n] + tilt·x[n−1]`.
    tilt: f64,
    /// Per segment type: frequency factor and amplitude factors.
    offsets: Vec<(f64, Vec<f64>)>,
}

/// Uniform draw from `center·(1 ± spread)`.
fn around(r: &mut rng::Rng, center: f64, spread: f64) -> f64 {
    if spread > 0.0 {
        center * (1.0 + r.gen_range(-spread..spread))
    } else {
        center
    }
}

fn speaker(cfg: &SynthConfig, inv: &[SegmentType], index: usize) -> SpeakerSpec {
    let v = cfg.speaker_variability;
    let mut r = rng::stream(cfg.seed, "synth-speaker", index as u64);
    let offsets = inv
        .iter()
        .map(|s| {
            let f = around(&mut r, 1.0, 0.03 * v);
            let amps = s
                .resonances
                .iter()
                .map(|_| (0.22 * v * r.gen_range(-1.0..1.0)).exp())
                .collect();
            (f, amps)
        })
        .collect();
    SpeakerSpec {
        id: format!("spk{index:03}"),
        formant_scale: around(&mut r, 1.0, 0.07 * v),
        rate: r.gen_range(0.9..1.1),
        gain: 10f64.powf(r.gen_range(-3.0..3.0) / 20.0),
        tilt: (0.3 * v * r.gen_range(-1.0..1.0)).clamp(-0.95, 0.95),
        offsets,
    }
}

/// Unit-peak-gain two-pole resonator applied to `x`.
fn resonate(x: &[f64], freq: f64, bandwidth: f64, fs: f64) -> Vec<f64> {
    let r = (-PI * bandwidth / fs).exp();
    let theta = 2.0 * PI * freq / fs;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let gain = (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt();
    let (mut y1, mut y2) = (0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = gain * v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn render(cfg: &SynthConfig, inv: &[SegmentType], phrase: &PhraseSpec, spk: &SpeakerSpec, rep: usize) -> Vec<f64> {
    let fs = f64::from(cfg.sample_rate);
    let label = format!("synth-utt/{}/{}", phrase.id, spk.id);
    let mut r = rng::stream(cfg.seed, &label, rep as u64);
    let mut durations: Vec<f64> = phrase
        .durations
        .iter()
        .map(|d| d * spk.rate * r.gen_range(0.92..1.08))
        .collect();
    let total: f64 = durations.iter().sum();
    let clamped = total.clamp(cfg.min_duration, cfg.max_duration);
    durations.iter_mut().for_each(|d| *d *= clamped / total);

    let fade = (0.008 * fs) as usize;
    let nyquist_guard = 0.45 * fs;
    let mut signal = Vec::new();
    let mut voiced_power = (0.0, 0usize);
    for (seg, &d) in phrase.segments.iter().zip(&durations) {
        let n = ((d * fs).round() as usize).max(1);
        let Some(k) = *seg else {
            signal.extend(std::iter::repeat(0.0).take(n));
            continue;
        };
        let ty = &inv[k];
        let (freq_factor, amps) = &spk.offsets[k];
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut seg_out = vec![0.0; n];
        for (res, a) in ty.resonances.iter().zip(amps) {
            let f = (res.freq * spk.formant_scale * freq_factor).min(nyquist_guard);
            for (o, y) in seg_out.iter_mut().zip(resonate(&noise, f, res.bandwidth, fs)) {
                *o += res.amplitude * a * y;
            }
        }
        let mut prev = 0.0;
        for v in seg_out.iter_mut() {
            let x = *v;
            *v = x + spk.tilt * prev;
            prev = x;
        }
        let rms = (seg_out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let scale = if rms > 0.0 { ty.level * spk.gain / rms } else { 0.0 };
        for (i, v) in seg_out.iter_mut().enumerate() {
            let edge = i.min(n - 1 - i);
            let w = if edge < fade {
                0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos()
            } else {
                1.0
            };
            *v *= scale * w;
            voiced_power.0 += *v * *v;
        }
        voiced_power.1 += n;
        signal.extend(seg_out);
    }
    let power = voiced_power.0 / voiced_power.1.max(1) as f64;
    let noise_std = (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    for v in &mut signal {
        let z: f64 = StandardNormal.sample(&mut r);
        *v = (*v + noise_std * z).clamp(-1.0, 1.0);
    }
    signal
}

/// Transcript of phrase `index` for this configuration's seed.
pub fn phrase_transcript(cfg: &SynthConfig, index: usize) -> Vec<String> {
    let inv = inventory(cfg);
    let mut c = cfg.clone();
    c.first_phrase = 0;
    c.num_phrases = index + 1;
    phrases(&c, &inv).pop().map(|p| p.labels).unwrap_or_default()
}

/// Writes `wav/<utt>.wav` files and `manifest.tsv` under `out_dir` and
/// returns the manifest. Utterance ids are `<phrase>_<speaker>_r<rep>`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let inv = inventory(cfg);
    let all_phrases = phrases(cfg, &inv);
    let phrase_set = &all_phrases[cfg.first_phrase..];
    let num_train = cfg.num_speakers - cfg.num_eval_speakers;
    let speakers: Vec<SpeakerSpec> = (0..cfg.num_speakers)
        .map(|i| speaker(cfg, &inv, cfg.first_speaker + i))
        .collect();

    let mut jobs = Vec::new();
    for (si, spk) in speakers.iter().enumerate() {
        let (split, reps) = if si < num_train {
            (Split::Train, cfg.reps_per_speaker)
        } else {
            (Split::Eval, cfg.eval_reps.unwrap_or(cfg.reps_per_speaker))
        };
        for p in phrase_set {
            for rep in 0..reps {
                jobs.push((p, spk, rep, split));
            }
        }
    }

    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let rows = jobs
        .par_iter()
        .map(|&(p, spk, rep, split)| {
            let utt_id = format!("{}_{}_r{rep}", p.id, spk.id);
            let audio = AudioBuffer::new(render(cfg, &inv, p, spk, rep), cfg.sample_rate)?;
            let rel = PathBuf::from("wav").join(format!("{utt_id}.wav"));
            write_wav(&out_dir.join(&rel), &audio)?;
            Ok(ManifestRow {
                utt_id,
                path: rel,
                phrase: p.id.clone(),
                speaker: spk.id.clone(),
                split,
                transcript: Some(p.labels.clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(rows, out_dir)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::read_wav;

    fn small() -> SynthConfig {
        SynthConfig {
            num_phrases: 3,
            num_speakers: 3,
            reps_per_speaker: 2,
            num_eval_speakers: 1,
            eval_reps: Some(1),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn phrases_are_unique_and_well_formed() {
        for seed in 0..4 {
            let cfg = SynthConfig {
                seed,
                num_phrases: 32,
                inventory_size: 3,
                ..SynthConfig::default()
            };
            let inv = inventory(&cfg);
            let ps = phrases(&cfg, &inv);
            let labels: HashSet<Vec<String>> = ps.iter().map(|p| p.labels.clone()).collect();
            assert_eq!(labels.len(), 32);
            for p in &ps {
                let n = p.labels.len() - 2;
                assert!((4..=8).contains(&n));
                assert_eq!(p.labels[0], SILENCE_LABEL);
                assert_eq!(p.labels.last().unwrap(), SILENCE_LABEL);
            }
        }
    }

    #[test]
    fn offsets_extend_the_same_phrase_sequence() {
        let base = small();
        let shifted = SynthConfig {
            first_phrase: 2,
            num_phrases: 2,
            ..base.clone()
        };
        let inv = inventory(&base);
        let a = phrases(&base, &inv);
        let b = phrases(&shifted, &inv);
        assert_eq!(a[2], b[2]);
        assert_eq!(phrase_transcript(&base, 1), a[1].labels);
    }

    #[test]
    fn corpus_is_counted_split_and_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = generate_synthetic_corpus(&cfg, d1.path()).unwrap();
        assert_eq!(m.len(), 3 * 2 * 2 + 3);
        assert_eq!(m.split(Split::Eval).count(), 3);
        let m2 = generate_synthetic_corpus(&cfg, d2.path()).unwrap();
        assert_eq!(m.rows, m2.rows);
        for r in &m.rows {
            let a = std::fs::read(m.resolve(r)).unwrap();
            let b = std::fs::read(m2.resolve(r)).unwrap();
            assert_eq!(a, b);
            let audio = read_wav::<f64>(&m.resolve(r)).unwrap();
            let secs = audio.duration_seconds();
            assert!((1.5 - 1e-3..=3.0 + 1e-3).contains(&secs), "{secs}");
        }
        let loaded = Manifest::load(&d1.path().join("manifest.tsv")).unwrap();
        assert_eq!(loaded.rows, m.rows);
    }

    #[test]
    fn counting_example() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_phrases: 10,
            num_speakers: 30,
            reps_per_speaker: 3,
            num_eval_speakers: 0,
            eval_reps: None,
            sample_rate: 8_000,
            min_duration: 0.3,
            max_duration: 0.4,
            ..SynthConfig::default()
        };
        let m = generate_synthetic_corpus(&cfg, dir.path()).unwrap();
        assert_eq!(m.len(), 900);
        assert_eq!(m.split(Split::Train).count(), 900);
    }

    #[test]
    fn resonator_peaks_at_its_frequency() {
        let fs = 16_000.0;
        let mut x = vec![0.0; 4096];
        x[0] = 1.0;
        let h = resonate(&x, 1_000.0, 100.0, fs);
        let mag = |f: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in h.iter().enumerate() {
                let a = 2.0 * PI * f * n as f64 / fs;
                re += v * a.cos();
                im -= v * a.sin();
            }
            (re * re + im * im).sqrt()
        };
        assert!((mag(1_000.0) - 1.0).abs() < 0.02);
        assert!(mag(500.0) < 0.2 && mag(2_000.0) < 0.2);
    }
}
