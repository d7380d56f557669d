//! End-to-end experiment: features, alignment models, statistics, TV model,
//! i-vectors, backend enrollment, trial scoring and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::Config;
use super::manifest::{Manifest, Split};
use super::synth::SynthConfig;
use crate::baselines;
use crate::error::{Error, Result, StageExt};
use crate::eval::{self, EvalReport, TrialScore};
use crate::frontend::{self, FeatureMatrix, MfccConfig, MfccExtractor};
use crate::gmm::{self, DiagonalGmm};
use crate::hmm::{self, MonophoneConfig, MonophoneSet, PhraseHmm, Uv2Config};
use crate::ivector::{self, AlignmentKind, IVectorArchive, SufficientStats, TotalVariabilityModel};
use crate::linalg::{self, Matrix};
use crate::scoring::{self, CosineModel, LgcModel, Normalization, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Cosine,
    Lgc,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Cosine => "cosine",
            Backend::Lgc => "lgc",
        })
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Backend::Cosine),
            "lgc" => Ok(Backend::Lgc),
            other => Err(Error::InvalidConfig(format!("unknown backend '{other}' (cosine|lgc)"))),
        }
    }
}

/// Where the LGC within-class covariance comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceSource {
    /// Estimated from the enrollment i-vectors.
    SameManifest,
    /// Taken from a saved LGC model.
    External(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub features: MfccConfig,
    pub alignment: AlignmentKind,
    pub backend: Backend,
    pub normalization: Normalization,
    pub ubm_components: usize,
    pub ubm_em_iters: usize,
    pub mono: MonophoneConfig,
    pub tv_rank: usize,
    pub tv_iters: usize,
    pub length_norm: bool,
    pub lgc_shrinkage: f64,
    pub covariance: CovarianceSource,
    /// Enroll only the first `n` speakers (sorted ids) of the enrollment rows.
    pub enroll_speakers: Option<usize>,
    pub ubm_model: Option<PathBuf>,
    pub mono_model: Option<PathBuf>,
    pub tv_model: Option<PathBuf>,
    pub save_features: bool,
    pub save_stats: bool,
    pub relevance_factor: f64,
    pub uv2_states: usize,
    pub uv2_iters: usize,
    /// Templates per phrase for DTW scoring.
    pub uv3_templates: usize,
}

/// Every key the configuration file may contain.
pub const CONFIG_KEYS: &[&str] = &[
    "manifest",
    "out_dir",
    "seed",
    "alignment",
    "backend",
    "normalization",
    "features.window_length",
    "features.frame_shift",
    "features.num_mel_filters",
    "features.num_cepstra",
    "features.preemphasis",
    "features.delta_window",
    "features.cmvn",
    "features.low_freq",
    "features.high_freq",
    "features.sample_rate",
    "features.energy_drop",
    "ubm.components",
    "ubm.em_iters",
    "ubm.model",
    "mono.states_per_phone",
    "mono.components_per_state",
    "mono.iters",
    "mono.em_iters",
    "mono.model",
    "tv.rank",
    "tv.iters",
    "tv.model",
    "ivector.length_norm",
    "lgc.shrinkage",
    "covariance.source",
    "covariance.model",
    "enroll.speakers",
    "save_features",
    "save_stats",
    "baseline.relevance_factor",
    "baseline.uv2_states",
    "baseline.uv2_iters",
    "baseline.uv3_templates",
    "synth.num_phrases",
    "synth.num_speakers",
    "synth.reps",
    "synth.eval_speakers",
    "synth.eval_reps",
    "synth.first_phrase",
    "synth.first_speaker",
    "synth.inventory_size",
    "synth.speaker_variability",
    "synth.snr_db",
    "synth.sample_rate",
    "synth.min_duration",
    "synth.max_duration",
];

fn required_seed(c: &Config) -> Result<u64> {
    c.parse("seed")?
        .ok_or_else(|| Error::InvalidConfig("'seed' must be set explicitly".into()))
}

impl ExperimentConfig {
    /// Defaults for every key except `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            manifest: None,
            out_dir: None,
            seed,
            features: MfccConfig::default(),
            alignment: AlignmentKind::Gmm,
            backend: Backend::Cosine,
            normalization: Normalization::None,
            ubm_components: 64,
            ubm_em_iters: 5,
            mono: MonophoneConfig {
                seed,
                ..MonophoneConfig::default()
            },
            tv_rank: ivector::DEFAULT_TV_RANK,
            tv_iters: ivector::DEFAULT_TV_ITERS,
            length_norm: false,
            lgc_shrinkage: 0.0,
            covariance: CovarianceSource::SameManifest,
            enroll_speakers: None,
            ubm_model: None,
            mono_model: None,
            tv_model: None,
            save_features: false,
            save_stats: false,
            relevance_factor: gmm::DEFAULT_RELEVANCE_FACTOR,
            uv2_states: hmm::DEFAULT_UV2_STATES,
            uv2_iters: 5,
            uv3_templates: 5,
        }
    }

    pub fn from_config(c: &Config) -> Result<Self> {
        c.check_keys(CONFIG_KEYS)?;
        let seed = required_seed(c)?;
        let d = Self::with_seed(seed);
        let fd = d.features.clone();
        let features = MfccConfig {
            window_length: c.parse_or("features.window_length", fd.window_length)?,
            frame_shift: c.parse_or("features.frame_shift", fd.frame_shift)?,
            num_mel_filters: c.parse_or("features.num_mel_filters", fd.num_mel_filters)?,
            num_cepstra: c.parse_or("features.num_cepstra", fd.num_cepstra)?,
            preemphasis: c.parse_or("features.preemphasis", fd.preemphasis)?,
            delta_window: c.parse_or("features.delta_window", fd.delta_window)?,
            apply_cmvn: c.parse_or("features.cmvn", fd.apply_cmvn)?,
            low_freq: c.parse_or("features.low_freq", fd.low_freq)?,
            high_freq: c.parse("features.high_freq")?.or(fd.high_freq),
            sample_rate: c.parse_or("features.sample_rate", fd.sample_rate)?,
            energy_drop: c.parse("features.energy_drop")?.or(fd.energy_drop),
        };
        features.validate()?;
        let covariance = match c.get("covariance.source").unwrap_or("same") {
            "same" => CovarianceSource::SameManifest,
            "external" => CovarianceSource::External(c.path("covariance.model").ok_or_else(|| {
                Error::InvalidConfig("covariance.source = external needs covariance.model".into())
            })?),
            other => {
                return Err(Error::InvalidConfig(format!("unknown covariance.source '{other}' (same|external)")))
            }
        };
        let cfg = Self {
            manifest: c.path("manifest"),
            out_dir: c.path("out_dir"),
            seed,
            features,
            alignment: c.parse_or("alignment", d.alignment)?,
            backend: c.parse_or("backend", d.backend)?,
            normalization: c.parse_or("normalization", d.normalization)?,
            ubm_components: c.parse_or("ubm.components", d.ubm_components)?,
            ubm_em_iters: c.parse_or("ubm.em_iters", d.ubm_em_iters)?,
            mono: MonophoneConfig {
                states_per_phone: c.parse_or("mono.states_per_phone", d.mono.states_per_phone)?,
                components_per_state: c.parse_or("mono.components_per_state", d.mono.components_per_state)?,
                iters: c.parse_or("mono.iters", d.mono.iters)?,
                em_iters: c.parse_or("mono.em_iters", d.mono.em_iters)?,
                seed,
            },
            tv_rank: c.parse_or("tv.rank", d.tv_rank)?,
            tv_iters: c.parse_or("tv.iters", d.tv_iters)?,
            length_norm: c.parse_or("ivector.length_norm", d.length_norm)?,
            lgc_shrinkage: c.parse_or("lgc.shrinkage", d.lgc_shrinkage)?,
            covariance,
            enroll_speakers: c.parse("enroll.speakers")?,
            ubm_model: c.path("ubm.model"),
            mono_model: c.path("mono.model"),
            tv_model: c.path("tv.model"),
            save_features: c.parse_or("save_features", d.save_features)?,
            save_stats: c.parse_or("save_stats", d.save_stats)?,
            relevance_factor: c.parse_or("baseline.relevance_factor", d.relevance_factor)?,
            uv2_states: c.parse_or("baseline.uv2_states", d.uv2_states)?,
            uv2_iters: c.parse_or("baseline.uv2_iters", d.uv2_iters)?,
            uv3_templates: c.parse_or("baseline.uv3_templates", d.uv3_templates)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.backend == Backend::Lgc && self.normalization != Normalization::None {
            return bad("LGC scores are posteriors; max-norm applies to the cosine backend only".into());
        }
        if self.normalization == Normalization::Posterior {
            return bad("normalization must be none or max-norm".into());
        }
        if !(0.0..=1.0).contains(&self.lgc_shrinkage) {
            return bad(format!("lgc.shrinkage {} outside [0, 1]", self.lgc_shrinkage));
        }
        if self.enroll_speakers == Some(0) {
            return bad("enroll.speakers must be positive".into());
        }
        if self.uv3_templates == 0 {
            return bad("baseline.uv3_templates must be positive".into());
        }
        for p in [&self.ubm_model, &self.mono_model, &self.tv_model].into_iter().flatten() {
            if !p.is_file() {
                return bad(format!("model file {} does not exist", p.display()));
            }
        }
        if let CovarianceSource::External(p) = &self.covariance {
            if !p.is_file() {
                return bad(format!("covariance model {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn backend_spec(&self) -> Result<BackendSpec> {
        let covariance = match &self.covariance {
            CovarianceSource::SameManifest => None,
            CovarianceSource::External(p) => Some(LgcModel::<f64>::load(p)?.covariance().clone()),
        };
        Ok(BackendSpec {
            backend: self.backend,
            normalization: self.normalization,
            shrinkage: self.lgc_shrinkage,
            covariance,
            enroll_speakers: self.enroll_speakers,
            length_norm: self.length_norm,
        })
    }

    fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("'out_dir' is not set".into()))
    }
}

impl SynthConfig {
    /// Reads `seed` and the `synth.*` keys.
    pub fn from_config(c: &Config) -> Result<Self> {
        c.check_keys(CONFIG_KEYS)?;
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            seed: required_seed(c)?,
            num_phrases: c.parse_or("synth.num_phrases", d.num_phrases)?,
            num_speakers: c.parse_or("synth.num_speakers", d.num_speakers)?,
            reps_per_speaker: c.parse_or("synth.reps", d.reps_per_speaker)?,
            num_eval_speakers: c.parse_or("synth.eval_speakers", d.num_eval_speakers)?,
            eval_reps: c.parse("synth.eval_reps")?.or(d.eval_reps),
            first_phrase: c.parse_or("synth.first_phrase", d.first_phrase)?,
            first_speaker: c.parse_or("synth.first_speaker", d.first_speaker)?,
            inventory_size: c.parse_or("synth.inventory_size", d.inventory_size)?,
            speaker_variability: c.parse_or("synth.speaker_variability", d.speaker_variability)?,
            snr_db: c.parse_or("synth.snr_db", d.snr_db)?,
            sample_rate: c.parse_or("synth.sample_rate", d.sample_rate)?,
            min_duration: c.parse_or("synth.min_duration", d.min_duration)?,
            max_duration: c.parse_or("synth.max_duration", d.max_duration)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    /// Path relative to the output directory when it lies inside it.
    pub path: String,
    pub sha256: String,
}

/// Stage timings and written artifacts.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunLog {
    pub timings: Vec<StageTiming>,
    pub artifacts: Vec<Artifact>,
    #[serde(skip)]
    root: Option<PathBuf>,
}

impl RunLog {
    pub fn new(root: Option<&Path>) -> Self {
        Self {
            root: root.map(Path::to_path_buf),
            ..Self::default()
        }
    }

    /// Runs `f`, tagging its error with `stage` and recording the wall time.
    pub fn time<R>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let start = Instant::now();
        let out = f(self).stage(stage);
        let seconds = start.elapsed().as_secs_f64();
        log::info!("stage {stage}: {seconds:.2} s");
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds,
        });
        out
    }

    /// Writes `bytes` to `name` under the root and records its hash.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let root = self
            .root
            .clone()
            .ok_or_else(|| Error::InvalidConfig("no output directory".into()))?;
        let path = root.join(name);
        crate::binio::write_file(&path, bytes)?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Records an existing file that the run depends on.
    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.artifacts.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// `sha256sum`-style listing.
    pub fn checksums(&self) -> String {
        self.artifacts.iter().map(|a| format!("{}  {}\n", a.sha256, a.path)).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_feature_file(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "pkft")
}

/// Features for every manifest row, in row order. Rows pointing at `.pkft`
/// files are read as is; anything else is decoded as WAV and run through
/// the front end.
pub fn load_features(manifest: &Manifest, cfg: &MfccConfig) -> Result<Vec<FeatureMatrix<f64>>> {
    let extractor = MfccExtractor::<f64>::new(cfg.clone())?;
    manifest
        .rows
        .par_iter()
        .map(|r| {
            let p = manifest.resolve(r);
            if is_feature_file(&p) {
                frontend::read_features(&p)
            } else {
                frontend::extract_features(&frontend::read_wav(&p)?, &extractor)
            }
        })
        .collect()
}

fn rows_in(manifest: &Manifest, split: Split) -> Vec<usize> {
    manifest.split(split).map(|(i, _)| i).collect()
}

/// Rows used for enrollment: the `enroll` split if present, else `train`,
/// restricted to the first `speakers` speaker ids in sorted order.
pub fn enrollment_rows(manifest: &Manifest, speakers: Option<usize>) -> Result<Vec<usize>> {
    let mut rows = rows_in(manifest, Split::Enroll);
    if rows.is_empty() {
        rows = rows_in(manifest, Split::Train);
    }
    if rows.is_empty() {
        return Err(Error::Manifest("no enroll or train rows to enroll from".into()));
    }
    if let Some(n) = speakers {
        let all: BTreeSet<&str> = rows.iter().map(|&i| manifest.rows[i].speaker.as_str()).collect();
        if n > all.len() {
            return Err(Error::InvalidConfig(format!(
                "asked for {n} enrollment speakers, only {} available",
                all.len()
            )));
        }
        let keep: BTreeSet<&str> = all.into_iter().take(n).collect();
        rows.retain(|&i| keep.contains(manifest.rows[i].speaker.as_str()));
    }
    Ok(rows)
}

/// Sorted phrases of the rows.
fn phrases_of(manifest: &Manifest, rows: &[usize]) -> Vec<String> {
    rows.iter()
        .map(|&i| manifest.rows[i].phrase.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Frame-alignment models.
#[derive(Debug, Clone)]
pub struct Aligner {
    pub alignment: AlignmentKind,
    pub ubm: Option<DiagonalGmm<f64>>,
    pub mono: Option<MonophoneSet<f64>>,
    /// Composed phrase HMMs under HMM alignment.
    pub phrase_hmms: BTreeMap<String, PhraseHmm<f64>>,
}

impl Aligner {
    /// Statistics of `features` for an utterance of (or claimed to be)
    /// `phrase`.
    pub fn stats(&self, features: &FeatureMatrix<f64>, phrase: &str) -> Result<SufficientStats<f64>> {
        match (self.alignment, &self.ubm, &self.mono) {
            (AlignmentKind::Gmm, Some(ubm), _) => ivector::collect_stats_gmm(ubm, features),
            (AlignmentKind::Hmm, _, Some(mono)) => {
                let h = self
                    .phrase_hmms
                    .get(phrase)
                    .ok_or_else(|| Error::Manifest(format!("no phrase HMM for '{phrase}'")))?;
                ivector::collect_stats_hmm(mono, h, features)
            }
            _ => Err(Error::InvalidInput(format!("no model for {} alignment", self.alignment))),
        }
    }

    /// Diagonal covariances of the component inventory statistics refer to.
    pub fn variances(&self) -> Result<Vec<f64>> {
        match (self.alignment, &self.ubm, &self.mono) {
            (AlignmentKind::Gmm, Some(ubm), _) => Ok(ubm.variances().to_vec()),
            (AlignmentKind::Hmm, _, Some(mono)) => Ok(mono.inventory_gmm()?.variances().to_vec()),
            _ => Err(Error::InvalidInput(format!("no model for {} alignment", self.alignment))),
        }
    }
}

/// Alignment and i-vector models.
#[derive(Debug, Clone)]
pub struct AcousticModels {
    pub aligner: Aligner,
    pub tv: TotalVariabilityModel<f64>,
}

impl AcousticModels {
    pub fn alignment(&self) -> AlignmentKind {
        self.aligner.alignment
    }

    /// I-vector, or `None` when the utterance cannot traverse the phrase HMM.
    pub fn ivector(&self, features: &FeatureMatrix<f64>, phrase: &str) -> Result<Option<Vec<f64>>> {
        match self.aligner.stats(features, phrase) {
            Ok(s) => Ok(Some(ivector::extract_ivector(&self.tv, &s)?)),
            Err(Error::AlignmentInfeasible { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

fn compose_phrases(mono: &MonophoneSet<f64>, manifest: &Manifest) -> Result<BTreeMap<String, PhraseHmm<f64>>> {
    manifest
        .phrases()
        .into_iter()
        .map(|p| {
            let t = manifest.phrase_transcript(&p)?;
            let h = mono.compose(&t)?;
            Ok((p, h))
        })
        .collect()
}

/// Trains (or loads, when configured) the UBM, monophones and TV model on
/// the `train` rows, writing each model under the log's root.
pub fn train_models(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    features: &[FeatureMatrix<f64>],
    log: &mut RunLog,
) -> Result<AcousticModels> {
    let train = rows_in(manifest, Split::Train);
    let train_feats: Vec<FeatureMatrix<f64>> = train.iter().map(|&i| features[i].clone()).collect();
    let persist = log.root.is_some();

    let need_ubm = cfg.alignment == AlignmentKind::Gmm || cfg.ubm_model.is_some();
    let ubm = if need_ubm {
        Some(log.time("ubm", |log| match &cfg.ubm_model {
            Some(p) => {
                log.record_input(p)?;
                DiagonalGmm::load(p)
            }
            None => {
                let t = gmm::train_ubm(&train_feats, cfg.ubm_components, cfg.ubm_em_iters, cfg.seed)?;
                if persist {
                    log.write("ubm.pkgm", &t.gmm.encode()?)?;
                }
                Ok(t.gmm)
            }
        })?)
    } else {
        None
    };

    let (mono, phrase_hmms) = if cfg.alignment == AlignmentKind::Hmm {
        let mono = log.time("mono", |log| match &cfg.mono_model {
            Some(p) => {
                log.record_input(p)?;
                MonophoneSet::load(p)
            }
            None => {
                let transcripts = train
                    .iter()
                    .map(|&i| {
                        manifest.rows[i]
                            .transcript
                            .clone()
                            .ok_or_else(|| Error::Manifest(format!("'{}' has no transcript", manifest.rows[i].utt_id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let t = hmm::train_monophones(&train_feats, &transcripts, &cfg.mono)?;
                if persist {
                    log.write("mono.pkhm", &t.set.encode()?)?;
                }
                Ok(t.set)
            }
        })?;
        let hmms = compose_phrases(&mono, manifest).stage("mono")?;
        (Some(mono), hmms)
    } else {
        (None, BTreeMap::new())
    };

    let aligner = Aligner {
        alignment: cfg.alignment,
        ubm,
        mono,
        phrase_hmms,
    };
    let variances = aligner.variances().stage("tv")?;

    let tv = match &cfg.tv_model {
        Some(p) => log.time("tv", |log| {
            log.record_input(p)?;
            TotalVariabilityModel::load(p, &variances)
        })?,
        None => {
            let stats = log.time("stats", |log| {
                let stats: Vec<(usize, Option<SufficientStats<f64>>)> = train
                    .par_iter()
                    .map(|&i| match aligner.stats(&features[i], &manifest.rows[i].phrase) {
                        Ok(s) => Ok((i, Some(s))),
                        Err(Error::AlignmentInfeasible { frames, states }) => {
                            log::warn!(
                                "skipping '{}': {frames} frames for {states} states",
                                manifest.rows[i].utt_id
                            );
                            Ok((i, None))
                        }
                        Err(e) => Err(e),
                    })
                    .collect::<Result<_>>()?;
                if cfg.save_stats && persist {
                    for (i, s) in &stats {
                        if let Some(s) = s {
                            log.write(&format!("stats/{}.pkst", manifest.rows[*i].utt_id), &s.encode()?)?;
                        }
                    }
                }
                Ok(stats.into_iter().filter_map(|(_, s)| s).collect::<Vec<_>>())
            })?;
            log.time("tv", |log| {
                let t = ivector::train_tv(&stats, &variances, cfg.tv_rank, cfg.tv_iters, cfg.seed)?;
                if t.ridged > 0 {
                    log::warn!("TV training ridged {} singular component system(s)", t.ridged);
                }
                if persist {
                    log.write("tv.pktv", &t.model.encode()?)?;
                }
                Ok(t.model)
            })?
        }
    };
    Ok(AcousticModels { aligner, tv })
}

/// One manifest row's i-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedUtterance {
    pub row: usize,
    /// Under the utterance's own phrase (GMM alignment: the only vector).
    pub own: Option<Vec<f64>>,
    /// Eval rows under HMM alignment: one vector per entry of
    /// [`IVectorSet::phrases`]. Empty otherwise.
    pub claims: Vec<Option<Vec<f64>>>,
}

impl EmbeddedUtterance {
    fn claim_vector(&self, k: usize) -> Option<&[f64]> {
        if self.claims.is_empty() {
            self.own.as_deref()
        } else {
            self.claims[k].as_deref()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVectorSet {
    pub alignment: AlignmentKind,
    pub rank: usize,
    /// Candidate phrases (the phrases of the enrollment rows), sorted.
    pub phrases: Vec<String>,
    pub utterances: Vec<EmbeddedUtterance>,
}

impl IVectorSet {
    /// Archive of the non-eval rows, keyed by utterance id.
    pub fn enrollment_archive(&self, manifest: &Manifest) -> Result<IVectorArchive<f64>> {
        let mut a = IVectorArchive::new(self.rank);
        for u in &self.utterances {
            let r = &manifest.rows[u.row];
            if r.split != Split::Eval {
                if let Some(w) = &u.own {
                    a.push(r.utt_id.clone(), w.clone())?;
                }
            }
        }
        Ok(a)
    }

    /// Archive of the eval rows. Under HMM alignment each utterance has one
    /// entry per candidate phrase, keyed `utt@phrase`.
    pub fn eval_archive(&self, manifest: &Manifest) -> Result<IVectorArchive<f64>> {
        let mut a = IVectorArchive::new(self.rank);
        for u in &self.utterances {
            let r = &manifest.rows[u.row];
            if r.split != Split::Eval {
                continue;
            }
            if u.claims.is_empty() {
                if let Some(w) = &u.own {
                    a.push(r.utt_id.clone(), w.clone())?;
                }
            } else {
                for (p, w) in self.phrases.iter().zip(&u.claims) {
                    if let Some(w) = w {
                        a.push(format!("{}@{p}", r.utt_id), w.clone())?;
                    }
                }
            }
        }
        Ok(a)
    }
}

/// I-vectors for every row. Under HMM alignment eval rows are embedded once
/// per candidate phrase, aligned to that phrase's HMM.
pub fn extract_ivectors(models: &AcousticModels, manifest: &Manifest, features: &[FeatureMatrix<f64>]) -> Result<IVectorSet> {
    let enroll = enrollment_rows(manifest, None)?;
    let phrases = phrases_of(manifest, &enroll);
    let per_claim = models.alignment() == AlignmentKind::Hmm;
    let utterances = (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let r = &manifest.rows[i];
            let feats = &features[i];
            if per_claim && r.split == Split::Eval {
                let claims = phrases
                    .iter()
                    .map(|p| models.ivector(feats, p))
                    .collect::<Result<Vec<_>>>()?;
                let own = phrases.iter().position(|p| *p == r.phrase).and_then(|k| claims[k].clone());
                Ok(EmbeddedUtterance { row: i, own, claims })
            } else {
                Ok(EmbeddedUtterance {
                    row: i,
                    own: models.ivector(feats, &r.phrase)?,
                    claims: Vec::new(),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IVectorSet {
        alignment: models.alignment(),
        rank: models.tv.rank(),
        phrases,
        utterances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendSpec {
    pub backend: Backend,
    pub normalization: Normalization,
    pub shrinkage: f64,
    /// Externally supplied LGC covariance.
    pub covariance: Option<Matrix<f64>>,
    pub enroll_speakers: Option<usize>,
    pub length_norm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendModel {
    Cosine(CosineModel<f64>),
    Lgc(LgcModel<f64>),
}

impl BackendModel {
    pub fn labels(&self) -> &[String] {
        match self {
            BackendModel::Cosine(m) => m.labels(),
            BackendModel::Lgc(m) => m.labels(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        match self {
            BackendModel::Cosine(m) => m.encode(),
            BackendModel::Lgc(m) => m.encode(),
        }
    }

    pub fn file_name(&self) -> &'static str {
        match self {
            BackendModel::Cosine(_) => "backend.pkcs",
            BackendModel::Lgc(_) => "backend.pklg",
        }
    }

    /// Reads either backend format, dispatching on the magic.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::binio::read_file(path)?;
        if bytes.starts_with(scoring::LGC_MAGIC) {
            Ok(BackendModel::Lgc(LgcModel::decode(&bytes)?))
        } else {
            Ok(BackendModel::Cosine(CosineModel::decode(&bytes)?))
        }
    }

    /// Raw score of class `k` for vector `w`.
    pub fn class_score(&self, w: &[f64], k: usize) -> Result<f64> {
        Ok(match self {
            BackendModel::Cosine(m) => scoring::cosine_scores(m, w)?.scores[k],
            BackendModel::Lgc(m) => scoring::lgc_posteriors(m, w)?.scores[k],
        })
    }

    pub fn raw_normalization(&self) -> Normalization {
        match self {
            BackendModel::Cosine(_) => Normalization::None,
            BackendModel::Lgc(_) => Normalization::Posterior,
        }
    }
}

/// Enrolls phrase models from labelled vectors.
pub fn enroll_backend(samples: &[(String, Vec<f64>)], spec: &BackendSpec) -> Result<BackendModel> {
    let mut samples = samples.to_vec();
    samples.sort_by(|a, b| a.0.cmp(&b.0));
    if spec.length_norm {
        for (_, w) in &mut samples {
            normalize_in_place(w);
        }
    }
    Ok(match spec.backend {
        Backend::Cosine => BackendModel::Cosine(CosineModel::enroll(&samples)?),
        Backend::Lgc => BackendModel::Lgc(match &spec.covariance {
            Some(cov) => LgcModel::with_covariance(&samples, cov.clone())?,
            None => LgcModel::train(&samples, spec.shrinkage)?,
        }),
    })
}

fn normalize_in_place(w: &mut [f64]) {
    let n = linalg::norm(w);
    if n > 0.0 {
        w.iter_mut().for_each(|v| *v /= n);
    }
}

/// Scores of one utterance against every enrolled phrase. `vector(k)`
/// yields the test vector for claim `k`; a missing vector scores `-∞`.
pub fn score_utterance<'a>(
    model: &BackendModel,
    normalization: Normalization,
    length_norm: bool,
    vector: impl Fn(usize) -> Option<&'a [f64]>,
) -> Result<ScoreVector<f64>> {
    let k = model.labels().len();
    let mut raw = Vec::with_capacity(k);
    for i in 0..k {
        raw.push(match vector(i) {
            None => f64::NEG_INFINITY,
            Some(w) if length_norm => {
                let mut w = w.to_vec();
                normalize_in_place(&mut w);
                model.class_score(&w, i)?
            }
            Some(w) => model.class_score(w, i)?,
        });
    }
    let sv = ScoreVector::new(raw, model.raw_normalization());
    match normalization {
        Normalization::MaxNorm => scoring::max_norm(&sv),
        _ => Ok(sv),
    }
}

#[derive(Debug, Clone)]
pub struct ScoredTrials {
    pub model: BackendModel,
    pub scores: Vec<TrialScore>,
    pub normalization: Normalization,
    pub report: EvalReport,
}

/// Enrolls the backend on the enrollment rows and scores every eval row
/// against every enrolled phrase.
pub fn score_ivectors(set: &IVectorSet, manifest: &Manifest, spec: &BackendSpec) -> Result<ScoredTrials> {
    let by_row: BTreeMap<usize, &EmbeddedUtterance> = set.utterances.iter().map(|u| (u.row, u)).collect();
    let enroll = enrollment_rows(manifest, spec.enroll_speakers)?;
    let samples: Vec<(String, Vec<f64>)> = enroll
        .iter()
        .filter_map(|i| {
            let w = by_row.get(i)?.own.clone()?;
            Some((manifest.rows[*i].phrase.clone(), w))
        })
        .collect();
    let model = enroll_backend(&samples, spec).stage("enroll")?;
    let labels = model.labels().to_vec();
    let claim_index: Vec<usize> = labels
        .iter()
        .map(|l| {
            set.phrases
                .iter()
                .position(|p| p == l)
                .ok_or_else(|| Error::InvalidInput(format!("enrolled phrase '{l}' has no embeddings")))
        })
        .collect::<Result<_>>()?;

    let eval_rows = rows_in(manifest, Split::Eval);
    let pairs: Vec<(&str, &str)> = eval_rows
        .iter()
        .map(|&i| (manifest.rows[i].utt_id.as_str(), manifest.rows[i].phrase.as_str()))
        .collect();
    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let trials = eval::make_trials(&pairs, &label_refs).stage("score")?;

    let vectors = eval_rows
        .par_iter()
        .map(|i| {
            let u = by_row
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("row {i} was not embedded")))?;
            score_utterance(&model, spec.normalization, spec.length_norm, |k| {
                u.claim_vector(claim_index[k])
            })
        })
        .collect::<Result<Vec<_>>>()
        .stage("score")?;
    let normalization = vectors
        .first()
        .map(|v| v.normalization)
        .unwrap_or(model.raw_normalization());

    let index: BTreeMap<&str, usize> = label_refs.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let row_pos: BTreeMap<&str, usize> = pairs.iter().enumerate().map(|(i, (u, _))| (*u, i)).collect();
    let scores: Vec<TrialScore> = trials
        .into_iter()
        .map(|t| {
            let s = vectors[row_pos[t.utterance.as_str()]].scores[index[t.claimed.as_str()]];
            TrialScore { trial: t, score: s }
        })
        .collect();
    let report = eval::evaluate(&scores, Some(normalization)).stage("evaluate")?;
    Ok(ScoredTrials {
        model,
        scores,
        normalization,
        report,
    })
}

/// Summary of a full run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub metrics: EvalReport,
    pub alignment: String,
    pub backend: String,
    pub num_train: usize,
    pub num_enroll: usize,
    pub num_eval: usize,
    pub log: RunLog,
}

/// Runs every stage and writes the models, i-vector archives, scores,
/// `metrics.txt`, `metrics.json`, `artifacts.sha256` and `report.json`
/// (which adds wall-clock timings) to the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let manifest_path = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("'manifest' is not set".into()))?;
    let out_dir = cfg.require_out_dir()?;
    let mut log = RunLog::new(Some(out_dir));
    let manifest = log.time("manifest", |_| Manifest::load(manifest_path))?;
    let spec = cfg.backend_spec().stage("enroll")?;

    let features = log.time("features", |log| {
        let f = load_features(&manifest, &cfg.features)?;
        if cfg.save_features {
            for (r, m) in manifest.rows.iter().zip(&f) {
                log.write(&format!("features/{}.pkft", r.utt_id), &frontend::encode_features(m)?)?;
            }
        }
        Ok(f)
    })?;
    let models = train_models(cfg, &manifest, &features, &mut log)?;
    let set = log.time("extract", |log| {
        let set = extract_ivectors(&models, &manifest, &features)?;
        log.write("enroll.pkiv", &set.enrollment_archive(&manifest)?.encode()?)?;
        log.write("eval.pkiv", &set.eval_archive(&manifest)?.encode()?)?;
        Ok(set)
    })?;
    let scored = log.time("score", |log| {
        let scored = score_ivectors(&set, &manifest, &spec)?;
        log.write(scored.model.file_name(), &scored.model.encode()?)?;
        log.write(
            "scores.tsv",
            eval::format_scores(&scored.scores, Some(scored.normalization)).as_bytes(),
        )?;
        Ok(scored)
    })?;
    log.time("report", |log| {
        log.write("metrics.txt", scored.report.to_text().as_bytes())?;
        log.write("metrics.json", scored.report.to_json().as_bytes())?;
        Ok(())
    })?;
    let checksums = log.checksums();
    crate::binio::write_file(&out_dir.join("artifacts.sha256"), checksums.as_bytes())?;

    let report = ExperimentReport {
        metrics: scored.report,
        alignment: cfg.alignment.to_string(),
        backend: cfg.backend.to_string(),
        num_train: rows_in(&manifest, Split::Train).len(),
        num_enroll: enrollment_rows(&manifest, cfg.enroll_speakers)?.len(),
        num_eval: rows_in(&manifest, Split::Eval).len(),
        log,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    crate::binio::write_file(&out_dir.join("report.json"), json.as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineSystem {
    Uv1,
    Uv2,
    Uv3,
}

impl std::str::FromStr for BaselineSystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uv1" => Ok(Self::Uv1),
            "uv2" => Ok(Self::Uv2),
            "uv3" => Ok(Self::Uv3),
            other => Err(Error::InvalidConfig(format!("unknown baseline '{other}' (uv1|uv2|uv3)"))),
        }
    }
}

/// Baseline trial scores: phrase models (MAP-adapted GMMs, phrase HMMs or
/// DTW templates) built from the enrollment rows, scored on every trial.
pub fn score_baseline(
    system: BaselineSystem,
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    features: &[FeatureMatrix<f64>],
    ubm: &DiagonalGmm<f64>,
) -> Result<Vec<TrialScore>> {
    let enroll = enrollment_rows(manifest, cfg.enroll_speakers)?;
    let phrases = phrases_of(manifest, &enroll);
    let of_phrase = |p: &str| -> Vec<FeatureMatrix<f64>> {
        enroll
            .iter()
            .filter(|&&i| manifest.rows[i].phrase == p)
            .map(|&i| features[i].clone())
            .collect()
    };
    enum PhraseModel {
        Gmm(DiagonalGmm<f64>),
        Hmm(PhraseHmm<f64>),
        Templates(Vec<FeatureMatrix<f64>>),
    }
    let models: Vec<PhraseModel> = phrases
        .par_iter()
        .map(|p| {
            let feats = of_phrase(p);
            Ok(match system {
                BaselineSystem::Uv1 => {
                    let mut acc = gmm::GaussianAccumulator::new(ubm.num_components(), ubm.dim());
                    for f in &feats {
                        acc.accumulate(ubm, f);
                    }
                    PhraseModel::Gmm(gmm::map_means_from_stats(ubm, &acc.zeroth, &acc.first, cfg.relevance_factor)?)
                }
                BaselineSystem::Uv2 => PhraseModel::Hmm(hmm::train_uv2_model(
                    ubm,
                    &feats,
                    &Uv2Config {
                        num_states: cfg.uv2_states,
                        iters: cfg.uv2_iters,
                        relevance_factor: cfg.relevance_factor,
                    },
                )?),
                BaselineSystem::Uv3 => PhraseModel::Templates(feats.into_iter().take(cfg.uv3_templates).collect()),
            })
        })
        .collect::<Result<_>>()?;

    let eval_rows = rows_in(manifest, Split::Eval);
    let pairs: Vec<(&str, &str)> = eval_rows
        .iter()
        .map(|&i| (manifest.rows[i].utt_id.as_str(), manifest.rows[i].phrase.as_str()))
        .collect();
    let phrase_refs: Vec<&str> = phrases.iter().map(String::as_str).collect();
    let trials = eval::make_trials(&pairs, &phrase_refs)?;
    let index: BTreeMap<&str, usize> = phrase_refs.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let row_of: BTreeMap<&str, usize> = eval_rows.iter().map(|&i| (manifest.rows[i].utt_id.as_str(), i)).collect();
    trials
        .into_par_iter()
        .map(|t| {
            let f = &features[row_of[t.utterance.as_str()]];
            let score = match &models[index[t.claimed.as_str()]] {
                PhraseModel::Gmm(g) => baselines::uv1_score(g, ubm, f)?,
                PhraseModel::Hmm(h) => baselines::uv2_score(h, ubm, f)?,
                PhraseModel::Templates(ts) => baselines::uv3_score(ts, f)?,
            };
            Ok(TrialScore { trial: t, score })
        })
        .collect()
}
