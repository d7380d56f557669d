use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use passkit::error::{Error, Result, StageExt};
use passkit::binio;
use passkit::eval;
use passkit::frontend;
use passkit::gmm::{self, DiagonalGmm};
use passkit::hmm::{self, MonophoneSet, Uv2Config};
use passkit::ivector::{self, AlignmentKind, IVectorArchive, TotalVariabilityModel};
use passkit::pipeline::experiment::{self, enrollment_rows, Aligner, BackendModel, BaselineSystem};
use passkit::pipeline::{self, Config, ExperimentConfig, Manifest, Split, SynthConfig};
use passkit::scoring::Normalization;

/// Pass-phrase classification and verification with i-vectors.
#[derive(Parser)]
#[command(name = "passkit", version)]
struct Cli {
    /// Configuration file (`key = value` lines, `include = file` allowed).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArg {
    /// Dataset manifest (TSV); defaults to the `manifest` key.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    /// GMM-UBM for GMM alignment.
    #[arg(long)]
    ubm: Option<PathBuf>,
    /// Monophone set for HMM alignment.
    #[arg(long)]
    mono: Option<PathBuf>,
    /// `gmm` or `hmm`; defaults to the `alignment` key.
    #[arg(long)]
    alignment: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract features to `.pkft` files plus a manifest pointing at them.
    Features {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the GMM-UBM on the train rows.
    TrainUbm {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train monophone HMMs on the train rows' transcripts.
    TrainMono {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a UBM-adapted left-to-right phrase HMM from a phrase's
    /// enrollment rows.
    TrainUv2 {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        ubm: PathBuf,
        #[arg(long)]
        phrase: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write zeroth/first-order statistics (`<utt>.pkst`) for every row.
    Stats {
        #[command(flatten)]
        manifest: ManifestArg,
        #[command(flatten)]
        align: AlignArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the total-variability model on the train rows.
    TrainTv {
        #[command(flatten)]
        manifest: ManifestArg,
        #[command(flatten)]
        align: AlignArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract i-vectors into `enroll.pkiv` and `eval.pkiv`.
    Extract {
        #[command(flatten)]
        manifest: ManifestArg,
        #[command(flatten)]
        align: AlignArgs,
        #[arg(long)]
        tv: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Enroll phrase models (cosine or LGC) from i-vectors.
    Enroll {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        ivectors: PathBuf,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score eval i-vectors against enrolled phrases.
    Score {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ivectors: PathBuf,
        /// `none` or `max-norm`.
        #[arg(long)]
        normalization: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trials with a baseline: uv1 (GMM-UBM), uv2 (phrase HMM) or uv3
    /// (DTW).
    BaselineScore {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        system: String,
        /// UBM to use; trained on the train rows when absent.
        #[arg(long)]
        ubm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pooled EER and classification error of a score file.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// Write `<prefix>.txt` and `<prefix>.json` as well as printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write i-vectors as CSV.
    ExportCsv {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        ivectors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full experiment from a manifest.
    Run {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut c = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    for s in &cli.set {
        c.apply_override(s)?;
    }
    if let Some(seed) = cli.seed {
        c.set("seed", seed.to_string());
    }
    Ok(c)
}

fn set_path(c: &mut Config, key: &str, p: &Option<PathBuf>) {
    if let Some(p) = p {
        c.set(key, p.display().to_string());
    }
}

fn manifest_from(c: &Config) -> Result<Manifest> {
    let p = c
        .path("manifest")
        .ok_or_else(|| Error::InvalidConfig("no manifest: pass --manifest or set 'manifest'".into()))?;
    Manifest::load(&p)
}

fn rows_of(m: &Manifest, split: Split) -> Vec<usize> {
    m.split(split).map(|(i, _)| i).collect()
}

fn aligner(cfg: &ExperimentConfig, manifest: &Manifest, align: &AlignArgs) -> Result<Aligner> {
    let alignment = match &align.alignment {
        Some(a) => a.parse()?,
        None if align.mono.is_some() && align.ubm.is_none() => AlignmentKind::Hmm,
        None => cfg.alignment,
    };
    let ubm = match align.ubm.as_ref().or(cfg.ubm_model.as_ref()) {
        Some(p) => Some(DiagonalGmm::load(p)?),
        None => None,
    };
    let mono = match align.mono.as_ref().or(cfg.mono_model.as_ref()) {
        Some(p) => Some(MonophoneSet::load(p)?),
        None => None,
    };
    let phrase_hmms = match (&mono, alignment) {
        (Some(m), AlignmentKind::Hmm) => manifest
            .phrases()
            .into_iter()
            .map(|p| {
                let t = manifest.phrase_transcript(&p)?;
                Ok((p, m.compose(&t)?))
            })
            .collect::<Result<_>>()?,
        _ => Default::default(),
    };
    match (alignment, &ubm, &mono) {
        (AlignmentKind::Gmm, None, _) => return Err(Error::InvalidConfig("GMM alignment needs --ubm".into())),
        (AlignmentKind::Hmm, _, None) => return Err(Error::InvalidConfig("HMM alignment needs --mono".into())),
        _ => {}
    }
    Ok(Aligner {
        alignment,
        ubm,
        mono,
        phrase_hmms,
    })
}

fn train_ubm(cfg: &ExperimentConfig, manifest: &Manifest, feats: &[frontend::FeatureMatrix<f64>]) -> Result<DiagonalGmm<f64>> {
    let train: Vec<_> = rows_of(manifest, Split::Train).into_iter().map(|i| feats[i].clone()).collect();
    Ok(gmm::train_ubm(&train, cfg.ubm_components, cfg.ubm_em_iters, cfg.seed)?.gmm)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut c = load_config(cli)?;
    match &cli.command {
        Command::Synth { out } => {
            let cfg = SynthConfig::from_config(&c)?;
            let m = pipeline::generate_synthetic_corpus(&cfg, out).stage("synth")?;
            println!("wrote {} utterances to {}", m.len(), out.join("manifest.tsv").display());
        }
        Command::Features { manifest, out } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            let cfg = ExperimentConfig::from_config(&c)?;
            let mut m = manifest_from(&c)?;
            let feats = pipeline::load_features(&m, &cfg.features).stage("features")?;
            m.rows
                .par_iter_mut()
                .zip(&feats)
                .map(|(r, f)| {
                    let name = PathBuf::from(format!("{}.pkft", r.utt_id));
                    frontend::write_features(&out.join(&name), f)?;
                    r.path = name;
                    Ok(())
                })
                .collect::<Result<()>>()
                .stage("features")?;
            m.base_dir = out.clone();
            m.save(&out.join("manifest.tsv"))?;
            println!("wrote {} feature files to {}", feats.len(), out.display());
        }
        Command::TrainUbm { manifest, out } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            let cfg = ExperimentConfig::from_config(&c)?;
            let m = manifest_from(&c)?;
            let feats = pipeline::load_features(&m, &cfg.features).stage("features")?;
            train_ubm(&cfg, &m, &feats).stage("ubm")?.save(out)?;
        }
        Command::TrainMono { manifest, out } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            let cfg = ExperimentConfig::from_config(&c)?;
            let m = manifest_from(&c)?;
            let feats = pipeline::load_features(&m, &cfg.features).stage("features")?;
            let train = rows_of(&m, Split::Train);
            let tf: Vec<_> = train.iter().map(|&i| feats[i].clone()).collect();
            let tr = train
                .iter()
                .map(|&i| {
                    m.rows[i]
                        .transcript
                        .clone()
                        .ok_or_else(|| Error::Manifest(format!("'{}' has no transcript", m.rows[i].utt_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let t = hmm::train_monophones(&tf, &tr, &cfg.mono).stage("mono")?;
            t.set.save(out)?;
        }
        Command::TrainUv2 {
            manifest,
            ubm,
            phrase,
            out,
        } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            let cfg = ExperimentConfig::from_config(&c)?;
            let m = manifest_from(&c)?;
            let ubm = DiagonalGmm::load(ubm)?;
            let rows: Vec<usize> = enrollment_rows(&m, cfg.enroll_speakers)?
                .into_iter()
                .filter(|&i| m.rows[i].phrase == *phrase)
                .collect();
            if rows.is_empty() {
                return Err(Error::Manifest(format!("no enrollment rows for phrase '{phrase}'")));
            }
            let sub = Manifest::new(rows.iter().map(|&i| m.rows[i].clone()).collect(), m.base_dir.clone())?;
            let feats = pipeline::load_features(&sub, &cfg.features).stage("features")?;
            let ucfg = Uv2Config {
                num_states: cfg.uv2_states,
                iters: cfg.uv2_iters,
                relevance_factor: cfg.relevance_factor,
            };
            hmm::train_uv2_model(&ubm, &feats, &ucfg).stage("uv2")?.save(out)?;
        }
        Command::Stats { manifest, align, out } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            let cfg = ExperimentConfig::from_config(&c)?;
            let m = manifest_from(&c)?;
            let al = aligner(&cfg, &m, align)?;
            let feats = pipeline::load_features(&m, &cfg.features).stage("features")?;
            m.rows
                .par_iter()
                .zip(&feats)
                .map(|(r, f)| al.stats(f, &r.phrase)?.save(&out.join(format!("{}.pkst", r.utt_id))))
                .collect::<Result<()>>()
                .stage("stats")?;
        }
        Command::TrainTv { manifest, align, out } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            let cfg = ExperimentConfig::from_config(&c)?;
            let m = manifest_from(&c)?;
            let al = aligner(&cfg, &m, align)?;
            let feats = pipeline::load_features(&m, &cfg.features).stage("features")?;
            let stats = rows_of(&m, Split::Train)
                .par_iter()
                .map(|&i| al.stats(&feats[i], &m.rows[i].phrase))
                .collect::<Result<Vec<_>>>()
                .stage("stats")?;
            let variances = al.variances()?;
            let t = ivector::train_tv(&stats, &variances, cfg.tv_rank, cfg.tv_iters, cfg.seed).stage("tv")?;
            t.model.save(out)?;
        }
        Command::Extract {
            manifest,
            align,
            tv,
            out,
        } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            let cfg = ExperimentConfig::from_config(&c)?;
            let m = manifest_from(&c)?;
            let al = aligner(&cfg, &m, align)?;
            let tv = TotalVariabilityModel::load(tv, &al.variances()?)?;
            let feats = pipeline::load_features(&m, &cfg.features).stage("features")?;
            let models = experiment::AcousticModels { aligner: al, tv };
            let set = pipeline::extract_ivectors(&models, &m, &feats).stage("extract")?;
            set.enrollment_archive(&m)?.save(&out.join("enroll.pkiv"))?;
            set.eval_archive(&m)?.save(&out.join("eval.pkiv"))?;
        }
        Command::Enroll {
            manifest,
            ivectors,
            backend,
            out,
        } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            if let Some(b) = backend {
                c.set("backend", b.clone());
            }
            let cfg = ExperimentConfig::from_config(&c)?;
            let m = manifest_from(&c)?;
            let arch = IVectorArchive::<f64>::load(ivectors)?;
            let mut samples = Vec::new();
            for i in enrollment_rows(&m, cfg.enroll_speakers)? {
                let r = &m.rows[i];
                if let Some(w) = arch.get(&r.utt_id) {
                    samples.push((r.phrase.clone(), w.to_vec()));
                }
            }
            let model = experiment::enroll_backend(&samples, &cfg.backend_spec()?).stage("enroll")?;
            binio::write_file(out, &model.encode()?)?;
        }
        Command::Score {
            manifest,
            model,
            ivectors,
            normalization,
            out,
        } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            let m = manifest_from(&c)?;
            let norm: Normalization = match normalization {
                Some(n) => n.parse()?,
                None => c.parse_or("normalization", Normalization::None)?,
            };
            let length_norm = c.parse_or("ivector.length_norm", false)?;
            let model = BackendModel::load(model)?;
            let arch = IVectorArchive::<f64>::load(ivectors)?;
            let scores = score_archive(&m, &model, &arch, norm, length_norm).stage("score")?;
            let tag = scores.first().map(|(_, n)| *n);
            let flat: Vec<eval::TrialScore> = scores.into_iter().flat_map(|(s, _)| s).collect();
            eval::write_scores(out, &flat, tag)?;
        }
        Command::BaselineScore {
            manifest,
            system,
            ubm,
            out,
        } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            let cfg = ExperimentConfig::from_config(&c)?;
            let system: BaselineSystem = system.parse()?;
            let m = manifest_from(&c)?;
            let feats = pipeline::load_features(&m, &cfg.features).stage("features")?;
            let ubm = match ubm {
                Some(p) => DiagonalGmm::load(p)?,
                None => train_ubm(&cfg, &m, &feats).stage("ubm")?,
            };
            let scores = experiment::score_baseline(system, &cfg, &m, &feats, &ubm).stage("baseline")?;
            eval::write_scores(out, &scores, None)?;
        }
        Command::Evaluate { scores, out } => {
            let (s, norm) = eval::read_scores(scores)?;
            let report = eval::evaluate(&s, norm).stage("evaluate")?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report.to_text());
            if let Some(prefix) = out {
                let with = |ext: &str| {
                    let mut p = prefix.clone().into_os_string();
                    p.push(ext);
                    PathBuf::from(p)
                };
                binio::write_file(&with(".txt"), report.to_text().as_bytes())?;
                binio::write_file(&with(".json"), report.to_json().as_bytes())?;
            }
        }
        Command::ExportCsv {
            manifest,
            ivectors,
            out,
        } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            let m = manifest_from(&c)?;
            let arch = IVectorArchive::load(ivectors)?;
            pipeline::export_ivectors_csv(&arch, &m, out).stage("export")?;
        }
        Command::Run { manifest, out } => {
            set_path(&mut c, "manifest", &manifest.manifest);
            set_path(&mut c, "out_dir", out);
            let cfg = ExperimentConfig::from_config(&c)?;
            let report = pipeline::run_experiment(&cfg)?;
            for w in &report.metrics.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report.metrics.to_text());
        }
    }
    Ok(())
}

/// Per eval row: trials against every enrolled phrase. Archive ids are
/// either `utt` (one vector for all claims) or `utt@phrase`.
fn score_archive(
    m: &Manifest,
    model: &BackendModel,
    arch: &IVectorArchive<f64>,
    norm: Normalization,
    length_norm: bool,
) -> Result<Vec<(Vec<eval::TrialScore>, Normalization)>> {
    let labels: Vec<&str> = model.labels().iter().map(String::as_str).collect();
    rows_of(m, Split::Eval)
        .into_iter()
        .map(|i| {
            let r = &m.rows[i];
            let lookup = |k: usize| arch.get(&format!("{}@{}", r.utt_id, labels[k])).or_else(|| arch.get(&r.utt_id));
            if (0..labels.len()).all(|k| lookup(k).is_none()) {
                return Err(Error::InvalidInput(format!("no i-vector for eval utterance '{}'", r.utt_id)));
            }
            let sv = experiment::score_utterance(model, norm, length_norm, lookup)?;
            let trials = eval::make_trials(&[(r.utt_id.as_str(), r.phrase.as_str())], &labels)?;
            let scores = trials
                .into_iter()
                .map(|t| {
                    let k = labels.iter().position(|l| *l == t.claimed).expect("claimed label is enrolled");
                    eval::TrialScore {
                        trial: t,
                        score: sv.scores[k],
                    }
                })
                .collect();
            Ok((scores, sv.normalization))
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
