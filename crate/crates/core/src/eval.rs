//! Trial lists, pooled equal error rate, classification error and the
//! score/metrics file formats.
//!
//! Score files are UTF-8 text. An optional first line
//! `# normalization=<none|max-norm|posterior>` records how the scores were
//! normalized; every other line is
//! `trial-id<TAB>claimed-phrase<TAB>target|nontarget<TAB>score`, where the
//! trial id is the test utterance id. `-inf` marks a rejected trial.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::Normalization;

/// Warning attached to pooled EERs of close-set (normalized) scores.
pub const CLOSE_SET_WARNING: &str =
    "close-set-normalization: scores depend on competing phrases, so the pooled EER is questionable";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Target => "target",
            Self::Nontarget => "nontarget",
        })
    }
}

impl std::str::FromStr for TrialLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Self::Target),
            "nontarget" => Ok(Self::Nontarget),
            other => Err(Error::InvalidInput(format!("unknown trial label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub utterance: String,
    pub claimed: String,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub trial: Trial,
    pub score: f64,
}

/// One target trial and one nontarget trial per other enrolled phrase for
/// every utterance; claims follow the order of `enrolled`.
pub fn make_trials<S: AsRef<str>, P: AsRef<str>>(eval_utterances: &[(S, P)], enrolled: &[P]) -> Result<Vec<Trial>> {
    let known: HashSet<&str> = enrolled.iter().map(AsRef::as_ref).collect();
    let mut out = Vec::with_capacity(eval_utterances.len() * enrolled.len());
    for (utt, truth) in eval_utterances {
        if !known.contains(truth.as_ref()) {
            return Err(Error::InvalidInput(format!(
                "utterance '{}' has unenrolled phrase '{}'",
                utt.as_ref(),
                truth.as_ref()
            )));
        }
        out.push(Trial {
            utterance: utt.as_ref().to_string(),
            claimed: truth.as_ref().to_string(),
            label: TrialLabel::Target,
        });
        for p in enrolled.iter().filter(|p| p.as_ref() != truth.as_ref()) {
            out.push(Trial {
                utterance: utt.as_ref().to_string(),
                claimed: p.as_ref().to_string(),
                label: TrialLabel::Nontarget,
            });
        }
    }
    Ok(out)
}

/// Equal error rate of target and nontarget score lists.
///
/// A trial is accepted when its score is at least the threshold. Operating
/// points are taken at `-∞`, at every distinct score and at `+∞`; the EER is
/// where the segment between the last point with miss < false-accept and the
/// next one crosses miss = false-accept, by linear interpolation.
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::MissingTrials(format!(
            "{} target and {} nontarget scores",
            targets.len(),
            nontargets.len()
        )));
    }
    if targets.iter().chain(nontargets).any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);
    // Threshold below everything: all accepted.
    let mut misses = 0usize;
    let mut accepted_non = nontargets.len();
    let mut prev = (1.0_f64, 0.0_f64);
    let mut i = 0;
    while i < all.len() {
        // Raise the threshold just above the scores equal to all[i].
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                misses += 1;
            } else {
                accepted_non -= 1;
            }
            i += 1;
        }
        let point = (accepted_non as f64 / nn, misses as f64 / nt);
        if point.1 >= point.0 {
            return Ok(crossing(prev, point));
        }
        prev = point;
    }
    // Everything rejected is (0, 1), which always crosses; not reached.
    Ok(crossing(prev, (0.0, 1.0)))
}

/// Crossing of the segment `a → b` (as `(fa, miss)`) with `fa = miss`, where
/// `a` has miss < fa and `b` has miss ≥ fa.
fn crossing(a: (f64, f64), b: (f64, f64)) -> f64 {
    let da = a.0 - a.1;
    let db = b.0 - b.1;
    if da <= 0.0 {
        return a.0;
    }
    let alpha = da / (da - db);
    a.0 + alpha * (b.0 - a.0)
}

/// Pooled EER over all trials.
pub fn compute_eer(scores: &[TrialScore]) -> Result<f64> {
    let (t, n) = split_scores(scores.iter());
    eer_from_scores(&t, &n)
}

fn split_scores<'a>(scores: impl Iterator<Item = &'a TrialScore>) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::new();
    let mut n = Vec::new();
    for s in scores {
        match s.trial.label {
            TrialLabel::Target => t.push(s.score),
            TrialLabel::Nontarget => n.push(s.score),
        }
    }
    (t, n)
}

/// Fraction of `(predicted, true)` pairs that differ.
pub fn classification_error<S: AsRef<str>>(predictions: &[(S, S)]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InsufficientData("no predictions".into()));
    }
    let wrong = predictions.iter().filter(|(p, t)| p.as_ref() != t.as_ref()).count();
    Ok(wrong as f64 / predictions.len() as f64)
}

/// Per utterance, the claim with the highest score against the claim of its
/// target trial. Ties go to the lexicographically smallest phrase id, so the
/// target's position in the file cannot win a tie.
pub fn predictions_from_scores(scores: &[TrialScore]) -> Result<Vec<(String, String)>> {
    let mut order: Vec<&str> = Vec::new();
    let mut best: BTreeMap<&str, (&str, f64)> = BTreeMap::new();
    let mut truth: BTreeMap<&str, &str> = BTreeMap::new();
    for s in scores {
        let u = s.trial.utterance.as_str();
        match best.get_mut(u) {
            Some(b) => {
                if s.score > b.1 || (s.score == b.1 && s.trial.claimed.as_str() < b.0) {
                    *b = (s.trial.claimed.as_str(), s.score);
                }
            }
            None => {
                order.push(u);
                best.insert(u, (s.trial.claimed.as_str(), s.score));
            }
        }
        if s.trial.label == TrialLabel::Target && truth.insert(u, s.trial.claimed.as_str()).is_some() {
            return Err(Error::InvalidInput(format!("utterance '{u}' has two target trials")));
        }
    }
    order
        .into_iter()
        .map(|u| {
            let t = truth
                .get(u)
                .ok_or_else(|| Error::MissingTrials(format!("utterance '{u}' has no target trial")))?;
            Ok((best[u].0.to_string(), t.to_string()))
        })
        .collect()
}

pub fn format_scores(scores: &[TrialScore], normalization: Option<Normalization>) -> String {
    let mut out = String::new();
    if let Some(n) = normalization {
        out.push_str(&format!("# normalization={n}\n"));
    }
    for s in scores {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.trial.utterance, s.trial.claimed, s.trial.label, s.score
        ));
    }
    out
}

pub fn write_scores(path: &Path, scores: &[TrialScore], normalization: Option<Normalization>) -> Result<()> {
    crate::binio::write_file(path, format_scores(scores, normalization).as_bytes())
}

pub fn parse_scores(text: &str) -> Result<(Vec<TrialScore>, Option<Normalization>)> {
    let mut normalization = None;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("normalization=") {
                normalization = Some(v.trim().parse()?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "score line {}: expected 4 tab-separated fields, found {}",
                no + 1,
                fields.len()
            )));
        }
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("score line {}: bad score '{}'", no + 1, fields[3])))?;
        if score.is_nan() || score == f64::INFINITY {
            return Err(Error::InvalidInput(format!("score line {}: score must be finite or -inf", no + 1)));
        }
        out.push(TrialScore {
            trial: Trial {
                utterance: fields[0].to_string(),
                claimed: fields[1].to_string(),
                label: fields[2].parse()?,
            },
            score,
        });
    }
    Ok((out, normalization))
}

pub fn read_scores(path: &Path) -> Result<(Vec<TrialScore>, Option<Normalization>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text)
}

/// Evaluation summary. The JSON form carries `schema = "passkit-metrics/1"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub pooled_eer: f64,
    pub num_target: usize,
    pub num_nontarget: usize,
    pub normalization: String,
    /// `None` when the file does not contain one target per utterance.
    pub classification_error: Option<f64>,
    /// `None` for phrases lacking target or nontarget trials.
    pub per_phrase_eer: BTreeMap<String, Option<f64>>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "pooled_eer={}\npooled_eer_percent={:.4}\nnum_target={}\nnum_nontarget={}\nnormalization={}\n",
            self.pooled_eer,
            self.pooled_eer * 100.0,
            self.num_target,
            self.num_nontarget,
            self.normalization
        );
        if let Some(c) = self.classification_error {
            out.push_str(&format!("classification_error={c}\n"));
        }
        for (p, e) in &self.per_phrase_eer {
            match e {
                Some(e) => out.push_str(&format!("eer[{p}]={e}\n")),
                None => out.push_str(&format!("eer[{p}]=undefined\n")),
            }
        }
        for w in &self.warnings {
            out.push_str(&format!("warning={w}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Pooled and per-phrase EER plus classification error for a score list.
pub fn evaluate(scores: &[TrialScore], normalization: Option<Normalization>) -> Result<EvalReport> {
    let pooled = compute_eer(scores)?;
    let (t, n) = split_scores(scores.iter());
    let mut per_phrase = BTreeMap::new();
    let phrases: Vec<&str> = scores.iter().map(|s| s.trial.claimed.as_str()).collect();
    for p in phrases {
        if per_phrase.contains_key(p) {
            continue;
        }
        let (pt, pn) = split_scores(scores.iter().filter(|s| s.trial.claimed == p));
        per_phrase.insert(p.to_string(), eer_from_scores(&pt, &pn).ok());
    }
    let classification_error = predictions_from_scores(scores)
        .ok()
        .and_then(|p| classification_error(&p).ok());
    let mut warnings = Vec::new();
    if normalization.is_some_and(Normalization::is_close_set) {
        log::warn!("{CLOSE_SET_WARNING}");
        warnings.push(CLOSE_SET_WARNING.to_string());
    }
    Ok(EvalReport {
        schema: "passkit-metrics/1".into(),
        pooled_eer: pooled,
        num_target: t.len(),
        num_nontarget: n.len(),
        normalization: normalization.map_or_else(|| "unknown".to_string(), |n| n.to_string()),
        classification_error,
        per_phrase_eer: per_phrase,
        warnings,
    })
}
