//! Left-to-right HMMs without skips: flat-start monophone training, phrase
//! composition from transcripts, Viterbi alignment and the UV2 phrase model.
//!
//! Path scores include every emission and every transition taken between
//! frames. There is no exit transition after the last frame.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::gmm::{self, DiagonalGmm, GaussianAccumulator};
use crate::real::{log_sum_exp, Real};
use crate::rng;

pub const HMM_MAGIC: &[u8; 4] = b"PKHM";

/// Self-loop probabilities are kept in `[floor, 1 - floor]`.
pub const TRANSITION_FLOOR: f64 = 1e-3;

pub const DEFAULT_STATES_PER_PHONE: usize = 3;
pub const DEFAULT_COMPONENTS_PER_STATE: usize = 8;
pub const DEFAULT_UV2_STATES: usize = 5;

const KIND_MONOPHONES: u32 = 0;
const KIND_PHRASE: u32 = 1;

fn clamp_transition<T: Real>(p: T) -> T {
    let lo = T::of(TRANSITION_FLOOR);
    p.max(lo).min(T::one() - lo)
}

/// One emitting state.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmState<T> {
    pub gmm: DiagonalGmm<T>,
    /// Index of each GMM component in the global inventory.
    pub component_ids: Vec<usize>,
    /// Probability of staying; the forward transition takes the rest.
    pub self_loop: T,
}

impl<T: Real> HmmState<T> {
    pub fn new(gmm: DiagonalGmm<T>, component_ids: Vec<usize>, self_loop: T) -> Result<Self> {
        if component_ids.len() != gmm.num_components() {
            return Err(Error::DimensionMismatch {
                expected: gmm.num_components(),
                found: component_ids.len(),
            });
        }
        if !(self_loop > T::zero() && self_loop < T::one()) {
            return Err(Error::InvalidInput(format!("self-loop probability {self_loop} outside (0, 1)")));
        }
        Ok(Self {
            gmm,
            component_ids,
            self_loop,
        })
    }

    pub fn log_self(&self) -> T {
        self.self_loop.ln()
    }

    pub fn log_forward(&self) -> T {
        (T::one() - self.self_loop).ln()
    }

    fn encode_into(&self, w: &mut Writer) -> Result<()> {
        w.f64(self.self_loop.f64());
        w.len_u32(self.gmm.num_components())?;
        for &id in &self.component_ids {
            w.len_u32(id)?;
        }
        w.len_u32(self.gmm.dim())?;
        w.f64s(self.gmm.weights().iter().map(|v| v.f64()));
        w.f64s(self.gmm.means().iter().map(|v| v.f64()));
        w.f64s(self.gmm.variances().iter().map(|v| v.f64()));
        Ok(())
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        let self_loop = T::of(r.f64()?);
        let k = r.usize()?;
        let ids = (0..k).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let dim = r.usize()?;
        let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
        let weights = cast(r.f64s(k)?);
        let means = cast(r.f64s(k * dim)?);
        let vars = cast(r.f64s(k * dim)?);
        Self::new(DiagonalGmm::new(weights, means, vars)?, ids, self_loop)
    }
}

fn check_states<T: Real>(states: &[HmmState<T>], num_components: usize) -> Result<usize> {
    let dim = states
        .first()
        .ok_or_else(|| Error::InvalidInput("HMM needs at least one state".into()))?
        .gmm
        .dim();
    for s in states {
        if s.gmm.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: s.gmm.dim(),
            });
        }
        if let Some(&id) = s.component_ids.iter().find(|&&id| id >= num_components) {
            return Err(Error::InvalidInput(format!(
                "component id {id} outside an inventory of {num_components}"
            )));
        }
    }
    Ok(dim)
}

/// Monophone HMMs sharing one inventory of uniquely indexed components.
#[derive(Debug, Clone, PartialEq)]
pub struct MonophoneSet<T> {
    phones: Vec<String>,
    states_per_phone: usize,
    /// Phone-major: state `s` of phone `p` is at `p * states_per_phone + s`.
    states: Vec<HmmState<T>>,
    num_components: usize,
}

impl<T: Real> MonophoneSet<T> {
    pub fn new(phones: Vec<String>, states_per_phone: usize, states: Vec<HmmState<T>>, num_components: usize) -> Result<Self> {
        if states_per_phone == 0 || phones.is_empty() {
            return Err(Error::InvalidInput("monophone set needs phones and states".into()));
        }
        if states.len() != phones.len() * states_per_phone {
            return Err(Error::DimensionMismatch {
                expected: phones.len() * states_per_phone,
                found: states.len(),
            });
        }
        let unique: BTreeSet<&String> = phones.iter().collect();
        if unique.len() != phones.len() {
            return Err(Error::InvalidInput("duplicate phone label".into()));
        }
        check_states(&states, num_components)?;
        let mut seen = vec![false; num_components];
        for &id in states.iter().flat_map(|s| &s.component_ids) {
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::InvalidInput(format!("component id {id} used twice")));
            }
        }
        Ok(Self {
            phones,
            states_per_phone,
            states,
            num_components,
        })
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn states_per_phone(&self) -> usize {
        self.states_per_phone
    }

    /// Size of the shared component inventory.
    pub fn num_components(&self) -> usize {
        self.num_components
    }

    pub fn dim(&self) -> usize {
        self.states[0].gmm.dim()
    }

    pub fn states(&self) -> &[HmmState<T>] {
        &self.states
    }

    pub fn phone_index(&self, phone: &str) -> Option<usize> {
        self.phones.iter().position(|p| p == phone)
    }

    pub fn state(&self, phone: usize, s: usize) -> &HmmState<T> {
        &self.states[phone * self.states_per_phone + s]
    }

    /// Indices into [`Self::states`] for a phone sequence.
    pub fn state_sequence<S: AsRef<str>>(&self, phones: &[S]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(phones.len() * self.states_per_phone);
        for p in phones {
            let idx = self
                .phone_index(p.as_ref())
                .ok_or_else(|| Error::UnknownPhone(p.as_ref().to_string()))?;
            out.extend((0..self.states_per_phone).map(|s| idx * self.states_per_phone + s));
        }
        if out.is_empty() {
            return Err(Error::InvalidInput("empty phone sequence".into()));
        }
        Ok(out)
    }

    /// All inventory components as one mixture, indexed by component id.
    /// Weights are the state weights divided by the number of states.
    pub fn inventory_gmm(&self) -> Result<DiagonalGmm<T>> {
        let dim = self.dim();
        let c = self.num_components;
        let mut weights = vec![T::zero(); c];
        let mut means = vec![T::zero(); c * dim];
        let mut vars = vec![T::one(); c * dim];
        let share = T::one() / T::of_usize(self.states.len());
        for st in &self.states {
            for (k, &id) in st.component_ids.iter().enumerate() {
                weights[id] = st.gmm.weights()[k] * share;
                means[id * dim..(id + 1) * dim].copy_from_slice(st.gmm.mean(k));
                vars[id * dim..(id + 1) * dim].copy_from_slice(st.gmm.variance(k));
            }
        }
        let sum: T = weights.iter().copied().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        DiagonalGmm::new(weights, means, vars)
    }

    pub fn compose<S: AsRef<str>>(&self, phones: &[S]) -> Result<PhraseHmm<T>> {
        compose_phrase_hmm(self, phones)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(HMM_MAGIC);
        w.u32(KIND_MONOPHONES);
        w.len_u32(self.num_components)?;
        w.len_u32(self.states_per_phone)?;
        w.len_u32(self.phones.len())?;
        for p in &self.phones {
            w.string(p)?;
        }
        for s in &self.states {
            s.encode_into(&mut w)?;
        }
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, HMM_MAGIC, "PKHM")?;
        let kind = r.u32()?;
        if kind != KIND_MONOPHONES {
            return Err(Error::Corrupt(format!("PKHM kind {kind} is not a monophone set")));
        }
        let c = r.usize()?;
        let s = r.usize()?;
        let p = r.usize()?;
        let phones = (0..p).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let states = (0..p * s).map(|_| HmmState::decode_from(&mut r)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::new(phones, s, states, c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// A strictly left-to-right state chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseHmm<T> {
    /// Phone (or other) label of each state.
    labels: Vec<String>,
    states: Vec<HmmState<T>>,
    num_components: usize,
}

impl<T: Real> PhraseHmm<T> {
    pub fn new(labels: Vec<String>, states: Vec<HmmState<T>>, num_components: usize) -> Result<Self> {
        if labels.len() != states.len() {
            return Err(Error::DimensionMismatch {
                expected: states.len(),
                found: labels.len(),
            });
        }
        check_states(&states, num_components)?;
        Ok(Self {
            labels,
            states,
            num_components,
        })
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[HmmState<T>] {
        &self.states
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    pub fn dim(&self) -> usize {
        self.states[0].gmm.dim()
    }

    pub fn align(&self, features: &FeatureMatrix<T>) -> Result<AlignmentPath<T>> {
        viterbi_align(self, features)
    }

    /// Log-likelihood of `features` along an explicit state path.
    pub fn path_log_likelihood(&self, features: &FeatureMatrix<T>, path: &[usize]) -> Result<T> {
        let refs: Vec<&HmmState<T>> = self.states.iter().collect();
        path_score(&refs, features, path)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(HMM_MAGIC);
        w.u32(KIND_PHRASE);
        w.len_u32(self.num_components)?;
        w.len_u32(self.states.len())?;
        for (label, s) in self.labels.iter().zip(&self.states) {
            w.string(label)?;
            s.encode_into(&mut w)?;
        }
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, HMM_MAGIC, "PKHM")?;
        let kind = r.u32()?;
        if kind != KIND_PHRASE {
            return Err(Error::Corrupt(format!("PKHM kind {kind} is not a phrase HMM")));
        }
        let c = r.usize()?;
        let n = r.usize()?;
        let mut labels = Vec::with_capacity(n);
        let mut states = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.string()?);
            states.push(HmmState::decode_from(&mut r)?);
        }
        r.finish()?;
        Self::new(labels, states, c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Concatenates the monophone HMMs of `phones`. Component ids are kept, so
/// the result refers to the same inventory.
pub fn compose_phrase_hmm<T: Real, S: AsRef<str>>(mono: &MonophoneSet<T>, phones: &[S]) -> Result<PhraseHmm<T>> {
    let seq = mono.state_sequence(phones)?;
    let labels = seq.iter().map(|&i| mono.phones[i / mono.states_per_phone].clone()).collect();
    let states = seq.iter().map(|&i| mono.states[i].clone()).collect();
    PhraseHmm::new(labels, states, mono.num_components)
}

/// Frame-to-state assignment from Viterbi decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath<T> {
    states: Vec<usize>,
    log_likelihood: T,
}

impl<T: Real> AlignmentPath<T> {
    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn num_frames(&self) -> usize {
        self.states.len()
    }

    /// Score of the path, equal to [`PhraseHmm::path_log_likelihood`].
    pub fn log_likelihood(&self) -> T {
        self.log_likelihood
    }

    /// First frame of each state; the path visits every state.
    pub fn segment_starts(&self) -> Vec<usize> {
        let mut starts = vec![0];
        for t in 1..self.states.len() {
            if self.states[t] != self.states[t - 1] {
                starts.push(t);
            }
        }
        starts
    }

    /// Per frame, the posteriors of the aligned state's components.
    pub fn within_state_posteriors(&self, hmm: &PhraseHmm<T>, features: &FeatureMatrix<T>) -> Result<Vec<Vec<T>>> {
        if features.num_frames() != self.states.len() {
            return Err(Error::DimensionMismatch {
                expected: self.states.len(),
                found: features.num_frames(),
            });
        }
        if features.dim() != hmm.dim() {
            return Err(Error::DimensionMismatch {
                expected: hmm.dim(),
                found: features.dim(),
            });
        }
        Ok(self
            .states
            .iter()
            .zip(features.frames())
            .map(|(&s, x)| {
                let g = &hmm.states[s].gmm;
                let mut row = vec![T::zero(); g.num_components()];
                g.posteriors_into(x, &mut row);
                row
            })
            .collect())
    }

    /// Writes `frame_index state_index` lines.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.states.len() * 8);
        for (t, s) in self.states.iter().enumerate() {
            out.push_str(&format!("{t} {s}\n"));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Viterbi over precomputed emissions (`frames × states`, row-major). The
/// path starts in state 0 at frame 0 and ends in the last state. Ties prefer
/// staying in the current state.
pub fn viterbi<T: Real>(log_emissions: &[T], log_self: &[T], log_forward: &[T]) -> Result<AlignmentPath<T>> {
    let s_count = log_self.len();
    if s_count == 0 || log_forward.len() != s_count || log_emissions.len() % s_count != 0 {
        return Err(Error::InvalidInput("inconsistent Viterbi inputs".into()));
    }
    let frames = log_emissions.len() / s_count;
    if frames < s_count {
        return Err(Error::AlignmentInfeasible {
            frames,
            states: s_count,
        });
    }
    let ninf = T::neg_infinity();
    let mut prev = vec![ninf; s_count];
    let mut cur = vec![ninf; s_count];
    // `true` where the best predecessor is the previous state.
    let mut moved = vec![false; frames * s_count];
    prev[0] = log_emissions[0];
    for t in 1..frames {
        let e = &log_emissions[t * s_count..(t + 1) * s_count];
        // States above `t` are unreachable; states below the last `frames - t`
        // cannot reach the end but are harmless.
        let top = t.min(s_count - 1);
        for s in 0..=top {
            let stay = prev[s] + log_self[s];
            let step = if s > 0 { prev[s - 1] + log_forward[s - 1] } else { ninf };
            if step > stay {
                cur[s] = step + e[s];
                moved[t * s_count + s] = true;
            } else {
                cur[s] = stay + e[s];
            }
        }
        for v in cur.iter_mut().skip(top + 1) {
            *v = ninf;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let score = prev[s_count - 1];
    if !score.is_finite() {
        return Err(Error::InvalidInput("no finite Viterbi path".into()));
    }
    let mut states = vec![0; frames];
    let mut s = s_count - 1;
    for t in (0..frames).rev() {
        states[t] = s;
        if t > 0 && moved[t * s_count + s] {
            s -= 1;
        }
    }
    Ok(AlignmentPath {
        states,
        log_likelihood: score,
    })
}

fn emissions<T: Real>(states: &[&HmmState<T>], features: &FeatureMatrix<T>) -> Result<Vec<T>> {
    let dim = states[0].gmm.dim();
    if features.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: features.dim(),
        });
    }
    let n = states.len();
    let kmax = states.iter().map(|s| s.gmm.num_components()).max().unwrap_or(1);
    let mut buf = vec![T::zero(); kmax];
    let mut out = vec![T::zero(); features.num_frames() * n];
    for (t, x) in features.frames().enumerate() {
        for (s, st) in states.iter().enumerate() {
            let b = &mut buf[..st.gmm.num_components()];
            st.gmm.component_log_densities(x, b);
            out[t * n + s] = log_sum_exp(b);
        }
    }
    Ok(out)
}

fn align_states<T: Real>(states: &[&HmmState<T>], features: &FeatureMatrix<T>) -> Result<AlignmentPath<T>> {
    if features.num_frames() < states.len() {
        return Err(Error::AlignmentInfeasible {
            frames: features.num_frames(),
            states: states.len(),
        });
    }
    let e = emissions(states, features)?;
    let ls: Vec<T> = states.iter().map(|s| s.log_self()).collect();
    let lf: Vec<T> = states.iter().map(|s| s.log_forward()).collect();
    viterbi(&e, &ls, &lf)
}

fn path_score<T: Real>(states: &[&HmmState<T>], features: &FeatureMatrix<T>, path: &[usize]) -> Result<T> {
    let valid = path.len() == features.num_frames()
        && path.first() == Some(&0)
        && path.last() == Some(&(states.len() - 1))
        && path.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1);
    if !valid {
        return Err(Error::InvalidInput("not a left-to-right path spanning all states".into()));
    }
    let dim = states[0].gmm.dim();
    if features.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: features.dim(),
        });
    }
    let mut total = T::zero();
    for (t, x) in features.frames().enumerate() {
        let st = states[path[t]];
        total += st.gmm.frame_log_likelihood(x);
        if t > 0 {
            let from = states[path[t - 1]];
            total += if path[t] == path[t - 1] { from.log_self() } else { from.log_forward() };
        }
    }
    Ok(total)
}

/// Maximum-likelihood monotone alignment of `features` to `hmm`.
pub fn viterbi_align<T: Real>(hmm: &PhraseHmm<T>, features: &FeatureMatrix<T>) -> Result<AlignmentPath<T>> {
    let refs: Vec<&HmmState<T>> = hmm.states.iter().collect();
    align_states(&refs, features)
}

/// Frame `t` of `frames` goes to state `⌊t·n/frames⌋`.
fn uniform_path(frames: usize, n: usize) -> Vec<usize> {
    (0..frames).map(|t| t * n / frames).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonophoneConfig {
    pub states_per_phone: usize,
    pub components_per_state: usize,
    /// Viterbi realignment iterations after the flat start.
    pub iters: usize,
    /// EM iterations per state GMM, both while splitting and per realignment.
    pub em_iters: usize,
    pub seed: u64,
}

impl Default for MonophoneConfig {
    fn default() -> Self {
        Self {
            states_per_phone: DEFAULT_STATES_PER_PHONE,
            components_per_state: DEFAULT_COMPONENTS_PER_STATE,
            iters: 5,
            em_iters: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonophoneTraining<T> {
    pub set: MonophoneSet<T>,
    /// Total Viterbi path log-likelihood of the flat-start model and after
    /// each realignment iteration.
    pub log_likelihoods: Vec<f64>,
}

/// Frames and transition counts pooled per state from fixed alignments.
struct StatePool<T> {
    frames: Vec<Vec<T>>,
    counts: Vec<usize>,
    self_count: Vec<usize>,
    forward_count: Vec<usize>,
}

impl<T: Real> StatePool<T> {
    /// `paths[u][t]` indexes into `seqs[u]`, whose entries are pooled states.
    fn collect(n_states: usize, features: &[FeatureMatrix<T>], seqs: &[Vec<usize>], paths: &[Vec<usize>]) -> Self {
        let mut pool = Self {
            frames: vec![Vec::new(); n_states],
            counts: vec![0; n_states],
            self_count: vec![0; n_states],
            forward_count: vec![0; n_states],
        };
        for ((f, seq), path) in features.iter().zip(seqs).zip(paths) {
            for (t, x) in f.frames().enumerate() {
                let s = seq[path[t]];
                pool.frames[s].extend_from_slice(x);
                pool.counts[s] += 1;
                if t + 1 < path.len() {
                    if path[t + 1] == path[t] {
                        pool.self_count[s] += 1;
                    } else {
                        pool.forward_count[s] += 1;
                    }
                }
            }
        }
        pool
    }

    fn matrix(&self, s: usize, dim: usize, shift: f64) -> Result<FeatureMatrix<T>> {
        FeatureMatrix::new(self.frames[s].clone(), self.counts[s], dim, shift)
    }

    /// Maximum-likelihood self-loop probability, clamped to the floor.
    fn ml_self_loop(&self, s: usize) -> Option<T> {
        let total = self.self_count[s] + self.forward_count[s];
        (total > 0).then(|| clamp_transition(T::of_usize(self.self_count[s]) / T::of_usize(total)))
    }
}

/// Flat-start Viterbi training of monophone HMMs.
///
/// Each utterance is first segmented uniformly over its composed states and
/// every state GMM is grown by binary splitting. Each iteration then
/// realigns all utterances and re-estimates the state GMMs (warm-started EM
/// on the aligned frames) and the self-loop probabilities from path counts.
pub fn train_monophones<T: Real, S: AsRef<str> + Sync>(
    features: &[FeatureMatrix<T>],
    transcripts: &[Vec<S>],
    cfg: &MonophoneConfig,
) -> Result<MonophoneTraining<T>> {
    if features.is_empty() || features.len() != transcripts.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature matrices for {} transcripts",
            features.len(),
            transcripts.len()
        )));
    }
    if cfg.states_per_phone == 0 || cfg.components_per_state == 0 {
        return Err(Error::InvalidConfig("states and components per state must be positive".into()));
    }
    let mut occurrences: BTreeMap<&str, usize> = BTreeMap::new();
    for tr in transcripts {
        for p in tr {
            *occurrences.entry(p.as_ref()).or_default() += 1;
        }
    }
    if let Some((p, n)) = occurrences.iter().find(|(_, &n)| n < 3) {
        return Err(Error::InsufficientData(format!("phone '{p}' occurs {n} time(s); need at least 3")));
    }
    let phones: Vec<String> = occurrences.keys().map(|p| p.to_string()).collect();
    let (s_per, k) = (cfg.states_per_phone, cfg.components_per_state);
    let n_states = phones.len() * s_per;
    let index: BTreeMap<&str, usize> = phones.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let seqs: Vec<Vec<usize>> = transcripts
        .iter()
        .map(|tr| {
            tr.iter()
                .flat_map(|p| {
                    let i = index[p.as_ref()];
                    (0..s_per).map(move |s| i * s_per + s)
                })
                .collect()
        })
        .collect();
    for (f, seq) in features.iter().zip(&seqs) {
        if seq.is_empty() {
            return Err(Error::InvalidInput("empty transcript".into()));
        }
        if f.num_frames() < seq.len() {
            return Err(Error::AlignmentInfeasible {
                frames: f.num_frames(),
                states: seq.len(),
            });
        }
    }
    let (_, global_var) = gmm::global_mean_variance(features)?;
    let floor = gmm::variance_floor(&global_var);
    let dim = floor.len();
    let shift = features[0].frame_shift();

    let paths: Vec<Vec<usize>> = features
        .iter()
        .zip(&seqs)
        .map(|(f, seq)| uniform_path(f.num_frames(), seq.len()))
        .collect();
    let pool = StatePool::collect(n_states, features, &seqs, &paths);
    let mut states: Vec<HmmState<T>> = (0..n_states)
        .into_par_iter()
        .map(|s| {
            let fm = pool.matrix(s, dim, shift)?;
            let (mean, var) = gmm::global_mean_variance(std::slice::from_ref(&fm))?;
            let var = var.iter().zip(&floor).map(|(&v, &f)| v.max(f)).collect();
            let start = DiagonalGmm::single(mean, var)?;
            let mut r = rng::stream(cfg.seed, "mono-state", s as u64);
            let fit = gmm::fit_by_splitting(start, std::slice::from_ref(&fm), k, cfg.em_iters, &floor, &mut r)?;
            let ids = (0..k).map(|c| s * k + c).collect();
            HmmState::new(fit.gmm, ids, pool.ml_self_loop(s).unwrap_or_else(|| T::of(0.5)))
        })
        .collect::<Result<_>>()?;
    drop(pool);

    let mut history = Vec::with_capacity(cfg.iters + 1);
    for it in 0..=cfg.iters {
        let aligned: Vec<AlignmentPath<T>> = features
            .par_iter()
            .zip(&seqs)
            .map(|(f, seq)| {
                let refs: Vec<&HmmState<T>> = seq.iter().map(|&s| &states[s]).collect();
                align_states(&refs, f)
            })
            .collect::<Result<_>>()?;
        let total: f64 = aligned.iter().map(|a| a.log_likelihood.f64()).sum();
        log::debug!("monophone iteration {it}: Viterbi log-likelihood {total}");
        history.push(total);
        if it == cfg.iters {
            break;
        }
        let paths: Vec<Vec<usize>> = aligned.into_iter().map(|a| a.states).collect();
        let pool = StatePool::collect(n_states, features, &seqs, &paths);
        states = states
            .par_iter()
            .enumerate()
            .map(|(s, st)| {
                let fm = pool.matrix(s, dim, shift)?;
                let mut g = st.gmm.clone();
                for _ in 0..cfg.em_iters.max(1) {
                    let mut acc = GaussianAccumulator::new(g.num_components(), dim);
                    acc.accumulate(&g, &fm);
                    g = gmm::m_step(&g, &acc, &floor)?.0;
                }
                HmmState::new(g, st.component_ids.clone(), pool.ml_self_loop(s).unwrap_or(st.self_loop))
            })
            .collect::<Result<_>>()?;
    }
    let set = MonophoneSet::new(phones, s_per, states, n_states * k)?;
    Ok(MonophoneTraining {
        set,
        log_likelihoods: history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Uv2Config {
    pub num_states: usize,
    pub iters: usize,
    pub relevance_factor: f64,
}

impl Default for Uv2Config {
    fn default() -> Self {
        Self {
            num_states: DEFAULT_UV2_STATES,
            iters: 5,
            relevance_factor: gmm::DEFAULT_RELEVANCE_FACTOR,
        }
    }
}

/// Phrase HMM whose state GMMs are relevance-MAP adaptations of the UBM
/// means. Self-loops are re-estimated from path counts with add-one
/// smoothing and then floored.
pub fn train_uv2_model<T: Real>(ubm: &DiagonalGmm<T>, features: &[FeatureMatrix<T>], cfg: &Uv2Config) -> Result<PhraseHmm<T>> {
    let n = cfg.num_states;
    if n == 0 {
        return Err(Error::InvalidConfig("UV2 needs at least one state".into()));
    }
    if features.is_empty() {
        return Err(Error::InsufficientData("no UV2 training utterances".into()));
    }
    for f in features {
        if f.dim() != ubm.dim() {
            return Err(Error::DimensionMismatch {
                expected: ubm.dim(),
                found: f.dim(),
            });
        }
        if f.num_frames() < n {
            return Err(Error::AlignmentInfeasible {
                frames: f.num_frames(),
                states: n,
            });
        }
    }
    let r = T::of(cfg.relevance_factor);
    let dim = ubm.dim();
    let shift = features[0].frame_shift();
    let seq: Vec<usize> = (0..n).collect();
    let seqs = vec![seq; features.len()];
    let labels: Vec<String> = (0..n).map(|s| format!("s{s}")).collect();
    let ids: Vec<usize> = (0..ubm.num_components()).collect();

    let estimate = |paths: &[Vec<usize>]| -> Result<PhraseHmm<T>> {
        let pool = StatePool::collect(n, features, &seqs, paths);
        let states = (0..n)
            .map(|s| {
                let fm = pool.matrix(s, dim, shift)?;
                let mut acc = GaussianAccumulator::new(ubm.num_components(), dim);
                acc.accumulate(ubm, &fm);
                let g = gmm::map_means_from_stats(ubm, &acc.zeroth, &acc.first, r)?;
                let stay = T::of_usize(pool.self_count[s] + 1);
                let total = T::of_usize(pool.self_count[s] + pool.forward_count[s] + 2);
                HmmState::new(g, ids.clone(), clamp_transition(stay / total))
            })
            .collect::<Result<Vec<_>>>()?;
        PhraseHmm::new(labels.clone(), states, ubm.num_components())
    };

    let paths: Vec<Vec<usize>> = features.iter().map(|f| uniform_path(f.num_frames(), n)).collect();
    let mut hmm = estimate(&paths)?;
    for _ in 0..cfg.iters {
        let paths: Vec<Vec<usize>> = features
            .par_iter()
            .map(|f| viterbi_align(&hmm, f).map(|a| a.states))
            .collect::<Result<_>>()?;
        hmm = estimate(&paths)?;
    }
    Ok(hmm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    fn feats(rows: Vec<Vec<f64>>) -> FeatureMatrix<f64> {
        FeatureMatrix::from_rows(&rows, 0.01).unwrap()
    }

    fn gauss_state(mean: f64, var: f64, id: usize, self_loop: f64) -> HmmState<f64> {
        HmmState::new(DiagonalGmm::single(vec![mean], vec![var]).unwrap(), vec![id], self_loop).unwrap()
    }

    /// All left-to-right paths over `frames` frames that start in state 0
    /// and end in state `n - 1`.
    fn all_paths(frames: usize, n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = vec![0];
        fn rec(frames: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == frames {
                if *cur.last().unwrap() == n - 1 {
                    out.push(cur.clone());
                }
                return;
            }
            let last = *cur.last().unwrap();
            for next in [last, last + 1] {
                if next < n {
                    cur.push(next);
                    rec(frames, n, cur, out);
                    cur.pop();
                }
            }
        }
        rec(frames, n, &mut cur, &mut out);
        out
    }

    #[test]
    fn viterbi_matches_exhaustive_enumeration() {
        for seed in 0..50 {
            let mut r = rng::stream(seed, "viterbi-test", 0);
            let frames = r.gen_range(1..=5);
            let n = r.gen_range(1..=frames.min(3));
            let e: Vec<f64> = (0..frames * n).map(|_| r.gen_range(-5.0..0.0)).collect();
            let ls: Vec<f64> = (0..n).map(|_| r.gen_range(0.05f64..0.95).ln()).collect();
            let lf: Vec<f64> = ls.iter().map(|l| (1.0 - l.exp()).ln()).collect();
            let best = viterbi(&e, &ls, &lf).unwrap();
            let score = |p: &[usize]| {
                let mut s = e[p[0]];
                for t in 1..p.len() {
                    s += e[t * n + p[t]] + if p[t] == p[t - 1] { ls[p[t]] } else { lf[p[t - 1]] };
                }
                s
            };
            let brute = all_paths(frames, n).iter().map(|p| score(p)).fold(f64::NEG_INFINITY, f64::max);
            assert!((best.log_likelihood() - brute).abs() < 1e-10);
            assert!((score(best.states()) - brute).abs() < 1e-10);
        }
    }

    #[test]
    fn single_state_and_staircase() {
        let h = PhraseHmm::new(vec!["a".into()], vec![gauss_state(0.0, 1.0, 0, 0.5)], 1).unwrap();
        let f = feats(vec![vec![0.1], vec![2.0], vec![-1.0]]);
        assert_eq!(h.align(&f).unwrap().states(), &[0, 0, 0]);

        let states = (0..3).map(|i| gauss_state(i as f64, 1.0, i, 0.9)).collect();
        let h = PhraseHmm::new(vec!["a".into(); 3], states, 3).unwrap();
        let f = feats(vec![vec![5.0], vec![5.0], vec![5.0]]);
        assert_eq!(h.align(&f).unwrap().states(), &[0, 1, 2]);
        let short = feats(vec![vec![0.0], vec![0.0]]);
        assert!(matches!(h.align(&short), Err(Error::AlignmentInfeasible { frames: 2, states: 3 })));
    }

    #[test]
    fn dp_score_equals_recomputed_path_score() {
        let states = vec![gauss_state(-1.0, 0.5, 0, 0.7), gauss_state(1.0, 2.0, 1, 0.4)];
        let h = PhraseHmm::new(vec!["a".into(), "b".into()], states, 2).unwrap();
        let f = feats((0..9).map(|t| vec![(t as f64 - 4.0) * 0.4]).collect());
        let a = h.align(&f).unwrap();
        let direct = h.path_log_likelihood(&f, a.states()).unwrap();
        assert!((a.log_likelihood() - direct).abs() < 1e-10);
        assert!(a.states().windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
    }

    fn two_phone_corpus(seed: u64) -> (Vec<FeatureMatrix<f64>>, Vec<Vec<String>>, Vec<usize>) {
        let mut r = rng::stream(seed, "two-phone", 0);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut feats_out = Vec::new();
        let mut trs = Vec::new();
        let mut bounds = Vec::new();
        for _ in 0..12 {
            let b = r.gen_range(10..30);
            let len = b + r.gen_range(10..30);
            let rows = (0..len)
                .map(|t| vec![if t < b { -3.0 } else { 3.0 } + noise.sample(&mut r)])
                .collect();
            feats_out.push(feats(rows));
            trs.push(vec!["A".to_string(), "B".to_string()]);
            bounds.push(b);
        }
        (feats_out, trs, bounds)
    }

    #[test]
    fn two_phone_boundaries_are_recovered() {
        let (f, tr, bounds) = two_phone_corpus(3);
        let cfg = MonophoneConfig {
            states_per_phone: 1,
            components_per_state: 1,
            iters: 4,
            em_iters: 1,
            seed: 1,
        };
        let out = train_monophones(&f, &tr, &cfg).unwrap();
        for (fm, &b) in f.iter().zip(&bounds) {
            let h = out.set.compose(&["A", "B"]).unwrap();
            let starts = h.align(fm).unwrap().segment_starts();
            assert!((starts[1] as i64 - b as i64).abs() <= 2, "{starts:?} vs {b}");
        }
        assert!(out.log_likelihoods.windows(2).all(|w| w[1] >= w[0] - 1e-6 * w[0].abs()));
    }

    #[test]
    fn viterbi_training_is_monotone_with_mixtures() {
        let (f, _, _) = two_phone_corpus(9);
        let tr = vec![vec!["A", "B"]; f.len()];
        let cfg = MonophoneConfig {
            states_per_phone: 3,
            components_per_state: 2,
            iters: 6,
            em_iters: 2,
            seed: 4,
        };
        let out = train_monophones(&f, &tr, &cfg).unwrap();
        assert_eq!(out.log_likelihoods.len(), 7);
        for w in out.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{:?}", out.log_likelihoods);
        }
        assert_eq!(out.set.num_components(), 2 * 3 * 2);
    }

    #[test]
    fn degenerate_training_gives_sample_mean() {
        let f = vec![feats(vec![vec![1.0], vec![2.0]]), feats(vec![vec![4.0]]), feats(vec![vec![7.0], vec![1.0]])];
        let tr = vec![vec!["x"]; 3];
        let cfg = MonophoneConfig {
            states_per_phone: 1,
            components_per_state: 1,
            iters: 2,
            em_iters: 1,
            seed: 0,
        };
        let out = train_monophones(&f, &tr, &cfg).unwrap();
        assert!((out.set.states()[0].gmm.mean(0)[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn training_preconditions() {
        let f = vec![feats(vec![vec![1.0]; 6]); 2];
        let tr = vec![vec!["a", "b"]; 2];
        let cfg = MonophoneConfig {
            states_per_phone: 1,
            components_per_state: 1,
            ..Default::default()
        };
        assert!(matches!(train_monophones(&f, &tr, &cfg), Err(Error::InsufficientData(_))));
        let f = vec![feats(vec![vec![1.0]; 2]); 3];
        let tr = vec![vec!["a"]; 3];
        let cfg = MonophoneConfig {
            states_per_phone: 3,
            components_per_state: 1,
            ..Default::default()
        };
        assert!(matches!(train_monophones(&f, &tr, &cfg), Err(Error::AlignmentInfeasible { .. })));
    }

    fn small_set() -> MonophoneSet<f64> {
        let mut states = Vec::new();
        for p in 0..3 {
            for s in 0..3 {
                let i = p * 3 + s;
                states.push(HmmState::new(
                    DiagonalGmm::new(vec![0.5, 0.5], vec![i as f64, i as f64 + 0.5], vec![1.0, 1.0]).unwrap(),
                    vec![2 * i, 2 * i + 1],
                    0.6,
                ).unwrap());
            }
        }
        MonophoneSet::new(vec!["a".into(), "b".into(), "c".into()], 3, states, 18).unwrap()
    }

    #[test]
    fn composition() {
        let m = small_set();
        assert_eq!(m.compose(&["a", "b"]).unwrap().num_states(), 6);
        let single = m.compose(&["b"]).unwrap();
        assert_eq!(single.states(), &m.states()[3..6]);
        let h = m.compose(&["c", "a", "b"]).unwrap();
        let ids: BTreeSet<usize> = h.states().iter().flat_map(|s| s.component_ids.clone()).collect();
        let expected: BTreeSet<usize> = (0..18).collect();
        assert_eq!(ids, expected);
        assert_eq!(h.num_components(), 18);
        assert!(matches!(m.compose(&["z"]), Err(Error::UnknownPhone(_))));
    }

    #[test]
    fn duplicate_component_ids_are_rejected() {
        let mut states = small_set().states().to_vec();
        states[1].component_ids = vec![0, 1];
        assert!(MonophoneSet::new(vec!["a".into(), "b".into(), "c".into()], 3, states, 18).is_err());
    }

    #[test]
    fn inventory_gmm_is_indexed_by_component_id() {
        let m = small_set();
        let g = m.inventory_gmm().unwrap();
        assert_eq!(g.num_components(), 18);
        assert_eq!(g.mean(7), &[3.5]);
        assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uv2_single_state_reduces_to_map_adaptation() {
        let ubm = DiagonalGmm::new(vec![0.4, 0.6], vec![-1.0, 2.0], vec![1.0, 0.5]).unwrap();
        let f = feats((0..20).map(|t| vec![(t as f64) * 0.2 - 1.5]).collect());
        let cfg = Uv2Config {
            num_states: 1,
            iters: 3,
            relevance_factor: 16.0,
        };
        let h = train_uv2_model(&ubm, std::slice::from_ref(&f), &cfg).unwrap();
        let direct = gmm::map_adapt_means(&ubm, &f, 16.0).unwrap();
        for (a, b) in h.states()[0].gmm.means().iter().zip(direct.means()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uv2_recovers_staircase_means() {
        let mut r = rng::stream(2, "uv2", 0);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let data: Vec<FeatureMatrix<f64>> = (0..20)
            .map(|_| {
                let b = r.gen_range(15..25);
                feats((0..40).map(|t| vec![if t < b { -2.0 } else { 2.0 } + noise.sample(&mut r)]).collect())
            })
            .collect();
        let ubm = gmm::train_ubm(&data, 1, 1, 0).unwrap().gmm;
        let h = train_uv2_model(&ubm, &data, &Uv2Config { num_states: 2, ..Default::default() }).unwrap();
        assert!((h.states()[0].gmm.mean(0)[0] + 2.0).abs() < 0.2);
        assert!((h.states()[1].gmm.mean(0)[0] - 2.0).abs() < 0.2);
        let big = train_uv2_model(
            &ubm,
            &data,
            &Uv2Config {
                num_states: 2,
                iters: 1,
                relevance_factor: 1e15,
            },
        )
        .unwrap();
        for s in big.states() {
            assert!((s.gmm.mean(0)[0] - ubm.mean(0)[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trips_are_bit_exact() {
        let m = small_set();
        assert_eq!(MonophoneSet::decode(&m.encode().unwrap()).unwrap(), m);
        let h = m.compose(&["b", "a"]).unwrap();
        let bytes = h.encode().unwrap();
        assert_eq!(PhraseHmm::decode(&bytes).unwrap(), h);
        assert!(MonophoneSet::<f64>::decode(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(PhraseHmm::<f64>::decode(&bad), Err(Error::UnsupportedVersion { .. })));
    }

    #[test]
    fn alignment_text_dump() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        let a = AlignmentPath {
            states: vec![0, 0, 1],
            log_likelihood: 0.0,
        };
        a.write_text(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "0 0\n1 0\n2 1\n");
    }
}
