//! Tab-separated dataset manifests.
//!
//! ```text
//! utt_id	path	phrase	speaker	split	transcript
//! u0001	wav/u0001.wav	p00	spk00	train	sil a3 b1 sil
//! ```
//!
//! Paths are relative to the manifest's directory unless absolute. The
//! transcript column is optional and holds space-separated phone labels.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "utt_id\tpath\tphrase\tspeaker\tsplit\ttranscript";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Enroll,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Enroll => "enroll",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "enroll" => Ok(Split::Enroll),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Manifest(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub utt_id: String,
    /// As written in the manifest.
    pub path: PathBuf,
    pub phrase: String,
    pub speaker: String,
    pub split: Split,
    pub transcript: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            rows,
            base_dir: base_dir.into(),
        };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if r.utt_id.is_empty() || r.phrase.is_empty() || r.speaker.is_empty() {
                return Err(Error::Manifest(format!("row '{}' has an empty field", r.utt_id)));
            }
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utterance id '{}'", r.utt_id)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Manifest("empty manifest".into()))?;
        let cols: Vec<&str> = header.trim_end().split('\t').collect();
        let expected: Vec<&str> = MANIFEST_HEADER.split('\t').collect();
        if cols != expected && cols != expected[..5] {
            return Err(Error::Manifest(format!("bad header '{header}', expected '{MANIFEST_HEADER}'")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
            if f.len() < 5 || f.len() > 6 {
                return Err(Error::Manifest(format!("line {}: expected 5 or 6 fields, found {}", n + 1, f.len())));
            }
            let transcript = f
                .get(5)
                .map(|t| t.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .filter(|t| !t.is_empty());
            rows.push(ManifestRow {
                utt_id: f[0].to_string(),
                path: PathBuf::from(f[1]),
                phrase: f[2].to_string(),
                speaker: f[3].to_string(),
                split: f[4].parse().map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?,
                transcript,
            });
        }
        Self::new(rows, base_dir)
    }

    /// Reads and validates a manifest, including that every referenced file
    /// exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, base)?;
        m.check_files()?;
        Ok(m)
    }

    pub fn check_files(&self) -> Result<()> {
        for r in &self.rows {
            let p = self.resolve(r);
            if !p.is_file() {
                return Err(Error::Manifest(format!("'{}': missing file {}", r.utt_id, p.display())));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            let t = r.transcript.as_ref().map(|t| t.join(" ")).unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.utt_id,
                r.path.display(),
                r.phrase,
                r.speaker,
                r.split,
                t
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, self.to_text().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.utt_id == utt_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestRow)> {
        self.rows.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    /// Sorted distinct phrases.
    pub fn phrases(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.phrase.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Transcript of `phrase`, taken from the first row that has one.
    /// Rows of the same phrase must agree.
    pub fn phrase_transcript(&self, phrase: &str) -> Result<Vec<String>> {
        let mut found: Option<&Vec<String>> = None;
        for r in self.rows.iter().filter(|r| r.phrase == phrase) {
            if let Some(t) = &r.transcript {
                match found {
                    None => found = Some(t),
                    Some(prev) if prev != t => {
                        return Err(Error::Manifest(format!("phrase '{phrase}' has conflicting transcripts")))
                    }
                    _ => {}
                }
            }
        }
        found
            .cloned()
            .ok_or_else(|| Error::Manifest(format!("phrase '{phrase}' has no transcript")))
    }
}
