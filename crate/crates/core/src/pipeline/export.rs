//! I-vector CSV export.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ivector::IVectorArchive;

use super::manifest::Manifest;

/// Writes `id,phrase,speaker,w0,…,w{R-1}` with one row per archive entry.
/// Values carry 17 significant digits so they parse back to the same `f64`.
/// Entries keyed `utt@phrase` (per-claim HMM i-vectors) are matched to the
/// manifest row of `utt`.
pub fn export_ivectors_csv(archive: &IVectorArchive<f64>, manifest: &Manifest, out_path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::InvalidInput(format!("CSV write failed: {e}"));
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(out_path).map_err(csv_err)?;
    let mut header = vec!["id".to_string(), "phrase".into(), "speaker".into()];
    header.extend((0..archive.rank()).map(|i| format!("w{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (id, v) in archive.iter() {
        let utt = id.split_once('@').map_or(id, |(u, _)| u);
        let row = manifest
            .get(utt)
            .ok_or_else(|| Error::Manifest(format!("archive id '{id}' is not in the manifest")))?;
        let mut rec = vec![id.to_string(), row.phrase.clone(), row.speaker.clone()];
        rec.extend(v.iter().map(|x| format!("{x:.16e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(out_path, e))
}
