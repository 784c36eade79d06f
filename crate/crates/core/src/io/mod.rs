//! File formats and on-disk dataset layout. Byte layouts are documented in
//! `FORMATS.md` at the repository root.

mod cameras;
mod checkpoint;
mod dataset;
mod netpbm;
mod ply;

pub use cameras::{decode_cameras, encode_cameras, read_cameras, write_cameras};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{read_dataset, read_split, view_name, write_dataset, Split};
pub use netpbm::{decode_idmap, decode_rgb, encode_idmap, encode_rgb, read_idmap, read_rgb, write_idmap, write_rgb};
pub use ply::{decode_labeled_ply, encode_labeled_ply, read_labeled_ply, write_labeled_ply};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::LossRecord;
use crate::voting::TrackCorrespondences;

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Object names keyed by ID, as a JSON object with decimal-string keys.
pub fn write_names(path: &Path, names: &BTreeMap<u32, String>) -> Result<()> {
    let text = serde_json::to_string_pretty(names).expect("names serialize");
    write_atomic(path, format!("{text}\n").as_bytes())
}

pub fn read_names(path: &Path) -> Result<BTreeMap<u32, String>> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_tracks(path: &Path, tracks: &TrackCorrespondences) -> Result<()> {
    let text = serde_json::to_string(tracks).expect("tracks serialize");
    write_atomic(path, format!("{text}\n").as_bytes())
}

pub fn read_tracks(path: &Path) -> Result<TrackCorrespondences> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loss log CSV: `iteration,l1,ssim,volume,semantic,total`.
pub fn encode_loss_log(log: &[LossRecord]) -> String {
    let mut s = String::from("iteration,l1,ssim,volume,semantic,total\n");
    for r in log {
        let c = &r.components;
        s.push_str(&format!("{},{},{},{},{},{}\n", r.iteration, c.l1, c.ssim, c.volume, c.semantic, r.total));
    }
    s
}

/// Formats a metric value; infinities are written as `inf`.
pub fn format_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}
