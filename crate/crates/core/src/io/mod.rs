//! On-disk formats: raw arrays with text sidecars, case directories,
//! parameter checkpoints, CSV and OBJ.
//!
//! Every file is written whole to a temporary sibling and renamed into place.

mod case;
mod checkpoint;
mod raw;

use std::fs;
use std::path::{Path, PathBuf};

pub use case::{
    dvf_file_name, read_case, read_dvf_dir, write_case, write_dvf_dir, CaseData, CaseManifest,
    Provenance, CASE_VERSION,
};
pub use checkpoint::{
    history_csv, load_cvae, load_mae, mae_history_csv, save_cvae, save_mae, CheckpointKind,
    CheckpointManifest, CvaeMeta, MaeMeta, ParamEntry, CHECKPOINT_VERSION,
};
pub use raw::{
    read_dvf, read_mask, read_raw, read_slices, read_volume, write_dvf, write_dvf_as, write_mask,
    write_raw, write_slices, write_volume, write_volume_as, Dtype, RawHeader,
};

use crate::error::{Error, Result};
use crate::eval::TriMesh;

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`. Parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    write_text(path, &mesh.to_obj())
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    TriMesh::from_obj(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}
