//! Raw-matrix container shared by recordings and feature files: a
//! row-major little-endian `f32` payload (`<base>.f32`) next to a JSON
//! header (`<base>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Recording mode. Silent-mode data is the only thing inference may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Silent,
    Vocal,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Silent => "silent",
            Mode::Vocal => "vocal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
}

pub fn payload_path(base: &Path) -> PathBuf {
    with_suffix(base, "f32")
}

pub fn header_path(base: &Path) -> PathBuf {
    with_suffix(base, "json")
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn write_container(base: &Path, header: &ContainerHeader, data: &[f64]) -> Result<()> {
    if data.len() != header.rows * header.cols {
        return Err(invalid(format!(
            "container payload has {} values, header says {}x{}",
            data.len(),
            header.rows,
            header.cols
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let p = payload_path(base);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    let h = header_path(base);
    let json = serde_json::to_string_pretty(header)?;
    fs::write(&h, json).map_err(|e| Error::io(&h, e))?;
    Ok(())
}

pub fn read_container(base: &Path) -> Result<(ContainerHeader, Vec<f64>)> {
    let h = header_path(base);
    let p = payload_path(base);
    for path in [&h, &p] {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.clone()));
        }
    }
    let text = fs::read_to_string(&h).map_err(|e| Error::io(&h, e))?;
    let header: ContainerHeader = serde_json::from_str(&text)?;
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if bytes.len() != header.rows * header.cols * 4 {
        return Err(invalid(format!(
            "{}: payload is {} bytes, header expects {}",
            p.display(),
            bytes.len(),
            header.rows * header.cols * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok((header, data))
}
