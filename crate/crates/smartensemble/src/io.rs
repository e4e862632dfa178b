//! File access: IDX containers (optionally gzipped) and JSON documents.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::de::DeserializeOwned;
use serde::Serialize;
use smartensemble_core::data::idx::{self, IdxImages};
use smartensemble_core::data::{Dataset, Split};

use crate::error::{Error, Result};

/// Reads a file, transparently inflating it when it starts with the gzip magic.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    Ok(idx::parse_images(&read_bytes(path)?)?)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    Ok(idx::parse_labels(&read_bytes(path)?)?)
}

/// Loads an image/label IDX pair as a dataset with pixels scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let pixels = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    Ok(Dataset::from_idx(&pixels, &labels, split)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Parses JSON, reporting failures with the JSON pointer of the offending value.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(path, &text)
}

pub(crate) fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        pointer: json_pointer(e.path()),
        message: e.inner().to_string(),
    })
}

pub(crate) fn from_value<T: DeserializeOwned>(path: &Path, value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        pointer: json_pointer(e.path()),
        message: e.inner().to_string(),
    })
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for segment in path.iter() {
        out.push('/');
        match segment {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}
