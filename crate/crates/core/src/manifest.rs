//! JSON-lines dataset manifests shared by the labelling, synthesis and
//! training stages.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoidClass {
    Void,
    NonVoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

/// One manifest row. Paths are stored relative to the manifest file when
/// written and resolved against it when read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<VoidClass>,
    pub split: Split,
    pub origin: Origin,
}

/// Reads any JSON-lines file, reporting the failing line on error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest, resolves paths and checks id uniqueness and that every
/// referenced file exists.
pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut recs: Vec<DatasetRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (i, r) in recs.iter_mut().enumerate() {
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if !seen.insert(r.id.clone()) {
            return Err(err(format!("duplicate id {:?}", r.id)));
        }
        r.image = resolve(&base, &r.image);
        if !r.image.is_file() {
            return Err(err(format!("image {} does not exist", r.image.display())));
        }
        if let Some(m) = &mut r.mask {
            *m = resolve(&base, m);
            if !m.is_file() {
                return Err(err(format!("mask {} does not exist", m.display())));
            }
        }
    }
    Ok(recs)
}
