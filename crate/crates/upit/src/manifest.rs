//! Dataset manifests as JSON lines: one header object followed by one object
//! per mixture record, each tagged by a `kind` field.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use upit_core::mixgen::{DatasetManifest, ManifestConfig, MixtureRecord};

use crate::error::{CliError, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    corpus_root: String,
    sample_rate: u32,
    config: ManifestConfig,
    closed_speakers: Vec<String>,
    open_speakers: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(Header),
    Record(MixtureRecord),
}

/// A manifest together with the sample rate of its audio.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredManifest {
    pub manifest: DatasetManifest,
    pub sample_rate: u32,
}

pub fn to_string(stored: &StoredManifest) -> String {
    let m = &stored.manifest;
    let mut out = String::new();
    let header = Line::Header(Header {
        corpus_root: m.corpus_root.clone(),
        sample_rate: stored.sample_rate,
        config: m.config.clone(),
        closed_speakers: m.closed_speakers.clone(),
        open_speakers: m.open_speakers.clone(),
    });
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for r in &m.records {
        out.push_str(&serde_json::to_string(&Line::Record(r.clone())).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse(text: &str, path: &Path) -> Result<StoredManifest> {
    let bad = |line: usize, reason: String| CliError::format("manifest", path, format!("line {line}: {reason}"));
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(line).map_err(|e| bad(i + 1, e.to_string()))? {
            Line::Header(h) => {
                if header.is_some() || !records.is_empty() {
                    return Err(bad(i + 1, "header must be the first and only header line".into()));
                }
                header = Some(h);
            }
            Line::Record(r) => {
                if header.is_none() {
                    return Err(bad(i + 1, "record before header".into()));
                }
                records.push(r);
            }
        }
    }
    let h = header.ok_or_else(|| bad(0, "no header line".into()))?;
    Ok(StoredManifest {
        manifest: DatasetManifest {
            corpus_root: h.corpus_root,
            config: h.config,
            closed_speakers: h.closed_speakers,
            open_speakers: h.open_speakers,
            records,
        },
        sample_rate: h.sample_rate,
    })
}

pub fn save(path: &Path, stored: &StoredManifest) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(to_string(stored).as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<StoredManifest> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, path)
}
