//! Clean-speech corpus directories: one sub-directory per speaker holding WAV files.

use std::fs;
use std::path::{Path, PathBuf};

use upit_core::mixgen::SpeakerUtterances;
use upit_core::toy;

use crate::error::{CliError, Result};
use crate::wav;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        out.push(entry.map_err(|e| CliError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Lists `root/<speaker>/*.wav`, sorted by speaker and file name. Paths are
/// relative to `root` with `/` separators.
pub fn scan(root: &Path) -> Result<Vec<SpeakerUtterances>> {
    if !root.is_dir() {
        return Err(CliError::MissingFile(root.to_path_buf()));
    }
    let mut speakers = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let speaker = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let utterances: Vec<String> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .map(|p| format!("{speaker}/{}", p.file_name().unwrap_or_default().to_string_lossy()))
            .collect();
        if !utterances.is_empty() {
            speakers.push(SpeakerUtterances { speaker, utterances });
        }
    }
    Ok(speakers)
}

/// Settings for [`write_toy_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub voices: usize,
    pub utterances: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

/// Writes band-limited toy speakers as a corpus directory tree.
pub fn write_toy_corpus(root: &Path, spec: &ToyCorpus) -> Result<()> {
    if spec.voices == 0 || spec.utterances == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(CliError::Config("toy corpus needs voices, utterances and a valid length range".into()));
    }
    let speakers = toy::toy_speakers(spec.voices);
    let span = (spec.max_len - spec.min_len + 1) as u64;
    for (k, s) in speakers.iter().enumerate() {
        let dir = root.join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for u in 0..spec.utterances {
            let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add((k * 10_007 + u) as u64);
            let len = spec.min_len + (seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 33) as usize % span as usize;
            let signal = toy::toy_utterance(s, len, spec.sample_rate, seed)?;
            wav::write_wav(&dir.join(format!("u{u:03}.wav")), &signal)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_corpus_scans_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyCorpus { voices: 3, utterances: 2, min_len: 400, max_len: 600, sample_rate: 8000, seed: 1 };
        write_toy_corpus(dir.path(), &spec).unwrap();
        fs::write(dir.path().join("README"), "x").unwrap();
        let scanned = scan(dir.path()).unwrap();
        assert_eq!(scanned.len(), 3);
        assert_eq!(scanned[0].speaker, "toy00");
        assert_eq!(scanned[0].utterances, vec!["toy00/u000.wav", "toy00/u001.wav"]);
        let s = wav::read_wav(&dir.path().join("toy01/u001.wav")).unwrap();
        assert!((400..=600).contains(&s.len()));
        assert!(matches!(scan(&dir.path().join("nope")), Err(CliError::MissingFile(_))));
    }
}
