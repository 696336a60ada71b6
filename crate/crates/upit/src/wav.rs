//! 16-bit mono PCM WAV reading and writing.

use std::path::Path;

use hound::{SampleFormat, WavSpec};
use upit_core::dsp::TimeSignal;

use crate::error::{CliError, Result};

const FULL_SCALE: f64 = 32768.0;

fn open_error(path: &Path, e: hound::Error) -> CliError {
    match e {
        hound::Error::IoError(io) => CliError::io(path, io),
        other => CliError::format("WAV", path, other),
    }
}

/// Reads a mono 16-bit file; samples are divided by 32768.
pub fn read_wav(path: &Path) -> Result<TimeSignal> {
    let reader = hound::WavReader::open(path).map_err(|e| open_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CliError::format("WAV", path, format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(CliError::format(
            "WAV",
            path,
            format!("{}-bit {:?} samples, expected 16-bit PCM", spec.bits_per_sample, spec.sample_format),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| open_error(path, e))?;
    if samples.is_empty() {
        return Err(CliError::format("WAV", path, "no samples"));
    }
    Ok(TimeSignal::new(samples, spec.sample_rate)?)
}

/// Reads a file and checks its sample rate.
pub fn read_wav_at(path: &Path, sample_rate: u32) -> Result<TimeSignal> {
    let signal = read_wav(path)?;
    if signal.sample_rate() != sample_rate {
        return Err(CliError::format(
            "WAV",
            path,
            format!("sample rate {} Hz, configured {} Hz", signal.sample_rate(), sample_rate),
        ));
    }
    Ok(signal)
}

/// Rounds to the nearest 16-bit code, saturating outside [-1, 1).
pub fn quantize(x: f64) -> i16 {
    (x * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav(path: &Path, signal: &TimeSignal) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let clipped = signal.samples().iter().filter(|x| x.abs() > 32767.0 / FULL_SCALE).count();
    if clipped > 0 {
        log::warn!("{}: {clipped} samples clipped", path.display());
    }
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| open_error(path, e))?;
    for &x in signal.samples() {
        writer.write_sample(quantize(x)).map_err(|e| open_error(path, e))?;
    }
    writer.finalize().map_err(|e| open_error(path, e))
}
