//! STFT analysis, overlap-add synthesis and window handling.
//!
//! Spectrograms are single-sided (`F = N/2 + 1` bins) and stored frame-major:
//! element `(t, f)` lives at `t * F + f`. All arithmetic is `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::{Index, IndexMut};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft;

/// Sample rate used throughout when none is given.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;
/// 32 ms at 8 kHz.
pub const DEFAULT_FRAME_LEN: usize = 256;
/// 16 ms at 8 kHz.
pub const DEFAULT_HOP: usize = 128;
/// Maximum relative deviation from constant overlap-add accepted for a config.
pub const COLA_TOLERANCE: f64 = 1e-6;

/// A finite, non-empty sequence of real samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl TimeSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::SignalTooShort("signal has no samples".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("signal samples"));
        }
        if sample_rate == 0 {
            return Err(Error::BadConfig("sample rate must be positive".into()));
        }
        Ok(TimeSignal {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn scaled(&self, gain: f64) -> TimeSignal {
        TimeSignal {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Zero-pads (or truncates) to exactly `len` samples.
    pub fn resized(&self, len: usize) -> TimeSignal {
        let mut samples = self.samples.clone();
        samples.resize(len.max(1), 0.0);
        TimeSignal {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn energy(samples: &[f64]) -> f64 {
    samples.iter().map(|x| x * x).sum()
}

/// A dense `frames x bins` array stored frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    bins: usize,
    frames: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Grid {
            bins,
            frames,
            data: vec![T::default(); bins * frames],
        }
    }
}

impl<T: Copy> Grid<T> {
    pub fn filled(bins: usize, frames: usize, value: T) -> Self {
        Grid {
            bins,
            frames,
            data: vec![value; bins * frames],
        }
    }

    /// Wraps frame-major data.
    pub fn from_vec(bins: usize, frames: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != bins * frames {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} grid",
                data.len(),
                bins,
                frames
            )));
        }
        Ok(Grid { bins, frames, data })
    }

    pub fn from_fn(bins: usize, frames: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(bins * frames);
        for t in 0..frames {
            for b in 0..bins {
                data.push(f(t, b));
            }
        }
        Grid { bins, frames, data }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bins, self.frames)
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.bins == other.bins && self.frames == other.frames
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[T] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [T] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn map<U>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            bins: self.bins,
            frames: self.frames,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Element-wise combination; panics on shape mismatch.
    pub fn zip_map<U: Copy, V>(&self, other: &Grid<U>, mut f: impl FnMut(T, U) -> V) -> Grid<V> {
        assert!(self.same_shape(other), "grid shape mismatch");
        Grid {
            bins: self.bins,
            frames: self.frames,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Copy of the frames in `range`.
    pub fn frames_slice(&self, range: core::ops::Range<usize>) -> Grid<T> {
        Grid {
            bins: self.bins,
            frames: range.len(),
            data: self.data[range.start * self.bins..range.end * self.bins].to_vec(),
        }
    }
}

impl Grid<f64> {
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Grid<f64>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    fn index(&self, (t, f): (usize, usize)) -> &T {
        debug_assert!(t < self.frames && f < self.bins);
        &self.data[t * self.bins + f]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (t, f): (usize, usize)) -> &mut T {
        debug_assert!(t < self.frames && f < self.bins);
        &mut self.data[t * self.bins + f]
    }
}

/// Non-negative magnitudes `|X(t, f)|`.
pub type MagSpectrogram = Grid<f64>;
/// Phases in radians.
pub type PhaseSpectrogram = Grid<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    Rectangular,
    Hann,
    SqrtHann,
}

impl Window {
    /// Periodic window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| {
                let hann = 0.5 - 0.5 * libm::cos(2.0 * PI * n as f64 / len as f64);
                match self {
                    Window::Rectangular => 1.0,
                    Window::Hann => hann,
                    Window::SqrtHann => libm::sqrt(hann.max(0.0)),
                }
            })
            .collect()
    }
}

/// Frame length, hop and the analysis/synthesis window pair.
#[derive(Clone, Debug, PartialEq)]
pub struct StftConfig {
    frame_len: usize,
    hop: usize,
    analysis: Vec<f64>,
    synthesis: Vec<f64>,
}

impl StftConfig {
    /// Validates the windows and the constant overlap-add condition.
    pub fn new(frame_len: usize, hop: usize, analysis: Vec<f64>, synthesis: Vec<f64>) -> Result<Self> {
        if frame_len == 0 || hop == 0 || hop > frame_len {
            return Err(Error::BadConfig(format!(
                "need 0 < hop <= frame_len, got frame_len={frame_len} hop={hop}"
            )));
        }
        if analysis.len() != frame_len || synthesis.len() != frame_len {
            return Err(Error::BadConfig(format!(
                "windows must have length {frame_len}, got {} and {}",
                analysis.len(),
                synthesis.len()
            )));
        }
        if analysis
            .iter()
            .chain(&synthesis)
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::BadConfig("windows must be finite and non-negative".into()));
        }
        let deviation = cola_deviation(&analysis, &synthesis, hop);
        if deviation.is_nan() || deviation > COLA_TOLERANCE {
            return Err(Error::BadConfig(format!(
                "window pair violates constant overlap-add at hop {hop} (deviation {deviation:e})"
            )));
        }
        Ok(StftConfig {
            frame_len,
            hop,
            analysis,
            synthesis,
        })
    }

    pub fn with_windows(frame_len: usize, hop: usize, analysis: Window, synthesis: Window) -> Result<Self> {
        Self::new(
            frame_len,
            hop,
            analysis.coefficients(frame_len),
            synthesis.coefficients(frame_len),
        )
    }

    /// Square-root Hann analysis and synthesis.
    pub fn sqrt_hann(frame_len: usize, hop: usize) -> Result<Self> {
        Self::with_windows(frame_len, hop, Window::SqrtHann, Window::SqrtHann)
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Number of single-sided bins, `N/2 + 1`.
    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn analysis_window(&self) -> &[f64] {
        &self.analysis
    }

    pub fn synthesis_window(&self) -> &[f64] {
        &self.synthesis
    }

    /// Frames produced for a signal of `len >= N` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        (len.max(self.frame_len) - self.frame_len) / self.hop + 1
    }

    /// Output length of [`synthesize`] for `frames` frames.
    pub fn synthesized_len(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.hop + self.frame_len
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig::sqrt_hann(DEFAULT_FRAME_LEN, DEFAULT_HOP).expect("sqrt-Hann at 50% overlap is COLA")
    }
}

/// Maximum relative deviation of the steady-state overlap sum
/// `sum_t w[n - tL] v[n - tL]` from its median value.
pub fn check_cola(config: &StftConfig) -> f64 {
    cola_deviation(&config.analysis, &config.synthesis, config.hop)
}

fn cola_deviation(analysis: &[f64], synthesis: &[f64], hop: usize) -> f64 {
    let n = analysis.len();
    if hop == 0 || n == 0 {
        return f64::INFINITY;
    }
    // The overlap sum is periodic in `hop` once every offset is covered.
    let sums: Vec<f64> = (0..hop.min(n))
        .map(|i| {
            (i..n)
                .step_by(hop)
                .map(|k| analysis[k] * synthesis[k])
                .sum()
        })
        .collect();
    let mut sorted = sums.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let mid = sorted.len() / 2;
    let c = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    if c.is_nan() || c <= 0.0 {
        return f64::INFINITY;
    }
    sums.iter().map(|s| (s - c).abs() / c).fold(0.0, f64::max)
}

/// Single-sided complex STFT together with the config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    bins: Grid<Complex64>,
    config: StftConfig,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(bins: Grid<Complex64>, config: StftConfig, sample_rate: u32) -> Result<Self> {
        if bins.bins() != config.bins() {
            return Err(Error::ShapeMismatch(format!(
                "{} bins for frame length {}",
                bins.bins(),
                config.frame_len()
            )));
        }
        if bins.frames() == 0 {
            return Err(Error::ShapeMismatch("spectrogram has no frames".into()));
        }
        if bins
            .as_slice()
            .iter()
            .any(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(Error::NonFinite("spectrogram"));
        }
        Ok(ComplexSpectrogram {
            bins,
            config,
            sample_rate,
        })
    }

    pub fn grid(&self) -> &Grid<Complex64> {
        &self.bins
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_bins(&self) -> usize {
        self.bins.bins()
    }

    pub fn num_frames(&self) -> usize {
        self.bins.frames()
    }

    pub fn magnitude(&self) -> MagSpectrogram {
        self.bins.map(|c| c.norm())
    }

    /// Builds `mag * exp(j * phase)` with this spectrogram's config.
    pub fn from_polar(
        mag: &MagSpectrogram,
        phase: &PhaseSpectrogram,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        if !mag.same_shape(phase) {
            return Err(Error::ShapeMismatch("magnitude and phase differ in shape".into()));
        }
        let bins = mag.zip_map(phase, Complex64::from_polar);
        Self::new(bins, config, sample_rate)
    }

    /// Element-wise sum of spectrograms sharing one config.
    pub fn sum(parts: &[ComplexSpectrogram]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to sum".into()))?;
        let mut acc = first.bins.clone();
        for p in &parts[1..] {
            if !p.bins.same_shape(&acc) {
                return Err(Error::ShapeMismatch("spectrogram shapes differ".into()));
            }
            for (a, b) in acc.as_mut_slice().iter_mut().zip(p.bins.as_slice()) {
                *a += b;
            }
        }
        Ok(ComplexSpectrogram {
            bins: acc,
            config: first.config.clone(),
            sample_rate: first.sample_rate,
        })
    }
}

/// Single-sided STFT. Frame `t` starts at sample `t * L`; signals shorter
/// than one frame are zero-padded to `N` with a warning.
pub fn analyze(signal: &TimeSignal, config: &StftConfig) -> Result<ComplexSpectrogram> {
    let n = config.frame_len;
    let mut padded;
    let samples = if signal.len() < n {
        log::warn!(
            "signal of {} samples is shorter than one frame; zero-padding to {}",
            signal.len(),
            n
        );
        padded = signal.samples.clone();
        padded.resize(n, 0.0);
        &padded[..]
    } else {
        &signal.samples[..]
    };

    let frames = config.num_frames(samples.len());
    let bins = config.bins();
    let fft = Fft::new(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = Grid::zeros(bins, frames);
    for t in 0..frames {
        let start = t * config.hop;
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(samples[start + k] * config.analysis[k], 0.0);
        }
        fft.forward(&mut buf);
        out.frame_mut(t).copy_from_slice(&buf[..bins]);
    }
    Ok(ComplexSpectrogram {
        bins: out,
        config: config.clone(),
        sample_rate: signal.sample_rate,
    })
}

/// Inverse DFT of each frame (full spectrum rebuilt by conjugate symmetry)
/// followed by overlap-add with the synthesis window. Output length is
/// `(T - 1) * L + N`.
pub fn synthesize(spec: &ComplexSpectrogram) -> TimeSignal {
    let config = &spec.config;
    let n = config.frame_len;
    let bins = config.bins();
    let frames = spec.num_frames();
    let fft = Fft::new(n);
    debug_assert_eq!(fft.len(), n);
    let mut out = vec![0.0; config.synthesized_len(frames)];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for t in 0..frames {
        let half = spec.bins.frame(t);
        buf[..bins].copy_from_slice(half);
        for f in bins..n {
            buf[f] = half[n - f].conj();
        }
        fft.inverse(&mut buf);
        let start = t * config.hop;
        for k in 0..n {
            out[start + k] += config.synthesis[k] * buf[k].re * scale;
        }
    }
    TimeSignal {
        samples: out,
        sample_rate: spec.sample_rate,
    }
}

/// Element-wise modulus and argument; the phase of an exact zero is 0.
pub fn magnitude_phase(spec: &ComplexSpectrogram) -> (MagSpectrogram, PhaseSpectrogram) {
    let mag = spec.bins.map(|c| c.norm());
    let phase = spec
        .bins
        .map(|c| if c.re == 0.0 && c.im == 0.0 { 0.0 } else { libm::atan2(c.im, c.re) });
    (mag, phase)
}

/// Placement of an original signal inside the padded buffer used by
/// [`analyze_padded`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub offset: usize,
    pub len: usize,
}

impl Framing {
    pub fn for_len(len: usize, config: &StftConfig) -> (Framing, usize) {
        let edge = config.frame_len - config.hop;
        let needed = (edge + len + edge).max(config.frame_len);
        let frames = (needed - config.frame_len).div_ceil(config.hop) + 1;
        (
            Framing { offset: edge, len },
            config.synthesized_len(frames),
        )
    }

    pub fn pad(&self, samples: &[f64], total: usize) -> Vec<f64> {
        let mut out = vec![0.0; total];
        out[self.offset..self.offset + samples.len()].copy_from_slice(samples);
        out
    }
}

/// STFT of `signal` after padding `N - L` zeros at both ends, so every
/// original sample lies in the fully overlapped region.
pub fn analyze_padded(signal: &TimeSignal, config: &StftConfig) -> Result<(ComplexSpectrogram, Framing)> {
    let (framing, total) = Framing::for_len(signal.len(), config);
    let padded = TimeSignal::new(framing.pad(&signal.samples, total), signal.sample_rate)?;
    Ok((analyze(&padded, config)?, framing))
}

/// Inverse of [`analyze_padded`]: synthesizes and removes the padding.
pub fn synthesize_trimmed(spec: &ComplexSpectrogram, framing: Framing) -> TimeSignal {
    let full = synthesize(spec);
    let mut samples = full.samples;
    let end = (framing.offset + framing.len).min(samples.len());
    samples.truncate(end);
    samples.drain(..framing.offset.min(end));
    samples.resize(framing.len.max(1), 0.0);
    TimeSignal {
        samples,
        sample_rate: spec.sample_rate,
    }
}
