//! Ideal masks, masking, and reconstruction with the mixture phase.

use alloc::format;
use alloc::vec::Vec;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    self, ComplexSpectrogram, Framing, Grid, MagSpectrogram, PhaseSpectrogram, StftConfig, TimeSignal,
};
use crate::error::{Error, Result};
use crate::DEFAULT_EPSILON;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// `|X_s| / sum_k |X_k|`
    Irm,
    /// `|X_s| / |Y|`
    Iam,
    /// `|X_s| cos(theta_y - theta_s) / |Y|`
    Ipsm,
    /// `max(0, IPSM)`
    Inpsm,
    /// Produced by a model rather than from references.
    Estimated,
}

impl MaskKind {
    pub const ORACLE: [MaskKind; 4] = [MaskKind::Irm, MaskKind::Iam, MaskKind::Ipsm, MaskKind::Inpsm];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Irm => "irm",
            MaskKind::Iam => "iam",
            MaskKind::Ipsm => "ipsm",
            MaskKind::Inpsm => "inpsm",
            MaskKind::Estimated => "estimated",
        }
    }
}

/// `S` masks of identical `F x T` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    kind: MaskKind,
    masks: Vec<Grid<f64>>,
}

impl MaskSet {
    pub fn new(kind: MaskKind, masks: Vec<Grid<f64>>) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidArgument("mask set needs at least one mask".into()))?;
        if masks.iter().any(|m| !m.same_shape(first)) {
            return Err(Error::ShapeMismatch("masks differ in shape".into()));
        }
        if masks.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mask"));
        }
        Ok(MaskSet { kind, masks })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn speakers(&self) -> usize {
        self.masks.len()
    }

    pub fn bins(&self) -> usize {
        self.masks[0].bins()
    }

    pub fn frames(&self) -> usize {
        self.masks[0].frames()
    }

    pub fn masks(&self) -> &[Grid<f64>] {
        &self.masks
    }

    pub fn mask(&self, s: usize) -> &Grid<f64> {
        &self.masks[s]
    }

    pub fn into_masks(self) -> Vec<Grid<f64>> {
        self.masks
    }

    pub fn same_shape(&self, other: &MaskSet) -> bool {
        self.speakers() == other.speakers() && self.masks[0].same_shape(&other.masks[0])
    }
}

/// Clean source spectrograms and their mixture.
#[derive(Clone, Debug)]
pub struct SourceSet {
    sources: Vec<ComplexSpectrogram>,
    mixture: ComplexSpectrogram,
}

impl SourceSet {
    pub fn new(sources: Vec<ComplexSpectrogram>, mixture: ComplexSpectrogram) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidArgument("source set needs at least one source".into()));
        }
        let shape = mixture.grid().shape();
        if let Some(bad) = sources.iter().position(|s| s.grid().shape() != shape) {
            return Err(Error::ShapeMismatch(format!(
                "source {bad} has shape {:?}, mixture {:?}",
                sources[bad].grid().shape(),
                shape
            )));
        }
        Ok(SourceSet { sources, mixture })
    }

    /// Uses the element-wise sum of the sources as the mixture.
    pub fn from_sources(sources: Vec<ComplexSpectrogram>) -> Result<Self> {
        let mixture = ComplexSpectrogram::sum(&sources)?;
        Self::new(sources, mixture)
    }

    /// Analyzes time signals with [`dsp::analyze_padded`]. All signals must
    /// share the mixture's length.
    pub fn analyze_padded(
        sources: &[TimeSignal],
        mixture: &TimeSignal,
        config: &StftConfig,
    ) -> Result<(Self, Framing)> {
        if let Some(bad) = sources.iter().position(|s| s.len() != mixture.len()) {
            return Err(Error::ShapeMismatch(format!(
                "source {bad} has {} samples, mixture {}",
                sources[bad].len(),
                mixture.len()
            )));
        }
        let (mix_spec, framing) = dsp::analyze_padded(mixture, config)?;
        let specs = sources
            .iter()
            .map(|s| dsp::analyze_padded(s, config).map(|(spec, _)| spec))
            .collect::<Result<Vec<_>>>()?;
        Ok((Self::new(specs, mix_spec)?, framing))
    }

    pub fn speakers(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[ComplexSpectrogram] {
        &self.sources
    }

    pub fn mixture(&self) -> &ComplexSpectrogram {
        &self.mixture
    }

    pub fn bins(&self) -> usize {
        self.mixture.num_bins()
    }

    pub fn frames(&self) -> usize {
        self.mixture.num_frames()
    }

    pub fn mixture_magnitude(&self) -> MagSpectrogram {
        self.mixture.magnitude()
    }

    pub fn mixture_phase(&self) -> PhaseSpectrogram {
        dsp::magnitude_phase(&self.mixture).1
    }

    /// `|X_s|` for every source.
    pub fn source_magnitudes(&self) -> Vec<MagSpectrogram> {
        self.sources.iter().map(|s| s.magnitude()).collect()
    }

    /// Reorders the sources: entry `i` of the result is `sources[order[i]]`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        if !crate::pit::is_permutation(order) || order.len() != self.speakers() {
            return Err(Error::InvalidArgument("order is not a permutation of the sources".into()));
        }
        Ok(SourceSet {
            sources: order.iter().map(|&i| self.sources[i].clone()).collect(),
            mixture: self.mixture.clone(),
        })
    }
}

/// Computes an ideal mask with the default epsilon.
pub fn oracle_mask(sources: &SourceSet, kind: MaskKind) -> Result<MaskSet> {
    oracle_mask_with_epsilon(sources, kind, DEFAULT_EPSILON)
}

/// Bins whose denominator falls below `epsilon` get `1/S` (IRM) or `0`
/// (IAM, IPSM, INPSM).
pub fn oracle_mask_with_epsilon(sources: &SourceSet, kind: MaskKind, epsilon: f64) -> Result<MaskSet> {
    let speakers = sources.speakers();
    let mix = sources.mixture.grid();
    let (bins, frames) = mix.shape();
    let masks: Vec<Grid<f64>> = match kind {
        MaskKind::Irm => {
            let mags = sources.source_magnitudes();
            let mut total = Grid::<f64>::zeros(bins, frames);
            for m in &mags {
                for (acc, v) in total.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *acc += v;
                }
            }
            mags.iter()
                .map(|m| {
                    m.zip_map(&total, |a, sum| {
                        if sum < epsilon {
                            1.0 / speakers as f64
                        } else {
                            a / sum
                        }
                    })
                })
                .collect()
        }
        MaskKind::Iam => sources
            .sources
            .iter()
            .map(|s| {
                s.grid().zip_map(mix, |x, y| {
                    let r = y.norm();
                    if r < epsilon {
                        0.0
                    } else {
                        x.norm() / r
                    }
                })
            })
            .collect(),
        MaskKind::Ipsm | MaskKind::Inpsm => {
            let clamp = kind == MaskKind::Inpsm;
            sources
                .sources
                .iter()
                .map(|s| {
                    s.grid().zip_map(mix, |x, y| {
                        let m = phase_sensitive_ratio(x, y, epsilon);
                        if clamp {
                            m.max(0.0)
                        } else {
                            m
                        }
                    })
                })
                .collect()
        }
        MaskKind::Estimated => return Err(Error::UnsupportedMask(kind.name())),
    };
    if kind == MaskKind::Ipsm {
        let negative = masks
            .iter()
            .flat_map(|m| m.as_slice())
            .filter(|&&v| v < 0.0)
            .count();
        log::debug!(
            "{:.1}% of IPSM entries are negative",
            100.0 * negative as f64 / (speakers * bins * frames) as f64
        );
    }
    MaskSet::new(kind, masks)
}

/// `|X| cos(theta_y - theta_x) / |Y|`, evaluated as `Re(X conj(Y)) / |Y|^2`.
fn phase_sensitive_ratio(x: Complex64, y: Complex64, epsilon: f64) -> f64 {
    let r = y.norm();
    if r < epsilon {
        0.0
    } else {
        (x * y.conj()).re / (r * r)
    }
}

/// Phase-discounted target `|X| cos(theta_y - theta_x)`.
pub(crate) fn phase_sensitive_target(x: Complex64, y: Complex64, epsilon: f64) -> f64 {
    let r = y.norm();
    if r < epsilon {
        0.0
    } else {
        (x * y.conj()).re / r
    }
}

/// `mask * |Y|`, clamped at zero from below.
pub fn apply_mask(mask: &Grid<f64>, mixture_mag: &MagSpectrogram) -> Result<MagSpectrogram> {
    if !mask.same_shape(mixture_mag) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs mixture {:?}",
            mask.shape(),
            mixture_mag.shape()
        )));
    }
    Ok(mask.zip_map(mixture_mag, |m, r| (m * r).max(0.0)))
}

/// Synthesizes `est_mag * exp(j * mixture_phase)`.
pub fn reconstruct(
    est_mag: &MagSpectrogram,
    mixture_phase: &PhaseSpectrogram,
    config: &StftConfig,
    sample_rate: u32,
) -> Result<TimeSignal> {
    let spec = polar_spectrogram(est_mag, mixture_phase, config, sample_rate)?;
    Ok(dsp::synthesize(&spec))
}

/// [`reconstruct`] for spectrograms produced by [`dsp::analyze_padded`].
pub fn reconstruct_trimmed(
    est_mag: &MagSpectrogram,
    mixture_phase: &PhaseSpectrogram,
    config: &StftConfig,
    sample_rate: u32,
    framing: Framing,
) -> Result<TimeSignal> {
    let spec = polar_spectrogram(est_mag, mixture_phase, config, sample_rate)?;
    Ok(dsp::synthesize_trimmed(&spec, framing))
}

fn polar_spectrogram(
    est_mag: &MagSpectrogram,
    mixture_phase: &PhaseSpectrogram,
    config: &StftConfig,
    sample_rate: u32,
) -> Result<ComplexSpectrogram> {
    if !est_mag.same_shape(mixture_phase) {
        return Err(Error::ShapeMismatch(format!(
            "magnitude {:?} vs phase {:?}",
            est_mag.shape(),
            mixture_phase.shape()
        )));
    }
    ComplexSpectrogram::from_polar(est_mag, mixture_phase, config.clone(), sample_rate)
}

/// Masks the mixture with every mask in `masks` and reconstructs each stream.
pub fn separate_with_masks(
    masks: &MaskSet,
    mixture: &ComplexSpectrogram,
    framing: Option<Framing>,
) -> Result<Vec<TimeSignal>> {
    let (mag, phase) = dsp::magnitude_phase(mixture);
    masks
        .masks()
        .iter()
        .map(|m| {
            let est = apply_mask(m, &mag)?;
            match framing {
                Some(fr) => reconstruct_trimmed(&est, &phase, mixture.config(), mixture.sample_rate(), fr),
                None => reconstruct(&est, &phase, mixture.config(), mixture.sample_rate()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Window;
    use alloc::vec;
    use core::f64::consts::PI;

    fn tiny_config() -> StftConfig {
        StftConfig::with_windows(4, 4, Window::Rectangular, Window::Rectangular).unwrap()
    }

    fn single_unit(values: &[Complex64]) -> SourceSet {
        let specs = values
            .iter()
            .map(|&v| {
                let mut g = Grid::zeros(3, 1);
                g[(0, 1)] = v;
                ComplexSpectrogram::new(g, tiny_config(), 8000).unwrap()
            })
            .collect();
        SourceSet::from_sources(specs).unwrap()
    }

    #[test]
    fn irm_on_one_unit() {
        let set = single_unit(&[Complex64::new(3.0, 0.0), Complex64::new(0.0, 1.0)]);
        let irm = oracle_mask(&set, MaskKind::Irm).unwrap();
        assert!((irm.mask(0)[(0, 1)] - 0.75).abs() < 1e-15);
        assert!((irm.mask(1)[(0, 1)] - 0.25).abs() < 1e-15);
        // Silent bins split evenly.
        assert_eq!(irm.mask(0)[(0, 0)], 0.5);
    }

    #[test]
    fn in_phase_iam_equals_ipsm() {
        let set = single_unit(&[Complex64::new(2.0, 0.0), Complex64::new(2.0, 0.0)]);
        let iam = oracle_mask(&set, MaskKind::Iam).unwrap();
        let ipsm = oracle_mask(&set, MaskKind::Ipsm).unwrap();
        assert!((iam.mask(0)[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((ipsm.mask(0)[(0, 1)] - 0.5).abs() < 1e-15);
        assert_eq!(iam.mask(0)[(0, 0)], 0.0);
    }

    #[test]
    fn opposite_phase_clamps_inpsm() {
        // X1 = -1, X2 = 3: Y = 2 and theta_y - theta_1 = pi.
        let set = single_unit(&[Complex64::from_polar(1.0, PI), Complex64::new(3.0, 0.0)]);
        let ipsm = oracle_mask(&set, MaskKind::Ipsm).unwrap();
        let inpsm = oracle_mask(&set, MaskKind::Inpsm).unwrap();
        assert!((ipsm.mask(0)[(0, 1)] + 0.5).abs() < 1e-12);
        assert_eq!(inpsm.mask(0)[(0, 1)], 0.0);
        assert!((ipsm.mask(1)[(0, 1)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn estimated_kind_has_no_oracle() {
        let set = single_unit(&[Complex64::new(1.0, 0.0)]);
        assert!(matches!(oracle_mask(&set, MaskKind::Estimated), Err(Error::UnsupportedMask(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = ComplexSpectrogram::new(Grid::zeros(3, 2), tiny_config(), 8000).unwrap();
        let b = ComplexSpectrogram::new(Grid::zeros(3, 1), tiny_config(), 8000).unwrap();
        assert!(matches!(SourceSet::new(vec![a.clone()], b.clone()), Err(Error::ShapeMismatch(_))));
        assert!(apply_mask(&Grid::zeros(3, 2), &Grid::zeros(3, 1)).is_err());
        assert!(reconstruct(&Grid::zeros(3, 2), &Grid::zeros(3, 1), &tiny_config(), 8000).is_err());
    }

    #[test]
    fn identity_and_zero_masks() {
        let mag = Grid::from_fn(3, 2, |t, f| (t + f) as f64);
        assert_eq!(apply_mask(&Grid::filled(3, 2, 1.0), &mag).unwrap(), mag);
        assert!(apply_mask(&Grid::zeros(3, 2), &mag)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        // Negative masks clamp to zero.
        assert!(apply_mask(&Grid::filled(3, 2, -1.0), &mag)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_identity_and_zero() {
        let config = StftConfig::default();
        let x: Vec<f64> = (0..2048).map(|n| (0.01 * n as f64).sin() * 0.5).collect();
        let x = TimeSignal::new(x, 8000).unwrap();
        let spec = dsp::analyze(&x, &config).unwrap();
        let (mag, phase) = dsp::magnitude_phase(&spec);
        let y = reconstruct(&mag, &phase, &config, 8000).unwrap();
        for n in 128..2048 - 128 {
            assert!((x.samples()[n] - y.samples()[n]).abs() < 1e-6);
        }
        let zero = reconstruct(&Grid::zeros(mag.bins(), mag.frames()), &phase, &config, 8000).unwrap();
        assert!(zero.samples().iter().all(|&v| v == 0.0));
    }
}
