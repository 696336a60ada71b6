//! Synthetic "speakers" for small end-to-end experiments.
//!
//! Each toy speaker owns a frequency band. An utterance is a sum of random
//! partials inside that band under a slow syllable-like envelope, so two
//! speakers never share spectral support but their loudness changes over time.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::dsp::{StftConfig, TimeSignal, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::mixgen::{self, Mixture};
use crate::pit::LossKind;
use crate::train::mix_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpeaker {
    pub id: String,
    /// Lower and upper band edge in Hz.
    pub band: (f64, f64),
}

/// `count` speakers with equal-width disjoint bands between 150 Hz and
/// 3800 Hz, separated by guard gaps of a quarter band.
pub fn toy_speakers(count: usize) -> Vec<ToySpeaker> {
    let lo = 150.0;
    let hi = 3800.0;
    let slot = (hi - lo) / count as f64;
    (0..count)
        .map(|k| {
            let start = lo + slot * k as f64;
            ToySpeaker {
                id: format!("toy{k:02}"),
                band: (start + 0.125 * slot, start + 0.875 * slot),
            }
        })
        .collect()
}

const PARTIALS: usize = 12;

/// An utterance of `len` samples at `sample_rate`, peak amplitude at most 0.5.
pub fn toy_utterance(speaker: &ToySpeaker, len: usize, sample_rate: u32, seed: u64) -> Result<TimeSignal> {
    if len == 0 {
        return Err(Error::InvalidArgument("utterance length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let partials: Vec<(f64, f64, f64)> = (0..PARTIALS)
        .map(|_| {
            (
                rng.random_range(speaker.band.0..speaker.band.1),
                rng.random_range(0.2..1.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let norm: f64 = partials.iter().map(|p| p.1).sum();
    let rate = rng.random_range(1.5..4.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            let s = 0.5 * (1.0 + libm::sin(2.0 * PI * rate * t + phase));
            let env = 0.05 + 0.95 * s * s;
            let tone: f64 = partials
                .iter()
                .map(|&(f, a, p)| a * libm::sin(2.0 * PI * f * t + p))
                .sum();
            0.5 * env * tone / norm
        })
        .collect();
    TimeSignal::new(samples, sample_rate)
}

/// Settings for [`toy_mixtures`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyMixConfig {
    /// Sources per mixture.
    pub speakers: usize,
    /// Output channels; extra channels are silent references.
    pub channels: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub snr_min: f64,
    pub snr_max: f64,
    pub sample_rate: u32,
}

impl Default for ToyMixConfig {
    fn default() -> Self {
        ToyMixConfig {
            speakers: 2,
            channels: 2,
            min_len: 3200,
            max_len: 4800,
            snr_min: 0.0,
            snr_max: 5.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

/// Draws `count` mixtures of distinct speakers from `pool`.
pub fn toy_mixtures(pool: &[ToySpeaker], count: usize, config: &ToyMixConfig, seed: u64) -> Result<Vec<(Vec<String>, Mixture)>> {
    if pool.len() < config.speakers || config.speakers < 2 {
        return Err(Error::InsufficientCorpus(format!(
            "{} toy speakers cannot form {}-speaker mixtures",
            pool.len(),
            config.speakers
        )));
    }
    if config.channels < config.speakers || config.min_len == 0 || config.min_len > config.max_len {
        return Err(Error::BadConfig("invalid toy mixture settings".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let chosen: Vec<&ToySpeaker> = pool.choose_multiple(&mut rng, config.speakers).collect();
            let sources = chosen
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let len = rng.random_range(config.min_len..=config.max_len);
                    toy_utterance(s, len, config.sample_rate, mix_seed(seed, i as u64, k as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            let snrs: Vec<f64> = (1..config.speakers)
                .map(|_| rng.random_range(config.snr_min..=config.snr_max))
                .collect();
            let mut m = mixgen::mix(&sources, &snrs, 0)?;
            let mut names: Vec<String> = chosen.iter().map(|s| s.id.clone()).collect();
            if config.channels > config.speakers {
                m = mixgen::extend_silent_channel(&m, config.channels, mix_seed(seed, i as u64, 99))?;
                names.extend((config.speakers..config.channels).map(|c| format!("silent{c}")));
            }
            Ok((names, m))
        })
        .collect()
}

/// [`toy_mixtures`] analyzed into training utterances.
pub fn toy_utterances(
    pool: &[ToySpeaker],
    count: usize,
    config: &ToyMixConfig,
    stft: &StftConfig,
    loss: LossKind,
    seed: u64,
) -> Result<Vec<Utterance>> {
    toy_mixtures(pool, count, config, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (names, m))| Utterance::new(format!("toy-{seed}-{i:04}"), names, m, stft, loss))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::analyze;

    #[test]
    fn bands_are_disjoint() {
        let s = toy_speakers(4);
        for w in s.windows(2) {
            assert!(w[0].band.1 < w[1].band.0);
        }
        assert!(s[0].band.0 >= 150.0 && s[3].band.1 <= 3800.0);
    }

    #[test]
    fn energy_stays_in_band() {
        let spk = &toy_speakers(4)[1];
        let x = toy_utterance(spk, 8000, 8000, 3).unwrap();
        assert!(x.samples().iter().all(|v| v.abs() <= 0.5));
        let spec = analyze(&x, &StftConfig::default()).unwrap();
        let mag = spec.magnitude();
        let hz = |f: usize| f as f64 * 8000.0 / 256.0;
        let (mut inside, mut total) = (0.0, 0.0);
        for (i, v) in mag.as_slice().iter().enumerate() {
            let f = i % mag.bins();
            let e = v * v;
            total += e;
            if hz(f) >= spk.band.0 - 100.0 && hz(f) <= spk.band.1 + 100.0 {
                inside += e;
            }
        }
        assert!(inside / total > 0.99, "{}", inside / total);
    }

    #[test]
    fn mixtures_are_seeded() {
        let pool = toy_speakers(4);
        let cfg = ToyMixConfig { channels: 3, ..ToyMixConfig::default() };
        let a = toy_mixtures(&pool, 3, &cfg, 5).unwrap();
        let b = toy_mixtures(&pool, 3, &cfg, 5).unwrap();
        assert_eq!(a, b);
        for (names, m) in &a {
            assert_eq!(names.len(), 3);
            assert_eq!(m.silent, 1);
            assert_ne!(names[0], names[1]);
        }
        assert!(toy_mixtures(&pool[..1], 1, &cfg, 5).is_err());
    }
}
