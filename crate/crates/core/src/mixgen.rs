//! Mixture synthesis at controlled SNRs and dataset manifest planning.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, TimeSignal};
use crate::error::{Error, Result};
use crate::train::mix_seed;

/// Energy of a silent channel relative to the mean energy of the real sources.
pub const SILENT_CHANNEL_RATIO: f64 = 1e-7;

/// Scaled, padded sources and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    /// Linear gain applied to each original source, including `scale`.
    pub gains: Vec<f64>,
    /// SNR of the reference against every other source, in source order.
    pub snrs_db: Vec<f64>,
    pub reference: usize,
    /// Common factor applied to avoid clipping, 1 when none was needed.
    pub scale: f64,
    /// Reference signals, all of the mixture's length.
    pub sources: Vec<TimeSignal>,
    pub mixture: TimeSignal,
    /// Number of trailing reference-only silent channels in `sources`.
    pub silent: usize,
}

impl Mixture {
    pub fn speakers(&self) -> usize {
        self.sources.len()
    }

    /// Reorders the real sources by decreasing energy; returns the order used.
    pub fn sort_by_energy(&mut self) -> Vec<usize> {
        let real = self.sources.len() - self.silent;
        let energies: Vec<f64> = self.sources[..real].iter().map(|s| s.energy()).collect();
        let mut order: Vec<usize> = (0..real).collect();
        order.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]).then(a.cmp(&b)));
        let sources: Vec<TimeSignal> = order.iter().map(|&i| self.sources[i].clone()).collect();
        let gains: Vec<f64> = order.iter().map(|&i| self.gains[i]).collect();
        self.sources.splice(..real, sources);
        self.gains = gains;
        self.reference = order.iter().position(|&i| i == self.reference).unwrap_or(0);
        order
    }
}

/// Mixes `sources` so the reference has gain 1 and `snrs_db[k]` is the SNR of
/// the reference against the k-th other source, measured over the first
/// `min(len)` samples. Shorter sources are zero-padded afterwards.
pub fn mix(sources: &[TimeSignal], snrs_db: &[f64], reference: usize) -> Result<Mixture> {
    if sources.len() < 2 {
        return Err(Error::InvalidArgument("mixing needs at least two sources".into()));
    }
    if reference >= sources.len() {
        return Err(Error::InvalidArgument(format!("reference index {reference} out of range")));
    }
    if snrs_db.len() != sources.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "{} sources need {} SNR values, got {}",
            sources.len(),
            sources.len() - 1,
            snrs_db.len()
        )));
    }
    if snrs_db.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("SNR"));
    }
    let rate = sources[0].sample_rate();
    if sources.iter().any(|s| s.sample_rate() != rate) {
        return Err(Error::InvalidArgument("sources have different sample rates".into()));
    }
    let overlap = sources.iter().map(|s| s.len()).min().unwrap_or(0);
    let longest = sources.iter().map(|s| s.len()).max().unwrap_or(0);
    let energies: Vec<f64> = sources.iter().map(|s| dsp::energy(&s.samples()[..overlap])).collect();
    if let Some(i) = energies.iter().position(|&e| e <= 0.0) {
        return Err(Error::SilentSource(i));
    }
    let e_ref = energies[reference];
    let mut gains = vec![1.0; sources.len()];
    let mut others = 0;
    for (k, gain) in gains.iter_mut().enumerate() {
        if k == reference {
            continue;
        }
        let snr = snrs_db[others];
        others += 1;
        *gain = libm::sqrt(e_ref / (energies[k] * libm::pow(10.0, snr / 10.0)));
    }

    let mut scaled: Vec<Vec<f64>> = sources
        .iter()
        .zip(&gains)
        .map(|(s, g)| {
            let mut v: Vec<f64> = s.samples().iter().map(|x| x * g).collect();
            v.resize(longest, 0.0);
            v
        })
        .collect();
    let mut mixture = vec![0.0; longest];
    for s in &scaled {
        for (m, x) in mixture.iter_mut().zip(s) {
            *m += x;
        }
    }
    let peak = scaled
        .iter()
        .flatten()
        .chain(mixture.iter())
        .fold(0.0f64, |p, x| p.max(x.abs()));
    let mut scale = 1.0;
    if peak > 1.0 {
        scale = 1.0 / peak;
        for v in scaled.iter_mut().chain(core::iter::once(&mut mixture)) {
            v.iter_mut().for_each(|x| *x *= scale);
        }
        gains.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(Mixture {
        gains,
        snrs_db: snrs_db.to_vec(),
        reference,
        scale,
        sources: scaled
            .into_iter()
            .map(|v| TimeSignal::new(v, rate))
            .collect::<Result<_>>()?,
        mixture: TimeSignal::new(mixture, rate)?,
        silent: 0,
    })
}

/// Appends reference-only white-noise channels up to `target_speakers`,
/// each with exactly [`SILENT_CHANNEL_RATIO`] times the mean energy of the
/// real sources. The mixture is left unchanged.
pub fn extend_silent_channel(record: &Mixture, target_speakers: usize, seed: u64) -> Result<Mixture> {
    let have = record.speakers();
    if target_speakers <= have {
        return Err(Error::InvalidArgument(format!(
            "target speaker count {target_speakers} must exceed current {have}"
        )));
    }
    let real = &record.sources[..have - record.silent];
    let mean_energy = real.iter().map(|s| s.energy()).sum::<f64>() / real.len() as f64;
    let target = mean_energy * SILENT_CHANNEL_RATIO;
    let len = record.mixture.len();
    let rate = record.mixture.sample_rate();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = record.clone();
    for _ in have..target_speakers {
        let noise: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let e = dsp::energy(&noise);
        let g = if e > 0.0 { libm::sqrt(target / e) } else { 0.0 };
        out.sources.push(TimeSignal::new(noise.iter().map(|x| x * g).collect(), rate)?);
        out.silent += 1;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    /// Closed condition: speakers seen in training.
    Valid,
    /// Open condition: held-out speakers.
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Utterance files of one speaker, paths relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerUtterances {
    pub speaker: String,
    pub utterances: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub speaker: String,
    pub path: String,
}

/// Metadata of one mixture; `gains` and `scale` are filled in once the audio
/// has been mixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub id: String,
    pub split: Split,
    pub sources: Vec<SourceRef>,
    pub snrs_db: Vec<f64>,
    pub reference: usize,
    #[serde(default)]
    pub gains: Vec<f64>,
    #[serde(default = "one")]
    pub scale: f64,
    /// Total output channels; channels beyond `sources.len()` are silent.
    pub channels: usize,
    pub noise_seed: u64,
}

fn one() -> f64 {
    1.0
}

impl MixtureRecord {
    pub fn speakers(&self) -> usize {
        self.sources.len()
    }

    /// Mixes `signals` (one per source, in record order) as this record describes.
    pub fn realize(&self, signals: &[TimeSignal]) -> Result<Mixture> {
        if signals.len() != self.sources.len() {
            return Err(Error::SpeakerMismatch {
                expected: self.sources.len(),
                actual: signals.len(),
            });
        }
        let m = mix(signals, &self.snrs_db, self.reference)?;
        if self.channels > signals.len() {
            extend_silent_channel(&m, self.channels, self.noise_seed)
        } else {
            Ok(m)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub speakers: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Speakers held out for the open-condition test split.
    pub open_speakers: usize,
    pub snr_min: f64,
    pub snr_max: f64,
    pub seed: u64,
    /// Output channel count; extra channels are silent.
    pub channels: Option<usize>,
    /// Sort sources by energy after mixing.
    #[serde(default)]
    pub order_by_energy: bool,
}

impl Default for ManifestConfig {
    fn default() -> Self {
        ManifestConfig {
            speakers: 2,
            train: 200,
            valid: 50,
            test: 50,
            open_speakers: 2,
            snr_min: 0.0,
            snr_max: 5.0,
            seed: 0,
            channels: None,
            order_by_energy: false,
        }
    }
}

impl ManifestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::BadConfig("mixtures need at least two speakers".into()));
        }
        if !(self.snr_min.is_finite() && self.snr_max.is_finite() && self.snr_min <= self.snr_max) {
            return Err(Error::BadConfig(format!(
                "invalid SNR range [{}, {}]",
                self.snr_min, self.snr_max
            )));
        }
        if let Some(c) = self.channels {
            if c < self.speakers {
                return Err(Error::BadConfig(format!(
                    "{c} channels cannot hold {} speakers",
                    self.speakers
                )));
            }
        }
        if self.test > 0 && self.open_speakers < self.speakers {
            return Err(Error::BadConfig(format!(
                "open condition needs at least {} held-out speakers",
                self.speakers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub corpus_root: String,
    pub config: ManifestConfig,
    pub closed_speakers: Vec<String>,
    pub open_speakers: Vec<String>,
    pub records: Vec<MixtureRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &MixtureRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Deterministic speaker partition, pairing and SNR draws for a corpus.
pub fn build_manifest(corpus_root: &str, corpus: &[SpeakerUtterances], config: &ManifestConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let mut speakers: Vec<&SpeakerUtterances> = corpus.iter().filter(|s| !s.utterances.is_empty()).collect();
    speakers.sort_by(|a, b| a.speaker.cmp(&b.speaker));
    if speakers.windows(2).any(|w| w[0].speaker == w[1].speaker) {
        return Err(Error::InvalidArgument("duplicate speaker id in corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    speakers.shuffle(&mut rng);
    let open_count = if config.test > 0 { config.open_speakers } else { 0 };
    if speakers.len() < open_count + config.speakers {
        return Err(Error::InsufficientCorpus(format!(
            "{} speakers with audio; need {} held-out plus {} seen",
            speakers.len(),
            open_count,
            config.speakers
        )));
    }
    let (open, closed) = speakers.split_at(open_count);
    let channels = config.channels.unwrap_or(config.speakers);

    let mut records = Vec::with_capacity(config.train + config.valid + config.test);
    for (split, count, pool) in [
        (Split::Train, config.train, closed),
        (Split::Valid, config.valid, closed),
        (Split::Test, config.test, open),
    ] {
        for i in 0..count {
            let chosen: Vec<&&SpeakerUtterances> = pool.choose_multiple(&mut rng, config.speakers).collect();
            let sources = chosen
                .iter()
                .map(|s| SourceRef {
                    speaker: s.speaker.clone(),
                    path: s.utterances[rng.random_range(0..s.utterances.len())].clone(),
                })
                .collect();
            let snrs_db = (1..config.speakers)
                .map(|_| {
                    if config.snr_max > config.snr_min {
                        rng.random_range(config.snr_min..=config.snr_max)
                    } else {
                        config.snr_min
                    }
                })
                .collect();
            let index = records.len() as u64;
            records.push(MixtureRecord {
                id: format!("{}-{i:05}", split.name()),
                split,
                sources,
                snrs_db,
                reference: 0,
                gains: Vec::new(),
                scale: 1.0,
                channels,
                noise_seed: mix_seed(config.seed, 5, index),
            });
        }
    }

    let names = |list: &[&SpeakerUtterances]| {
        let mut v: Vec<String> = list.iter().map(|s| s.speaker.clone()).collect();
        v.sort();
        v
    };
    Ok(DatasetManifest {
        corpus_root: corpus_root.into(),
        config: config.clone(),
        closed_speakers: names(closed),
        open_speakers: names(open),
        records,
    })
}
