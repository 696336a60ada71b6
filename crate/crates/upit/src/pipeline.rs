//! The file-level operations behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use upit_core::data::{targets_of, Utterance};
use upit_core::dsp::analyze_padded;
use upit_core::eval::{self, EvalReport};
use upit_core::masks::{self, MaskKind};
use upit_core::mixgen::{build_manifest, Mixture, MixtureRecord, Split};
use upit_core::model::{init_params, Mode, ModelParams};
use upit_core::pit::LossKind;
use upit_core::train::{self, BatchExecutor, EpochLog, TrainLog, TrainObserver, UtteranceStep};

use crate::checkpoint;
use crate::config::Settings;
use crate::corpus;
use crate::error::{CliError, Result};
use crate::manifest::{self, StoredManifest};
use crate::maskio;
use crate::report::{self, OracleRow};
use crate::wav;

/// Runs per-utterance jobs on the current rayon pool, keeping index order.
#[derive(Clone, Copy, Debug, Default)]
pub struct RayonExecutor;

impl BatchExecutor for RayonExecutor {
    fn run(
        &self,
        count: usize,
        job: &(dyn Fn(usize) -> upit_core::Result<UtteranceStep> + Sync),
    ) -> Vec<upit_core::Result<UtteranceStep>> {
        (0..count).into_par_iter().map(job).collect()
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes the resolved settings next to a command's outputs.
pub fn write_settings(out: &Path, settings: &Settings) -> Result<()> {
    write_text(&out.join("config.toml"), &settings.to_toml())
}

/// Reads a record's sources and mixes them in record order.
fn mix_record(root: &Path, sample_rate: u32, record: &MixtureRecord) -> Result<Mixture> {
    let signals = record
        .sources
        .iter()
        .map(|s| wav::read_wav_at(&root.join(&s.path), sample_rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(record.realize(&signals)?)
}

/// Mixes a stored record and labels its channels: speaker ids, then
/// `silent{k}` for padding channels. Sources are sorted by energy when the
/// manifest asks for it.
pub fn realize(stored: &StoredManifest, record: &MixtureRecord) -> Result<(Mixture, Vec<String>)> {
    let root = Path::new(&stored.manifest.corpus_root);
    let mut m = mix_record(root, stored.sample_rate, record)?;
    let real = record.speakers();
    if !record.gains.is_empty() && record.gains[..] != m.gains[..real.min(m.gains.len())] {
        return Err(CliError::format(
            "manifest",
            root,
            format!("record {} no longer matches its source audio", record.id),
        ));
    }
    let mut labels: Vec<String> = record.sources.iter().map(|s| s.speaker.clone()).collect();
    if stored.manifest.config.order_by_energy {
        let order = m.sort_by_energy();
        labels = order.into_iter().map(|i| labels[i].clone()).collect();
    }
    labels.extend((real..record.channels).map(|c| format!("silent{}", c + 1)));
    Ok((m, labels))
}

/// Builds a manifest from `corpus_root`, mixes every record and writes the
/// audio, the manifest and the resolved settings under `out`.
pub fn mixgen(settings: &Settings, corpus_root: &Path, out: &Path) -> Result<StoredManifest> {
    let config = settings.manifest_config()?;
    let speakers = corpus::scan(corpus_root)?;
    let root = fs::canonicalize(corpus_root).map_err(|e| CliError::io(corpus_root, e))?;
    let manifest = build_manifest(&root.to_string_lossy(), &speakers, &config)?;
    let rate = settings.stft.sample_rate;
    let mut stored = StoredManifest {
        manifest,
        sample_rate: rate,
    };
    create_dir(out)?;
    let mixtures = stored
        .manifest
        .records
        .par_iter()
        .map(|r| mix_record(&root, rate, r))
        .collect::<Result<Vec<_>>>()?;
    for (record, m) in stored.manifest.records.iter_mut().zip(&mixtures) {
        record.gains = m.gains[..record.speakers()].to_vec();
        record.scale = m.scale;
    }
    mixtures
        .into_par_iter()
        .zip(&stored.manifest.records)
        .map(|(mut m, r)| {
            if config.order_by_energy {
                m.sort_by_energy();
            }
            write_mixture(out, r, &m)
        })
        .collect::<Result<Vec<_>>>()?;
    manifest::save(&out.join("manifest.jsonl"), &stored)?;
    write_settings(out, settings)?;
    log::info!("wrote {} mixtures to {}", stored.manifest.records.len(), out.display());
    Ok(stored)
}

fn write_mixture(out: &Path, record: &MixtureRecord, m: &Mixture) -> Result<()> {
    let dir = out.join(record.split.name()).join(&record.id);
    create_dir(&dir)?;
    wav::write_wav(&dir.join("mix.wav"), &m.mixture)?;
    for (k, s) in m.sources.iter().enumerate() {
        wav::write_wav(&dir.join(format!("s{}.wav", k + 1)), s)?;
    }
    Ok(())
}

/// Speakers per utterance in a manifest, counting silent channels.
pub fn channel_count(stored: &StoredManifest) -> Result<usize> {
    let mut counts = stored.manifest.records.iter().map(|r| r.channels);
    let first = counts.next().ok_or(upit_core::Error::EmptyDataset)?;
    if counts.any(|c| c != first) {
        return Err(CliError::Config("manifest mixes records with different channel counts".into()));
    }
    Ok(first)
}

/// Mixes and analyzes every record of `split`, at most `limit` of them.
pub fn load_split(
    settings: &Settings,
    stored: &StoredManifest,
    split: Split,
    loss: LossKind,
    limit: Option<usize>,
) -> Result<Vec<Utterance>> {
    if stored.sample_rate != settings.stft.sample_rate {
        return Err(CliError::Config(format!(
            "manifest audio is {} Hz, configured sample rate is {} Hz",
            stored.sample_rate, settings.stft.sample_rate
        )));
    }
    let stft = settings.stft_config()?;
    let records: Vec<&MixtureRecord> = stored
        .manifest
        .split(split)
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    records
        .par_iter()
        .map(|r| {
            let (m, labels) = realize(stored, r)?;
            Ok(Utterance::new(r.id.clone(), labels, m, &stft, loss)?)
        })
        .collect()
}

/// Network initialization for a manifest: seeded weights plus input
/// statistics from the training split.
pub fn initial_model(settings: &Settings, speakers: usize, train_set: &[Utterance]) -> Result<ModelParams> {
    let spec = settings.model_spec(speakers)?;
    let mut params = init_params(&spec, settings.seed)?;
    if settings.model.normalize {
        params.set_norm(Some(train::fit_feature_norm(&targets_of(train_set))?))?;
    }
    Ok(params)
}

struct CheckpointObserver {
    start: Instant,
    every: usize,
    dir: PathBuf,
}

impl TrainObserver for CheckpointObserver {
    fn now(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn epoch_done(&mut self, params: &ModelParams, row: &EpochLog) -> upit_core::Result<()> {
        if self.every > 0 && row.epoch.is_multiple_of(self.every) {
            let path = self.dir.join(format!("epoch-{:04}.ckpt", row.epoch));
            if let Err(e) = checkpoint::save(&path, params) {
                log::error!("{e}");
                return Err(upit_core::Error::InvalidArgument(format!("could not write {}", path.display())));
            }
        }
        Ok(())
    }
}

/// Trains on the manifest's train split, validating on its valid split.
/// Writes `model.ckpt`, `train_log.csv` and `config.toml` under `out`.
pub fn train(settings: &Settings, manifest_path: &Path, out: &Path) -> Result<(ModelParams, TrainLog)> {
    let config = settings.train_config()?;
    let stored = manifest::load(manifest_path)?;
    let speakers = channel_count(&stored)?;
    let train_set = load_split(settings, &stored, Split::Train, config.loss, None)?;
    let valid_set = load_split(settings, &stored, Split::Valid, config.loss, None)?;
    if train_set.is_empty() {
        return Err(upit_core::Error::EmptyDataset.into());
    }
    let params = initial_model(settings, speakers, &train_set)?;
    create_dir(out)?;
    write_settings(out, settings)?;
    let ckpt_dir = out.join("checkpoints");
    if settings.train.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let mut observer = CheckpointObserver {
        start: Instant::now(),
        every: settings.train.checkpoint_every,
        dir: ckpt_dir,
    };
    let (params, log) = train::train_with(
        params,
        &targets_of(&train_set),
        &targets_of(&valid_set),
        &config,
        &RayonExecutor,
        &mut observer,
    )?;
    checkpoint::save(&out.join("model.ckpt"), &params)?;
    report::write_train_log(&out.join("train_log.csv"), &log)?;
    Ok((params, log))
}

fn check_model_stft(settings: &Settings, params: &ModelParams) -> Result<()> {
    let bins = settings.stft.frame_len / 2 + 1;
    if params.spec().input_bins != bins {
        return Err(CliError::Config(format!(
            "checkpoint expects {} frequency bins, frame length {} gives {bins}",
            params.spec().input_bins,
            settings.stft.frame_len
        )));
    }
    Ok(())
}

/// Separates one mixture file into `s1.wav` .. `sS.wav` under `out`, using
/// the same stream order for the whole file.
pub fn separate(
    settings: &Settings,
    checkpoint_path: &Path,
    input: &Path,
    out: &Path,
    write_masks: bool,
) -> Result<Vec<PathBuf>> {
    let params = checkpoint::load(checkpoint_path)?;
    check_model_stft(settings, &params)?;
    let stft = settings.stft_config()?;
    let mixture = wav::read_wav_at(input, settings.stft.sample_rate)?;
    let (spec, framing) = analyze_padded(&mixture, &stft)?;
    let (mag, _) = upit_core::dsp::magnitude_phase(&spec);
    let (est, _) = params.forward(&mag, Mode::Eval, 0)?;
    let streams = masks::separate_with_masks(&est, &spec, Some(framing))?;
    create_dir(out)?;
    write_settings(out, settings)?;
    let mut paths = Vec::new();
    for (k, s) in streams.iter().enumerate() {
        let path = out.join(format!("s{}.wav", k + 1));
        wav::write_wav(&path, s)?;
        paths.push(path);
        if write_masks {
            maskio::save(&out.join(format!("mask{}.bin", k + 1)), est.mask(k))?;
        }
    }
    Ok(paths)
}

/// Reconstructs every record of `split` with each ideal mask and scores it.
pub fn oracle(
    settings: &Settings,
    manifest_path: &Path,
    split: Split,
    out: &Path,
    limit: Option<usize>,
) -> Result<Vec<OracleRow>> {
    let stored = manifest::load(manifest_path)?;
    let utterances = load_split(settings, &stored, split, settings.loss_kind(), limit)?;
    create_dir(out)?;
    write_settings(out, settings)?;
    let per_utt = utterances
        .par_iter()
        .map(|u| oracle_utterance(u, out))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<OracleRow> = per_utt.into_iter().flatten().collect();
    report::write_oracle(&out.join("oracle_sdr.csv"), &rows)?;
    Ok(rows)
}

fn oracle_utterance(u: &Utterance, out: &Path) -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    for kind in MaskKind::ORACLE {
        let m = masks::oracle_mask(&u.set, kind)?;
        let streams = u.reconstruct(&m)?;
        let dir = out.join(kind.name()).join(&u.id);
        create_dir(&dir)?;
        for (k, s) in streams.iter().enumerate() {
            wav::write_wav(&dir.join(format!("s{}.wav", k + 1)), s)?;
        }
        let refs = &u.mixture.sources;
        let sdr_in = refs
            .iter()
            .map(|r| eval::sdr(r, &u.mixture.mixture))
            .collect::<upit_core::Result<Vec<_>>>()?;
        for (k, (r, s)) in refs.iter().zip(&streams).enumerate() {
            let sdr_out = eval::sdr(r, s)?;
            rows.push(OracleRow {
                utterance: u.id.clone(),
                mask: kind.name().into(),
                speaker: u.speakers[k].clone(),
                sdr_in: sdr_in[k],
                sdr_out,
                improvement: sdr_out - sdr_in[k],
            });
        }
    }
    Ok(rows)
}

/// Scores a checkpoint on the given splits; writes `eval_report.csv` and `summary.txt`.
pub fn evaluate(
    settings: &Settings,
    checkpoint_path: &Path,
    manifest_path: &Path,
    splits: &[Split],
    out: &Path,
    limit: Option<usize>,
) -> Result<Vec<(Split, EvalReport)>> {
    let params = checkpoint::load(checkpoint_path)?;
    check_model_stft(settings, &params)?;
    let stored = manifest::load(manifest_path)?;
    let speakers = channel_count(&stored)?;
    if speakers != params.spec().speakers {
        return Err(upit_core::Error::SpeakerMismatch {
            expected: params.spec().speakers,
            actual: speakers,
        }
        .into());
    }
    let mut reports = Vec::new();
    for &split in splits {
        let utterances = load_split(settings, &stored, split, settings.loss_kind(), limit)?;
        let evals = utterances
            .par_iter()
            .map(|u| {
                let (m, _) = params.forward(u.targets.mixture_magnitude(), Mode::Eval, 0)?;
                u.evaluate(&m, settings.eval.meta_frames, settings.eval.pairing)
            })
            .collect::<upit_core::Result<Vec<_>>>()?;
        reports.push((
            split,
            EvalReport {
                meta_frame_len: settings.eval.meta_frames,
                utterances: evals,
            },
        ));
    }
    create_dir(out)?;
    write_settings(out, settings)?;
    let named: Vec<(&str, &EvalReport)> = reports.iter().map(|(s, r)| (s.name(), r)).collect();
    report::write_eval_report(&out.join("eval_report.csv"), &named)?;
    write_text(&out.join("summary.txt"), &report::summary_table(&named))?;
    Ok(reports)
}
