//! Scale-invariant SDR scoring, default vs. oracle assignment evaluation and
//! active-stream selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dsp::{ComplexSpectrogram, Framing, Grid, TimeSignal};
use crate::error::{Error, Result};
use crate::masks::{self, MaskKind, MaskSet};
use crate::pit::{self, Assignment, LossTargets};

/// Largest SDR reported, in dB; the negative value bounds it from below.
pub const SDR_CAP: f64 = 100.0;

/// `10 log10(|a x|^2 / |a x - y|^2)` with `a = <x, y> / |x|^2`, clamped to
/// `[-SDR_CAP, SDR_CAP]`.
pub fn sdr(reference: &TimeSignal, estimate: &TimeSignal) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let x = reference.samples();
    let y = estimate.samples();
    let xx: f64 = x.iter().map(|v| v * v).sum();
    if xx == 0.0 {
        return Err(Error::ZeroReference);
    }
    let alpha = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / xx;
    let target = alpha * alpha * xx;
    let noise: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let d = alpha * a - b;
            d * d
        })
        .sum();
    if noise == 0.0 {
        return Ok(if target > 0.0 { SDR_CAP } else { -SDR_CAP });
    }
    if target == 0.0 {
        return Ok(-SDR_CAP);
    }
    Ok((10.0 * libm::log10(target / noise)).clamp(-SDR_CAP, SDR_CAP))
}

/// `sdr(ref_s, est_s) - sdr(ref_s, mixture)` for every speaker.
pub fn sdr_improvement(mixture: &TimeSignal, references: &[TimeSignal], estimates: &[TimeSignal]) -> Result<Vec<f64>> {
    if references.len() != estimates.len() {
        return Err(Error::SpeakerMismatch {
            expected: references.len(),
            actual: estimates.len(),
        });
    }
    references
        .iter()
        .zip(estimates)
        .map(|(r, e)| Ok(sdr(r, e)? - sdr(r, mixture)?))
        .collect()
}

/// Indices of the `k` most energetic streams, descending; ties go to the lower index.
pub fn select_active_streams(estimates: &[TimeSignal], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > estimates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} of {} streams",
            estimates.len()
        )));
    }
    let energies: Vec<f64> = estimates.iter().map(|s| s.energy()).collect();
    let mut order: Vec<usize> = (0..estimates.len()).collect();
    order.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    /// One permutation for the whole utterance.
    Default,
    /// Oracle permutation per meta-frame.
    Optimal,
}

impl AssignmentMode {
    pub fn name(self) -> &'static str {
        match self {
            AssignmentMode::Default => "default",
            AssignmentMode::Optimal => "optimal",
        }
    }
}

/// How default-mode streams are paired with references for scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// The permutation minimizing the utterance loss.
    #[default]
    UtteranceBest,
    /// Stream `s` is scored against reference `s`.
    Index,
}

/// Everything needed to score one separated utterance.
#[derive(Clone, Debug)]
pub struct EvalInput<'a> {
    pub id: &'a str,
    /// One label per reference, used for the per-speaker breakdown.
    pub speakers: &'a [String],
    pub masks: &'a MaskSet,
    pub mixture: &'a ComplexSpectrogram,
    /// Framing used when `mixture` was analyzed, if padded.
    pub framing: Option<Framing>,
    pub mixture_signal: &'a TimeSignal,
    pub references: &'a [TimeSignal],
    /// Regression targets used to pick oracle permutations.
    pub targets: &'a LossTargets,
}

/// Result of scoring one utterance in both modes. SDRs are indexed by reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEval {
    pub id: String,
    pub speakers: Vec<String>,
    pub sdr_in: Vec<f64>,
    pub default_sdr: Vec<f64>,
    pub optimal_sdr: Vec<f64>,
    /// Output stream scored against each reference in default mode.
    pub default_streams: Vec<usize>,
    /// Changes of the oracle permutation between consecutive meta-frames.
    pub switches: usize,
    /// Meta-frames whose oracle permutation differs from the default one.
    pub disagreements: usize,
}

impl UtteranceEval {
    pub fn sdr(&self, mode: AssignmentMode) -> &[f64] {
        match mode {
            AssignmentMode::Default => &self.default_sdr,
            AssignmentMode::Optimal => &self.optimal_sdr,
        }
    }

    pub fn improvements(&self, mode: AssignmentMode) -> Vec<f64> {
        self.sdr(mode).iter().zip(&self.sdr_in).map(|(o, i)| o - i).collect()
    }

    /// Mean improvement over this utterance's speakers.
    pub fn mean_improvement(&self, mode: AssignmentMode) -> f64 {
        let v = self.improvements(mode);
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One CSV row of an [`EvalReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub utterance: String,
    pub speaker: String,
    pub mode: AssignmentMode,
    pub sdr_in: f64,
    pub sdr_out: f64,
    pub improvement: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta_frame_len: usize,
    pub utterances: Vec<UtteranceEval>,
}

impl EvalReport {
    /// Arithmetic mean of the per-utterance mean improvements.
    pub fn mean_improvement(&self, mode: AssignmentMode) -> f64 {
        if self.utterances.is_empty() {
            return f64::NAN;
        }
        self.utterances.iter().map(|u| u.mean_improvement(mode)).sum::<f64>() / self.utterances.len() as f64
    }

    /// Optimal minus default mean improvement.
    pub fn gap(&self) -> f64 {
        self.mean_improvement(AssignmentMode::Optimal) - self.mean_improvement(AssignmentMode::Default)
    }

    pub fn total_switches(&self) -> usize {
        self.utterances.iter().map(|u| u.switches).sum()
    }

    pub fn rows(&self) -> Vec<ScoreRow> {
        let mut rows = Vec::new();
        for u in &self.utterances {
            for mode in [AssignmentMode::Default, AssignmentMode::Optimal] {
                for (s, (&out, &inp)) in u.sdr(mode).iter().zip(&u.sdr_in).enumerate() {
                    rows.push(ScoreRow {
                        utterance: u.id.clone(),
                        speaker: u.speakers[s].clone(),
                        mode,
                        sdr_in: inp,
                        sdr_out: out,
                        improvement: out - inp,
                    });
                }
            }
        }
        rows
    }

    /// Mean improvement per speaker label: `(speaker, default, optimal, count)`.
    pub fn per_speaker(&self) -> Vec<(String, f64, f64, usize)> {
        let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
        for u in &self.utterances {
            let d = u.improvements(AssignmentMode::Default);
            let o = u.improvements(AssignmentMode::Optimal);
            for (s, name) in u.speakers.iter().enumerate() {
                let e = acc.entry(name).or_insert((0.0, 0.0, 0));
                e.0 += d[s];
                e.1 += o[s];
                e.2 += 1;
            }
        }
        acc.into_iter()
            .map(|(k, (d, o, n))| (String::from(k), d / n as f64, o / n as f64, n))
            .collect()
    }
}

/// Masks with output `s` of every block moved to position `perm[s]`, so that
/// stream `r` of the result estimates reference `r`.
pub fn permute_masks(masks: &MaskSet, assignments: &[Assignment]) -> Result<MaskSet> {
    let speakers = masks.speakers();
    let mut out: Vec<Grid<f64>> = masks.masks().to_vec();
    for a in assignments {
        if a.perm.len() != speakers || !pit::is_permutation(&a.perm) || a.frames.end > masks.frames() {
            return Err(Error::InvalidArgument("bad assignment".into()));
        }
        for (s, &r) in a.perm.iter().enumerate() {
            for t in a.frames.clone() {
                out[r].frame_mut(t).copy_from_slice(masks.mask(s).frame(t));
            }
        }
    }
    MaskSet::new(MaskKind::Estimated, out)
}

fn score(input: &EvalInput<'_>, masks: &MaskSet) -> Result<Vec<f64>> {
    let streams = masks::separate_with_masks(masks, input.mixture, input.framing)?;
    input
        .references
        .iter()
        .zip(&streams)
        .map(|(r, e)| sdr(r, &e.resized(r.len())))
        .collect()
}

/// Scores one utterance with a constant permutation and with oracle
/// permutations chosen per meta-frame of `meta_frame_len` frames.
pub fn evaluate_utterance(input: &EvalInput<'_>, meta_frame_len: usize, pairing: Pairing) -> Result<UtteranceEval> {
    let speakers = input.references.len();
    if input.masks.speakers() != speakers || input.targets.speakers() != speakers {
        return Err(Error::SpeakerMismatch {
            expected: speakers,
            actual: input.masks.speakers(),
        });
    }
    if input.speakers.len() != speakers {
        return Err(Error::InvalidArgument("one speaker label per reference required".into()));
    }
    let frames = input.masks.frames();
    let default_perm = match pairing {
        Pairing::UtteranceBest => pit::upit_loss(input.masks, input.targets)?.1.perm,
        Pairing::Index => pit::identity_permutation(speakers),
    };
    let default = permute_masks(input.masks, &[Assignment::whole(frames, default_perm.clone())])?;
    let meta = pit::pit_meta_frame_loss(input.masks, input.targets, meta_frame_len, meta_frame_len)?;
    let assignments = meta.assignments();
    let optimal = permute_masks(input.masks, &assignments)?;
    let switches = assignments.windows(2).filter(|w| w[0].perm != w[1].perm).count();
    let disagreements = assignments.iter().filter(|a| a.perm != default_perm).count();

    let mut default_streams = alloc::vec![0; speakers];
    for (s, &r) in default_perm.iter().enumerate() {
        default_streams[r] = s;
    }
    let sdr_in = input
        .references
        .iter()
        .map(|r| sdr(r, &input.mixture_signal.resized(r.len())))
        .collect::<Result<Vec<_>>>()?;
    let default_sdr = score(input, &default)?;
    let optimal_sdr = if disagreements == 0 { default_sdr.clone() } else { score(input, &optimal)? };
    Ok(UtteranceEval {
        id: input.id.into(),
        speakers: input.speakers.to_vec(),
        sdr_in,
        default_sdr,
        optimal_sdr,
        default_streams,
        switches,
        disagreements,
    })
}

/// [`evaluate_utterance`] over a corpus.
pub fn evaluate_assignment(inputs: &[EvalInput<'_>], meta_frame_len: usize, pairing: Pairing) -> Result<EvalReport> {
    let utterances = inputs
        .iter()
        .map(|i| evaluate_utterance(i, meta_frame_len, pairing))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        meta_frame_len,
        utterances,
    })
}
