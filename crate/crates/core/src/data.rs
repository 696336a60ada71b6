//! Mixed utterances prepared for training, separation and scoring.

use alloc::string::String;
use alloc::vec::Vec;

use crate::dsp::{Framing, StftConfig, TimeSignal};
use crate::error::{Error, Result};
use crate::eval::{self, EvalInput, Pairing, UtteranceEval};
use crate::masks::{self, MaskSet, SourceSet};
use crate::mixgen::Mixture;
use crate::model::{Mode, ModelParams};
use crate::pit::{LossKind, LossTargets};

/// A mixture with its spectrograms and regression targets.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    /// One label per reference channel.
    pub speakers: Vec<String>,
    pub mixture: Mixture,
    pub set: SourceSet,
    pub framing: Framing,
    pub targets: LossTargets,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        speakers: Vec<String>,
        mixture: Mixture,
        config: &StftConfig,
        loss: LossKind,
    ) -> Result<Self> {
        if speakers.len() != mixture.speakers() {
            return Err(Error::SpeakerMismatch {
                expected: mixture.speakers(),
                actual: speakers.len(),
            });
        }
        let (set, framing) = SourceSet::analyze_padded(&mixture.sources, &mixture.mixture, config)?;
        let targets = LossTargets::new(&set, loss)?;
        Ok(Utterance {
            id: id.into(),
            speakers,
            mixture,
            set,
            framing,
            targets,
        })
    }

    /// Masks the mixture with `masks` and returns one signal per mask, trimmed
    /// to the mixture length.
    pub fn reconstruct(&self, masks: &MaskSet) -> Result<Vec<TimeSignal>> {
        masks::separate_with_masks(masks, self.set.mixture(), Some(self.framing))
    }

    /// Runs the model in evaluation mode; returns the masks and the streams.
    pub fn separate(&self, params: &ModelParams) -> Result<(MaskSet, Vec<TimeSignal>)> {
        let (masks, _) = params.forward(self.targets.mixture_magnitude(), Mode::Eval, 0)?;
        let streams = self.reconstruct(&masks)?;
        Ok((masks, streams))
    }

    pub fn eval_input<'a>(&'a self, masks: &'a MaskSet) -> EvalInput<'a> {
        EvalInput {
            id: &self.id,
            speakers: &self.speakers,
            masks,
            mixture: self.set.mixture(),
            framing: Some(self.framing),
            mixture_signal: &self.mixture.mixture,
            references: &self.mixture.sources,
            targets: &self.targets,
        }
    }

    pub fn evaluate(&self, masks: &MaskSet, meta_frame_len: usize, pairing: Pairing) -> Result<UtteranceEval> {
        eval::evaluate_utterance(&self.eval_input(masks), meta_frame_len, pairing)
    }
}

/// Regression targets of every utterance, in order.
pub fn targets_of(utterances: &[Utterance]) -> Vec<LossTargets> {
    utterances.iter().map(|u| u.targets.clone()).collect()
}
