//! SGD training of the mask estimator under the conventional,
//! randomized-label, meta-frame PIT and utterance-level PIT criteria.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::model::{FeatureNorm, Gradients, Mode, ModelParams};
use crate::pit::{self, Assignment, LossKind, LossTargets};

/// How output streams are paired with reference labels during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Criterion {
    /// Fixed identity assignment.
    Conv,
    /// Identity assignment against labels shuffled once per utterance.
    ConvRand,
    /// Best permutation per meta-frame of `meta_frame_len` frames.
    Pit { meta_frame_len: usize },
    /// Best permutation per utterance.
    Upit,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Conv => "conv",
            Criterion::ConvRand => "conv-rand",
            Criterion::Pit { .. } => "pit",
            Criterion::Upit => "upit",
        }
    }
}

/// What the learning rate is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrUnit {
    /// The gradient of the loss averaged over T-F units.
    #[default]
    TfUnit,
    /// The gradient of the loss averaged over frames (units-per-frame times larger).
    Frame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub criterion: Criterion,
    pub loss: LossKind,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub lr_unit: LrUnit,
    pub max_epochs: usize,
    pub minibatch: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            criterion: Criterion::Upit,
            loss: LossKind::PhaseSensitive,
            lr: 2e-5,
            lr_decay: 0.7,
            lr_floor: 1e-10,
            lr_unit: LrUnit::TfUnit,
            max_epochs: 200,
            minibatch: 8,
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::BadConfig(format!("lr decay {} outside (0, 1)", self.lr_decay)));
        }
        if self.lr_floor.is_nan() || self.lr_floor <= 0.0 || !self.lr_floor.is_finite() {
            return Err(Error::BadConfig(format!("lr floor {} must be positive", self.lr_floor)));
        }
        if self.lr.is_nan() || self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::BadConfig(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.minibatch == 0 {
            return Err(Error::BadConfig("minibatch must hold at least one utterance".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::BadConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Criterion::Pit { meta_frame_len: 0 } = self.criterion {
            return Err(Error::BadConfig("meta-frame length must be >= 1".into()));
        }
        Ok(())
    }
}

/// One logged epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub valid_mse: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochLog>,
}

/// Decays `lr` when the objective went up; the flag asks training to stop.
pub fn lr_step(lr: f64, prev_objective: f64, objective: f64, config: &TrainConfig) -> (f64, bool) {
    let next = if objective > prev_objective { lr * config.lr_decay } else { lr };
    (next, next < config.lr_floor)
}

/// Loss and mask-gradient of one utterance under a criterion.
pub fn criterion_loss(
    est: &MaskSet,
    targets: &LossTargets,
    criterion: Criterion,
) -> Result<(f64, Vec<Assignment>)> {
    let frames = targets.frames();
    match criterion {
        Criterion::Conv | Criterion::ConvRand => {
            let a = [Assignment::whole(frames, pit::identity_permutation(targets.speakers()))];
            Ok((pit::assigned_loss(est, targets, &a)?, a.to_vec()))
        }
        Criterion::Upit => {
            let (loss, best) = pit::upit_loss(est, targets)?;
            Ok((loss, alloc::vec![Assignment::whole(frames, best.perm)]))
        }
        Criterion::Pit { meta_frame_len } => {
            let res = pit::pit_meta_frame_loss(est, targets, meta_frame_len, meta_frame_len)?;
            Ok((res.total, res.assignments()))
        }
    }
}

/// Output of one utterance's forward/backward pass.
#[derive(Clone, Debug)]
pub struct UtteranceStep {
    pub loss: f64,
    pub grads: Gradients,
}

/// Runs independent per-utterance jobs, returning results in index order.
pub trait BatchExecutor {
    fn run(&self, count: usize, job: &(dyn Fn(usize) -> Result<UtteranceStep> + Sync)) -> Vec<Result<UtteranceStep>>;
}

/// Runs jobs one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Serial;

impl BatchExecutor for Serial {
    fn run(&self, count: usize, job: &(dyn Fn(usize) -> Result<UtteranceStep> + Sync)) -> Vec<Result<UtteranceStep>> {
        (0..count).map(job).collect()
    }
}

/// Hooks for wall time and per-epoch side effects such as checkpoints.
pub trait TrainObserver {
    /// Seconds since an arbitrary origin.
    fn now(&mut self) -> f64 {
        0.0
    }

    fn epoch_done(&mut self, _params: &ModelParams, _row: &EpochLog) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Shuffles every utterance's reference labels with a seeded permutation.
pub fn randomize_labels(set: &[LossTargets], seed: u64) -> Result<Vec<LossTargets>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    set.iter()
        .map(|t| {
            let mut order = pit::identity_permutation(t.speakers());
            order.shuffle(&mut rng);
            t.reordered(&order)
        })
        .collect()
}

/// Per-bin normalization statistics over every mixture in `set`.
pub fn fit_feature_norm(set: &[LossTargets]) -> Result<FeatureNorm> {
    FeatureNorm::fit(set.iter().map(|t| t.mixture_magnitude()))
}

// Stateless 64-bit mixer used to derive independent sub-seeds.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean criterion value over `set` in evaluation mode.
pub fn objective(params: &ModelParams, set: &[LossTargets], criterion: Criterion) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for targets in set {
        let (est, _) = params.forward(targets.mixture_magnitude(), Mode::Eval, 0)?;
        total += criterion_loss(&est, targets, criterion)?.0;
    }
    Ok(total / set.len() as f64)
}

fn utterance_step(
    params: &ModelParams,
    targets: &LossTargets,
    criterion: Criterion,
    grad_scale: f64,
    seed: u64,
) -> Result<UtteranceStep> {
    let (est, trace) = params.forward(targets.mixture_magnitude(), Mode::Train, seed)?;
    let (loss, assignments) = criterion_loss(&est, targets, criterion)?;
    let mut upstream = pit::assigned_loss_gradient(&est, targets, &assignments)?;
    if grad_scale != 1.0 {
        for g in &mut upstream {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= grad_scale);
        }
    }
    let grads = params.backward(&trace, &upstream)?;
    Ok(UtteranceStep { loss, grads })
}

fn check_dataset(params: &ModelParams, set: &[LossTargets]) -> Result<()> {
    let spec = params.spec();
    for t in set {
        if t.speakers() != spec.speakers {
            return Err(Error::SpeakerMismatch {
                expected: spec.speakers,
                actual: t.speakers(),
            });
        }
        if t.bins() != spec.input_bins {
            return Err(Error::ShapeMismatch(format!(
                "utterance has {} bins, model expects {}",
                t.bins(),
                spec.input_bins
            )));
        }
    }
    Ok(())
}

/// [`train_with`] on the calling thread and without hooks.
pub fn train(
    model: ModelParams,
    train_set: &[LossTargets],
    valid_set: &[LossTargets],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    train_with(model, train_set, valid_set, config, &Serial, &mut NoObserver)
}

/// Plain minibatch SGD. The minibatch gradient is the mean of per-utterance
/// gradients, reduced in utterance order.
pub fn train_with(
    mut model: ModelParams,
    train_set: &[LossTargets],
    valid_set: &[LossTargets],
    config: &TrainConfig,
    executor: &dyn BatchExecutor,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_dataset(&model, train_set)?;
    check_dataset(&model, valid_set)?;
    model.set_dropout(config.dropout)?;

    let shuffled: Option<(Vec<LossTargets>, Vec<LossTargets>)> = if config.criterion == Criterion::ConvRand {
        Some((
            randomize_labels(train_set, mix_seed(config.seed, 1, 0))?,
            randomize_labels(valid_set, mix_seed(config.seed, 2, 0))?,
        ))
    } else {
        None
    };
    let (train_set, valid_set) = match &shuffled {
        Some((t, v)) => (&t[..], &v[..]),
        None => (train_set, valid_set),
    };

    let grad_scale = match config.lr_unit {
        LrUnit::TfUnit => 1.0,
        LrUnit::Frame => (model.spec().input_bins * model.spec().speakers) as f64,
    };
    let mut lr = config.lr;
    let mut prev: Option<f64> = None;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = observer.now();

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.minibatch).enumerate() {
            let params = &model;
            let step_seed = mix_seed(config.seed, epoch as u64, b as u64);
            let job = |i: usize| {
                utterance_step(
                    params,
                    &train_set[batch[i]],
                    config.criterion,
                    grad_scale,
                    mix_seed(step_seed, 4, batch[i] as u64),
                )
            };
            let results = executor.run(batch.len(), &job);
            let mut total: Option<Gradients> = None;
            for r in results {
                let step = r?;
                loss_sum += step.loss;
                match &mut total {
                    Some(g) => g.add_assign(&step.grads),
                    None => total = Some(step.grads),
                }
            }
            if let Some(mut g) = total {
                g.scale(1.0 / batch.len() as f64);
                if lr != 0.0 {
                    model.apply_gradients(&g, lr);
                }
            }
            if !model.is_finite() {
                return Err(Error::NonFinite("parameters diverged during training"));
            }
        }
        let train_mse = loss_sum / train_set.len() as f64;
        let valid_mse = if valid_set.is_empty() {
            None
        } else {
            Some(objective(&model, valid_set, config.criterion)?)
        };
        let row = EpochLog {
            epoch,
            train_mse,
            valid_mse,
            lr,
            seconds: observer.now() - start,
        };
        log::info!(
            "epoch {epoch}: train {train_mse:.6} valid {} lr {lr:e}",
            valid_mse.map_or_else(|| Box::from("-"), |v| format!("{v:.6}").into_boxed_str())
        );
        observer.epoch_done(&model, &row)?;
        log.rows.push(row);
        if let Some(p) = prev {
            let (next, stop) = lr_step(lr, p, train_mse, config);
            lr = next;
            if stop {
                log::info!("learning rate {lr:e} below floor, stopping");
                break;
            }
        }
        prev = Some(train_mse);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Grid;
    use crate::masks::MaskKind;
    use crate::model::{init_params, LayerSpec, ModelSpec, OutputActivation};
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::Rng;

    fn dataset(count: usize, seed: u64) -> Vec<LossTargets> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let frames = rng.random_range(3..7);
                let a: Grid<f64> = Grid::from_fn(5, frames, |_, f| if f < 2 { rng.random_range(0.5..1.0) } else { 0.0 });
                let b: Grid<f64> = Grid::from_fn(5, frames, |_, f| if f >= 3 { rng.random_range(0.5..1.0) } else { 0.0 });
                let mix = a.zip_map(&b, |x, y| x + y);
                LossTargets::from_parts(LossKind::Amplitude, mix, vec![a, b]).unwrap()
            })
            .collect()
    }

    fn model(seed: u64) -> ModelParams {
        let spec = ModelSpec {
            input_bins: 5,
            speakers: 2,
            layers: vec![LayerSpec::BiRecurrent { width: 4 }],
            output: OutputActivation::Softmax,
            dropout: 0.0,
        };
        init_params(&spec, seed).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            loss: LossKind::Amplitude,
            lr: 0.5,
            max_epochs: 5,
            minibatch: 3,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_schedule_constants() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.lr_decay, c.lr_floor, c.minibatch, c.dropout), (2e-5, 0.7, 1e-10, 8, 0.5));
        c.validate().unwrap();
    }

    #[test]
    fn lr_step_examples() {
        let c = TrainConfig::default();
        let (lr, stop) = lr_step(2e-5, 1.0, 1.1, &c);
        assert!((lr - 1.4e-5).abs() < 1e-20 && !stop);
        assert_eq!(lr_step(2e-5, 1.0, 0.9, &c), (2e-5, false));
        let mut lr = 2e-5;
        let mut decays = 0;
        loop {
            let (next, stop) = lr_step(lr, 1.0, 2.0, &c);
            decays += 1;
            lr = next;
            if stop {
                break;
            }
        }
        assert_eq!(decays, 35);
    }

    #[test]
    fn config_validation() {
        for bad in [
            TrainConfig { lr_decay: 1.0, ..TrainConfig::default() },
            TrainConfig { lr_floor: 0.0, ..TrainConfig::default() },
            TrainConfig { minibatch: 0, ..TrainConfig::default() },
            TrainConfig { dropout: 1.0, ..TrainConfig::default() },
            TrainConfig { criterion: Criterion::Pit { meta_frame_len: 0 }, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::BadConfig(_))));
        }
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let data = dataset(5, 1);
        let m = model(2);
        let config = TrainConfig { lr: 0.0, max_epochs: 1, ..quick_config() };
        let (out, log) = train(m.clone(), &data, &data, &config).unwrap();
        assert_eq!(out, m);
        assert_eq!(log.rows.len(), 1);
        assert!(log.rows[0].train_mse.is_finite() && log.rows[0].train_mse >= 0.0);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = dataset(12, 3);
        let config = TrainConfig { max_epochs: 30, ..quick_config() };
        let (a, log_a) = train(model(4), &data, &data[..4], &config).unwrap();
        let (b, log_b) = train(model(4), &data, &data[..4], &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        let first = log_a.rows[0].train_mse;
        let last = log_a.rows.last().unwrap().train_mse;
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(log_a.rows.iter().all(|r| r.train_mse.is_finite() && r.train_mse >= 0.0));
    }

    #[test]
    fn every_criterion_runs() {
        let data = dataset(4, 5);
        for criterion in [Criterion::Conv, Criterion::ConvRand, Criterion::Pit { meta_frame_len: 2 }, Criterion::Upit] {
            let config = TrainConfig { criterion, max_epochs: 2, ..quick_config() };
            let (_, log) = train(model(1), &data, &[], &config).unwrap();
            assert_eq!(log.rows.len(), 2);
            assert!(log.rows[0].valid_mse.is_none());
        }
    }

    #[test]
    fn upit_never_worse_than_fixed_assignment() {
        let data = dataset(6, 8);
        let m = model(3);
        let upit = objective(&m, &data, Criterion::Upit).unwrap();
        let conv = objective(&m, &data, Criterion::Conv).unwrap();
        let pit1 = objective(&m, &data, Criterion::Pit { meta_frame_len: 1 }).unwrap();
        assert!(upit <= conv * (1.0 + 1e-12) && pit1 <= upit * (1.0 + 1e-12), "{conv} {upit} {pit1}");
    }

    #[test]
    fn dataset_errors() {
        let m = model(1);
        assert!(matches!(train(m.clone(), &[], &[], &quick_config()), Err(Error::EmptyDataset)));
        let three: Vec<LossTargets> = dataset(2, 1)
            .into_iter()
            .map(|t| {
                let mut targets = t.targets().to_vec();
                targets.push(targets[0].clone());
                LossTargets::from_parts(LossKind::MaskMse(MaskKind::Irm), t.mixture_magnitude().clone(), targets).unwrap()
            })
            .collect();
        assert!(matches!(
            train(m, &three, &[], &quick_config()),
            Err(Error::SpeakerMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn randomized_labels_are_seeded_permutations() {
        let data = dataset(20, 2);
        let a = randomize_labels(&data, 9).unwrap();
        let b = randomize_labels(&data, 9).unwrap();
        let mut swapped = 0;
        for ((x, y), z) in a.iter().zip(&b).zip(&data) {
            assert_eq!(x.targets(), y.targets());
            if x.targets()[0] != z.targets()[0] {
                swapped += 1;
                assert_eq!(x.targets()[0], z.targets()[1]);
            }
        }
        assert!(swapped > 0 && swapped < 20);
    }

    #[test]
    fn stops_at_floor() {
        let data = dataset(4, 5);
        // A huge floor stops training as soon as the objective rises once.
        let config = TrainConfig {
            lr: 50.0,
            lr_floor: 49.0,
            max_epochs: 40,
            ..quick_config()
        };
        let (_, log) = train(model(1), &data, &[], &config).unwrap_or_else(|_| (model(1), TrainLog::default()));
        assert!(log.rows.len() < 40 || log.rows.windows(2).all(|w| w[1].train_mse <= w[0].train_mse));
    }
}
