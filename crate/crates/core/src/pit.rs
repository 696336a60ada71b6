//! Separation losses and permutation invariant training.
//!
//! A [`PairwiseLossMatrix`] holds the `S^2` scores of every output stream
//! against every reference over a range of frames. Permutation losses are
//! sums of its entries, so the `S!` candidates never touch the
//! spectrograms again.
//!
//! Losses are normalized by `B = frames * F * S`, the number of T-F units
//! scored. When an utterance is split into meta-frames the total is
//! normalized by the units over all meta-frames, which makes a single
//! meta-frame spanning the utterance identical to the utterance-level loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dsp::{Grid, MagSpectrogram};
use crate::error::{Error, Result};
use crate::masks::{self, MaskKind, MaskSet, SourceSet};
use crate::DEFAULT_EPSILON;

/// Largest speaker count searched exhaustively by [`best_permutation`].
pub const EXHAUSTIVE_LIMIT: usize = 8;

/// Training criterion applied to the estimated masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", content = "mask")]
pub enum LossKind {
    /// MSE between estimated and ideal masks.
    MaskMse(MaskKind),
    /// MSE between `M * R` and the source magnitude.
    Amplitude,
    /// MSE between `M * R` and the phase-discounted source magnitude.
    PhaseSensitive,
}

impl LossKind {
    fn scores_magnitude(self) -> bool {
        !matches!(self, LossKind::MaskMse(_))
    }
}

/// Per-reference regression targets for one utterance.
#[derive(Clone, Debug)]
pub struct LossTargets {
    kind: LossKind,
    mixture_mag: MagSpectrogram,
    targets: Vec<Grid<f64>>,
}

impl LossTargets {
    pub fn new(sources: &SourceSet, kind: LossKind) -> Result<Self> {
        let mixture_mag = sources.mixture_magnitude();
        let targets = match kind {
            LossKind::MaskMse(mask) => masks::oracle_mask(sources, mask)?.into_masks(),
            LossKind::Amplitude => sources.source_magnitudes(),
            LossKind::PhaseSensitive => {
                let mix = sources.mixture().grid();
                sources
                    .sources()
                    .iter()
                    .map(|s| {
                        s.grid()
                            .zip_map(mix, |x, y| masks::phase_sensitive_target(x, y, DEFAULT_EPSILON))
                    })
                    .collect()
            }
        };
        Self::from_parts(kind, mixture_mag, targets)
    }

    pub fn from_parts(kind: LossKind, mixture_mag: MagSpectrogram, targets: Vec<Grid<f64>>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("no targets".into()));
        }
        if targets.iter().any(|t| !t.same_shape(&mixture_mag)) {
            return Err(Error::ShapeMismatch("targets and mixture differ in shape".into()));
        }
        if !mixture_mag.is_finite() || targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("loss targets"));
        }
        Ok(LossTargets {
            kind,
            mixture_mag,
            targets,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn speakers(&self) -> usize {
        self.targets.len()
    }

    pub fn bins(&self) -> usize {
        self.mixture_mag.bins()
    }

    pub fn frames(&self) -> usize {
        self.mixture_mag.frames()
    }

    pub fn mixture_magnitude(&self) -> &MagSpectrogram {
        &self.mixture_mag
    }

    pub fn targets(&self) -> &[Grid<f64>] {
        &self.targets
    }

    /// Target `i` of the result is target `order[i]` of `self`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.speakers() || !is_permutation(order) {
            return Err(Error::InvalidArgument("order is not a permutation".into()));
        }
        Ok(LossTargets {
            kind: self.kind,
            mixture_mag: self.mixture_mag.clone(),
            targets: order.iter().map(|&i| self.targets[i].clone()).collect(),
        })
    }

    fn check(&self, est: &MaskSet) -> Result<()> {
        if est.speakers() != self.speakers() {
            return Err(Error::SpeakerMismatch {
                expected: self.speakers(),
                actual: est.speakers(),
            });
        }
        if est.mask(0).shape() != self.mixture_mag.shape() {
            return Err(Error::ShapeMismatch(format!(
                "masks {:?} vs targets {:?}",
                est.mask(0).shape(),
                self.mixture_mag.shape()
            )));
        }
        Ok(())
    }

    /// Sum over `frames` of squared error between output `mask` and target `r`.
    fn squared_error(&self, mask: &Grid<f64>, r: usize, frames: Range<usize>) -> f64 {
        let bins = self.bins();
        let span = frames.start * bins..frames.end * bins;
        let m = &mask.as_slice()[span.clone()];
        let target = &self.targets[r].as_slice()[span.clone()];
        let mag = &self.mixture_mag.as_slice()[span];
        if self.kind.scores_magnitude() {
            m.iter()
                .zip(mag)
                .zip(target)
                .map(|((m, r), a)| {
                    let d = m * r - a;
                    d * d
                })
                .sum()
        } else {
            m.iter()
                .zip(target)
                .map(|(m, a)| {
                    let d = m - a;
                    d * d
                })
                .sum()
        }
    }
}

/// Entry `(s, r)` is the normalized loss of output `s` against reference `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseLossMatrix {
    speakers: usize,
    entries: Vec<f64>,
    normalizer: f64,
    evaluations: usize,
}

impl PairwiseLossMatrix {
    /// Wraps precomputed row-major entries (normalizer 1, no evaluations).
    pub fn from_entries(speakers: usize, entries: Vec<f64>) -> Result<Self> {
        if speakers == 0 || entries.len() != speakers * speakers {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {speakers}x{speakers} matrix",
                entries.len()
            )));
        }
        if entries.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::InvalidArgument("pairwise losses must be finite and non-negative".into()));
        }
        Ok(PairwiseLossMatrix {
            speakers,
            entries,
            normalizer: 1.0,
            evaluations: 0,
        })
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn get(&self, output: usize, reference: usize) -> f64 {
        self.entries[output * self.speakers + reference]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Number of T-F units `B` the entries were divided by.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// Number of Frobenius-norm evaluations performed to build the matrix.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Sum of `entries(s, perm[s])` in output order.
    pub fn permutation_loss(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(s, &r)| self.get(s, r)).sum()
    }
}

/// `perm[s]` is the reference assigned to output stream `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationResult {
    pub perm: Vec<usize>,
    pub loss: f64,
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < perm.len() && !core::mem::replace(&mut seen[p], true))
}

pub fn identity_permutation(speakers: usize) -> Vec<usize> {
    (0..speakers).collect()
}

/// Advances `perm` to the next permutation in lexicographic order.
pub(crate) fn next_permutation(perm: &mut [usize]) -> bool {
    if perm.len() < 2 {
        return false;
    }
    let mut i = perm.len() - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = perm.len() - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// Builds the `S x S` matrix over `frames`.
pub fn pairwise_loss_matrix(
    est: &MaskSet,
    targets: &LossTargets,
    frames: Range<usize>,
) -> Result<PairwiseLossMatrix> {
    targets.check(est)?;
    if frames.start >= frames.end || frames.end > targets.frames() {
        return Err(Error::InvalidArgument(format!(
            "frame range {frames:?} outside 0..{}",
            targets.frames()
        )));
    }
    let speakers = est.speakers();
    let normalizer = (frames.len() * targets.bins() * speakers) as f64;
    let mut entries = Vec::with_capacity(speakers * speakers);
    let mut evaluations = 0;
    for s in 0..speakers {
        for r in 0..speakers {
            entries.push(targets.squared_error(est.mask(s), r, frames.clone()) / normalizer);
            evaluations += 1;
        }
    }
    Ok(PairwiseLossMatrix {
        speakers,
        entries,
        normalizer,
        evaluations,
    })
}

/// Exhaustive minimum over all `S!` permutations; ties go to the
/// lexicographically smallest permutation.
pub fn best_permutation(matrix: &PairwiseLossMatrix) -> Result<PermutationResult> {
    best_permutation_with_limit(matrix, EXHAUSTIVE_LIMIT)
}

pub fn best_permutation_with_limit(matrix: &PairwiseLossMatrix, limit: usize) -> Result<PermutationResult> {
    let speakers = matrix.speakers();
    if speakers > limit {
        return Err(Error::TooManySpeakers { speakers, limit });
    }
    let mut perm = identity_permutation(speakers);
    let mut best = PermutationResult {
        loss: matrix.permutation_loss(&perm),
        perm: perm.clone(),
    };
    while next_permutation(&mut perm) {
        let loss = matrix.permutation_loss(&perm);
        if loss < best.loss {
            best.loss = loss;
            best.perm.copy_from_slice(&perm);
        }
    }
    Ok(best)
}

/// Minimum-cost assignment via the Hungarian method, for any `S`.
pub fn assignment_permutation(matrix: &PairwiseLossMatrix) -> PermutationResult {
    let n = matrix.speakers();
    // Potentials formulation with 1-based arrays; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col] = true;
            let r = row_of_col[col];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for j in 1..=n {
                if !used[j] {
                    let reduced = matrix.get(r - 1, j - 1) - u[r] - v[j];
                    if reduced < min_to[j] {
                        min_to[j] = reduced;
                        way[j] = col;
                    }
                    if min_to[j] < delta {
                        delta = min_to[j];
                        next = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            col = next;
            if row_of_col[col] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col];
            row_of_col[col] = row_of_col[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[row_of_col[j] - 1] = j - 1;
    }
    PermutationResult {
        loss: matrix.permutation_loss(&perm),
        perm,
    }
}

/// Utterance-level PIT: the single permutation minimizing the loss over all
/// frames, and that loss.
pub fn upit_loss(est: &MaskSet, targets: &LossTargets) -> Result<(f64, PermutationResult)> {
    let matrix = pairwise_loss_matrix(est, targets, 0..targets.frames())?;
    let best = best_permutation(&matrix)?;
    Ok((best.loss, best))
}

/// One scored block of frames and the permutation chosen for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub frames: Range<usize>,
    pub perm: Vec<usize>,
}

impl Assignment {
    pub fn whole(frames: usize, perm: Vec<usize>) -> Self {
        Assignment {
            frames: 0..frames,
            perm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaFrameLoss {
    /// Mean squared error over every scored T-F unit.
    pub total: f64,
    pub segments: Vec<(Range<usize>, PermutationResult)>,
}

impl MetaFrameLoss {
    pub fn assignments(&self) -> Vec<Assignment> {
        self.segments
            .iter()
            .map(|(frames, r)| Assignment {
                frames: frames.clone(),
                perm: r.perm.clone(),
            })
            .collect()
    }
}

/// Start frames of meta-frames of `len` frames every `stride` frames; the
/// last one ends at `frames`, truncated if needed.
pub fn meta_frame_ranges(frames: usize, len: usize, stride: usize) -> Result<Vec<Range<usize>>> {
    if len < 1 || stride < 1 {
        return Err(Error::InvalidArgument(format!(
            "meta-frame length and stride must be >= 1 (got {len}, {stride})"
        )));
    }
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < frames {
        let end = (start + len).min(frames);
        ranges.push(start..end);
        if end == frames {
            break;
        }
        start += stride;
    }
    Ok(ranges)
}

/// Frame-level PIT: the best permutation is chosen independently for each
/// meta-frame of `meta_len` frames.
pub fn pit_meta_frame_loss(
    est: &MaskSet,
    targets: &LossTargets,
    meta_len: usize,
    stride: usize,
) -> Result<MetaFrameLoss> {
    targets.check(est)?;
    let ranges = meta_frame_ranges(targets.frames(), meta_len, stride)?;
    let mut weighted = 0.0;
    let mut units = 0.0;
    let mut segments = Vec::with_capacity(ranges.len());
    for range in ranges {
        let matrix = pairwise_loss_matrix(est, targets, range.clone())?;
        let best = best_permutation(&matrix)?;
        weighted += best.loss * matrix.normalizer();
        units += matrix.normalizer();
        segments.push((range, best));
    }
    Ok(MetaFrameLoss {
        total: weighted / units,
        segments,
    })
}

fn check_assignments(targets: &LossTargets, assignments: &[Assignment]) -> Result<f64> {
    let mut units = 0usize;
    for a in assignments {
        if a.perm.len() != targets.speakers() || !is_permutation(&a.perm) {
            return Err(Error::InvalidArgument("assignment is not a permutation".into()));
        }
        if a.frames.start >= a.frames.end || a.frames.end > targets.frames() {
            return Err(Error::InvalidArgument("assignment frames out of range".into()));
        }
        units += a.frames.len() * targets.bins() * targets.speakers();
    }
    if units == 0 {
        return Err(Error::InvalidArgument("no assignments".into()));
    }
    Ok(units as f64)
}

/// Loss under fixed per-block permutations, normalized by all scored units.
pub fn assigned_loss(est: &MaskSet, targets: &LossTargets, assignments: &[Assignment]) -> Result<f64> {
    targets.check(est)?;
    let units = check_assignments(targets, assignments)?;
    let mut total = 0.0;
    for a in assignments {
        for (s, &r) in a.perm.iter().enumerate() {
            total += targets.squared_error(est.mask(s), r, a.frames.clone());
        }
    }
    Ok(total / units)
}

/// Gradient of [`assigned_loss`] with respect to every estimated mask entry.
pub fn assigned_loss_gradient(
    est: &MaskSet,
    targets: &LossTargets,
    assignments: &[Assignment],
) -> Result<Vec<Grid<f64>>> {
    targets.check(est)?;
    let units = check_assignments(targets, assignments)?;
    let scale = 2.0 / units;
    let bins = targets.bins();
    let mut grads: Vec<Grid<f64>> = (0..est.speakers())
        .map(|_| Grid::zeros(bins, targets.frames()))
        .collect();
    let magnitude = targets.kind.scores_magnitude();
    for a in assignments {
        let span = a.frames.start * bins..a.frames.end * bins;
        for (s, &r) in a.perm.iter().enumerate() {
            let m = &est.mask(s).as_slice()[span.clone()];
            let target = &targets.targets[r].as_slice()[span.clone()];
            let mag = &targets.mixture_mag.as_slice()[span.clone()];
            let g = &mut grads[s].as_mut_slice()[span.clone()];
            for i in 0..m.len() {
                g[i] += if magnitude {
                    scale * (m[i] * mag[i] - target[i]) * mag[i]
                } else {
                    scale * (m[i] - target[i])
                };
            }
        }
    }
    Ok(grads)
}

/// Element-wise mean of two mask estimates.
pub fn two_stage_average(first: &MaskSet, second: &MaskSet) -> Result<MaskSet> {
    if !first.same_shape(second) {
        return Err(Error::ShapeMismatch("mask sets differ in shape".into()));
    }
    let masks = first
        .masks()
        .iter()
        .zip(second.masks())
        .map(|(a, b)| a.zip_map(b, |x, y| (x + y) / 2.0))
        .collect();
    MaskSet::new(MaskKind::Estimated, masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(speakers: usize, bins: usize, frames: usize, seed: u64) -> (MaskSet, LossTargets) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = |lo: f64, hi: f64| Grid::from_fn(bins, frames, |_, _| rng.random_range(lo..hi));
        let mag = grid(0.0, 2.0);
        let targets: Vec<_> = (0..speakers).map(|_| grid(-0.5, 1.5)).collect();
        let masks: Vec<_> = (0..speakers).map(|_| grid(0.0, 1.0)).collect();
        (
            MaskSet::new(MaskKind::Estimated, masks).unwrap(),
            LossTargets::from_parts(LossKind::PhaseSensitive, mag, targets).unwrap(),
        )
    }

    fn all_permutations(n: usize) -> Vec<Vec<usize>> {
        // Recursive enumeration, independent of `next_permutation`.
        fn go(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
            if prefix.len() == n {
                out.push(prefix.clone());
                return;
            }
            for c in 0..n {
                if !prefix.contains(&c) {
                    prefix.push(c);
                    go(prefix, n, out);
                    prefix.pop();
                }
            }
        }
        let mut out = Vec::new();
        go(&mut Vec::new(), n, &mut out);
        out
    }

    #[test]
    fn two_by_two_prefers_swap() {
        let m = PairwiseLossMatrix::from_entries(2, vec![1.0, 4.0, 9.0, 16.0]).unwrap();
        let best = best_permutation(&m).unwrap();
        assert_eq!(best.perm, vec![1, 0]);
        assert_eq!(best.loss, 13.0);
        assert_eq!(m.permutation_loss(&[0, 1]), 17.0);
    }

    #[test]
    fn zero_diagonal_gives_identity() {
        let mut entries = vec![3.0; 16];
        for i in 0..4 {
            entries[i * 4 + i] = 0.0;
        }
        let best = best_permutation(&PairwiseLossMatrix::from_entries(4, entries).unwrap()).unwrap();
        assert_eq!(best.perm, vec![0, 1, 2, 3]);
        assert_eq!(best.loss, 0.0);
    }

    #[test]
    fn ties_break_lexicographically() {
        let best = best_permutation(&PairwiseLossMatrix::from_entries(3, vec![1.0; 9]).unwrap()).unwrap();
        assert_eq!(best.perm, vec![0, 1, 2]);
        let m = PairwiseLossMatrix::from_entries(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(best_permutation(&m).unwrap().perm, vec![1, 0]);
    }

    #[test]
    fn exhaustive_limit_enforced() {
        let m = PairwiseLossMatrix::from_entries(9, vec![1.0; 81]).unwrap();
        assert!(matches!(
            best_permutation(&m),
            Err(Error::TooManySpeakers { speakers: 9, limit: 8 })
        ));
        assert_eq!(assignment_permutation(&m).loss, 9.0);
    }

    #[test]
    fn lexicographic_enumeration_is_complete() {
        let mut perm = identity_permutation(4);
        let mut seen = vec![perm.clone()];
        while next_permutation(&mut perm) {
            seen.push(perm.clone());
        }
        assert_eq!(seen, all_permutations(4));
    }

    #[test]
    fn hungarian_matches_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for s in 1..=6 {
            for _ in 0..30 {
                let m = PairwiseLossMatrix::from_entries(s, (0..s * s).map(|_| rng.random_range(0.0..10.0)).collect())
                    .unwrap();
                let exact = best_permutation(&m).unwrap();
                let hung = assignment_permutation(&m);
                assert!(is_permutation(&hung.perm));
                assert!((exact.loss - hung.loss).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pairwise_entries_match_scalar_loop() {
        let (est, targets) = random_case(2, 5, 7, 4);
        let m = pairwise_loss_matrix(&est, &targets, 2..6).unwrap();
        assert_eq!(m.evaluations(), 4);
        assert_eq!(m.normalizer(), (4 * 5 * 2) as f64);
        for s in 0..2 {
            for r in 0..2 {
                let mut acc = 0.0;
                for t in 2..6 {
                    for f in 0..5 {
                        let d = est.mask(s)[(t, f)] * targets.mixture_magnitude()[(t, f)] - targets.targets()[r][(t, f)];
                        acc += d * d;
                    }
                }
                let want = acc / 40.0;
                assert!((m.get(s, r) - want).abs() / want < 1e-10);
            }
        }
    }

    #[test]
    fn single_speaker_matrix_is_plain_loss() {
        let (est, targets) = random_case(1, 4, 3, 8);
        let amp = LossTargets::from_parts(
            LossKind::Amplitude,
            targets.mixture_magnitude().clone(),
            targets.targets().to_vec(),
        )
        .unwrap();
        let m = pairwise_loss_matrix(&est, &amp, 0..3).unwrap();
        let plain = assigned_loss(&est, &amp, &[Assignment::whole(3, vec![0])]).unwrap();
        assert_eq!(m.speakers(), 1);
        assert!((m.get(0, 0) - plain).abs() < 1e-15);
    }

    #[test]
    fn mask_mse_ignores_magnitude() {
        let (est, targets) = random_case(2, 3, 2, 1);
        let mse = LossTargets::from_parts(
            LossKind::MaskMse(MaskKind::Irm),
            targets.mixture_magnitude().clone(),
            est.masks().to_vec(),
        )
        .unwrap();
        let (loss, best) = upit_loss(&est, &mse).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(best.perm, vec![0, 1]);
    }

    #[test]
    fn upit_is_minimum_over_fixed_permutations() {
        for seed in 0..10 {
            let (est, targets) = random_case(3, 6, 5, seed);
            let (loss, best) = upit_loss(&est, &targets).unwrap();
            let fixed: Vec<f64> = all_permutations(3)
                .into_iter()
                .map(|p| assigned_loss(&est, &targets, &[Assignment::whole(5, p)]).unwrap())
                .collect();
            assert!(fixed.iter().all(|&f| loss <= f + 1e-15));
            let at_best = assigned_loss(&est, &targets, &[Assignment::whole(5, best.perm.clone())]).unwrap();
            assert!((at_best - loss).abs() <= 1e-12 * loss);
        }
    }

    #[test]
    fn relabeling_references_composes_permutation() {
        let (est, targets) = random_case(3, 4, 6, 12);
        let (loss, best) = upit_loss(&est, &targets).unwrap();
        let sigma = [2, 0, 1];
        let relabeled = targets.reordered(&sigma).unwrap();
        let (loss2, best2) = upit_loss(&est, &relabeled).unwrap();
        assert!((loss - loss2).abs() <= 1e-12 * loss);
        // relabeled target i is original sigma[i]
        for s in 0..3 {
            assert_eq!(sigma[best2.perm[s]], best.perm[s]);
        }
    }

    #[test]
    fn meta_frame_reduces_to_upit() {
        let (est, targets) = random_case(2, 5, 9, 6);
        let (loss, best) = upit_loss(&est, &targets).unwrap();
        let meta = pit_meta_frame_loss(&est, &targets, 9, 9).unwrap();
        assert_eq!(meta.segments.len(), 1);
        assert!((meta.total - loss).abs() <= 1e-12 * loss);
        assert_eq!(meta.segments[0].1.perm, best.perm);
    }

    #[test]
    fn single_frame_meta_frames_take_framewise_minimum() {
        let (est, targets) = random_case(2, 4, 5, 30);
        let meta = pit_meta_frame_loss(&est, &targets, 1, 1).unwrap();
        assert_eq!(meta.segments.len(), 5);
        let mut total = 0.0;
        for (t, (range, result)) in meta.segments.iter().enumerate() {
            assert_eq!(*range, t..t + 1);
            let per_perm: Vec<f64> = all_permutations(2)
                .into_iter()
                .map(|p| assigned_loss(&est, &targets, &[Assignment { frames: t..t + 1, perm: p }]).unwrap())
                .collect();
            let min = per_perm.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!((result.loss - min).abs() <= 1e-12 * min);
            total += min;
        }
        assert!((meta.total - total / 5.0).abs() < 1e-12);
        let (utt, _) = upit_loss(&est, &targets).unwrap();
        assert!(meta.total <= utt + 1e-15);
    }

    #[test]
    fn meta_frame_ranges_truncate_last() {
        assert_eq!(meta_frame_ranges(7, 3, 3).unwrap(), vec![0..3, 3..6, 6..7]);
        assert_eq!(meta_frame_ranges(7, 3, 2).unwrap(), vec![0..3, 2..5, 4..7]);
        assert!(meta_frame_ranges(7, 0, 1).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (est, targets) = random_case(2, 3, 4, 2);
        let assignments = vec![
            Assignment { frames: 0..2, perm: vec![1, 0] },
            Assignment { frames: 2..4, perm: vec![0, 1] },
        ];
        let grads = assigned_loss_gradient(&est, &targets, &assignments).unwrap();
        let h = 1e-6;
        for s in 0..2 {
            for i in 0..12 {
                let bump = |delta: f64| {
                    let mut masks = est.masks().to_vec();
                    masks[s].as_mut_slice()[i] += delta;
                    let m = MaskSet::new(MaskKind::Estimated, masks).unwrap();
                    assigned_loss(&m, &targets, &assignments).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - grads[s].as_slice()[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn speaker_mismatch_rejected() {
        let (est, _) = random_case(2, 3, 3, 1);
        let (_, targets) = random_case(3, 3, 3, 1);
        assert!(matches!(
            upit_loss(&est, &targets),
            Err(Error::SpeakerMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn two_stage_average_cases() {
        let (a, _) = random_case(2, 3, 4, 1);
        let (b, _) = random_case(2, 3, 4, 2);
        assert_eq!(two_stage_average(&a, &a).unwrap().masks(), a.masks());
        let zero = MaskSet::new(MaskKind::Estimated, vec![Grid::zeros(3, 4); 2]).unwrap();
        let doubled = MaskSet::new(
            MaskKind::Estimated,
            a.masks().iter().map(|m| m.map(|v| 2.0 * v)).collect(),
        )
        .unwrap();
        assert_eq!(two_stage_average(&zero, &doubled).unwrap().masks(), a.masks());
        let avg = two_stage_average(&a, &b).unwrap();
        for s in 0..2 {
            for (i, v) in avg.mask(s).as_slice().iter().enumerate() {
                assert_eq!(*v, (a.mask(s).as_slice()[i] + b.mask(s).as_slice()[i]) / 2.0);
            }
        }
        let (c, _) = random_case(3, 3, 4, 2);
        assert!(two_stage_average(&a, &c).is_err());
    }
}
