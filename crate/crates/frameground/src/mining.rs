//! Self-contrastive hard-negative mining over frame score curves.
//!
//! Mining never sees padded frames: all functions here take score or
//! similarity vectors already trimmed to the valid frames of one sample.
//! Two thresholds drive everything, per sample and epoch:
//!
//! * the upper bound `b_u`, the mean frame score of the sample, separating
//!   positive frames (strictly above) from the rest;
//! * the lower bound `b_l`, shared by the whole epoch, which rises by a
//!   fixed factor every cycle so the negative band `[b_l, b_u]` tightens
//!   around ever harder negatives as training proceeds.
//!
//! Frame-scale masks pick individual positive/negative frames; segment-scale
//! masks group contiguous above-threshold runs and contrast the best run
//! against the others.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epoch-indexed schedule for the mining bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundScheduler {
    /// Initial lower bound, in force through warm-up.
    pub b_l0: f64,
    /// Multiplicative step applied once per cycle after warm-up.
    pub delta: f64,
    /// Cycle length in epochs.
    pub e0: usize,
    /// Epochs before mining starts; the lower bound stays at `b_l0` until
    /// then.
    pub warmup_epochs: usize,
}

impl Default for BoundScheduler {
    fn default() -> Self {
        BoundScheduler {
            b_l0: (-8.0f64).exp(),
            delta: 10.0,
            e0: 50,
            warmup_epochs: 50,
        }
    }
}

impl BoundScheduler {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_l0 > 0.0) || !self.b_l0.is_finite() {
            return Err(Error::Config(format!("b_l0 must be positive, got {}", self.b_l0)));
        }
        if !(self.delta > 1.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("delta must exceed 1, got {}", self.delta)));
        }
        if self.e0 == 0 {
            return Err(Error::Config("e0 must be at least 1".into()));
        }
        Ok(())
    }

    /// Lower bound for `epoch` before the per-sample clamp: `b_l0` during
    /// warm-up, then multiplied by `delta` once per started `e0`-epoch cycle.
    pub fn lower_bound(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.b_l0
        } else {
            let cycles = (epoch - self.warmup_epochs) / self.e0 + 1;
            self.b_l0 * self.delta.powi(cycles as i32)
        }
    }

    /// Per-sample bounds at `epoch` given the sample's valid frame scores.
    ///
    /// `b_u` is the mean score; `b_l` is the scheduled lower bound clamped to
    /// `b_u` so the negative band never inverts.
    pub fn bounds_at(&self, epoch: usize, scores: &[f64]) -> (f64, f64) {
        assert!(!scores.is_empty(), "bounds_at on empty score vector");
        let b_u = scores.iter().sum::<f64>() / scores.len() as f64;
        let b_l = self.lower_bound(epoch).min(b_u);
        (b_l, b_u)
    }
}

/// Frame-scale positive/negative selection for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub positive: Vec<bool>,
    pub negative: Vec<bool>,
}

impl MaskSet {
    pub fn positive_count(&self) -> usize {
        self.positive.iter().filter(|&&b| b).count()
    }

    pub fn negative_count(&self) -> usize {
        self.negative.iter().filter(|&&b| b).count()
    }
}

/// Select positive frames (score strictly above `b_u`) and negative frames
/// (score within the closed band `[b_l, b_u]`).
///
/// Flat curves have no frame above their own mean; in that case the first
/// maximal-score frame is forced positive (and withheld from the negatives)
/// so every sample contributes at least one positive.
pub fn frame_masks(scores: &[f64], b_l: f64, b_u: f64) -> MaskSet {
    assert!(b_l <= b_u, "lower bound {b_l} above upper bound {b_u}");
    let positive: Vec<bool> = scores.iter().map(|&s| s > b_u).collect();
    let mut negative: Vec<bool> = scores.iter().map(|&s| s >= b_l && s <= b_u).collect();
    let mut positive = positive;
    if !positive.iter().any(|&b| b) && !scores.is_empty() {
        let best = first_argmax(scores);
        positive[best] = true;
        negative[best] = false;
    }
    MaskSet { positive, negative }
}

fn first_argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// A maximal run of frames scoring strictly above the upper bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start_frame: usize,
    /// Inclusive.
    pub end_frame: usize,
    /// Mean score of the member frames.
    pub score: f64,
}

/// Segment-scale positive/negative selection for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    /// Disjoint, sorted by start frame.
    pub segments: Vec<Segment>,
    /// True exactly on frames of the best-scoring segment.
    pub positive_mask: Vec<bool>,
    /// True exactly on frames of every other segment.
    pub negative_mask: Vec<bool>,
}

impl SegmentSet {
    pub fn empty(n: usize) -> Self {
        SegmentSet {
            segments: Vec::new(),
            positive_mask: vec![false; n],
            negative_mask: vec![false; n],
        }
    }
}

/// Split the score curve into maximal runs above `b_u` and mark the
/// best-mean-score run positive (earliest wins ties), the rest negative.
///
/// No run above the bound yields an empty set; exactly one run yields an
/// all-false negative mask. Callers treat both via skip semantics.
pub fn extract_segments(scores: &[f64], b_u: f64) -> SegmentSet {
    let n = scores.len();
    let mut segments = Vec::new();
    let mut run_start: Option<usize> = None;
    for i in 0..=n {
        let above = i < n && scores[i] > b_u;
        match (run_start, above) {
            (None, true) => run_start = Some(i),
            (Some(start), false) => {
                let end = i - 1;
                let score = scores[start..=end].iter().sum::<f64>() / (end - start + 1) as f64;
                segments.push(Segment { start_frame: start, end_frame: end, score });
                run_start = None;
            }
            _ => {}
        }
    }

    let mut set = SegmentSet::empty(n);
    if segments.is_empty() {
        return set;
    }
    let mut best = 0;
    for (t, seg) in segments.iter().enumerate() {
        if seg.score > segments[best].score {
            best = t;
        }
    }
    for (t, seg) in segments.iter().enumerate() {
        let mask = if t == best { &mut set.positive_mask } else { &mut set.negative_mask };
        for i in seg.start_frame..=seg.end_frame {
            mask[i] = true;
        }
    }
    set.segments = segments;
    set
}

/// Ratio loss shared by both scales: minus log of (sum of similarities at
/// positive positions) over (sum at negative positions), pooled across the
/// contributing samples of a batch.
///
/// A sample contributes only if it has at least one negative position; with
/// no contributing samples the loss is 0 and `skipped` is true. The result
/// can be negative: it is a log ratio, not a probability, and drops below
/// zero as positives outweigh negatives.
fn masked_ratio_loss(items: &[(&[f64], &[bool], &[bool])]) -> (f64, bool) {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut contributed = false;
    for (u, positive, negative) in items {
        assert_eq!(u.len(), positive.len(), "positive mask length");
        assert_eq!(u.len(), negative.len(), "negative mask length");
        if !negative.iter().any(|&b| b) {
            continue;
        }
        contributed = true;
        for i in 0..u.len() {
            debug_assert!(u[i] > 0.0 && u[i] < 1.0, "similarity out of (0,1)");
            if positive[i] {
                num += u[i];
            }
            if negative[i] {
                den += u[i];
            }
        }
    }
    if !contributed {
        return (0.0, true);
    }
    (-(num / den).ln(), false)
}

/// Frame-scale contrastive loss over a batch.
///
/// `items` pairs each sample's valid frame similarities `u` with its mined
/// [`MaskSet`]. Returns `(loss, skipped)`.
pub fn frame_contrast_loss(items: &[(&[f64], &MaskSet)]) -> (f64, bool) {
    let flat: Vec<(&[f64], &[bool], &[bool])> = items
        .iter()
        .map(|(u, m)| (*u, m.positive.as_slice(), m.negative.as_slice()))
        .collect();
    masked_ratio_loss(&flat)
}

/// Segment-scale contrastive loss over a batch; same contract as
/// [`frame_contrast_loss`] with segment masks.
pub fn segment_contrast_loss(items: &[(&[f64], &SegmentSet)]) -> (f64, bool) {
    let flat: Vec<(&[f64], &[bool], &[bool])> = items
        .iter()
        .map(|(u, s)| (*u, s.positive_mask.as_slice(), s.negative_mask.as_slice()))
        .collect();
    masked_ratio_loss(&flat)
}
