//! Inference-time localization: turn a frame score curve into a ranked list
//! of time intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::extract_segments;

/// A temporal interval in seconds with a ranking score attached.
///
/// `start < end` and both are finite; intervals are never empty so temporal
/// IoU is always well defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start: f64,
    pub end: f64,
    pub rank_score: f64,
}

impl TimeInterval {
    pub fn new(start: f64, end: f64, rank_score: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::Data(format!("non-finite interval [{start}, {end}]")));
        }
        if start < 0.0 {
            return Err(Error::Data(format!("interval start {start} is negative")));
        }
        if start >= end {
            return Err(Error::Data(format!("empty interval [{start}, {end}]")));
        }
        if !rank_score.is_finite() {
            return Err(Error::Data(format!("non-finite rank score {rank_score}")));
        }
        Ok(TimeInterval { start, end, rank_score })
    }

    /// Length in seconds.
    pub fn span(&self) -> f64 {
        self.end - self.start
    }
}

/// Rank candidate segments for one video from its frame scores.
///
/// The per-video positive threshold is the mean valid frame score. Maximal
/// runs of frames above it become candidates scored by their mean frame
/// score; a run over frames `[a, b]` maps to seconds `[a * dt, (b + 1) * dt]`
/// so a single frame still has nonzero length. Candidates are sorted by score
/// descending, earlier start first on ties. If no frame clears the threshold
/// (flat curves), the first maximal-score frame is emitted as a single
/// one-frame interval so every video gets at least one prediction.
pub fn localize(scores: &[f64], frame_duration: f64) -> Result<Vec<TimeInterval>> {
    if scores.is_empty() {
        return Err(Error::Data("localize on empty score vector".into()));
    }
    if !(frame_duration > 0.0) || !frame_duration.is_finite() {
        return Err(Error::Data(format!("invalid frame duration {frame_duration}")));
    }
    let b_u = scores.iter().sum::<f64>() / scores.len() as f64;
    let segset = extract_segments(scores, b_u);

    if segset.segments.is_empty() {
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let iv = TimeInterval::new(
            best as f64 * frame_duration,
            (best + 1) as f64 * frame_duration,
            scores[best],
        )?;
        return Ok(vec![iv]);
    }

    let mut ranked: Vec<TimeInterval> = segset
        .segments
        .iter()
        .map(|seg| {
            TimeInterval::new(
                seg.start_frame as f64 * frame_duration,
                (seg.end_frame + 1) as f64 * frame_duration,
                seg.score,
            )
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        b.rank_score
            .partial_cmp(&a.rank_score)
            .unwrap()
            .then(a.start.partial_cmp(&b.start).unwrap())
    });
    Ok(ranked)
}
