use crate::error::{MatrError, Result};
use crate::objectives::MomentLabels;

/// Frame `i` is foreground iff `start <= i * period < end`.
pub fn timestamps_to_labels(moment: (f64, f64), m: usize, frame_period_sec: f64) -> Result<MomentLabels> {
    let (start, end) = moment;
    if !(frame_period_sec > 0.0) || !(start >= 0.0) || !(start < end) || end > m as f64 * frame_period_sec {
        return Err(MatrError::InvalidArgument(format!(
            "moment ({start}, {end}) outside [0, {}] at period {frame_period_sec}",
            m as f64 * frame_period_sec
        )));
    }
    let inside = |i: usize| {
        let t = i as f64 * frame_period_sec;
        start <= t && t < end
    };
    let s = (0..m).find(|&i| inside(i));
    let e = (0..m).rev().find(|&i| inside(i));
    match (s, e) {
        (Some(s), Some(e)) => MomentLabels::from_span(m, s, e),
        _ => Err(MatrError::InvalidArgument(format!(
            "moment ({start}, {end}) contains no sampled frame"
        ))),
    }
}

/// Inverse of [`timestamps_to_labels`] for frame-aligned moments: frames
/// `s..=e` cover `[s * period, (e + 1) * period)`.
pub fn labels_to_timestamps(span: (usize, usize), frame_period_sec: f64) -> (f64, f64) {
    (span.0 as f64 * frame_period_sec, (span.1 + 1) as f64 * frame_period_sec)
}

/// Ground truth on the decoding grid: `[s * period, e * period]`, the same
/// convention predicted segments use.
pub fn span_to_grid_segment(span: (usize, usize), frame_period_sec: f64) -> (f64, f64) {
    (span.0 as f64 * frame_period_sec, span.1 as f64 * frame_period_sec)
}
