//! Foreground / boundary prediction heads and inference-time decoding.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{MatrError, Result};
use crate::metrics::temporal_iou;
use crate::model::layers::{Conv, ParamBuilder};

/// Suppression threshold used at inference.
pub const NMS_IOU_THRESHOLD: f64 = 0.7;

/// A scored temporal interval in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

impl Segment {
    pub fn new(start_sec: f64, end_sec: f64, score: f64) -> Self {
        Segment {
            start_sec,
            end_sec,
            score,
        }
    }

    pub fn length(&self) -> f64 {
        self.end_sec - self.start_sec
    }
}

/// Ranking used by NMS and top-1 selection: higher score, then earlier
/// start, then shorter.
pub fn rank_order(a: &Segment, b: &Segment) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_sec.total_cmp(&b.start_sec))
        .then(a.length().total_cmp(&b.length()))
}

/// Per-position outputs over the first `M` positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fg_probs: Vec<f64>,
    /// `(left, right)` offsets in frames.
    pub offsets: Vec<(f64, f64)>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.fg_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fg_probs.is_empty()
    }
}

/// Tape handles for the head outputs.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[M, 1]` probabilities.
    pub fg: Var,
    /// `[M, 2]` non-negative offsets.
    pub offsets: Var,
}

impl HeadOutput {
    pub fn prediction(&self, tape: &Tape) -> Prediction {
        let fg_probs = tape.value(self.fg).data().to_vec();
        let offsets = tape
            .value(self.offsets)
            .data()
            .chunks(2)
            .map(|c| (c[0], c[1]))
            .collect();
        Prediction { fg_probs, offsets }
    }
}

/// Two stacks of three width-3 convolutions: `d -> d -> d -> 1` with a
/// sigmoid, and `d -> d -> d -> 2` with a ReLU.
#[derive(Clone, Copy, Debug)]
pub struct PredictionHeads {
    pub cls: [Conv; 3],
    pub reg: [Conv; 3],
}

impl PredictionHeads {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, d: usize) -> Result<Self> {
        Ok(PredictionHeads {
            cls: [
                pb.conv("head.cls.0", d, d)?,
                pb.conv("head.cls.1", d, d)?,
                pb.conv("head.cls.2", d, 1)?,
            ],
            reg: [
                pb.conv("head.reg.0", d, d)?,
                pb.conv("head.reg.1", d, d)?,
                pb.conv("head.reg.2", d, 2)?,
            ],
        })
    }

    /// Runs both heads over `fused` (`[M + l, d]`) and keeps the first `m` rows.
    pub fn forward(&self, tape: &mut Tape, fused: Var, m: usize) -> Result<HeadOutput> {
        let mut c = fused;
        for (idx, conv) in self.cls.iter().enumerate() {
            c = conv.forward(tape, c)?;
            if idx < 2 {
                c = tape.relu(c);
            }
        }
        let c = tape.slice_rows(c, 0, m)?;
        let fg = tape.sigmoid(c);

        let mut r = fused;
        for conv in &self.reg {
            r = conv.forward(tape, r)?;
            r = tape.relu(r);
        }
        let offsets = tape.slice_rows(r, 0, m)?;
        Ok(HeadOutput { fg, offsets })
    }
}

/// One candidate per position: `[i - dL, i + dR]` frames, clipped to the
/// video and scaled to seconds.
pub fn decode_segments(pred: &Prediction, frame_period_sec: f64) -> Result<Vec<Segment>> {
    if !(frame_period_sec > 0.0) {
        return Err(MatrError::InvalidArgument(format!(
            "frame period must be positive, got {frame_period_sec}"
        )));
    }
    let last = pred.len().saturating_sub(1) as f64;
    Ok(pred
        .fg_probs
        .iter()
        .zip(&pred.offsets)
        .enumerate()
        .map(|(i, (&score, &(dl, dr)))| {
            let i = i as f64;
            let start = (i - dl).clamp(0.0, last);
            let end = (i + dr).clamp(start, last);
            Segment::new(start * frame_period_sec, end * frame_period_sec, score)
        })
        .collect())
}

/// Greedy 1-D non-maximum suppression. A candidate is dropped when its IoU
/// with an already kept segment is strictly greater than `iou_threshold`.
pub fn nms_1d(segments: &[Segment], iou_threshold: f64) -> Vec<Segment> {
    let mut order: Vec<Segment> = segments.to_vec();
    order.sort_by(rank_order);
    let mut kept: Vec<Segment> = Vec::new();
    for cand in order {
        if kept.iter().all(|k| temporal_iou(k, &cand) <= iou_threshold) {
            kept.push(cand);
        }
    }
    kept
}

/// Highest-ranked segment.
pub fn select_top1(kept: &[Segment]) -> Result<Segment> {
    kept.iter()
        .min_by(|a, b| rank_order(a, b))
        .copied()
        .ok_or(MatrError::NoPrediction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_arithmetic() {
        let mut pred = Prediction {
            fg_probs: vec![0.1; 10],
            offsets: vec![(0.0, 0.0); 10],
        };
        pred.offsets[5] = (2.0, 3.0);
        let segs = decode_segments(&pred, 2.0).unwrap();
        assert_eq!((segs[5].start_sec, segs[5].end_sec), (6.0, 16.0));
        assert_eq!((segs[3].start_sec, segs[3].end_sec), (6.0, 6.0));
    }

    #[test]
    fn decode_clips_to_video() {
        let pred = Prediction {
            fg_probs: vec![0.5; 4],
            offsets: vec![(10.0, 10.0); 4],
        };
        for s in decode_segments(&pred, 2.0).unwrap() {
            assert_eq!((s.start_sec, s.end_sec), (0.0, 6.0));
        }
        assert!(decode_segments(&pred, 0.0).is_err());
    }

    #[test]
    fn nms_example() {
        let segs = [
            Segment::new(0.0, 10.0, 0.9),
            Segment::new(1.0, 9.0, 0.8),
            Segment::new(20.0, 30.0, 0.7),
        ];
        let kept = nms_1d(&segs, NMS_IOU_THRESHOLD);
        assert_eq!(kept, vec![segs[0], segs[2]]);
    }

    #[test]
    fn nms_threshold_is_strict() {
        // IoU exactly 0.7
        let segs = [Segment::new(0.0, 10.0, 0.9), Segment::new(0.0, 7.0, 0.8)];
        assert_eq!(nms_1d(&segs, 0.7).len(), 2);
    }

    #[test]
    fn nms_trivial_cases() {
        let one = [Segment::new(1.0, 2.0, 0.3)];
        assert_eq!(nms_1d(&one, 0.7), one.to_vec());
        let two = [Segment::new(0.0, 1.0, 0.1), Segment::new(5.0, 6.0, 0.9)];
        assert_eq!(nms_1d(&two, 0.7).len(), 2);
    }

    #[test]
    fn top1_rules() {
        let a = Segment::new(0.0, 1.0, 0.9);
        let b = Segment::new(2.0, 3.0, 0.7);
        assert_eq!(select_top1(&[b, a]).unwrap(), a);
        let c = Segment::new(4.0, 5.0, 0.5);
        let d = Segment::new(2.0, 5.0, 0.5);
        assert_eq!(select_top1(&[c, d]).unwrap(), d);
        assert_eq!(select_top1(&[c]).unwrap(), c);
        assert!(matches!(select_top1(&[]), Err(MatrError::NoPrediction)));
    }
}
