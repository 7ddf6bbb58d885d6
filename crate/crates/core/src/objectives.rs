//! Training objectives: foreground BCE, boundary smooth-L1 + GIoU over
//! foreground positions, and the weighted per-batch totals.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{MatrError, Result};
use crate::model::ModelOutput;

/// Clamp applied to probabilities inside the BCE.
pub const PROB_EPS: f64 = 1e-7;
/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_fg: f64,
    pub lambda_seg: f64,
    pub lambda_align_pre: f64,
    pub lambda_align_post: f64,
    #[serde(rename = "lambda_L1")]
    pub lambda_l1: f64,
    #[serde(rename = "lambda_IoU")]
    pub lambda_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fg: 1.0,
            lambda_seg: 1.0,
            lambda_align_pre: 1.0,
            lambda_align_post: 1.0,
            lambda_l1: 1.0,
            lambda_iou: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_fg,
            self.lambda_seg,
            self.lambda_align_pre,
            self.lambda_align_post,
            self.lambda_l1,
            self.lambda_iou,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(MatrError::InvalidArgument(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Per-frame supervision: foreground flags and, at foreground frames, the
/// distances (in frames) to the moment's first and last frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentLabels {
    pub fg: Vec<bool>,
    pub offsets: Vec<(f64, f64)>,
}

impl MomentLabels {
    /// Labels for a moment covering frames `s..=e` of an `m`-frame video.
    pub fn from_span(m: usize, s: usize, e: usize) -> Result<Self> {
        if s > e || e >= m {
            return Err(MatrError::InvalidArgument(format!(
                "span ({s}, {e}) invalid for {m} frames"
            )));
        }
        let mut fg = vec![false; m];
        let mut offsets = vec![(0.0, 0.0); m];
        for i in s..=e {
            fg[i] = true;
            offsets[i] = ((i - s) as f64, (e - i) as f64);
        }
        Ok(MomentLabels { fg, offsets })
    }

    pub fn len(&self) -> usize {
        self.fg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fg.is_empty()
    }

    /// First and last foreground frame.
    pub fn span(&self) -> Option<(usize, usize)> {
        let s = self.fg.iter().position(|f| *f)?;
        let e = self.fg.iter().rposition(|f| *f)?;
        Some((s, e))
    }

    /// Checks contiguity and that every foreground offset points at the span ends.
    pub fn validate(&self) -> Result<()> {
        if self.fg.len() != self.offsets.len() {
            return Err(MatrError::InvalidArgument("label lengths differ".into()));
        }
        let (s, e) = self
            .span()
            .ok_or_else(|| MatrError::InvalidArgument("labels have no foreground".into()))?;
        if self.fg[s..=e].iter().any(|f| !f) {
            return Err(MatrError::InvalidArgument("foreground is not contiguous".into()));
        }
        for i in s..=e {
            let (dl, dr) = self.offsets[i];
            if i as f64 - dl != s as f64 || i as f64 + dr != e as f64 {
                return Err(MatrError::InvalidArgument(format!(
                    "offsets at {i} ({dl}, {dr}) disagree with span ({s}, {e})"
                )));
            }
        }
        Ok(())
    }
}

/// Smooth-L1 value and derivative w.r.t. the residual.
pub fn smooth_l1(residual: f64) -> (f64, f64) {
    let a = residual.abs();
    if a < SMOOTH_L1_BETA {
        (0.5 * residual * residual / SMOOTH_L1_BETA, residual / SMOOTH_L1_BETA)
    } else {
        (a - 0.5 * SMOOTH_L1_BETA, residual.signum())
    }
}

/// 1-D generalized IoU of `[a1, b1]` against `[a2, b2]`.
pub fn giou_1d(a1: f64, b1: f64, a2: f64, b2: f64) -> f64 {
    giou_1d_grad(a1, b1, a2, b2).0
}

/// GIoU and its partial derivatives w.r.t. `a1` and `b1`.
pub fn giou_1d_grad(a1: f64, b1: f64, a2: f64, b2: f64) -> (f64, f64, f64) {
    let inter = (b1.min(b2) - a1.max(a2)).max(0.0);
    let union = (b1 - a1) + (b2 - a2) - inter;
    let hull = b1.max(b2) - a1.min(a2);
    if hull <= 0.0 {
        // both segments are the same point
        return (1.0, 0.0, 0.0);
    }
    // partials of inter, union, hull w.r.t. a1 and b1
    let overlapping = b1.min(b2) > a1.max(a2);
    let di_a = if overlapping && a1 > a2 { -1.0 } else { 0.0 };
    let di_b = if overlapping && b1 < b2 { 1.0 } else { 0.0 };
    let du_a = -1.0 - di_a;
    let du_b = 1.0 - di_b;
    let dh_a = if a1 < a2 { -1.0 } else { 0.0 };
    let dh_b = if b1 > b2 { 1.0 } else { 0.0 };

    let (iou, diou_a, diou_b) = if union > 0.0 {
        (
            inter / union,
            (di_a * union - inter * du_a) / (union * union),
            (di_b * union - inter * du_b) / (union * union),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    // GIoU = IoU - 1 + union / hull
    let g = iou - 1.0 + union / hull;
    let dg_a = diou_a + (du_a * hull - union * dh_a) / (hull * hull);
    let dg_b = diou_b + (du_b * hull - union * dh_b) / (hull * hull);
    (g, dg_a, dg_b)
}

/// Mean binary cross-entropy over all `M` positions.
pub fn fg_loss(tape: &mut Tape, probs: Var, labels: &MomentLabels) -> Result<Var> {
    let p = tape.value(probs).data();
    if p.len() != labels.len() {
        return Err(MatrError::shape(
            "fg_loss",
            format!("{} probabilities vs {} labels", p.len(), labels.len()),
        ));
    }
    let m = p.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &fi) in p.iter().zip(&labels.fg) {
        let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let clamped = pc != pi;
        if fi {
            value -= pc.ln();
            grad.push(if clamped { 0.0 } else { -1.0 / (pc * m) });
        } else {
            value -= (1.0 - pc).ln();
            grad.push(if clamped { 0.0 } else { 1.0 / ((1.0 - pc) * m) });
        }
    }
    Ok(tape.scalar_fn(vec![probs], value / m, vec![grad]))
}

/// Mean over foreground positions of `λ_L1 * smoothL1 + λ_IoU * (1 - GIoU)`;
/// zero without foreground. Background offsets never influence the value.
pub fn seg_loss(tape: &mut Tape, offsets: Var, labels: &MomentLabels, weights: &LossWeights) -> Result<Var> {
    let d = tape.value(offsets).data();
    if d.len() != 2 * labels.len() {
        return Err(MatrError::shape(
            "seg_loss",
            format!("offsets {:?} vs {} labels", tape.shape(offsets), labels.len()),
        ));
    }
    let n_fg = labels.fg.iter().filter(|f| **f).count();
    let mut grad = vec![0.0; d.len()];
    if n_fg == 0 {
        return Ok(tape.scalar_fn(vec![offsets], 0.0, vec![grad]));
    }
    let norm = 1.0 / n_fg as f64;
    let mut value = 0.0;
    for (i, (&fi, &(gl, gr))) in labels.fg.iter().zip(&labels.offsets).enumerate() {
        if !fi {
            continue;
        }
        let (pl, pr) = (d[2 * i], d[2 * i + 1]);
        let (l1a, g1a) = smooth_l1(pl - gl);
        let (l1b, g1b) = smooth_l1(pr - gr);
        let x = i as f64;
        let (g, dg_a, dg_b) = giou_1d_grad(x - pl, x + pr, x - gl, x + gr);
        value += weights.lambda_l1 * (l1a + l1b) + weights.lambda_iou * (1.0 - g);
        // a1 = x - pl, b1 = x + pr
        grad[2 * i] = norm * (weights.lambda_l1 * g1a + weights.lambda_iou * dg_a);
        grad[2 * i + 1] = norm * (weights.lambda_l1 * g1b - weights.lambda_iou * dg_b);
    }
    Ok(tape.scalar_fn(vec![offsets], value * norm, vec![grad]))
}

/// Batch-mean loss components (plain values, for logging).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub fg: f64,
    pub seg: f64,
    pub align_pre: f64,
    pub align_post: f64,
}

/// `(1/S) * sum_s (λ_fg L_fg + λ_seg L_seg + λ_pre L_pre + λ_post L_post)`.
pub fn overall_loss(
    tape: &mut Tape,
    outputs: &[ModelOutput],
    labels: &[MomentLabels],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if outputs.is_empty() || outputs.len() != labels.len() {
        return Err(MatrError::InvalidArgument(format!(
            "{} outputs vs {} label sets",
            outputs.len(),
            labels.len()
        )));
    }
    let s = outputs.len() as f64;
    let mut terms = Vec::with_capacity(4 * outputs.len());
    let mut br = LossBreakdown::default();
    for (out, lab) in outputs.iter().zip(labels) {
        let fg = fg_loss(tape, out.heads.fg, lab)?;
        let seg = seg_loss(tape, out.heads.offsets, lab, weights)?;
        br.fg += tape.value(fg).item() / s;
        br.seg += tape.value(seg).item() / s;
        br.align_pre += tape.value(out.pre_align_loss).item() / s;
        br.align_post += tape.value(out.post_align_loss).item() / s;
        terms.push((weights.lambda_fg / s, fg));
        terms.push((weights.lambda_seg / s, seg));
        terms.push((weights.lambda_align_pre / s, out.pre_align_loss));
        terms.push((weights.lambda_align_post / s, out.post_align_loss));
    }
    let total = tape.weighted_sum(&terms)?;
    br.total = tape.value(total).item();
    Ok((total, br))
}

/// Self-supervised objective; same structure as [`overall_loss`] with its
/// own weight set.
pub fn pretrain_loss(
    tape: &mut Tape,
    outputs: &[ModelOutput],
    labels: &[MomentLabels],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    overall_loss(tape, outputs, labels, weights)
}
