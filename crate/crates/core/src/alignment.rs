//! Soft-DTW alignment between a target and a query feature sequence.
//!
//! Two boundary conditions are supported:
//!
//! * [`AlignMode::Global`]: classic DTW. Paths run from `(0, 0)` to
//!   `(M-1, N-1)` and therefore touch every target row.
//! * [`AlignMode::Subsequence`]: the query must be matched end to end, but the
//!   path may enter and leave the target at any row. Rows outside the matched
//!   interval cost nothing, so the path marks a contiguous target span.
//!
//! The soft value replaces `min` by `softmin_g(a) = -g * log(sum(exp(-a_k / g)))`,
//! i.e. a log-sum-exp over every admissible path. Its gradient w.r.t. the
//! cost matrix (the expected alignment) is computed by a reverse sweep over
//! the same DP table.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, ParamStore, Tape, Var};
use crate::error::{MatrError, Result};

/// Boundary condition of the DP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Global,
    #[default]
    Subsequence,
}

/// `M x N` pairwise cost between target rows and query columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Array,
}

impl CostMatrix {
    pub fn new(values: Array) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(MatrError::shape(
                "CostMatrix",
                format!("expected 2-D costs, got {:?}", values.shape()),
            ));
        }
        if !values.is_finite() {
            return Err(MatrError::InvalidArgument("cost matrix has non-finite entries".into()));
        }
        Ok(CostMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Array::from_rows(rows)?)
    }

    /// Target length.
    pub fn m(&self) -> usize {
        self.values.shape()[0]
    }

    /// Query length.
    pub fn n(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get2(i, j)
    }

    pub fn values(&self) -> &Array {
        &self.values
    }
}

/// Cosine cost between two plain feature matrices (`[M, d]` and `[N, d]`).
pub fn cosine_cost(target: &Array, query: &Array) -> Result<CostMatrix> {
    let ps = ParamStore::new();
    let mut tape = Tape::eval(&ps);
    let t = tape.constant(target.clone());
    let q = tape.constant(query.clone());
    let c = tape.cosine_cost(t, q)?;
    CostMatrix::new(tape.value(c).clone())
}

/// Soft-DTW value, DP table and expected alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftDtw {
    pub soft_cost: f64,
    /// `(M+1) x (N+1)`, row/column 0 hold the boundary values.
    pub dp_table: Array,
    /// `dsoft_cost / dC`, `M x N`, entries in `[0, 1]`.
    pub expected_alignment: Array,
    pub gamma: f64,
    pub mode: AlignMode,
}

#[inline]
fn softmin(vals: &[f64], gamma: f64) -> f64 {
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return f64::INFINITY;
    }
    let s: f64 = vals
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| (-(v - min) / gamma).exp())
        .sum();
    min - gamma * s.ln()
}

/// Predecessors of cell `(i, j)` (1-based DP coordinates), excluding the
/// virtual start handled via [`starts_at`].
#[inline]
fn preds(i: usize, j: usize) -> [(usize, usize); 3] {
    [(i - 1, j - 1), (i - 1, j), (i, j - 1)]
}

#[inline]
fn starts_at(mode: AlignMode, i: usize, j: usize) -> bool {
    match mode {
        AlignMode::Global => i == 1 && j == 1,
        AlignMode::Subsequence => j == 1,
    }
}

fn boundary_table(m: usize, n: usize, mode: AlignMode) -> Vec<f64> {
    let w = n + 1;
    let mut r = vec![f64::INFINITY; (m + 1) * w];
    r[0] = 0.0;
    if mode == AlignMode::Subsequence {
        for i in 0..=m {
            r[i * w] = 0.0;
        }
    }
    r
}

/// Smoothed DTW over `cost` with smoothing `gamma > 0`.
pub fn soft_dtw(cost: &CostMatrix, gamma: f64, mode: AlignMode) -> Result<SoftDtw> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(MatrError::InvalidArgument(format!(
            "soft-DTW smoothing must be positive, got {gamma}"
        )));
    }
    let (m, n) = (cost.m(), cost.n());
    let w = n + 1;
    let mut r = boundary_table(m, n, mode);
    let mut buf = [0.0f64; 4];
    for i in 1..=m {
        for j in 1..=n {
            let mut k = 0;
            for (pi, pj) in preds(i, j) {
                // Column 0 is only a start marker, never a real predecessor.
                if pi >= 1 && pj >= 1 {
                    buf[k] = r[pi * w + pj];
                    k += 1;
                }
            }
            if starts_at(mode, i, j) {
                buf[k] = 0.0;
                k += 1;
            }
            r[i * w + j] = cost.get(i - 1, j - 1) + softmin(&buf[..k], gamma);
        }
    }
    let soft_cost = match mode {
        AlignMode::Global => r[m * w + n],
        AlignMode::Subsequence => {
            let ends: Vec<f64> = (1..=m).map(|i| r[i * w + n]).collect();
            softmin(&ends, gamma)
        }
    };

    // Reverse sweep: e[i][j] = d soft_cost / d R[i][j].
    let mut e = vec![0.0; (m + 1) * w];
    match mode {
        AlignMode::Global => e[m * w + n] = 1.0,
        AlignMode::Subsequence => {
            for i in 1..=m {
                e[i * w + n] = (-(r[i * w + n] - soft_cost) / gamma).exp();
            }
        }
    }
    for i in (1..=m).rev() {
        for j in (1..=n).rev() {
            let eij = e[i * w + j];
            if eij == 0.0 {
                continue;
            }
            // R[i][j] - C[i][j] is the softmin over predecessors
            let smin = r[i * w + j] - cost.get(i - 1, j - 1);
            for (pi, pj) in preds(i, j) {
                if pi >= 1 && pj >= 1 {
                    let rp = r[pi * w + pj];
                    if rp.is_finite() {
                        e[pi * w + pj] += eij * (-(rp - smin) / gamma).exp();
                    }
                }
            }
        }
    }
    let mut expected = Vec::with_capacity(m * n);
    for i in 1..=m {
        for j in 1..=n {
            expected.push(e[i * w + j].clamp(0.0, 1.0));
        }
    }
    Ok(SoftDtw {
        soft_cost,
        dp_table: Array::from_parts(vec![m + 1, w], r),
        expected_alignment: Array::from_parts(vec![m, n], expected),
        gamma,
        mode,
    })
}

/// Classical DTW: minimal path cost and its `{0,1}` path matrix.
///
/// Backtracking prefers the diagonal predecessor, then the vertical one
/// (previous target row), then the horizontal one.
pub fn hard_dtw(cost: &CostMatrix, mode: AlignMode) -> (f64, Array) {
    let (m, n) = (cost.m(), cost.n());
    let w = n + 1;
    let mut r = boundary_table(m, n, mode);
    for i in 1..=m {
        for j in 1..=n {
            let mut best = f64::INFINITY;
            for (pi, pj) in preds(i, j) {
                if pi >= 1 && pj >= 1 {
                    best = best.min(r[pi * w + pj]);
                }
            }
            if starts_at(mode, i, j) {
                best = best.min(0.0);
            }
            r[i * w + j] = cost.get(i - 1, j - 1) + best;
        }
    }
    let (mut i, total) = match mode {
        AlignMode::Global => (m, r[m * w + n]),
        AlignMode::Subsequence => {
            // earliest end row among ties
            let mut bi = 1;
            for i in 2..=m {
                if r[i * w + n] < r[bi * w + n] {
                    bi = i;
                }
            }
            (bi, r[bi * w + n])
        }
    };
    let mut j = n;
    let mut path = vec![0.0; m * n];
    loop {
        path[(i - 1) * n + (j - 1)] = 1.0;
        // candidates in tie-break order: diagonal, vertical, horizontal;
        // `None` marks the virtual start, which sits on the diagonal
        let mut best: Option<(f64, Option<(usize, usize)>)> = None;
        for (k, (pi, pj)) in preds(i, j).into_iter().enumerate() {
            let cand = if k == 0 && starts_at(mode, i, j) {
                Some((0.0, None))
            } else if pi >= 1 && pj >= 1 {
                Some((r[pi * w + pj], Some((pi, pj))))
            } else {
                None
            };
            if let Some((v, at)) = cand {
                if best.is_none_or(|(b, _)| v < b) {
                    best = Some((v, at));
                }
            }
        }
        match best {
            Some((_, Some((pi, pj)))) => {
                i = pi;
                j = pj;
            }
            _ => break,
        }
    }
    (total, Array::from_parts(vec![m, n], path))
}

/// First and last target rows (0-based) touched by a path matrix.
pub fn extract_span(binary_path: &Array) -> Result<(usize, usize)> {
    let n = binary_path.cols();
    let mut rows = binary_path
        .data()
        .chunks(n)
        .enumerate()
        .filter(|(_, row)| row.iter().any(|v| *v != 0.0))
        .map(|(i, _)| i);
    let s = rows.next().ok_or(MatrError::EmptyPath)?;
    let e = rows.last().unwrap_or(s);
    Ok((s, e))
}

/// Everything known about one alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    pub soft_cost: f64,
    pub hard_cost: f64,
    pub dp_table: Array,
    pub expected_alignment: Array,
    pub binary_path: Array,
    pub span: Option<(usize, usize)>,
    pub gamma: f64,
    pub mode: AlignMode,
}

/// Runs soft-DTW for the value and hard DTW for the binary path and span.
pub fn align(cost: &CostMatrix, gamma: f64, mode: AlignMode) -> Result<AlignmentResult> {
    let soft = soft_dtw(cost, gamma, mode)?;
    let (hard_cost, binary_path) = hard_dtw(cost, mode);
    let span = extract_span(&binary_path).ok();
    Ok(AlignmentResult {
        soft_cost: soft.soft_cost,
        hard_cost,
        dp_table: soft.dp_table,
        expected_alignment: soft.expected_alignment,
        binary_path,
        span,
        gamma,
        mode,
    })
}

/// Records a soft-DTW value of the cost matrix `cost` on the tape.
pub fn soft_dtw_var(tape: &mut Tape, cost: Var, gamma: f64, mode: AlignMode) -> Result<(Var, SoftDtw)> {
    let cm = CostMatrix::new(tape.value(cost).clone())?;
    let sd = soft_dtw(&cm, gamma, mode)?;
    let local = sd.expected_alignment.data().to_vec();
    let v = tape.scalar_fn(vec![cost], sd.soft_cost, vec![local]);
    Ok((v, sd))
}

/// Differentiable alignment loss between `[M, d]` target and `[N, d]` query features.
pub fn alignment_loss(tape: &mut Tape, target: Var, query: Var, gamma: f64, mode: AlignMode) -> Result<Var> {
    let c = tape.cosine_cost(target, query)?;
    Ok(soft_dtw_var(tape, c, gamma, mode)?.0)
}

/// Serializable dump of an alignment (non-finite DP entries become `null`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignmentDump {
    pub mode: AlignMode,
    pub gamma: f64,
    pub soft_cost: f64,
    pub hard_cost: f64,
    pub span: Option<(usize, usize)>,
    pub cost: Vec<Vec<f64>>,
    pub dp_table: Vec<Vec<Option<f64>>>,
    pub expected_alignment: Vec<Vec<f64>>,
    pub binary_path: Vec<Vec<u8>>,
}

impl AlignmentDump {
    pub fn new(cost: &CostMatrix, result: &AlignmentResult) -> Self {
        AlignmentDump {
            mode: result.mode,
            gamma: result.gamma,
            soft_cost: result.soft_cost,
            hard_cost: result.hard_cost,
            span: result.span,
            cost: cost.values().to_rows(),
            dp_table: result
                .dp_table
                .to_rows()
                .into_iter()
                .map(|r| r.into_iter().map(|v| v.is_finite().then_some(v)).collect())
                .collect(),
            expected_alignment: result.expected_alignment.to_rows(),
            binary_path: result
                .binary_path
                .to_rows()
                .into_iter()
                .map(|r| r.into_iter().map(|v| v as u8).collect())
                .collect(),
        }
    }
}
