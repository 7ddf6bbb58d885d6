#![allow(dead_code)]

pub mod grad_cases;

use matr_core::autodiff::{Array, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so that gradients that are
/// zero up to rounding compare absolutely.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_array(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Reduces any tensor to a scalar with fixed random weights so that every
/// output entry contributes a distinct gradient.
pub fn weighted_total(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut r = rng(seed);
    let w = rand_array(&mut r, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

/// Compares reverse-mode gradients of `build` w.r.t. every entry of every
/// input against central differences. Returns the worst relative error.
pub fn check_inputs<F>(inputs: &[Array], dropout_seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let ps = ParamStore::new();
    let eval = |vals: &[Array]| -> f64 {
        let mut t = Tape::train(&ps, dropout_seed);
        let vars: Vec<Var> = vals.iter().map(|a| t.leaf(a.clone(), true)).collect();
        let out = build(&mut t, &vars);
        t.value(out).item()
    };
    let mut t = Tape::train(&ps, dropout_seed);
    let vars: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone(), true)).collect();
    let out = build(&mut t, &vars);
    t.backward(out).unwrap();
    let analytic: Vec<Array> = vars.iter().map(|v| t.grad(*v)).collect();

    let mut worst = 0.0f64;
    for (k, a) in inputs.iter().enumerate() {
        for idx in 0..a.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= FD_STEP;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let e = rel_err(analytic[k].data()[idx], num);
            assert!(
                e <= FD_TOL,
                "input {k} entry {idx}: analytic {} numeric {num} (rel {e:e})",
                analytic[k].data()[idx]
            );
            worst = worst.max(e);
        }
    }
    worst
}

use matr_core::alignment::AlignMode;
use matr_core::heads::Segment;

/// Every monotone warping path over an `m x n` grid with unit steps
/// (down, right, diagonal). Global paths run corner to corner; subsequence
/// paths start anywhere in the first query column and end anywhere in the
/// last one.
pub fn enumerate_paths(m: usize, n: usize, mode: AlignMode) -> Vec<Vec<(usize, usize)>> {
    fn extend(
        path: &mut Vec<(usize, usize)>,
        m: usize,
        n: usize,
        mode: AlignMode,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        let (i, j) = *path.last().unwrap();
        let done = match mode {
            AlignMode::Global => i == m - 1 && j == n - 1,
            AlignMode::Subsequence => j == n - 1,
        };
        if done {
            out.push(path.clone());
            // subsequence paths may also continue downwards before ending
            if mode == AlignMode::Global {
                return;
            }
        }
        for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < m && nj < n {
                path.push((ni, nj));
                extend(path, m, n, mode, out);
                path.pop();
            }
        }
    }
    let starts: Vec<usize> = match mode {
        AlignMode::Global => vec![0],
        AlignMode::Subsequence => (0..m).collect(),
    };
    let mut out = Vec::new();
    for s in starts {
        let mut p = vec![(s, 0)];
        extend(&mut p, m, n, mode, &mut out);
    }
    out
}

/// Path cost accumulated from the start, in path order.
pub fn path_cost(c: &[Vec<f64>], path: &[(usize, usize)]) -> f64 {
    path.iter().fold(0.0, |acc, &(i, j)| acc + c[i][j])
}

/// `-gamma * log sum_paths exp(-cost / gamma)`, stabilised.
pub fn brute_soft(c: &[Vec<f64>], gamma: f64, mode: AlignMode) -> f64 {
    let costs: Vec<f64> = enumerate_paths(c.len(), c[0].len(), mode).iter().map(|p| path_cost(c, p)).collect();
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = costs.iter().map(|v| (-(v - min) / gamma).exp()).sum();
    min - gamma * s.ln()
}

/// Gibbs marginals over paths: `P[(i, j) on path]`.
pub fn brute_marginals(c: &[Vec<f64>], gamma: f64, mode: AlignMode) -> Vec<Vec<f64>> {
    let paths = enumerate_paths(c.len(), c[0].len(), mode);
    let costs: Vec<f64> = paths.iter().map(|p| path_cost(c, p)).collect();
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = costs.iter().map(|v| (-(v - min) / gamma).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![vec![0.0; c[0].len()]; c.len()];
    for (p, wp) in paths.iter().zip(&w) {
        for &(i, j) in p {
            out[i][j] += wp / z;
        }
    }
    out
}

/// Minimal path cost and one minimising path.
pub fn brute_hard(c: &[Vec<f64>], mode: AlignMode) -> (f64, Vec<(usize, usize)>) {
    enumerate_paths(c.len(), c[0].len(), mode)
        .into_iter()
        .map(|p| (path_cost(c, &p), p))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
}

/// Selection-based NMS: repeatedly take the best remaining candidate and
/// discard everything overlapping it by more than the threshold.
pub fn nms_reference(segs: &[Segment], thr: f64) -> Vec<Segment> {
    fn better(a: &Segment, b: &Segment) -> bool {
        if a.score != b.score {
            return a.score > b.score;
        }
        if a.start_sec != b.start_sec {
            return a.start_sec < b.start_sec;
        }
        a.end_sec - a.start_sec < b.end_sec - b.start_sec
    }
    fn iou(a: &Segment, b: &Segment) -> f64 {
        let lo = if a.start_sec > b.start_sec { a.start_sec } else { b.start_sec };
        let hi = if a.end_sec < b.end_sec { a.end_sec } else { b.end_sec };
        let inter = if hi > lo { hi - lo } else { 0.0 };
        let union = (a.end_sec - a.start_sec) + (b.end_sec - b.start_sec) - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
    let mut rest: Vec<Segment> = segs.to_vec();
    let mut kept = Vec::new();
    while !rest.is_empty() {
        let mut bi = 0;
        for k in 1..rest.len() {
            if better(&rest[k], &rest[bi]) {
                bi = k;
            }
        }
        let best = rest.remove(bi);
        rest.retain(|s| iou(&best, s) <= thr);
        kept.push(best);
    }
    kept
}
