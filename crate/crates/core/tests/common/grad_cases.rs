//! Finite-difference checks shared by the gradient tests and the acceptance run.
//! Each case panics on failure.

use super::*;
use matr_core::alignment::{soft_dtw_var, AlignMode};
use matr_core::autodiff::{Array, Gradients, ParamStore, Tape};
use matr_core::model::{Matr, ModelConfig};
use matr_core::objectives::{fg_loss, overall_loss, seg_loss, LossWeights, MomentLabels};

fn arrays(seed: u64, shapes: &[&[usize]]) -> Vec<Array> {
    let mut r = rng(seed);
    shapes.iter().map(|s| rand_array(&mut r, s, -1.0, 1.0)).collect()
}

pub fn matmul_family() {
    let xs = arrays(1, &[&[3, 4], &[4, 5]]);
    check_inputs(&xs, 0, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weighted_total(t, y, 10)
    });
    let xs = arrays(2, &[&[3, 4], &[5, 4]]);
    check_inputs(&xs, 0, |t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        weighted_total(t, y, 11)
    });
}

pub fn elementwise_binary() {
    let xs = arrays(3, &[&[3, 4], &[3, 4], &[1, 4]]);
    check_inputs(&xs, 0, |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let s = t.sub(a, v[1]).unwrap();
        let m = t.mul(s, v[1]).unwrap();
        let r = t.add_row(m, v[2]).unwrap();
        let r = t.scale(r, -1.7);
        weighted_total(t, r, 12)
    });
}

pub fn add_row_accepts_vector_row() {
    let mut r = rng(4);
    let xs = vec![rand_array(&mut r, &[3, 4], -1.0, 1.0), rand_array(&mut r, &[4], -1.0, 1.0)];
    check_inputs(&xs, 0, |t, v| {
        let y = t.add_row(v[0], v[1]).unwrap();
        weighted_total(t, y, 13)
    });
}

pub fn activations() {
    let xs = arrays(5, &[&[4, 5]]);
    check_inputs(&xs, 0, |t, v| {
        let a = t.relu(v[0]);
        weighted_total(t, a, 14)
    });
    check_inputs(&xs, 0, |t, v| {
        let a = t.sigmoid(v[0]);
        weighted_total(t, a, 15)
    });
    check_inputs(&xs, 0, |t, v| {
        let a = t.softmax_rows(v[0]);
        weighted_total(t, a, 16)
    });
}

pub fn layer_norm() {
    let mut r = rng(6);
    let xs = vec![
        rand_array(&mut r, &[4, 6], -2.0, 2.0),
        rand_array(&mut r, &[6], 0.5, 1.5),
        rand_array(&mut r, &[6], -0.5, 0.5),
    ];
    check_inputs(&xs, 0, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted_total(t, y, 17)
    });
}

pub fn dropout_with_fixed_mask() {
    let xs = arrays(7, &[&[5, 6]]);
    check_inputs(&xs, 99, |t, v| {
        let y = t.dropout(v[0], 0.3).unwrap();
        weighted_total(t, y, 18)
    });
}

pub fn conv1d() {
    let mut r = rng(8);
    let xs = vec![
        rand_array(&mut r, &[5, 3], -1.0, 1.0),
        rand_array(&mut r, &[3, 3, 4], -1.0, 1.0),
        rand_array(&mut r, &[4], -1.0, 1.0),
    ];
    check_inputs(&xs, 0, |t, v| {
        let y = t.conv1d(v[0], v[1], v[2]).unwrap();
        weighted_total(t, y, 19)
    });
}

pub fn concat_and_slices() {
    let xs = arrays(9, &[&[2, 3], &[4, 3], &[6, 2]]);
    check_inputs(&xs, 0, |t, v| {
        let rows = t.concat(&[v[0], v[1]], 0).unwrap();
        let cols = t.concat(&[rows, v[2]], 1).unwrap();
        let s = t.slice_rows(cols, 1, 5).unwrap();
        let c = t.slice_cols(s, 2, 5).unwrap();
        weighted_total(t, c, 20)
    });
}

pub fn reductions() {
    let xs = arrays(10, &[&[3, 4], &[2, 2]]);
    check_inputs(&xs, 0, |t, v| {
        let a = t.mul(v[0], v[0]).unwrap();
        let s = t.sum(a);
        let b = t.mul(v[1], v[1]).unwrap();
        let m = t.mean(b);
        t.weighted_sum(&[(0.3, s), (-2.0, m)]).unwrap()
    });
}

pub fn cosine_cost() {
    let xs = arrays(11, &[&[5, 4], &[3, 4]]);
    check_inputs(&xs, 0, |t, v| {
        let c = t.cosine_cost(v[0], v[1]).unwrap();
        weighted_total(t, c, 21)
    });
}

pub fn cosine_cost_zero_row_has_zero_gradient() {
    let ps = ParamStore::new();
    let mut t = Tape::eval(&ps);
    let a = t.leaf(Array::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap(), true);
    let b = t.leaf(Array::from_rows(&[vec![1.0, -1.0]]).unwrap(), true);
    let c = t.cosine_cost(a, b).unwrap();
    assert_eq!(t.value(c).data()[0], 1.0);
    let s = t.sum(c);
    t.backward(s).unwrap();
    assert_eq!(&t.grad(a).data()[..2], &[0.0, 0.0]);
}

pub fn soft_dtw_both_modes() {
    for (seed, mode) in [(12, AlignMode::Global), (13, AlignMode::Subsequence)] {
        for gamma in [0.1, 1.0] {
            let mut r = rng(seed);
            let xs = vec![rand_array(&mut r, &[6, 4], 0.0, 2.0)];
            check_inputs(&xs, 0, |t, v| soft_dtw_var(t, v[0], gamma, mode).unwrap().0);
        }
    }
}

pub fn soft_dtw_through_cosine_cost() {
    let xs = arrays(14, &[&[6, 5], &[3, 5]]);
    check_inputs(&xs, 0, |t, v| {
        let c = t.cosine_cost(v[0], v[1]).unwrap();
        soft_dtw_var(t, c, 0.1, AlignMode::Subsequence).unwrap().0
    });
}

pub fn foreground_loss() {
    let labels = MomentLabels::from_span(6, 2, 4).unwrap();
    let mut r = rng(15);
    let xs = vec![rand_array(&mut r, &[6, 1], 0.05, 0.95)];
    check_inputs(&xs, 0, |t, v| fg_loss(t, v[0], &labels).unwrap());
}

pub fn boundary_loss() {
    let labels = MomentLabels::from_span(7, 1, 5).unwrap();
    let w = LossWeights { lambda_l1: 0.7, lambda_iou: 1.3, ..LossWeights::default() };
    let mut r = rng(16);
    // offsets spread over both smooth-L1 branches and partial overlaps
    let xs = vec![rand_array(&mut r, &[7, 2], 0.1, 4.5)];
    check_inputs(&xs, 0, |t, v| seg_loss(t, v[0], &labels, &w).unwrap());
}

pub fn boundary_loss_disjoint_prediction() {
    let labels = MomentLabels::from_span(8, 5, 7).unwrap();
    // position 6 predicts far to the left: GIoU hull term active
    let mut d = vec![0.3; 16];
    d[12] = 5.2;
    d[13] = -3.1;
    let xs = vec![Array::new(vec![8, 2], d).unwrap()];
    check_inputs(&xs, 0, |t, v| seg_loss(t, v[0], &labels, &LossWeights::default()).unwrap());
}

fn tiny_config() -> ModelConfig {
    ModelConfig { input_dim: 5, d: 16, k: 1, l: 2, ..ModelConfig::default() }
}

/// Checks every parameter entry of the tiny model under the full loss.
pub fn full_tiny_model() {
    let model = Matr::new(tiny_config(), 3).unwrap();
    let mut r = rng(17);
    let target = rand_array(&mut r, &[6, 5], -1.0, 1.0);
    let query = rand_array(&mut r, &[3, 5], -1.0, 1.0);
    let labels = MomentLabels::from_span(6, 1, 3).unwrap();
    let weights = LossWeights::default();

    let loss_of = |m: &Matr, train: bool| -> (f64, Option<Gradients>, (usize, usize)) {
        let mut t = if train { Tape::train(m.params(), 5) } else { Tape::eval(m.params()) };
        let out = m.forward(&mut t, &target, &query).unwrap();
        let span = out.span;
        let (loss, _) = overall_loss(&mut t, &[out], &[labels.clone()], &weights).unwrap();
        let v = t.value(loss).item();
        t.backward(loss).unwrap();
        let mut g = Gradients::zeros_like(m.params());
        t.accumulate_param_grads(&mut g, 1.0);
        (v, Some(g), span)
    };

    for train in [false, true] {
        let (l0, g, span0) = loss_of(&model, train);
        let g = g.unwrap();
        let mut checked = 0usize;
        let mut kinks = 0usize;
        let mut worst = 0.0f64;
        for id in model.params().ids() {
            for idx in 0..model.params().get(id).len() {
                let mut plus = model.clone();
                plus.params_mut().get_mut(id).data_mut()[idx] += FD_STEP;
                let mut minus = model.clone();
                minus.params_mut().get_mut(id).data_mut()[idx] -= FD_STEP;
                let (lp, _, sp) = loss_of(&plus, train);
                let (lm, _, sm) = loss_of(&minus, train);
                // the hard span is piecewise constant; skip the measure-zero switch points
                if sp != span0 || sm != span0 {
                    continue;
                }
                // ReLU and clamp kinks: one-sided slopes disagree at O(1)
                let (fwd, bwd) = ((lp - l0) / FD_STEP, (l0 - lm) / FD_STEP);
                if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(FD_FLOOR) {
                    kinks += 1;
                    continue;
                }
                let num = (lp - lm) / (2.0 * FD_STEP);
                let an = g.get(id).data()[idx];
                let e = rel_err(an, num);
                assert!(
                    e <= FD_TOL,
                    "{} [{idx}] train={train}: analytic {an} numeric {num} (rel {e:e})",
                    model.params().name(id)
                );
                worst = worst.max(e);
                checked += 1;
            }
        }
        assert!(
            checked > model.params().numel() * 99 / 100,
            "only {checked} of {} entries checked ({kinks} at kinks)",
            model.params().numel()
        );
        assert!(worst <= FD_TOL);
    }
}

pub fn gradient_reaches_learnable_queries() {
    let model = Matr::new(tiny_config(), 8).unwrap();
    let mut r = rng(18);
    let target = rand_array(&mut r, &[6, 5], -1.0, 1.0);
    let query = rand_array(&mut r, &[3, 5], -1.0, 1.0);
    let labels = MomentLabels::from_span(6, 3, 5).unwrap();
    let mut t = Tape::eval(model.params());
    let out = model.forward(&mut t, &target, &query).unwrap();
    let (loss, _) = overall_loss(&mut t, &[out], &[labels], &LossWeights::default()).unwrap();
    t.backward(loss).unwrap();
    let mut g = Gradients::zeros_like(model.params());
    t.accumulate_param_grads(&mut g, 1.0);
    let q = g.get(model.queries_id());
    assert!(q.data().iter().any(|v| *v != 0.0));
}

/// Every case, by name.
pub const ALL: &[(&str, fn())] = &[
    ("matmul_family", matmul_family),
    ("elementwise_binary", elementwise_binary),
    ("add_row_accepts_vector_row", add_row_accepts_vector_row),
    ("activations", activations),
    ("layer_norm", layer_norm),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("conv1d", conv1d),
    ("concat_and_slices", concat_and_slices),
    ("reductions", reductions),
    ("cosine_cost", cosine_cost),
    ("cosine_cost_zero_row_has_zero_gradient", cosine_cost_zero_row_has_zero_gradient),
    ("soft_dtw_both_modes", soft_dtw_both_modes),
    ("soft_dtw_through_cosine_cost", soft_dtw_through_cosine_cost),
    ("foreground_loss", foreground_loss),
    ("boundary_loss", boundary_loss),
    ("boundary_loss_disjoint_prediction", boundary_loss_disjoint_prediction),
    ("full_tiny_model", full_tiny_model),
    ("gradient_reaches_learnable_queries", gradient_reaches_learnable_queries),
];
