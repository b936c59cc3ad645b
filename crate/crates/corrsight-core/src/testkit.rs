//! Independent oracles for the numeric code.
//!
//! Everything in here checks the production path against a second,
//! deliberately dumb computation: central finite differences for gradients,
//! straight-line loop transcriptions for the recurrent cells, brute-force
//! double loops for feature images. None of it calls into the graph
//! machinery it is checking beyond running forward passes.
//!
//! Compiled for unit tests and, behind the `testkit` feature, for
//! out-of-crate suites.

use std::collections::HashMap;

use crate::layers::{
    AttentionBlock, CellUpdate, ConvLstmCell, ConvLstmState, LstmCell, LstmState,
};
use crate::rng::SeededRng;
use crate::tensor::{Activation, Tensor};

/// Uniform values in [-1, 1), tracked for gradients.
pub fn random_param(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| crate::rng::uniform(rng, -1.0, 1.0)).collect();
    Tensor::param(shape, data).expect("random param")
}

/// Uniform values in [-1, 1), untracked.
pub fn random_constant(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    random_param(shape, rng).detach()
}

/// Central finite-difference gradient of `f` with respect to every element
/// of every input, at step `eps`.
pub fn finite_difference(
    inputs: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> Tensor,
    eps: f64,
) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for input in inputs {
        let base = input.to_vec();
        let mut g = vec![0.0; base.len()];
        for j in 0..base.len() {
            let mut bumped = base.clone();
            bumped[j] = base[j] + eps;
            input.set_data(bumped.clone()).expect("perturb +");
            let plus = f(inputs).item().expect("scalar loss");
            bumped[j] = base[j] - eps;
            input.set_data(bumped).expect("perturb -");
            let minus = f(inputs).item().expect("scalar loss");
            g[j] = (plus - minus) / (2.0 * eps);
        }
        input.set_data(base).expect("restore");
        grads.push(g);
    }
    grads
}

/// Largest relative error between backprop and finite differences over all
/// input elements. The denominator is clamped at 1 so tiny gradients are
/// compared absolutely.
pub fn max_grad_error(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs);
    loss.backward().expect("backward");
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for t in inputs {
        t.zero_grad();
    }
    let numeric = finite_difference(inputs, &f, 1e-5);

    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.iter().zip(n) {
            let denom = av.abs().max(nv.abs()).max(1.0);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Panics if backprop and finite differences disagree beyond `tol`.
pub fn assert_grads_match(
    inputs: &[Tensor],
    f: impl Fn(&[Tensor]) -> Tensor,
    tol: f64,
    label: &str,
) {
    let err = max_grad_error(inputs, f);
    assert!(
        err <= tol,
        "{label}: gradient mismatch, max relative error {err:.3e} > {tol:.1e}"
    );
}

/// Panics if any element of `a` and `b` differs by more than `tol`.
pub fn assert_close(a: &[f64], b: &[f64], tol: f64, label: &str) {
    assert_eq!(a.len(), b.len(), "{label}: length mismatch");
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "{label}: element {i} differs, {x} vs {y}"
        );
    }
}

// ---------------------------------------------------------------------
// Straight-line cell transcriptions
// ---------------------------------------------------------------------
//
// These recompute the coupled cell update with nothing but scalar loops:
// their own padding arithmetic, their own sigmoid, their own activation
// table. The only thing they share with the production path is the
// parameter values, pulled out through the public `named_params` API.

/// Plain-data result of one oracle cell step.
pub struct CellOracleStep {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub input_gate: Vec<f64>,
}

fn oracle_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn oracle_activation(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Sigmoid => oracle_sigmoid(x),
        Activation::Tanh => x.tanh(),
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::LeakyRelu => {
            if x > 0.0 {
                x
            } else {
                0.01 * x
            }
        }
        Activation::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp() - 1.0
            }
        }
        Activation::Selu => {
            let (alpha, lambda) = (1.673_263_242_354_377_2, 1.050_700_987_355_480_5);
            if x > 0.0 {
                lambda * x
            } else {
                lambda * alpha * (x.exp() - 1.0)
            }
        }
    }
}

fn params_by_suffix(named: Vec<(String, Tensor)>) -> HashMap<String, Vec<f64>> {
    named
        .into_iter()
        .map(|(n, t)| {
            let suffix = n.rsplit('.').next().expect("param name").to_string();
            (suffix, t.to_vec())
        })
        .collect()
}

/// One ConvLSTM step computed cell by cell from the gate formulas.
pub fn convlstm_step_oracle(
    cell: &ConvLstmCell,
    x: &Tensor,
    state: &ConvLstmState,
) -> CellOracleStep {
    let (filters, cin) = (cell.filters, cell.in_channels);
    let (hh, ww, k) = (cell.height, cell.width, cell.kernel);
    let p = params_by_suffix(cell.named_params("o"));
    let x = x.to_vec();
    let h_prev = state.h.to_vec();
    let c_prev = state.c.to_vec();
    let plane = hh * ww;

    // same padding at stride 1: total pad k-1, the smaller half on top/left
    let pad = (k - 1) / 2;
    let conv = |src: &[f64], src_ch: usize, w: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; filters * plane];
        for oc in 0..filters {
            for i in 0..hh {
                for j in 0..ww {
                    let mut acc = 0.0;
                    for ic in 0..src_ch {
                        for r in 0..k {
                            for c in 0..k {
                                let ii = i as isize + r as isize - pad as isize;
                                let jj = j as isize + c as isize - pad as isize;
                                if ii >= 0
                                    && ii < hh as isize
                                    && jj >= 0
                                    && jj < ww as isize
                                {
                                    acc += src[(ic * hh + ii as usize) * ww + jj as usize]
                                        * w[((oc * src_ch + ic) * k + r) * k + c];
                                }
                            }
                        }
                    }
                    out[(oc * hh + i) * ww + j] = acc;
                }
            }
        }
        out
    };

    let gate_pre = |wx: &str, wh: &str, peep: Option<(&str, &[f64])>, b: &str| -> Vec<f64> {
        let cx = conv(&x, cin, &p[wx]);
        let ch = conv(&h_prev, filters, &p[wh]);
        let bias = &p[b];
        let mut out = vec![0.0; filters * plane];
        for oc in 0..filters {
            for s in 0..plane {
                let idx = oc * plane + s;
                let mut v = cx[idx] + ch[idx] + bias[oc];
                if let Some((wc, cstate)) = peep {
                    v += p[wc][idx] * cstate[idx];
                }
                out[idx] = v;
            }
        }
        out
    };

    let i_gate: Vec<f64> = gate_pre("w_xi", "w_hi", Some(("w_ci", &c_prev)), "b_i")
        .into_iter()
        .map(oracle_sigmoid)
        .collect();
    let f_gate: Vec<f64> = gate_pre("w_xf", "w_hf", Some(("w_cf", &c_prev)), "b_f")
        .into_iter()
        .map(oracle_sigmoid)
        .collect();
    let candidate: Vec<f64> = gate_pre("w_xc", "w_hc", None, "b_c")
        .into_iter()
        .map(|v| oracle_activation(cell.activation, v))
        .collect();

    let mut c_new = vec![0.0; filters * plane];
    for idx in 0..c_new.len() {
        c_new[idx] = match cell.update {
            CellUpdate::Coupled => {
                f_gate[idx] * c_prev[idx] + (1.0 - f_gate[idx]) * candidate[idx]
            }
            CellUpdate::Uncoupled => f_gate[idx] * c_prev[idx] + i_gate[idx] * candidate[idx],
        };
    }

    let o_gate: Vec<f64> = gate_pre("w_xo", "w_ho", Some(("w_co", &c_new)), "b_o")
        .into_iter()
        .map(oracle_sigmoid)
        .collect();

    let mut h_new = vec![0.0; filters * plane];
    for idx in 0..h_new.len() {
        h_new[idx] = o_gate[idx] * oracle_activation(cell.activation, c_new[idx]);
    }
    CellOracleStep {
        h: h_new,
        c: c_new,
        input_gate: i_gate,
    }
}

/// One dense LSTM step computed element by element from the gate formulas.
pub fn lstm_step_oracle(cell: &LstmCell, x: &Tensor, state: &LstmState) -> CellOracleStep {
    let (hidden, in_dim) = (cell.hidden, cell.in_dim);
    let p = params_by_suffix(cell.named_params("o"));
    let x = x.to_vec();
    let h_prev = state.h.to_vec();
    let c_prev = state.c.to_vec();

    let gate_pre = |wh: &str, wx: &str, b: &str| -> Vec<f64> {
        let (wh, wx, b) = (&p[wh], &p[wx], &p[b]);
        (0..hidden)
            .map(|r| {
                let mut acc = b[r];
                for c in 0..hidden {
                    acc += wh[r * hidden + c] * h_prev[c];
                }
                for c in 0..in_dim {
                    acc += wx[r * in_dim + c] * x[c];
                }
                acc
            })
            .collect()
    };

    let i_gate: Vec<f64> = gate_pre("w_hi", "w_xi", "b_i")
        .into_iter()
        .map(oracle_sigmoid)
        .collect();
    let f_gate: Vec<f64> = gate_pre("w_hf", "w_xf", "b_f")
        .into_iter()
        .map(oracle_sigmoid)
        .collect();
    let candidate: Vec<f64> = gate_pre("w_hc", "w_xc", "b_c")
        .into_iter()
        .map(|v| oracle_activation(cell.activation, v))
        .collect();
    let o_gate: Vec<f64> = gate_pre("w_ho", "w_xo", "b_o")
        .into_iter()
        .map(oracle_sigmoid)
        .collect();

    let mut c_new = vec![0.0; hidden];
    let mut h_new = vec![0.0; hidden];
    for idx in 0..hidden {
        c_new[idx] = match cell.update {
            CellUpdate::Coupled => {
                f_gate[idx] * c_prev[idx] + (1.0 - f_gate[idx]) * candidate[idx]
            }
            CellUpdate::Uncoupled => f_gate[idx] * c_prev[idx] + i_gate[idx] * candidate[idx],
        };
        h_new[idx] = o_gate[idx] * oracle_activation(cell.activation, c_new[idx]);
    }
    CellOracleStep {
        h: h_new,
        c: c_new,
        input_gate: i_gate,
    }
}

/// Brute-force feature image over `rows` (each one series' window slice):
/// plain double loop, no symmetry shortcut, no matrix identity.
pub fn feature_image_oracle(rows: &[&[f64]]) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..d {
                acc += rows[i][t] * rows[j][t];
            }
            m[i * n + j] = acc / d as f64;
        }
    }
    m
}

/// Additive attention recomputed with scalar loops and the unshifted
/// softmax straight from the formula.
pub fn attention_oracle(
    att: &AttentionBlock,
    s_prev: &Tensor,
    annotations: &[Tensor],
) -> (Vec<f64>, Vec<f64>) {
    let p = params_by_suffix(att.named_params("o"));
    let (w_s, w_h, v) = (&p["w_s"], &p["w_h"], &p["v"]);
    let (align, qdim, adim) = (att.align_dim, att.query_dim, att.annotation_dim);
    let s = s_prev.to_vec();

    let query_part: Vec<f64> = (0..align)
        .map(|r| (0..qdim).map(|c| w_s[r * qdim + c] * s[c]).sum())
        .collect();
    let scores: Vec<f64> = annotations
        .iter()
        .map(|ann| {
            let a = ann.to_vec();
            (0..align)
                .map(|r| {
                    let mut acc = query_part[r];
                    for c in 0..adim {
                        acc += w_h[r * adim + c] * a[c];
                    }
                    v[r] * acc.tanh()
                })
                .sum()
        })
        .collect();

    let z: f64 = scores.iter().map(|u| u.exp()).sum();
    let weights: Vec<f64> = scores.iter().map(|u| u.exp() / z).collect();

    let mut context = vec![0.0; adim];
    for (w, ann) in weights.iter().zip(annotations) {
        for (c, a) in context.iter_mut().zip(ann.to_vec()) {
            *c += w * a;
        }
    }
    (context, weights)
}
