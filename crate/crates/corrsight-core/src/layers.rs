//! Recurrent cells and the attention block the autoencoder is built from.
//!
//! Two cell flavors share the same gate layout. [`LstmCell`] is the dense
//! one: gates are affine maps of the previous hidden state and the input.
//! [`ConvLstmCell`] swaps the matrix products for same-padded convolutions
//! and adds Hadamard peephole terms: the input and forget gates peek at the
//! previous cell state, the output gate at the freshly updated one.
//!
//! Both cells default to the coupled state update
//! `C_t = f * C_{t-1} + (1 - f) * C_tilde`, where the forget gate doubles
//! as the input weighting. The classic uncoupled update that uses the input
//! gate instead is available behind [`CellUpdate::Uncoupled`]. The input
//! gate is computed and returned either way, so diagnostics can inspect it
//! even when the coupled update leaves it out of the state math.
//!
//! Gates always squash through a sigmoid. The candidate transform and the
//! cell-output transform use the cell's configured [`Activation`], tanh
//! unless a hyperparameter search says otherwise.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Activation, Padding, Tensor};

/// Which cell-state update rule a cell runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellUpdate {
    /// `C_t = f * C_prev + (1 - f) * candidate`.
    Coupled,
    /// `C_t = f * C_prev + i * candidate`.
    Uncoupled,
}

/// Value a forget-gate bias starts at, so early training remembers by
/// default.
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// Uniform Xavier/Glorot init: values in `+/- sqrt(6 / (fan_in + fan_out))`,
/// tracked for gradients.
pub fn xavier_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    if fan_in + fan_out == 0 {
        return Err(Error::invalid("xavier_uniform", "zero fan"));
    }
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| crate::rng::uniform(rng, -limit, limit))
        .collect();
    Tensor::param(shape, data)
}

fn zeros_param(shape: &[usize]) -> Result<Tensor> {
    Tensor::param(shape, vec![0.0; shape.iter().product()])
}

fn filled_param(shape: &[usize], v: f64) -> Result<Tensor> {
    Tensor::param(shape, vec![v; shape.iter().product()])
}

// ---------------------------------------------------------------------
// ConvLSTM
// ---------------------------------------------------------------------

/// Hidden and cell state of a [`ConvLstmCell`], both `[filters, H, W]`.
#[derive(Clone)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

/// One step's outputs: the new state plus the input gate for diagnostics.
pub struct ConvLstmStep {
    pub h: Tensor,
    pub c: Tensor,
    pub input_gate: Tensor,
}

/// Convolutional LSTM cell over `[C, H, W]` maps.
///
/// Kernels are `[filters, in, k, k]` for input-to-state and
/// `[filters, filters, k, k]` for state-to-state, all same-padded at
/// stride 1 so the spatial size never changes inside the cell. Peepholes
/// are full `[filters, H, W]` maps applied elementwise, which ties a cell
/// to the spatial size it was built for.
pub struct ConvLstmCell {
    pub in_channels: usize,
    pub filters: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub update: CellUpdate,

    w_xi: Tensor,
    w_hi: Tensor,
    w_ci: Tensor,
    b_i: Tensor,
    w_xf: Tensor,
    w_hf: Tensor,
    w_cf: Tensor,
    b_f: Tensor,
    w_xc: Tensor,
    w_hc: Tensor,
    b_c: Tensor,
    w_xo: Tensor,
    w_ho: Tensor,
    w_co: Tensor,
    b_o: Tensor,
}

impl ConvLstmCell {
    pub fn new(
        in_channels: usize,
        filters: usize,
        (height, width): (usize, usize),
        kernel: usize,
        activation: Activation,
        update: CellUpdate,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if kernel == 0 || filters == 0 || in_channels == 0 {
            return Err(Error::invalid("convlstm", "zero-sized cell dimension"));
        }
        let kxk = kernel * kernel;
        let x_shape = [filters, in_channels, kernel, kernel];
        let h_shape = [filters, filters, kernel, kernel];
        let p_shape = [filters, height, width];
        let fan_x = (in_channels * kxk, filters * kxk);
        let fan_h = (filters * kxk, filters * kxk);

        let conv_x = |rng: &mut SeededRng| xavier_uniform(&x_shape, fan_x.0, fan_x.1, rng);
        let w_xi = conv_x(rng)?;
        let w_xf = conv_x(rng)?;
        let w_xc = conv_x(rng)?;
        let w_xo = conv_x(rng)?;
        let conv_h = |rng: &mut SeededRng| xavier_uniform(&h_shape, fan_h.0, fan_h.1, rng);
        let w_hi = conv_h(rng)?;
        let w_hf = conv_h(rng)?;
        let w_hc = conv_h(rng)?;
        let w_ho = conv_h(rng)?;
        // Peephole weights act elementwise, one scalar per cell-state entry.
        let peep = |rng: &mut SeededRng| xavier_uniform(&p_shape, 1, 1, rng);
        let w_ci = peep(rng)?;
        let w_cf = peep(rng)?;
        let w_co = peep(rng)?;

        Ok(ConvLstmCell {
            in_channels,
            filters,
            height,
            width,
            kernel,
            activation,
            update,
            w_xi,
            w_hi,
            w_ci,
            b_i: zeros_param(&[filters])?,
            w_xf,
            w_hf,
            w_cf,
            b_f: filled_param(&[filters], FORGET_BIAS_INIT)?,
            w_xc,
            w_hc,
            b_c: zeros_param(&[filters])?,
            w_xo,
            w_ho,
            w_co,
            b_o: zeros_param(&[filters])?,
        })
    }

    /// All-zero state for sequence start.
    pub fn zero_state(&self) -> Result<ConvLstmState> {
        Ok(ConvLstmState {
            h: Tensor::zeros(&[self.filters, self.height, self.width])?,
            c: Tensor::zeros(&[self.filters, self.height, self.width])?,
        })
    }

    /// Advances the cell by one time step.
    pub fn step(&self, x: &Tensor, state: &ConvLstmState) -> Result<ConvLstmStep> {
        let xs = x.shape();
        if xs != [self.in_channels, self.height, self.width] {
            return Err(Error::ShapeMismatch {
                op: "convlstm_step",
                lhs: xs,
                rhs: vec![self.in_channels, self.height, self.width],
            });
        }
        let conv_x = |k: &Tensor, b: &Tensor| x.conv2d(k, Some(b), 1, Padding::Same);
        let conv_h = |k: &Tensor| state.h.conv2d(k, None, 1, Padding::Same);

        let i_pre = conv_x(&self.w_xi, &self.b_i)?
            .add(&conv_h(&self.w_hi)?)?
            .add(&self.w_ci.mul(&state.c)?)?;
        let i_gate = i_pre.sigmoid()?;

        let f_pre = conv_x(&self.w_xf, &self.b_f)?
            .add(&conv_h(&self.w_hf)?)?
            .add(&self.w_cf.mul(&state.c)?)?;
        let f_gate = f_pre.sigmoid()?;

        let candidate = conv_x(&self.w_xc, &self.b_c)?
            .add(&conv_h(&self.w_hc)?)?
            .activation(self.activation)?;

        let retained = f_gate.mul(&state.c)?;
        let c_new = match self.update {
            CellUpdate::Coupled => retained.add(&f_gate.one_minus()?.mul(&candidate)?)?,
            CellUpdate::Uncoupled => retained.add(&i_gate.mul(&candidate)?)?,
        };

        // The output gate peeks at the state it is about to expose.
        let o_pre = conv_x(&self.w_xo, &self.b_o)?
            .add(&conv_h(&self.w_ho)?)?
            .add(&self.w_co.mul(&c_new)?)?;
        let o_gate = o_pre.sigmoid()?;

        let h_new = o_gate.mul(&c_new.activation(self.activation)?)?;
        Ok(ConvLstmStep {
            h: h_new,
            c: c_new,
            input_gate: i_gate,
        })
    }

    /// Parameters with names under `prefix`, in a fixed order.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        [
            ("w_xi", &self.w_xi),
            ("w_hi", &self.w_hi),
            ("w_ci", &self.w_ci),
            ("b_i", &self.b_i),
            ("w_xf", &self.w_xf),
            ("w_hf", &self.w_hf),
            ("w_cf", &self.w_cf),
            ("b_f", &self.b_f),
            ("w_xc", &self.w_xc),
            ("w_hc", &self.w_hc),
            ("b_c", &self.b_c),
            ("w_xo", &self.w_xo),
            ("w_ho", &self.w_ho),
            ("w_co", &self.w_co),
            ("b_o", &self.b_o),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect()
    }
}

// ---------------------------------------------------------------------
// Dense LSTM
// ---------------------------------------------------------------------

/// Hidden and cell state of an [`LstmCell`], both `[hidden, 1]`.
#[derive(Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

pub struct LstmStep {
    pub h: Tensor,
    pub c: Tensor,
    pub input_gate: Tensor,
}

/// Plain LSTM cell on column vectors. Same gate layout and update rules as
/// the convolutional cell, minus the peepholes.
pub struct LstmCell {
    pub in_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub update: CellUpdate,

    w_xi: Tensor,
    w_hi: Tensor,
    b_i: Tensor,
    w_xf: Tensor,
    w_hf: Tensor,
    b_f: Tensor,
    w_xc: Tensor,
    w_hc: Tensor,
    b_c: Tensor,
    w_xo: Tensor,
    w_ho: Tensor,
    b_o: Tensor,
}

impl LstmCell {
    pub fn new(
        in_dim: usize,
        hidden: usize,
        activation: Activation,
        update: CellUpdate,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if in_dim == 0 || hidden == 0 {
            return Err(Error::invalid("lstm", "zero-sized cell dimension"));
        }
        let wx = |rng: &mut SeededRng| xavier_uniform(&[hidden, in_dim], in_dim, hidden, rng);
        let w_xi = wx(rng)?;
        let w_xf = wx(rng)?;
        let w_xc = wx(rng)?;
        let w_xo = wx(rng)?;
        let wh = |rng: &mut SeededRng| xavier_uniform(&[hidden, hidden], hidden, hidden, rng);
        let w_hi = wh(rng)?;
        let w_hf = wh(rng)?;
        let w_hc = wh(rng)?;
        let w_ho = wh(rng)?;
        Ok(LstmCell {
            in_dim,
            hidden,
            activation,
            update,
            w_xi,
            w_hi,
            b_i: zeros_param(&[hidden, 1])?,
            w_xf,
            w_hf,
            b_f: filled_param(&[hidden, 1], FORGET_BIAS_INIT)?,
            w_xc,
            w_hc,
            b_c: zeros_param(&[hidden, 1])?,
            w_xo,
            w_ho,
            b_o: zeros_param(&[hidden, 1])?,
        })
    }

    pub fn zero_state(&self) -> Result<LstmState> {
        Ok(LstmState {
            h: Tensor::zeros(&[self.hidden, 1])?,
            c: Tensor::zeros(&[self.hidden, 1])?,
        })
    }

    /// Advances the cell by one step. `x` is `[in_dim, 1]`.
    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmStep> {
        let xs = x.shape();
        if xs != [self.in_dim, 1] {
            return Err(Error::ShapeMismatch {
                op: "lstm_step",
                lhs: xs,
                rhs: vec![self.in_dim, 1],
            });
        }
        let gate = |wh: &Tensor, wx: &Tensor, b: &Tensor| -> Result<Tensor> {
            wh.matmul(&state.h)?.add(&wx.matmul(x)?)?.add(b)
        };
        let i_gate = gate(&self.w_hi, &self.w_xi, &self.b_i)?.sigmoid()?;
        let f_gate = gate(&self.w_hf, &self.w_xf, &self.b_f)?.sigmoid()?;
        let candidate = gate(&self.w_hc, &self.w_xc, &self.b_c)?.activation(self.activation)?;

        let retained = f_gate.mul(&state.c)?;
        let c_new = match self.update {
            CellUpdate::Coupled => retained.add(&f_gate.one_minus()?.mul(&candidate)?)?,
            CellUpdate::Uncoupled => retained.add(&i_gate.mul(&candidate)?)?,
        };
        let o_gate = gate(&self.w_ho, &self.w_xo, &self.b_o)?.sigmoid()?;
        let h_new = o_gate.mul(&c_new.activation(self.activation)?)?;
        Ok(LstmStep {
            h: h_new,
            c: c_new,
            input_gate: i_gate,
        })
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        [
            ("w_xi", &self.w_xi),
            ("w_hi", &self.w_hi),
            ("b_i", &self.b_i),
            ("w_xf", &self.w_xf),
            ("w_hf", &self.w_hf),
            ("b_f", &self.b_f),
            ("w_xc", &self.w_xc),
            ("w_hc", &self.w_hc),
            ("b_c", &self.b_c),
            ("w_xo", &self.w_xo),
            ("w_ho", &self.w_ho),
            ("b_o", &self.b_o),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect()
    }
}

// ---------------------------------------------------------------------
// Additive attention
// ---------------------------------------------------------------------

/// What attending over a sequence of annotations produced.
pub struct AttentionOut {
    /// Weighted sum of the annotations, same shape as one annotation.
    pub context: Tensor,
    /// Softmax weights, `[steps, 1]`.
    pub weights: Tensor,
}

/// Additive (Bahdanau) attention.
///
/// Scores annotation `h` against query state `s` with
/// `v^T tanh(W_s s + W_h h)`, softmaxes the scores over the sequence, and
/// returns the weight-blended annotation. Annotations can be spatial maps;
/// they are flattened for scoring and blended in their original shape.
pub struct AttentionBlock {
    pub query_dim: usize,
    pub annotation_dim: usize,
    pub align_dim: usize,
    w_s: Tensor,
    w_h: Tensor,
    v: Tensor,
}

impl AttentionBlock {
    pub fn new(
        query_dim: usize,
        annotation_dim: usize,
        align_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if query_dim == 0 || annotation_dim == 0 || align_dim == 0 {
            return Err(Error::invalid("attention", "zero-sized dimension"));
        }
        Ok(AttentionBlock {
            query_dim,
            annotation_dim,
            align_dim,
            w_s: xavier_uniform(&[align_dim, query_dim], query_dim, align_dim, rng)?,
            w_h: xavier_uniform(&[align_dim, annotation_dim], annotation_dim, align_dim, rng)?,
            v: xavier_uniform(&[align_dim, 1], align_dim, 1, rng)?,
        })
    }

    /// Blends `annotations` by their alignment with the query `s_prev`
    /// (`[query_dim, 1]`). All annotations must share one shape whose
    /// element count is `annotation_dim`.
    pub fn context(&self, s_prev: &Tensor, annotations: &[Tensor]) -> Result<AttentionOut> {
        if annotations.is_empty() {
            return Err(Error::invalid("attention", "no annotations to attend over"));
        }
        if s_prev.shape() != [self.query_dim, 1] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: s_prev.shape(),
                rhs: vec![self.query_dim, 1],
            });
        }
        let query_part = self.w_s.matmul(s_prev)?;
        let mut scores = Vec::with_capacity(annotations.len());
        for ann in annotations {
            if ann.numel() != self.annotation_dim {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: ann.shape(),
                    rhs: vec![self.annotation_dim, 1],
                });
            }
            let aligned = query_part
                .add(&self.w_h.matmul(&ann.flatten_col()?)?)?
                .tanh()?;
            scores.push(self.v.transpose()?.matmul(&aligned)?);
        }
        let score_refs: Vec<&Tensor> = scores.iter().collect();
        let weights = Tensor::concat(&score_refs, 0)?.softmax()?;

        let mut context: Option<Tensor> = None;
        for (t, ann) in annotations.iter().enumerate() {
            let w_t = weights.select_row(t)?.reshape(&[1])?;
            let term = ann.mul(&w_t)?;
            context = Some(match context {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        Ok(AttentionOut {
            context: context.expect("non-empty annotations"),
            weights,
        })
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        [("w_s", &self.w_s), ("w_h", &self.w_h), ("v", &self.v)]
            .into_iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit;

    #[test]
    fn xavier_respects_limit_and_tracks_grads() {
        let mut rng = crate::rng::seeded(31);
        let t = xavier_uniform(&[20, 10], 10, 20, &mut rng).unwrap();
        let limit = (6.0 / 30.0f64).sqrt();
        assert!(t.requires_grad());
        assert!(t.to_vec().iter().all(|v| v.abs() <= limit));
        // not degenerate
        assert!(t.to_vec().iter().any(|v| v.abs() > limit / 10.0));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = crate::rng::seeded(32);
        let cell = ConvLstmCell::new(
            2,
            3,
            (4, 4),
            3,
            Activation::Tanh,
            CellUpdate::Coupled,
            &mut rng,
        )
        .unwrap();
        let params = cell.named_params("enc0");
        let forget_bias = params.iter().find(|(n, _)| n == "enc0.b_f").unwrap();
        assert_eq!(forget_bias.1.to_vec(), vec![1.0; 3]);
        let input_bias = params.iter().find(|(n, _)| n == "enc0.b_i").unwrap();
        assert_eq!(input_bias.1.to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn convlstm_step_shapes_and_state_evolution() {
        let mut rng = crate::rng::seeded(33);
        let cell = ConvLstmCell::new(
            1,
            2,
            (5, 5),
            3,
            Activation::Tanh,
            CellUpdate::Coupled,
            &mut rng,
        )
        .unwrap();
        let mut state = cell.zero_state().unwrap();
        let x = testkit::random_constant(&[1, 5, 5], &mut rng);
        for _ in 0..3 {
            let step = cell.step(&x, &state).unwrap();
            assert_eq!(step.h.shape(), vec![2, 5, 5]);
            assert_eq!(step.c.shape(), vec![2, 5, 5]);
            assert_eq!(step.input_gate.shape(), vec![2, 5, 5]);
            state = ConvLstmState {
                h: step.h,
                c: step.c,
            };
        }
        assert!(state.c.to_vec().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn convlstm_matches_straight_line_oracle() {
        let mut rng = crate::rng::seeded(34);
        for update in [CellUpdate::Coupled, CellUpdate::Uncoupled] {
            for activation in [Activation::Tanh, Activation::Elu] {
                let cell = ConvLstmCell::new(2, 3, (4, 5), 3, activation, update, &mut rng).unwrap();
                let x = testkit::random_constant(&[2, 4, 5], &mut rng);
                let state = ConvLstmState {
                    h: testkit::random_constant(&[3, 4, 5], &mut rng),
                    c: testkit::random_constant(&[3, 4, 5], &mut rng),
                };
                let step = cell.step(&x, &state).unwrap();
                let oracle = testkit::convlstm_step_oracle(&cell, &x, &state);
                testkit::assert_close(&step.h.to_vec(), &oracle.h, 1e-12, "h");
                testkit::assert_close(&step.c.to_vec(), &oracle.c, 1e-12, "c");
                testkit::assert_close(
                    &step.input_gate.to_vec(),
                    &oracle.input_gate,
                    1e-12,
                    "input gate",
                );
            }
        }
    }

    #[test]
    fn lstm_matches_straight_line_oracle() {
        let mut rng = crate::rng::seeded(35);
        for update in [CellUpdate::Coupled, CellUpdate::Uncoupled] {
            let cell = LstmCell::new(4, 6, Activation::Tanh, update, &mut rng).unwrap();
            let x = testkit::random_constant(&[4, 1], &mut rng);
            let state = LstmState {
                h: testkit::random_constant(&[6, 1], &mut rng),
                c: testkit::random_constant(&[6, 1], &mut rng),
            };
            let step = cell.step(&x, &state).unwrap();
            let oracle = testkit::lstm_step_oracle(&cell, &x, &state);
            testkit::assert_close(&step.h.to_vec(), &oracle.h, 1e-12, "h");
            testkit::assert_close(&step.c.to_vec(), &oracle.c, 1e-12, "c");
            testkit::assert_close(
                &step.input_gate.to_vec(),
                &oracle.input_gate,
                1e-12,
                "input gate",
            );
        }
    }

    #[test]
    fn coupled_and_uncoupled_updates_differ() {
        let mut rng_a = crate::rng::seeded(36);
        let mut rng_b = crate::rng::seeded(36);
        let coupled = ConvLstmCell::new(
            1,
            2,
            (3, 3),
            3,
            Activation::Tanh,
            CellUpdate::Coupled,
            &mut rng_a,
        )
        .unwrap();
        let uncoupled = ConvLstmCell::new(
            1,
            2,
            (3, 3),
            3,
            Activation::Tanh,
            CellUpdate::Uncoupled,
            &mut rng_b,
        )
        .unwrap();
        let mut rng = crate::rng::seeded(99);
        let x = testkit::random_constant(&[1, 3, 3], &mut rng);
        let state = ConvLstmState {
            h: testkit::random_constant(&[2, 3, 3], &mut rng),
            c: testkit::random_constant(&[2, 3, 3], &mut rng),
        };
        let a = coupled.step(&x, &state).unwrap();
        let b = uncoupled.step(&x, &state).unwrap();
        let diff: f64 = a
            .c
            .to_vec()
            .iter()
            .zip(b.c.to_vec())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6, "same params, different update rules, same state");
    }

    #[test]
    fn convlstm_gradients_flow_to_every_param() {
        // The coupled update routes nothing through the input gate, so its
        // four parameters must stay gradient-free there; the uncoupled
        // update must reach every parameter.
        let run = |update: CellUpdate| {
            let mut rng = crate::rng::seeded(37);
            let cell = ConvLstmCell::new(1, 2, (3, 3), 3, Activation::Tanh, update, &mut rng)
                .unwrap();
            let x = testkit::random_constant(&[1, 3, 3], &mut rng);
            let s0 = cell.zero_state().unwrap();
            let step1 = cell.step(&x, &s0).unwrap();
            let step2 = cell
                .step(
                    &x,
                    &ConvLstmState {
                        h: step1.h,
                        c: step1.c,
                    },
                )
                .unwrap();
            step2.h.mul(&step2.h).unwrap().sum().unwrap().backward().unwrap();
            cell.named_params("cell")
        };

        let input_gate_params = ["cell.w_xi", "cell.w_hi", "cell.w_ci", "cell.b_i"];
        for (name, p) in run(CellUpdate::Uncoupled) {
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            assert!(
                g.iter().any(|&v| v != 0.0),
                "{name} received no gradient over two uncoupled steps"
            );
        }
        for (name, p) in run(CellUpdate::Coupled) {
            let got_grad = p
                .grad()
                .is_some_and(|g| g.iter().any(|&v| v != 0.0));
            if input_gate_params.contains(&name.as_str()) {
                assert!(!got_grad, "{name} should be inert under the coupled update");
            } else {
                assert!(got_grad, "{name} received no gradient over two coupled steps");
            }
        }
    }

    #[test]
    fn convlstm_step_finite_difference() {
        let mut rng = crate::rng::seeded(38);
        let cell = ConvLstmCell::new(
            1,
            2,
            (3, 3),
            3,
            Activation::Tanh,
            CellUpdate::Coupled,
            &mut rng,
        )
        .unwrap();
        let x = testkit::random_constant(&[1, 3, 3], &mut rng);
        let state = ConvLstmState {
            h: testkit::random_constant(&[2, 3, 3], &mut rng),
            c: testkit::random_constant(&[2, 3, 3], &mut rng),
        };
        let params: Vec<Tensor> = cell
            .named_params("c")
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        testkit::assert_grads_match(
            &params,
            move |_| {
                let step = cell.step(&x, &state).unwrap();
                step.h.mul(&step.h).unwrap().sum().unwrap()
            },
            1e-4,
            "convlstm step",
        );
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let mut rng = crate::rng::seeded(39);
        let att = AttentionBlock::new(6, 12, 4, &mut rng).unwrap();
        let s = testkit::random_constant(&[6, 1], &mut rng);
        let anns: Vec<Tensor> = (0..5)
            .map(|_| testkit::random_constant(&[3, 2, 2], &mut rng))
            .collect();
        let out = att.context(&s, &anns).unwrap();
        assert_eq!(out.weights.shape(), vec![5, 1]);
        assert_eq!(out.context.shape(), vec![3, 2, 2]);
        let w = out.weights.to_vec();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn attention_matches_straight_line_oracle() {
        let mut rng = crate::rng::seeded(40);
        let att = AttentionBlock::new(4, 8, 3, &mut rng).unwrap();
        let s = testkit::random_constant(&[4, 1], &mut rng);
        let anns: Vec<Tensor> = (0..6)
            .map(|_| testkit::random_constant(&[2, 2, 2], &mut rng))
            .collect();
        let out = att.context(&s, &anns).unwrap();
        let (ctx, weights) = testkit::attention_oracle(&att, &s, &anns);
        testkit::assert_close(&out.context.to_vec(), &ctx, 1e-12, "context");
        testkit::assert_close(&out.weights.to_vec(), &weights, 1e-12, "weights");
    }

    #[test]
    fn attention_prefers_aligned_annotation() {
        // With W_h the identity-ish map and a query matching one annotation,
        // that annotation should get the largest weight most of the time.
        let mut rng = crate::rng::seeded(41);
        let att = AttentionBlock::new(3, 3, 5, &mut rng).unwrap();
        let s = testkit::random_constant(&[3, 1], &mut rng);
        let anns: Vec<Tensor> = (0..4)
            .map(|_| testkit::random_constant(&[3], &mut rng))
            .collect();
        let out = att.context(&s, &anns).unwrap();
        // sanity only: context lies in the convex hull of annotations
        let ctx = out.context.to_vec();
        for k in 0..3 {
            let lo = anns
                .iter()
                .map(|a| a.to_vec()[k])
                .fold(f64::INFINITY, f64::min);
            let hi = anns
                .iter()
                .map(|a| a.to_vec()[k])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(ctx[k] >= lo - 1e-12 && ctx[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn attention_finite_difference() {
        let mut rng = crate::rng::seeded(42);
        let att = AttentionBlock::new(3, 4, 3, &mut rng).unwrap();
        let s = testkit::random_constant(&[3, 1], &mut rng);
        let anns: Vec<Tensor> = (0..3)
            .map(|_| testkit::random_constant(&[4], &mut rng))
            .collect();
        let params: Vec<Tensor> = att.named_params("a").into_iter().map(|(_, t)| t).collect();
        testkit::assert_grads_match(
            &params,
            move |_| {
                let out = att.context(&s, &anns).unwrap();
                out.context.mul(&out.context).unwrap().sum().unwrap()
            },
            1e-4,
            "attention",
        );
    }
}
