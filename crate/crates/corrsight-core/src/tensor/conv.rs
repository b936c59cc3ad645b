//! Spatial ops: 2-D convolution, 2x2 max pooling, 2x2 nearest upsampling.
//!
//! Layout is channels-first: inputs are `[C, H, W]`, kernels are
//! `[C_out, C_in, KH, KW]`. Convolution is cross-correlation (no kernel
//! flip). `Same` padding keeps `ceil(H/stride)` rows like TensorFlow does,
//! with the odd pad row going to the bottom/right.

use super::{BackwardFn, Tensor};
use crate::error::{Error, Result};

/// Padding policy for [`Tensor::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`.
    Same,
    /// No padding; output `floor((in - kernel) / stride) + 1`.
    Valid,
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_geometry(
    x_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    if x_shape.len() != 3 {
        return Err(Error::invalid(
            "conv2d",
            format!("input must be [C,H,W], got {x_shape:?}"),
        ));
    }
    if k_shape.len() != 4 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel must be [Cout,Cin,KH,KW], got {k_shape:?}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    let (cin, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (cout, kcin, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    if kcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x_shape.to_vec(),
            rhs: k_shape.to_vec(),
        });
    }
    let (h_out, w_out, pad_top, pad_left) = match padding {
        Padding::Same => {
            let h_out = h.div_ceil(stride);
            let w_out = w.div_ceil(stride);
            let pad_h = ((h_out - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((w_out - 1) * stride + kw).saturating_sub(w);
            (h_out, w_out, pad_h / 2, pad_w / 2)
        }
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::invalid(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than input {h}x{w} without padding"),
                ));
            }
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
        }
    };
    Ok(ConvGeometry {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad_top,
        pad_left,
        h_out,
        w_out,
    })
}

fn conv_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.cout * g.h_out * g.w_out];
    if let Some(b) = bias {
        for oc in 0..g.cout {
            out[oc * g.h_out * g.w_out..(oc + 1) * g.h_out * g.w_out].fill(b[oc]);
        }
    }
    for oc in 0..g.cout {
        for ic in 0..g.cin {
            for kr in 0..g.kh {
                for kc in 0..g.kw {
                    let wv = k[((oc * g.cin + ic) * g.kh + kr) * g.kw + kc];
                    if wv == 0.0 {
                        continue;
                    }
                    for oi in 0..g.h_out {
                        let ii = (oi * g.stride + kr) as isize - g.pad_top as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let xrow = (ic * g.h + ii as usize) * g.w;
                        let orow = (oc * g.h_out + oi) * g.w_out;
                        for oj in 0..g.w_out {
                            let ij = (oj * g.stride + kc) as isize - g.pad_left as isize;
                            if ij < 0 || ij >= g.w as isize {
                                continue;
                            }
                            out[orow + oj] += wv * x[xrow + ij as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    g: ConvGeometry,
    with_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let mut dx = vec![0.0; g.cin * g.h * g.w];
    let mut dk = vec![0.0; g.cout * g.cin * g.kh * g.kw];
    for oc in 0..g.cout {
        for ic in 0..g.cin {
            for kr in 0..g.kh {
                for kc in 0..g.kw {
                    let kidx = ((oc * g.cin + ic) * g.kh + kr) * g.kw + kc;
                    let wv = k[kidx];
                    let mut wsum = 0.0;
                    for oi in 0..g.h_out {
                        let ii = (oi * g.stride + kr) as isize - g.pad_top as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let xrow = (ic * g.h + ii as usize) * g.w;
                        let orow = (oc * g.h_out + oi) * g.w_out;
                        for oj in 0..g.w_out {
                            let ij = (oj * g.stride + kc) as isize - g.pad_left as isize;
                            if ij < 0 || ij >= g.w as isize {
                                continue;
                            }
                            let go = dout[orow + oj];
                            dx[xrow + ij as usize] += wv * go;
                            wsum += x[xrow + ij as usize] * go;
                        }
                    }
                    dk[kidx] += wsum;
                }
            }
        }
    }
    let db = with_bias.then(|| {
        (0..g.cout)
            .map(|oc| {
                dout[oc * g.h_out * g.w_out..(oc + 1) * g.h_out * g.w_out]
                    .iter()
                    .sum()
            })
            .collect()
    });
    (dx, dk, db)
}

impl Tensor {
    /// 2-D cross-correlation of `[C_in,H,W]` with `[C_out,C_in,KH,KW]`,
    /// optional per-output-channel bias.
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor> {
        let g = conv_geometry(&self.shape(), &kernel.shape(), stride, padding)?;
        if let Some(b) = bias {
            if b.shape() != [g.cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: b.shape(),
                    rhs: vec![g.cout],
                });
            }
        }
        let x = self.to_vec();
        let k = kernel.to_vec();
        let b = bias.map(|b| b.to_vec());
        let data = conv_forward(&x, &k, b.as_deref(), g);

        let with_bias = bias.is_some();
        let backward: BackwardFn = Box::new(move |ctx| {
            let x = ctx.parents[0].to_vec();
            let k = ctx.parents[1].to_vec();
            let (dx, dk, db) = conv_backward(&x, &k, ctx.out_grad, g, with_bias);
            let mut grads = vec![Some(dx), Some(dk)];
            if with_bias {
                grads.push(db);
            }
            grads
        });

        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::make(
            "conv2d",
            vec![g.cout, g.h_out, g.w_out],
            data,
            parents,
            Some(backward),
        )
    }

    /// 2x2 max pooling with stride 2 and ceil-mode edges: odd trailing rows
    /// or columns pool over whatever cells exist. Ties route the gradient to
    /// the first maximum in row-major order.
    pub fn maxpool2x2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::invalid(
                "maxpool2x2",
                format!("input must be [C,H,W], got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));

        let argmax = move |x: &[f64], ch: usize, oi: usize, oj: usize| -> usize {
            let mut best_idx = 0;
            let mut best = f64::NEG_INFINITY;
            for di in 0..2 {
                let i = oi * 2 + di;
                if i >= h {
                    break;
                }
                for dj in 0..2 {
                    let j = oj * 2 + dj;
                    if j >= w {
                        break;
                    }
                    let idx = (ch * h + i) * w + j;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
            }
            best_idx
        };

        let x = self.to_vec();
        let mut data = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for oi in 0..ho {
                for oj in 0..wo {
                    data[(ch * ho + oi) * wo + oj] = x[argmax(&x, ch, oi, oj)];
                }
            }
        }

        let backward: BackwardFn = Box::new(move |ctx| {
            let x = ctx.parents[0].to_vec();
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for oi in 0..ho {
                    for oj in 0..wo {
                        dx[argmax(&x, ch, oi, oj)] += ctx.out_grad[(ch * ho + oi) * wo + oj];
                    }
                }
            }
            vec![Some(dx)]
        });
        Tensor::make(
            "maxpool2x2",
            vec![c, ho, wo],
            data,
            vec![self.clone()],
            Some(backward),
        )
    }

    /// Nearest-neighbor 2x upsampling, optionally cropped to `target`
    /// (rows, cols) from the top-left. The decoder uses the crop to undo a
    /// ceil-mode pool of an odd size.
    pub fn upsample2x2(&self, target: Option<(usize, usize)>) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::invalid(
                "upsample2x2",
                format!("input must be [C,H,W], got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (th, tw) = target.unwrap_or((2 * h, 2 * w));
        if th == 0 || tw == 0 || th > 2 * h || tw > 2 * w {
            return Err(Error::invalid(
                "upsample2x2",
                format!("target {th}x{tw} not within 1..={}x{}", 2 * h, 2 * w),
            ));
        }

        let x = self.to_vec();
        let mut data = vec![0.0; c * th * tw];
        for ch in 0..c {
            for i in 0..th {
                for j in 0..tw {
                    data[(ch * th + i) * tw + j] = x[(ch * h + i / 2) * w + j / 2];
                }
            }
        }

        let backward: BackwardFn = Box::new(move |ctx| {
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for i in 0..th {
                    for j in 0..tw {
                        dx[(ch * h + i / 2) * w + j / 2] += ctx.out_grad[(ch * th + i) * tw + j];
                    }
                }
            }
            vec![Some(dx)]
        });
        Tensor::make(
            "upsample2x2",
            vec![c, th, tw],
            data,
            vec![self.clone()],
            Some(backward),
        )
    }
}
