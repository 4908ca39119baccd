// SPDX-License-Identifier: Apache-2.0

//! 2-D cross-correlation via im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::{Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero-fill so stride-1 output keeps the input size. Odd kernels only.
    Same,
    Valid,
    Explicit(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            dilation,
            padding: Padding::Same,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel: (kh, kw),
            stride: (sh, sw),
            dilation,
            padding,
        } = *self;
        if [in_channels, out_channels, kh, kw, sh, sw, dilation].contains(&0) {
            return Err(Error::Config(format!("conv extents must be >= 1: {self:?}")));
        }
        if padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::Config(format!(
                "same padding needs odd kernels, got {kh}x{kw}"
            )));
        }
        Ok(())
    }

    pub fn pad(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => (
                self.dilation * (self.kernel.0 - 1) / 2,
                self.dilation * (self.kernel.1 - 1) / 2,
            ),
            Padding::Valid => (0, 0),
            Padding::Explicit(ph, pw) => (ph, pw),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.pad();
        let eh = self.dilation * (self.kernel.0 - 1) + 1;
        let ew = self.dilation * (self.kernel.1 - 1) + 1;
        if h + 2 * ph < eh || w + 2 * pw < ew {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than dilated kernel {eh}x{ew}"),
            ));
        }
        Ok((
            (h + 2 * ph - eh) / self.stride.0 + 1,
            (w + 2 * pw - ew) / self.stride.1 + 1,
        ))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.pad() == (0, 0)
    }
}

struct Geometry {
    spec: ConvSpec,
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let (n, c, h, w) = input.dims4()?;
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {c} channels, spec expects {} (input shape {:?})",
                    spec.in_channels,
                    input.shape()
                ),
            ));
        }
        if weight.shape() != spec.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight shape {:?}, spec expects {:?}",
                    weight.shape(),
                    spec.weight_shape()
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [spec.out_channels] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", b.shape(), spec.out_channels),
                ));
            }
        }
        let (ho, wo) = spec.output_size(h, w)?;
        Ok(Geometry {
            spec: *spec,
            n,
            h,
            w,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.spec.in_channels * self.spec.kernel.0 * self.spec.kernel.1
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output position `o` along one axis, or None if it
    /// falls in the zero padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, dil: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k * dil) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            None
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.pad();
        let d = self.spec.dilation;
        let p = self.p();
        for ci in 0..self.spec.in_channels {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match Self::src(oy, ky, sh, d, ph, self.h) {
                            None => out_row.fill(0.0),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, o) in out_row.iter_mut().enumerate() {
                                    *o = match Self::src(ox, kx, sw, d, pw, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.pad();
        let d = self.spec.dilation;
        let p = self.p();
        for ci in 0..self.spec.in_channels {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let Some(iy) = Self::src(oy, ky, sh, d, ph, self.h) else {
                            continue;
                        };
                        let in_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in 0..self.wo {
                            if let Some(ix) = Self::src(ox, kx, sw, d, pw, self.w) {
                                in_row[ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// C (m×n) = alpha·A (m×k) · B (k×n) + beta·C with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: callers pass slices that cover every element addressed by the
    // given extents and strides; C is dense row-major m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward pass without a graph.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = Geometry::new(input, weight, bias, spec)?;
    let (k, p, co) = (g.k(), g.p(), spec.out_channels);
    let in_stride = spec.in_channels * g.h * g.w;
    let mut out = vec![0.0; g.n * co * p];
    let mut cols = if spec.is_plain_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for b in 0..g.n {
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        let rhs: &[f64] = if spec.is_plain_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        let dst = &mut out[b * co * p..(b + 1) * co * p];
        gemm(co, k, p, weight.data(), k as isize, 1, rhs, p as isize, 1, 0.0, dst);
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[o * p..(o + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&[g.n, co, g.ho, g.wo], out)
}

struct Conv2dBackward {
    spec: ConvSpec,
    has_bias: bool,
}

impl Backward for Conv2dBackward {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let geo = Geometry::new(x, w, None, &self.spec).expect("validated in forward");
        let (k, p, co) = (geo.k(), geo.p(), self.spec.out_channels);
        let in_stride = self.spec.in_channels * geo.h * geo.w;
        let pointwise = self.spec.is_plain_pointwise();

        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; co];
        let mut cols = vec![0.0; if pointwise { 0 } else { k * p }];
        let mut dcols = vec![0.0; if pointwise { 0 } else { k * p }];

        for b in 0..geo.n {
            let xs = &x.data()[b * in_stride..(b + 1) * in_stride];
            let gs = &grad.data()[b * co * p..(b + 1) * co * p];
            let cols_ref: &[f64] = if pointwise {
                xs
            } else {
                geo.im2col(xs, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(co, p, k, gs, p as isize, 1, cols_ref, 1, p as isize, 1.0, &mut dw);
            // dcols = Wᵀ · dY
            let dxs = &mut dx[b * in_stride..(b + 1) * in_stride];
            if pointwise {
                gemm(k, co, p, w.data(), 1, k as isize, gs, p as isize, 1, 0.0, dxs);
            } else {
                gemm(k, co, p, w.data(), 1, k as isize, gs, p as isize, 1, 0.0, &mut dcols);
                geo.col2im(&dcols, dxs);
            }
            if self.has_bias {
                for (o, acc) in db.iter_mut().enumerate() {
                    *acc += gs[o * p..(o + 1) * p].iter().sum::<f64>();
                }
            }
        }

        let mut grads = vec![
            Some(Tensor::new(x.shape(), dx).expect("shape")),
            Some(Tensor::new(w.shape(), dw).expect("shape")),
        ];
        if self.has_bias {
            grads.push(Some(Tensor::new(&[co], db).expect("shape")));
        }
        grads
    }
}

impl Graph {
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            &inputs,
            Box::new(Conv2dBackward {
                spec: *spec,
                has_bias: bias.is_some(),
            }),
        ))
    }
}
