//! 3D convolution kernels on `[N, C, T, H, W]` tensors via im2col + gemm.
//!
//! The factorized (1+2)D convolution used throughout the networks is a
//! spatial `1×k×k` convolution followed by a temporal `k×1×1` one; both are
//! instances of the general kernel here.

use super::{Real, Result, TensorError};

/// Geometry of a dense 3D convolution from `input` to `output` extents.
///
/// For a transpose convolution the same struct describes the adjoint forward
/// convolution (big → small), so `input` is the transpose's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn forward(
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for d in 0..3 {
            if stride[d] == 0 || kernel[d] == 0 {
                return Err(TensorError::InvalidConv(format!(
                    "stride {:?} and kernel {:?} must be positive",
                    stride, kernel
                )));
            }
            let padded = input[d] + 2 * padding[d];
            if kernel[d] > padded {
                return Err(TensorError::InvalidConv(format!(
                    "kernel {:?} exceeds padded input {:?} (padding {:?})",
                    kernel, input, padding
                )));
            }
            if padding[d] >= kernel[d] {
                return Err(TensorError::InvalidConv(format!(
                    "padding {:?} must be smaller than kernel {:?}",
                    padding, kernel
                )));
            }
            output[d] = (padded - kernel[d]) / stride[d] + 1;
        }
        Ok(Self {
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    /// Geometry whose adjoint maps `small` up to `(small-1)·s − 2p + k`.
    pub fn transpose(
        small: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let mut big = [0; 3];
        for d in 0..3 {
            if stride[d] == 0 || kernel[d] == 0 {
                return Err(TensorError::InvalidConv(format!(
                    "stride {:?} and kernel {:?} must be positive",
                    stride, kernel
                )));
            }
            if padding[d] >= kernel[d] {
                return Err(TensorError::InvalidConv(format!(
                    "padding {:?} must be smaller than kernel {:?}",
                    padding, kernel
                )));
            }
            let full = (small[d] - 1) * stride[d] + kernel[d];
            if full <= 2 * padding[d] {
                return Err(TensorError::InvalidConv(format!(
                    "transpose output would be empty for input {:?}",
                    small
                )));
            }
            big[d] = full - 2 * padding[d];
        }
        let g = Self::forward(big, kernel, stride, padding)?;
        if g.output != small {
            return Err(TensorError::InvalidConv(format!(
                "stride {:?} / padding {:?} do not invert to input {:?}",
                stride, padding, small
            )));
        }
        Ok(g)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_volume(&self) -> usize {
        self.output.iter().product()
    }
}

/// Hyperparameters of a factorized (1+2)D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorizedConv {
    pub spatial_stride: usize,
    pub spatial_padding: usize,
    pub temporal_stride: usize,
    pub temporal_padding: usize,
}

impl FactorizedConv {
    pub fn new(
        spatial_stride: usize,
        spatial_padding: usize,
        temporal_stride: usize,
        temporal_padding: usize,
    ) -> Self {
        Self {
            spatial_stride,
            spatial_padding,
            temporal_stride,
            temporal_padding,
        }
    }

    pub fn spatial(&self) -> ([usize; 3], [usize; 3]) {
        (
            [1, self.spatial_stride, self.spatial_stride],
            [0, self.spatial_padding, self.spatial_padding],
        )
    }

    pub fn temporal(&self) -> ([usize; 3], [usize; 3]) {
        ([self.temporal_stride, 1, 1], [self.temporal_padding, 0, 0])
    }
}

/// Unfolds one sample `[C, D, H, W]` into columns `[C·kvol, out_vol]`.
pub(crate) fn im2col<R: Real>(x: &[R], channels: usize, g: &ConvGeometry, col: &mut [R]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output;
    let ovol = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * ovol..(row + 1) * ovol];
                    let mut p = 0;
                    for z in 0..od {
                        let zi = (z * sd + a) as isize - pd as isize;
                        for y in 0..oh {
                            let yi = (y * sh + b) as isize - ph as isize;
                            let valid_zy =
                                zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih;
                            if !valid_zy {
                                dst[p..p + ow].fill(R::zero());
                                p += ow;
                                continue;
                            }
                            let base = (zi as usize * ih + yi as usize) * iw;
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                dst[p] = if xi >= 0 && (xi as usize) < iw {
                                    xc[base + xi as usize]
                                } else {
                                    R::zero()
                                };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `x`.
pub(crate) fn col2im<R: Real>(col: &[R], channels: usize, g: &ConvGeometry, x: &mut [R]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output;
    let ovol = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * ovol..(row + 1) * ovol];
                    let mut p = 0;
                    for z in 0..od {
                        let zi = (z * sd + a) as isize - pd as isize;
                        for y in 0..oh {
                            let yi = (y * sh + b) as isize - ph as isize;
                            if !(zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih) {
                                p += ow;
                                continue;
                            }
                            let base = (zi as usize * ih + yi as usize) * iw;
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                if xi >= 0 && (xi as usize) < iw {
                                    xc[base + xi as usize] = xc[base + xi as usize] + src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kernel == [1, 1, 1] && g.stride == [1, 1, 1] && g.padding == [0, 0, 0]
}

/// `y[n] = W · im2col(x[n]) + b`, weight `[co, ci, kd, kh, kw]`.
pub(crate) fn conv3d_forward<R: Real>(
    x: &[R],
    batch: usize,
    ci: usize,
    co: usize,
    weight: &[R],
    bias: Option<&[R]>,
    g: &ConvGeometry,
) -> Vec<R> {
    let kdim = ci * g.kernel_volume();
    let (ivol, ovol) = (g.input_volume(), g.output_volume());
    let mut y = vec![R::zero(); batch * co * ovol];
    let mut col = if is_pointwise(g) {
        Vec::new()
    } else {
        vec![R::zero(); kdim * ovol]
    };
    for n in 0..batch {
        let xn = &x[n * ci * ivol..(n + 1) * ci * ivol];
        let yn = &mut y[n * co * ovol..(n + 1) * co * ovol];
        if let Some(b) = bias {
            for (o, chunk) in yn.chunks_mut(ovol).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { R::one() } else { R::zero() };
        if col.is_empty() {
            R::gemm(co, kdim, ovol, weight, false, xn, false, beta, yn);
        } else {
            im2col(xn, ci, g, &mut col);
            R::gemm(co, kdim, ovol, weight, false, &col, false, beta, yn);
        }
    }
    y
}

/// Gradients of [`conv3d_forward`]. Returns `(dx, dw, db)` for the requested parts.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub(crate) fn conv3d_backward<R: Real>(
    x: &[R],
    batch: usize,
    ci: usize,
    co: usize,
    weight: &[R],
    gy: &[R],
    g: &ConvGeometry,
    need: [bool; 3],
) -> (Option<Vec<R>>, Option<Vec<R>>, Option<Vec<R>>) {
    let kdim = ci * g.kernel_volume();
    let (ivol, ovol) = (g.input_volume(), g.output_volume());
    let pointwise = is_pointwise(g);
    let mut dx = need[0].then(|| vec![R::zero(); batch * ci * ivol]);
    let mut dw = need[1].then(|| vec![R::zero(); co * kdim]);
    let mut db = need[2].then(|| vec![R::zero(); co]);
    let mut col = vec![R::zero(); if pointwise { 0 } else { kdim * ovol }];
    for n in 0..batch {
        let xn = &x[n * ci * ivol..(n + 1) * ci * ivol];
        let gyn = &gy[n * co * ovol..(n + 1) * co * ovol];
        if let Some(dw) = dw.as_mut() {
            let cols: &[R] = if pointwise {
                xn
            } else {
                im2col(xn, ci, g, &mut col);
                &col
            };
            R::gemm(co, ovol, kdim, gyn, false, cols, true, R::one(), dw);
        }
        if let Some(db) = db.as_mut() {
            for (o, chunk) in gyn.chunks(ovol).enumerate() {
                db[o] = db[o] + chunk.iter().fold(R::zero(), |a, &b| a + b);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * ci * ivol..(n + 1) * ci * ivol];
            if pointwise {
                R::gemm(kdim, co, ovol, weight, true, gyn, false, R::zero(), dxn);
            } else {
                R::gemm(kdim, co, ovol, weight, true, gyn, false, R::zero(), &mut col);
                col2im(&col, ci, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Transpose convolution, weight `[ci, co, kd, kh, kw]`, input `[N, ci, out-extents of g]`,
/// output `[N, co, input-extents of g]`.
pub(crate) fn conv_transpose3d_forward<R: Real>(
    x: &[R],
    batch: usize,
    ci: usize,
    co: usize,
    weight: &[R],
    bias: Option<&[R]>,
    g: &ConvGeometry,
) -> Vec<R> {
    let kdim = co * g.kernel_volume();
    let (small, big) = (g.output_volume(), g.input_volume());
    let pointwise = is_pointwise(g);
    let mut y = vec![R::zero(); batch * co * big];
    let mut col = vec![R::zero(); if pointwise { 0 } else { kdim * small }];
    for n in 0..batch {
        let xn = &x[n * ci * small..(n + 1) * ci * small];
        let yn = &mut y[n * co * big..(n + 1) * co * big];
        if pointwise {
            R::gemm(kdim, ci, small, weight, true, xn, false, R::zero(), yn);
        } else {
            R::gemm(kdim, ci, small, weight, true, xn, false, R::zero(), &mut col);
            col2im(&col, co, g, yn);
        }
        if let Some(b) = bias {
            for (o, chunk) in yn.chunks_mut(big).enumerate() {
                for v in chunk {
                    *v = *v + b[o];
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub(crate) fn conv_transpose3d_backward<R: Real>(
    x: &[R],
    batch: usize,
    ci: usize,
    co: usize,
    weight: &[R],
    gy: &[R],
    g: &ConvGeometry,
    need: [bool; 3],
) -> (Option<Vec<R>>, Option<Vec<R>>, Option<Vec<R>>) {
    let kdim = co * g.kernel_volume();
    let (small, big) = (g.output_volume(), g.input_volume());
    let pointwise = is_pointwise(g);
    let mut dx = need[0].then(|| vec![R::zero(); batch * ci * small]);
    let mut dw = need[1].then(|| vec![R::zero(); ci * kdim]);
    let mut db = need[2].then(|| vec![R::zero(); co]);
    let mut col = vec![R::zero(); if pointwise { 0 } else { kdim * small }];
    for n in 0..batch {
        let xn = &x[n * ci * small..(n + 1) * ci * small];
        let gyn = &gy[n * co * big..(n + 1) * co * big];
        if let Some(db) = db.as_mut() {
            for (o, chunk) in gyn.chunks(big).enumerate() {
                db[o] = db[o] + chunk.iter().fold(R::zero(), |a, &b| a + b);
            }
        }
        if need[0] || need[1] {
            let cols: &[R] = if pointwise {
                gyn
            } else {
                im2col(gyn, co, g, &mut col);
                &col
            };
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * ci * small..(n + 1) * ci * small];
                R::gemm(ci, kdim, small, weight, false, cols, false, R::zero(), dxn);
            }
            if let Some(dw) = dw.as_mut() {
                R::gemm(ci, small, kdim, xn, false, cols, true, R::one(), dw);
            }
        }
    }
    (dx, dw, db)
}
