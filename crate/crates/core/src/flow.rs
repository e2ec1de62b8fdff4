//! Frozen, differentiable Horn–Schunck optical flow.
//!
//! Every arithmetic step of the solver is recorded on the [`Graph`], so
//! gradients reach the input pixels, while the estimator itself owns no
//! trainable state.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

/// Luminance weights for RGB → gray.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub iterations: usize,
    pub smoothness: f64,
    pub scale: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            smoothness: 0.5,
            scale: 8,
        }
    }
}

impl FlowConfig {
    /// Shape `[2, T-1, H/s, W/s]` of the flow for one `[3, T, H, W]` video.
    pub fn output_shape(&self, frames: usize, height: usize, width: usize) -> Result<[usize; 4]> {
        if frames < 2 {
            return Err(TensorError::InvalidArgument(format!(
                "optical flow needs at least 2 frames, got {frames}"
            )));
        }
        if self.scale == 0 || height % self.scale != 0 || width % self.scale != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "flow scale {} does not divide {height}x{width}",
                self.scale
            )));
        }
        if self.smoothness <= 0.0 {
            return Err(TensorError::InvalidArgument(format!(
                "flow smoothness must be positive, got {}",
                self.smoothness
            )));
        }
        Ok([2, frames - 1, height / self.scale, width / self.scale])
    }
}

/// Per-pixel displacement fields `[2, T-1, H/s, W/s]`; channel 0 is the
/// horizontal component `u`, channel 1 the vertical `v`, in pixels at scale `s`.
/// Entry `t` maps frame `t` to frame `t+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSeq<R> {
    pub data: Tensor<R>,
    pub scale: usize,
}

impl<R: Real> FlowSeq<R> {
    pub fn u(&self) -> &[R] {
        &self.data.data()[..self.data.len() / 2]
    }

    pub fn v(&self) -> &[R] {
        &self.data.data()[self.data.len() / 2..]
    }
}

fn kernel<R: Real>(k: [[f64; 3]; 3]) -> [[R; 3]; 3] {
    k.map(|row| row.map(R::c))
}

/// Horn–Schunck neighbourhood average.
const HS_AVERAGE: [[f64; 3]; 3] = [
    [1.0 / 12.0, 1.0 / 6.0, 1.0 / 12.0],
    [1.0 / 6.0, 0.0, 1.0 / 6.0],
    [1.0 / 12.0, 1.0 / 6.0, 1.0 / 12.0],
];
const DIFF_X: [[f64; 3]; 3] = [[0.0, 0.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 0.0, 0.0]];
const DIFF_Y: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

/// Flow of a video batch `[N, 3, T, H, W]` as a graph node `[N, 2, T-1, h, w]`.
pub fn estimate_flow_graph<R: Real>(g: &mut Graph<R>, video: Var, cfg: &FlowConfig) -> Result<Var> {
    let shape = g.shape(video).to_vec();
    if shape.len() != 5 || shape[1] != 3 {
        return Err(TensorError::InvalidShape {
            shape,
            reason: "flow expects [N, 3, T, H, W]".into(),
        });
    }
    let (n, t, h, w) = (shape[0], shape[2], shape[3], shape[4]);
    let [_, pairs, fh, fw] = cfg.output_shape(t, h, w)?;

    let mut gray: Option<Var> = None;
    for (c, &weight) in LUMA.iter().enumerate() {
        let ch = g.slice(video, 1, c, 1)?;
        let ch = g.scale(ch, R::c(weight));
        gray = Some(match gray {
            Some(acc) => g.add(acc, ch)?,
            None => ch,
        });
    }
    let gray = g.reshape(gray.expect("three channels"), &[n, t, h, w])?;
    let gray = if cfg.scale > 1 {
        g.avg_pool2d(gray, cfg.scale)?
    } else {
        gray
    };

    let first = g.slice(gray, 1, 0, pairs)?;
    let second = g.slice(gray, 1, 1, pairs)?;
    // Spatial derivatives averaged over both frames of each pair.
    let both = g.add(first, second)?;
    let ix = g.stencil3x3(both, kernel(DIFF_X))?;
    let ix = g.scale(ix, R::c(0.25));
    let iy = g.stencil3x3(both, kernel(DIFF_Y))?;
    let iy = g.scale(iy, R::c(0.25));
    let it = g.sub(second, first)?;

    let ix2 = g.square(ix);
    let iy2 = g.square(iy);
    let den = g.add(ix2, iy2)?;
    let den = g.add_scalar(den, R::c(cfg.smoothness * cfg.smoothness));

    let mut u = g.constant(Tensor::zeros(&[n, pairs, fh, fw]));
    let mut v = g.constant(Tensor::zeros(&[n, pairs, fh, fw]));
    for _ in 0..cfg.iterations {
        let ua = g.stencil3x3(u, kernel(HS_AVERAGE))?;
        let va = g.stencil3x3(v, kernel(HS_AVERAGE))?;
        let a = g.mul(ix, ua)?;
        let b = g.mul(iy, va)?;
        let num = g.add(a, b)?;
        let num = g.add(num, it)?;
        let ratio = g.div(num, den)?;
        let du = g.mul(ix, ratio)?;
        let dv = g.mul(iy, ratio)?;
        u = g.sub(ua, du)?;
        v = g.sub(va, dv)?;
    }
    let u = g.reshape(u, &[n, 1, pairs, fh, fw])?;
    let v = g.reshape(v, &[n, 1, pairs, fh, fw])?;
    g.concat(&[u, v], 1)
}

/// Flow of a single `[3, T, H, W]` video, evaluated on a private graph.
pub fn estimate_flow<R: Real>(video: &Tensor<R>, cfg: &FlowConfig) -> Result<FlowSeq<R>> {
    let mut shape = vec![1];
    shape.extend_from_slice(video.shape());
    let mut g = Graph::new();
    let x = g.constant(video.clone().reshape(&shape)?);
    let f = estimate_flow_graph(&mut g, x, cfg)?;
    let out = g.value(f).clone();
    let s = out.shape()[1..].to_vec();
    Ok(FlowSeq {
        data: out.reshape(&s)?,
        scale: cfg.scale,
    })
}
