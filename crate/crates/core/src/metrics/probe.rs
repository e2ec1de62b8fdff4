use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::networks::Avlae;
use crate::tensor::{Real, Result, Tensor};

/// Per-frame foreground weights: L1 distance of each pixel's color to the
/// frame's per-channel median color.
fn foreground(video: &Tensor<f32>, t: usize) -> (Vec<f64>, [f64; 3]) {
    let &[_, t_n, h, w] = video.shape() else {
        panic!("readouts expect [3, T, H, W], got {:?}", video.shape());
    };
    let d = video.data();
    let plane = |c: usize| &d[(c * t_n + t) * h * w..(c * t_n + t + 1) * h * w];
    let median = [0, 1, 2].map(|c| {
        let mut v: Vec<f32> = plane(c).to_vec();
        v.sort_by(f32::total_cmp);
        v[v.len() / 2] as f64
    });
    let mut weights = vec![0.0; h * w];
    for c in 0..3 {
        for (wt, &v) in weights.iter_mut().zip(plane(c)) {
            *wt += (v as f64 - median[c]).abs();
        }
    }
    (weights, median)
}

/// Foreground-weighted mean color over all frames of `[3, T, H, W]`.
pub fn appearance_readout(video: &Tensor<f32>) -> [f64; 3] {
    let &[_, t_n, h, w] = video.shape() else {
        panic!("readouts expect [3, T, H, W], got {:?}", video.shape());
    };
    let d = video.data();
    let (mut acc, mut total, mut fallback) = ([0.0; 3], 0.0, [0.0; 3]);
    for t in 0..t_n {
        let (weights, median) = foreground(video, t);
        for c in 0..3 {
            fallback[c] += median[c] / t_n as f64;
            let plane = &d[(c * t_n + t) * h * w..(c * t_n + t + 1) * h * w];
            acc[c] += weights.iter().zip(plane).map(|(wt, &v)| wt * v as f64).sum::<f64>();
        }
        total += weights.iter().sum::<f64>();
    }
    if total <= 1e-12 {
        return fallback;
    }
    acc.map(|a| a / total)
}

fn centroid(video: &Tensor<f32>, t: usize) -> [f64; 2] {
    let w = video.shape()[3];
    let h = video.shape()[2];
    let (weights, _) = foreground(video, t);
    let total: f64 = weights.iter().sum();
    if total <= 1e-12 {
        return [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
    }
    let (mut x, mut y) = (0.0, 0.0);
    for (i, wt) in weights.iter().enumerate() {
        x += wt * (i % w) as f64;
        y += wt * (i / w) as f64;
    }
    [x / total, y / total]
}

/// Net displacement `(dx, dy)` of the foreground centroid from the first to
/// the last frame.
pub fn motion_readout(video: &Tensor<f32>) -> [f64; 2] {
    let t_n = video.shape()[1];
    let a = centroid(video, 0);
    let b = centroid(video, t_n - 1);
    [b[0] - a[0], b[1] - a[1]]
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Typical readout spread, used to make probe statistics unitless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutScale {
    pub appearance: f64,
    pub motion: f64,
}

impl ReadoutScale {
    pub fn unit() -> Self {
        Self {
            appearance: 1.0,
            motion: 1.0,
        }
    }

    /// Mean pairwise readout distance over the first `max_videos` videos.
    pub fn from_dataset(data: &Dataset, max_videos: usize) -> Self {
        let vids = &data.videos[..data.len().min(max_videos)];
        let a: Vec<[f64; 3]> = vids.iter().map(appearance_readout).collect();
        let m: Vec<[f64; 2]> = vids.iter().map(motion_readout).collect();
        let (mut sa, mut sm, mut pairs) = (0.0, 0.0, 0usize);
        for i in 0..vids.len() {
            for j in i + 1..vids.len() {
                sa += dist(&a[i], &a[j]);
                sm += dist(&m[i], &m[j]);
                pairs += 1;
            }
        }
        if pairs == 0 {
            return Self::unit();
        }
        let guard = |s: f64| if s > 0.0 { s / pairs as f64 } else { 1.0 };
        Self {
            appearance: guard(sa),
            motion: guard(sm),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            seed: 0,
        }
    }
}

/// Mean readout changes between paired samples, in units of [`ReadoutScale`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    /// Appearance change when only `z_M` is resampled.
    pub appearance_drift: f64,
    /// Motion change when only `z_A` is resampled.
    pub motion_drift: f64,
    /// Appearance change when only `z_A` is resampled.
    pub appearance_swap_effect: f64,
    /// Motion change when only `z_M` is resampled.
    pub motion_swap_effect: f64,
    pub n_pairs: usize,
}

fn paired_changes(a: &Tensor<f32>, b: &Tensor<f32>) -> (f64, f64) {
    let n = a.shape()[0];
    let (mut da, mut dm) = (0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a.outer(i), b.outer(i));
        da += dist(&appearance_readout(&x), &appearance_readout(&y));
        dm += dist(&motion_readout(&x), &motion_readout(&y));
    }
    (da / n as f64, dm / n as f64)
}

/// Latent-swap statistics: with `z_A` fixed and `z_M` resampled, and the
/// reverse, over `n_pairs` pairs each.
pub fn disentanglement_probe<R: Real>(model: &Avlae<R>, cfg: &ProbeConfig, scale: &ReadoutScale) -> Result<ProbeStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = [cfg.n_pairs.max(1), model.latent_dim()];
    let gen = |z_a: &Tensor<R>, z_m: &Tensor<R>| -> Result<Tensor<f32>> {
        let mut out = Vec::new();
        for i in (0..shape[0]).step_by(16) {
            let take = |z: &Tensor<R>| -> Result<Tensor<R>> {
                let rows: Vec<Tensor<R>> = (i..(i + 16).min(shape[0])).map(|j| z.outer(j)).collect();
                Tensor::stack(&rows)
            };
            let x = model.sample(&take(z_a)?, &take(z_m)?)?;
            out.extend((0..x.shape()[0]).map(|j| x.outer(j).cast::<f32>()));
        }
        Tensor::stack(&out)
    };
    let z_a = Tensor::randn(&shape, &mut rng);
    let z_m1 = Tensor::randn(&shape, &mut rng);
    let z_m2 = Tensor::randn(&shape, &mut rng);
    let (app_drift, mot_swap) = paired_changes(&gen(&z_a, &z_m1)?, &gen(&z_a, &z_m2)?);

    let z_m = Tensor::randn(&shape, &mut rng);
    let z_a1 = Tensor::randn(&shape, &mut rng);
    let z_a2 = Tensor::randn(&shape, &mut rng);
    let (app_swap, mot_drift) = paired_changes(&gen(&z_a1, &z_m)?, &gen(&z_a2, &z_m)?);

    Ok(ProbeStats {
        appearance_drift: app_drift / scale.appearance,
        motion_drift: mot_drift / scale.motion,
        appearance_swap_effect: app_swap / scale.appearance,
        motion_swap_effect: mot_swap / scale.motion,
        n_pairs: shape[0],
    })
}
