use rand::Rng;

use super::ParamInit;
use crate::tensor::{FactorizedConv, Graph, Real, Result, Var};

/// Fully connected stack with leaky-relu between layers and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    pub(crate) fn new<R: Real, P: ParamInit<R>, G: Rng + ?Sized>(
        params: &mut P,
        prefix: &str,
        dims: &[usize],
        rng: &mut G,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let (fin, fout) = (io[0], io[1]);
                let w = params.push_init(format!("{prefix}{i}.weight"), &[fout, fin], fin, rng);
                let b = params.push_zeros(format!("{prefix}{i}.bias"), &[fout]);
                (w, b)
            })
            .collect();
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, vars: &[Var], x: Var, slope: R) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.linear(h, vars[w], Some(vars[b]))?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, slope)?;
            }
        }
        Ok(h)
    }
}

/// One convolutional block; the activation is applied by the caller.
#[derive(Clone, Debug)]
pub enum Block {
    /// Plain spatial convolution, kernel `[Co, Ci, 1, k, k]`.
    Spatial {
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Factorized {
        spatial: usize,
        temporal: usize,
        bias: usize,
        cfg: FactorizedConv,
    },
    FactorizedTranspose {
        spatial: usize,
        temporal: usize,
        bias: usize,
        cfg: FactorizedConv,
    },
}

impl Block {
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, vars: &[Var], x: Var) -> Result<Var> {
        match *self {
            Block::Spatial {
                weight,
                bias,
                stride,
                padding,
            } => g.conv3d(
                x,
                vars[weight],
                Some(vars[bias]),
                [1, stride, stride],
                [0, padding, padding],
            ),
            Block::Factorized {
                spatial,
                temporal,
                bias,
                cfg,
            } => g.conv_1p2d(x, vars[spatial], vars[temporal], Some(vars[bias]), cfg),
            Block::FactorizedTranspose {
                spatial,
                temporal,
                bias,
                cfg,
            } => g.conv_transpose_1p2d(x, vars[spatial], vars[temporal], Some(vars[bias]), cfg),
        }
    }
}

/// Downsampling convolutional trunk: halves the spatial extent per block down
/// to 4, doubling channels; optionally halves time with temporal factors.
#[derive(Clone, Debug)]
pub struct Trunk {
    blocks: Vec<Block>,
    /// `[C, T, H, W]` after the last block.
    pub out_shape: [usize; 4],
}

impl Trunk {
    pub(crate) fn plan<R: Real, P: ParamInit<R>, G: Rng + ?Sized>(
        params: &mut P,
        prefix: &str,
        in_shape: [usize; 4],
        base: usize,
        temporal: bool,
        rng: &mut G,
    ) -> Self {
        let [mut c, mut t, mut h, mut w] = in_shape;
        let mut blocks = Vec::new();
        let mut i = 0;
        while blocks.is_empty() || h > 4 {
            let co = base << i.min(3);
            let (k, s, p) = if h > 4 { (4, 2, 1) } else { (3, 1, 1) };
            let block = if temporal {
                let ts = if t > 2 { 2 } else { 1 };
                let spatial = params.push_init(
                    format!("{prefix}{i}.spatial"),
                    &[co, c, 1, k, k],
                    c * k * k,
                    rng,
                );
                let temporal =
                    params.push_init(format!("{prefix}{i}.temporal"), &[co, co, 3, 1, 1], co * 3, rng);
                let bias = params.push_zeros(format!("{prefix}{i}.bias"), &[co]);
                t = (t + 2 - 3) / ts + 1;
                Block::Factorized {
                    spatial,
                    temporal,
                    bias,
                    cfg: FactorizedConv::new(s, p, ts, 1),
                }
            } else {
                let weight = params.push_init(
                    format!("{prefix}{i}.weight"),
                    &[co, c, 1, k, k],
                    c * k * k,
                    rng,
                );
                let bias = params.push_zeros(format!("{prefix}{i}.bias"), &[co]);
                Block::Spatial {
                    weight,
                    bias,
                    stride: s,
                    padding: p,
                }
            };
            blocks.push(block);
            h = (h + 2 * p - k) / s + 1;
            w = (w + 2 * p - k) / s + 1;
            c = co;
            i += 1;
        }
        Self {
            blocks,
            out_shape: [c, t, h, w],
        }
    }

    pub fn features(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Runs every block with leaky-relu; output `[N, C, T, H, W]`.
    pub fn forward_map<R: Real>(&self, g: &mut Graph<R>, vars: &[Var], x: Var, slope: R) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, vars, h)?;
            h = g.leaky_relu(h, slope)?;
        }
        Ok(h)
    }

    /// [`Trunk::forward_map`] flattened to `[N, features]`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, vars: &[Var], x: Var, slope: R) -> Result<Var> {
        let n = g.shape(x)[0];
        let h = self.forward_map(g, vars, x, slope)?;
        g.reshape(h, &[n, self.features()])
    }
}

/// Upsampling stack of factorized transpose convolutions from a `[C0, 1, 4, 4]`
/// seed to `[3, T, H, W]`, finished by a factorized convolution and `tanh`.
#[derive(Clone, Debug)]
pub(crate) struct UpsamplingStack {
    seed: (usize, usize),
    pub seed_shape: [usize; 4],
    stages: Vec<Block>,
    head: Block,
}

impl UpsamplingStack {
    pub(crate) fn plan<R: Real, P: ParamInit<R>, G: Rng + ?Sized>(
        params: &mut P,
        latent: usize,
        out: [usize; 3],
        width: usize,
        rng: &mut G,
    ) -> Self {
        let [frames, height, _] = out;
        let spatial_steps = (height / 4).trailing_zeros() as usize;
        let temporal_steps = frames.trailing_zeros() as usize;
        let n_stages = spatial_steps.max(temporal_steps);
        let c0 = width << n_stages;
        let seed_shape = [c0, 1, 4, 4];
        let seed_len: usize = seed_shape.iter().product();
        let sw = params.push_init("seed.weight", &[seed_len, latent], latent, rng);
        let sb = params.push_zeros("seed.bias", &[seed_len]);

        let mut stages = Vec::new();
        let mut c = c0;
        for i in 0..n_stages {
            let co = c / 2;
            let (kt, st, pt) = if i < temporal_steps { (4, 2, 1) } else { (1, 1, 0) };
            let (ks, ss, ps) = if i < spatial_steps { (4, 2, 1) } else { (3, 1, 1) };
            // Transpose layouts: temporal maps c → co, spatial co → co.
            let temporal = params.push_init(
                format!("stage{i}.temporal"),
                &[c, co, kt, 1, 1],
                c * kt / st,
                rng,
            );
            let spatial = params.push_init(
                format!("stage{i}.spatial"),
                &[co, co, 1, ks, ks],
                co * ks * ks / (ss * ss),
                rng,
            );
            let bias = params.push_zeros(format!("stage{i}.bias"), &[co]);
            stages.push(Block::FactorizedTranspose {
                spatial,
                temporal,
                bias,
                cfg: FactorizedConv::new(ss, ps, st, pt),
            });
            c = co;
        }
        let spatial = params.push_init("head.spatial", &[c, c, 1, 3, 3], c * 9, rng);
        let temporal = params.push_init("head.temporal", &[3, c, 3, 1, 1], c * 3, rng);
        let bias = params.push_zeros("head.bias", &[3]);
        let head = Block::Factorized {
            spatial,
            temporal,
            bias,
            cfg: FactorizedConv::new(1, 1, 1, 1),
        };
        Self {
            seed: (sw, sb),
            seed_shape,
            stages,
            head,
        }
    }

    pub(crate) fn depth(&self) -> usize {
        self.stages.len()
    }

    pub(crate) fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        vars: &[Var],
        latent: Var,
        slope: R,
    ) -> Result<Var> {
        let n = g.shape(latent)[0];
        let h = g.linear(latent, vars[self.seed.0], Some(vars[self.seed.1]))?;
        let h = g.leaky_relu(h, slope)?;
        let [c, t, hh, ww] = self.seed_shape;
        let mut h = g.reshape(h, &[n, c, t, hh, ww])?;
        for stage in &self.stages {
            h = stage.forward(g, vars, h)?;
            h = g.leaky_relu(h, slope)?;
        }
        let h = self.head.forward(g, vars, h)?;
        Ok(g.tanh(h))
    }
}
