use rand::Rng;

use super::layers::{Mlp, Trunk, UpsamplingStack};
use super::{ModelConfig, NetParams, NetworkId};
use crate::flow::estimate_flow_graph;
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

/// Parameter handles of all seven networks on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: [Vec<Var>; 7],
}

impl Bound {
    pub fn vars(&self, id: NetworkId) -> &[Var] {
        &self.vars[id.index()]
    }
}

/// The full model: architecture plus the seven disjoint parameter collections.
#[derive(Clone, Debug)]
pub struct Avlae<R> {
    config: ModelConfig,
    params: [NetParams<R>; 7],
    map_a: Mlp,
    map_m: Mlp,
    generator: UpsamplingStack,
    enc_a: Trunk,
    enc_a_proj: Mlp,
    enc_m: Option<(Trunk, Mlp)>,
    disc_i: Mlp,
    disc_v_trunk: Trunk,
    disc_v_head: Mlp,
}

fn power_of_two(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

impl<R: Real> Avlae<R> {
    pub fn new<G: Rng + ?Sized>(config: ModelConfig, rng: &mut G) -> Result<Self> {
        let c = &config;
        let bad = |reason: String| Err(TensorError::InvalidArgument(reason));
        if c.frames < 2 || !power_of_two(c.frames) {
            return bad(format!("frames must be a power of two ≥ 2, got {}", c.frames));
        }
        if c.height != c.width || c.height < 4 || !power_of_two(c.height) {
            return bad(format!(
                "frames must be square with power-of-two side ≥ 4, got {}x{}",
                c.height, c.width
            ));
        }
        if c.latent_dim == 0 || c.gen_channels == 0 || c.enc_channels == 0 || c.disc_hidden == 0 {
            return bad("widths must be positive".into());
        }
        if c.mapper_layers == 0 || c.disc_layers == 0 {
            return bad("layer counts must be positive".into());
        }
        if !(c.leaky_slope > 0.0 && c.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside (0, 1)", c.leaky_slope));
        }
        let flow_shape = c.flow.output_shape(c.frames, c.height, c.width)?;
        let d = c.latent_dim;

        let mut params = NetworkId::ALL.map(NetParams::new);
        let [fa, fm, gp, ea, em, di, dv] = &mut params;

        let mapper_dims = vec![d; c.mapper_layers + 1];
        let map_a = Mlp::new(fa, "fc", &mapper_dims, rng);
        let map_m = Mlp::new(fm, "fc", &mapper_dims, rng);

        let generator =
            UpsamplingStack::plan(gp, 2 * d, [c.frames, c.height, c.width], c.gen_channels, rng);

        let enc_a = Trunk::plan(ea, "conv", [3, 1, c.height, c.width], c.enc_channels, false, rng);
        let enc_a_proj = Mlp::new(ea, "proj", &[enc_a.features(), d], rng);

        let enc_m = c.use_motion_encoder.then(|| {
            let trunk = Trunk::plan(em, "conv", flow_shape, c.enc_channels, true, rng);
            let proj = Mlp::new(em, "proj", &[trunk.features(), d], rng);
            (trunk, proj)
        });

        let mut head = vec![d];
        head.extend(std::iter::repeat(c.disc_hidden).take(c.disc_layers - 1));
        head.push(1);
        let disc_i = Mlp::new(di, "fc", &head, rng);

        let disc_v_trunk = Trunk::plan(
            dv,
            "conv",
            [3, c.frames, c.height, c.width],
            c.enc_channels,
            true,
            rng,
        );
        // Without a motion code the head's hidden layers grow by d instead.
        let (extra_in, extra_hidden) = if c.use_motion_encoder { (d, 0) } else { (0, d) };
        let last = head.len() - 1;
        for h in &mut head[1..last] {
            *h += extra_hidden;
        }
        head[0] = disc_v_trunk.features() + extra_in;
        let disc_v_head = Mlp::new(dv, "fc", &head, rng);

        Ok(Self {
            config,
            params,
            map_a,
            map_m,
            generator,
            enc_a,
            enc_a_proj,
            enc_m,
            disc_i,
            disc_v_trunk,
            disc_v_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn params(&self, id: NetworkId) -> &NetParams<R> {
        &self.params[id.index()]
    }

    pub fn params_mut(&mut self, id: NetworkId) -> &mut NetParams<R> {
        &mut self.params[id.index()]
    }

    pub fn all_params(&self) -> &[NetParams<R>; 7] {
        &self.params
    }

    pub fn all_params_mut(&mut self) -> &mut [NetParams<R>; 7] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(NetParams::numel).sum()
    }

    /// Number of upsampling stages in `G` (excluding the output head).
    pub fn generator_stages(&self) -> usize {
        self.generator.depth()
    }

    /// Puts every parameter on `g`; only networks in `trainable` collect gradients.
    pub fn bind(&self, g: &mut Graph<R>, trainable: &[NetworkId]) -> Bound {
        let vars = NetworkId::ALL.map(|id| {
            let rg = trainable.contains(&id);
            self.params[id.index()]
                .tensors()
                .iter()
                .map(|t| g.leaf(t.clone(), rg))
                .collect()
        });
        Bound { vars }
    }

    fn slope(&self) -> R {
        R::c(self.config.leaky_slope)
    }

    fn check_latent(&self, g: &Graph<R>, z: Var) -> Result<()> {
        let s = g.shape(z);
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(TensorError::ShapeMismatch {
                op: "latent",
                lhs: s.to_vec(),
                rhs: vec![s.first().copied().unwrap_or(0), self.config.latent_dim],
            });
        }
        Ok(())
    }

    fn check_video(&self, g: &Graph<R>, x: Var) -> Result<usize> {
        let s = g.shape(x);
        let [c, t, h, w] = self.config.video_shape();
        if s.len() != 5 || s[1..] != [c, t, h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "video",
                lhs: s.to_vec(),
                rhs: vec![s.first().copied().unwrap_or(0), c, t, h, w],
            });
        }
        Ok(s[0])
    }

    /// `w_A = F_A(z_A)` for latents `[N, d]`.
    pub fn map_appearance(&self, g: &mut Graph<R>, b: &Bound, z: Var) -> Result<Var> {
        self.check_latent(g, z)?;
        let slope = self.slope();
        self.map_a
            .forward(g, b.vars(NetworkId::MapAppearance), z, slope)
    }

    /// `w_M = F_M(z_M)` for latents `[N, d]`.
    pub fn map_motion(&self, g: &mut Graph<R>, b: &Bound, z: Var) -> Result<Var> {
        self.check_latent(g, z)?;
        let slope = self.slope();
        self.map_m.forward(g, b.vars(NetworkId::MapMotion), z, slope)
    }

    /// Video batch `[N, 3, T, H, W]` in `[-1, 1]` from intermediate latents.
    pub fn generate(&self, g: &mut Graph<R>, b: &Bound, w_a: Var, w_m: Var) -> Result<Var> {
        self.check_latent(g, w_a)?;
        self.check_latent(g, w_m)?;
        let w = g.concat(&[w_a, w_m], 1)?;
        let slope = self.slope();
        self.generator
            .forward(g, b.vars(NetworkId::Generator), w, slope)
    }

    /// `w'_A = E_A(frame)` for frames `[N, 3, H, W]` or `[N, 3, 1, H, W]`.
    pub fn encode_appearance(&self, g: &mut Graph<R>, b: &Bound, frame: Var) -> Result<Var> {
        let s = g.shape(frame).to_vec();
        let (h, w) = (self.config.height, self.config.width);
        let frame = match s.as_slice() {
            [n, 3, hh, ww] if *hh == h && *ww == w => g.reshape(frame, &[*n, 3, 1, h, w])?,
            [_, 3, 1, hh, ww] if *hh == h && *ww == w => frame,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "encode_appearance",
                    lhs: s,
                    rhs: vec![3, h, w],
                })
            }
        };
        let vars = b.vars(NetworkId::EncodeAppearance);
        let slope = self.slope();
        let f = self.enc_a.forward(g, vars, frame, slope)?;
        self.enc_a_proj.forward(g, vars, f, slope)
    }

    /// Motion code from a precomputed flow `[N, 2, T-1, h, w]`.
    pub fn encode_flow(&self, g: &mut Graph<R>, b: &Bound, flow: Var) -> Result<Var> {
        let (trunk, proj) = self.enc_m.as_ref().ok_or_else(|| {
            TensorError::InvalidArgument("model was built without a motion encoder".into())
        })?;
        let vars = b.vars(NetworkId::EncodeMotion);
        let slope = self.slope();
        let f = trunk.forward(g, vars, flow, slope)?;
        proj.forward(g, vars, f, slope)
    }

    /// `w'_M = E_M(x)`: frozen optical flow followed by the trainable trunk.
    pub fn encode_motion(&self, g: &mut Graph<R>, b: &Bound, video: Var) -> Result<Var> {
        self.check_video(g, video)?;
        let flow = estimate_flow_graph(g, video, &self.config.flow)?;
        self.encode_flow(g, b, flow)
    }

    /// Image discriminator logit `[N, 1]` from an appearance code.
    pub fn disc_image(&self, g: &mut Graph<R>, b: &Bound, w_a: Var) -> Result<Var> {
        self.check_latent(g, w_a)?;
        let slope = self.slope();
        self.disc_i.forward(g, b.vars(NetworkId::DiscImage), w_a, slope)
    }

    /// Video discriminator logit `[N, 1]`. `w_m` is required iff the model has a
    /// motion encoder.
    pub fn disc_video(
        &self,
        g: &mut Graph<R>,
        b: &Bound,
        video: Var,
        w_m: Option<Var>,
    ) -> Result<Var> {
        self.check_video(g, video)?;
        let vars = b.vars(NetworkId::DiscVideo);
        let slope = self.slope();
        let f = self.disc_v_trunk.forward(g, vars, video, slope)?;
        let h = match (w_m, self.config.use_motion_encoder) {
            (Some(w), true) => {
                self.check_latent(g, w)?;
                g.concat(&[f, w], 1)?
            }
            (None, false) => f,
            _ => {
                return Err(TensorError::InvalidArgument(
                    "motion code must be supplied exactly when the motion encoder is enabled"
                        .into(),
                ))
            }
        };
        self.disc_v_head.forward(g, vars, h, slope)
    }

    /// Video logit with the motion code computed from the same video.
    pub fn disc_video_full(&self, g: &mut Graph<R>, b: &Bound, video: Var) -> Result<Var> {
        let w_m = if self.config.use_motion_encoder {
            Some(self.encode_motion(g, b, video)?)
        } else {
            None
        };
        self.disc_video(g, b, video, w_m)
    }

    /// `G(F_A(z_A), F_M(z_M))`.
    pub fn generate_from_noise(
        &self,
        g: &mut Graph<R>,
        b: &Bound,
        z_a: Var,
        z_m: Var,
    ) -> Result<(Var, Var, Var)> {
        let w_a = self.map_appearance(g, b, z_a)?;
        let w_m = self.map_motion(g, b, z_m)?;
        let x = self.generate(g, b, w_a, w_m)?;
        Ok((x, w_a, w_m))
    }

    /// `G(E_A(x_t), E_M(x))` with per-sample 0-based frame indices.
    pub fn reconstruct_video(
        &self,
        g: &mut Graph<R>,
        b: &Bound,
        video: Var,
        frames: &[usize],
    ) -> Result<Var> {
        self.check_video(g, video)?;
        if let Some(&t) = frames.iter().find(|&&t| t >= self.config.frames) {
            return Err(TensorError::InvalidArgument(format!(
                "frame index {t} out of range for {} frames",
                self.config.frames
            )));
        }
        let x_t = g.take_per_batch(video, 2, frames)?;
        let w_a = self.encode_appearance(g, b, x_t)?;
        let w_m = self.encode_motion(g, b, video)?;
        self.generate(g, b, w_a, w_m)
    }

    /// Value-only generation for a latent batch, outside any training graph.
    pub fn sample(&self, z_a: &Tensor<R>, z_m: &Tensor<R>) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &[]);
        let za = g.constant(z_a.clone());
        let zm = g.constant(z_m.clone());
        let (x, _, _) = self.generate_from_noise(&mut g, &b, za, zm)?;
        Ok(g.value(x).clone())
    }

    /// Value-only reconstruction of a video batch.
    pub fn reconstruct(&self, videos: &Tensor<R>, frames: &[usize]) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &[]);
        let x = g.constant(videos.clone());
        let y = self.reconstruct_video(&mut g, &b, x, frames)?;
        Ok(g.value(y).clone())
    }
}
