use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{generator_objective, loss_adv_image, loss_adv_video, loss_rec};
use super::{TrainConfig, TrainError};
use crate::data::{Checkpoint, DataError, Dataset, RunState};
use crate::networks::{Avlae, Bound, NetParams, NetworkId};
use crate::tensor::{AdamState, Graph, Real, Tensor};

use NetworkId::*;

/// Optimizer groups: each owns one Adam state over the listed networks.
pub const GROUPS: [(&str, &[NetworkId]); 4] = [
    ("disc_video", &[EncodeMotion, DiscVideo]),
    ("disc_image", &[EncodeAppearance, DiscImage]),
    ("generator", &[MapAppearance, MapMotion, Generator]),
    ("latent", &[EncodeAppearance, EncodeMotion, Generator]),
];

const STEP1_TRAINABLE: [NetworkId; 4] = [EncodeAppearance, EncodeMotion, DiscImage, DiscVideo];
const STEP2_TRAINABLE: [NetworkId; 3] = [MapAppearance, MapMotion, Generator];
const STEP3_TRAINABLE: [NetworkId; 3] = [EncodeAppearance, EncodeMotion, Generator];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "I")]
    Discriminators,
    #[serde(rename = "II")]
    Generator,
    #[serde(rename = "III")]
    LatentRecon,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Discriminators => "I",
            Phase::Generator => "II",
            Phase::LatentRecon => "III",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// 1-based iteration.
    pub step: u64,
    pub phase: Phase,
    pub losses: BTreeMap<String, f64>,
    /// `‖θ_after − θ_before‖₂` per network.
    pub delta_norms: BTreeMap<String, f64>,
    pub wall_ms: f64,
}

impl StepReport {
    /// The report with timing removed, for trajectory comparisons.
    pub fn untimed(&self) -> StepReport {
        StepReport {
            wall_ms: 0.0,
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.losses.values().chain(self.delta_norms.values()).all(|v| v.is_finite())
    }
}

/// Receives reports and periodic checkpoints from [`Trainer::run`].
pub trait TrainObserver {
    fn report(&mut self, _report: &StepReport) -> Result<(), TrainError> {
        Ok(())
    }

    fn checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

impl TrainObserver for Vec<StepReport> {
    fn report(&mut self, report: &StepReport) -> Result<(), TrainError> {
        self.push(report.clone());
        Ok(())
    }
}

/// Epoch-wise shuffled index stream; the permutation depends only on
/// `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct Sampler {
    seed: u64,
    len: usize,
    epoch: u64,
    cursor: usize,
    perm: Vec<usize>,
}

impl Sampler {
    pub fn new(seed: u64, len: usize) -> Self {
        Self::at(seed, len, 0, 0)
    }

    pub fn at(seed: u64, len: usize, epoch: u64, cursor: usize) -> Self {
        let mut s = Self {
            seed,
            len,
            epoch,
            cursor,
            perm: Vec::new(),
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.perm = (0..self.len).collect();
        self.perm.shuffle(&mut rng);
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor >= self.len {
                self.epoch += 1;
                self.cursor = 0;
                self.shuffle();
            }
            out.push(self.perm[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Trainer<R: Real> {
    config: TrainConfig,
    model: Avlae<R>,
    optimizers: Vec<AdamState<R>>,
    rng: ChaCha8Rng,
    sampler: Option<Sampler>,
    step: u64,
}

fn group_tensors<R: Real>(params: &[NetParams<R>; 7], group: &[NetworkId]) -> Vec<Tensor<R>> {
    params
        .iter()
        .filter(|p| group.contains(&p.id))
        .flat_map(|p| p.tensors().iter().cloned())
        .collect()
}

fn sampler_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_da7a_5a3b_1e55
}

impl<R: Real> Trainer<R> {
    /// Fresh model and optimizers seeded from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Avlae::new(config.model.clone(), &mut rng)?;
        let optimizers = GROUPS
            .iter()
            .map(|(_, ids)| AdamState::new(config.adam, &group_tensors(model.all_params(), ids)))
            .collect();
        Ok(Self {
            config,
            model,
            optimizers,
            rng,
            sampler: None,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Avlae<R> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Avlae<R> {
        &mut self.model
    }

    pub fn into_model(self) -> Avlae<R> {
        self.model
    }

    /// Completed iterations.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self, group: usize) -> &AdamState<R> {
        &self.optimizers[group]
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn check_dataset(&self, data: &Dataset) -> Result<(), TrainError> {
        let expected = self.config.model.video_shape().to_vec();
        match data.video_shape() {
            None => Err(TrainError::EmptyDataset),
            Some(s) if s != expected.as_slice() => Err(TrainError::Geometry {
                expected,
                found: s.to_vec(),
            }),
            Some(_) => Ok(()),
        }
    }

    fn latents(&mut self, n: usize) -> (Tensor<R>, Tensor<R>) {
        let d = self.config.model.latent_dim;
        let z_a = Tensor::randn(&[n, d], &mut self.rng);
        let z_m = Tensor::randn(&[n, d], &mut self.rng);
        (z_a, z_m)
    }

    fn frame_indices(&mut self, n: usize) -> Vec<usize> {
        let t = self.config.model.frames;
        (0..n).map(|_| self.rng.gen_range(0..t)).collect()
    }

    /// Adam update of group `gi` from the gradients on `g`; networks absent
    /// from the graph's gradient set receive zeros.
    fn apply(&mut self, gi: usize, g: &Graph<R>, b: &Bound) -> Result<(), TrainError> {
        let ids = GROUPS[gi].1;
        let grads: Vec<Tensor<R>> = NetworkId::ALL
            .iter()
            .filter(|id| ids.contains(id))
            .flat_map(|&id| {
                b.vars(id).iter().map(|&v| match g.grad(v) {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(g.shape(v)),
                })
            })
            .collect();
        let grad_refs: Vec<&Tensor<R>> = grads.iter().collect();
        let mut params: Vec<&mut Tensor<R>> = self
            .model
            .all_params_mut()
            .iter_mut()
            .filter(|p| ids.contains(&p.id))
            .flat_map(|p| p.tensors_mut().iter_mut())
            .collect();
        self.optimizers[gi].step(&mut params, &grad_refs)?;
        Ok(())
    }

    fn finish(
        &self,
        phase: Phase,
        before: &[NetParams<R>; 7],
        losses: BTreeMap<String, f64>,
        started: Instant,
    ) -> Result<StepReport, TrainError> {
        let step = self.step + 1;
        if losses.values().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                phase,
                losses,
            });
        }
        let delta_norms = NetworkId::ALL
            .iter()
            .map(|&id| {
                let d = self.model.params(id).delta_norm(&before[id.index()]);
                (id.name().to_string(), d)
            })
            .collect();
        Ok(StepReport {
            step,
            phase,
            losses,
            delta_norms,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn scalar(g: &Graph<R>, v: crate::tensor::Var) -> f64 {
        g.value(v).item().to_f64().unwrap_or(f64::NAN)
    }

    /// Step I: ascend the video and image discriminator objectives on a real
    /// batch `[N, 3, T, H, W]` against freshly generated fakes.
    pub fn step_discriminators(&mut self, real: &Tensor<R>) -> Result<StepReport, TrainError> {
        let started = Instant::now();
        let n = real.shape()[0];
        let (z_a, z_m) = self.latents(n);
        let fake = self.model.sample(&z_a, &z_m)?;
        let t_real = self.frame_indices(n);
        let t_fake = self.frame_indices(n);
        let before = self.model.all_params().clone();

        let mut g = Graph::new();
        let b = self.model.bind(&mut g, &STEP1_TRAINABLE);
        let xr = g.constant(real.clone());
        let xf = g.constant(fake);
        let video = loss_adv_video(&mut g, &self.model, &b, xr, xf)?;
        let fr = g.take_per_batch(xr, 2, &t_real)?;
        let ff = g.take_per_batch(xf, 2, &t_fake)?;
        let image = loss_adv_image(&mut g, &self.model, &b, fr, ff)?;
        let total = g.add(video.disc, image.disc)?;
        let objective = g.scale(total, R::c(-1.0));

        let losses = BTreeMap::from([
            ("L_V_disc".to_string(), Self::scalar(&g, video.disc)),
            ("L_I_disc".to_string(), Self::scalar(&g, image.disc)),
            ("objective".to_string(), Self::scalar(&g, objective)),
        ]);
        if losses.values().all(|v| v.is_finite()) {
            g.backward(objective)?;
            self.apply(0, &g, &b)?;
            self.apply(1, &g, &b)?;
        }
        self.finish(Phase::Discriminators, &before, losses, started)
    }

    /// Step II: descend the generator objective through frozen encoders and
    /// discriminators.
    pub fn step_generator(&mut self) -> Result<StepReport, TrainError> {
        let started = Instant::now();
        let n = self.config.batch;
        let (z_a, z_m) = self.latents(n);
        let t_fake = self.frame_indices(n);
        let before = self.model.all_params().clone();

        let mut g = Graph::new();
        let b = self.model.bind(&mut g, &STEP2_TRAINABLE);
        let za = g.constant(z_a);
        let zm = g.constant(z_m);
        let (x, _, _) = self.model.generate_from_noise(&mut g, &b, za, zm)?;
        let lv = self.model.disc_video_full(&mut g, &b, x)?;
        let x_t = g.take_per_batch(x, 2, &t_fake)?;
        let w = self.model.encode_appearance(&mut g, &b, x_t)?;
        let li = self.model.disc_image(&mut g, &b, w)?;
        let gv = generator_objective(&mut g, lv, self.config.gen_loss);
        let gi = generator_objective(&mut g, li, self.config.gen_loss);
        let total = g.add(gv, gi)?;

        let losses = BTreeMap::from([
            ("L_V_gen".to_string(), Self::scalar(&g, gv)),
            ("L_I_gen".to_string(), Self::scalar(&g, gi)),
            ("objective".to_string(), Self::scalar(&g, total)),
        ]);
        if losses.values().all(|v| v.is_finite()) {
            g.backward(total)?;
            self.apply(2, &g, &b)?;
        }
        self.finish(Phase::Generator, &before, losses, started)
    }

    /// Step III: descend the latent reconstruction loss on fresh latents.
    pub fn step_latent_recon(&mut self) -> Result<StepReport, TrainError> {
        let n = self.config.batch;
        let (z_a, z_m) = self.latents(n);
        let frames = self.frame_indices(n);
        self.step_latent_recon_on(&z_a, &z_m, &frames)
    }

    /// Step III on a given latent batch and 0-based frame indices.
    pub fn step_latent_recon_on(
        &mut self,
        z_a: &Tensor<R>,
        z_m: &Tensor<R>,
        frames: &[usize],
    ) -> Result<StepReport, TrainError> {
        let started = Instant::now();
        let before = self.model.all_params().clone();
        let c = &self.config;

        let mut g = Graph::new();
        let b = self.model.bind(&mut g, &STEP3_TRAINABLE);
        let za = g.constant(z_a.clone());
        let zm = g.constant(z_m.clone());
        let rec = loss_rec(&mut g, &self.model, &b, za, zm, frames, c.k1, c.k2, c.rec_norm)?;
        let part = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| Self::scalar(&g, v));
        let losses = BTreeMap::from([
            ("L_rec".to_string(), Self::scalar(&g, rec.total)),
            ("L_rec_motion".to_string(), part(rec.motion)),
            ("L_rec_appearance".to_string(), part(rec.appearance)),
        ]);
        if losses.values().all(|v| v.is_finite()) {
            g.backward(rec.total)?;
            self.apply(3, &g, &b)?;
        }
        self.finish(Phase::LatentRecon, &before, losses, started)
    }

    /// Latent reconstruction loss on a fixed batch without updating anything.
    pub fn eval_latent_recon(&self, z_a: &Tensor<R>, z_m: &Tensor<R>, frames: &[usize]) -> Result<f64, TrainError> {
        let c = &self.config;
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, &[]);
        let za = g.constant(z_a.clone());
        let zm = g.constant(z_m.clone());
        let rec = loss_rec(&mut g, &self.model, &b, za, zm, frames, c.k1, c.k2, c.rec_norm)?;
        Ok(Self::scalar(&g, rec.total))
    }

    /// One Step I → II → III iteration on the next real batch.
    pub fn iteration(&mut self, data: &Dataset) -> Result<[StepReport; 3], TrainError> {
        self.check_dataset(data)?;
        let batch = self.config.batch;
        let seed = sampler_seed(self.config.seed);
        let (epoch, cursor) = match &self.sampler {
            Some(s) if s.len == data.len() => (s.epoch, s.cursor),
            Some(s) => (s.epoch, s.cursor.min(data.len())),
            None => (0, 0),
        };
        if self.sampler.as_ref().map_or(true, |s| s.len != data.len()) {
            self.sampler = Some(Sampler::at(seed, data.len(), epoch, cursor));
        }
        let idx = self.sampler.as_mut().expect("sampler set").next_batch(batch);
        let real: Tensor<R> = data.batch(&idx).cast();
        let r1 = self.step_discriminators(&real)?;
        let r2 = self.step_generator()?;
        let r3 = self.step_latent_recon()?;
        self.step += 1;
        Ok([r1, r2, r3])
    }

    /// Runs `steps` iterations, reporting every `log_every` and checkpointing
    /// every `checkpoint_every` iterations.
    pub fn run(&mut self, data: &Dataset, steps: u64, observer: &mut dyn TrainObserver) -> Result<(), TrainError> {
        for _ in 0..steps {
            let reports = self.iteration(data)?;
            if self.step % self.config.log_every == 0 {
                for r in &reports {
                    observer.report(r)?;
                }
            }
            let every = self.config.checkpoint_every;
            if every > 0 && self.step % every == 0 {
                observer.checkpoint(&self.to_checkpoint())?;
            }
        }
        Ok(())
    }

    fn state(&self) -> RunState {
        let (epoch, cursor) = self
            .sampler
            .as_ref()
            .map_or((0, 0), |s| (s.epoch(), s.cursor() as u64));
        RunState {
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            sampler_epoch: epoch,
            sampler_cursor: cursor,
        }
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for p in self.model.all_params() {
            for n in p.names() {
                names.push(format!("{}/{}", p.id, n));
            }
        }
        for (gname, ids) in GROUPS {
            for p in self.model.all_params().iter().filter(|p| ids.contains(&p.id)) {
                for n in p.names() {
                    names.push(format!("adam/{gname}/m/{}/{}", p.id, n));
                    names.push(format!("adam/{gname}/v/{}/{}", p.id, n));
                }
            }
            names.push(format!("adam/{gname}/t"));
        }
        names
    }

    /// Parameters, Adam moments and generator state in `f32`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for p in self.model.all_params() {
            for (n, t) in p.iter() {
                tensors.push((format!("{}/{}", p.id, n), t.cast::<f32>()));
            }
        }
        for (gi, (gname, ids)) in GROUPS.iter().enumerate() {
            let opt = &self.optimizers[gi];
            let mut slot = 0;
            for p in self.model.all_params().iter().filter(|p| ids.contains(&p.id)) {
                for n in p.names() {
                    tensors.push((format!("adam/{gname}/m/{}/{}", p.id, n), opt.m[slot].cast()));
                    tensors.push((format!("adam/{gname}/v/{}/{}", p.id, n), opt.v[slot].cast()));
                    slot += 1;
                }
            }
            tensors.push((format!("adam/{gname}/t"), Tensor::scalar(opt.t as f32)));
        }
        Checkpoint {
            fingerprint: self.config.fingerprint(),
            step: self.step,
            state: self.state(),
            tensors,
        }
    }

    /// Rebuilds a trainer from a checkpoint written under `config`. A
    /// fingerprint mismatch is refused unless `force`.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint, force: bool) -> Result<Self, TrainError> {
        let expected = config.fingerprint();
        if ckpt.fingerprint != expected && !force {
            return Err(DataError::Fingerprint {
                expected,
                found: ckpt.fingerprint,
            }
            .into());
        }
        let mut tr = Self::new(config)?;
        let known = tr.tensor_names();
        if let Some(extra) = ckpt.names().find(|n| !known.iter().any(|k| k == n)) {
            return Err(DataError::UnexpectedTensor(extra.to_string()).into());
        }
        let load = |name: &str, target: &mut Tensor<R>| -> Result<(), TrainError> {
            let src = ckpt.get(name)?;
            if src.shape() != target.shape() {
                return Err(DataError::TensorShape {
                    name: name.to_string(),
                    expected: target.shape().to_vec(),
                    found: src.shape().to_vec(),
                }
                .into());
            }
            *target = src.cast();
            Ok(())
        };
        for p in tr.model.all_params_mut().iter_mut() {
            let id = p.id;
            let names = p.names().to_vec();
            for (n, t) in names.iter().zip(p.tensors_mut()) {
                load(&format!("{id}/{n}"), t)?;
            }
        }
        for (gi, (gname, ids)) in GROUPS.iter().enumerate() {
            let mut slot = 0;
            let nets: Vec<(NetworkId, Vec<String>)> = tr
                .model
                .all_params()
                .iter()
                .filter(|p| ids.contains(&p.id))
                .map(|p| (p.id, p.names().to_vec()))
                .collect();
            let opt = &mut tr.optimizers[gi];
            for (id, names) in nets {
                for n in names {
                    load(&format!("adam/{gname}/m/{id}/{n}"), &mut opt.m[slot])?;
                    load(&format!("adam/{gname}/v/{id}/{n}"), &mut opt.v[slot])?;
                    slot += 1;
                }
            }
            let t = ckpt.get(&format!("adam/{gname}/t"))?;
            opt.t = t.data()[0] as u64;
        }
        let s = &ckpt.state;
        tr.rng = ChaCha8Rng::from_seed(s.rng_seed);
        tr.rng.set_stream(s.rng_stream);
        tr.rng.set_word_pos(s.rng_word_pos);
        // The dataset length is only known at the next iteration, which
        // rebuilds the permutation for this epoch.
        tr.sampler = Some(Sampler::at(
            sampler_seed(tr.config.seed),
            0,
            s.sampler_epoch,
            s.sampler_cursor as usize,
        ));
        tr.step = ckpt.step;
        Ok(tr)
    }
}

/// Trains a fresh model for `config.steps` iterations.
pub fn train(config: TrainConfig, data: &Dataset, observer: &mut dyn TrainObserver) -> Result<Trainer<f32>, TrainError> {
    let mut tr = Trainer::new(config)?;
    let steps = tr.config.steps;
    tr.run(data, steps, observer)?;
    Ok(tr)
}
