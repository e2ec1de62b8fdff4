use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassProbs, FeatureSet, MetricError};
use crate::data::Dataset;
use crate::networks::{Mlp, ParamInit, Trunk};
use crate::tensor::{softmax_rows, AdamConfig, AdamState, Graph, Tensor, Var};

/// Source of features and class probabilities for videos `[3, T, H, W]`.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn extract(&self, videos: &[Tensor<f32>]) -> Result<FeatureSet, MetricError>;
    fn classify(&self, videos: &[Tensor<f32>]) -> Result<ClassProbs, MetricError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub feature_dim: usize,
    /// Width of the first convolution block.
    pub channels: usize,
    pub epochs: usize,
    pub batch: usize,
    pub alpha: f64,
    /// Fraction of the labelled set held out for the accuracy gate.
    pub holdout: f64,
    /// Minimum held-out joint accuracy before the extractor may be used.
    pub gate: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            channels: 16,
            epochs: 20,
            batch: 16,
            alpha: 1e-3,
            holdout: 0.2,
            gate: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Store {
    tensors: Vec<Tensor<f32>>,
}

impl ParamInit<f32> for Store {
    fn push(&mut self, _name: String, t: Tensor<f32>) -> usize {
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

const SLOPE: f32 = 0.2;

/// Small factorized-convolution classifier over the appearance × motion
/// class grid. The joint class distribution is the product of an
/// appearance softmax and a motion softmax; the shared penultimate layer
/// provides the features.
#[derive(Clone, Debug)]
pub struct ToyExtractor {
    config: ExtractorConfig,
    video_shape: [usize; 4],
    appearance_classes: usize,
    motion_classes: usize,
    store: Store,
    trunk: Trunk,
    feature: Mlp,
    head_a: Mlp,
    head_m: Mlp,
    /// Constant kernel averaging each channel over the trunk's spatial grid.
    pool: Tensor<f32>,
    accuracy: Option<f64>,
}

impl ToyExtractor {
    pub fn new(
        config: ExtractorConfig,
        video_shape: [usize; 4],
        appearance_classes: usize,
        motion_classes: usize,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = Store::default();
        let trunk = Trunk::plan(&mut store, "conv", video_shape, config.channels, true, &mut rng);
        let [c, t, h, w] = trunk.out_shape;
        let mut pool = Tensor::zeros(&[c, c, 1, h, w]);
        for ch in 0..c {
            let base = ch * (c + 1) * h * w;
            pool.data_mut()[base..base + h * w].fill(1.0 / (h * w) as f32);
        }
        let feature = Mlp::new(&mut store, "feat", &[c * t, config.feature_dim], &mut rng);
        let head_a = Mlp::new(&mut store, "app", &[config.feature_dim, appearance_classes], &mut rng);
        let head_m = Mlp::new(&mut store, "mot", &[config.feature_dim, motion_classes], &mut rng);
        Self {
            config,
            video_shape,
            appearance_classes,
            motion_classes,
            store,
            trunk,
            feature,
            head_a,
            head_m,
            pool,
            accuracy: None,
        }
    }

    /// Trains on a labelled dataset, measures joint accuracy on a held-out
    /// split, and records whether the gate passed.
    pub fn train_gated(config: ExtractorConfig, data: &Dataset) -> Result<Self, MetricError> {
        let shape: [usize; 4] = data
            .video_shape()
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| MetricError::InvalidFeatures("dataset is empty or not [3, T, H, W]".into()))?;
        if data.labels.is_none() {
            return Err(MetricError::InvalidFeatures("dataset has no labels".into()));
        }
        let held = ((data.len() as f64) * config.holdout).round() as usize;
        let (test, train) = data.split_at(held);
        let mut ex = Self::new(config, shape, data.appearance_classes, data.motion_classes);
        ex.fit(&train)?;
        ex.accuracy = Some(ex.evaluate(&test)?);
        Ok(ex)
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// Held-out joint accuracy, once measured.
    pub fn accuracy(&self) -> Option<f64> {
        self.accuracy
    }

    pub fn passed_gate(&self) -> bool {
        self.accuracy.is_some_and(|a| a >= self.config.gate)
    }

    fn forward(&self, g: &mut Graph<f32>, vars: &[Var], x: Var) -> Result<(Var, Var, Var), MetricError> {
        let n = g.shape(x)[0];
        let h = self.trunk.forward_map(g, vars, x, SLOPE)?;
        let pool = g.constant(self.pool.clone());
        let h = g.conv3d(h, pool, None, [1, 1, 1], [0, 0, 0])?;
        let [c, t, _, _] = self.trunk.out_shape;
        let h = g.reshape(h, &[n, c * t])?;
        let f = self.feature.forward(g, vars, h, SLOPE)?;
        let f = g.leaky_relu(f, SLOPE)?;
        let la = self.head_a.forward(g, vars, f, SLOPE)?;
        let lm = self.head_m.forward(g, vars, f, SLOPE)?;
        Ok((f, la, lm))
    }

    fn check(&self, videos: &[Tensor<f32>]) -> Result<(), MetricError> {
        if let Some(v) = videos.iter().find(|v| v.shape() != self.video_shape) {
            return Err(MetricError::InvalidFeatures(format!(
                "video shape {:?} does not match extractor geometry {:?}",
                v.shape(),
                self.video_shape
            )));
        }
        Ok(())
    }

    pub fn fit(&mut self, data: &Dataset) -> Result<(), MetricError> {
        let labels = data
            .labels
            .as_ref()
            .ok_or_else(|| MetricError::InvalidFeatures("dataset has no labels".into()))?;
        self.check(&data.videos)?;
        let adam = AdamConfig {
            alpha: self.config.alpha,
            beta1: 0.9,
            ..AdamConfig::default()
        };
        let mut opt = AdamState::new(adam, &self.store.tensors);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xc1a5);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch.max(1)) {
                let mut g = Graph::new();
                let vars: Vec<Var> = self.store.tensors.iter().map(|t| g.param(t.clone())).collect();
                let x = g.constant(data.batch(chunk));
                let (_, la, lm) = self.forward(&mut g, &vars, x)?;
                let ya: Vec<usize> = chunk.iter().map(|&i| labels[i].appearance).collect();
                let ym: Vec<usize> = chunk.iter().map(|&i| labels[i].motion).collect();
                let ca = g.cross_entropy(la, &ya)?;
                let cm = g.cross_entropy(lm, &ym)?;
                let loss = g.add(ca, cm)?;
                g.backward(loss)?;
                let grads: Vec<Tensor<f32>> = vars
                    .iter()
                    .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
                    .collect();
                let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
                let mut params: Vec<&mut Tensor<f32>> = self.store.tensors.iter_mut().collect();
                opt.step(&mut params, &grad_refs)?;
            }
        }
        Ok(())
    }

    /// Features and per-factor probabilities in evaluation batches.
    fn run(&self, videos: &[Tensor<f32>]) -> Result<(Vec<f64>, Vec<f32>, Vec<f32>), MetricError> {
        self.check(videos)?;
        let (mut feats, mut pa, mut pm) = (Vec::new(), Vec::new(), Vec::new());
        for chunk in videos.chunks(32) {
            let mut g = Graph::new();
            let vars: Vec<Var> = self.store.tensors.iter().map(|t| g.constant(t.clone())).collect();
            let x = g.constant(Tensor::stack(chunk)?);
            let (f, la, lm) = self.forward(&mut g, &vars, x)?;
            feats.extend(g.value(f).data().iter().map(|&v| v as f64));
            pa.extend(softmax_rows(g.value(la).data(), self.appearance_classes));
            pm.extend(softmax_rows(g.value(lm).data(), self.motion_classes));
        }
        Ok((feats, pa, pm))
    }

    /// Appearance, motion and joint accuracy on a labelled set.
    pub fn factor_accuracy(&self, data: &Dataset) -> Result<[f64; 3], MetricError> {
        let labels = data
            .labels
            .as_ref()
            .ok_or_else(|| MetricError::InvalidFeatures("dataset has no labels".into()))?;
        if labels.is_empty() {
            return Err(MetricError::InvalidFeatures("no held-out videos".into()));
        }
        let (_, pa, pm) = self.run(&data.videos)?;
        let argmax = |row: &[f32]| {
            row.iter()
                .enumerate()
                .fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        };
        let (na, nm) = (self.appearance_classes, self.motion_classes);
        let mut hits = [0usize; 3];
        for (i, l) in labels.iter().enumerate() {
            let a = argmax(&pa[i * na..(i + 1) * na]) == l.appearance;
            let m = argmax(&pm[i * nm..(i + 1) * nm]) == l.motion;
            hits[0] += a as usize;
            hits[1] += m as usize;
            hits[2] += (a && m) as usize;
        }
        Ok(hits.map(|h| h as f64 / labels.len() as f64))
    }

    /// Fraction of videos whose appearance and motion labels are both predicted.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64, MetricError> {
        Ok(self.factor_accuracy(data)?[2])
    }

    fn gate(&self) -> Result<(), MetricError> {
        match self.accuracy {
            None => Err(MetricError::Untrained("held-out accuracy was never measured".into())),
            Some(a) if a < self.config.gate => Err(MetricError::Untrained(format!(
                "held-out accuracy {a:.3} is below {:.3}",
                self.config.gate
            ))),
            Some(_) => Ok(()),
        }
    }
}

impl FeatureExtractor for ToyExtractor {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn extract(&self, videos: &[Tensor<f32>]) -> Result<FeatureSet, MetricError> {
        self.gate()?;
        let (f, _, _) = self.run(videos)?;
        FeatureSet::new(videos.len(), self.config.feature_dim, f)
    }

    /// Joint probabilities over `appearance × motion` classes, appearance-major.
    fn classify(&self, videos: &[Tensor<f32>]) -> Result<ClassProbs, MetricError> {
        self.gate()?;
        let (_, pa, pm) = self.run(videos)?;
        let (na, nm) = (self.appearance_classes, self.motion_classes);
        let mut joint = Vec::with_capacity(videos.len() * na * nm);
        for i in 0..videos.len() {
            let ra = &pa[i * na..(i + 1) * na];
            let rm = &pm[i * nm..(i + 1) * nm];
            let row: Vec<f64> = ra
                .iter()
                .flat_map(|&a| rm.iter().map(move |&m| a as f64 * m as f64))
                .collect();
            let s: f64 = row.iter().sum();
            joint.extend(row.into_iter().map(|v| v / s));
        }
        ClassProbs::new(videos.len(), na * nm, joint)
    }
}
