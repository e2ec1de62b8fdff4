use std::fs;
use std::path::{Path, PathBuf};

use avlae::data::{ingest_external, make_synthetic, Background, Dataset, IngestOptions, SyntheticSpec};
use avlae::flow::FlowConfig;
use avlae::networks::ModelConfig;
use avlae::tensor::AdamConfig;
use avlae::training::{GenLoss, RecNorm, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub gen_channels: usize,
    pub enc_channels: usize,
    pub disc_hidden: usize,
    pub mapper_layers: usize,
    pub disc_layers: usize,
    pub leaky_slope: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d: m.latent_dim,
            frames: m.frames,
            height: m.height,
            width: m.width,
            gen_channels: m.gen_channels,
            enc_channels: m.enc_channels,
            disc_hidden: m.disc_hidden,
            mapper_layers: m.mapper_layers,
            disc_layers: m.disc_layers,
            leaky_slope: m.leaky_slope,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub k1: f64,
    pub k2: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub rec_norm: RecNorm,
    pub gen_loss: GenLoss,
}

impl Default for OptimSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            alpha: t.adam.alpha,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            epsilon: t.adam.epsilon,
            k1: t.k1,
            k2: t.k2,
            batch: t.batch,
            steps: t.steps,
            seed: t.seed,
            rec_norm: t.rec_norm,
            gen_loss: t.gen_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub iterations: usize,
    pub smoothness: f64,
    pub scale: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        let f = FlowConfig::default();
        Self {
            iterations: f.iterations,
            smoothness: f.smoothness,
            scale: f.scale,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub n_videos: usize,
    pub seed: u64,
    pub speeds: Vec<usize>,
    pub object_size: usize,
    pub background: Background,
    /// Root of `<video>/<frame>` folders for the directory source.
    pub path: Option<PathBuf>,
    pub resize_width: Option<usize>,
    pub flip: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            source: DataSource::Synthetic,
            n_videos: s.n_videos,
            seed: s.seed,
            speeds: s.speeds,
            object_size: s.object_size,
            background: s.background,
            path: None,
            resize_width: None,
            flip: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub k1_zero: bool,
    pub k2_zero: bool,
    pub no_motion_encoder: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/avlae"),
            checkpoint_every: 500,
            log_every: 1,
        }
    }
}

/// The JSON run configuration. Missing keys take defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelSection,
    pub optim: OptimSection,
    pub flow: FlowSection,
    pub data: DataSection,
    pub ablation: AblationSection,
    pub io: IoSection,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::User(format!("invalid config {}: {e}", path.display())))
    }

    /// Explicit file, else `config.json` beside the checkpoint, else defaults.
    pub fn resolve(explicit: Option<&Path>, checkpoint: Option<&Path>) -> Result<Self, CliError> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        if let Some(dir) = checkpoint.and_then(Path::parent) {
            let beside = dir.join("config.json");
            if beside.is_file() {
                return Self::load(&beside);
            }
        }
        Ok(Self::default())
    }

    /// Training configuration with the ablation switches applied.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let m = &self.model;
        let o = &self.optim;
        let a = &self.ablation;
        let config = TrainConfig {
            model: ModelConfig {
                latent_dim: m.d,
                frames: m.frames,
                height: m.height,
                width: m.width,
                gen_channels: m.gen_channels,
                enc_channels: m.enc_channels,
                disc_hidden: m.disc_hidden,
                mapper_layers: m.mapper_layers,
                disc_layers: m.disc_layers,
                leaky_slope: m.leaky_slope,
                flow: FlowConfig {
                    iterations: self.flow.iterations,
                    smoothness: self.flow.smoothness,
                    scale: self.flow.scale,
                },
                use_motion_encoder: !a.no_motion_encoder,
            },
            adam: AdamConfig {
                alpha: o.alpha,
                beta1: o.beta1,
                beta2: o.beta2,
                epsilon: o.epsilon,
            },
            // The encoder-free variant also drops both latent reconstructions.
            k1: if a.k1_zero || a.no_motion_encoder { 0.0 } else { o.k1 },
            k2: if a.k2_zero || a.no_motion_encoder { 0.0 } else { o.k2 },
            batch: o.batch,
            steps: o.steps,
            seed: o.seed,
            rec_norm: o.rec_norm,
            gen_loss: o.gen_loss,
            log_every: self.io.log_every,
            checkpoint_every: self.io.checkpoint_every,
        };
        config.validate().map_err(|e| CliError::User(e.to_string()))?;
        config
            .model
            .flow
            .output_shape(m.frames, m.height, m.width)
            .map_err(|e| CliError::User(e.to_string()))?;
        Ok(config)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_videos: self.data.n_videos,
            frames: self.model.frames,
            height: self.model.height,
            width: self.model.width,
            speeds: self.data.speeds.clone(),
            object_size: self.data.object_size,
            background: self.data.background,
            seed: self.data.seed,
            ..SyntheticSpec::default()
        }
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        match self.data.source {
            DataSource::Synthetic => make_synthetic(&self.synthetic_spec()).map_err(|e| CliError::User(e.to_string())),
            DataSource::Directory => {
                let root = self
                    .data
                    .path
                    .as_ref()
                    .ok_or_else(|| CliError::User("data.path is required for the directory source".into()))?;
                if !root.is_dir() {
                    return Err(CliError::User(format!("data directory {} does not exist", root.display())));
                }
                let opts = IngestOptions {
                    resize_width: self.data.resize_width,
                    flip: self.data.flip,
                    seed: self.data.seed,
                    ..IngestOptions::new(self.model.frames, self.model.height, self.model.width)
                };
                let (data, report) = ingest_external(root, &opts).map_err(CliError::from)?;
                if data.is_empty() {
                    return Err(CliError::User(format!(
                        "no usable videos under {} ({} too short)",
                        root.display(),
                        report.skipped_short
                    )));
                }
                Ok(data)
            }
        }
    }
}
