//! The seven networks: latent mappers `F_A`/`F_M`, generator `G`, appearance
//! and motion encoders `E_A`/`E_M*`, and the image/video discriminators
//! `D_I`/`D_V`.

mod layers;
mod model;

pub use layers::{Block, Mlp, Trunk};
pub use model::{Avlae, Bound};

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::flow::FlowConfig;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NetworkId {
    #[serde(rename = "F_A")]
    MapAppearance,
    #[serde(rename = "F_M")]
    MapMotion,
    #[serde(rename = "G")]
    Generator,
    #[serde(rename = "E_A")]
    EncodeAppearance,
    #[serde(rename = "E_M_star")]
    EncodeMotion,
    #[serde(rename = "D_I")]
    DiscImage,
    #[serde(rename = "D_V")]
    DiscVideo,
}

impl NetworkId {
    pub const ALL: [NetworkId; 7] = [
        NetworkId::MapAppearance,
        NetworkId::MapMotion,
        NetworkId::Generator,
        NetworkId::EncodeAppearance,
        NetworkId::EncodeMotion,
        NetworkId::DiscImage,
        NetworkId::DiscVideo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetworkId::MapAppearance => "F_A",
            NetworkId::MapMotion => "F_M",
            NetworkId::Generator => "G",
            NetworkId::EncodeAppearance => "E_A",
            NetworkId::EncodeMotion => "E_M_star",
            NetworkId::DiscImage => "D_I",
            NetworkId::DiscVideo => "D_V",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|id| id.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for NetworkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Anything that can allocate named parameter slots.
pub(crate) trait ParamInit<R: Real> {
    /// Adds a tensor and returns its slot index.
    fn push(&mut self, name: String, t: Tensor<R>) -> usize;

    /// He-uniform weights: `U(−b, b)` with `b = √(6 / fan_in)`.
    fn push_init<G: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut G,
    ) -> usize {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.push(name.into(), Tensor::uniform(shape, bound, rng))
    }

    fn push_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.push(name.into(), Tensor::zeros(shape))
    }
}

impl<R: Real> ParamInit<R> for NetParams<R> {
    fn push(&mut self, name: String, t: Tensor<R>) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

/// Named parameter tensors owned by one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<R> {
    pub id: NetworkId,
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> NetParams<R> {
    pub fn new(id: NetworkId) -> Self {
        Self {
            id,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Euclidean norm of the difference to another snapshot of the same network.
    pub fn delta_norm(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&a, &b)| {
                let d = (a - b).to_f64().unwrap_or(f64::NAN);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Channel width of the generator's last upsampling stage; earlier stages double it.
    pub gen_channels: usize,
    /// Channel width of the first encoder / `D_V` trunk block; later blocks double it.
    pub enc_channels: usize,
    pub disc_hidden: usize,
    pub mapper_layers: usize,
    pub disc_layers: usize,
    pub leaky_slope: f64,
    pub flow: FlowConfig,
    pub use_motion_encoder: bool,
}

impl Default for ModelConfig {
    /// Full-size settings: 128-d latents, 16 frames of 128×128.
    fn default() -> Self {
        Self {
            latent_dim: 128,
            frames: 16,
            height: 128,
            width: 128,
            gen_channels: 16,
            enc_channels: 32,
            disc_hidden: 256,
            mapper_layers: 5,
            disc_layers: 3,
            leaky_slope: 0.2,
            flow: FlowConfig::default(),
            use_motion_encoder: true,
        }
    }
}

impl ModelConfig {
    /// 3×8×32×32 videos, 32-d latents, flow at half resolution.
    pub fn desk() -> Self {
        Self {
            latent_dim: 32,
            frames: 8,
            height: 32,
            width: 32,
            gen_channels: 8,
            enc_channels: 16,
            disc_hidden: 64,
            flow: FlowConfig {
                scale: 2,
                ..FlowConfig::default()
            },
            ..Self::default()
        }
    }

    /// Very small geometry for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            latent_dim: 4,
            frames: 2,
            height: 8,
            width: 8,
            gen_channels: 2,
            enc_channels: 2,
            disc_hidden: 5,
            mapper_layers: 5,
            disc_layers: 3,
            flow: FlowConfig {
                iterations: 3,
                smoothness: 0.5,
                scale: 2,
            },
            ..Self::default()
        }
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [3, self.frames, self.height, self.width]
    }
}
