//! Datasets, the `AVT1` tensor and `AVC1` checkpoint containers, and frame
//! image export/ingest.

mod container;
mod frames;
mod synthetic;

pub use container::{
    decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, load_checkpoint,
    load_video, save_checkpoint, save_video, Checkpoint, ParseIssue, RunState,
};
pub use frames::{
    export_frames, ingest_external, ingest_video, pixel_to_value, save_video_grid, value_to_pixel, IngestOptions, IngestReport,
};
pub use synthetic::{make_synthetic, render, synthetic_labels, Background, ObjectShape, SyntheticSpec, HEADINGS};

use std::path::PathBuf;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("parse error at byte {offset}: {issue}")]
    Parse { offset: usize, issue: ParseIssue },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint has unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("config fingerprint mismatch: checkpoint {found:016x}, config {expected:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Labels {
    pub appearance: usize,
    pub motion: usize,
}

/// Videos `[3, T, H, W]` in `[-1, 1]`, with optional factor labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Tensor<f32>>,
    pub labels: Option<Vec<Labels>>,
    pub appearance_classes: usize,
    pub motion_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn video_shape(&self) -> Option<&[usize]> {
        self.videos.first().map(Tensor::shape)
    }

    /// Stacks the selected videos into a batch `[N, 3, T, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let items: Vec<Tensor<f32>> = indices.iter().map(|&i| self.videos[i].clone()).collect();
        Tensor::stack(&items).expect("dataset videos share one shape")
    }

    /// Splits into the first `n` videos and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Dataset {
            videos: self.videos[r.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[r].to_vec()),
            appearance_classes: self.appearance_classes,
            motion_classes: self.motion_classes,
        };
        (part(0..n), part(n..self.len()))
    }
}
