//! Synthetic videos with independent appearance (shape × color) and motion
//! (heading × speed) factors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Labels};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Square,
    Circle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Solid,
    /// Horizontal gradient whose phase shifts slowly over time.
    SlowDrift,
}

/// The eight compass headings as unit steps `(dx, dy)`, clockwise from east
/// with `y` pointing down.
pub const HEADINGS: [(i32, i32); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ObjectShape>,
    /// RGB colors in `[-1, 1]`.
    pub palette: Vec<[f32; 3]>,
    /// Pixels per frame along each axis of the heading.
    pub speeds: Vec<usize>,
    pub object_size: usize,
    pub background: Background,
    pub background_color: [f32; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 1024,
            frames: 8,
            height: 32,
            width: 32,
            shapes: vec![ObjectShape::Square, ObjectShape::Circle, ObjectShape::Cross],
            palette: vec![
                [1.0, -0.6, -0.6],
                [-0.6, 1.0, -0.6],
                [-0.6, -0.6, 1.0],
                [1.0, 1.0, -0.6],
            ],
            speeds: vec![1, 2],
            object_size: 7,
            background: Background::Solid,
            background_color: [-0.8, -0.8, -0.8],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn appearance_classes(&self) -> usize {
        self.shapes.len() * self.palette.len()
    }

    pub fn motion_classes(&self) -> usize {
        HEADINGS.len() * self.speeds.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.n_videos == 0 || self.frames < 2 {
            return bad("need at least one video of two frames".into());
        }
        if self.shapes.is_empty() || self.palette.is_empty() || self.speeds.is_empty() {
            return bad("shapes, palette and speeds must be non-empty".into());
        }
        let max_speed = *self.speeds.iter().max().expect("non-empty");
        let span = self.object_size + max_speed * (self.frames - 1);
        if self.object_size == 0 || span > self.height || span > self.width {
            return bad(format!(
                "object of size {} moving {} px/frame for {} frames does not fit {}x{}",
                self.object_size, max_speed, self.frames, self.height, self.width
            ));
        }
        Ok(())
    }
}

fn covers(shape: ObjectShape, size: usize, dy: usize, dx: usize) -> bool {
    let c = (size as f32 - 1.0) / 2.0;
    let (fy, fx) = (dy as f32 - c, dx as f32 - c);
    match shape {
        ObjectShape::Square => true,
        ObjectShape::Circle => fx * fx + fy * fy <= (c + 0.5) * (c + 0.5),
        ObjectShape::Cross => {
            let arm = (size as f32 / 6.0).max(0.5);
            fx.abs() <= arm || fy.abs() <= arm
        }
    }
}

fn background_value(spec: &SyntheticSpec, c: usize, t: usize, x: usize) -> f32 {
    let base = spec.background_color[c];
    match spec.background {
        Background::Solid => base,
        Background::SlowDrift => {
            let phase = (x as f32 + 0.25 * t as f32) / spec.width as f32;
            base + 0.15 * (std::f32::consts::TAU * phase).sin()
        }
    }
}

/// Renders one video `[3, T, H, W]` for the given factor indices and start corner.
#[allow(clippy::too_many_arguments)]
pub fn render(
    spec: &SyntheticSpec,
    shape: ObjectShape,
    color: [f32; 3],
    heading: (i32, i32),
    speed: usize,
    start: (usize, usize),
) -> Tensor<f32> {
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let mut data = vec![0.0f32; 3 * t_n * h * w];
    for t in 0..t_n {
        let ox = start.0 as i64 + heading.0 as i64 * (speed * t) as i64;
        let oy = start.1 as i64 + heading.1 as i64 * (speed * t) as i64;
        for c in 0..3 {
            let plane = &mut data[(c * t_n + t) * h * w..(c * t_n + t + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = background_value(spec, c, t, x);
                }
            }
            for dy in 0..spec.object_size {
                for dx in 0..spec.object_size {
                    if covers(shape, spec.object_size, dy, dx) {
                        let (y, x) = ((oy + dy as i64) as usize, (ox + dx as i64) as usize);
                        plane[y * w + x] = color[c];
                    }
                }
            }
        }
    }
    Tensor::new(&[3, t_n, h, w], data).expect("shape matches data")
}

fn assign_labels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let (na, nm) = (spec.appearance_classes(), spec.motion_classes());
    let grid: Vec<(usize, usize)> = (0..na).flat_map(|a| (0..nm).map(move |m| (a, m))).collect();
    let mut cells = Vec::with_capacity(spec.n_videos + grid.len());
    while cells.len() < spec.n_videos {
        let mut block = grid.clone();
        block.shuffle(rng);
        cells.extend(block);
    }
    cells.truncate(spec.n_videos);
    cells
}

/// The labels [`make_synthetic`] assigns, without rendering any video.
pub fn synthetic_labels(spec: &SyntheticSpec) -> Result<Vec<Labels>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(assign_labels(spec, &mut rng)
        .into_iter()
        .map(|(appearance, motion)| Labels { appearance, motion })
        .collect())
}

/// Deterministic dataset: labels cycle through shuffled copies of the full
/// appearance × motion grid, so both factors are uniform and independent.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (na, nm) = (spec.appearance_classes(), spec.motion_classes());
    let cells = assign_labels(spec, &mut rng);

    let mut videos = Vec::with_capacity(spec.n_videos);
    let mut labels = Vec::with_capacity(spec.n_videos);
    for (a, m) in cells {
        let shape = spec.shapes[a / spec.palette.len()];
        let color = spec.palette[a % spec.palette.len()];
        let heading = HEADINGS[m / spec.speeds.len()];
        let speed = spec.speeds[m % spec.speeds.len()];
        let travel = speed * (spec.frames - 1);
        let free_x = spec.width - spec.object_size - travel * heading.0.unsigned_abs() as usize;
        let free_y = spec.height - spec.object_size - travel * heading.1.unsigned_abs() as usize;
        let mut x0 = rng.gen_range(0..=free_x);
        let mut y0 = rng.gen_range(0..=free_y);
        if heading.0 < 0 {
            x0 += travel;
        }
        if heading.1 < 0 {
            y0 += travel;
        }
        videos.push(render(spec, shape, color, heading, speed, (x0, y0)));
        labels.push(Labels {
            appearance: a,
            motion: m,
        });
    }
    Ok(Dataset {
        videos,
        labels: Some(labels),
        appearance_classes: na,
        motion_classes: nm,
    })
}
