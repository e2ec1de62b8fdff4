use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset};
use crate::tensor::Tensor;

/// `[-1, 1] → [0, 255]` by `round((v + 1) · 127.5)`, saturating.
pub fn value_to_pixel(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn pixel_to_value(p: u8) -> f32 {
    (p as f64 / 127.5 - 1.0) as f32
}

/// Writes each frame of a `[3, T, H, W]` video as `frame_NNN.png` under `dir`.
pub fn export_frames(video: &Tensor<f32>, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let &[3, t_n, h, w] = video.shape() else {
        return Err(DataError::Invalid(format!(
            "expected a [3, T, H, W] video, got {:?}",
            video.shape()
        )));
    };
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let d = video.data();
    let mut paths = Vec::with_capacity(t_n);
    for t in 0..t_n {
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| d[((c * t_n + t) * h + y as usize) * w + x as usize];
            Rgb([value_to_pixel(at(0)), value_to_pixel(at(1)), value_to_pixel(at(2))])
        });
        let path = dir.join(format!("frame_{t:03}.png"));
        img.save(&path).map_err(|source| DataError::Image {
            path: path.clone(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes one PNG with a row per video and a column per frame.
pub fn save_video_grid(videos: &[Tensor<f32>], path: &Path) -> Result<(), DataError> {
    let Some(first) = videos.first() else {
        return Err(DataError::Invalid("no videos to draw".into()));
    };
    let &[3, t_n, h, w] = first.shape() else {
        return Err(DataError::Invalid(format!(
            "expected [3, T, H, W] videos, got {:?}",
            first.shape()
        )));
    };
    if let Some(v) = videos.iter().find(|v| v.shape() != first.shape()) {
        return Err(DataError::Invalid(format!(
            "grid videos differ in shape: {:?} vs {:?}",
            v.shape(),
            first.shape()
        )));
    }
    let img: RgbImage = ImageBuffer::from_fn((t_n * w) as u32, (videos.len() * h) as u32, |x, y| {
        let (row, yy) = (y as usize / h, y as usize % h);
        let (t, xx) = (x as usize / w, x as usize % w);
        let d = videos[row].data();
        let at = |c: usize| value_to_pixel(d[((c * t_n + t) * h + yy) * w + xx]);
        Rgb([at(0), at(1), at(2)])
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    img.save(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Width the frames are resized to (at `height` rows) before the center crop.
    /// Defaults to the 170:128 aspect.
    pub resize_width: Option<usize>,
    pub flip: bool,
    /// Seeds the per-video window offset.
    pub seed: u64,
}

impl IngestOptions {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            resize_width: None,
            flip: false,
            seed: 0,
        }
    }

    fn resized_width(&self) -> usize {
        self.resize_width
            .unwrap_or_else(|| (self.height as f64 * 170.0 / 128.0).round() as usize)
            .max(self.width)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub loaded: usize,
    /// Videos with fewer than `T` frames.
    pub skipped_short: usize,
    pub names: Vec<String>,
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn load_frame(path: &Path, opts: &IngestOptions) -> Result<RgbImage, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let rw = opts.resized_width();
    let resized = imageops::resize(&img, rw as u32, opts.height as u32, FilterType::Triangle);
    let x0 = (rw - opts.width) / 2;
    let mut crop = imageops::crop_imm(&resized, x0 as u32, 0, opts.width as u32, opts.height as u32)
        .to_image();
    if opts.flip {
        imageops::flip_horizontal_in_place(&mut crop);
    }
    Ok(crop)
}

fn read_window(files: &[PathBuf], opts: &IngestOptions) -> Result<Tensor<f32>, DataError> {
    let (t_n, h, w) = (files.len(), opts.height, opts.width);
    let mut data = vec![0.0f32; 3 * t_n * h * w];
    for (t, path) in files.iter().enumerate() {
        let img = load_frame(path, opts)?;
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[((c * t_n + t) * h + y as usize) * w + x as usize] = pixel_to_value(px[c]);
            }
        }
    }
    Ok(Tensor::new(&[3, t_n, h, w], data).expect("shape matches data"))
}

fn check_geometry(opts: &IngestOptions) -> Result<(), DataError> {
    if opts.frames == 0 || opts.height == 0 || opts.width == 0 {
        return Err(DataError::Invalid("target geometry must be positive".into()));
    }
    Ok(())
}

/// Reads the first `T` frame images of one folder as a `[3, T, H, W]` video,
/// with the same resize, crop and flip as [`ingest_external`].
pub fn ingest_video(dir: &Path, opts: &IngestOptions) -> Result<Tensor<f32>, DataError> {
    check_geometry(opts)?;
    let files = sorted_entries(dir, false)?;
    if files.len() < opts.frames {
        return Err(DataError::Invalid(format!(
            "{} holds {} frames, need {}",
            dir.display(),
            files.len(),
            opts.frames
        )));
    }
    read_window(&files[..opts.frames], opts)
}

/// Reads `root/<video>/<frame image>` folders into `[3, T, H, W]` videos.
///
/// Frames are resized to `resize_width × height`, center-cropped to the
/// target width and mapped to `[-1, 1]`. Each video contributes the `T`
/// frames after a seeded random offset.
pub fn ingest_external(root: &Path, opts: &IngestOptions) -> Result<(Dataset, IngestReport), DataError> {
    check_geometry(opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = IngestReport::default();
    let mut videos = Vec::new();
    let t_n = opts.frames;
    for dir in sorted_entries(root, true)? {
        let files = sorted_entries(&dir, false)?;
        if files.len() < t_n {
            report.skipped_short += 1;
            continue;
        }
        let offset = rng.gen_range(0..=files.len() - t_n);
        videos.push(read_window(&files[offset..offset + t_n], opts)?);
        report.loaded += 1;
        report
            .names
            .push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    Ok((
        Dataset {
            videos,
            labels: None,
            appearance_classes: 0,
            motion_classes: 0,
        },
        report,
    ))
}
