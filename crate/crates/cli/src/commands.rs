use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use avlae::data::{
    ingest_video, load_checkpoint, load_video, make_synthetic, save_checkpoint, save_video, save_video_grid,
    Checkpoint, IngestOptions, SyntheticSpec,
};
use avlae::metrics::{
    disentanglement_probe, fid, inception_score, ExtractorConfig, FeatureExtractor, ProbeConfig, ReadoutScale,
    ToyExtractor,
};
use avlae::networks::Avlae;
use avlae::tensor::Tensor;
use avlae::training::{StepReport, TrainError, TrainObserver, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::RunConfigFile;
use crate::{CliError, EvalArgs, ModelArgs, ReconstructArgs, SampleArgs, SwapArgs, SwapMode, TrainArgs};

/// Generation batch size for value-only forward passes.
const CHUNK: usize = 8;
/// Grid images show at most this many rows.
const GRID_ROWS: usize = 16;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn hex(bytes: impl IntoIterator<Item = u8>) -> String {
    bytes.into_iter().map(|b| format!("{b:02x}")).collect()
}

fn row_bytes(t: &Tensor<f32>, row: usize) -> Vec<u8> {
    t.outer(row).data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

// ------------------------------------------------------------------ train

struct RunWriter {
    dir: PathBuf,
    log: BufWriter<File>,
    log_path: PathBuf,
    fingerprint: u64,
    seed: u64,
}

impl RunWriter {
    fn checkpoint_meta(&self, step: u64) -> Value {
        json!({
            "fingerprint": fingerprint_hex(self.fingerprint),
            "seed": self.seed,
            "step": step,
            "config": "config.json",
        })
    }

    fn write_checkpoint(&self, ckpt: &Checkpoint, stem: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(format!("{stem}.avc"));
        save_checkpoint(&path, ckpt)?;
        write_json(&self.dir.join(format!("{stem}.json")), &self.checkpoint_meta(ckpt.step))?;
        Ok(path)
    }
}

impl TrainObserver for RunWriter {
    fn report(&mut self, r: &StepReport) -> Result<(), TrainError> {
        let line = serde_json::to_string(r).expect("report serializes");
        writeln!(self.log, "{line}").map_err(|e| TrainError::Observer(format!("{}: {e}", self.log_path.display())))?;
        let losses: Vec<String> = r.losses.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        eprintln!("step={} phase={} {}", r.step, r.phase, losses.join(" "));
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        self.log
            .flush()
            .map_err(|e| TrainError::Observer(format!("{}: {e}", self.log_path.display())))?;
        self.write_checkpoint(ckpt, &format!("step_{:06}", ckpt.step))
            .map_err(|e| TrainError::Observer(e.message().to_string()))?;
        Ok(())
    }
}

fn apply_train_flags(file: &mut RunConfigFile, a: &TrainArgs) {
    if let Some(d) = &a.out_dir {
        file.io.out_dir = d.clone();
    }
    if let Some(v) = a.steps {
        file.optim.steps = v;
    }
    if let Some(v) = a.seed {
        file.optim.seed = v;
    }
    if let Some(v) = a.batch {
        file.optim.batch = v;
    }
    if let Some(v) = a.alpha {
        file.optim.alpha = v;
    }
    if let Some(v) = a.log_every {
        file.io.log_every = v;
    }
    if let Some(v) = a.checkpoint_every {
        file.io.checkpoint_every = v;
    }
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut file = match &a.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    apply_train_flags(&mut file, &a);
    let config = file.train_config()?;
    let data = file.dataset()?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, Some(config.fingerprint()), a.force)?;
            Trainer::<f32>::from_checkpoint(config.clone(), &ckpt, a.force)?
        }
        None => Trainer::<f32>::new(config.clone())?,
    };

    let dir = file.io.out_dir.clone();
    create_dir(&dir)?;
    write_json(&dir.join("config.json"), &serde_json::to_value(&file).expect("config serializes"))?;
    let log_path = dir.join("log.jsonl");
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut writer = RunWriter {
        dir: dir.clone(),
        log: BufWriter::new(log_file),
        log_path,
        fingerprint: config.fingerprint(),
        seed: config.seed,
    };

    let remaining = config.steps.saturating_sub(trainer.step());
    let outcome = trainer.run(&data, remaining, &mut writer);
    writer.log.flush().map_err(|e| io_err(&writer.log_path, e))?;
    outcome?;

    let final_path = writer.write_checkpoint(&trainer.to_checkpoint(), "final")?;
    write_json(
        &dir.join("run.json"),
        &json!({
            "fingerprint": fingerprint_hex(config.fingerprint()),
            "seed": config.seed,
            "steps": trainer.step(),
            "videos": data.len(),
            "resumed_from": a.resume,
            "checkpoint": final_path,
        }),
    )?;
    println!("{}", final_path.display());
    Ok(())
}

// --------------------------------------------------------- model commands

struct Loaded {
    model: Avlae<f32>,
    file: RunConfigFile,
    fingerprint: u64,
    step: u64,
}

fn load_model(a: &ModelArgs) -> Result<Loaded, CliError> {
    let file = RunConfigFile::resolve(a.config.as_deref(), Some(&a.checkpoint))?;
    let config = file.train_config()?;
    let fingerprint = config.fingerprint();
    let ckpt = load_checkpoint(&a.checkpoint, Some(fingerprint), a.force)?;
    let step = ckpt.step;
    let model = Trainer::<f32>::from_checkpoint(config, &ckpt, a.force)?.into_model();
    Ok(Loaded {
        model,
        file,
        fingerprint,
        step,
    })
}

fn base_meta(command: &str, a: &ModelArgs, m: &Loaded) -> Value {
    json!({
        "command": command,
        "checkpoint": a.checkpoint,
        "config": a.config,
        "fingerprint": fingerprint_hex(m.fingerprint),
        "train_seed": m.file.optim.seed,
        "checkpoint_step": m.step,
    })
}

fn generate(model: &Avlae<f32>, z_a: &Tensor<f32>, z_m: &Tensor<f32>) -> Result<Vec<Tensor<f32>>, CliError> {
    let n = z_a.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let rows: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let za = Tensor::stack(&rows.iter().map(|&i| z_a.outer(i)).collect::<Vec<_>>())?;
        let zm = Tensor::stack(&rows.iter().map(|&i| z_m.outer(i)).collect::<Vec<_>>())?;
        let x = model.sample(&za, &zm)?;
        out.extend((0..rows.len()).map(|j| x.outer(j)));
    }
    Ok(out)
}

fn check_count(n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::User("--n must be at least 1".into()));
    }
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<(), CliError> {
    check_count(a.n)?;
    let m = load_model(&a.model)?;
    let d = m.model.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let z_a = Tensor::<f32>::randn(&[a.n, d], &mut rng);
    let z_m = Tensor::<f32>::randn(&[a.n, d], &mut rng);
    let videos = generate(&m.model, &z_a, &z_m)?;

    create_dir(&a.out)?;
    let mut files = Vec::new();
    for (i, v) in videos.iter().enumerate() {
        let name = format!("sample_{i:04}.avt");
        save_video(&a.out.join(&name), v)?;
        files.push(name);
    }
    save_video_grid(&videos[..videos.len().min(GRID_ROWS)], &a.out.join("grid.png"))?;
    let mut meta = base_meta("sample", &a.model, &m);
    meta["seed"] = json!(a.seed);
    meta["n"] = json!(a.n);
    meta["videos"] = json!(files);
    write_json(&a.out.join("meta.json"), &meta)?;
    println!("{}", a.out.display());
    Ok(())
}

pub fn swap(a: SwapArgs) -> Result<(), CliError> {
    check_count(a.n)?;
    let m = load_model(&a.model)?;
    let d = m.model.latent_dim();
    let n = a.n;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let shared = Tensor::<f32>::randn(&[n, d], &mut rng);
    let first = Tensor::<f32>::randn(&[n, d], &mut rng);
    let second = Tensor::<f32>::randn(&[n, d], &mut rng);
    // Pair i is (shared_i, first_i) and (shared_i, second_i) in the fixed slot.
    let doubled = |x: &Tensor<f32>, y: &Tensor<f32>| -> Result<Tensor<f32>, CliError> {
        let rows: Vec<Tensor<f32>> = (0..n).flat_map(|i| [x.outer(i), y.outer(i)]).collect();
        Ok(Tensor::stack(&rows)?)
    };
    let fixed = doubled(&shared, &shared)?;
    let varied = doubled(&first, &second)?;
    let (z_a, z_m) = match a.mode {
        SwapMode::FixAppearance => (fixed, varied),
        SwapMode::FixMotion => (varied, fixed),
    };
    let videos = generate(&m.model, &z_a, &z_m)?;

    let fixed_z = match a.mode {
        SwapMode::FixAppearance => &z_a,
        SwapMode::FixMotion => &z_m,
    };
    create_dir(&a.out)?;
    let mut pairs = Vec::new();
    for i in 0..n {
        let names = [format!("pair_{i:04}_a.avt"), format!("pair_{i:04}_b.avt")];
        save_video(&a.out.join(&names[0]), &videos[2 * i])?;
        save_video(&a.out.join(&names[1]), &videos[2 * i + 1])?;
        let bytes_a = row_bytes(fixed_z, 2 * i);
        let bytes_b = row_bytes(fixed_z, 2 * i + 1);
        pairs.push(json!({
            "videos": names,
            "shared_latent_a": hex(bytes_a.iter().copied()),
            "shared_latent_b": hex(bytes_b.iter().copied()),
            "identical": bytes_a == bytes_b,
        }));
    }
    let rows = videos.len().min(GRID_ROWS);
    save_video_grid(&videos[..rows], &a.out.join("grid.png"))?;
    let mut meta = base_meta("swap", &a.model, &m);
    meta["seed"] = json!(a.seed);
    meta["n"] = json!(n);
    meta["mode"] = json!(match a.mode {
        SwapMode::FixAppearance => "fix-appearance",
        SwapMode::FixMotion => "fix-motion",
    });
    meta["shared"] = json!(match a.mode {
        SwapMode::FixAppearance => "z_A",
        SwapMode::FixMotion => "z_M",
    });
    meta["pairs"] = json!(pairs);
    write_json(&a.out.join("meta.json"), &meta)?;
    println!("{}", a.out.display());
    Ok(())
}

fn read_input(path: &Path, file: &RunConfigFile) -> Result<Tensor<f32>, CliError> {
    if path.is_dir() {
        let opts = IngestOptions {
            resize_width: file.data.resize_width,
            ..IngestOptions::new(file.model.frames, file.model.height, file.model.width)
        };
        Ok(ingest_video(path, &opts)?)
    } else if path.is_file() {
        Ok(load_video(path)?)
    } else {
        Err(CliError::User(format!("input {} does not exist", path.display())))
    }
}

pub fn reconstruct(a: ReconstructArgs) -> Result<(), CliError> {
    let m = load_model(&a.model)?;
    let video = read_input(&a.input, &m.file)?;
    let expected = m.model.config().video_shape();
    if video.shape() != expected {
        return Err(CliError::User(format!(
            "input video has shape {:?}, model expects {expected:?}",
            video.shape()
        )));
    }
    let t_n = expected[1];
    if a.frame == 0 || a.frame > t_n {
        return Err(CliError::User(format!("--frame {} is out of range 1..={t_n}", a.frame)));
    }
    let batch = Tensor::stack(std::slice::from_ref(&video))?;
    let output = m.model.reconstruct(&batch, &[a.frame - 1])?.outer(0);
    let l1 = video
        .data()
        .iter()
        .zip(output.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / video.data().len() as f64;

    create_dir(&a.out)?;
    save_video(&a.out.join("input.avt"), &video)?;
    save_video(&a.out.join("output.avt"), &output)?;
    save_video_grid(&[video, output], &a.out.join("grid.png"))?;
    let mut meta = base_meta("reconstruct", &a.model, &m);
    meta["input"] = json!(a.input);
    meta["frame"] = json!(a.frame);
    meta["mean_abs_error"] = json!(l1);
    write_json(&a.out.join("meta.json"), &meta)?;
    println!("{}", a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    check_count(a.n)?;
    if a.n < 2 {
        return Err(CliError::User("--n must be at least 2 for FID".into()));
    }
    let m = load_model(&a.model)?;
    let real = m.file.dataset()?;
    let d = m.model.latent_dim();
    let shape = m.model.config().video_shape();

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let z_a = Tensor::<f32>::randn(&[a.n, d], &mut rng);
    let z_m = Tensor::<f32>::randn(&[a.n, d], &mut rng);
    let generated = generate(&m.model, &z_a, &z_m)?;
    let noise: Vec<Tensor<f32>> = (0..a.n).map(|_| Tensor::uniform(&shape, 1.0, &mut rng)).collect();
    let real_videos = &real.videos[..real.len().min(a.n)];

    let scale = ReadoutScale::from_dataset(&real, 256);
    let probe = disentanglement_probe(
        &m.model,
        &ProbeConfig {
            n_pairs: a.probe_pairs,
            seed: a.seed,
        },
        &scale,
    )?;

    // The extractor always learns from labelled synthetic videos of the model's geometry.
    let labelled = make_synthetic(&SyntheticSpec {
        n_videos: a.extractor_videos,
        frames: shape[1],
        height: shape[2],
        width: shape[3],
        seed: m.file.data.seed.wrapping_add(1),
        ..m.file.synthetic_spec()
    })
    .map_err(|e| CliError::User(e.to_string()))?;
    let extractor = ToyExtractor::train_gated(ExtractorConfig::default(), &labelled)?;

    let mut report = json!({
        "fingerprint": fingerprint_hex(m.fingerprint),
        "checkpoint": a.model.checkpoint,
        "checkpoint_step": m.step,
        "seed": a.seed,
        "n": a.n,
        "extractor_accuracy": extractor.accuracy(),
        "extractor_gate": extractor.passed_gate(),
        "probe": probe,
        "readout_scale": scale,
        "fid_generated": null,
        "fid_noise": null,
        "inception_score": null,
    });
    if !extractor.passed_gate() {
        println!("{}", serde_json::to_string_pretty(&report).expect("json value serializes"));
        return Err(CliError::Runtime(format!(
            "feature extractor failed its accuracy gate ({:?}); FID and IS withheld",
            extractor.accuracy()
        )));
    }
    let real_features = extractor.extract(real_videos)?;
    report["fid_generated"] = json!(fid(&real_features, &extractor.extract(&generated)?)?);
    report["fid_noise"] = json!(fid(&real_features, &extractor.extract(&noise)?)?);
    report["inception_score"] = json!(inception_score(&extractor.classify(&generated)?));
    println!("{}", serde_json::to_string_pretty(&report).expect("json value serializes"));
    Ok(())
}
