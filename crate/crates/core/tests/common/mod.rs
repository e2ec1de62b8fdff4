//! Fixtures shared by the integration test targets.

#![allow(dead_code)]

use avlae::data::{encode_checkpoint, encode_tensor, Checkpoint, RunState};
use avlae::flow::FlowSeq;
use avlae::gradcheck::{check_network, GradCheckOptions, GradCheckReport};
use avlae::networks::{Avlae, ModelConfig, NetworkId};
use avlae::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_video(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

pub fn sample_checkpoint() -> Checkpoint {
    Checkpoint {
        fingerprint: 0x0123_4567_89ab_cdef,
        step: 42,
        state: RunState {
            rng_seed: [7; 32],
            rng_stream: 3,
            rng_word_pos: 1 << 70,
            sampler_epoch: 2,
            sampler_cursor: 5,
        },
        tensors: vec![
            ("G/seed.weight".into(), random_video(&[4, 2], 9)),
            ("adam/latent/t".into(), Tensor::scalar(3.0)),
        ],
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

/// Twenty malformed containers; each must decode to a structured parse error.
pub fn malformed_corpus() -> Vec<(&'static str, Vec<u8>, bool)> {
    let tensor = encode_tensor(&random_video(&[2, 2], 4));
    let ckpt = encode_checkpoint(&sample_checkpoint());
    // AVC1 fixed header: magic, version, fingerprint, step, seed, stream,
    // word_pos, epoch, cursor, count.
    let header = 4 + 4 + 8 + 8 + 32 + 8 + 16 + 8 + 8 + 4;
    let first_name = header + 4;
    let mut cases: Vec<(&'static str, Vec<u8>, bool)> = Vec::new();
    let t = |name, b| (name, b, true);
    let c = |name, b| (name, b, false);

    cases.push(t("empty tensor file", vec![]));
    cases.push(t("bad tensor magic", {
        let mut b = tensor.clone();
        b[..4].copy_from_slice(b"AVT2");
        b
    }));
    cases.push(t("magic only", b"AVT1".to_vec()));
    cases.push(t("tensor version 2", {
        let mut b = tensor.clone();
        b[4] = 2;
        b
    }));
    cases.push(t("truncated rank", tensor[..10].to_vec()));
    cases.push(t("rank too large", {
        let mut b = tensor[..8].to_vec();
        put_u32(&mut b, 1000);
        b
    }));
    cases.push(t("zero extent", {
        let mut b = tensor.clone();
        b[12..20].copy_from_slice(&0u64.to_le_bytes());
        b
    }));
    cases.push(t("extent overflow", {
        let mut b = tensor[..8].to_vec();
        put_u32(&mut b, 2);
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b
    }));
    cases.push(t("truncated extents", tensor[..16].to_vec()));
    cases.push(t("truncated payload", tensor[..tensor.len() - 1].to_vec()));
    cases.push(t("trailing bytes", {
        let mut b = tensor.clone();
        b.push(0);
        b
    }));
    cases.push(c("empty checkpoint", vec![]));
    cases.push(c("tensor magic in checkpoint", {
        let mut b = ckpt.clone();
        b[..4].copy_from_slice(b"AVT1");
        b
    }));
    cases.push(c("checkpoint version 0", {
        let mut b = ckpt.clone();
        b[4..8].copy_from_slice(&0u32.to_le_bytes());
        b
    }));
    cases.push(c("truncated checkpoint header", ckpt[..header - 3].to_vec()));
    cases.push(c("tensor count beyond data", {
        let mut b = ckpt.clone();
        b[header - 4..header].copy_from_slice(&3u32.to_le_bytes());
        b
    }));
    cases.push(c("name length too long", {
        let mut b = ckpt.clone();
        b[header..header + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        b
    }));
    cases.push(c("name not utf-8", {
        let mut b = ckpt.clone();
        b[first_name] = 0xff;
        b
    }));
    cases.push(c("duplicate name", {
        let c = sample_checkpoint();
        let dup = Checkpoint {
            tensors: vec![c.tensors[0].clone(), c.tensors[0].clone()],
            ..c
        };
        encode_checkpoint(&dup)
    }));
    cases.push(c("inner record bad magic", {
        let mut b = ckpt.clone();
        let at = first_name + "G/seed.weight".len();
        b[at] = b'X';
        b
    }));
    cases
}

/// Gaussian blob (sigma 2) centred at `(cx + t·dx, cy)` in frame `t`, values in [-1, 1].
pub fn blob_video(t_n: usize, size: usize, cx: f64, cy: f64, dx: f64) -> Tensor<f64> {
    let mut data = vec![0.0; 3 * t_n * size * size];
    for c in 0..3 {
        for t in 0..t_n {
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f64 - cx - dx * t as f64).powi(2) + (y as f64 - cy).powi(2);
                    data[((c * t_n + t) * size + y) * size + x] = 2.0 * (-d2 / 8.0).exp() - 1.0;
                }
            }
        }
    }
    Tensor::new(&[3, t_n, size, size], data).unwrap()
}

/// Mean `(u, v)` over pixels where the normalized blob exceeds 0.3 in either frame.
pub fn mean_flow_on_support(video: &Tensor<f64>, flow: &FlowSeq<f64>) -> (f64, f64) {
    let [_, t_n, h, w]: [usize; 4] = video.shape().try_into().unwrap();
    let hw = h * w;
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
    for t in 0..t_n - 1 {
        for p in 0..hw {
            let a = (video.data()[t * hw + p] + 1.0) / 2.0;
            let b = (video.data()[(t + 1) * hw + p] + 1.0) / 2.0;
            if a > 0.3 || b > 0.3 {
                su += flow.u()[t * hw + p];
                sv += flow.v()[t * hw + p];
                n += 1.0;
            }
        }
    }
    (su / n, sv / n)
}

pub fn fd_options(coords: usize) -> GradCheckOptions {
    GradCheckOptions {
        epsilon: 1e-6,
        max_coords: Some(coords),
    }
}

/// Finite-difference reports for the parameters of every network, each read
/// through a fixed random projection of its output.
pub fn network_fd_reports(cfg: &ModelConfig, seed: u64, coords: usize) -> Vec<(NetworkId, GradCheckReport)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.gen_range(1..=2);
    let d = cfg.latent_dim;
    let m = Avlae::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let shape = cfg.video_shape();
    let batch = [n, shape[0], shape[1], shape[2], shape[3]];
    let z_a = Tensor::<f64>::randn(&[n, d], &mut r);
    let z_m = Tensor::<f64>::randn(&[n, d], &mut r);
    let v = Tensor::<f64>::uniform(&batch, 1.0, &mut r);
    let proj_video = Tensor::<f64>::uniform(&batch, 1.0, &mut r);
    let proj_latent = Tensor::<f64>::randn(&[n, d], &mut r);
    let t = r.gen_range(0..cfg.frames);

    NetworkId::ALL
        .into_iter()
        .map(|id| {
            let report = check_network(
                &m,
                id,
                |m, g, b| {
                    let latent = |g: &mut Graph<f64>, w| {
                        let p = g.constant(proj_latent.clone());
                        g.mul(w, p)
                    };
                    match id {
                        NetworkId::MapAppearance => {
                            let z = g.constant(z_a.clone());
                            let w = m.map_appearance(g, b, z)?;
                            latent(g, w)
                        }
                        NetworkId::MapMotion => {
                            let z = g.constant(z_m.clone());
                            let w = m.map_motion(g, b, z)?;
                            latent(g, w)
                        }
                        NetworkId::Generator => {
                            let za = g.constant(z_a.clone());
                            let zm = g.constant(z_m.clone());
                            let x = m.generate(g, b, za, zm)?;
                            let p = g.constant(proj_video.clone());
                            g.mul(x, p)
                        }
                        NetworkId::EncodeAppearance => {
                            let x = g.constant(v.clone());
                            let f = g.slice(x, 2, t, 1)?;
                            let w = m.encode_appearance(g, b, f)?;
                            latent(g, w)
                        }
                        NetworkId::EncodeMotion => {
                            let x = g.constant(v.clone());
                            let w = m.encode_motion(g, b, x)?;
                            latent(g, w)
                        }
                        NetworkId::DiscImage => {
                            let w = g.constant(z_a.clone());
                            m.disc_image(g, b, w)
                        }
                        NetworkId::DiscVideo => {
                            let x = g.constant(v.clone());
                            let w = g.constant(z_m.clone());
                            m.disc_video(g, b, x, Some(w))
                        }
                    }
                },
                fd_options(coords),
                &mut r,
            )
            .unwrap();
            (id, report)
        })
        .collect()
}
