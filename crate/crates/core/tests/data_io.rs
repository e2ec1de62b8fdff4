use std::fs;
use std::path::Path;

mod common;

use avlae::data::*;
use avlae::flow::{estimate_flow, FlowConfig};
use avlae::tensor::Tensor;
use common::{malformed_corpus, random_video, sample_checkpoint};
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn parse_offset(e: DataError) -> (usize, ParseIssue) {
    match e {
        DataError::Parse { offset, issue } => (offset, issue),
        other => panic!("expected a parse error, got {other}"),
    }
}

// ---------------------------------------------------------------- AVT1

#[test]
fn video_file_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.avt");
    let v = random_video(&[3, 4, 6, 5], 3);
    save_video(&path, &v).unwrap();
    let back = load_video(&path).unwrap();
    assert_eq!(back.shape(), v.shape());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&v));
}

proptest! {
    #[test]
    fn tensor_records_round_trip(shape in prop::collection::vec(1usize..5, 0..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Tensor<f32> = if shape.is_empty() {
            Tensor::scalar(1.5)
        } else {
            Tensor::randn(&shape, &mut rng)
        };
        let bytes = encode_tensor(&t);
        prop_assert_eq!(bytes.len(), 12 + 8 * shape.len() + 4 * t.len());
        let back = decode_tensor(&bytes).unwrap();
        prop_assert_eq!(encode_tensor(&back), bytes);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_tensor(&bytes);
        let _ = decode_checkpoint(&bytes);
    }

    #[test]
    fn corrupted_checkpoints_never_panic(pos in 0usize..400, byte in any::<u8>(), cut in 0usize..400) {
        let mut bytes = encode_checkpoint(&sample_checkpoint());
        let n = bytes.len();
        bytes[pos % n] = byte;
        bytes.truncate(n - cut % n);
        let _ = decode_checkpoint(&bytes);
    }
}

#[test]
fn truncated_payload_reports_offset() {
    let v = random_video(&[2, 3], 1);
    let bytes = encode_tensor(&v);
    let cut = &bytes[..bytes.len() - 2];
    let (offset, issue) = parse_offset(decode_tensor(cut).unwrap_err());
    // header: magic 4 + version 4 + rank 4 + two extents 16
    assert_eq!(offset, 28);
    assert_eq!(
        issue,
        ParseIssue::Truncated {
            needed: 24,
            available: 22
        }
    );
}

#[test]
fn video_values_outside_range_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.avt");
    let t = Tensor::new(&[3], vec![0.0f32, 2.0, 0.5]).unwrap();
    fs::write(&path, encode_tensor(&t)).unwrap();
    let (offset, issue) = parse_offset(load_video(&path).unwrap_err());
    assert_eq!(issue, ParseIssue::OutOfRange { index: 1 });
    assert_eq!(offset, 20 + 4);
    assert!(matches!(save_video(&path, &t), Err(DataError::Invalid(_))));
}

// ---------------------------------------------------------------- AVC1

#[test]
fn checkpoint_save_load_save_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.avc"), dir.path().join("b.avc"));
    let c = sample_checkpoint();
    save_checkpoint(&a, &c).unwrap();
    let loaded = load_checkpoint(&a, Some(c.fingerprint), false).unwrap();
    assert_eq!(loaded, c);
    save_checkpoint(&b, &loaded).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn checkpoint_fingerprint_mismatch_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.avc");
    save_checkpoint(&p, &sample_checkpoint()).unwrap();
    assert!(matches!(
        load_checkpoint(&p, Some(1), false),
        Err(DataError::Fingerprint { expected: 1, .. })
    ));
    assert!(load_checkpoint(&p, Some(1), true).is_ok());
}

#[test]
fn missing_tensor_is_named() {
    let c = sample_checkpoint();
    match c.get("D_V/fc0.weight") {
        Err(DataError::MissingTensor(n)) => assert_eq!(n, "D_V/fc0.weight"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_corpus_yields_structured_errors() {
    let cases = malformed_corpus();
    assert_eq!(cases.len(), 20);
    for (name, bytes, is_tensor) in cases {
        let err = if is_tensor {
            decode_tensor(&bytes).map(|_| ())
        } else {
            decode_checkpoint(&bytes).map(|_| ())
        };
        match err {
            Err(DataError::Parse { offset, .. }) => assert!(offset <= bytes.len(), "{name}: offset {offset}"),
            other => panic!("{name}: expected a parse error, got {other:?}"),
        }
    }
}

#[test]
fn corpus_errors_name_the_failure() {
    let by_name: std::collections::HashMap<_, _> = malformed_corpus()
        .into_iter()
        .map(|(n, b, t)| (n, (b, t)))
        .collect();
    let issue = |n: &str| {
        let (b, t) = &by_name[n];
        let e = if *t {
            decode_tensor(b).unwrap_err()
        } else {
            decode_checkpoint(b).unwrap_err()
        };
        parse_offset(e)
    };
    assert!(matches!(issue("bad tensor magic"), (0, ParseIssue::BadMagic { .. })));
    assert_eq!(issue("tensor version 2"), (4, ParseIssue::UnsupportedVersion(2)));
    assert_eq!(issue("rank too large"), (8, ParseIssue::RankTooLarge(1000)));
    assert_eq!(issue("zero extent"), (12, ParseIssue::ZeroExtent { dim: 0 }));
    assert_eq!(issue("extent overflow").1, ParseIssue::SizeOverflow);
    assert_eq!(issue("trailing bytes").1, ParseIssue::TrailingBytes(1));
    assert!(matches!(issue("duplicate name").1, ParseIssue::DuplicateName(_)));
    assert_eq!(issue("name not utf-8").1, ParseIssue::NameNotUtf8);
}

// ---------------------------------------------------------------- frames

#[test]
fn export_maps_values_to_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = Tensor::<f32>::zeros(&[3, 1, 1, 3]);
    v.data_mut().copy_from_slice(&[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
    let paths = export_frames(&v, dir.path()).unwrap();
    assert_eq!(paths.len(), 1);
    let img = image::open(&paths[0]).unwrap().to_rgb8();
    assert_eq!(img.get_pixel(0, 0), &Rgb([0, 0, 0]));
    assert_eq!(img.get_pixel(1, 0), &Rgb([128, 128, 128]));
    assert_eq!(img.get_pixel(2, 0), &Rgb([255, 255, 255]));
}

#[test]
fn export_then_ingest_is_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_videos: 2,
        background: Background::SlowDrift,
        ..Default::default()
    };
    let ds = make_synthetic(&spec).unwrap();
    for (i, v) in ds.videos.iter().enumerate() {
        export_frames(v, &dir.path().join(format!("vid{i}"))).unwrap();
    }
    let opts = IngestOptions {
        resize_width: Some(32),
        ..IngestOptions::new(8, 32, 32)
    };
    let (back, report) = ingest_external(dir.path(), &opts).unwrap();
    assert_eq!(report.loaded, 2);
    for (a, b) in ds.videos.iter().zip(&back.videos) {
        assert!(a.max_abs_diff(b) <= 1.0 / 127.5 + 1e-6, "{}", a.max_abs_diff(b));
    }
}

fn write_frames(dir: &Path, n: usize, w: u32, h: u32) {
    fs::create_dir_all(dir).unwrap();
    for t in 0..n {
        let img = RgbImage::from_fn(w, h, |x, _| Rgb([x as u8, 255, 0]));
        img.save(dir.join(format!("{t:04}.png"))).unwrap();
    }
}

#[test]
fn ingest_resizes_then_center_crops() {
    let dir = tempfile::tempdir().unwrap();
    write_frames(&dir.path().join("a"), 4, 170, 128);
    let (ds, report) = ingest_external(dir.path(), &IngestOptions::new(4, 128, 128)).unwrap();
    assert_eq!(report.loaded, 1);
    let v = &ds.videos[0];
    assert_eq!(v.shape(), &[3, 4, 128, 128]);
    // 170 → 128 crop starts at column 21.
    let red0 = v.data()[0];
    assert!((red0 - pixel_to_value(21)).abs() <= 1.0 / 127.5 + 1e-6, "{red0}");
    let green = v.data()[4 * 128 * 128];
    assert_eq!(green, 1.0);
    let blue = v.data()[2 * 4 * 128 * 128];
    assert_eq!(blue, -1.0);
}

#[test]
fn ingest_skips_short_videos_and_flips() {
    let dir = tempfile::tempdir().unwrap();
    write_frames(&dir.path().join("long"), 6, 16, 16);
    write_frames(&dir.path().join("short"), 2, 16, 16);
    let opts = IngestOptions {
        resize_width: Some(16),
        flip: true,
        ..IngestOptions::new(4, 16, 16)
    };
    let (ds, report) = ingest_external(dir.path(), &opts).unwrap();
    assert_eq!(report.loaded, 1);
    assert_eq!(report.skipped_short, 1);
    assert_eq!(report.names, vec!["long".to_string()]);
    // Flipped: the first column holds the last source column.
    assert!((ds.videos[0].data()[0] - pixel_to_value(15)).abs() < 1e-6);
}

// ---------------------------------------------------------------- synthetic

#[test]
fn speed_zero_videos_are_static_with_zero_flow() {
    let spec = SyntheticSpec {
        n_videos: 16,
        speeds: vec![0],
        ..Default::default()
    };
    let ds = make_synthetic(&spec).unwrap();
    for v in &ds.videos {
        let d = v.data();
        let plane = 8 * 32 * 32;
        for c in 0..3 {
            for t in 1..8 {
                let f = |t: usize| &d[c * plane + t * 1024..c * plane + (t + 1) * 1024];
                assert_eq!(f(t), f(0));
            }
        }
        let flow = estimate_flow(&v.cast::<f64>(), &FlowConfig { scale: 2, ..FlowConfig::default() }).unwrap();
        assert!(flow.data.data().iter().all(|&x| x == 0.0));
    }
}

/// Mask of pixels differing from the known solid background.
fn mask_centroid(v: &Tensor<f32>, t: usize, bg: [f32; 3]) -> (f64, f64) {
    let (tn, h, w) = (v.shape()[1], v.shape()[2], v.shape()[3]);
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let differs = (0..3).any(|c| v.data()[((c * tn + t) * h + y) * w + x] != bg[c]);
            if differs {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    (sx / n, sy / n)
}

#[test]
fn eastward_objects_move_one_pixel_per_frame() {
    let spec = SyntheticSpec::default();
    for shape in [ObjectShape::Square, ObjectShape::Circle, ObjectShape::Cross] {
        let v = render(&spec, shape, spec.palette[0], HEADINGS[0], 1, (3, 9));
        let xs: Vec<(f64, f64)> = (0..8).map(|t| mask_centroid(&v, t, spec.background_color)).collect();
        for pair in xs.windows(2) {
            assert!((pair[1].0 - pair[0].0 - 1.0).abs() < 0.05);
            assert!((pair[1].1 - pair[0].1).abs() < 0.05);
        }
    }
}

#[test]
fn labels_are_nearly_independent() {
    let spec = SyntheticSpec {
        n_videos: 10_000,
        ..Default::default()
    };
    let labels = synthetic_labels(&spec).unwrap();
    let (na, nm) = (spec.appearance_classes(), spec.motion_classes());
    let mut joint = vec![0.0; na * nm];
    for l in &labels {
        joint[l.appearance * nm + l.motion] += 1.0;
    }
    let n = labels.len() as f64;
    let pa: Vec<f64> = (0..na).map(|a| (0..nm).map(|m| joint[a * nm + m]).sum::<f64>() / n).collect();
    let pm: Vec<f64> = (0..nm).map(|m| (0..na).map(|a| joint[a * nm + m]).sum::<f64>() / n).collect();
    let mut mi = 0.0;
    for a in 0..na {
        for m in 0..nm {
            let p = joint[a * nm + m] / n;
            if p > 0.0 {
                mi += p * (p / (pa[a] * pm[m])).ln();
            }
        }
    }
    assert!(mi < 0.01, "mutual information {mi}");
}

#[test]
fn labels_match_rendered_dataset() {
    let spec = SyntheticSpec {
        n_videos: 50,
        ..Default::default()
    };
    let ds = make_synthetic(&spec).unwrap();
    assert_eq!(ds.labels.unwrap(), synthetic_labels(&spec).unwrap());
}
