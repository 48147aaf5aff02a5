use finenet_core::face_prior::LandmarkSet;
use finenet_core::metrics::psnr;
use finenet_core::{Frame, Shape, Tensor};
use finenet_data::blur::MAX_KERNEL_SIZE;
use finenet_data::dataset::{synthesize, write_dataset, Split};
use finenet_data::window::window_indices;
use finenet_data::*;
use proptest::prelude::*;

fn textured(h: usize, w: usize) -> Frame {
    Frame::new(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        0.5 + 0.2 * ((x as f64 * 0.9 + c as f64).sin() + (y as f64 * 0.7 + 0.3 * x as f64).cos())
    }))
    .unwrap()
}

fn small_config(kind: MotionKind) -> DataConfig {
    DataConfig {
        seed: 7,
        videos: 4,
        synth: SynthConfig { kind, frames: 6, height: 16, width: 16, landmarks: 5, ..SynthConfig::default() },
        heatmap_sigma: 1.0,
        ..DataConfig::default()
    }
}

#[test]
fn kernels_are_bit_identical_per_seed() {
    let cfg = BlurConfig::default();
    for seed in 0..20 {
        assert_eq!(sample_blur_kernel(seed, &cfg).unwrap(), sample_blur_kernel(seed, &cfg).unwrap());
    }
    assert_ne!(sample_blur_kernel(1, &cfg).unwrap(), sample_blur_kernel(2, &cfg).unwrap());
}

#[test]
fn delta_kernel_without_noise_is_identity() {
    let f = textured(9, 11);
    assert_eq!(degrade(&f, &BlurKernel::delta(), 0.0, 3).unwrap(), f);
}

#[test]
fn constant_image_stays_constant() {
    let f = Frame::filled(12, 10, 0.37).unwrap();
    let cfg = BlurConfig { max_length: 20.0, max_smoothing: 1.5, ..BlurConfig::default() };
    for seed in 0..10 {
        let k = sample_blur_kernel(seed, &cfg).unwrap();
        let out = degrade(&f, &k, 0.0, seed).unwrap();
        assert!(out.tensor().data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }
}

#[test]
fn psnr_falls_with_kernel_length() {
    // White noise: no periodic structure for a long kernel to line up with.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let f = Frame::new(Tensor::from_fn(Shape::new(1, 3, 48, 48), |_, _, _, _| rng.random_range(0.0..1.0))).unwrap();
    let base = BlurConfig { min_length: 4.0, max_length: 4.0, max_smoothing: 0.0, segments: 1, ..BlurConfig::default() };
    let mut last = f64::INFINITY;
    for step in 1..=12 {
        let cfg = BlurConfig { strength: step as f64 * 0.5, ..base.clone() };
        let k = sample_blur_kernel(11, &cfg).unwrap();
        let p = psnr(&degrade(&f, &k, 0.0, 0).unwrap(), &f).unwrap();
        assert!(p < last, "length {} gave {p} dB after {last} dB", 2 * step);
        last = p;
    }
}

#[test]
fn noise_is_seeded() {
    let f = textured(8, 8);
    let k = sample_blur_kernel(1, &BlurConfig::default()).unwrap();
    assert_eq!(degrade(&f, &k, 0.05, 9).unwrap(), degrade(&f, &k, 0.05, 9).unwrap());
    assert_ne!(degrade(&f, &k, 0.05, 9).unwrap(), degrade(&f, &k, 0.05, 10).unwrap());
}

#[test]
fn translation_shifts_frames_exactly() {
    let cfg = SynthConfig { frames: 9, height: 20, width: 24, landmarks: 68, ..SynthConfig::default() };
    let v = synth_video(&Motion::Translate { dy: 0.0, dx: 1.0 }, &cfg, 5).unwrap();
    let f0 = v.frames[0].tensor();
    for (k, frame) in v.frames.iter().enumerate() {
        let t = frame.tensor();
        for c in 0..3 {
            for y in 0..cfg.height {
                for x in k..cfg.width {
                    assert_eq!(t.at(0, c, y, x), f0.at(0, c, y, x - k), "frame {k} at ({y}, {x})");
                }
            }
        }
        for (p, p0) in v.landmarks[k].points().iter().zip(v.landmarks[0].points()) {
            assert!((p.0 - p0.0 - k as f64).abs() < 1e-9 && (p.1 - p0.1).abs() < 1e-9);
        }
    }
}

#[test]
fn rotation_keeps_landmark_radii() {
    let cfg = SynthConfig { frames: 6, landmarks: 20, ..SynthConfig::default() };
    let v = synth_video(&Motion::Rotate { degrees: 4.0 }, &cfg, 2).unwrap();
    // Jaw points are rigid: their spacing is fixed and the chord turns with the face.
    let chord = |l: &LandmarkSet| (l.points()[8].0 - l.points()[0].0, l.points()[8].1 - l.points()[0].1);
    let (a0, b0) = chord(&v.landmarks[0]);
    for k in 1..6 {
        let (a, b) = chord(&v.landmarks[k]);
        assert!((a.hypot(b) - a0.hypot(b0)).abs() < 1e-9);
        let turn = (b.atan2(a) - b0.atan2(a0)).to_degrees();
        let turn = (turn + 540.0).rem_euclid(360.0) - 180.0;
        assert!((turn - 4.0 * k as f64).abs() < 1e-6, "frame {k} turned {turn}");
    }
}

#[test]
fn face_motion_is_bounded_by_config() {
    let cfg = SynthConfig { frames: 20, max_speed: 1.0, max_rotation: 2.0, landmarks: 68, ..SynthConfig::default() };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let motion = Motion::sample(MotionKind::LandmarkFace, &cfg, &mut rng);
    let v = synth_video(&motion, &cfg, 1).unwrap();
    for k in 1..cfg.frames {
        // Nose bridge top: the rotation lever is under 0.3 face units.
        let (a, b) = (v.landmarks[k - 1].points()[27], v.landmarks[k].points()[27]);
        let step = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let lever = 0.3 * cfg.face_scale * 32.0 * 1.1 * 2f64.to_radians();
        assert!(step <= 2f64.sqrt() * cfg.max_speed + lever + 1e-9, "frame {k} moved {step}");
    }
}

#[test]
fn synthesis_is_seeded() {
    let cfg = small_config(MotionKind::LandmarkFace);
    let a = synthesize(&cfg).unwrap();
    assert_eq!(a, synthesize(&cfg).unwrap());
    let b = synthesize(&DataConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a[0].video.blurry, b[0].video.blurry);
}

#[test]
fn window_rules() {
    let frames: Vec<Frame> = (0..5).map(|k| Frame::filled(4, 4, k as f64 / 10.0).unwrap()).collect();
    let w = make_windows(&frames, None).unwrap();
    assert_eq!(w.len(), 5);
    assert_eq!(w[2].frames.to_vec(), frames);
    let expect: Vec<Frame> = [0, 0, 0, 1, 2].iter().map(|&i| frames[i].clone()).collect();
    assert_eq!(w[0].frames.to_vec(), expect);
    for n in 5..12 {
        let f = vec![Frame::filled(2, 2, 0.5).unwrap(); n];
        assert_eq!(make_windows(&f, None).unwrap().len(), n);
        for t in 0..n {
            let idx = window_indices(n, t);
            assert_eq!(idx[2], t);
            assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        }
    }
}

#[test]
fn disk_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(MotionKind::Translate);
    let meta = write_dataset(dir.path(), &cfg).unwrap();
    assert_eq!(meta.config_hash, cfg.hash());
    let index = DatasetIndex::open(dir.path()).unwrap();
    assert_eq!(index.heatmap_sigma(), 1.0);
    let generated = synthesize(&cfg).unwrap();
    let mut seen = 0;
    for split in Split::ALL {
        for v in index.load_split(split).unwrap() {
            let g = &generated.iter().find(|r| r.video.id == v.id).unwrap().video;
            assert_eq!(g, &v);
            seen += 1;
        }
    }
    assert_eq!(seen, cfg.videos);
}

#[test]
fn missing_landmark_record_names_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(MotionKind::Translate);
    write_dataset(dir.path(), &cfg).unwrap();
    let video = dir.path().join("video0000");
    let sidecar = video.join("landmarks.txt");
    let text = std::fs::read_to_string(&sidecar).unwrap();
    let kept: String = text.lines().filter(|l| !l.starts_with("000003")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&sidecar, kept).unwrap();
    let err = VideoRecord::scan(&video, None).unwrap().load().unwrap_err();
    assert_eq!(err.category(), "data-missing");
    assert!(err.to_string().contains("000003"));
}

#[test]
fn batches_stack_windows() {
    let cfg = small_config(MotionKind::LandmarkFace);
    let videos: Vec<VideoData> = synthesize(&cfg).unwrap().into_iter().map(|r| r.video).collect();
    let s = sample::samples(&videos, true, 1.0).unwrap();
    assert_eq!(s.len(), 4 * 6);
    let batch = Batch::new(&[&s[0], &s[7], &s[13]]).unwrap();
    assert_eq!(batch.frames[0].shape(), Shape::new(3, 3, 16, 16));
    assert_eq!(batch.heatmaps.as_ref().unwrap()[4].shape(), Shape::new(3, 5, 16, 16));
    assert_eq!(batch.target.select(1), *s[7].window.ground_truth.as_ref().unwrap().tensor());
    let plain = sample::samples(&videos, false, 1.0).unwrap();
    assert!(plain[0].heatmaps.is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernels_normalised(seed in any::<u64>(), strength in 0.0f64..3.0, max_len in 1.0f64..20.0, smooth in 0.0f64..2.0) {
        let cfg = BlurConfig { strength, min_length: 0.0, max_length: max_len, max_smoothing: smooth, ..BlurConfig::default() };
        let k = sample_blur_kernel(seed, &cfg).unwrap();
        prop_assert!((k.sum() - 1.0).abs() <= 1e-6);
        prop_assert!(k.size() % 2 == 1 && k.size() <= MAX_KERNEL_SIZE);
        prop_assert!(k.taps().iter().all(|&t| t >= 0.0));
        prop_assert_eq!(k, sample_blur_kernel(seed, &cfg).unwrap());
    }

    #[test]
    fn degraded_frames_are_pixel_aligned_and_seeded(seed in any::<u64>(), sigma in 0.0f64..0.05) {
        let f = textured(10, 10);
        let k = sample_blur_kernel(seed, &BlurConfig::default()).unwrap();
        let a = degrade(&f, &k, sigma, seed).unwrap();
        prop_assert_eq!((a.height(), a.width()), (10, 10));
        prop_assert_eq!(a, degrade(&f, &k, sigma, seed).unwrap());
    }
}
