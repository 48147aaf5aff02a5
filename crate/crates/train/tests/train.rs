use finenet_core::metrics::psnr;
use finenet_core::Error;
use finenet_data::dataset::synthesize;
use finenet_data::sample::video_samples;
use finenet_data::{DataConfig, Split, VideoData};
use finenet_train::checkpoint::RunDir;
use finenet_train::report::{FrameRow, Output, Summary};
use finenet_train::stage::{StageArch, StageModel};
use finenet_train::trainer::batch_indices;
use finenet_train::*;
use proptest::prelude::*;
use tempfile::TempDir;

fn toy() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.train.val_every = 4;
    cfg.train.log_every = 1000;
    cfg
}

fn videos(cfg: &DataConfig, n: usize, seed: u64) -> Vec<VideoData> {
    let cfg = DataConfig { videos: n, seed, ..cfg.clone() };
    synthesize(&cfg).unwrap().into_iter().map(|r| r.video).collect()
}

fn train(stage: Stage, cfg: &RunConfig, train: &[VideoData], val: &[VideoData], steps: usize, deps: &Dependencies) -> TrainOutcome {
    let tc = TrainConfig { steps, ..cfg.train.clone() };
    train_stage(stage, &cfg.model, &tc, TrainData { train, val, heatmap_sigma: cfg.data.heatmap_sigma }, deps).unwrap()
}

#[test]
fn checkpoint_round_trips_through_bytes_and_files() {
    let cfg = toy();
    let vids = videos(&cfg.data, 2, 3);
    let out = train(Stage::Interp, &cfg, &vids, &vids[..1], 5, &Dependencies::default());
    let ckpt = out.last;
    assert_eq!(ckpt.step, 5);
    assert!(ckpt.optimizer.is_some());
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(back, ckpt);

    let dir = TempDir::new().unwrap();
    let run = RunDir::new(dir.path());
    ckpt.save(&run.last(Stage::Interp)).unwrap();
    assert_eq!(Checkpoint::load(&run.last(Stage::Interp)).unwrap(), ckpt);
    assert_eq!(run.for_inference(Stage::Interp), Some(run.last(Stage::Interp)));
    out.best.save(&run.best(Stage::Interp)).unwrap();
    assert_eq!(run.for_inference(Stage::Interp), Some(run.best(Stage::Interp)));
    assert!(matches!(run.load_for_inference(Stage::Combine), Err(Error::Dependency(_))));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let cfg = toy();
    let (_, store) = StageModel::build(Stage::Combine, &StageArch::of(Stage::Combine, &cfg.model), 0).unwrap();
    let ckpt = Checkpoint::new(Stage::Combine, StageArch::of(Stage::Combine, &cfg.model), cfg.train.clone(), &store);
    let bytes = ckpt.to_bytes();
    for i in [20, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[i] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Data(_))), "flip at {i}");
    }
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 7]), Err(Error::Data(_))));
    assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint at all, just text"), Err(Error::Data(_))));
    let mut newer = bytes.clone();
    newer[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::Version(_))));
}

#[test]
fn checkpoint_of_another_architecture_is_a_version_error() {
    let cfg = toy();
    let (_, store) = StageModel::build(Stage::Enhance, &StageArch::of(Stage::Enhance, &cfg.model), 0).unwrap();
    let ckpt = Checkpoint::new(Stage::Enhance, StageArch::of(Stage::Enhance, &cfg.model), cfg.train.clone(), &store);
    assert!(ckpt.restore(Stage::Enhance, &cfg.model).is_ok());
    let other = Preset::NoFoc.apply(&cfg.model);
    assert!(matches!(ckpt.restore(Stage::Enhance, &other), Err(Error::Version(_))));
    assert!(matches!(ckpt.restore(Stage::Interp, &cfg.model), Err(Error::Version(_))));
}

#[test]
fn combine_needs_both_branch_checkpoints() {
    let cfg = toy();
    let vids = videos(&cfg.data, 1, 4);
    let data = TrainData { train: &vids, val: &[], heatmap_sigma: cfg.data.heatmap_sigma };
    let err = Trainer::new(Stage::Combine, &cfg.model, &cfg.train, data, &Dependencies::default()).err().unwrap();
    assert_eq!(err.category(), "dependency");
    let two = TrainConfig { two_stage: true, ..cfg.train.clone() };
    let err = Trainer::new(Stage::Enhance, &cfg.model, &two, data, &Dependencies::default()).err().unwrap();
    assert_eq!(err.category(), "dependency");
}

#[test]
fn resumed_training_is_bit_identical() {
    let cfg = toy();
    let vids = videos(&cfg.data, 2, 5);
    let data = TrainData { train: &vids, val: &vids[1..], heatmap_sigma: cfg.data.heatmap_sigma };
    let tc = TrainConfig { steps: 7, ..cfg.train.clone() };
    let deps = Dependencies::default();
    let mut straight = Trainer::new(Stage::Enhance, &cfg.model, &tc, data, &deps).unwrap();
    let mut first = Trainer::new(Stage::Enhance, &cfg.model, &tc, data, &deps).unwrap();
    for _ in 0..4 {
        straight.step().unwrap();
        first.step().unwrap();
    }
    let bytes = first.checkpoint().to_bytes();
    let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), &cfg.model, &tc, data, &deps).unwrap();
    assert_eq!(resumed.step_count(), 4);
    for _ in 0..3 {
        let a = straight.step().unwrap();
        let b = resumed.step().unwrap();
        assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
        assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
    }
    assert_eq!(straight.checkpoint(), resumed.checkpoint());

    let other_seed = TrainConfig { seed: 99, ..tc.clone() };
    let err = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), &cfg.model, &other_seed, data, &deps).err().unwrap();
    assert_eq!(err.category(), "config");
}

#[test]
fn training_reduces_the_loss() {
    let cfg = toy();
    let vids = videos(&cfg.data, 2, 6);
    let out = train(Stage::Enhance, &cfg, &vids, &[], 60, &Dependencies::default());
    let mean = |r: &[finenet_train::trainer::StepRecord]| r.iter().map(|s| s.loss.total).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&out.steps[..10]), mean(&out.steps[50..]));
    assert!(tail < 0.95 * head, "loss {head} -> {tail}");
    assert!(out.steps.iter().all(|s| s.loss.total.is_finite() && s.grad_norm.is_finite()));
}

#[test]
fn best_checkpoint_keeps_the_best_validation_score() {
    let cfg = toy();
    let vids = videos(&cfg.data, 3, 7);
    let out = train(Stage::Interp, &cfg, &vids[..2], &vids[2..], 16, &Dependencies::default());
    assert_eq!(out.validations.len(), 4);
    let best = out.validations.iter().cloned().fold(None::<(f64, usize)>, |b, v| match b {
        Some((p, _)) if p >= v.psnr => b,
        _ => Some((v.psnr, v.step)),
    });
    let (p, step) = best.unwrap();
    assert_eq!(out.best.best_val_psnr, Some(p));
    assert_eq!(out.best.step, step);
    assert_eq!(out.last.best_val_psnr, Some(p));
}

#[test]
fn perfect_outputs_report_infinite_psnr() {
    let vids = videos(&toy().data, 1, 8);
    let gt = &vids[0].sharp.as_ref().unwrap()[0];
    let row = FrameRow::measure("v", 0, gt, gt, gt, gt).unwrap();
    assert_eq!(row.psnr.combined, f64::INFINITY);
    assert_eq!(row.ssim.enhanced, 1.0);
    assert_eq!(row.winner, Output::Combined);
    let report = Report::new(vec![row], "test", "h");
    let text = report.to_jsonl();
    assert!(text.contains("\"inf\""), "{text}");
    assert!(text.lines().next().unwrap().contains("\"record\":\"frame\""));
    assert_eq!(Report::from_jsonl(&text).unwrap(), report);
}

#[test]
fn malformed_reports_are_data_errors() {
    assert!(matches!(Report::from_jsonl(""), Err(Error::Data(_))));
    assert!(matches!(Report::from_jsonl("{\"record\":\"frame\"}\n"), Err(Error::Data(_))));
}

fn arb_row() -> impl Strategy<Value = FrameRow> {
    (10.0..40.0f64, 10.0..40.0f64, 10.0..40.0f64).prop_map(|(e, i, c)| {
        let winner = if c >= e && c >= i {
            Output::Combined
        } else if e >= i {
            Output::Enhanced
        } else {
            Output::Interpolated
        };
        let t = finenet_train::report::Triple { enhanced: e, interpolated: i, combined: c };
        FrameRow { video: "v".into(), frame: 0, psnr: t, ssim: t, winner }
    })
}

proptest! {
    #[test]
    fn winner_tallies_cover_every_frame(rows in proptest::collection::vec(arb_row(), 1..40)) {
        let s = Summary::of(&rows, "test", "h");
        prop_assert_eq!(s.winners.enhanced + s.winners.interpolated + s.winners.combined, rows.len());
        prop_assert!(s.combined_beats_enhanced <= rows.len());
        let r = Report::new(rows, "test", "h");
        prop_assert_eq!(Report::from_jsonl(&r.to_jsonl()).unwrap(), r);
    }

    #[test]
    fn batch_indices_are_distinct_and_in_range(seed in any::<u64>(), step in 0usize..1000, n in 1usize..50, batch in 1usize..12) {
        let idx = batch_indices(seed, step, n, batch);
        prop_assert_eq!(idx.len(), batch.min(n));
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), idx.len());
        prop_assert!(idx.iter().all(|&i| i < n));
        prop_assert_eq!(idx, batch_indices(seed, step, n, batch));
    }
}

fn loaded(stage: Stage, cfg: &RunConfig, seed: u64) -> Checkpoint {
    let arch = StageArch::of(stage, &cfg.model);
    let (_, store) = StageModel::build(stage, &arch, seed).unwrap();
    Checkpoint::new(stage, arch, cfg.train.clone(), &store)
}

#[test]
fn identity_stage1_leaves_results_unchanged() {
    let cfg = toy();
    let vids = videos(&cfg.data, 1, 9);
    let en = train(Stage::Enhance, &cfg, &vids, &[], 2, &Dependencies::default()).last;
    let ip = train(Stage::Interp, &cfg, &vids, &[], 2, &Dependencies::default()).last;
    let deps = Dependencies { stage1: None, enhance: Some(en.clone()), interp: Some(ip.clone()) };
    let co = train(Stage::Combine, &cfg, &vids, &[], 2, &deps).last;
    // A fresh stage-1 network has a zero reconstruction head.
    let s1 = loaded(Stage::Stage1, &cfg, 0);
    let net = FineNet::from_checkpoints(&cfg.model, Some(&s1), &en, &ip, &co).unwrap();
    let single = net.single_stage();
    let a = net.deblur_video(&vids[0], cfg.data.heatmap_sigma).unwrap();
    let b = single.deblur_video(&vids[0], cfg.data.heatmap_sigma).unwrap();
    assert_eq!(a, b);

    let stage1 = Loaded::restore(&s1, Stage::Stage1, &cfg.model).unwrap();
    for s in video_samples(&vids[0], true, cfg.data.heatmap_sigma).unwrap() {
        let two = two_stage_deblur(&s.window, s.heatmaps.as_ref(), &stage1, &net).unwrap();
        assert_eq!(two, single.deblur_window(&s.window, s.heatmaps.as_ref()).unwrap());
    }
}

#[test]
fn evaluation_covers_every_frame() {
    let cfg = toy();
    let vids = videos(&cfg.data, 2, 10);
    let en = loaded(Stage::Enhance, &cfg, 1);
    let ip = loaded(Stage::Interp, &cfg, 2);
    let co = loaded(Stage::Combine, &cfg, 3);
    let net = FineNet::from_checkpoints(&cfg.model, None, &en, &ip, &co).unwrap();
    let report = evaluate(&net, &vids, Split::Test, cfg.data.heatmap_sigma, "hash").unwrap();
    assert_eq!(report.rows.len(), 16);
    assert_eq!(report.summary.frames, 16);
    // Untrained branches return the target and the neighbour mean, and the
    // untrained combiner their average.
    for (r, t) in report.rows.iter().zip(0..) {
        let v = &vids[t / 8];
        let expect = psnr(&v.blurry[t % 8], &v.sharp.as_ref().unwrap()[t % 8]).unwrap();
        assert!((r.psnr.enhanced - expect).abs() < 1e-9, "{} vs {expect}", r.psnr.enhanced);
    }
    let mut no_gt = vids.clone();
    no_gt[1].sharp = None;
    assert_eq!(evaluate(&net, &no_gt, Split::Test, 1.0, "h").err().unwrap().category(), "data");
}
