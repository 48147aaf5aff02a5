//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;

use finenet_core::checks::gradcheck_suite;
use finenet_core::face_prior::render_heatmaps;
use finenet_core::{Error, Frame, Shape, Tensor};
use finenet_data::dataset::write_dataset;
use finenet_data::io::{frame_id, write_png, LANDMARK_FILE};
use finenet_data::{DatasetIndex, Split, VideoRecord};
use finenet_train::report::FrameRow;
use finenet_train::{evaluate, Checkpoint, Dependencies, FineNet, Report, RunConfig, RunDir, Stage, TrainData, Trainer};

use crate::args::{Cli, Command};
use crate::settings::resolve;
use crate::CliError;

pub fn execute(cli: &Cli) -> Result<()> {
    if let Command::Gradcheck { step, tolerance } = cli.command {
        return gradcheck(step, tolerance);
    }
    let mut cfg = resolve(&cli.global)?;
    match &cli.command {
        Command::Train { steps: Some(s), .. } | Command::Ablate { steps: Some(s), .. } => cfg.train.steps = *s,
        _ => {}
    }
    cfg.validate()?;
    info!("resolved config (hash {}):\n{}", cfg.hash(), cfg.to_toml());
    info!("seeds: data {}, train {}", cfg.data.seed, cfg.train.seed);
    match &cli.command {
        Command::SynthData { out } => synth_data(&cfg, out),
        Command::GenHeatmaps { data, out } => gen_heatmaps(data, out.as_deref()),
        Command::Train { stage, data, run, resume, .. } => {
            let index = DatasetIndex::open(data)?;
            train(&cfg, (*stage).into(), &index, &RunDir::new(run), *resume)
        }
        Command::Eval { split, data, run, out, two_stage } => {
            let split: Split = (*split).into();
            let out = out.clone().unwrap_or_else(|| run.join(format!("eval-{split}.jsonl")));
            eval(&cfg, split, &DatasetIndex::open(data)?, &RunDir::new(run), *two_stage, &out).map(|_| ())
        }
        Command::Deblur { input, out, run, two_stage, sigma } => {
            deblur(&cfg, input, out, &RunDir::new(run), *two_stage, sigma.unwrap_or(cfg.data.heatmap_sigma))
        }
        Command::Ablate { preset, data, run, .. } => {
            let preset: finenet_train::Preset = (*preset).into();
            ablate(&cfg, preset, &DatasetIndex::open(data)?, &run.join(preset.as_str()))
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn gradcheck(step: f64, tolerance: f64) -> Result<()> {
    let checks = gradcheck_suite(step, tolerance);
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAILED" };
        println!("{:<16} max_rel_error {:.3e} {status}", c.op, c.report.max_rel_error());
        if !c.passed() {
            failed.push(c.op.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(format!("relative error at or above {tolerance:e} for {}", failed.join(", "))).into())
    }
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let meta = write_dataset(out, &cfg.data).with_context(|| format!("writing dataset to {}", out.display()))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    for split in Split::ALL {
        let n = meta.videos.iter().filter(|v| v.split == split).count();
        info!("{split}: {n} videos");
    }
    println!("wrote {} videos to {} (data hash {})", meta.videos.len(), out.display(), meta.config_hash);
    Ok(())
}

/// Per-pixel maximum over the landmark channels, as a grey image.
fn heatmap_preview(stack: &finenet_core::face_prior::HeatmapStack) -> Result<Frame> {
    let t = stack.tensor();
    let s = t.shape();
    let img = Tensor::from_fn(Shape::new(1, 3, s.h, s.w), |_, _, y, x| (0..s.c).map(|l| t.at(0, l, y, x)).fold(0.0, f64::max));
    Ok(Frame::from_clamped(&img)?)
}

/// Checks every landmark sidecar of the dataset and writes a preview of
/// each frame's heatmaps.
pub fn gen_heatmaps(data: &Path, out: Option<&Path>) -> Result<()> {
    let index = DatasetIndex::open(data)?;
    let out = out.map_or_else(|| data.join("heatmaps"), Path::to_path_buf);
    let sigma = index.heatmap_sigma();
    let mut frames = 0;
    for split in Split::ALL {
        for record in index.records(split)? {
            let video = record.load()?;
            let track = video.landmarks.as_ref().ok_or_else(|| Error::DataMissing {
                frame: format!("{}/{} ({LANDMARK_FILE} not found)", video.id, frame_id(0)),
            })?;
            let dir = out.join(&video.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            for (k, lm) in track.iter().enumerate() {
                let stack = render_heatmaps(lm, video.height(), video.width(), sigma)?;
                write_png(&dir.join(format!("{}.png", frame_id(k))), &heatmap_preview(&stack)?)?;
                frames += 1;
            }
        }
    }
    println!("rendered heatmaps for {frames} frames (sigma {sigma}) into {}", out.display());
    Ok(())
}

fn existing(run: &RunDir, stage: Stage) -> Result<Option<Checkpoint>> {
    Ok(run.for_inference(stage).map(|p| Checkpoint::load(&p)).transpose()?)
}

fn dependencies(cfg: &RunConfig, stage: Stage, run: &RunDir) -> Result<Dependencies> {
    let mut deps = Dependencies::default();
    if cfg.train.two_stage && stage != Stage::Stage1 {
        deps.stage1 = existing(run, Stage::Stage1)?;
    }
    if stage == Stage::Combine {
        deps.enhance = existing(run, Stage::Enhance)?;
        deps.interp = existing(run, Stage::Interp)?;
    }
    Ok(deps)
}

/// Trains one stage and writes `<stage>.ckpt`, `<stage>.best.ckpt`, the
/// step log and the resolved config into the run directory.
pub fn train(cfg: &RunConfig, stage: Stage, index: &DatasetIndex, run: &RunDir, resume: bool) -> Result<()> {
    let train = index.load_split(Split::Train)?;
    let val = index.load_split(Split::Val)?;
    let data = TrainData { train: &train, val: &val, heatmap_sigma: index.heatmap_sigma() };
    let deps = dependencies(cfg, stage, run)?;
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(&run.last(stage))?;
        if ckpt.stage != stage {
            return Err(Error::Version(format!("{} holds a {} checkpoint", run.last(stage).display(), ckpt.stage)).into());
        }
        info!("{stage}: resuming at step {}", ckpt.step);
        let mut t = Trainer::resume(&ckpt, &cfg.model, &cfg.train, data, &deps)?;
        if run.best(stage).is_file() {
            t.restore_best(&Checkpoint::load(&run.best(stage))?)?;
        }
        t
    } else {
        Trainer::new(stage, &cfg.model, &cfg.train, data, &deps)?
    };
    let outcome = trainer.run()?;
    write_text(&run.root.join("config.toml"), &cfg.to_toml())?;
    outcome.last.save(&run.last(stage))?;
    outcome.best.save(&run.best(stage))?;
    let mut log = String::new();
    for s in &outcome.steps {
        log.push_str(&serde_json::to_string(s)?);
        log.push('\n');
    }
    for v in &outcome.validations {
        log.push_str(&serde_json::to_string(v)?);
        log.push('\n');
    }
    let log_path = run.root.join(format!("{stage}.train.jsonl"));
    let mut previous = if resume { fs::read_to_string(&log_path).unwrap_or_default() } else { String::new() };
    previous.push_str(&log);
    write_text(&log_path, &previous)?;
    let last_loss = outcome.steps.last().map_or(f64::NAN, |s| s.loss.total);
    let best = outcome.best.best_val_psnr.map_or_else(|| "n/a".to_string(), |p| format!("{p:.3} dB"));
    println!(
        "{stage}: step {}, last loss {last_loss:.6}, best validation PSNR {best}{}",
        outcome.last.step,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, split: Split, index: &DatasetIndex, run: &RunDir, two_stage: bool, out: &Path) -> Result<Report> {
    let net = FineNet::load(run, &cfg.model, two_stage)?;
    let videos = index.load_split(split)?;
    let report = evaluate(&net, &videos, split, index.heatmap_sigma(), &cfg.hash())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    report.save(out)?;
    println!("{}", serde_json::to_string(&report.summary)?);
    Ok(report)
}

/// Deblurs every frame of one video directory. Writes one PNG per input
/// frame under the input's file name, plus `metrics.jsonl` when the
/// directory has ground truth.
pub fn deblur(cfg: &RunConfig, input: &Path, out: &Path, run: &RunDir, two_stage: bool, sigma: f64) -> Result<()> {
    let net = FineNet::load(run, &cfg.model, two_stage)?;
    let record = VideoRecord::scan(input, None)?;
    let video = record.load()?;
    if net.uses_heatmaps() && video.landmarks.is_none() {
        return Err(Error::DataMissing { frame: format!("{} ({LANDMARK_FILE} not found in {})", frame_id(0), input.display()) }.into());
    }
    let results = net.deblur_video(&video, sigma)?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let names: Vec<PathBuf> = record.frames.iter().map(|p| PathBuf::from(p.file_name().expect("listed file"))).collect();
    for (name, r) in names.iter().zip(&results) {
        write_png(&out.join(name), &r.combined)?;
    }
    if let Some(sharp) = &video.sharp {
        let rows = results
            .iter()
            .enumerate()
            .map(|(t, r)| FrameRow::measure(&video.id, t, &r.enhanced, &r.interpolated, &r.combined, &sharp[t]))
            .collect::<finenet_core::Result<Vec<_>>>()?;
        let report = Report::new(rows, "deblur", &cfg.hash());
        report.save(&out.join("metrics.jsonl"))?;
        println!("{}", serde_json::to_string(&report.summary)?);
    }
    println!("wrote {} frames to {}", results.len(), out.display());
    Ok(())
}

/// Trains every stage of a preset variant in `dir`, then evaluates it on
/// the test split.
pub fn ablate(cfg: &RunConfig, preset: finenet_train::Preset, index: &DatasetIndex, dir: &Path) -> Result<()> {
    let cfg = RunConfig { model: preset.apply(&cfg.model), ..cfg.clone() };
    cfg.validate()?;
    info!("{preset}: model config\n{}", toml::to_string(&cfg.model).unwrap_or_default());
    let run = RunDir::new(dir);
    let mut stages = vec![Stage::Enhance, Stage::Interp, Stage::Combine];
    if cfg.train.two_stage {
        stages.insert(0, Stage::Stage1);
    }
    for stage in stages {
        train(&cfg, stage, index, &run, false)?;
    }
    eval(&cfg, Split::Test, index, &run, cfg.train.two_stage, &dir.join("eval-test.jsonl"))?;
    Ok(())
}
