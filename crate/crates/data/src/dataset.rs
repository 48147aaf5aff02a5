//! Synthetic dataset generation and the on-disk layout.
//!
//! ```text
//! root/dataset.json                 config, config hash, video list
//! root/splits/{train,val,test}.txt  one video id per line
//! root/<video>/NNNNNN.png           degraded frames
//! root/<video>/sharp/NNNNNN.png     ground truth
//! root/<video>/landmarks.txt        frame id + L "x y" pairs per line
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use finenet_core::error::{Error, Result};
use finenet_core::face_prior::{LandmarkSet, DEFAULT_SIGMA};
use finenet_core::model::config_hash;
use finenet_core::Frame;

use crate::blur::{sample_blur_kernel, BlurConfig, BlurKernel};
use crate::degrade::degrade;
use crate::io::{self, frame_id, LANDMARK_FILE, SHARP_DIR};
use crate::synth::{quantize, synth_video, Motion, SynthConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "dataset.json";
pub const SPLIT_DIR: &str = "splits";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}, expected train, val or test")))
    }
}

/// Fractions of videos per split; the test split takes the remainder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub videos: usize,
    pub synth: SynthConfig,
    pub blur: BlurConfig,
    pub splits: SplitConfig,
    /// Heatmap Gaussian sigma in pixels.
    pub heatmap_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            videos: 10,
            synth: SynthConfig::default(),
            blur: BlurConfig::default(),
            splits: SplitConfig::default(),
            heatmap_sigma: DEFAULT_SIGMA,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.blur.validate()?;
        if self.videos == 0 {
            return Err(Error::config("dataset needs at least one video"));
        }
        let s = &self.splits;
        let fr = [s.train, s.val, s.test];
        if fr.iter().any(|v| !v.is_finite() || *v < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split fractions must be non-negative and sum to 1"));
        }
        if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) {
            return Err(Error::config("heatmap_sigma must be positive"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Seed for `(tag, index)` derived from a base seed, so that each video and
/// frame has its own stream independent of generation order.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}

/// Blur kernel and noise level applied to one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub kernel: BlurKernel,
    pub noise_sigma: f64,
}

/// Frames of one video, degraded and (when known) sharp.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoData {
    pub id: String,
    pub split: Split,
    pub blurry: Vec<Frame>,
    pub sharp: Option<Vec<Frame>>,
    pub landmarks: Option<Vec<LandmarkSet>>,
}

impl VideoData {
    pub fn len(&self) -> usize {
        self.blurry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blurry.is_empty()
    }

    pub fn height(&self) -> usize {
        self.blurry[0].height()
    }

    pub fn width(&self) -> usize {
        self.blurry[0].width()
    }
}

/// One generated video together with how it was made.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub video: VideoData,
    pub motion: Motion,
    pub degradations: Vec<Degradation>,
}

pub fn video_id(index: usize) -> String {
    format!("video{index:04}")
}

/// Deterministic split per video index.
pub fn assign_splits(config: &DataConfig) -> Vec<Split> {
    let n = config.videos;
    let n_val = ((n as f64 * config.splits.val).round() as usize).min(n);
    let n_test = ((n as f64 * config.splits.test).round() as usize).min(n - n_val);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "splits", 0)));
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_val {
            out[i] = Split::Val;
        } else if rank < n_val + n_test {
            out[i] = Split::Test;
        }
    }
    out
}

/// Renders and degrades video `index`. Depends only on `(config, index)`.
pub fn synthesize_video(config: &DataConfig, index: usize, split: Split) -> Result<SynthRecord> {
    config.validate()?;
    let i = index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "motion", i));
    let motion = Motion::sample(config.synth.kind, &config.synth, &mut rng);
    let synth = synth_video(&motion, &config.synth, derive_seed(config.seed, "appearance", i))?;

    let kernel_tag = format!("kernel/{index}");
    let noise_tag = format!("noise/{index}");
    let mut blurry = Vec::with_capacity(synth.frames.len());
    let mut degradations = Vec::with_capacity(synth.frames.len());
    for (k, frame) in synth.frames.iter().enumerate() {
        let kk = if config.blur.temporal_coherence { 0 } else { k as u64 };
        let kernel = sample_blur_kernel(derive_seed(config.seed, &kernel_tag, kk), &config.blur)?;
        let (lo, hi) = (config.blur.noise_min, config.blur.noise_max);
        let noise_sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let out = degrade(frame, &kernel, noise_sigma, derive_seed(config.seed, &noise_tag, k as u64))?;
        blurry.push(Frame::new(out.tensor().map(quantize))?);
        degradations.push(Degradation { kernel, noise_sigma });
    }
    Ok(SynthRecord {
        video: VideoData { id: video_id(index), split, blurry, sharp: Some(synth.frames), landmarks: Some(synth.landmarks) },
        motion,
        degradations,
    })
}

/// Every video of the configured dataset.
pub fn synthesize(config: &DataConfig) -> Result<Vec<SynthRecord>> {
    config.validate()?;
    assign_splits(config).into_iter().enumerate().map(|(i, s)| synthesize_video(config, i, s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub split: Split,
    pub frames: usize,
    pub motion: Motion,
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format_version: u32,
    pub config: DataConfig,
    pub config_hash: String,
    pub videos: Vec<VideoEntry>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_video(root: &Path, video: &VideoData) -> Result<()> {
    let dir = root.join(&video.id);
    create_dir(&dir)?;
    for (k, f) in video.blurry.iter().enumerate() {
        io::write_png(&dir.join(format!("{}.png", frame_id(k))), f)?;
    }
    if let Some(sharp) = &video.sharp {
        create_dir(&dir.join(SHARP_DIR))?;
        for (k, f) in sharp.iter().enumerate() {
            io::write_png(&dir.join(SHARP_DIR).join(format!("{}.png", frame_id(k))), f)?;
        }
    }
    if let Some(track) = &video.landmarks {
        io::write_sidecar(&dir.join(LANDMARK_FILE), track)?;
    }
    Ok(())
}

/// Generates the dataset and writes it under `root`.
pub fn write_dataset(root: &Path, config: &DataConfig) -> Result<Metadata> {
    let records = synthesize(config)?;
    create_dir(&root.join(SPLIT_DIR))?;
    for r in &records {
        write_video(root, &r.video)?;
    }
    for split in Split::ALL {
        let ids: String = records.iter().filter(|r| r.video.split == split).map(|r| format!("{}\n", r.video.id)).collect();
        write_text(&root.join(SPLIT_DIR).join(format!("{split}.txt")), &ids)?;
    }
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        config_hash: config.hash(),
        videos: records
            .iter()
            .map(|r| VideoEntry { id: r.video.id.clone(), split: r.video.split, frames: r.video.len(), motion: r.motion })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Data(e.to_string()))?;
    write_text(&root.join(METADATA_FILE), &json)?;
    Ok(meta)
}

/// Files of one video on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoRecord {
    pub id: String,
    pub split: Option<Split>,
    pub frames: Vec<PathBuf>,
    pub sharp: Option<Vec<PathBuf>>,
    pub landmarks: Option<PathBuf>,
}

impl VideoRecord {
    /// Scans a video directory: `*.png` frames, optional `sharp/` and
    /// optional landmark sidecar.
    pub fn scan(dir: &Path, split: Option<Split>) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Data(format!("video directory {} does not exist", dir.display())));
        }
        let frames = io::list_pngs(dir)?;
        if frames.is_empty() {
            return Err(Error::Data(format!("no PNG frames in {}", dir.display())));
        }
        let sharp_dir = dir.join(SHARP_DIR);
        let sharp = if sharp_dir.is_dir() { Some(io::list_pngs(&sharp_dir)?) } else { None };
        if let Some(s) = &sharp {
            if s.len() != frames.len() {
                return Err(Error::Data(format!("{}: {} sharp frames for {} frames", dir.display(), s.len(), frames.len())));
            }
        }
        let sidecar = dir.join(LANDMARK_FILE);
        let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or("video").to_string();
        Ok(VideoRecord { id, split, frames, sharp, landmarks: sidecar.is_file().then_some(sidecar) })
    }

    /// Reads frames, ground truth and landmarks. Frames must share one size.
    pub fn load(&self) -> Result<VideoData> {
        let blurry = io::read_frames(&self.frames)?;
        let (h, w) = (blurry[0].height(), blurry[0].width());
        let check = |frames: &[Frame]| -> Result<()> {
            if frames.iter().any(|f| (f.height(), f.width()) != (h, w)) {
                return Err(Error::Data(format!("video {} has frames of different sizes", self.id)));
            }
            Ok(())
        };
        check(&blurry)?;
        let sharp = self.sharp.as_ref().map(|p| io::read_frames(p)).transpose()?;
        if let Some(s) = &sharp {
            check(s)?;
        }
        let landmarks = match &self.landmarks {
            Some(p) => Some(io::landmark_track(&io::read_sidecar(p)?, &self.frames, &blurry).map_err(|e| match e {
                Error::DataMissing { frame } => Error::DataMissing { frame: format!("{}/{frame}", self.id) },
                other => other,
            })?),
            None => None,
        };
        Ok(VideoData { id: self.id.clone(), split: self.split.unwrap_or(Split::Test), blurry, sharp, landmarks })
    }
}

/// A dataset root opened for reading.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub metadata: Option<Metadata>,
}

impl DatasetIndex {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join(SPLIT_DIR).is_dir() {
            return Err(Error::Data(format!("{} has no {SPLIT_DIR}/ directory", root.display())));
        }
        let meta_path = root.join(METADATA_FILE);
        let metadata = if meta_path.is_file() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(format!("reading {}", meta_path.display()), e))?;
            let meta: Metadata = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
            if meta.format_version != FORMAT_VERSION {
                return Err(Error::Version(format!(
                    "dataset format version {} is not supported (expected {FORMAT_VERSION})",
                    meta.format_version
                )));
            }
            Some(meta)
        } else {
            None
        };
        Ok(DatasetIndex { root: root.to_path_buf(), metadata })
    }

    /// Video ids listed in the split manifest.
    pub fn ids(&self, split: Split) -> Result<Vec<String>> {
        let path = self.root.join(SPLIT_DIR).join(format!("{split}.txt"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
    }

    pub fn records(&self, split: Split) -> Result<Vec<VideoRecord>> {
        self.ids(split)?.iter().map(|id| VideoRecord::scan(&self.root.join(id), Some(split))).collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<VideoData>> {
        self.records(split)?.iter().map(VideoRecord::load).collect()
    }

    pub fn heatmap_sigma(&self) -> f64 {
        self.metadata.as_ref().map_or(DEFAULT_SIGMA, |m| m.config.heatmap_sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("training".parse::<Split>().is_err());
    }

    #[test]
    fn split_counts() {
        let cfg = DataConfig { videos: 10, ..DataConfig::default() };
        let s = assign_splits(&cfg);
        let count = |x| s.iter().filter(|&&v| v == x).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(2, "a", 0));
        assert_eq!(derive_seed(1, "a", 0), derive_seed(1, "a", 0));
    }
}
