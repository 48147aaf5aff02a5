//! The network trained by each stage, built from its architecture config.

use serde::{Deserialize, Serialize};

use finenet_core::combiner::{Combiner, EarlyFusion};
use finenet_core::enhance::EnhanceBranch;
use finenet_core::error::{Error, Result};
use finenet_core::interp::{InterpBranch, NEIGHBOR_WINDOW_INDEX};
use finenet_core::model::{config_hash, CombinerConfig, EnhanceConfig, FusionMode, InterpConfig, ModelConfig};
use finenet_core::nn::ParamStore;
use finenet_core::{Graph, Var};

use crate::config::Stage;

/// Architecture of the network a stage trains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StageArch {
    Enhance(EnhanceConfig),
    Interp(InterpConfig),
    Combine(CombinerConfig),
    Early(Box<ModelConfig>),
}

impl StageArch {
    pub fn of(stage: Stage, model: &ModelConfig) -> StageArch {
        match stage {
            Stage::Stage1 => StageArch::Enhance(EnhanceConfig::stage1_of(&model.enhance.branch)),
            Stage::Enhance => StageArch::Enhance(model.enhance.clone()),
            Stage::Interp => StageArch::Interp(model.interp.clone()),
            Stage::Combine => match model.fusion {
                FusionMode::Late => StageArch::Combine(model.combiner.clone()),
                FusionMode::Early => StageArch::Early(Box::new(model.clone())),
            },
        }
    }

    /// Identifies the architecture of `stage`; checkpoints store it.
    pub fn hash(&self, stage: Stage) -> String {
        config_hash(&(stage, self))
    }
}

/// A stage network. Parameter names are prefixed by the stage name, except
/// for early fusion, which reuses the branch names so branch weights load
/// directly.
#[derive(Clone, Debug)]
pub enum StageModel {
    Enhance(EnhanceBranch),
    Interp(InterpBranch),
    Combine(Combiner),
    Early(EarlyFusion),
}

impl StageModel {
    pub fn build(stage: Stage, arch: &StageArch, seed: u64) -> Result<(StageModel, ParamStore)> {
        let mut store = ParamStore::new(seed);
        let name = stage.as_str();
        let model = match (stage, arch) {
            (Stage::Stage1 | Stage::Enhance, StageArch::Enhance(c)) => StageModel::Enhance(EnhanceBranch::new(&mut store, name, c)?),
            (Stage::Interp, StageArch::Interp(c)) => StageModel::Interp(InterpBranch::new(&mut store, name, c)?),
            (Stage::Combine, StageArch::Combine(c)) => StageModel::Combine(Combiner::new(&mut store, name, c)?),
            (Stage::Combine, StageArch::Early(m)) => StageModel::Early(EarlyFusion::new(&mut store, m)?),
            _ => return Err(Error::config(format!("architecture {arch:?} cannot be trained by stage {stage}"))),
        };
        Ok((model, store))
    }

    pub fn uses_heatmaps(&self) -> bool {
        match self {
            StageModel::Enhance(b) => b.uses_heatmaps(),
            StageModel::Interp(b) => b.uses_heatmaps(),
            StageModel::Combine(_) => false,
            StageModel::Early(e) => e.enhance().uses_heatmaps() || e.interp().uses_heatmaps(),
        }
    }

    /// Unclamped branch output for a window batch. Heatmaps follow window
    /// order. Only the branch variants take windows.
    pub fn branch_forward(&self, g: &mut Graph<'_>, frames: &[Var; 5], heatmaps: Option<&[Var; 5]>) -> Result<Var> {
        match self {
            StageModel::Enhance(b) => {
                let hm = heatmaps.filter(|_| b.uses_heatmaps());
                Ok(b.forward(g, frames, hm).output.expect("full branch"))
            }
            StageModel::Interp(b) => {
                let nb = NEIGHBOR_WINDOW_INDEX.map(|i| frames[i]);
                let hm = heatmaps.filter(|_| b.uses_heatmaps()).map(|h| NEIGHBOR_WINDOW_INDEX.map(|i| h[i]));
                Ok(b.forward(g, &nb, hm.as_ref()).output.expect("full branch"))
            }
            _ => Err(Error::invalid("combination stages do not take frame windows")),
        }
    }
}
