use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use mindcraft_core::evalsuite::RolloutConfig;
use mindcraft_core::gridworld::SceneConfig;
use mindcraft_core::querygen::QueryGenConfig;
use mindcraft_core::training::TrainConfig;

/// One config file drives the whole pipeline; each command reads its own
/// section and ignores the rest. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub queries: QueryGenConfig,
    pub train: TrainConfig,
    pub eval: RolloutConfig,
    /// Recorded by `ablate --emit-config`; only `ablate` applies it.
    pub preset: Preset,
}

/// Training ablations. Each switches losses or model wiring off relative
/// to `full`; applying a preset twice is a no-op.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// All four loss terms, full model.
    #[default]
    #[value(name = "full")]
    Full,
    /// Action and answer losses only (contrastive, atlas, and episodic
    /// weights zeroed).
    #[value(name = "il_qa")]
    IlQa,
    /// Action loss only.
    #[value(name = "il")]
    Il,
    /// Geometry fusion bypassed: frames are the visual features alone.
    #[value(name = "no_geo")]
    NoGeo,
    /// Cognitive map slot removed from the decision sequence.
    #[value(name = "no_sem")]
    NoSem,
    /// Atlas and episodic auxiliary losses zeroed; contrastive kept.
    #[value(name = "no_aux")]
    NoAux,
}

impl Preset {
    pub const ALL: [Preset; 6] =
        [Preset::Full, Preset::IlQa, Preset::Il, Preset::NoGeo, Preset::NoSem, Preset::NoAux];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::IlQa => "il_qa",
            Preset::Il => "il",
            Preset::NoGeo => "no_geo",
            Preset::NoSem => "no_sem",
            Preset::NoAux => "no_aux",
        }
    }

    /// Rewrites a training config in place to this ablation.
    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Preset::Full => {}
            Preset::IlQa => {
                cfg.weights.lambda_c = 0.0;
                cfg.weights.lambda_s = 0.0;
                cfg.weights.lambda_r = 0.0;
            }
            Preset::Il => {
                cfg.weights.lambda_qa = 0.0;
                cfg.weights.lambda_c = 0.0;
                cfg.weights.lambda_s = 0.0;
                cfg.weights.lambda_r = 0.0;
            }
            Preset::NoGeo => cfg.model.geo_bypass = true,
            Preset::NoSem => cfg.model.drop_map = true,
            Preset::NoAux => {
                cfg.weights.lambda_s = 0.0;
                cfg.weights.lambda_r = 0.0;
            }
        }
    }
}
