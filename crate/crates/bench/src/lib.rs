//! Shared setups for the benchmarks.

use gridar_core::verify::{OracleOrm, OracleReformulator, OracleVerifier};
use gridar_core::{GuidanceMode, Palette, SceneLm, ScenePrompt, StagePlan};

/// Oracle verifier, reformulator and outcome reward over the default palette.
pub struct Oracles {
    pub verifier: OracleVerifier,
    pub reformulator: OracleReformulator,
    pub orm: OracleOrm,
}

impl Default for Oracles {
    fn default() -> Self {
        let p = Palette::default();
        Self {
            verifier: OracleVerifier::new(p.clone()),
            reformulator: OracleReformulator { palette: p.clone() },
            orm: OracleOrm { palette: p },
        }
    }
}

pub fn model() -> SceneLm {
    SceneLm::default_16x16()
}

pub fn counting_prompt() -> ScenePrompt {
    "8 red squares".parse().expect("valid prompt")
}

pub fn binding_prompt() -> ScenePrompt {
    "3 red squares and 2 blue circles".parse().expect("valid prompt")
}

/// Default plan, single-threaded, in `mode`.
pub fn serial_plan(mode: GuidanceMode) -> StagePlan {
    let mut plan = StagePlan { parallel: false, ..StagePlan::default() };
    plan.guidance.mode = mode;
    plan
}
