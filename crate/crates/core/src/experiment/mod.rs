//! Prompt suites, the pilot study, method comparison and reports.

mod compare;
mod pilot;
mod report;
mod suite;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{CanvasError, CanvasSpec};
use crate::guidance::GuidanceMode;
use crate::pipeline::{PipelineError, StagePlan};
use crate::scene::{ModelError, Palette, SceneLm, SceneLmParams};
use crate::verify::{AcceptAll, OracleVerifier, RemoteConfig, RemoteVerifier, Verifier, VerifyError};

pub use compare::{run_compare, wilson_interval, MethodSummary, PromptOutcome};
pub use pilot::{failing_prompts, freeze_prefix, pilot_study, run_pilot, PilotArm, PilotReport};
pub use report::{replay_report, write_csv, write_json, ExperimentReport};
pub use suite::{gen_suite, Category, SuitePrompt, SuiteSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("empty suite spec: {0}")]
    EmptySpec(String),
    #[error("no prompt in the suite fails with a single sample")]
    NoFailingPrompts,
    #[error("budget identity violated by {method} on {prompt_id}: {detail}")]
    BudgetViolation { method: String, prompt_id: String, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CanvasConfig {
    pub h: usize,
    pub w: usize,
    pub tile_px: usize,
}

impl Default for CanvasConfig {
    fn default() -> Self {
        Self { h: 16, w: 16, tile_px: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    Oracle,
    Remote,
    AcceptAll,
}

impl FromStr for VerifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "remote" => Ok(Self::Remote),
            "accept_all" => Ok(Self::AcceptAll),
            other => Err(format!("unknown verifier `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierConfig {
    pub kind: VerifierKind,
    /// Probability that the oracle flips a verdict.
    pub error_rate: f64,
    pub remote: RemoteConfig,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self { kind: VerifierKind::Oracle, error_rate: 0.0, remote: RemoteConfig::default() }
    }
}

/// A row of the comparison matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Staged generation with the configured verifier and guidance.
    GridAr,
    BestOfN(usize),
    /// Staged generation, verifier replaced by accept-all.
    NoVerifier,
    /// Staged generation without reformulation.
    NoReformulation,
    /// Accept-all verifier and no reformulation.
    NoVerifierNoReformulation,
    /// Staged generation in prompt-replacement guidance mode.
    Replacement,
}

impl Method {
    pub fn defaults() -> Vec<Method> {
        vec![
            Method::GridAr,
            Method::BestOfN(4),
            Method::BestOfN(8),
            Method::NoVerifier,
            Method::NoReformulation,
            Method::NoVerifierNoReformulation,
            Method::Replacement,
        ]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::GridAr => f.write_str("gridar"),
            Method::BestOfN(n) => write!(f, "best_of_n:{n}"),
            Method::NoVerifier => f.write_str("gridar/no_verifier"),
            Method::NoReformulation => f.write_str("gridar/no_reformulation"),
            Method::NoVerifierNoReformulation => f.write_str("gridar/no_verifier+no_reformulation"),
            Method::Replacement => f.write_str("gridar/replacement"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(n) = s.strip_prefix("best_of_n:") {
            return match n.parse() {
                Ok(n) if n >= 1 => Ok(Method::BestOfN(n)),
                _ => Err(format!("bad N in `{s}`")),
            };
        }
        [
            Method::GridAr,
            Method::NoVerifier,
            Method::NoReformulation,
            Method::NoVerifierNoReformulation,
            Method::Replacement,
        ]
        .into_iter()
        .find(|m| m.to_string() == s)
        .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotConfig {
    pub n_prompts: usize,
    pub counts_range: [u32; 2],
    pub k_values: Vec<usize>,
    /// Upper-half draws tried before a prompt is skipped.
    pub prefix_attempts: usize,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self { n_prompts: 200, counts_range: [6, 9], k_values: vec![1, 2, 4, 8, 16, 32], prefix_attempts: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub canvas: CanvasConfig,
    pub model: SceneLmParams,
    pub plan: StagePlan,
    pub verifier: VerifierConfig,
    pub suite: SuiteSpec,
    pub methods: Vec<Method>,
    pub pilot: PilotConfig,
    /// Run prompts on the rayon pool.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            canvas: CanvasConfig::default(),
            model: SceneLmParams::default(),
            plan: StagePlan::default(),
            verifier: VerifierConfig::default(),
            suite: SuiteSpec::default(),
            methods: Method::defaults(),
            pilot: PilotConfig::default(),
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn palette(&self) -> Palette {
        Palette::default()
    }

    pub fn model(&self) -> Result<SceneLm, ExperimentError> {
        let palette = self.palette();
        let spec = CanvasSpec::new(self.canvas.h, self.canvas.w, palette.k(), self.canvas.tile_px)?;
        Ok(SceneLm::new(spec, palette, self.model.clone())?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.plan.validate(self.canvas.h)?;
        if !(0.0..=1.0).contains(&self.verifier.error_rate) {
            return Err(ExperimentError::Config(format!("error_rate {} is not in [0, 1]", self.verifier.error_rate)));
        }
        if self.suite.rows != self.canvas.h && self.suite.categories.contains(&Category::SpatialBand) {
            return Err(ExperimentError::Config("suite.rows must equal canvas.h".into()));
        }
        if self.pilot.k_values.is_empty() || self.pilot.k_values.contains(&0) {
            return Err(ExperimentError::Config("pilot k_values must be positive".into()));
        }
        Ok(())
    }

    pub fn verifier(&self) -> Box<dyn Verifier> {
        let palette = self.palette();
        match self.verifier.kind {
            VerifierKind::Oracle => {
                Box::new(OracleVerifier::new(palette).with_error_rate(self.verifier.error_rate, self.seed))
            }
            VerifierKind::Remote => Box::new(RemoteVerifier::new(self.verifier.remote.clone().with_env_token(), palette)),
            VerifierKind::AcceptAll => Box::new(AcceptAll),
        }
    }

    /// Copy with the plan's guidance mode replaced.
    pub fn with_guidance_mode(&self, mode: GuidanceMode) -> Self {
        let mut c = self.clone();
        c.plan.guidance.mode = mode;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::defaults() {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("best_of_n:0".parse::<Method>().is_err());
        assert!("beam".parse::<Method>().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let partial = ExperimentConfig::from_toml("seed = 5\n[plan]\nr1 = 8\nr2 = 2\n").unwrap();
        assert_eq!((partial.seed, partial.plan.r1, partial.plan.r2), (5, 8, 2));
        assert!(ExperimentConfig::from_toml("sede = 5").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        c.validate().unwrap();
        c.verifier.error_rate = 1.5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.plan.r1 = 5;
        assert!(c.validate().is_err());
    }
}
