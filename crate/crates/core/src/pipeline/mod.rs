//! Staged grid generation with verifier pruning, and the Best-of-N baseline.
//!
//! With `(R1, R2) = (4, 2)` on an `h`-row canvas:
//!
//! 1. four candidates decode rows `[0, h/4)` independently;
//! 2. the four quarters are composed into one grid and verified; rejected
//!    slots are refilled with copies of accepted ones (anchors), and each
//!    anchor may receive a layout-specified reformulated prompt;
//! 3. every anchor is continued to `h/2` rows; the halves are verified as
//!    two grids of two cells and pruned the same way;
//! 4. every survivor is completed and the outcome reward picks the best.
//!
//! Each start canvas yields `R1` finals, for `R1 * h * w` generated tokens.

mod decode;
mod ledger;
mod run;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::CanvasError;
use crate::guidance::{GuidanceConfig, GuidanceError};
use crate::scene::{ModelError, PromptError, SampleError};
use crate::verify::VerifyError;

pub use decode::{GuidedDecoder, PromptBundle};
pub use ledger::{BudgetLedger, LedgerCounters, Passes};
pub use run::{
    continue_from_anchors, generate_band_candidates, replace_rejected, replacement_sources, replay_candidate,
    run_best_of_n, run_gridar, AuditEvent, CandidateState, CandidateStatus, Outcome, Provenance,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid stage plan: {0}")]
    Plan(String),
    #[error("every candidate was judged impossible")]
    NoSurvivors,
    #[error("all candidates rejected at stage {stage} of start canvas {canvas}")]
    AllRejected { canvas: usize, stage: u8 },
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// What to do when a verifier rejects every slot of a start canvas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllRejectedPolicy {
    /// Regenerate the stage once with fresh substreams, then accept all.
    #[default]
    RetryOnceThenAcceptAll,
    AcceptAll,
    Abort,
}

impl std::str::FromStr for AllRejectedPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retry_once_then_accept_all" => Ok(Self::RetryOnceThenAcceptAll),
            "accept_all" => Ok(Self::AcceptAll),
            "abort" => Ok(Self::Abort),
            other => Err(format!("unknown all-rejected policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    pub r1: usize,
    pub r2: usize,
    pub n_start_canvases: usize,
    /// Stage boundaries (1 and/or 2) at which anchors are reformulated.
    pub reformulate_at: BTreeSet<u8>,
    pub guidance: GuidanceConfig,
    pub all_rejected_policy: AllRejectedPolicy,
    /// Decode the slots of a stage on the rayon pool.
    pub parallel: bool,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            r1: 4,
            r2: 2,
            n_start_canvases: 1,
            reformulate_at: BTreeSet::from([1]),
            guidance: GuidanceConfig::default(),
            all_rejected_policy: AllRejectedPolicy::default(),
            parallel: true,
        }
    }
}

impl StagePlan {
    pub fn with_bands(r1: usize, r2: usize) -> Self {
        Self { r1, r2, ..Self::default() }
    }

    /// Final images produced.
    pub fn effective_n(&self) -> usize {
        self.n_start_canvases * self.r1
    }

    pub fn validate(&self, h: usize) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Plan(m));
        if self.r1 == 0 || self.r2 == 0 || self.n_start_canvases == 0 {
            return bad("R1, R2 and the start canvas count must be positive".into());
        }
        if !self.r1.is_multiple_of(self.r2) {
            return bad(format!("R1 = {} is not a multiple of R2 = {}", self.r1, self.r2));
        }
        if !h.is_multiple_of(self.r1) {
            return bad(format!("canvas height {h} is not divisible by R1 = {}", self.r1));
        }
        if let Some(s) = self.reformulate_at.iter().find(|&&s| s != 1 && s != 2) {
            return bad(format!("reformulation boundary {s} is not 1 or 2"));
        }
        self.guidance.validate()?;
        Ok(())
    }

    /// Visible rows at the end of each stage, the last being `h`.
    pub fn boundaries(&self, h: usize) -> Result<Vec<usize>, PipelineError> {
        self.validate(h)?;
        let mut rows = vec![h / self.r1, h / self.r2, h];
        rows.dedup();
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_boundaries() {
        assert_eq!(StagePlan::default().boundaries(16).unwrap(), [4, 8, 16]);
        assert_eq!(StagePlan::with_bands(2, 2).boundaries(16).unwrap(), [8, 16]);
        assert_eq!(StagePlan::with_bands(4, 1).boundaries(16).unwrap(), [4, 16]);
        assert_eq!(StagePlan::with_bands(1, 1).boundaries(16).unwrap(), [16]);
        assert_eq!(StagePlan::default().effective_n(), 4);
    }

    #[test]
    fn invalid_plans() {
        assert!(StagePlan::with_bands(4, 3).validate(16).is_err());
        assert!(StagePlan::with_bands(3, 1).validate(16).is_err());
        assert!(StagePlan::with_bands(0, 1).validate(16).is_err());
        let mut p = StagePlan::default();
        p.reformulate_at.insert(3);
        assert!(p.validate(16).is_err());
    }

    #[test]
    fn plan_from_toml() {
        let p: StagePlan = toml::from_str("r1 = 8\nr2 = 4\nreformulate_at = [1, 2]\nall_rejected_policy = \"abort\"").unwrap();
        assert_eq!((p.r1, p.r2, p.all_rejected_policy), (8, 4, AllRejectedPolicy::Abort));
        assert!(toml::from_str::<StagePlan>("r3 = 1").is_err());
    }
}
