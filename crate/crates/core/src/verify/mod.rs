//! Verifiers, reformulators and outcome rewards.
//!
//! A verifier sees one composed grid of `rows` cells and returns one verdict
//! per cell. Only impossibility is ever asserted: a cell the verifier cannot
//! rule out stays in the candidate pool.

pub mod oracle;
pub mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{CanvasError, CanvasSpec, TokenCanvas, TokenId};
use crate::scene::{PromptError, RenderError, ScenePrompt};

pub use oracle::{
    judge_prefix, oracle_judge, oracle_orm, oracle_reformulate, AcceptAll, OracleOrm, OracleReformulator, OracleVerifier,
};
pub use wire::{RemoteConfig, RemoteError, RemoteProfile, RemoteVerifier, VerificationRequest, VerificationResponse};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("grid has {filled} of {total} tokens populated")]
    UnpopulatedCanvas { filled: usize, total: usize },
    #[error("cannot reformulate: drawn {drawn} exceeds quota {quota} for {ty}")]
    InfeasibleRemainder { ty: String, drawn: u32, quota: u32 },
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgment {
    Possible,
    Impossible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub candidate_index: usize,
    pub judgment: Judgment,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Verdict {
    pub fn possible(candidate_index: usize) -> Self {
        Self { candidate_index, judgment: Judgment::Possible, reason: None }
    }

    pub fn impossible(candidate_index: usize, reason: impl Into<String>) -> Self {
        Self { candidate_index, judgment: Judgment::Impossible, reason: Some(reason.into()) }
    }

    pub fn is_possible(&self) -> bool {
        self.judgment == Judgment::Possible
    }
}

/// A composed verification grid.
#[derive(Debug, Clone, Copy)]
pub struct GridRequest<'a> {
    /// `rows` cells stacked top to bottom; cell `i` shows the first
    /// `h / rows` rows of candidate `i`.
    pub canvas: &'a TokenCanvas,
    pub rows: usize,
    pub stage: u8,
    pub prompt: &'a ScenePrompt,
    pub want_reformulation: bool,
}

impl GridRequest<'_> {
    /// Rows of the final image visible in each cell.
    pub fn visible_rows(&self) -> usize {
        self.canvas.spec().h / self.rows
    }

    pub fn cell(&self, index: usize) -> CellView<'_> {
        let spec = *self.canvas.spec();
        let len = self.visible_rows() * spec.w;
        CellView {
            spec,
            tokens: &self.canvas.tokens()[index * len..(index + 1) * len],
            visible_rows: self.visible_rows(),
        }
    }
}

/// One candidate's visible rows, in final-image coordinates.
#[derive(Debug, Clone, Copy)]
pub struct CellView<'a> {
    pub spec: CanvasSpec,
    pub tokens: &'a [TokenId],
    pub visible_rows: usize,
}

/// A reformulated prompt proposed by a verifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ReformulationHint {
    pub text: String,
    /// Structured form when the verifier supplied directives or the text
    /// parsed under the prompt grammar.
    pub prompt: Option<ScenePrompt>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridJudgment {
    pub verdicts: Vec<Verdict>,
    pub hint: Option<ReformulationHint>,
}

pub trait Verifier: Send + Sync {
    fn verify(&self, request: &GridRequest<'_>) -> Result<GridJudgment, VerifyError>;
}

pub trait Reformulator: Send + Sync {
    /// Layout-specified prompt for continuing `cell`, or `None` to keep the
    /// current prompt.
    fn reformulate(
        &self,
        prompt: &ScenePrompt,
        cell: &CellView<'_>,
        hint: Option<&ReformulationHint>,
    ) -> Result<Option<ScenePrompt>, VerifyError>;
}

/// Uses whatever structured prompt the verifier proposed.
#[derive(Debug, Clone, Copy, Default)]
pub struct HintReformulator;

impl Reformulator for HintReformulator {
    fn reformulate(
        &self,
        _prompt: &ScenePrompt,
        _cell: &CellView<'_>,
        hint: Option<&ReformulationHint>,
    ) -> Result<Option<ScenePrompt>, VerifyError> {
        Ok(hint.and_then(|h| h.prompt.clone()))
    }
}

/// Never reformulates.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoReformulation;

impl Reformulator for NoReformulation {
    fn reformulate(
        &self,
        _prompt: &ScenePrompt,
        _cell: &CellView<'_>,
        _hint: Option<&ReformulationHint>,
    ) -> Result<Option<ScenePrompt>, VerifyError> {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrmScore {
    pub candidate_index: usize,
    pub score: f64,
}

/// Highest score; ties go to the lowest candidate index.
pub fn select_best(scores: &[OrmScore]) -> Option<OrmScore> {
    scores.iter().copied().fold(None, |best, s| match best {
        None => Some(s),
        Some(b) if s.score > b.score || (s.score == b.score && s.candidate_index < b.candidate_index) => Some(s),
        keep => keep,
    })
}

pub trait OutcomeReward: Send + Sync {
    fn score(&self, candidate_index: usize, image: &TokenCanvas, prompt: &ScenePrompt) -> Result<OrmScore, VerifyError>;
}
