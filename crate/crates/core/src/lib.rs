//! Grid-partitioned progressive generation for autoregressive image-token
//! models: verifier pruning at partial-image checkpoints, layout-specified
//! prompt reformulation and three-way guidance.

pub mod canvas;
pub mod experiment;
pub mod guidance;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod verify;

pub use canvas::{CanvasError, CanvasSpec, SegmentSlice, TokenCanvas, TokenId, TokenSequence};
pub use experiment::{ExperimentConfig, ExperimentError, ExperimentReport, Method, SuiteSpec};
pub use guidance::{GuidanceConfig, GuidanceError, GuidanceMode};
pub use pipeline::{AllRejectedPolicy, BudgetLedger, Outcome, PipelineError, PromptBundle, StagePlan};
pub use scene::{ArModel, ModelSession, Palette, SceneLm, SceneLmParams, ScenePrompt};
pub use verify::{Judgment, Verdict, Verifier, VerifyError};
