//! Toy scene world: palette, prompt grammar, the scene language model,
//! sampler, renderer and ground-truth counters.

pub mod counts;
pub mod model;
pub mod palette;
pub mod prompt;
pub mod render;
pub mod sampling;

pub use counts::{scene_counts, CountTable};
pub use model::{ArModel, Condition, Logits, ModelError, ModelSession, SceneLm, SceneLmParams, SceneSession};
pub use palette::{Color, ObjectType, Palette, Shape, BACKGROUND};
pub use prompt::{Directive, PromptError, Quotas, ScenePrompt};
pub use render::{render, Image, RenderError};
pub use sampling::{sample_token, softmax, SampleError};
