//! Autoregressive model interface and the toy scene language model.
//!
//! A model is opened once per condition; the returned session carries the
//! prepared condition and the incremental prefix state, and is forked by
//! cloning. Opening once and forking per candidate is the prefix-cache
//! contract the pipeline relies on.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::palette::{Palette, BACKGROUND};
use super::prompt::ScenePrompt;
use crate::canvas::{CanvasError, CanvasSpec, TokenId};

/// Unnormalized log-probabilities over the codebook. `-inf` encodes zero weight.
pub type Logits = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-sequential access: session prefix has {expected} tokens, asked for position {got}")]
    NonSequentialAccess { expected: usize, got: usize },
    #[error("canvas already holds all {0} tokens")]
    CanvasFull(usize),
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported condition: {0}")]
    UnsupportedCondition(String),
}

/// What a session is conditioned on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Condition {
    /// The null text.
    Null,
    Prompt(Arc<ScenePrompt>),
}

impl Condition {
    pub fn prompt(p: ScenePrompt) -> Self {
        Condition::Prompt(Arc::new(p))
    }
}

pub trait ModelSession: Clone + Send + Sync {
    fn prefix(&self) -> &[TokenId];

    /// Logits for `position`, which must equal the prefix length.
    fn next_logits(&self, position: usize) -> Result<Logits, ModelError>;

    fn append(&mut self, token: TokenId) -> Result<(), ModelError>;

    /// Feed a known prefix (e.g. an anchor) without sampling.
    fn extend(&mut self, tokens: &[TokenId]) -> Result<(), ModelError> {
        tokens.iter().try_for_each(|&t| self.append(t))
    }
}

pub trait ArModel: Send + Sync {
    type Session: ModelSession;

    fn canvas(&self) -> &CanvasSpec;

    /// Prepare `condition` once; fork the returned session to reuse it.
    fn open(&self, condition: &Condition) -> Result<Self::Session, ModelError>;

    /// Sampling temperature applied to guided logits.
    fn temperature(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneLmParams {
    pub beta_bg: f64,
    pub alpha: f64,
    /// Weight of object types the prompt does not mention.
    pub alpha_spurious: f64,
    /// Object weight under the null prompt.
    pub alpha_uncond: f64,
    /// Multiplier on required-object weight in the top quarter of rows.
    pub gamma_eager: f64,
    pub temperature: f64,
    /// Fraction of the canvas (in tokens) visible to the undirected object
    /// count. `1.0` counts the whole prefix.
    pub recall_fraction: f64,
}

impl Default for SceneLmParams {
    fn default() -> Self {
        Self {
            beta_bg: 4.0,
            alpha: 1.0,
            alpha_spurious: 0.03,
            alpha_uncond: 0.05,
            gamma_eager: 2.0,
            temperature: 1.0,
            recall_fraction: 0.5,
        }
    }
}

impl SceneLmParams {
    /// The rule with perfect memory of the prefix.
    pub fn full_recall() -> Self {
        Self { recall_fraction: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let weights = [
            ("beta_bg", self.beta_bg),
            ("alpha", self.alpha),
            ("alpha_spurious", self.alpha_spurious),
            ("alpha_uncond", self.alpha_uncond),
            ("temperature", self.temperature),
        ];
        for (name, v) in weights {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma_eager.is_finite() && self.gamma_eager >= 1.0) {
            return Err(ModelError::InvalidParams(format!(
                "gamma_eager must be >= 1, got {}",
                self.gamma_eager
            )));
        }
        let f = self.recall_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(ModelError::InvalidParams(format!("recall_fraction must be in (0, 1], got {f}")));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct SceneShared {
    spec: CanvasSpec,
    palette: Palette,
    params: SceneLmParams,
    recall: Option<usize>,
}

/// Closed-form toy model over colored glyph tokens.
///
/// `weight(bg) = beta_bg`. Under the null prompt every object weighs
/// `alpha_uncond`. Otherwise a required type weighs
/// `alpha * max(0, quota - drawn)` (times `gamma_eager` in the top quarter)
/// and any other type weighs `alpha_spurious`. Inside a directive band the
/// quota is the band's and `drawn` counts that band only; elsewhere the quota
/// is the prompt total and `drawn` counts the recall window.
#[derive(Debug, Clone)]
pub struct SceneLm {
    shared: Arc<SceneShared>,
}

impl SceneLm {
    pub fn new(spec: CanvasSpec, palette: Palette, params: SceneLmParams) -> Result<Self, ModelError> {
        spec.validate()?;
        params.validate()?;
        if spec.k != palette.k() {
            return Err(ModelError::InvalidParams(format!(
                "canvas codebook {} does not match palette size {}",
                spec.k,
                palette.k()
            )));
        }
        let recall = (params.recall_fraction < 1.0)
            .then(|| ((params.recall_fraction * spec.total() as f64).round() as usize).max(1));
        Ok(Self { shared: Arc::new(SceneShared { spec, palette, params, recall }) })
    }

    /// 16x16 canvas, default palette and parameters.
    pub fn default_16x16() -> Self {
        let palette = Palette::default();
        let spec = CanvasSpec::new(16, 16, palette.k(), 16).expect("valid spec");
        Self::new(spec, palette, SceneLmParams::default()).expect("valid defaults")
    }

    pub fn palette(&self) -> &Palette {
        &self.shared.palette
    }

    pub fn params(&self) -> &SceneLmParams {
        &self.shared.params
    }

    /// Tokens visible to the undirected count, if limited.
    pub fn recall_tokens(&self) -> Option<usize> {
        self.shared.recall
    }

    /// Logits for a fresh session at the end of `prefix`.
    pub fn logits_for(&self, condition: &Condition, prefix: &[TokenId]) -> Result<Logits, ModelError> {
        let mut s = self.open(condition)?;
        s.extend(prefix)?;
        s.next_logits(prefix.len())
    }
}

#[derive(Debug)]
enum Prepared {
    Null,
    Prompt {
        /// Total quota by token id; `None` for types the prompt omits.
        totals: Vec<Option<u32>>,
        bands: Vec<(Range<usize>, Vec<u32>)>,
    },
}

#[derive(Debug, Clone)]
pub struct SceneSession {
    shared: Arc<SceneShared>,
    cond: Arc<Prepared>,
    prefix: Vec<TokenId>,
    /// Histogram of the last `recall` tokens.
    window: Vec<u32>,
    /// Histogram per directive band.
    band_counts: Vec<Vec<u32>>,
}

impl ArModel for SceneLm {
    type Session = SceneSession;

    fn canvas(&self) -> &CanvasSpec {
        &self.shared.spec
    }

    fn temperature(&self) -> f64 {
        self.shared.params.temperature
    }

    fn open(&self, condition: &Condition) -> Result<SceneSession, ModelError> {
        let k = self.shared.spec.k;
        let palette = &self.shared.palette;
        let cond = match condition {
            Condition::Null => Prepared::Null,
            Condition::Prompt(p) => {
                let mut totals = vec![None; k];
                for (&ty, &n) in p.requirements() {
                    let t = palette.token_of(ty).ok_or_else(|| {
                        ModelError::UnsupportedCondition(format!("{ty} is not in the palette"))
                    })?;
                    totals[t as usize] = Some(n);
                }
                let bands = p
                    .directives()
                    .iter()
                    .map(|d| {
                        let mut q = vec![0u32; k];
                        for (&ty, &n) in &d.quotas {
                            if let Some(t) = palette.token_of(ty) {
                                q[t as usize] = n;
                            }
                        }
                        (d.rows.clone(), q)
                    })
                    .collect();
                Prepared::Prompt { totals, bands }
            }
        };
        let n_bands = match &cond {
            Prepared::Null => 0,
            Prepared::Prompt { bands, .. } => bands.len(),
        };
        Ok(SceneSession {
            shared: Arc::clone(&self.shared),
            cond: Arc::new(cond),
            prefix: Vec::with_capacity(self.shared.spec.total()),
            window: vec![0; k],
            band_counts: vec![vec![0; k]; n_bands],
        })
    }
}

fn ln_weight(w: f64) -> f64 {
    if w > 0.0 {
        w.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl ModelSession for SceneSession {
    fn prefix(&self) -> &[TokenId] {
        &self.prefix
    }

    fn next_logits(&self, position: usize) -> Result<Logits, ModelError> {
        let spec = &self.shared.spec;
        if position != self.prefix.len() {
            return Err(ModelError::NonSequentialAccess { expected: self.prefix.len(), got: position });
        }
        if position >= spec.total() {
            return Err(ModelError::CanvasFull(spec.total()));
        }
        let p = &self.shared.params;
        let mut logits = vec![0.0; spec.k];
        logits[BACKGROUND as usize] = p.beta_bg.ln();
        match self.cond.as_ref() {
            Prepared::Null => {
                let l = p.alpha_uncond.ln();
                logits.iter_mut().skip(1).for_each(|x| *x = l);
            }
            Prepared::Prompt { totals, bands } => {
                let row = spec.row_of(position);
                let eager = if 4 * row < spec.h { p.gamma_eager } else { 1.0 };
                let band = bands.iter().position(|(rows, _)| rows.contains(&row));
                for t in 1..spec.k {
                    let w = match totals[t] {
                        None => p.alpha_spurious,
                        Some(total) => {
                            let (quota, drawn) = match band {
                                Some(b) => (bands[b].1[t], self.band_counts[b][t]),
                                None => (total, self.window[t]),
                            };
                            let need = quota.saturating_sub(drawn) as f64;
                            p.alpha * need * eager
                        }
                    };
                    logits[t] = ln_weight(w);
                }
            }
        }
        Ok(logits)
    }

    fn append(&mut self, token: TokenId) -> Result<(), ModelError> {
        let spec = &self.shared.spec;
        let pos = self.prefix.len();
        if pos >= spec.total() {
            return Err(ModelError::CanvasFull(spec.total()));
        }
        spec.check_token(token)?;
        self.prefix.push(token);
        self.window[token as usize] += 1;
        if let Some(recall) = self.shared.recall {
            if self.prefix.len() > recall {
                let evicted = self.prefix[self.prefix.len() - 1 - recall];
                self.window[evicted as usize] -= 1;
            }
        }
        if let Prepared::Prompt { bands, .. } = self.cond.as_ref() {
            let row = spec.row_of(pos);
            for (b, (rows, _)) in bands.iter().enumerate() {
                if rows.contains(&row) {
                    self.band_counts[b][token as usize] += 1;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::palette::{Color, ObjectType, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RED_SQUARE: ObjectType = ObjectType::new(Color::Red, Shape::Square);

    fn prompt(s: &str) -> Condition {
        Condition::prompt(s.parse().unwrap())
    }

    #[test]
    fn eight_red_squares_at_origin() {
        // Hand-applied rule: red-square 1.0 * 8 * 2.0, bg 4.0, others 0.03.
        let lm = SceneLm::default_16x16();
        let logits = lm.logits_for(&prompt("8 red squares"), &[]).unwrap();
        let red = lm.palette().token_of(RED_SQUARE).unwrap() as usize;
        assert_eq!(logits[red], 16f64.ln());
        assert_eq!(logits[0], 4f64.ln());
        let blue_circle = lm
            .palette()
            .token_of(ObjectType::new(Color::Blue, Shape::Circle))
            .unwrap() as usize;
        assert_eq!(logits[blue_circle], 0.03f64.ln());
    }

    #[test]
    fn spec_default_spurious_weight_is_configurable() {
        let palette = Palette::default();
        let spec = CanvasSpec::new(16, 16, 13, 4).unwrap();
        let params = SceneLmParams { alpha_spurious: 0.01, ..SceneLmParams::full_recall() };
        let lm = SceneLm::new(spec, palette, params).unwrap();
        let logits = lm.logits_for(&prompt("8 red squares"), &[]).unwrap();
        assert_eq!(logits[12], 0.01f64.ln());
        assert_eq!(logits[1], 16f64.ln());
    }

    #[test]
    fn null_prompt_is_uniform_over_objects() {
        let lm = SceneLm::default_16x16();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prefix: Vec<TokenId> = (0..37).map(|_| rng.random_range(0..13)).collect();
        let logits = lm.logits_for(&Condition::Null, &prefix).unwrap();
        assert_eq!(logits[0], 4f64.ln());
        assert!(logits[1..].iter().all(|&l| l == 0.05f64.ln()));
    }

    #[test]
    fn saturated_type_gets_sentinel() {
        let lm = SceneLm::default_16x16();
        let red = lm.palette().token_of(RED_SQUARE).unwrap();
        let logits = lm.logits_for(&prompt("2 red squares"), &[red, 0, red]).unwrap();
        assert_eq!(logits[red as usize], f64::NEG_INFINITY);
        assert!(logits.iter().any(|l| l.is_finite()));
    }

    #[test]
    fn eager_multiplier_only_in_top_quarter() {
        let lm = SceneLm::default_16x16();
        let c = prompt("3 red squares");
        let top = lm.logits_for(&c, &[0; 63]).unwrap();
        let below = lm.logits_for(&c, &[0; 64]).unwrap();
        assert_eq!(top[1], 6f64.ln());
        assert_eq!(below[1], 3f64.ln());
    }

    #[test]
    fn recall_window_forgets_old_objects() {
        let lm = SceneLm::default_16x16();
        assert_eq!(lm.recall_tokens(), Some(128));
        let c = prompt("1 red square");
        let mut prefix = vec![1];
        prefix.extend(std::iter::repeat_n(0, 127));
        // object at position 0 is still inside the last 128 tokens
        assert_eq!(lm.logits_for(&c, &prefix).unwrap()[1], f64::NEG_INFINITY);
        prefix.push(0);
        assert_eq!(lm.logits_for(&c, &prefix).unwrap()[1], 0f64);
    }

    #[test]
    fn directive_band_counts_exactly() {
        let lm = SceneLm::default_16x16();
        let c = prompt(
            "2 red squares, arranged as 1 red square in the top rows 0-3; 1 red square in the bottom rows 4-15",
        );
        let mut prefix = vec![1];
        prefix.extend(std::iter::repeat_n(0, 63));
        // band 1 starts empty: need 1, not eager
        assert_eq!(lm.logits_for(&c, &prefix).unwrap()[1], 0f64);
        prefix.push(1);
        prefix.extend(std::iter::repeat_n(0, 150));
        assert_eq!(lm.logits_for(&c, &prefix).unwrap()[1], f64::NEG_INFINITY);
    }

    #[test]
    fn non_sequential_access_is_rejected() {
        let lm = SceneLm::default_16x16();
        let s = lm.open(&Condition::Null).unwrap();
        assert_eq!(
            s.next_logits(3),
            Err(ModelError::NonSequentialAccess { expected: 0, got: 3 })
        );
    }

    #[test]
    fn full_canvas_and_bad_tokens() {
        let palette = Palette::default();
        let spec = CanvasSpec::new(1, 2, 13, 4).unwrap();
        let lm = SceneLm::new(spec, palette, SceneLmParams::default()).unwrap();
        let mut s = lm.open(&Condition::Null).unwrap();
        assert!(s.append(13).is_err());
        s.extend(&[0, 0]).unwrap();
        assert_eq!(s.next_logits(2), Err(ModelError::CanvasFull(2)));
        assert_eq!(s.append(0), Err(ModelError::CanvasFull(2)));
    }

    #[test]
    fn rejects_bad_params_and_foreign_prompts() {
        let palette = Palette::default();
        let spec = CanvasSpec::new(4, 4, 13, 4).unwrap();
        let bad = SceneLmParams { alpha: 0.0, ..Default::default() };
        assert!(SceneLm::new(spec, palette.clone(), bad).is_err());
        let bad = SceneLmParams { gamma_eager: 0.5, ..Default::default() };
        assert!(SceneLm::new(spec, palette.clone(), bad).is_err());
        let tiny = Palette::new(vec![Color::Red], vec![Shape::Square, Shape::Circle]);
        let tiny_spec = CanvasSpec::new(2, 2, 3, 4).unwrap();
        let lm = SceneLm::new(tiny_spec, tiny, SceneLmParams::default()).unwrap();
        assert!(matches!(
            lm.open(&prompt("1 blue circle")),
            Err(ModelError::UnsupportedCondition(_))
        ));
    }

    #[test]
    fn forked_sessions_match_fresh_sessions() {
        let lm = SceneLm::default_16x16();
        let conds = [
            Condition::Null,
            prompt("8 red squares"),
            prompt("2 red squares and 3 blue circles"),
            prompt("5 green triangles, arranged as 2 green triangles in the top rows 0-7; 3 green triangles in the bottom rows 8-15"),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..1000 {
            let cond = &conds[i % conds.len()];
            let fork_at = rng.random_range(0..200);
            let len = rng.random_range(fork_at..255);
            let prefix: Vec<TokenId> = (0..len)
                .map(|_| if rng.random_bool(0.8) { 0 } else { rng.random_range(1..13) })
                .collect();
            let mut base = lm.open(cond).unwrap();
            base.extend(&prefix[..fork_at]).unwrap();
            let mut fork = base.clone();
            fork.extend(&prefix[fork_at..]).unwrap();
            // drive the original independently to check isolation
            base.append(5).unwrap();
            assert_eq!(fork.next_logits(len).unwrap(), lm.logits_for(cond, &prefix).unwrap());
        }
    }
}
