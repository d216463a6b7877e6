//! Per-token guided decoding over parallel condition streams.

use std::sync::Arc;

use rand::Rng;

use super::ledger::{LedgerCounters, Passes};
use super::PipelineError;
use crate::canvas::{TokenId, TokenSequence};
use crate::guidance::{cfg_combine, replacement_combine, three_way_combine, GuidanceConfig, GuidanceMode};
use crate::scene::{sample_token, ArModel, Condition, ModelSession, ScenePrompt};

/// Unconditional, original and (once produced) reformulated conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub original: Arc<ScenePrompt>,
    pub reformulated: Option<Arc<ScenePrompt>>,
}

impl PromptBundle {
    pub fn new(original: ScenePrompt) -> Self {
        Self { original: Arc::new(original), reformulated: None }
    }

    /// The prompt whose layout currently steers decoding.
    pub fn effective(&self) -> &ScenePrompt {
        self.reformulated.as_deref().unwrap_or(&self.original)
    }
}

/// One candidate's decoding state: a session per condition, all holding the
/// same prefix.
#[derive(Debug, Clone)]
pub struct GuidedDecoder<S> {
    guidance: GuidanceConfig,
    temperature: f64,
    bundle: PromptBundle,
    uncond: S,
    original: S,
    reformulated: Option<S>,
}

impl<S: ModelSession> GuidedDecoder<S> {
    pub fn open<M>(model: &M, bundle: PromptBundle, guidance: GuidanceConfig) -> Result<Self, PipelineError>
    where
        M: ArModel<Session = S>,
    {
        guidance.validate()?;
        let uncond = model.open(&Condition::Null)?;
        let original = model.open(&Condition::Prompt(Arc::clone(&bundle.original)))?;
        let reformulated = match &bundle.reformulated {
            Some(p) => Some(model.open(&Condition::Prompt(Arc::clone(p)))?),
            None => None,
        };
        Ok(Self { guidance, temperature: model.temperature(), bundle, uncond, original, reformulated })
    }

    pub fn prefix(&self) -> &[TokenId] {
        self.uncond.prefix()
    }

    pub fn bundle(&self) -> &PromptBundle {
        &self.bundle
    }

    pub fn guidance(&self) -> &GuidanceConfig {
        &self.guidance
    }

    /// Feed known tokens to every stream without sampling.
    pub fn extend(&mut self, tokens: &[TokenId]) -> Result<(), PipelineError> {
        self.uncond.extend(tokens)?;
        self.original.extend(tokens)?;
        if let Some(r) = &mut self.reformulated {
            r.extend(tokens)?;
        }
        Ok(())
    }

    /// Switch the reformulated condition; the new stream prefills the
    /// current prefix.
    pub fn set_reformulated<M>(
        &mut self,
        model: &M,
        prompt: ScenePrompt,
        ledger: &LedgerCounters,
    ) -> Result<(), PipelineError>
    where
        M: ArModel<Session = S>,
    {
        let prompt = Arc::new(prompt);
        let mut session = model.open(&Condition::Prompt(Arc::clone(&prompt)))?;
        session.extend(self.prefix())?;
        ledger.prefill(self.prefix().len() as u64);
        self.reformulated = Some(session);
        self.bundle.reformulated = Some(prompt);
        Ok(())
    }

    /// Sample and append one token.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R, ledger: &LedgerCounters) -> Result<TokenId, PipelineError> {
        let pos = self.prefix().len();
        let g = &self.guidance;
        let l_u = self.uncond.next_logits(pos)?;
        let (logits, passes) = match (g.mode, &self.reformulated) {
            (GuidanceMode::ThreeWay, Some(r)) => {
                let l_o = self.original.next_logits(pos)?;
                let l_r = r.next_logits(pos)?;
                (
                    three_way_combine(&l_u, &l_o, &l_r, g)?,
                    Passes { uncond: true, original: true, reformulated: true },
                )
            }
            (GuidanceMode::Replacement, Some(r)) => {
                let l_r = r.next_logits(pos)?;
                (replacement_combine(&l_u, &l_r, g.s_r)?, Passes { uncond: true, original: false, reformulated: true })
            }
            _ => {
                let l_o = self.original.next_logits(pos)?;
                (cfg_combine(&l_o, &l_u, g.s_o)?, Passes { uncond: true, original: true, reformulated: false })
            }
        };
        let token = sample_token(&logits, self.temperature, rng)?;
        ledger.token(passes);
        self.uncond.append(token)?;
        self.original.append(token)?;
        if let Some(r) = &mut self.reformulated {
            r.append(token)?;
        }
        Ok(token)
    }

    /// Decode until the prefix holds `len` tokens.
    pub fn decode_to<R: Rng + ?Sized>(
        &mut self,
        len: usize,
        rng: &mut R,
        ledger: &LedgerCounters,
    ) -> Result<(), PipelineError> {
        while self.prefix().len() < len {
            self.step(rng, ledger)?;
        }
        Ok(())
    }

    pub fn tokens(&self) -> TokenSequence {
        self.prefix().to_vec()
    }
}
