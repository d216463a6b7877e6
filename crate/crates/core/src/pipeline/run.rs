use std::time::Instant;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decode::{GuidedDecoder, PromptBundle};
use super::ledger::{BudgetLedger, LedgerCounters};
use super::{AllRejectedPolicy, PipelineError, StagePlan};
use crate::canvas::{compose_grid, CanvasSpec, TokenCanvas, TokenSequence};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::rng::{self, SeedKey};
use crate::scene::{ArModel, ModelSession, ScenePrompt};
use crate::verify::oracle::prefix_cell;
use crate::verify::{
    select_best, GridRequest, Judgment, OrmScore, OutcomeReward, ReformulationHint, Reformulator, Verdict, Verifier,
};

const TAG_STAGE: u64 = 0x5354_4147;
const TAG_REPLACE: u64 = 0x5245_504c;
const TAG_BEST_OF_N: u64 = 0x424f_4e00;

fn stage_key(master: u64, canvas: usize, stage: u8, attempt: u32) -> SeedKey {
    SeedKey::new(master)
        .with(TAG_STAGE)
        .with(canvas as u64)
        .with(stage as u64)
        .with(attempt as u64)
}

/// One decoded segment of a candidate's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: u8,
    /// Slot that decoded the segment.
    pub slot: usize,
    /// Slot whose anchor this slot continued, when it was a replacement.
    pub replaced_from: Option<usize>,
    pub attempt: u32,
    pub seed: u64,
    /// Rows visible after the segment.
    pub rows_end: usize,
    /// Reformulated prompt in effect while decoding the segment.
    pub condition: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Active,
    Rejected,
    Anchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateState {
    pub tokens: TokenSequence,
    pub origin: Vec<Provenance>,
    pub status: CandidateStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Generated { canvas: usize, stage: u8, attempt: u32, slot: usize, seed: u64, tokens: usize },
    Verdict { canvas: usize, stage: u8, attempt: u32, slot: usize, judgment: Judgment, reason: Option<String> },
    VerifierFallback { canvas: usize, stage: u8, grid: usize, error: String },
    AllRejected { canvas: usize, stage: u8, attempt: u32, action: AllRejectedPolicy },
    Reformulation { canvas: usize, stage: u8, slot: usize, prompt: String },
    ReformulationFailed { canvas: usize, stage: u8, slot: usize, error: String },
    Replacement { canvas: usize, stage: u8, slot: usize, source: usize },
    Score { candidate: usize, score: f64 },
    Selected { candidate: usize, score: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub best_index: usize,
    pub best_score: f64,
    pub finals: Vec<CandidateState>,
    pub scores: Vec<f64>,
    pub ledger: BudgetLedger,
    pub audit: Vec<AuditEvent>,
}

impl Outcome {
    pub fn best(&self) -> &CandidateState {
        &self.finals[self.best_index]
    }

    /// The selected image matches the prompt exactly.
    pub fn success(&self) -> bool {
        self.best_score == 0.0
    }
}

/// Source slot for every position: accepted slots keep themselves, each
/// rejected slot draws an accepted one uniformly and independently.
pub fn replacement_sources<R: Rng + ?Sized>(verdicts: &[Verdict], rng: &mut R) -> Result<Vec<usize>, PipelineError> {
    let accepted: Vec<usize> = (0..verdicts.len()).filter(|&i| verdicts[i].is_possible()).collect();
    if accepted.is_empty() {
        return Err(PipelineError::NoSurvivors);
    }
    Ok((0..verdicts.len())
        .map(|i| if verdicts[i].is_possible() { i } else { accepted[rng.random_range(0..accepted.len())] })
        .collect())
}

/// Anchors after replacing rejected candidates.
pub fn replace_rejected<T: Clone, R: Rng + ?Sized>(
    candidates: &[T],
    verdicts: &[Verdict],
    rng: &mut R,
) -> Result<Vec<T>, PipelineError> {
    if candidates.len() != verdicts.len() {
        return Err(PipelineError::Plan(format!(
            "{} candidates but {} verdicts",
            candidates.len(),
            verdicts.len()
        )));
    }
    Ok(replacement_sources(verdicts, rng)?.into_iter().map(|i| candidates[i].clone()).collect())
}

fn for_each_slot<T, F>(items: &mut [T], parallel: bool, f: F) -> Result<(), PipelineError>
where
    T: Send,
    F: Fn(usize, &mut T) -> Result<(), PipelineError> + Sync + Send,
{
    if parallel {
        items.par_iter_mut().enumerate().try_for_each(|(i, t)| f(i, t))
    } else {
        items.iter_mut().enumerate().try_for_each(|(i, t)| f(i, t))
    }
}

/// Final slots of one start canvas and its audit trail.
type CanvasRun<S> = (Vec<Slot<S>>, Vec<AuditEvent>);

#[derive(Debug, Clone)]
struct Slot<S> {
    dec: GuidedDecoder<S>,
    origin: Vec<Provenance>,
    replaced_from: Option<usize>,
}

impl<S: ModelSession> Slot<S> {
    fn state(&self, status: CandidateStatus) -> CandidateState {
        CandidateState { tokens: self.dec.tokens(), origin: self.origin.clone(), status }
    }
}

#[allow(clippy::too_many_arguments)]
fn extend_slots<S: ModelSession>(
    slots: &mut [Slot<S>],
    rows: usize,
    w: usize,
    key: SeedKey,
    stage: u8,
    attempt: u32,
    ledger: &LedgerCounters,
    parallel: bool,
) -> Result<(), PipelineError> {
    for_each_slot(slots, parallel, |i, slot| {
        let seed = key.with(i as u64).finish();
        slot.origin.push(Provenance {
            stage,
            slot: i,
            replaced_from: slot.replaced_from.take(),
            attempt,
            seed,
            rows_end: rows,
            condition: slot.dec.bundle().reformulated.as_ref().map(|p| p.to_string()),
        });
        let mut r = rng::Rng::seed_from_u64(seed);
        slot.dec.decode_to(rows * w, &mut r, ledger)
    })
}

/// `r1` opening segments of `(h / r1) * w` tokens, each decoded on its own
/// substream of `master`.
pub fn generate_band_candidates<M: ArModel>(
    model: &M,
    bundle: &PromptBundle,
    guidance: GuidanceConfig,
    r1: usize,
    master: u64,
    ledger: &LedgerCounters,
) -> Result<Vec<TokenSequence>, PipelineError> {
    let spec = *model.canvas();
    StagePlan { r1, r2: 1, guidance, ..StagePlan::default() }.validate(spec.h)?;
    let dec = GuidedDecoder::open(model, bundle.clone(), guidance)?;
    let mut slots = vec![Slot { dec, origin: Vec::new(), replaced_from: None }; r1];
    extend_slots(&mut slots, spec.h / r1, spec.w, stage_key(master, 0, 1, 0), 1, 0, ledger, true)?;
    Ok(slots.iter().map(|s| s.dec.tokens()).collect())
}

/// Extend every anchor to `target_rows` rows. Anchor tokens are fed to the
/// condition streams unchanged and counted as prefill.
#[allow(clippy::too_many_arguments)]
pub fn continue_from_anchors<M: ArModel>(
    model: &M,
    anchors: &[TokenSequence],
    bundles: &[PromptBundle],
    target_rows: usize,
    guidance: GuidanceConfig,
    master: u64,
    stage: u8,
    ledger: &LedgerCounters,
) -> Result<Vec<TokenSequence>, PipelineError> {
    let spec = *model.canvas();
    if anchors.len() != bundles.len() || target_rows > spec.h {
        return Err(PipelineError::Plan("anchors, bundles and target rows do not fit".into()));
    }
    let mut slots = anchors
        .iter()
        .zip(bundles)
        .map(|(a, b)| {
            if a.len() % spec.w != 0 || a.len() > target_rows * spec.w {
                return Err(PipelineError::Plan(format!("anchor of {} tokens is not a row prefix", a.len())));
            }
            let mut dec = GuidedDecoder::open(model, b.clone(), guidance)?;
            dec.extend(a)?;
            ledger.prefill(a.len() as u64 * if b.reformulated.is_some() { 3 } else { 2 });
            Ok(Slot { dec, origin: Vec::new(), replaced_from: None })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    extend_slots(&mut slots, target_rows, spec.w, stage_key(master, 0, stage, 0), stage, 0, ledger, true)?;
    Ok(slots.iter().map(|s| s.dec.tokens()).collect())
}

struct Run<'a, M: ArModel> {
    plan: &'a StagePlan,
    model: &'a M,
    verifier: &'a dyn Verifier,
    reformulator: &'a dyn Reformulator,
    prompt: &'a ScenePrompt,
    master: u64,
    ledger: &'a LedgerCounters,
}

struct StageVerdicts {
    verdicts: Vec<Verdict>,
    hints: Vec<Option<ReformulationHint>>,
}

impl<M: ArModel> Run<'_, M> {
    fn spec(&self) -> CanvasSpec {
        *self.model.canvas()
    }

    fn reformulates(&self, stage: u8) -> bool {
        self.plan.reformulate_at.contains(&stage) && self.plan.guidance.mode != GuidanceMode::TwoWay
    }

    /// Verify the slots of one stage as grids of `h / rows` cells each.
    fn verify(
        &self,
        canvas: usize,
        stage: u8,
        attempt: u32,
        rows: usize,
        slots: &[Slot<M::Session>],
        audit: &mut Vec<AuditEvent>,
    ) -> Result<StageVerdicts, PipelineError> {
        let spec = self.spec();
        let cells = spec.h / rows;
        let grids: Vec<TokenCanvas> = slots
            .chunks(cells)
            .map(|c| compose_grid(&c.iter().map(|s| s.dec.tokens()).collect::<Vec<_>>(), &spec))
            .collect::<Result<_, _>>()?;
        let judge = |g: &TokenCanvas| {
            self.ledger.verifier_call();
            let req = GridRequest {
                canvas: g,
                rows: cells,
                stage,
                prompt: self.prompt,
                want_reformulation: self.reformulates(stage),
            };
            self.verifier.verify(&req).and_then(|j| {
                if j.verdicts.len() == cells {
                    Ok(j)
                } else {
                    Err(crate::verify::RemoteError::MalformedResponse(format!(
                        "{} verdicts for {cells} cells",
                        j.verdicts.len()
                    ))
                    .into())
                }
            })
        };
        let results: Vec<_> = if self.plan.parallel {
            grids.par_iter().map(judge).collect()
        } else {
            grids.iter().map(judge).collect()
        };
        let mut out = StageVerdicts { verdicts: Vec::with_capacity(slots.len()), hints: Vec::new() };
        for (g, res) in results.into_iter().enumerate() {
            match res {
                Ok(j) => {
                    for mut v in j.verdicts {
                        v.candidate_index += g * cells;
                        out.verdicts.push(v);
                        out.hints.push(j.hint.clone());
                    }
                }
                Err(e) => {
                    log::warn!("verifier failed on canvas {canvas} stage {stage} grid {g}, accepting all: {e}");
                    self.ledger.verifier_failure();
                    audit.push(AuditEvent::VerifierFallback { canvas, stage, grid: g, error: e.to_string() });
                    for i in 0..cells {
                        out.verdicts.push(Verdict::possible(g * cells + i));
                        out.hints.push(None);
                    }
                }
            }
        }
        out.verdicts.sort_by_key(|v| v.candidate_index);
        for v in &out.verdicts {
            audit.push(AuditEvent::Verdict {
                canvas,
                stage,
                attempt,
                slot: v.candidate_index,
                judgment: v.judgment,
                reason: v.reason.clone(),
            });
        }
        Ok(out)
    }

    fn reformulate(
        &self,
        canvas: usize,
        stage: u8,
        slots: &mut [Slot<M::Session>],
        found: &StageVerdicts,
        audit: &mut Vec<AuditEvent>,
    ) -> Result<(), PipelineError> {
        let spec = self.spec();
        for (i, slot) in slots.iter_mut().enumerate() {
            if !found.verdicts[i].is_possible() {
                continue;
            }
            let tokens = slot.dec.tokens();
            let cell = prefix_cell(spec, &tokens);
            let current = slot.dec.bundle().effective().clone();
            match self.reformulator.reformulate(&current, &cell, found.hints[i].as_ref()) {
                Ok(Some(p)) => {
                    audit.push(AuditEvent::Reformulation { canvas, stage, slot: i, prompt: p.to_string() });
                    slot.dec.set_reformulated(self.model, p, self.ledger)?;
                    self.ledger.reformulation();
                }
                Ok(None) => {}
                Err(e) => {
                    log::warn!("reformulation failed for canvas {canvas} slot {i}: {e}");
                    audit.push(AuditEvent::ReformulationFailed { canvas, stage, slot: i, error: e.to_string() });
                }
            }
        }
        Ok(())
    }

    fn canvas(&self, canvas: usize) -> Result<CanvasRun<M::Session>, PipelineError> {
        let plan = self.plan;
        let spec = self.spec();
        let bounds = plan.boundaries(spec.h)?;
        let dec = GuidedDecoder::open(self.model, PromptBundle::new(self.prompt.clone()), plan.guidance)?;
        let mut slots = vec![Slot { dec, origin: Vec::new(), replaced_from: None }; plan.r1];
        let mut audit = Vec::new();
        for (si, &rows) in bounds.iter().enumerate() {
            let stage = (si + 1) as u8;
            let start = slots.clone();
            let stage_tokens = ((rows * spec.w - start[0].dec.prefix().len()) * slots.len()) as u64;
            let mut attempt = 0;
            let found = loop {
                let key = stage_key(self.master, canvas, stage, attempt);
                extend_slots(&mut slots, rows, spec.w, key, stage, attempt, self.ledger, plan.parallel)?;
                for (i, s) in slots.iter().enumerate() {
                    let seed = s.origin.last().expect("just decoded").seed;
                    audit.push(AuditEvent::Generated { canvas, stage, attempt, slot: i, seed, tokens: rows * spec.w });
                }
                if rows == spec.h {
                    break None;
                }
                let mut found = self.verify(canvas, stage, attempt, rows, &slots, &mut audit)?;
                if found.verdicts.iter().any(Verdict::is_possible) {
                    break Some(found);
                }
                match plan.all_rejected_policy {
                    AllRejectedPolicy::Abort => return Err(PipelineError::AllRejected { canvas, stage }),
                    AllRejectedPolicy::RetryOnceThenAcceptAll if attempt == 0 => {
                        audit.push(AuditEvent::AllRejected { canvas, stage, attempt, action: plan.all_rejected_policy });
                        self.ledger.discard(stage_tokens);
                        slots = start.clone();
                        attempt += 1;
                    }
                    _ => {
                        audit.push(AuditEvent::AllRejected { canvas, stage, attempt, action: AllRejectedPolicy::AcceptAll });
                        found.verdicts = (0..slots.len()).map(Verdict::possible).collect();
                        break Some(found);
                    }
                }
            };
            let Some(found) = found else { continue };
            if self.reformulates(stage) {
                self.reformulate(canvas, stage, &mut slots, &found, &mut audit)?;
            }
            let mut r = SeedKey::new(self.master).with(TAG_REPLACE).with(canvas as u64).with(stage as u64).rng();
            let sources = replacement_sources(&found.verdicts, &mut r)?;
            slots = sources
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut s = slots[i].clone();
                    if i != j {
                        self.ledger.replacement();
                        audit.push(AuditEvent::Replacement { canvas, stage, slot: j, source: i });
                        s.replaced_from = Some(i);
                    }
                    s
                })
                .collect();
        }
        Ok((slots, audit))
    }
}

fn finish<S: ModelSession>(
    slots: Vec<Slot<S>>,
    mut audit: Vec<AuditEvent>,
    spec: CanvasSpec,
    prompt: &ScenePrompt,
    orm: &dyn OutcomeReward,
    ledger: &LedgerCounters,
    started: Instant,
) -> Result<Outcome, PipelineError> {
    let mut scores = Vec::with_capacity(slots.len());
    for (i, s) in slots.iter().enumerate() {
        let image = TokenCanvas::from_prefix(spec, s.dec.prefix())?;
        ledger.orm_call();
        let sc = orm.score(i, &image, prompt)?;
        audit.push(AuditEvent::Score { candidate: i, score: sc.score });
        scores.push(sc);
    }
    let best = select_best(&scores).ok_or(PipelineError::NoSurvivors)?;
    audit.push(AuditEvent::Selected { candidate: best.candidate_index, score: best.score });
    let mut ledger = ledger.snapshot();
    ledger.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(Outcome {
        best_index: best.candidate_index,
        best_score: best.score,
        finals: slots.iter().map(|s| s.state(CandidateStatus::Active)).collect(),
        scores: scores.iter().map(|s: &OrmScore| s.score).collect(),
        ledger,
        audit,
    })
}

/// Full staged generation for one prompt.
pub fn run_gridar<M: ArModel>(
    plan: &StagePlan,
    prompt: &ScenePrompt,
    model: &M,
    verifier: &dyn Verifier,
    reformulator: &dyn Reformulator,
    orm: &dyn OutcomeReward,
    master_seed: u64,
) -> Result<Outcome, PipelineError> {
    let started = Instant::now();
    let spec = *model.canvas();
    plan.validate(spec.h)?;
    let ledger = LedgerCounters::new();
    let run = Run { plan, model, verifier, reformulator, prompt, master: master_seed, ledger: &ledger };
    let per_canvas: Vec<_> = if plan.parallel {
        (0..plan.n_start_canvases).into_par_iter().map(|c| run.canvas(c)).collect()
    } else {
        (0..plan.n_start_canvases).map(|c| run.canvas(c)).collect()
    };
    let mut slots = Vec::with_capacity(plan.effective_n());
    let mut audit = Vec::new();
    for r in per_canvas {
        let (s, a) = r?;
        slots.extend(s);
        audit.extend(a);
    }
    finish(slots, audit, spec, prompt, orm, &ledger, started)
}

/// `n` independent full samples under two-way guidance with `guidance.s_o`;
/// the outcome reward picks the best.
pub fn run_best_of_n<M: ArModel>(
    n: usize,
    prompt: &ScenePrompt,
    model: &M,
    guidance: GuidanceConfig,
    orm: &dyn OutcomeReward,
    master_seed: u64,
    parallel: bool,
) -> Result<Outcome, PipelineError> {
    if n == 0 {
        return Err(PipelineError::Plan("Best-of-N needs N >= 1".into()));
    }
    let started = Instant::now();
    let spec = *model.canvas();
    let guidance = GuidanceConfig { mode: GuidanceMode::TwoWay, ..guidance };
    let ledger = LedgerCounters::new();
    let dec = GuidedDecoder::open(model, PromptBundle::new(prompt.clone()), guidance)?;
    let mut slots = vec![Slot { dec, origin: Vec::new(), replaced_from: None }; n];
    let key = SeedKey::new(master_seed).with(TAG_BEST_OF_N);
    extend_slots(&mut slots, spec.h, spec.w, key, 1, 0, &ledger, parallel)?;
    let audit = slots
        .iter()
        .enumerate()
        .map(|(i, s)| AuditEvent::Generated {
            canvas: 0,
            stage: 1,
            attempt: 0,
            slot: i,
            seed: s.origin[0].seed,
            tokens: spec.total(),
        })
        .collect();
    finish(slots, audit, spec, prompt, orm, &ledger, started)
}

/// Re-decode a candidate from its provenance chain.
pub fn replay_candidate<M: ArModel>(
    model: &M,
    guidance: GuidanceConfig,
    prompt: &ScenePrompt,
    origin: &[Provenance],
) -> Result<TokenSequence, PipelineError> {
    let w = model.canvas().w;
    let ledger = LedgerCounters::new();
    let mut dec = GuidedDecoder::open(model, PromptBundle::new(prompt.clone()), guidance)?;
    for step in origin {
        let current = dec.bundle().reformulated.as_ref().map(|p| p.to_string());
        if step.condition != current {
            let text = step
                .condition
                .as_deref()
                .ok_or_else(|| PipelineError::Plan("reformulated prompt cannot be withdrawn".into()))?;
            dec.set_reformulated(model, text.parse()?, &ledger)?;
        }
        let mut r = rng::Rng::seed_from_u64(step.seed);
        dec.decode_to(step.rows_end * w, &mut r, &ledger)?;
    }
    Ok(dec.tokens())
}
