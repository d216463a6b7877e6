//! Ground-truth verifier, reformulator and reward for synthetic scenes.

use std::ops::Range;

use super::{
    CellView, GridJudgment, GridRequest, OrmScore, OutcomeReward, ReformulationHint, Reformulator, Verdict,
    Verifier, VerifyError,
};
use crate::canvas::{partition_rows, CanvasSpec, TokenCanvas, TokenId};
use crate::rng::{mix_tokens, unit_interval, SeedKey};
use crate::scene::{scene_counts, CountTable, Directive, ObjectType, Palette, Quotas, ScenePrompt};

fn check_full(canvas: &TokenCanvas) -> Result<(), VerifyError> {
    if canvas.is_full() {
        Ok(())
    } else {
        Err(VerifyError::UnpopulatedCanvas { filled: canvas.filled(), total: canvas.spec().total() })
    }
}

/// Per-row tallies of a cell's visible rows.
pub fn cell_counts(cell: &CellView<'_>, palette: &Palette) -> CountTable {
    let mut spec = cell.spec;
    spec.h = cell.visible_rows;
    let canvas = TokenCanvas::from_prefix(spec, cell.tokens).expect("cell tokens fit their canvas");
    let rows = partition_rows(&spec, spec.h).expect("one band per row");
    scene_counts(&canvas, palette, &rows)
}

fn sum_rows(counts: &CountTable, ty: ObjectType, rows: Range<usize>) -> u32 {
    counts
        .bands()
        .iter()
        .filter(|b| rows.start <= b.row_start && b.row_end <= rows.end)
        .map(|b| counts.get(b.band_index, ty))
        .sum()
}

fn judge_cell(index: usize, cell: &CellView<'_>, prompt: &ScenePrompt, palette: &Palette) -> Verdict {
    let mut drawn = vec![0u32; palette.k()];
    for &t in cell.tokens {
        drawn[t as usize] += 1;
    }
    for (t, &n) in drawn.iter().enumerate().skip(1) {
        if n == 0 {
            continue;
        }
        let Some(ty) = palette.object_of(t as TokenId) else { continue };
        match prompt.requirements().get(&ty) {
            None => return Verdict::impossible(index, format!("{ty} is not in the prompt")),
            Some(&total) if n > total => {
                return Verdict::impossible(index, format!("{n} {ty} exceed the required {total}"))
            }
            _ => {}
        }
    }
    let visible = cell.visible_rows;
    let w = cell.spec.w;
    for d in prompt.directives().iter().filter(|d| d.rows.end <= visible) {
        for (&ty, &quota) in &d.quotas {
            let Some(tok) = palette.token_of(ty) else { continue };
            let n = cell.tokens[d.rows.start * w..d.rows.end * w]
                .iter()
                .filter(|&&t| t == tok)
                .count() as u32;
            if n != quota {
                return Verdict::impossible(
                    index,
                    format!("rows {}-{} hold {n} {ty}, layout needs {quota}", d.rows.start, d.rows.end - 1),
                );
            }
        }
    }
    Verdict::possible(index)
}

/// Judge every cell of a composed grid of `rows` candidates.
///
/// A cell is impossible iff a required type already exceeds its total, a
/// type absent from the prompt appears, or a fully visible layout band
/// misses its quota.
pub fn oracle_judge(
    canvas: &TokenCanvas,
    prompt: &ScenePrompt,
    rows: usize,
    palette: &Palette,
) -> Result<Vec<Verdict>, VerifyError> {
    check_full(canvas)?;
    partition_rows(canvas.spec(), rows)?;
    let req = GridRequest { canvas, rows, stage: 0, prompt, want_reformulation: false };
    Ok((0..rows).map(|i| judge_cell(i, &req.cell(i), prompt, palette)).collect())
}

/// Layout-specified prompt for a candidate whose first `visible_rows` rows
/// are fixed and tallied (per row) in `counts`.
///
/// Each band of the prompt's layout (the whole canvas when there is none)
/// that straddles the visible boundary is split: the visible part is pinned
/// to what was drawn and the rest keeps the remainder.
pub fn oracle_reformulate(
    prompt: &ScenePrompt,
    counts: &CountTable,
    visible_rows: usize,
    h: usize,
) -> Result<ScenePrompt, VerifyError> {
    let base: Vec<Directive> = if prompt.has_directives() {
        prompt.directives().to_vec()
    } else {
        vec![Directive { rows: 0..h, quotas: prompt.requirements().clone() }]
    };
    let mut out = Vec::with_capacity(base.len() + 1);
    for d in base {
        if d.rows.end <= visible_rows || d.rows.start >= visible_rows {
            out.push(d);
            continue;
        }
        let mut seen = Quotas::new();
        let mut rest = Quotas::new();
        for (&ty, &quota) in &d.quotas {
            let drawn = sum_rows(counts, ty, d.rows.start..visible_rows);
            if drawn > quota {
                return Err(VerifyError::InfeasibleRemainder { ty: ty.to_string(), drawn, quota });
            }
            seen.insert(ty, drawn);
            rest.insert(ty, quota - drawn);
        }
        out.push(Directive { rows: d.rows.start..visible_rows, quotas: seen });
        out.push(Directive { rows: visible_rows..d.rows.end, quotas: rest });
    }
    Ok(prompt.with_directives(out)?)
}

/// `0` for an exact match, otherwise minus the total count error: per-type
/// miscount, per-band miscount for layout prompts, plus every spurious object.
pub fn oracle_orm(image: &TokenCanvas, prompt: &ScenePrompt, palette: &Palette) -> Result<f64, VerifyError> {
    check_full(image)?;
    let spec = image.spec();
    let rows = partition_rows(spec, spec.h)?;
    let counts = scene_counts(image, palette, &rows);
    let mut penalty: u64 = 0;
    for ty in palette.object_types() {
        let drawn = counts.total(ty);
        match prompt.requirements().get(&ty) {
            Some(&total) => penalty += drawn.abs_diff(total) as u64,
            None => penalty += drawn as u64,
        }
    }
    for d in prompt.directives() {
        for (&ty, &quota) in &d.quotas {
            penalty += sum_rows(&counts, ty, d.rows.clone()).abs_diff(quota) as u64;
        }
    }
    Ok(-(penalty as f64))
}

/// Exact oracle verifier, optionally flipping each verdict with probability
/// `error_rate` (deterministic in the seed, stage, cell index and contents).
#[derive(Debug, Clone)]
pub struct OracleVerifier {
    pub palette: Palette,
    pub error_rate: f64,
    pub seed: u64,
}

impl OracleVerifier {
    pub fn new(palette: Palette) -> Self {
        Self { palette, error_rate: 0.0, seed: 0 }
    }

    pub fn with_error_rate(mut self, error_rate: f64, seed: u64) -> Self {
        self.error_rate = error_rate;
        self.seed = seed;
        self
    }
}

impl Verifier for OracleVerifier {
    fn verify(&self, request: &GridRequest<'_>) -> Result<GridJudgment, VerifyError> {
        let mut verdicts = oracle_judge(request.canvas, request.prompt, request.rows, &self.palette)?;
        if self.error_rate > 0.0 {
            for v in &mut verdicts {
                let cell = request.cell(v.candidate_index);
                let key = SeedKey::new(self.seed)
                    .with(request.stage as u64)
                    .with(v.candidate_index as u64)
                    .with(mix_tokens(cell.tokens));
                if unit_interval(key.finish()) < self.error_rate {
                    *v = if v.is_possible() {
                        Verdict::impossible(v.candidate_index, "injected error")
                    } else {
                        Verdict { reason: Some("injected error".into()), ..Verdict::possible(v.candidate_index) }
                    };
                }
            }
        }
        Ok(GridJudgment { verdicts, hint: None })
    }
}

/// Judges everything possible.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAll;

impl Verifier for AcceptAll {
    fn verify(&self, request: &GridRequest<'_>) -> Result<GridJudgment, VerifyError> {
        Ok(GridJudgment { verdicts: (0..request.rows).map(Verdict::possible).collect(), hint: None })
    }
}

#[derive(Debug, Clone)]
pub struct OracleReformulator {
    pub palette: Palette,
}

impl Reformulator for OracleReformulator {
    fn reformulate(
        &self,
        prompt: &ScenePrompt,
        cell: &CellView<'_>,
        _hint: Option<&ReformulationHint>,
    ) -> Result<Option<ScenePrompt>, VerifyError> {
        let counts = cell_counts(cell, &self.palette);
        oracle_reformulate(prompt, &counts, cell.visible_rows, cell.spec.h).map(Some)
    }
}

#[derive(Debug, Clone)]
pub struct OracleOrm {
    pub palette: Palette,
}

impl OutcomeReward for OracleOrm {
    fn score(&self, candidate_index: usize, image: &TokenCanvas, prompt: &ScenePrompt) -> Result<OrmScore, VerifyError> {
        Ok(OrmScore { candidate_index, score: oracle_orm(image, prompt, &self.palette)? })
    }
}

/// Judge a standalone row prefix of one candidate.
pub fn judge_prefix(spec: CanvasSpec, tokens: &[TokenId], prompt: &ScenePrompt, palette: &Palette) -> Verdict {
    judge_cell(0, &prefix_cell(spec, tokens), prompt, palette)
}

/// Visible-row cell over a standalone prefix, for callers outside a grid.
pub fn prefix_cell<'a>(spec: CanvasSpec, tokens: &'a [TokenId]) -> CellView<'a> {
    CellView { spec, tokens, visible_rows: tokens.len() / spec.w }
}
