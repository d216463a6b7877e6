//! Success-within-k from a frozen upper half, with and without a
//! layout-specified prompt for the remaining rows.

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::suite::{gen_suite, Category, SuitePrompt, SuiteSpec};
use super::{ExperimentConfig, ExperimentError};
use crate::canvas::TokenCanvas;
use crate::guidance::GuidanceConfig;
use crate::pipeline::{run_best_of_n, GuidedDecoder, LedgerCounters, PromptBundle};
use crate::rng::{self, SeedKey};
use crate::scene::{ArModel, SceneLm};
use crate::verify::oracle::{cell_counts, prefix_cell};
use crate::verify::{judge_prefix, oracle_orm, oracle_reformulate};

const TAG_FILTER: u64 = 0x4649_4c54;
const TAG_PREFIX: u64 = 0x5052_4658;
const TAG_TRIAL: u64 = 0x5452_4941;

/// Counting prompts (from `spec`) whose single-sample run fails, in suite
/// order, at most `target` of them.
pub fn failing_prompts(
    model: &SceneLm,
    spec: &SuiteSpec,
    guidance: GuidanceConfig,
    target: usize,
) -> Result<Vec<SuitePrompt>, ExperimentError> {
    let palette = model.palette().clone();
    let orm = crate::verify::OracleOrm { palette: palette.clone() };
    let candidates = gen_suite(spec, &palette)?;
    let mut out = Vec::with_capacity(target);
    for (i, p) in candidates.into_iter().enumerate() {
        if out.len() == target {
            break;
        }
        let seed = SeedKey::new(spec.master_seed).with(TAG_FILTER).with(i as u64).finish();
        if !run_best_of_n(1, &p.prompt, model, guidance, &orm, seed, false)?.success() {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(ExperimentError::NoFailingPrompts);
    }
    Ok(out)
}

/// First upper half (of `prefix_attempts` draws) the oracle judges possible.
pub fn freeze_prefix(
    model: &SceneLm,
    prompt: &SuitePrompt,
    index: usize,
    guidance: GuidanceConfig,
    master: u64,
    prefix_attempts: usize,
) -> Result<Option<GuidedDecoder<<SceneLm as ArModel>::Session>>, ExperimentError> {
    let spec = *model.canvas();
    let ledger = LedgerCounters::new();
    for a in 0..prefix_attempts {
        let mut dec = GuidedDecoder::open(model, PromptBundle::new(prompt.prompt.clone()), guidance)?;
        let seed = SeedKey::new(master).with(TAG_PREFIX).with(index as u64).with(a as u64).finish();
        dec.decode_to(spec.h / 2 * spec.w, &mut rng::Rng::seed_from_u64(seed), &ledger)
            .map_err(ExperimentError::from)?;
        if judge_prefix(spec, dec.prefix(), &prompt.prompt, model.palette()).is_possible() {
            return Ok(Some(dec));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotArm {
    pub with_reformulation: bool,
    pub k_values: Vec<usize>,
    /// Fraction of prompts solved within `k` trials, per `k_values` entry.
    pub success_within_k: Vec<f64>,
    /// 1-based trial of the first success per prompt.
    pub first_success: Vec<Option<usize>>,
}

/// Repeatedly decode the lower half from each prompt's frozen upper half.
pub fn run_pilot(
    model: &SceneLm,
    prompts: &[SuitePrompt],
    k_values: &[usize],
    with_reformulation: bool,
    cfg: &ExperimentConfig,
) -> Result<PilotArm, ExperimentError> {
    let spec = *model.canvas();
    let kmax = k_values.iter().copied().max().unwrap_or(0);
    let guidance = cfg.plan.guidance;
    let one = |(i, p): (usize, &SuitePrompt)| -> Result<Option<Option<usize>>, ExperimentError> {
        let Some(mut base) = freeze_prefix(model, p, i, guidance, cfg.seed, cfg.pilot.prefix_attempts)? else {
            log::warn!("no possible upper half for {}", p.id);
            return Ok(None);
        };
        let ledger = LedgerCounters::new();
        if with_reformulation {
            let cell = prefix_cell(spec, base.prefix());
            let counts = cell_counts(&cell, model.palette());
            let reformulated = oracle_reformulate(&p.prompt, &counts, spec.h / 2, spec.h)?;
            base.set_reformulated(model, reformulated, &ledger)?;
        }
        for t in 0..kmax {
            let mut dec = base.clone();
            let seed = SeedKey::new(cfg.seed).with(TAG_TRIAL).with(i as u64).with(t as u64).finish();
            dec.decode_to(spec.total(), &mut rng::Rng::seed_from_u64(seed), &ledger)?;
            let image = TokenCanvas::from_prefix(spec, dec.prefix())?;
            if oracle_orm(&image, &p.prompt, model.palette())? == 0.0 {
                return Ok(Some(Some(t + 1)));
            }
        }
        Ok(Some(None))
    };
    let results: Vec<_> = if cfg.parallel {
        prompts.par_iter().enumerate().map(one).collect()
    } else {
        prompts.iter().enumerate().map(one).collect()
    };
    let mut first_success = Vec::with_capacity(prompts.len());
    for r in results {
        if let Some(f) = r? {
            first_success.push(f);
        }
    }
    let n = first_success.len().max(1) as f64;
    let success_within_k = k_values
        .iter()
        .map(|&k| first_success.iter().filter(|f| matches!(f, Some(t) if *t <= k)).count() as f64 / n)
        .collect();
    Ok(PilotArm { with_reformulation, k_values: k_values.to_vec(), success_within_k, first_success })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub config: ExperimentConfig,
    pub prompts: Vec<String>,
    pub baseline: PilotArm,
    pub reformulated: PilotArm,
}

impl PilotReport {
    /// `k,baseline,reformulated` rows.
    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["k", "baseline", "reformulated"])?;
        for (i, k) in self.baseline.k_values.iter().enumerate() {
            w.write_record([
                k.to_string(),
                format!("{:.4}", self.baseline.success_within_k[i]),
                format!("{:.4}", self.reformulated.success_within_k[i]),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }
}

/// Both arms over the configured failing counting prompts.
pub fn pilot_study(cfg: &ExperimentConfig) -> Result<PilotReport, ExperimentError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let spec = SuiteSpec {
        categories: vec![Category::Counting],
        counts_range: cfg.pilot.counts_range,
        n_prompts: cfg.pilot.n_prompts * 4,
        master_seed: cfg.seed,
        rows: cfg.canvas.h,
    };
    let prompts = failing_prompts(&model, &spec, cfg.plan.guidance, cfg.pilot.n_prompts)?;
    if prompts.len() < cfg.pilot.n_prompts {
        log::warn!("only {} of {} prompts fail with a single sample", prompts.len(), cfg.pilot.n_prompts);
    }
    let k = &cfg.pilot.k_values;
    Ok(PilotReport {
        config: cfg.clone(),
        prompts: prompts.iter().map(|p| format!("{}: {}", p.id, p.prompt)).collect(),
        baseline: run_pilot(&model, &prompts, k, false, cfg)?,
        reformulated: run_pilot(&model, &prompts, k, true, cfg)?,
    })
}
