use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::ExperimentReport;
use super::suite::{gen_suite, Category, SuitePrompt};
use super::{ExperimentConfig, ExperimentError, Method, VerifierKind};
use crate::guidance::GuidanceMode;
use crate::pipeline::{run_best_of_n, run_gridar, BudgetLedger, Outcome, StagePlan};
use crate::rng::SeedKey;
use crate::scene::SceneLm;
use crate::verify::{AcceptAll, HintReformulator, NoReformulation, OracleOrm, OracleReformulator, Reformulator, Verifier};

const TAG_PROMPT: u64 = 0x5052_4f4d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub prompt_id: String,
    pub category: Category,
    pub method: Method,
    pub seed: u64,
    pub success: bool,
    pub best_score: f64,
    pub tokens: u64,
    pub retry_tokens: u64,
    pub forwards: u64,
    pub verifier_calls: u64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Final images per prompt.
    pub n: usize,
    pub prompts: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ledger: BudgetLedger,
}

/// 95% Wilson score interval.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

struct Parts {
    model: SceneLm,
    verifier: Box<dyn Verifier>,
    reformulator: Box<dyn Reformulator>,
    orm: OracleOrm,
}

fn method_n(method: Method, plan: &StagePlan) -> usize {
    match method {
        Method::BestOfN(n) => n,
        _ => plan.effective_n(),
    }
}

fn run_method(
    cfg: &ExperimentConfig,
    parts: &Parts,
    method: Method,
    prompt: &SuitePrompt,
    seed: u64,
) -> Result<Outcome, ExperimentError> {
    let mut plan = StagePlan { parallel: false, ..cfg.plan.clone() };
    let mut verifier: &dyn Verifier = parts.verifier.as_ref();
    let mut reformulator: &dyn Reformulator = parts.reformulator.as_ref();
    match method {
        Method::BestOfN(n) => {
            return Ok(run_best_of_n(n, &prompt.prompt, &parts.model, plan.guidance, &parts.orm, seed, false)?)
        }
        Method::GridAr => {}
        Method::NoVerifier => verifier = &AcceptAll,
        Method::NoReformulation => reformulator = &NoReformulation,
        Method::NoVerifierNoReformulation => {
            verifier = &AcceptAll;
            reformulator = &NoReformulation;
        }
        Method::Replacement => plan.guidance.mode = GuidanceMode::Replacement,
    }
    Ok(run_gridar(&plan, &prompt.prompt, &parts.model, verifier, reformulator, &parts.orm, seed)?)
}

fn check_budget(
    cfg: &ExperimentConfig,
    method: Method,
    prompt: &SuitePrompt,
    ledger: &BudgetLedger,
) -> Result<(), ExperimentError> {
    let expected = (method_n(method, &cfg.plan) * cfg.canvas.h * cfg.canvas.w) as u64;
    let fail = |detail: String| {
        Err(ExperimentError::BudgetViolation { method: method.to_string(), prompt_id: prompt.id.clone(), detail })
    };
    if ledger.generated_tokens != expected {
        return fail(format!("{} generated tokens, expected {expected}", ledger.generated_tokens));
    }
    if !ledger.is_consistent() {
        return fail(format!("inconsistent pass counts {ledger:?}"));
    }
    Ok(())
}

/// Run every configured method on every suite prompt with paired seeds.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let prompts = gen_suite(&cfg.suite, model.palette())?;
    let palette = model.palette().clone();
    let reformulator: Box<dyn Reformulator> = match cfg.verifier.kind {
        VerifierKind::Remote => Box::new(HintReformulator),
        _ => Box::new(OracleReformulator { palette: palette.clone() }),
    };
    let parts = Parts { verifier: cfg.verifier(), reformulator, orm: OracleOrm { palette }, model };
    let run_prompt = |(i, p): (usize, &SuitePrompt)| -> Result<Vec<(PromptOutcome, BudgetLedger)>, ExperimentError> {
        let seed = SeedKey::new(cfg.seed).with(TAG_PROMPT).with(i as u64).finish();
        cfg.methods
            .iter()
            .map(|&m| {
                let out = run_method(cfg, &parts, m, p, seed)?;
                check_budget(cfg, m, p, &out.ledger)?;
                log::debug!("{} {m} success={} {:?}", p.id, out.success(), out.ledger);
                let row = PromptOutcome {
                    prompt_id: p.id.clone(),
                    category: p.category,
                    method: m,
                    seed,
                    success: out.success(),
                    best_score: out.best_score,
                    tokens: out.ledger.generated_tokens,
                    retry_tokens: out.ledger.retry_tokens,
                    forwards: out.ledger.forward_passes(),
                    verifier_calls: out.ledger.verifier_calls,
                    seconds: out.ledger.wall_clock_secs,
                };
                Ok((row, out.ledger))
            })
            .collect()
    };
    let per_prompt: Vec<_> = if cfg.parallel {
        prompts.par_iter().enumerate().map(run_prompt).collect()
    } else {
        prompts.iter().enumerate().map(run_prompt).collect()
    };
    let mut rows = Vec::with_capacity(prompts.len() * cfg.methods.len());
    for r in per_prompt {
        rows.extend(r?);
    }
    let methods = cfg.methods.iter().map(|&m| summarize(cfg, m, &rows)).collect();
    let outcomes = rows.into_iter().map(|(o, _)| o).collect();
    Ok(ExperimentReport { config: cfg.clone(), master_seed: cfg.seed, methods, outcomes })
}

fn summarize(cfg: &ExperimentConfig, method: Method, rows: &[(PromptOutcome, BudgetLedger)]) -> MethodSummary {
    let rows: Vec<_> = rows.iter().filter(|(o, _)| o.method == method).collect();
    let successes = rows.iter().filter(|(o, _)| o.success).count();
    let (ci_low, ci_high) = wilson_interval(successes, rows.len());
    let mut ledger = BudgetLedger::default();
    for (_, l) in &rows {
        ledger += l;
    }
    MethodSummary {
        method,
        n: method_n(method, &cfg.plan),
        prompts: rows.len(),
        successes,
        success_rate: if rows.is_empty() { 0.0 } else { successes as f64 / rows.len() as f64 },
        ci_low,
        ci_high,
        ledger,
    }
}
