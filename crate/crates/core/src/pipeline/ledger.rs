//! Compute accounting.

use std::ops::AddAssign;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};

use serde::{Deserialize, Serialize};

/// Totals for one run (or a sum of runs).
///
/// A forward pass is one logits evaluation under one condition; prefill is
/// the prefix a freshly opened reformulated session must consume.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    /// Tokens of kept stage attempts.
    pub generated_tokens: u64,
    /// Tokens of stage attempts discarded after an all-rejected verdict.
    pub retry_tokens: u64,
    /// Tokens decoded with two logits evaluations.
    pub two_way_tokens: u64,
    /// Tokens decoded with three logits evaluations.
    pub three_way_tokens: u64,
    pub forward_uncond: u64,
    pub forward_original: u64,
    pub forward_reformulated: u64,
    pub prefill_tokens: u64,
    pub verifier_calls: u64,
    pub verifier_failures: u64,
    pub orm_calls: u64,
    pub replacements: u64,
    pub reformulations: u64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl BudgetLedger {
    pub fn forward_passes(&self) -> u64 {
        self.forward_uncond + self.forward_original + self.forward_reformulated
    }

    /// Per-token pass counts add up and every decoded token is accounted for.
    pub fn is_consistent(&self) -> bool {
        self.two_way_tokens + self.three_way_tokens == self.generated_tokens + self.retry_tokens
            && self.forward_passes() == 2 * self.two_way_tokens + 3 * self.three_way_tokens
            && self.forward_uncond == self.generated_tokens + self.retry_tokens
    }
}

impl AddAssign<&BudgetLedger> for BudgetLedger {
    fn add_assign(&mut self, o: &BudgetLedger) {
        self.generated_tokens += o.generated_tokens;
        self.retry_tokens += o.retry_tokens;
        self.two_way_tokens += o.two_way_tokens;
        self.three_way_tokens += o.three_way_tokens;
        self.forward_uncond += o.forward_uncond;
        self.forward_original += o.forward_original;
        self.forward_reformulated += o.forward_reformulated;
        self.prefill_tokens += o.prefill_tokens;
        self.verifier_calls += o.verifier_calls;
        self.verifier_failures += o.verifier_failures;
        self.orm_calls += o.orm_calls;
        self.replacements += o.replacements;
        self.reformulations += o.reformulations;
        self.wall_clock_secs += o.wall_clock_secs;
    }
}

/// Shared counters updated from worker threads.
#[derive(Debug, Default)]
pub struct LedgerCounters {
    generated: AtomicU64,
    retry: AtomicU64,
    two_way: AtomicU64,
    three_way: AtomicU64,
    uncond: AtomicU64,
    original: AtomicU64,
    reformulated: AtomicU64,
    prefill: AtomicU64,
    verifier_calls: AtomicU64,
    verifier_failures: AtomicU64,
    orm_calls: AtomicU64,
    replacements: AtomicU64,
    reformulations: AtomicU64,
}

/// Which conditions were evaluated for one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Passes {
    pub uncond: bool,
    pub original: bool,
    pub reformulated: bool,
}

impl LedgerCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn token(&self, p: Passes) {
        self.generated.fetch_add(1, Relaxed);
        let n = [p.uncond, p.original, p.reformulated].iter().filter(|&&b| b).count();
        if n == 3 {
            self.three_way.fetch_add(1, Relaxed);
        } else {
            self.two_way.fetch_add(1, Relaxed);
        }
        if p.uncond {
            self.uncond.fetch_add(1, Relaxed);
        }
        if p.original {
            self.original.fetch_add(1, Relaxed);
        }
        if p.reformulated {
            self.reformulated.fetch_add(1, Relaxed);
        }
    }

    /// Move `n` already counted tokens from generated to retry.
    pub fn discard(&self, n: u64) {
        self.generated.fetch_sub(n, Relaxed);
        self.retry.fetch_add(n, Relaxed);
    }

    pub fn prefill(&self, n: u64) {
        self.prefill.fetch_add(n, Relaxed);
    }

    pub fn verifier_call(&self) {
        self.verifier_calls.fetch_add(1, Relaxed);
    }

    pub fn verifier_failure(&self) {
        self.verifier_failures.fetch_add(1, Relaxed);
    }

    pub fn orm_call(&self) {
        self.orm_calls.fetch_add(1, Relaxed);
    }

    pub fn replacement(&self) {
        self.replacements.fetch_add(1, Relaxed);
    }

    pub fn reformulation(&self) {
        self.reformulations.fetch_add(1, Relaxed);
    }

    pub fn snapshot(&self) -> BudgetLedger {
        BudgetLedger {
            generated_tokens: self.generated.load(Relaxed),
            retry_tokens: self.retry.load(Relaxed),
            two_way_tokens: self.two_way.load(Relaxed),
            three_way_tokens: self.three_way.load(Relaxed),
            forward_uncond: self.uncond.load(Relaxed),
            forward_original: self.original.load(Relaxed),
            forward_reformulated: self.reformulated.load(Relaxed),
            prefill_tokens: self.prefill.load(Relaxed),
            verifier_calls: self.verifier_calls.load(Relaxed),
            verifier_failures: self.verifier_failures.load(Relaxed),
            orm_calls: self.orm_calls.load(Relaxed),
            replacements: self.replacements.load(Relaxed),
            reformulations: self.reformulations.load(Relaxed),
            wall_clock_secs: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: Passes = Passes { uncond: true, original: true, reformulated: false };
    const THREE: Passes = Passes { uncond: true, original: true, reformulated: true };

    #[test]
    fn pass_accounting() {
        let c = LedgerCounters::new();
        (0..256).for_each(|_| c.token(TWO));
        (0..768).for_each(|_| c.token(THREE));
        let l = c.snapshot();
        assert_eq!(l.generated_tokens, 1024);
        assert_eq!(l.forward_passes(), 2 * 256 + 3 * 768);
        assert!(l.is_consistent());
    }

    #[test]
    fn discarded_tokens_move_to_retry() {
        let c = LedgerCounters::new();
        (0..100).for_each(|_| c.token(TWO));
        c.discard(40);
        let l = c.snapshot();
        assert_eq!((l.generated_tokens, l.retry_tokens), (60, 40));
        assert!(l.is_consistent());
    }

    #[test]
    fn sums() {
        let mut a = BudgetLedger { generated_tokens: 3, orm_calls: 1, ..Default::default() };
        a += &BudgetLedger { generated_tokens: 4, orm_calls: 2, ..Default::default() };
        assert_eq!((a.generated_tokens, a.orm_calls), (7, 3));
    }
}
