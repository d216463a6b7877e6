//! Synthetic compositional prompt suites.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::rng::SeedKey;
use crate::scene::{Directive, ObjectType, Palette, Quotas, ScenePrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// One object type, `n` instances.
    Counting,
    /// Two or three object types with their own counts.
    ColorBinding,
    /// Counts plus a two-band layout the image must follow.
    SpatialBand,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Counting, Category::ColorBinding, Category::SpatialBand];

    pub fn name(self) -> &'static str {
        match self {
            Category::Counting => "counting",
            Category::ColorBinding => "color_binding",
            Category::SpatialBand => "spatial_band",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub categories: Vec<Category>,
    /// Inclusive range of total object counts.
    pub counts_range: [u32; 2],
    /// Prompts per category.
    pub n_prompts: usize,
    pub master_seed: u64,
    /// Canvas rows, for layout bands.
    pub rows: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self { categories: Category::ALL.to_vec(), counts_range: [2, 9], n_prompts: 100, master_seed: 0, rows: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuitePrompt {
    pub id: String,
    pub category: Category,
    pub prompt: ScenePrompt,
}

impl SuiteSpec {
    fn validate(&self) -> Result<(), ExperimentError> {
        let [lo, hi] = self.counts_range;
        let err = |m: &str| Err(ExperimentError::EmptySpec(m.into()));
        if self.categories.is_empty() {
            return err("no categories");
        }
        if self.n_prompts == 0 {
            return err("n_prompts is 0");
        }
        if lo == 0 || lo > hi {
            return err("counts_range must satisfy 1 <= lo <= hi");
        }
        if self.categories.contains(&Category::ColorBinding) && hi < 2 {
            return err("color_binding prompts need counts of at least 2");
        }
        if self.categories.contains(&Category::SpatialBand) && (self.rows < 4 || !self.rows.is_multiple_of(4)) {
            return err("spatial_band prompts need a row count divisible by 4");
        }
        Ok(())
    }
}

/// Split `n` into `parts` positive counts.
fn split_positive<R: Rng>(n: u32, parts: usize, rng: &mut R) -> Vec<u32> {
    let mut out = vec![1u32; parts];
    for _ in 0..n - parts as u32 {
        out[rng.random_range(0..parts)] += 1;
    }
    out
}

fn pick_types<R: Rng>(palette: &Palette, k: usize, rng: &mut R) -> Vec<ObjectType> {
    let mut all: Vec<_> = palette.object_types().collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}

fn make_prompt<R: Rng>(spec: &SuiteSpec, cat: Category, palette: &Palette, rng: &mut R) -> ScenePrompt {
    let [lo, hi] = spec.counts_range;
    match cat {
        Category::Counting => {
            let n = rng.random_range(lo..=hi);
            ScenePrompt::counts(pick_types(palette, 1, rng).into_iter().map(|t| (t, n)))
        }
        Category::ColorBinding => {
            let n = rng.random_range(lo.max(2)..=hi);
            let k = rng.random_range(2..=3.min(n as usize));
            let types = pick_types(palette, k, rng);
            ScenePrompt::counts(types.into_iter().zip(split_positive(n, k, rng)))
        }
        Category::SpatialBand => {
            let n = rng.random_range(lo..=hi);
            let k = if n >= 2 { rng.random_range(1..=2) } else { 1 };
            let types = pick_types(palette, k, rng);
            let totals = split_positive(n, k, rng);
            let q = spec.rows / 4;
            let cut = q * rng.random_range(1..=3usize);
            let mut top = Quotas::new();
            let mut bottom = Quotas::new();
            for (&t, &total) in types.iter().zip(&totals) {
                let up = rng.random_range(0..=total);
                top.insert(t, up);
                bottom.insert(t, total - up);
            }
            let req: Quotas = types.into_iter().zip(totals).collect();
            ScenePrompt::new(
                req,
                vec![Directive { rows: 0..cut, quotas: top }, Directive { rows: cut..spec.rows, quotas: bottom }],
            )
            .expect("band quotas sum to the totals")
        }
    }
}

/// Deterministic prompt list: `n_prompts` per category, in category order.
pub fn gen_suite(spec: &SuiteSpec, palette: &Palette) -> Result<Vec<SuitePrompt>, ExperimentError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_prompts * spec.categories.len());
    for &cat in &spec.categories {
        for i in 0..spec.n_prompts {
            let mut rng = SeedKey::new(spec.master_seed).with(cat as u64).with(i as u64).rng();
            out.push(SuitePrompt {
                id: format!("{cat}-{i:04}"),
                category: cat,
                prompt: make_prompt(spec, cat, palette, &mut rng),
            });
        }
    }
    Ok(out)
}
