use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::compare::{run_compare, MethodSummary, PromptOutcome};
use super::{ExperimentConfig, ExperimentError, Method};

/// Everything needed to regenerate the comparison; wall-clock time is kept
/// out so reruns serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub methods: Vec<MethodSummary>,
    pub outcomes: Vec<PromptOutcome>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// One row per (prompt, method).
    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["prompt_id", "category", "method", "success", "tokens", "forwards", "verifier_calls", "seconds"])?;
        for o in &self.outcomes {
            w.write_record([
                o.prompt_id.clone(),
                o.category.to_string(),
                o.method.to_string(),
                o.success.to_string(),
                o.tokens.to_string(),
                o.forwards.to_string(),
                o.verifier_calls.to_string(),
                format!("{:.6}", o.seconds),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }
}

pub fn write_json(report: &ExperimentReport, path: &Path) -> Result<(), ExperimentError> {
    fs::write(path, report.to_json())?;
    Ok(())
}

pub fn write_csv(report: &ExperimentReport, path: &Path) -> Result<(), ExperimentError> {
    fs::write(path, report.to_csv()?)?;
    Ok(())
}

/// Rerun the comparison embedded in a saved report. Returns the new report
/// and whether it serializes to the same bytes.
pub fn replay_report(path: &Path) -> Result<(ExperimentReport, bool), ExperimentError> {
    let saved = fs::read_to_string(path)?;
    let old: ExperimentReport = serde_json::from_str(&saved)?;
    let new = run_compare(&old.config)?;
    let same = new.to_json() == saved;
    Ok((new, same))
}

#[cfg(test)]
mod tests {
    use super::super::{Category, SuiteSpec};
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            seed: 21,
            suite: SuiteSpec { n_prompts: 3, ..SuiteSpec::default() },
            methods: vec![Method::GridAr, Method::BestOfN(4)],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn reruns_are_byte_identical() {
        let a = run_compare(&tiny()).unwrap();
        let b = run_compare(&ExperimentConfig { parallel: false, ..tiny() }).unwrap();
        let mut b_cfg = b.clone();
        b_cfg.config.parallel = true;
        assert_eq!(a.to_json(), b_cfg.to_json());
        assert_eq!(a.outcomes.len(), 9 * 2);
        assert!(a.outcomes.iter().any(|o| o.category == Category::SpatialBand));
    }

    #[test]
    fn csv_columns() {
        let r = run_compare(&tiny()).unwrap();
        let csv = r.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "prompt_id,category,method,success,tokens,forwards,verifier_calls,seconds"
        );
        assert_eq!(lines.count(), r.outcomes.len());
    }

    #[test]
    fn replay_from_disk() {
        let dir = std::env::temp_dir().join(format!("gridar-replay-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("report.json");
        let r = run_compare(&tiny()).unwrap();
        write_json(&r, &path).unwrap();
        let (again, same) = replay_report(&path).unwrap();
        assert!(same);
        assert_eq!(again.to_json(), r.to_json());
        fs::remove_dir_all(&dir).unwrap();
    }
}
