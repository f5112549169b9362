use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{instrument, InstrumentOptions};
use crate::ir::{interpret, ExecMode, InterpConfig, Program, RunReport, Verdict};
use crate::runtime::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub verdict: Verdict,
    pub checks: u64,
    pub instructions: u64,
    pub source_steps: u64,
    pub site_checks: BTreeMap<String, u64>,
}

impl From<&RunReport> for RunSummary {
    fn from(r: &RunReport) -> Self {
        RunSummary {
            verdict: r.verdict.clone(),
            checks: r.checks,
            instructions: r.instructions,
            source_steps: r.source_steps,
            site_checks: r.site_checks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub unoptimized: RunSummary,
    pub optimized: RunSummary,
    /// Same verdict kind, function, source index and step.
    pub verdicts_match: bool,
    /// Every site checked by the optimized run was checked at least as often
    /// by the unoptimized one, and every kept site exactly as often.
    pub sites_subset: bool,
    pub outputs_match: bool,
    /// Dynamic executions of elided sites, counted on the unoptimized run.
    pub elided_hits: u64,
    pub fewer_checks: bool,
    pub mismatches: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.verdicts_match && self.sites_subset && self.outputs_match && (self.elided_hits == 0 || self.fewer_checks)
    }
}

/// Runs the program instrumented with and without elision and compares.
pub fn verdict_equivalence_audit(program: &Program, config: &InterpConfig) -> Result<AuditReport, ConfigError> {
    let unopt = instrument(program, InstrumentOptions { optimize: false });
    let opt = instrument(program, InstrumentOptions { optimize: true });
    let a = interpret(&unopt.program, ExecMode::Checked, config)?;
    let b = interpret(&opt.program, ExecMode::Checked, config)?;

    let mut mismatches = Vec::new();
    let verdicts_match = a.verdict == b.verdict;
    if !verdicts_match {
        mismatches.push(format!("verdict {:?} vs {:?}", a.verdict, b.verdict));
    }
    let kept: std::collections::HashSet<String> = opt.sites.iter().filter(|s| !s.elided).map(|s| s.key()).collect();
    let mut sites_subset = true;
    for (key, &n) in &b.site_checks {
        let m = a.site_checks.get(key).copied().unwrap_or(0);
        if n > m {
            sites_subset = false;
            mismatches.push(format!("site {key}: {n} optimized vs {m} unoptimized"));
        }
    }
    for key in &kept {
        let (m, n) = (a.site_checks.get(key).copied().unwrap_or(0), b.site_checks.get(key).copied().unwrap_or(0));
        // a site with one kept and one elided check of the same register
        // may legitimately run fewer checks
        let partly_elided = opt.sites.iter().any(|s| s.elided && &s.key() == key);
        if m != n && !partly_elided {
            sites_subset = false;
            mismatches.push(format!("kept site {key}: {n} optimized vs {m} unoptimized"));
        }
    }
    let elided_keys: std::collections::BTreeSet<String> = opt.elided().map(|s| s.key()).collect();
    let elided_hits = elided_keys
        .iter()
        .map(|k| a.site_checks.get(k).copied().unwrap_or(0).saturating_sub(b.site_checks.get(k).copied().unwrap_or(0)))
        .sum();
    let fewer_checks = b.checks < a.checks;
    if elided_hits > 0 && !fewer_checks {
        mismatches.push(format!("elided sites ran {elided_hits} times but checks {} vs {}", b.checks, a.checks));
    }
    let outputs_match = a.output == b.output;
    if !outputs_match {
        mismatches.push("program output differs".into());
    }
    Ok(AuditReport {
        unoptimized: RunSummary::from(&a),
        optimized: RunSummary::from(&b),
        verdicts_match,
        sites_subset,
        outputs_match,
        elided_hits,
        fewer_checks,
        mismatches,
    })
}
