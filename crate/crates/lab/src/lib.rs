//! Experiment harness over `ptauth-core`: the temporal-bug corpus, header
//! overwrite and ID-spray robustness cases, the benchmark suite and report
//! writers.

pub mod bench;
pub mod corpus;
pub mod report;
pub mod robustness;

use ptauth_core::ir::{CostModel, InterpConfig};
use ptauth_core::{AcFunction, PacMode, RuntimeConfig};
use serde::{Deserialize, Serialize};

/// Knobs shared by corpus, robustness and single-program runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabConfig {
    pub pac_mode: PacMode,
    pub ac_function: AcFunction,
    pub seed: u64,
    pub optimize: bool,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig { pac_mode: PacMode::default(), ac_function: AcFunction::default(), seed: 1, optimize: true }
    }
}

impl LabConfig {
    pub fn interp(&self) -> InterpConfig {
        InterpConfig {
            runtime: RuntimeConfig {
                pac_mode: self.pac_mode,
                ac_function: self.ac_function,
                seed: self.seed,
                ..RuntimeConfig::default()
            },
            cost: CostModel::software(),
            ..InterpConfig::default()
        }
    }

    /// Every PAC mode crossed with every AC function.
    pub fn all_variants(seed: u64, optimize: bool) -> Vec<LabConfig> {
        let mut out = Vec::new();
        for pac_mode in [PacMode::V83Poison, PacMode::V86Fault] {
            for ac_function in [AcFunction::XorFold, AcFunction::KeyedMixer] {
                out.push(LabConfig { pac_mode, ac_function, seed, optimize });
            }
        }
        out
    }

    pub fn label(&self) -> String {
        let pac = match self.pac_mode {
            PacMode::V83Poison => "v83",
            PacMode::V86Fault => "v86",
        };
        let ac = match self.ac_function {
            AcFunction::XorFold => "xorfold",
            AcFunction::KeyedMixer => "mixer",
        };
        format!("{pac}/{ac}/opt-{}", if self.optimize { "on" } else { "off" })
    }
}
