//! Experiment configuration.
//!
//! A config file names a scenario and overrides any subset of that
//! scenario's preset; the merged result is the resolved config that every
//! run writes next to its outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halting::{HaltingDesign, DEFAULT_H_LAST};
use crate::nets::{NetInit, NetKind};
use crate::problems::{BatchConfig, MatrixKind, SupportPattern};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Gaussian measurements.
    Synthetic,
    /// ±1/√n measurements.
    Rademacher,
    /// Grant-free access with QPSK pilots, stacked real form.
    MtcAccess,
    /// One network on mixed sparsity against two specialised networks.
    MixedSparsityFig1,
    /// Clustered supports (stand-in for clustered channels).
    ClusteredSparse,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Synthetic => "synthetic",
            Scenario::Rademacher => "rademacher",
            Scenario::MtcAccess => "mtc_access",
            Scenario::MixedSparsityFig1 => "mixed_sparsity_fig1",
            Scenario::ClusteredSparse => "clustered_sparse",
        }
    }
}

/// Problem generator settings; the seed comes from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub m: usize,
    pub s_min: usize,
    pub s_max: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub snr_db: Option<f64>,
    pub matrix_kind: MatrixKind,
    #[serde(default)]
    pub support: SupportPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub kind: NetKind,
    pub shared: bool,
    /// Depth of the fixed-depth baseline.
    pub fixed_depth: usize,
    /// Maximum depth of the adaptive network.
    pub adaptive_depth: usize,
    pub init_threshold: f64,
    /// Final CPSS support fraction; defaults to `s_max / m`.
    #[serde(default)]
    pub cpss_p_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HaltingConfig {
    pub design: HaltingDesign,
    pub h_last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out batches (of `data.batch_size` samples each).
    pub holdout_batches: usize,
    pub epsilons: Vec<f64>,
    pub success_db: f64,
    /// Base depths `L` of the mixed-sparsity study.
    #[serde(default)]
    pub fig1_depths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub halting: HaltingConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.5, 0.3, 0.2, 0.15, 0.1, 0.07, 0.05, 0.03, 0.02, 0.015, 0.005]
}

impl ExperimentConfig {
    /// Desk-scale defaults of a scenario.
    pub fn preset(scenario: Scenario) -> Self {
        let mut cfg = ExperimentConfig {
            scenario,
            seed: 2024,
            data: DataConfig {
                n: 250,
                m: 500,
                s_min: 10,
                s_max: 100,
                batch_size: 256,
                snr_db: None,
                matrix_kind: MatrixKind::Gaussian,
                support: SupportPattern::Uniform,
            },
            network: NetworkConfig {
                kind: NetKind::Lista,
                shared: true,
                fixed_depth: 14,
                adaptive_depth: 16,
                init_threshold: 0.1,
                cpss_p_max: None,
            },
            halting: HaltingConfig {
                design: HaltingDesign::LearnedQ,
                h_last: DEFAULT_H_LAST,
            },
            train: TrainConfig::default(),
            eval: EvalConfig {
                holdout_batches: 8,
                epsilons: default_epsilons(),
                success_db: -10.0,
                fig1_depths: Vec::new(),
            },
        };
        match scenario {
            Scenario::Synthetic => {}
            Scenario::Rademacher => cfg.data.matrix_kind = MatrixKind::Rademacher,
            Scenario::MtcAccess => {
                cfg.data = DataConfig {
                    n: 64,
                    m: 256,
                    s_min: 1,
                    s_max: 20,
                    batch_size: 256,
                    snr_db: Some(20.0),
                    matrix_kind: MatrixKind::QpskStacked,
                    support: SupportPattern::Uniform,
                };
                cfg.network.fixed_depth = 18;
                cfg.network.adaptive_depth = 20;
                cfg.train.tau = 100.0;
            }
            Scenario::MixedSparsityFig1 => {
                cfg.data = DataConfig {
                    n: 64,
                    m: 128,
                    s_min: 2,
                    s_max: 4,
                    batch_size: 256,
                    snr_db: None,
                    matrix_kind: MatrixKind::Gaussian,
                    support: SupportPattern::Uniform,
                };
                cfg.network.fixed_depth = 6;
                cfg.network.adaptive_depth = 8;
                cfg.eval.fig1_depths = (3..=10).collect();
            }
            Scenario::ClusteredSparse => {
                cfg.data = DataConfig {
                    n: 64,
                    m: 128,
                    s_min: 2,
                    s_max: 12,
                    batch_size: 256,
                    snr_db: Some(20.0),
                    matrix_kind: MatrixKind::Gaussian,
                    support: SupportPattern::Clustered { spread: 16 },
                };
                cfg.network.fixed_depth = 8;
                cfg.network.adaptive_depth = 10;
            }
        }
        cfg
    }

    /// Parses a TOML config: the scenario preset overridden by the file.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(vec![msg]);
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        let scenario = match file.get("scenario") {
            Some(v) => Scenario::deserialize(v.clone()).map_err(|e| bad(format!("scenario: {e}")))?,
            None => Scenario::Synthetic,
        };
        let preset = toml::Table::try_from(Self::preset(scenario)).map_err(|e| bad(e.to_string()))?;
        let mut merged = toml::Value::Table(preset);
        merge(&mut merged, toml::Value::Table(file));
        let cfg = ExperimentConfig::deserialize(merged).map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every violated constraint, one message each.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.batch_config(1).validate();
        errs.extend(self.train.validate());
        let net = &self.network;
        if net.fixed_depth < 1 || net.adaptive_depth < 1 {
            errs.push("network: depths must be >= 1".into());
        }
        if !(net.init_threshold > 0.0) {
            errs.push(format!("network: init_threshold must be > 0, got {}", net.init_threshold));
        }
        if let Some(p) = net.cpss_p_max {
            if !(p > 0.0 && p <= 1.0) {
                errs.push(format!("network: cpss_p_max must lie in (0, 1], got {p}"));
            }
        }
        if !(self.halting.h_last > 0.0 && self.halting.h_last < 1.0) {
            errs.push(format!("halting: h_last must lie in (0, 1), got {}", self.halting.h_last));
        }
        if self.eval.holdout_batches < 1 {
            errs.push("eval: holdout_batches must be >= 1".into());
        }
        if self.eval.epsilons.is_empty() || self.eval.epsilons.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            errs.push(format!("eval: epsilons must be non-empty and lie in (0, 1), got {:?}", self.eval.epsilons));
        }
        match self.scenario {
            Scenario::MtcAccess if self.data.matrix_kind != MatrixKind::QpskStacked => {
                errs.push("scenario mtc_access requires data.matrix_kind = \"qpsk_stacked\"".into());
            }
            Scenario::MixedSparsityFig1 => {
                if self.data.s_max != self.data.s_min + 2 {
                    errs.push("scenario mixed_sparsity_fig1 uses two sparsity levels: need s_max = s_min + 2".into());
                }
                if self.eval.fig1_depths.is_empty() || self.eval.fig1_depths.iter().any(|&l| l < 3) {
                    errs.push("scenario mixed_sparsity_fig1 needs eval.fig1_depths, each >= 3".into());
                }
            }
            _ => {}
        }
        errs
    }

    /// Training stream with room for `n_batches` batches.
    pub fn batch_config(&self, n_batches: usize) -> BatchConfig {
        let d = &self.data;
        BatchConfig {
            n: d.n,
            m: d.m,
            s_min: d.s_min,
            s_max: d.s_max,
            batch_size: d.batch_size,
            n_batches,
            snr_db: d.snr_db,
            matrix_kind: d.matrix_kind,
            support: d.support,
            master_seed: self.seed,
        }
    }

    /// Total training batches of a run.
    pub fn training_batches(&self) -> usize {
        self.train.fixed_batches + self.train.stage1_batches + self.train.stage2_batches
    }

    /// Real signal length (doubled for stacked complex problems).
    pub fn real_m(&self) -> usize {
        match self.data.matrix_kind {
            MatrixKind::QpskStacked => 2 * self.data.m,
            _ => self.data.m,
        }
    }

    pub fn net_init(&self) -> NetInit {
        NetInit {
            threshold: self.network.init_threshold,
            cpss_p_max: self
                .network
                .cpss_p_max
                .unwrap_or_else(|| (self.data.s_max as f64 / self.data.m as f64).min(1.0)),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_round_trip() {
        for s in [
            Scenario::Synthetic,
            Scenario::Rademacher,
            Scenario::MtcAccess,
            Scenario::MixedSparsityFig1,
            Scenario::ClusteredSparse,
        ] {
            let cfg = ExperimentConfig::preset(s);
            assert!(cfg.validate().is_empty(), "{s:?}: {:?}", cfg.validate());
            assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn scenario_defaults() {
        let mtc = ExperimentConfig::preset(Scenario::MtcAccess);
        assert_eq!((mtc.data.m, mtc.data.n), (256, 64));
        assert_eq!((mtc.data.s_min, mtc.data.s_max), (1, 20));
        assert_eq!(mtc.data.snr_db, Some(20.0));
        assert_eq!(mtc.train.tau, 100.0);
        assert_eq!((mtc.network.fixed_depth, mtc.network.adaptive_depth), (18, 20));
        assert_eq!(mtc.real_m(), 512);
        let syn = ExperimentConfig::preset(Scenario::Synthetic);
        assert_eq!((syn.data.n, syn.data.m, syn.data.s_min, syn.data.s_max), (250, 500, 10, 100));
        assert_eq!((syn.network.fixed_depth, syn.network.adaptive_depth), (14, 16));
        assert_eq!(syn.train.tau, 10.0);
    }

    #[test]
    fn overrides_merge_into_preset() {
        let cfg = ExperimentConfig::from_toml_str(
            "scenario = \"mtc_access\"\nseed = 5\n[data]\ns_max = 10\n[train]\ntau = 3.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.data.s_max, 10);
        assert_eq!(cfg.data.n, 64);
        assert_eq!(cfg.train.tau, 3.0);
        assert_eq!(cfg.train.lr_ratios, vec![0.1, 0.01, 0.001]);
    }

    #[test]
    fn validation_lists_every_problem() {
        let err = ExperimentConfig::from_toml_str("[data]\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut cfg = ExperimentConfig::preset(Scenario::MtcAccess);
        cfg.data.matrix_kind = MatrixKind::Gaussian;
        cfg.halting.h_last = 1.5;
        cfg.eval.epsilons = vec![0.0];
        cfg.train.plateau_patience = 0;
        assert_eq!(cfg.validate().len(), 4);
    }
}
