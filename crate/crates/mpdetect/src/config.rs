use std::path::Path;

use anyhow::{bail, Context};
use mpdetect_core::cnn::TrainConfig;
use mpdetect_core::dataset::{PhaseRule, ScenarioConfig};
use serde::{Deserialize, Serialize};

/// How replica phase offsets map onto result rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    /// One row per listed offset.
    Separate,
    /// One row per cell, each multipath sample drawing its offset from the list.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub folds: usize,
    pub tol: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c_grid: vec![0.1, 1.0, 10.0, 100.0],
            gamma_grid: vec![0.01, 0.1, 1.0, 10.0],
            folds: 3,
            tol: 1e-3,
        }
    }
}

impl SvmConfig {
    pub fn grid(&self) -> Vec<(f64, f64)> {
        self.c_grid
            .iter()
            .flat_map(|&c| self.gamma_grid.iter().map(move |&g| (c, g)))
            .collect()
    }
}

/// Everything an experiment campaign needs. Missing JSON fields take the
/// desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub runs: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ti_ms: Vec<f64>,
    pub cn0_dbhz: Vec<f64>,
    pub dtheta_deg: Vec<f64>,
    pub phase_mode: PhaseMode,
    /// Grid sizes of the discretization study.
    pub n_discr: Vec<usize>,
    /// Grid size of the CNN in the detector comparison.
    pub compare_n: usize,
    pub alpha_range: (f64, f64),
    pub dtau_range_chips: (f64, f64),
    pub df_range_hz: (f64, f64),
    /// Epochs per tap series fed to the SVM features.
    pub tap_epochs: usize,
    pub training: TrainConfig,
    pub svm: SvmConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            runs: 5,
            train_per_class: 800,
            test_per_class: 200,
            ti_ms: vec![1.0, 20.0],
            cn0_dbhz: vec![20.0, 30.0, 40.0, 50.0, 60.0],
            dtheta_deg: vec![0.0, 45.0, 90.0, 180.0],
            phase_mode: PhaseMode::Separate,
            n_discr: vec![4, 6, 8, 10, 20, 30, 40],
            compare_n: 10,
            alpha_range: (0.5, 0.9),
            dtau_range_chips: (0.1, 0.8),
            df_range_hz: (0.0, 1000.0),
            tap_epochs: 20,
            training: TrainConfig::default(),
            svm: SvmConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full-scale campaign: 20 runs per cell and larger datasets.
    pub fn full_scale() -> Self {
        ExperimentConfig {
            runs: 20,
            train_per_class: 2000,
            test_per_class: 500,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.runs == 0 {
            bail!("runs must be at least 1");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            bail!("dataset sizes must be positive");
        }
        if self.ti_ms.is_empty() || self.cn0_dbhz.is_empty() || self.dtheta_deg.is_empty() || self.n_discr.is_empty() {
            bail!("ti, cn0, dtheta and discretization lists must be non-empty");
        }
        if let Some(n) = self.n_discr.iter().chain([&self.compare_n]).find(|&&n| n < 4) {
            bail!("grid size {n} is below the 4×4 minimum");
        }
        if self.tap_epochs < 2 {
            bail!("tap series need at least 2 epochs");
        }
        if self.svm.grid().is_empty() || self.svm.folds < 2 || !(self.svm.tol > 0.0) {
            bail!("SVM grid must be non-empty with at least 2 folds and a positive tolerance");
        }
        for &ti in &self.ti_ms {
            for &cn0 in &self.cn0_dbhz {
                for phase in self.phase_cells() {
                    self.scenario(ti, cn0, &phase).validate()?;
                }
            }
        }
        Ok(())
    }

    /// Phase rules of the result rows: one fixed offset per row, or the
    /// whole list pooled into a single row.
    pub fn phase_cells(&self) -> Vec<PhaseRule> {
        match self.phase_mode {
            PhaseMode::Separate => self.dtheta_deg.iter().map(|&d| PhaseRule::Fixed(d)).collect(),
            PhaseMode::Pooled => vec![PhaseRule::Choice(self.dtheta_deg.clone())],
        }
    }

    pub fn scenario(&self, ti_ms: f64, cn0_dbhz: f64, phase: &PhaseRule) -> ScenarioConfig {
        ScenarioConfig {
            alpha_range: self.alpha_range,
            dtau_range: self.dtau_range_chips,
            df_range: self.df_range_hz,
            ..ScenarioConfig::new(ti_ms * 1e-3, cn0_dbhz, phase.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = ExperimentConfig::default();
        assert_eq!((c.runs, c.train_per_class, c.test_per_class), (5, 800, 200));
        assert_eq!(c.svm.grid().len(), 16);
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::full_scale().runs, 20);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"runs": 2, "cn0_dbhz": [45]}"#).unwrap();
        assert_eq!(c.runs, 2);
        assert_eq!(c.cn0_dbhz, vec![45.0]);
        assert_eq!(c.n_discr, ExperimentConfig::default().n_discr);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"runz": 2}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ExperimentConfig {
                runs: 0,
                ..Default::default()
            },
            ExperimentConfig {
                n_discr: vec![3],
                ..Default::default()
            },
            ExperimentConfig {
                alpha_range: (0.9, 0.5),
                ..Default::default()
            },
            ExperimentConfig {
                dtheta_deg: vec![],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn phase_cells_follow_the_mode() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.phase_cells().len(), 4);
        c.phase_mode = PhaseMode::Pooled;
        assert_eq!(c.phase_cells(), vec![PhaseRule::Choice(vec![0.0, 45.0, 90.0, 180.0])]);
    }
}
