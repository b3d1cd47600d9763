//! The two experiment campaigns: accuracy versus grid size (type 1) and
//! MultipathCNN versus SVM on shared scenario draws (type 2).

use std::collections::BTreeMap;
use std::fmt;

use anyhow::Context;
use mpdetect_core::cnn::{MultipathCnn, TrainConfig};
use mpdetect_core::dataset::{build_dataset, build_tap_dataset, PhaseRule, ScenarioConfig, TapSeries, TAPS};
use mpdetect_core::rng::derive_seed;
use mpdetect_core::svm::{cross_validate, features, fit_svm, signed_label, SmoParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Type1,
    Type2,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Type1 => "type1",
            Experiment::Type2 => "type2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Cnn,
    Svm,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Cnn => "cnn",
            Model::Svm => "svm",
        })
    }
}

/// Replica phase of a row: a single offset, or several pooled together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhaseKey {
    Fixed(f64),
    Pooled,
}

impl PhaseKey {
    pub fn of(rule: &PhaseRule) -> Self {
        match rule {
            PhaseRule::Fixed(d) => PhaseKey::Fixed(*d),
            PhaseRule::Choice(_) => PhaseKey::Pooled,
        }
    }

    fn order(&self) -> (u8, u64) {
        match self {
            PhaseKey::Fixed(d) => (0, ordered_bits(*d)),
            PhaseKey::Pooled => (1, 0),
        }
    }
}

impl fmt::Display for PhaseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseKey::Fixed(d) => write!(f, "{d}"),
            PhaseKey::Pooled => f.write_str("all"),
        }
    }
}

/// Total order of finite floats as integers.
fn ordered_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub experiment: Experiment,
    pub ti_ms: f64,
    pub cn0_dbhz: f64,
    pub dtheta: PhaseKey,
    /// Grid side for the CNN, tap count for the SVM.
    pub n_discr: usize,
    pub model: Model,
}

impl RowKey {
    fn order(&self) -> impl Ord {
        (
            self.experiment,
            ordered_bits(self.ti_ms),
            ordered_bits(self.cn0_dbhz),
            self.dtheta.order(),
            self.n_discr,
            self.model,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub key: RowKey,
    pub acc_mean_pct: f64,
    pub acc_std_pct: f64,
    pub n_runs: usize,
}

/// Rows sorted by key, independent of the order runs finished in.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ResultTable {
    /// Aggregates per-run accuracies (fractions) into percent rows.
    pub fn from_runs(runs: Vec<(RowKey, f64)>) -> Self {
        let mut groups: BTreeMap<_, (RowKey, Vec<f64>)> = BTreeMap::new();
        for (key, acc) in runs {
            groups
                .entry(key.order())
                .or_insert_with(|| (key.clone(), Vec::new()))
                .1
                .push(100.0 * acc);
        }
        let rows = groups
            .into_values()
            .map(|(key, accs)| {
                let (mean, std) = mean_std(&accs);
                ResultRow {
                    key,
                    acc_mean_pct: mean,
                    acc_std_pct: std,
                    n_runs: accs.len(),
                }
            })
            .collect();
        ResultTable { rows }
    }

    pub fn merge(mut self, other: ResultTable) -> Self {
        self.rows.extend(other.rows);
        self.rows.sort_by_key(|r| r.key.order());
        self
    }

    pub fn find(&self, pred: impl Fn(&RowKey) -> bool) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| pred(&r.key)).collect()
    }
}

/// Seeds of one run of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub train: u64,
    pub test: u64,
    pub init: u64,
    pub shuffle: u64,
    pub svm: u64,
}

impl RunSeeds {
    /// Derived from the master seed and the scenario distribution of the
    /// cell, never from the model or grid size: every detector and every
    /// discretization of a run sees the same scenario draws.
    pub fn new(master: u64, experiment: Experiment, ti_ms: f64, cn0_dbhz: f64, phase: &PhaseKey, run: usize) -> Self {
        let mut s = derive_seed(master, experiment as u64 + 1);
        for part in [
            ti_ms.to_bits(),
            cn0_dbhz.to_bits(),
            phase.order().0 as u64,
            phase.order().1,
            run as u64,
        ] {
            s = derive_seed(s, part);
        }
        RunSeeds {
            train: derive_seed(s, 1),
            test: derive_seed(s, 2),
            init: derive_seed(s, 3),
            shuffle: derive_seed(s, 4),
            svm: derive_seed(s, 5),
        }
    }
}

/// Trains a MultipathCNN on one cell and returns its held-out accuracy.
pub fn cnn_run(cfg: &ExperimentConfig, scenario: &ScenarioConfig, n: usize, seeds: RunSeeds) -> anyhow::Result<f64> {
    let train = build_dataset(scenario, n, cfg.train_per_class, seeds.train)?;
    let test = build_dataset(scenario, n, cfg.test_per_class, seeds.test)?;
    let mut model = MultipathCnn::new(n, seeds.init)?;
    let tc = TrainConfig {
        seed: seeds.shuffle,
        ..cfg.training
    };
    model.train(&train, None, &tc)?;
    Ok(model.evaluate(&test)?)
}

/// SVM features and {-1, +1} labels of a set of tap series.
pub fn svm_inputs(series: &[TapSeries]) -> (Vec<Vec<f64>>, Vec<f64>) {
    series
        .iter()
        .map(|s| (features(s).to_vec(), signed_label(s.label)))
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmRun {
    pub accuracy: f64,
    pub c_box: f64,
    pub gamma: f64,
}

/// Cross-validates, fits and tests the SVM on one cell.
pub fn svm_run(cfg: &ExperimentConfig, scenario: &ScenarioConfig, seeds: RunSeeds) -> anyhow::Result<SvmRun> {
    let train = build_tap_dataset(scenario, cfg.train_per_class, cfg.tap_epochs, seeds.train)?;
    let test = build_tap_dataset(scenario, cfg.test_per_class, cfg.tap_epochs, seeds.test)?;
    let (x, y) = svm_inputs(&train);
    let (tx, ty) = svm_inputs(&test);
    let cv = cross_validate(&x, &y, cfg.svm.folds, &cfg.svm.grid(), cfg.svm.tol, seeds.svm)?;
    let params = SmoParams {
        tol: cfg.svm.tol,
        seed: seeds.svm,
        ..SmoParams::new(cv.c_box, cv.gamma)
    };
    let model = fit_svm(&x, &y, &params)?;
    Ok(SvmRun {
        accuracy: model.accuracy(&tx, &ty)?,
        c_box: cv.c_box,
        gamma: cv.gamma,
    })
}

/// One finished run, reported as it completes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub key: RowKey,
    pub run: usize,
    pub accuracy: f64,
}

struct Job {
    ti_ms: f64,
    cn0: f64,
    phase: PhaseRule,
    run: usize,
    n: usize,
}

fn jobs(cfg: &ExperimentConfig, sizes: &[usize]) -> Vec<Job> {
    let mut out = Vec::new();
    for &ti_ms in &cfg.ti_ms {
        for &cn0 in &cfg.cn0_dbhz {
            for phase in cfg.phase_cells() {
                for &n in sizes {
                    for run in 0..cfg.runs {
                        out.push(Job {
                            ti_ms,
                            cn0,
                            phase: phase.clone(),
                            run,
                            n,
                        });
                    }
                }
            }
        }
    }
    out
}

fn key(experiment: Experiment, job: &Job, n_discr: usize, model: Model) -> RowKey {
    RowKey {
        experiment,
        ti_ms: job.ti_ms,
        cn0_dbhz: job.cn0,
        dtheta: PhaseKey::of(&job.phase),
        n_discr,
        model,
    }
}

/// Accuracy of MultipathCNN for every (Ti, C/N0, phase, N) cell, averaged
/// over runs. Runs execute in parallel; `progress` sees each as it ends.
pub fn run_type1(cfg: &ExperimentConfig, progress: &(dyn Fn(&RunOutcome) + Sync)) -> anyhow::Result<ResultTable> {
    cfg.validate()?;
    let outcomes = jobs(cfg, &cfg.n_discr)
        .par_iter()
        .map(|job| {
            let phase = PhaseKey::of(&job.phase);
            let seeds = RunSeeds::new(cfg.seed, Experiment::Type1, job.ti_ms, job.cn0, &phase, job.run);
            let scenario = cfg.scenario(job.ti_ms, job.cn0, &job.phase);
            let acc = cnn_run(cfg, &scenario, job.n, seeds).with_context(|| {
                format!(
                    "type1 cell Ti={} ms C/N0={} N={} run {}",
                    job.ti_ms, job.cn0, job.n, job.run
                )
            })?;
            let outcome = RunOutcome {
                key: key(Experiment::Type1, job, job.n, Model::Cnn),
                run: job.run,
                accuracy: acc,
            };
            progress(&outcome);
            Ok(vec![outcome])
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(table(outcomes))
}

/// MultipathCNN on `compare_n`-point grids against the SVM on 13-tap
/// series, both trained and tested on the same scenario draws.
pub fn run_type2(cfg: &ExperimentConfig, progress: &(dyn Fn(&RunOutcome) + Sync)) -> anyhow::Result<ResultTable> {
    cfg.validate()?;
    let outcomes = jobs(cfg, &[cfg.compare_n])
        .par_iter()
        .map(|job| {
            let phase = PhaseKey::of(&job.phase);
            let seeds = RunSeeds::new(cfg.seed, Experiment::Type2, job.ti_ms, job.cn0, &phase, job.run);
            let scenario = cfg.scenario(job.ti_ms, job.cn0, &job.phase);
            let ctx = || format!("type2 cell Ti={} ms C/N0={} run {}", job.ti_ms, job.cn0, job.run);
            let cnn = cnn_run(cfg, &scenario, job.n, seeds).with_context(ctx)?;
            let svm = svm_run(cfg, &scenario, seeds).with_context(ctx)?;
            let out = vec![
                RunOutcome {
                    key: key(Experiment::Type2, job, job.n, Model::Cnn),
                    run: job.run,
                    accuracy: cnn,
                },
                RunOutcome {
                    key: key(Experiment::Type2, job, TAPS, Model::Svm),
                    run: job.run,
                    accuracy: svm.accuracy,
                },
            ];
            out.iter().for_each(progress);
            Ok(out)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(table(outcomes))
}

fn table(outcomes: Vec<Vec<RunOutcome>>) -> ResultTable {
    ResultTable::from_runs(outcomes.into_iter().flatten().map(|o| (o.key, o.accuracy)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(cn0: f64, model: Model) -> RowKey {
        RowKey {
            experiment: Experiment::Type2,
            ti_ms: 1.0,
            cn0_dbhz: cn0,
            dtheta: PhaseKey::Fixed(0.0),
            n_discr: 10,
            model,
        }
    }

    #[test]
    fn aggregation_is_order_independent() {
        let runs = vec![
            (key(30.0, Model::Svm), 0.5),
            (key(20.0, Model::Cnn), 0.9),
            (key(30.0, Model::Svm), 0.7),
            (key(20.0, Model::Cnn), 0.8),
        ];
        let mut reversed = runs.clone();
        reversed.reverse();
        let a = ResultTable::from_runs(runs);
        assert_eq!(a, ResultTable::from_runs(reversed));
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.rows[0].key.cn0_dbhz, 20.0);
        assert!((a.rows[0].acc_mean_pct - 85.0).abs() < 1e-9);
        assert!((a.rows[1].acc_std_pct - 14.142135623730951).abs() < 1e-9);
        assert_eq!(a.rows[1].n_runs, 2);
    }

    #[test]
    fn mean_std_oracle() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn seeds_ignore_grid_size_and_separate_runs() {
        let p = PhaseKey::Fixed(45.0);
        let a = RunSeeds::new(7, Experiment::Type1, 1.0, 40.0, &p, 0);
        assert_eq!(a, RunSeeds::new(7, Experiment::Type1, 1.0, 40.0, &p, 0));
        assert_ne!(a, RunSeeds::new(7, Experiment::Type1, 1.0, 40.0, &p, 1));
        assert_ne!(a, RunSeeds::new(7, Experiment::Type1, 1.0, 30.0, &p, 0));
        assert_ne!(a, RunSeeds::new(7, Experiment::Type1, 1.0, 40.0, &PhaseKey::Pooled, 0));
        assert_ne!(a.train, a.test);
    }

    #[test]
    fn phase_keys_render() {
        assert_eq!(PhaseKey::Fixed(45.0).to_string(), "45");
        assert_eq!(PhaseKey::Pooled.to_string(), "all");
    }
}
