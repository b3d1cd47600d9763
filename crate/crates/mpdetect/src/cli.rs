//! Command-line front end of the `mpdetect` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mpdetect_core::cnn::{MultipathCnn, TrainConfig};
use mpdetect_core::dataset::{build_dataset, build_tap_dataset, PhaseRule, ScenarioConfig};
use mpdetect_core::rng::derive_seed;
use mpdetect_core::svm::{cross_validate, fit_svm, SmoParams};

use crate::config::ExperimentConfig;
use crate::experiment::{self, svm_inputs, RunOutcome};
use crate::formats::{self, CheckpointMeta, DatasetManifest};
use crate::report;

/// GNSS multipath detection from correlator outputs.
#[derive(Parser)]
#[command(name = "mpdetect", version)]
struct Cli {
    /// Experiment configuration (JSON); missing fields take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Runs per experiment cell (overrides the config).
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Start from the full-scale configuration (20 runs, 2000/500 per class).
    #[arg(long, global = true)]
    full_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Cell {
    /// Coherent integration time, ms (default: first in the config).
    #[arg(long)]
    ti_ms: Option<f64>,
    /// C/N0, dB-Hz (default: first in the config).
    #[arg(long)]
    cn0: Option<f64>,
    /// Replica phase offset in degrees; default draws from the config list.
    #[arg(long)]
    dtheta: Option<f64>,
    /// Samples per class (default: the config's training size).
    #[arg(long)]
    per_class: Option<usize>,
}

impl Cell {
    fn scenario(&self, cfg: &ExperimentConfig) -> ScenarioConfig {
        let phase = match self.dtheta {
            Some(d) => PhaseRule::Fixed(d),
            None => PhaseRule::Choice(cfg.dtheta_deg.clone()),
        };
        cfg.scenario(
            self.ti_ms.unwrap_or(cfg.ti_ms[0]),
            self.cn0.unwrap_or(cfg.cn0_dbhz[0]),
            &phase,
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a balanced snapshot dataset (GMPD + JSON manifest).
    Generate {
        #[command(flatten)]
        cell: Cell,
        /// Grid side.
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// File name inside the output directory.
        #[arg(long, default_value = "dataset.gmpd")]
        name: String,
    },
    /// Train MultipathCNN on a dataset file.
    TrainCnn {
        #[arg(long)]
        train: PathBuf,
        /// Held-out dataset evaluated after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "model.gmpw")]
        name: String,
    },
    /// Train the SVM on freshly generated tap series.
    TrainSvm {
        #[command(flatten)]
        cell: Cell,
        #[arg(long, default_value = "svm.json")]
        name: String,
    },
    /// Accuracy of a trained model.
    Eval {
        /// MultipathCNN checkpoint, evaluated on `--data`.
        #[arg(long, requires = "data")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// SVM model, evaluated on tap series generated from the cell flags.
        #[arg(long, conflicts_with = "model")]
        svm: Option<PathBuf>,
        #[command(flatten)]
        cell: Cell,
    },
    /// Run an experiment campaign and write results.csv plus charts.
    Experiment {
        #[command(subcommand)]
        kind: ExperimentKind,
    },
    /// Class activation heatmaps of a trained model.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Samples per class.
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
}

#[derive(Subcommand, Clone, Copy)]
enum ExperimentKind {
    /// Accuracy versus grid size.
    Type1,
    /// MultipathCNN versus SVM.
    Type2,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if cli.full_scale => ExperimentConfig::full_scale(),
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.runs {
        cfg.runs = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_outcome(o: &RunOutcome) {
    let k = &o.key;
    eprintln!(
        "{} Ti={} ms C/N0={} dB-Hz dtheta={} N={} {} run {}: {:.2}%",
        k.experiment,
        k.ti_ms,
        k.cn0_dbhz,
        k.dtheta,
        k.n_discr,
        k.model,
        o.run,
        100.0 * o.accuracy
    );
}

fn out_file(out: &Path, name: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out.join(name))
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate { cell, n, name } => {
            let scenario = cell.scenario(&cfg);
            let per_class = cell.per_class.unwrap_or(cfg.train_per_class);
            let ds = build_dataset(&scenario, *n, per_class, cfg.seed)?;
            let path = out_file(&cli.out, name)?;
            let manifest = DatasetManifest::new(&ds, cfg.seed, scenario, cfg.clone());
            formats::write_dataset(&path, &ds, &manifest)?;
            println!("wrote {} ({} samples, {n}×{n})", path.display(), ds.len());
        }
        Command::TrainCnn {
            train,
            val,
            epochs,
            name,
        } => {
            let ds = formats::read_dataset(train)?;
            let val = val.as_deref().map(formats::read_dataset).transpose()?;
            let init_seed = derive_seed(cfg.seed, 3);
            let tc = TrainConfig {
                epochs: epochs.unwrap_or(cfg.training.epochs),
                seed: derive_seed(cfg.seed, 4),
                ..cfg.training
            };
            let mut model = MultipathCnn::new(ds.n, init_seed)?;
            let start = Instant::now();
            let mut report = model.train_with(&ds, val.as_ref(), &tc, |e| {
                let val = e.val_acc.map(|v| format!(", val acc {v:.4}")).unwrap_or_default();
                eprintln!(
                    "epoch {}: loss {:.4}, train acc {:.4}{val}",
                    e.epoch, e.train_loss, e.train_acc
                );
            })?;
            let path = out_file(&cli.out, name)?;
            formats::save_checkpoint(&path, &model, &CheckpointMeta::new(&model, Some(tc), init_seed))?;
            report.wall_clock_s = Some(start.elapsed().as_secs_f64());
            report.checkpoint = Some(path.display().to_string());
            std::fs::write(cli.out.join("train_report.csv"), report::train_report_csv(&report)?)?;
            println!("wrote {} after {:.1} s", path.display(), report.wall_clock_s.unwrap());
        }
        Command::TrainSvm { cell, name } => {
            let scenario = cell.scenario(&cfg);
            let per_class = cell.per_class.unwrap_or(cfg.train_per_class);
            let series = build_tap_dataset(&scenario, per_class, cfg.tap_epochs, cfg.seed)?;
            let (x, y) = svm_inputs(&series);
            let svm_seed = derive_seed(cfg.seed, 5);
            let cv = cross_validate(&x, &y, cfg.svm.folds, &cfg.svm.grid(), cfg.svm.tol, svm_seed)?;
            let params = SmoParams {
                tol: cfg.svm.tol,
                seed: svm_seed,
                ..SmoParams::new(cv.c_box, cv.gamma)
            };
            let model = fit_svm(&x, &y, &params)?;
            let path = out_file(&cli.out, name)?;
            formats::save_svm(&path, &model)?;
            println!(
                "wrote {} (C = {}, gamma = {}, cv accuracy {:.4}, {} support vectors)",
                path.display(),
                cv.c_box,
                cv.gamma,
                cv.best().mean_acc,
                model.support_vectors.len()
            );
        }
        Command::Eval { model, data, svm, cell } => {
            if let Some(model) = model {
                let (m, _) = formats::load_checkpoint(model)?;
                let ds = formats::read_dataset(data.as_ref().expect("clap enforces --data"))?;
                println!("accuracy {:.4}", m.evaluate(&ds)?);
            } else if let Some(svm) = svm {
                let m = formats::load_svm(svm)?;
                let scenario = cell.scenario(&cfg);
                let per_class = cell.per_class.unwrap_or(cfg.test_per_class);
                let series = build_tap_dataset(&scenario, per_class, cfg.tap_epochs, derive_seed(cfg.seed, 2))?;
                let (x, y) = svm_inputs(&series);
                println!("accuracy {:.4}", m.accuracy(&x, &y)?);
            } else {
                bail!("eval needs --model with --data, or --svm");
            }
        }
        Command::Experiment { kind } => {
            let table = match kind {
                ExperimentKind::Type1 => experiment::run_type1(&cfg, &log_outcome)?,
                ExperimentKind::Type2 => experiment::run_type2(&cfg, &log_outcome)?,
            };
            for f in report::emit_results(&table, &cli.out)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Heatmap { model, data, k } => {
            let (m, _) = formats::load_checkpoint(model)?;
            let ds = formats::read_dataset(data)?;
            let dirs = report::emit_heatmaps(&m, &ds, *k, &cli.out.join("heatmaps"))?;
            println!(
                "wrote {} heatmap directories under {}",
                dirs.len(),
                cli.out.join("heatmaps").display()
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mpdetect(args: &[&str], out: &Path) {
        let argv = ["mpdetect", "--out", out.to_str().unwrap()]
            .into_iter()
            .chain(args.iter().copied());
        if let Err(e) = run(argv) {
            panic!("mpdetect {args:?} failed: {e:#}");
        }
    }

    const TINY: &str = r#"{
      "runs": 1, "train_per_class": 6, "test_per_class": 4,
      "ti_ms": [1], "cn0_dbhz": [40], "dtheta_deg": [0, 90], "phase_mode": "pooled",
      "n_discr": [4], "compare_n": 4,
      "training": {"epochs": 1},
      "svm": {"c_grid": [1.0], "gamma_grid": [0.1], "folds": 2}
    }"#;

    #[test]
    fn generate_train_eval_heatmap_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = out.join("cfg.json");
        std::fs::write(&cfg, TINY).unwrap();
        let cfg = cfg.to_str().unwrap();
        mpdetect(
            &[
                "--config",
                cfg,
                "generate",
                "--n",
                "6",
                "--per-class",
                "5",
                "--name",
                "train.gmpd",
            ],
            out,
        );
        mpdetect(
            &[
                "--config",
                cfg,
                "--seed",
                "1",
                "generate",
                "--n",
                "6",
                "--per-class",
                "3",
                "--name",
                "val.gmpd",
            ],
            out,
        );
        assert!(out.join("train.gmpd.json").is_file());
        let train = out.join("train.gmpd");
        let val = out.join("val.gmpd");
        mpdetect(
            &[
                "--config",
                cfg,
                "train-cnn",
                "--train",
                train.to_str().unwrap(),
                "--val",
                val.to_str().unwrap(),
                "--epochs",
                "2",
            ],
            out,
        );
        let report = std::fs::read_to_string(out.join("train_report.csv")).unwrap();
        assert_eq!(report.lines().count(), 3);
        let model = out.join("model.gmpw");
        assert!(model.is_file() && out.join("model.gmpw.json").is_file());
        mpdetect(
            &[
                "eval",
                "--model",
                model.to_str().unwrap(),
                "--data",
                val.to_str().unwrap(),
            ],
            out,
        );
        mpdetect(
            &[
                "heatmap",
                "--model",
                model.to_str().unwrap(),
                "--data",
                val.to_str().unwrap(),
                "--k",
                "1",
            ],
            out,
        );
        assert!(out.join("heatmaps/class0_sample000/heatmap.csv").is_file());
        assert!(out.join("heatmaps/class1_sample000/heatmap.csv").is_file());

        mpdetect(&["--config", cfg, "train-svm", "--per-class", "10"], out);
        let svm = out.join("svm.json");
        mpdetect(&["--config", cfg, "eval", "--svm", svm.to_str().unwrap()], out);
        assert!(run(["mpdetect", "eval"]).is_err());
    }

    #[test]
    fn same_seed_gives_identical_results_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("cfg.json");
        std::fs::write(&cfg, TINY).unwrap();
        let run = |sub: &str| {
            let out = dir.path().join(sub);
            mpdetect(
                &["--config", cfg.to_str().unwrap(), "--seed", "7", "experiment", "type2"],
                &out,
            );
            std::fs::read(out.join("results.csv")).unwrap()
        };
        let (a, b) = (run("a"), run("b"));
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains(",4,cnn,") && text.contains(",13,svm,"));
    }

    #[test]
    fn bad_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("cfg.json");
        for text in [r#"{"runs": 0}"#, r#"{"bogus": 1}"#] {
            std::fs::write(&cfg, text).unwrap();
            assert!(run(["mpdetect", "--config", cfg.to_str().unwrap(), "experiment", "type1"]).is_err());
        }
    }
}
