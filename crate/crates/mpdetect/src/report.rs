//! CSV tables, bar charts and heatmap images.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use image::{GrayImage, Luma, Rgb, RgbImage};
use mpdetect_core::cnn::{Heatmap, MultipathCnn, TrainReport};
use mpdetect_core::dataset::Dataset;

use crate::experiment::{Experiment, ResultRow, ResultTable};

pub const RESULTS_HEADER: [&str; 9] = [
    "experiment",
    "ti_ms",
    "cn0_dbhz",
    "dtheta_deg",
    "n_discr",
    "model",
    "acc_mean_pct",
    "acc_std_pct",
    "n_runs",
];

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn results_csv(table: &ResultTable) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    for r in &table.rows {
        let k = &r.key;
        w.write_record([
            k.experiment.to_string(),
            k.ti_ms.to_string(),
            k.cn0_dbhz.to_string(),
            k.dtheta.to_string(),
            k.n_discr.to_string(),
            k.model.to_string(),
            format!("{:.2}", r.acc_mean_pct),
            format!("{:.2}", r.acc_std_pct),
            r.n_runs.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Writes `results.csv` and one grouped-bar chart per experiment present.
pub fn emit_results(table: &ResultTable, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        bail!("no result rows to emit");
    }
    create_dir(out)?;
    let csv_path = out.join("results.csv");
    fs::write(&csv_path, results_csv(table)?).with_context(|| format!("writing {}", csv_path.display()))?;
    let mut written = vec![csv_path];
    for exp in [Experiment::Type1, Experiment::Type2] {
        let rows: Vec<&ResultRow> = table.rows.iter().filter(|r| r.key.experiment == exp).collect();
        if rows.is_empty() {
            continue;
        }
        let path = out.join(format!("{exp}.png"));
        bar_chart(&rows, exp)
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Grouped bars with ±std whiskers on a 0-100 % axis with 10 % gridlines.
/// Type 1 groups by grid size with one bar per scenario cell; type 2 groups
/// by scenario cell with one bar per model. Unlabeled: the CSV carries the
/// numbers.
type RowLabel = Box<dyn Fn(&ResultRow) -> String>;

fn bar_chart(rows: &[&ResultRow], exp: Experiment) -> RgbImage {
    let cell = |r: &ResultRow| format!("{}|{}|{}", r.key.ti_ms, r.key.cn0_dbhz, r.key.dtheta);
    let (group_of, series_of): (RowLabel, RowLabel) = match exp {
        Experiment::Type1 => (Box::new(|r| format!("{:04}", r.key.n_discr)), Box::new(cell)),
        Experiment::Type2 => (Box::new(cell), Box::new(|r| r.key.model.to_string())),
    };
    let mut groups: Vec<String> = Vec::new();
    let mut series: Vec<String> = Vec::new();
    for r in rows {
        for (list, v) in [(&mut groups, group_of(r)), (&mut series, series_of(r))] {
            if !list.contains(&v) {
                list.push(v);
            }
        }
    }
    let bar_w = 10u32;
    let group_w = bar_w * series.len() as u32 + 12;
    let (left, top, plot_h) = (40u32, 20u32, 300u32);
    let width = left + group_w * groups.len() as u32 + 20;
    let height = top + plot_h + 30;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let y_of = |pct: f64| top + plot_h - ((pct.clamp(0.0, 100.0) / 100.0) * plot_h as f64).round() as u32;
    for tick in 0..=10 {
        let y = y_of(tick as f64 * 10.0);
        let shade = if tick % 5 == 0 { 150 } else { 225 };
        for x in left..width - 10 {
            img.put_pixel(x, y, Rgb([shade; 3]));
        }
    }
    for y in top..=top + plot_h {
        img.put_pixel(left - 1, y, Rgb([0; 3]));
    }
    for r in rows {
        let g = groups.iter().position(|v| *v == group_of(r)).unwrap() as u32;
        let s = series.iter().position(|v| *v == series_of(r)).unwrap();
        let x0 = left + 6 + g * group_w + s as u32 * bar_w;
        let color = Rgb(PALETTE[s % PALETTE.len()]);
        for x in x0..x0 + bar_w - 1 {
            for y in y_of(r.acc_mean_pct)..=top + plot_h {
                img.put_pixel(x, y, color);
            }
        }
        let xm = x0 + bar_w / 2 - 1;
        let (hi, lo) = (
            y_of(r.acc_mean_pct + r.acc_std_pct),
            y_of(r.acc_mean_pct - r.acc_std_pct),
        );
        for y in hi..=lo {
            img.put_pixel(xm, y, Rgb([0; 3]));
        }
        for x in xm.saturating_sub(2)..=xm + 2 {
            img.put_pixel(x, hi, Rgb([0; 3]));
            img.put_pixel(x, lo, Rgb([0; 3]));
        }
    }
    // legend swatches under the axis, in series order
    for s in 0..series.len() as u32 {
        for x in left + s * 14..left + s * 14 + 10 {
            for y in height - 16..height - 6 {
                img.put_pixel(x, y, Rgb(PALETTE[s as usize % PALETTE.len()]));
            }
        }
    }
    img
}

pub fn train_report_csv(report: &TrainReport) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "train_acc", "val_acc"])?;
    for e in &report.epochs {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.train_loss),
            format!("{:.6}", e.train_acc),
            e.val_acc.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn matrix_csv(values: &[f64], n: usize) -> anyhow::Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in values.chunks(n) {
        w.write_record(row.iter().map(|v| format!("{v:.6}")))?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

const PIXELS_PER_CELL: u32 = 8;

/// Grayscale image of an `n × n` matrix, min-max scaled, each cell drawn
/// as an 8×8 block.
fn gray_image(values: &[f64], n: usize, range: (f64, f64)) -> GrayImage {
    let (lo, hi) = range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let side = n as u32 * PIXELS_PER_CELL;
    GrayImage::from_fn(side, side, |x, y| {
        let v = values[(y / PIXELS_PER_CELL) as usize * n + (x / PIXELS_PER_CELL) as usize];
        Luma([(255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8])
    })
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Files of one heatmap sample directory: `heatmap.csv`, `heatmap.png`,
/// `input_i.csv` and `input_i.png`.
pub fn write_heatmap_dir(dir: &Path, heatmap: &Heatmap, i_plane: &[f32]) -> anyhow::Result<()> {
    create_dir(dir)?;
    let n = heatmap.n;
    let input: Vec<f64> = i_plane.iter().map(|&v| v as f64).collect();
    fs::write(dir.join("heatmap.csv"), matrix_csv(&heatmap.values, n)?)?;
    fs::write(dir.join("input_i.csv"), matrix_csv(&input, n)?)?;
    gray_image(&heatmap.values, n, (0.0, 1.0)).save(dir.join("heatmap.png"))?;
    gray_image(&input, n, min_max(&input)).save(dir.join("input_i.png"))?;
    Ok(())
}

/// Heatmaps of the first `k` samples of each class, one directory per
/// sample (`class{c}_sample{i:03}`). Returns the directories.
pub fn emit_heatmaps(model: &MultipathCnn, ds: &Dataset, k: usize, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for class in [0u8, 1] {
        let picked: Vec<_> = ds.samples.iter().filter(|s| s.label == class).take(k).collect();
        if picked.len() < k {
            bail!("dataset has {} samples of class {class}, {k} requested", picked.len());
        }
        for (i, s) in picked.into_iter().enumerate() {
            let dir = out.join(format!("class{class}_sample{i:03}"));
            write_heatmap_dir(&dir, &model.grad_cam(s)?, s.i_plane())?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

/// Parses an `n × n` matrix written by the heatmap emitter.
pub fn read_matrix_csv(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    r.records()
        .map(|rec| Ok(rec?.iter().map(str::parse).collect::<Result<Vec<f64>, _>>()?))
        .collect()
}


#[cfg(test)]
mod emission_tests {
    use super::*;
    use crate::config::{ExperimentConfig, PhaseMode};
    use crate::experiment::run_type1;
    use mpdetect_core::dataset::{build_dataset, PhaseRule, ScenarioConfig};

    fn tiny(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            runs: 1,
            train_per_class: 4,
            test_per_class: 2,
            ti_ms: vec![1.0],
            cn0_dbhz: vec![50.0],
            dtheta_deg: vec![0.0],
            n_discr: vec![4, 40],
            training: mpdetect_core::cnn::TrainConfig {
                epochs: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn type1_cartesian_count() {
        let table = run_type1(&tiny(3), &|_| {}).unwrap();
        assert_eq!(table.rows.len(), 2);
        let ns: Vec<usize> = table.rows.iter().map(|r| r.key.n_discr).collect();
        assert_eq!(ns, [4, 40]);
        for r in &table.rows {
            assert_eq!(r.n_runs, 1);
            assert!((0.0..=100.0).contains(&r.acc_mean_pct));
            assert_eq!(r.acc_std_pct, 0.0);
        }
    }

    #[test]
    fn type1_is_deterministic_and_emits_files() {
        let mut cfg = tiny(9);
        cfg.n_discr = vec![4, 6];
        cfg.runs = 2;
        cfg.phase_mode = PhaseMode::Pooled;
        cfg.dtheta_deg = vec![0.0, 90.0];
        let a = run_type1(&cfg, &|_| {}).unwrap();
        let b = run_type1(&cfg, &|_| {}).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_results(&a, dir.path()).unwrap();
        assert!(files.iter().any(|f| f.ends_with("results.csv")));
        assert!(files.iter().any(|f| f.ends_with("type1.png")));
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("type1,1,50,all,4,cnn,"));
    }

    #[test]
    fn heatmaps_one_per_class_and_bounded() {
        let cfg = ScenarioConfig::new(1e-3, 40.0, PhaseRule::Fixed(0.0));
        let ds = build_dataset(&cfg, 8, 2, 4).unwrap();
        let model = MultipathCnn::new(8, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let dirs = emit_heatmaps(&model, &ds, 1, dir.path()).unwrap();
        assert_eq!(dirs.len(), 2);
        for d in &dirs {
            for f in ["heatmap.csv", "heatmap.png", "input_i.csv", "input_i.png"] {
                assert!(d.join(f).is_file(), "{f} missing in {}", d.display());
            }
            let m = read_matrix_csv(&d.join("heatmap.csv")).unwrap();
            assert_eq!(m.len(), 8);
            assert!(m
                .iter()
                .all(|row| row.len() == 8 && row.iter().all(|v| (0.0..=1.0).contains(v))));
            let input = read_matrix_csv(&d.join("input_i.csv")).unwrap();
            assert_eq!(input.len(), 8);
        }
        assert!(emit_heatmaps(&model, &ds, 3, dir.path()).is_err());
    }
}
