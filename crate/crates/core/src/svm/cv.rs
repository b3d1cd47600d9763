use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::smo::{fit_svm, SmoParams};
use crate::rng::stream;
use crate::{Error, Result};

pub const DEFAULT_C: [f64; 4] = [0.1, 1.0, 10.0, 100.0];
pub const DEFAULT_GAMMA: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

/// The 4×4 (C, gamma) grid searched by default.
pub const DEFAULT_GRID: [(f64, f64); 16] = {
    let mut g = [(0.0, 0.0); 16];
    let mut i = 0;
    while i < 16 {
        g[i] = (DEFAULT_C[i / 4], DEFAULT_GAMMA[i % 4]);
        i += 1;
    }
    g
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub c_box: f64,
    pub gamma: f64,
    pub fold_acc: Vec<f64>,
    pub mean_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub c_box: f64,
    pub gamma: f64,
    pub scores: Vec<GridScore>,
}

impl CvResult {
    pub fn best(&self) -> &GridScore {
        self.scores
            .iter()
            .find(|s| s.c_box == self.c_box && s.gamma == self.gamma)
            .expect("best point is scored")
    }
}

/// Fold index of every sample: each class is shuffled and dealt round-robin,
/// so per-class fold sizes differ by at most one.
pub fn stratified_folds(y: &[f64], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::DegenerateFolds(format!("{folds} folds")));
    }
    let mut assignment = alloc::vec![0; y.len()];
    let mut rng = stream(seed, 0xf01d);
    for class in [-1.0, 1.0] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        if idx.len() < folds {
            return Err(Error::DegenerateFolds(format!(
                "class {class} has {} samples for {folds} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (k, &i) in idx.iter().enumerate() {
            assignment[i] = k % folds;
        }
    }
    Ok(assignment)
}

/// Grid search by stratified k-fold accuracy. The scaler is refit on every
/// training fold. Equal mean accuracies go to the smaller C, then the
/// smaller gamma.
pub fn cross_validate(
    x: &[Vec<f64>],
    y: &[f64],
    folds: usize,
    grid: &[(f64, f64)],
    tol: f64,
    seed: u64,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    if x.len() != y.len() {
        return Err(Error::shape(x.len(), y.len()));
    }
    let assignment = stratified_folds(y, folds, seed)?;
    let split = |k: usize| {
        let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..x.len() {
            if assignment[i] == k {
                vx.push(x[i].clone());
                vy.push(y[i]);
            } else {
                tx.push(x[i].clone());
                ty.push(y[i]);
            }
        }
        (tx, ty, vx, vy)
    };
    let splits: Vec<_> = (0..folds).map(split).collect();
    let mut scores = Vec::with_capacity(grid.len());
    for &(c_box, gamma) in grid {
        let params = SmoParams {
            tol,
            seed,
            ..SmoParams::new(c_box, gamma)
        };
        let fold_acc = splits
            .iter()
            .map(|(tx, ty, vx, vy)| fit_svm(tx, ty, &params)?.accuracy(vx, vy))
            .collect::<Result<Vec<f64>>>()?;
        let mean_acc = fold_acc.iter().sum::<f64>() / folds as f64;
        scores.push(GridScore {
            c_box,
            gamma,
            fold_acc,
            mean_acc,
        });
    }
    let best = scores
        .iter()
        .min_by(|a, b| {
            b.mean_acc
                .total_cmp(&a.mean_acc)
                .then(a.c_box.total_cmp(&b.c_box))
                .then(a.gamma.total_cmp(&b.gamma))
        })
        .expect("non-empty grid");
    Ok(CvResult {
        c_box: best.c_box,
        gamma: best.gamma,
        scores,
    })
}
