//! Soft-margin RBF SVM trained by sequential minimal optimization with
//! second-order working-set selection.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::scaler::Scaler;
use crate::rng::stream;
use crate::{Error, Result};

/// Kernel matrices up to this many rows are precomputed.
const PRECOMPUTE_LIMIT: usize = 4096;
const TAU: f64 = 1e-12;

pub fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, z)| (x - z) * (x - z)).sum();
    libm::exp(-gamma * d2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoParams {
    pub c_box: f64,
    pub gamma: f64,
    pub tol: f64,
    /// Permutes the scan order, which decides ties in working-set selection.
    pub seed: u64,
    /// 0 picks `max(1_000_000, 100 n)`.
    pub max_iter: usize,
}

impl SmoParams {
    pub fn new(c_box: f64, gamma: f64) -> Self {
        SmoParams {
            c_box,
            gamma,
            tol: 1e-3,
            seed: 0,
            max_iter: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.c_box) && ok(self.gamma) && ok(self.tol)) {
            return Err(Error::invalid("C, gamma and tol must be positive and finite"));
        }
        Ok(())
    }
}

enum Kernel<'a> {
    Full { n: usize, k: Vec<f64> },
    OnDemand { x: &'a [Vec<f64>], gamma: f64 },
}

impl Kernel<'_> {
    fn row(&self, i: usize, out: &mut Vec<f64>) {
        match self {
            Kernel::Full { n, k } => {
                out.clear();
                out.extend_from_slice(&k[i * n..][..*n]);
            }
            Kernel::OnDemand { x, gamma } => {
                out.clear();
                out.extend(x.iter().map(|z| rbf(*gamma, &x[i], z)));
            }
        }
    }
}

/// Dual variables of a solved problem, one per training point.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

/// Solves `max Σα - ½ ΣΣ α_i α_j y_i y_j k(x_i, x_j)` subject to
/// `0 ≤ α ≤ C` and `Σ α_i y_i = 0`, on already scaled features.
///
/// Iterates until the maximal violating pair is within `tol / 2`, which
/// keeps every point's margin condition within `tol`.
pub fn solve_dual(x: &[Vec<f64>], y: &[f64], params: &SmoParams) -> Result<DualSolution> {
    params.validate()?;
    let n = x.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if y.len() != n {
        return Err(Error::shape(n, y.len()));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::invalid("labels must be -1 or +1"));
    }
    let c = params.c_box;
    let kernel = if n <= PRECOMPUTE_LIMIT {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rbf(params.gamma, &x[i], &x[j]);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        Kernel::Full { n, k }
    } else {
        Kernel::OnDemand { x, gamma: params.gamma }
    };
    let diag: Vec<f64> = (0..n).map(|i| rbf(params.gamma, &x[i], &x[i])).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(params.seed, 0x5b3));
    let max_iter = if params.max_iter == 0 {
        (100 * n).max(1_000_000)
    } else {
        params.max_iter
    };
    let eps = params.tol / 2.0;

    let mut alpha = vec![0.0; n];
    // gradient of ½αᵀQα - Σα, Q_ij = y_i y_j K_ij
    let mut grad = vec![-1.0; n];
    let (mut ki, mut kj) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    loop {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for &t in &order {
            if up(alpha[t], y[t]) && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        for &t in &order {
            if low(alpha[t], y[t]) {
                gmin = gmin.min(-y[t] * grad[t]);
            }
        }
        if i == usize::MAX || gmax - gmin < eps {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::NotConverged {
                iterations,
                violation: gmax - gmin,
                tol: params.tol,
            });
        }
        kernel.row(i, &mut ki);
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for &t in &order {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let b = gmax + y[t] * grad[t];
            if b <= 0.0 {
                continue;
            }
            let mut a = diag[i] + diag[t] - 2.0 * ki[t];
            if a <= 0.0 {
                a = TAU;
            }
            let score = -b * b / a;
            if score < best {
                best = score;
                j = t;
            }
        }
        if j == usize::MAX {
            break;
        }
        kernel.row(j, &mut kj);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let mut quad = diag[i] + diag[j] - 2.0 * ki[j];
        if quad <= 0.0 {
            quad = TAU;
        }
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
        iterations += 1;
    }

    // bias from the free variables, or the middle of the feasible interval
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            free += 1;
        } else if (alpha[t] >= c) == (y[t] > 0.0) {
            lb = lb.max(yg);
        } else {
            ub = ub.min(yg);
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
    Ok(DualSolution {
        alpha,
        bias: -rho,
        iterations,
    })
}

/// Dual objective `Σα - ½ ΣΣ α_i α_j y_i y_j k(x_i, x_j)`.
pub fn dual_objective(x: &[Vec<f64>], y: &[f64], alpha: &[f64], gamma: f64) -> f64 {
    let mut quad = 0.0;
    for i in 0..x.len() {
        if alpha[i] == 0.0 {
            continue;
        }
        for j in 0..x.len() {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * rbf(gamma, &x[i], &x[j]);
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// Trained classifier on raw (unscaled) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    /// In scaled feature space.
    pub support_vectors: Vec<Vec<f64>>,
    /// `α_i y_i` per support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c_box: f64,
    pub scaler: Scaler,
}

impl SvmModel {
    pub fn from_solution(x: &[Vec<f64>], y: &[f64], sol: &DualSolution, params: &SmoParams, scaler: Scaler) -> Self {
        let (mut support_vectors, mut dual_coef) = (Vec::new(), Vec::new());
        for ((xi, &yi), &a) in x.iter().zip(y).zip(&sol.alpha) {
            if a > 0.0 {
                support_vectors.push(xi.clone());
                dual_coef.push(a * yi);
            }
        }
        SvmModel {
            support_vectors,
            dual_coef,
            bias: sol.bias,
            gamma: params.gamma,
            c_box: params.c_box,
            scaler,
        }
    }

    /// Decision value of a point already in scaled space.
    pub fn decision_scaled(&self, z: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coef)
            .map(|(sv, c)| c * rbf(self.gamma, sv, z))
            .sum::<f64>()
            + self.bias
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.decision_scaled(&self.scaler.transform(x))
    }

    /// `-1` or `+1`; a decision value of exactly 0 goes to `+1`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        if self.decision(x) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Fraction of correct predictions on raw features with {-1, +1} labels.
    pub fn accuracy(&self, x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::EmptyDataset);
        }
        let hits = x.iter().zip(y).filter(|(xi, &yi)| self.predict(xi) == yi).count();
        Ok(hits as f64 / x.len() as f64)
    }
}

/// Fits the scaler on `x`, solves the dual and packages the model.
pub fn fit_svm(x: &[Vec<f64>], y: &[f64], params: &SmoParams) -> Result<SvmModel> {
    let scaler = Scaler::fit(x)?;
    let z = scaler.transform_all(x);
    let sol = solve_dual(&z, y, params)?;
    Ok(SvmModel::from_solution(&z, y, &sol, params, scaler))
}

/// Largest margin-condition violation of a solution at its training points.
pub fn kkt_violation(x: &[Vec<f64>], y: &[f64], sol: &DualSolution, params: &SmoParams) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let f: f64 = (0..x.len())
            .filter(|&j| sol.alpha[j] > 0.0)
            .map(|j| sol.alpha[j] * y[j] * rbf(params.gamma, &x[j], &x[i]))
            .sum::<f64>()
            + sol.bias;
        let m = y[i] * f;
        let a = sol.alpha[i];
        let v = if a <= 0.0 {
            1.0 - m
        } else if a >= params.c_box {
            m - 1.0
        } else {
            (m - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;
    use rand::Rng;

    fn toy(n: usize, seed: u64, spread: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = stream(seed, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let yi = if i % 2 == 0 { 1.0 } else { -1.0 };
            x.push(vec![yi + spread * gaussian(&mut rng), spread * gaussian(&mut rng)]);
            y.push(yi);
        }
        (x, y)
    }

    fn check_invariants(x: &[Vec<f64>], y: &[f64], p: &SmoParams) -> DualSolution {
        let sol = solve_dual(x, y, p).unwrap();
        assert!(sol.alpha.iter().all(|&a| (0.0..=p.c_box).contains(&a)));
        let balance: f64 = sol.alpha.iter().zip(y).map(|(a, y)| a * y).sum();
        assert!(balance.abs() < 1e-8, "Σαy = {balance}");
        let v = kkt_violation(x, y, &sol, p);
        assert!(v < p.tol, "KKT violation {v}");
        sol
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let x = vec![vec![-2.0, 0.0], vec![-1.5, 0.5], vec![1.5, -0.5], vec![2.0, 0.0]];
        let y = vec![-1.0, -1.0, 1.0, 1.0];
        let m = fit_svm(&x, &y, &SmoParams::new(10.0, 1.0)).unwrap();
        assert_eq!(m.accuracy(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn kkt_holds_across_the_grid() {
        let (x, y) = toy(120, 3, 0.8);
        for c in [0.1, 1.0, 10.0, 100.0] {
            for g in [0.01, 0.1, 1.0, 10.0] {
                check_invariants(
                    &x,
                    &y,
                    &SmoParams {
                        seed: 4,
                        ..SmoParams::new(c, g)
                    },
                );
            }
        }
    }

    #[test]
    fn conflicting_duplicates_hit_the_box() {
        let mut x = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let mut y = vec![1.0, -1.0];
        x.extend([vec![3.0, 3.0], vec![-3.0, -3.0]]);
        y.extend([1.0, -1.0]);
        let p = SmoParams::new(1.0, 0.5);
        let sol = check_invariants(&x, &y, &p);
        assert_eq!(sol.alpha[0], 1.0);
        assert_eq!(sol.alpha[1], 1.0);
    }

    #[test]
    fn beats_random_feasible_points() {
        let (x, y) = toy(20, 11, 1.0);
        let p = SmoParams::new(1.0, 0.5);
        let sol = check_invariants(&x, &y, &p);
        let best = dual_objective(&x, &y, &sol.alpha, p.gamma);
        let pos: Vec<usize> = (0..20).filter(|&i| y[i] > 0.0).collect();
        let neg: Vec<usize> = (0..20).filter(|&i| y[i] < 0.0).collect();
        let mut rng = stream(99, 0);
        for _ in 0..10_000 {
            // uniform in the box, then rescale the heavier class to balance Σαy
            let mut a: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * p.c_box).collect();
            let sp: f64 = pos.iter().map(|&i| a[i]).sum();
            let sn: f64 = neg.iter().map(|&i| a[i]).sum();
            let (heavy, ratio) = if sp > sn { (&pos, sn / sp) } else { (&neg, sp / sn) };
            for &i in heavy {
                a[i] *= ratio;
            }
            let balance: f64 = a.iter().zip(&y).map(|(a, y)| a * y).sum();
            assert!(balance.abs() < 1e-9);
            assert!(dual_objective(&x, &y, &a, p.gamma) <= best + 1e-12);
        }
    }

    #[test]
    fn free_vectors_sit_on_the_margin() {
        let (x, y) = toy(60, 5, 0.7);
        let p = SmoParams::new(10.0, 1.0);
        let sol = solve_dual(&x, &y, &p).unwrap();
        let scaler = Scaler {
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
        };
        let m = SvmModel::from_solution(&x, &y, &sol, &p, scaler);
        let mut free = 0;
        for i in 0..x.len() {
            if sol.alpha[i] > 0.0 && sol.alpha[i] < p.c_box {
                free += 1;
                assert!((m.decision(&x[i]) - y[i]).abs() <= p.tol);
            }
        }
        assert!(free > 0);
    }

    #[test]
    fn prediction_ignores_support_vector_order() {
        let (x, y) = toy(40, 8, 0.9);
        let m = fit_svm(&x, &y, &SmoParams::new(1.0, 1.0)).unwrap();
        let mut r = m.clone();
        r.support_vectors.reverse();
        r.dual_coef.reverse();
        for xi in &x {
            assert!((m.decision(xi) - r.decision(xi)).abs() < 1e-12);
            assert_eq!(m.predict(xi), r.predict(xi));
        }
    }

    #[test]
    fn tiny_gamma_flattens_to_the_bias() {
        let (x, y) = toy(40, 2, 0.9);
        let m = fit_svm(&x, &y, &SmoParams::new(1.0, 1e-9)).unwrap();
        // Σ α_i y_i = 0 makes the kernel sum vanish as k → 1
        for xi in &x {
            assert!((m.decision(xi) - m.bias).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_decision_predicts_positive() {
        let m = SvmModel {
            support_vectors: vec![],
            dual_coef: vec![],
            bias: 0.0,
            gamma: 1.0,
            c_box: 1.0,
            scaler: Scaler {
                mean: vec![0.0],
                std: vec![1.0],
            },
        };
        assert_eq!(m.predict(&[5.0]), 1.0);
    }

    #[test]
    fn iteration_cap_reports_diagnostics() {
        let (x, y) = toy(60, 1, 1.5);
        let p = SmoParams {
            max_iter: 2,
            ..SmoParams::new(100.0, 10.0)
        };
        match solve_dual(&x, &y, &p) {
            Err(Error::NotConverged {
                iterations,
                violation,
                tol,
            }) => {
                assert_eq!(iterations, 2);
                assert!(violation > tol);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = toy(80, 6, 1.0);
        let p = SmoParams {
            seed: 3,
            ..SmoParams::new(10.0, 1.0)
        };
        assert_eq!(solve_dual(&x, &y, &p).unwrap(), solve_dual(&x, &y, &p).unwrap());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(solve_dual(&x, &[1.0, 0.0], &SmoParams::new(1.0, 1.0)).is_err());
        assert!(solve_dual(&x, &[1.0, -1.0], &SmoParams::new(0.0, 1.0)).is_err());
        assert_eq!(
            solve_dual(&[], &[], &SmoParams::new(1.0, 1.0)),
            Err(Error::EmptyDataset)
        );
    }
}
