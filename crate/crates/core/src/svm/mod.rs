//! RBF support vector machine on correlation-shape features: the number of
//! local maxima per second across the 13 code taps, and the spread of the
//! peak position over the epochs of a tap series.

pub mod cv;
pub mod features;
pub mod scaler;
pub mod smo;

pub use cv::{cross_validate, stratified_folds, CvResult, GridScore, DEFAULT_GRID};
pub use features::{feature_f2, feature_f3, features, FeatureVector};
pub use scaler::Scaler;
pub use smo::{dual_objective, fit_svm, kkt_violation, rbf, solve_dual, DualSolution, SmoParams, SvmModel};

/// Maps {0, 1} class labels to the {-1, +1} SVM convention.
pub fn signed_label(label: u8) -> f64 {
    if label == 0 {
        -1.0
    } else {
        1.0
    }
}
