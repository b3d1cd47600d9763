//! Labeled snapshot generation.
//!
//! A snapshot is the 2×N×N tensor of I and Q correlator outputs evaluated on
//! a (doppler error, code delay error) grid. Category A (label 0) holds the
//! direct signal only; category B (label 1) adds one multipath replica.
//! The SVM baseline instead consumes `TapSeries`: squared envelopes at 13
//! code taps over several consecutive epochs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correlator::{correlator_iq_clean, noise_pair, noise_sigma, EpochParams, Iq};
use crate::rng::{derive_seed, stream};
use crate::{Error, Result};

/// Number of code taps in a `TapSeries` epoch.
pub const TAPS: usize = 13;

const SCENARIO_STREAM: u64 = 0x5CE7;
const SNAPSHOT_NOISE_STREAM: u64 = 0x5A97;
const TAP_NOISE_STREAM: u64 = 0x7A95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultipathParams {
    /// Amplitude ratio of the replica to the direct path.
    pub alpha: f64,
    /// Excess code delay, chips.
    pub dtau_chips: f64,
    /// Doppler offset of the replica relative to the direct path, Hz.
    pub df_hz: f64,
    /// Carrier phase offset of the replica, radians.
    pub dtheta_rad: f64,
}

impl MultipathParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("multipath alpha must lie in (0, 1]"));
        }
        if !(self.dtau_chips >= 0.0) {
            return Err(Error::invalid("multipath dtau must be >= 0"));
        }
        if !self.df_hz.is_finite() || !self.dtheta_rad.is_finite() {
            return Err(Error::invalid("multipath df/dtheta must be finite"));
        }
        Ok(())
    }

    /// Replica seen by a correlator tuned to `main`: shifted code and doppler
    /// errors, rotated phase, amplitude scaled by `alpha`.
    fn replica_iq(&self, main: &EpochParams) -> Iq {
        let p = EpochParams {
            code_err: main.code_err - self.dtau_chips,
            doppler_err: main.doppler_err - self.df_hz,
            phase_err: main.phase_err + self.dtheta_rad,
            ..*main
        };
        let iq = correlator_iq_clean(&p);
        Iq {
            i: self.alpha * iq.i,
            q: self.alpha * iq.q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    /// Main-path tracking errors at the grid origin.
    pub epoch: EpochParams,
    pub mp: Option<MultipathParams>,
}

impl ScenarioParams {
    pub fn label(&self) -> u8 {
        u8::from(self.mp.is_some())
    }

    /// Noiseless I/Q of the composite signal at a grid offset.
    pub fn clean_iq(&self, doppler_offset: f64, code_offset: f64) -> Iq {
        let main = EpochParams {
            doppler_err: self.epoch.doppler_err + doppler_offset,
            code_err: self.epoch.code_err + code_offset,
            ..self.epoch
        };
        let direct = correlator_iq_clean(&main);
        match &self.mp {
            Some(mp) => direct + mp.replica_iq(&main),
            None => direct,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub ti: f64,
    /// Doppler error axis, Hz.
    pub doppler_axis: Vec<f64>,
    /// Code delay error axis, chips.
    pub code_axis: Vec<f64>,
}

/// `n` evenly spaced points on `[-1, 1]`, endpoints included and exactly
/// symmetric about zero.
pub fn symmetric_unit_axis(n: usize) -> Vec<f64> {
    let last = (n - 1) as f64;
    (0..n).map(|k| (2.0 * k as f64 - last) / last).collect()
}

pub fn make_grid(n: usize, ti: f64) -> Result<Grid> {
    if n < 2 {
        return Err(Error::invalid("grid needs at least 2 points per axis"));
    }
    if !(ti > 0.0) {
        return Err(Error::invalid("ti must be positive"));
    }
    let unit = symmetric_unit_axis(n);
    let doppler_axis = unit.iter().map(|u| u / ti).collect();
    Ok(Grid {
        n,
        ti,
        doppler_axis,
        code_axis: unit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub n: usize,
    /// `[2, n, n]` row-major: I plane then Q plane, rows indexed by doppler
    /// error and columns by code delay error.
    pub tensor: Vec<f32>,
    pub label: u8,
    /// Generation parameters; absent when the snapshot was read from disk.
    pub scenario: Option<ScenarioParams>,
}

impl Snapshot {
    pub fn i_plane(&self) -> &[f32] {
        &self.tensor[..self.n * self.n]
    }

    pub fn q_plane(&self) -> &[f32] {
        &self.tensor[self.n * self.n..]
    }
}

/// Renders a snapshot; `noise = None` gives the noiseless tensor.
///
/// Each grid cell receives its own independent noise pair.
pub fn render_snapshot<R: Rng + ?Sized>(
    scenario: &ScenarioParams,
    grid: &Grid,
    noise: Option<&mut R>,
) -> Result<Snapshot> {
    if scenario.epoch.ti != grid.ti {
        return Err(Error::invalid("scenario ti differs from grid ti"));
    }
    scenario.epoch.validate()?;
    let n = grid.n;
    let mut tensor = vec![0.0f32; 2 * n * n];
    let sigma = noise_sigma(&scenario.epoch);
    let mut noise = noise;
    for (r, &f) in grid.doppler_axis.iter().enumerate() {
        for (c, &code) in grid.code_axis.iter().enumerate() {
            let mut iq = scenario.clean_iq(f, code);
            if let Some(rng) = noise.as_deref_mut() {
                iq = iq + noise_pair(sigma, rng);
            }
            tensor[r * n + c] = iq.i as f32;
            tensor[n * n + r * n + c] = iq.q as f32;
        }
    }
    Ok(Snapshot {
        n,
        tensor,
        label: scenario.label(),
        scenario: Some(*scenario),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapSeries {
    pub ti: f64,
    /// One row of `TAPS` squared envelopes per epoch.
    pub taps: Vec<[f64; TAPS]>,
    pub label: u8,
}

impl TapSeries {
    pub fn w_epochs(&self) -> usize {
        self.taps.len()
    }
}

/// Code positions of the taps, chips.
pub fn tap_axis() -> Vec<f64> {
    symmetric_unit_axis(TAPS)
}

/// `w_epochs` epochs of I²+Q² at the 13 code taps, zero doppler error. The
/// scenario is held fixed; only the noise is redrawn per epoch.
pub fn render_tap_series<R: Rng + ?Sized>(
    scenario: &ScenarioParams,
    w_epochs: usize,
    noise: Option<&mut R>,
) -> Result<TapSeries> {
    if w_epochs < 2 {
        return Err(Error::invalid("tap series needs at least 2 epochs"));
    }
    scenario.epoch.validate()?;
    let axis = tap_axis();
    let clean: Vec<Iq> = axis.iter().map(|&c| scenario.clean_iq(0.0, c)).collect();
    let sigma = noise_sigma(&scenario.epoch);
    let mut noise = noise;
    let mut taps = Vec::with_capacity(w_epochs);
    for _ in 0..w_epochs {
        let mut row = [0.0; TAPS];
        for (slot, iq) in row.iter_mut().zip(&clean) {
            let mut iq = *iq;
            if let Some(rng) = noise.as_deref_mut() {
                iq = iq + noise_pair(sigma, rng);
            }
            *slot = iq.envelope_sq();
        }
        taps.push(row);
    }
    Ok(TapSeries {
        ti: scenario.epoch.ti,
        taps,
        label: scenario.label(),
    })
}

/// How the replica phase offset is chosen for each category-B sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseRule {
    Fixed(f64),
    /// Uniform pick among the listed offsets, degrees.
    Choice(Vec<f64>),
}

/// Generation parameters of one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Coherent integration time, seconds.
    pub ti: f64,
    pub cn0_dbhz: f64,
    /// Replica phase offset, degrees.
    pub dtheta_deg: PhaseRule,
    pub alpha_range: (f64, f64),
    pub dtau_range: (f64, f64),
    pub df_range: (f64, f64),
    #[serde(default)]
    pub noiseless: bool,
}

impl ScenarioConfig {
    pub fn new(ti: f64, cn0_dbhz: f64, dtheta_deg: PhaseRule) -> Self {
        ScenarioConfig {
            ti,
            cn0_dbhz,
            dtheta_deg,
            alpha_range: (0.5, 0.9),
            dtau_range: (0.1, 0.8),
            df_range: (0.0, 1000.0),
            noiseless: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        EpochParams::centered(self.ti, self.cn0_dbhz).validate()?;
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.alpha_range) || self.alpha_range.0 <= 0.0 || self.alpha_range.1 > 1.0 {
            return Err(Error::invalid("alpha range must be a non-empty subset of (0, 1]"));
        }
        if !ok(self.dtau_range) || self.dtau_range.0 < 0.0 {
            return Err(Error::invalid("dtau range must be a non-empty subset of [0, inf)"));
        }
        if !ok(self.df_range) {
            return Err(Error::invalid("df range must be non-empty"));
        }
        match &self.dtheta_deg {
            PhaseRule::Fixed(d) if !d.is_finite() => Err(Error::invalid("dtheta must be finite")),
            PhaseRule::Choice(list) if list.is_empty() || list.iter().any(|d| !d.is_finite()) => {
                Err(Error::invalid("dtheta choice list must be non-empty and finite"))
            }
            _ => Ok(()),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws one scenario of the requested category. The main path is always
/// perfectly tracked at the grid origin.
pub fn sample_scenario<R: Rng + ?Sized>(cfg: &ScenarioConfig, label: u8, rng: &mut R) -> Result<ScenarioParams> {
    cfg.validate()?;
    let epoch = EpochParams::centered(cfg.ti, cfg.cn0_dbhz);
    let mp = match label {
        0 => None,
        1 => {
            let alpha = uniform(rng, cfg.alpha_range);
            let dtau_chips = uniform(rng, cfg.dtau_range);
            let df_hz = uniform(rng, cfg.df_range);
            let deg = match &cfg.dtheta_deg {
                PhaseRule::Fixed(d) => *d,
                PhaseRule::Choice(list) => list[rng.random_range(0..list.len())],
            };
            Some(MultipathParams {
                alpha,
                dtau_chips,
                df_hz,
                dtheta_rad: deg.to_radians(),
            })
        }
        _ => return Err(Error::invalid("label must be 0 or 1")),
    };
    Ok(ScenarioParams { epoch, mp })
}

/// Label of sample `index` in a balanced dataset: classes alternate.
pub fn balanced_label(index: usize) -> u8 {
    (index % 2) as u8
}

/// Scenario of sample `index`; shared by snapshot and tap-series datasets
/// built from the same seed, so both detectors see identical draws.
pub fn scenario_for_index(cfg: &ScenarioConfig, seed: u64, index: usize) -> Result<ScenarioParams> {
    let mut rng = stream(derive_seed(seed, SCENARIO_STREAM), index as u64);
    sample_scenario(cfg, balanced_label(index), &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub samples: Vec<Snapshot>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.samples.iter().map(|s| s.label)
    }
}

/// Balanced dataset of `2 * n_per_class` snapshots on an `n`-point grid.
/// Sample `k` depends only on `(seed, k)`.
pub fn build_dataset(cfg: &ScenarioConfig, n: usize, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be >= 1"));
    }
    cfg.validate()?;
    let grid = make_grid(n, cfg.ti)?;
    let noise_seed = derive_seed(seed, SNAPSHOT_NOISE_STREAM);
    let samples = (0..2 * n_per_class)
        .map(|k| {
            let scenario = scenario_for_index(cfg, seed, k)?;
            let mut rng = stream(noise_seed, k as u64);
            let noise = (!cfg.noiseless).then_some(&mut rng);
            render_snapshot(&scenario, &grid, noise)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { n, samples })
}

/// Tap-series counterpart of [`build_dataset`] over the same scenarios.
pub fn build_tap_dataset(
    cfg: &ScenarioConfig,
    n_per_class: usize,
    w_epochs: usize,
    seed: u64,
) -> Result<Vec<TapSeries>> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be >= 1"));
    }
    cfg.validate()?;
    let noise_seed = derive_seed(seed, TAP_NOISE_STREAM);
    (0..2 * n_per_class)
        .map(|k| {
            let scenario = scenario_for_index(cfg, seed, k)?;
            let mut rng = stream(noise_seed, k as u64);
            let noise = (!cfg.noiseless).then_some(&mut rng);
            render_tap_series(&scenario, w_epochs, noise)
        })
        .collect()
}
