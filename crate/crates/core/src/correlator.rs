//! Closed-form I/Q correlator outputs of a GPS L1 C/A channel after the
//! integrate-and-dump stage.
//!
//! Power is expressed with a unit noise density (N0 = 1), so the carrier
//! power is `C = 10^(cn0_dbhz / 10)` and the per-channel noise variance is
//! `Ti / 16`.

use core::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::gaussian;
use crate::{Error, Result};

/// Tracking state of one integration epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochParams {
    /// Coherent integration time, seconds.
    pub ti: f64,
    pub cn0_dbhz: f64,
    /// Navigation bit, +1 or -1.
    pub d_bit: f64,
    /// Carrier phase error, radians.
    pub phase_err: f64,
    /// Doppler estimation error, Hz.
    pub doppler_err: f64,
    /// Code delay estimation error, chips.
    pub code_err: f64,
}

impl EpochParams {
    /// Perfectly tracked epoch (all errors zero, D = +1).
    pub fn centered(ti: f64, cn0_dbhz: f64) -> Self {
        EpochParams {
            ti,
            cn0_dbhz,
            d_bit: 1.0,
            phase_err: 0.0,
            doppler_err: 0.0,
            code_err: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ti > 0.0 && self.ti.is_finite()) {
            return Err(Error::invalid("ti must be positive and finite"));
        }
        if !self.cn0_dbhz.is_finite() {
            return Err(Error::invalid("cn0_dbhz must be finite"));
        }
        if self.d_bit != 1.0 && self.d_bit != -1.0 {
            return Err(Error::invalid("d_bit must be +1 or -1"));
        }
        Ok(())
    }

    /// Carrier power under the N0 = 1 convention.
    pub fn carrier_power(&self) -> f64 {
        libm::pow(10.0, self.cn0_dbhz / 10.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Iq {
    pub i: f64,
    pub q: f64,
}

impl Iq {
    pub fn envelope_sq(&self) -> f64 {
        self.i * self.i + self.q * self.q
    }
}

impl core::ops::Add for Iq {
    type Output = Iq;

    fn add(self, rhs: Iq) -> Iq {
        Iq {
            i: self.i + rhs.i,
            q: self.q + rhs.q,
        }
    }
}

/// Ideal triangular autocorrelation of the PRN code.
pub fn prn_autocorr(delta_chips: f64) -> f64 {
    let v = 1.0 - libm::fabs(delta_chips);
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Unnormalized sinc, `sin(x)/x` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        libm::sin(x) / x
    }
}

/// Correlation amplitude `M = (D Ti / 2) sqrt(C / 2) K(code_err)`.
pub fn amplitude_m(p: &EpochParams) -> f64 {
    p.d_bit * p.ti / 2.0 * libm::sqrt(p.carrier_power() / 2.0) * prn_autocorr(p.code_err)
}

pub fn correlator_iq_clean(p: &EpochParams) -> Iq {
    let m = amplitude_m(p);
    let x = PI * p.doppler_err * p.ti;
    let s = sinc(x);
    let arg = x + p.phase_err;
    Iq {
        i: m * libm::cos(arg) * s,
        q: -m * libm::sin(arg) * s,
    }
}

/// Per-channel noise standard deviation `sqrt(Ti / 16)`.
pub fn noise_sigma(p: &EpochParams) -> f64 {
    libm::sqrt(p.ti / 16.0)
}

/// One independent Gaussian pair (n_I, n_Q) at the given standard deviation.
pub fn noise_pair<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Iq {
    let i = gaussian(rng) * sigma;
    let q = gaussian(rng) * sigma;
    Iq { i, q }
}

pub fn correlator_iq_noisy<R: Rng + ?Sized>(p: &EpochParams, rng: &mut R) -> Iq {
    correlator_iq_clean(p) + noise_pair(noise_sigma(p), rng)
}
