// SPDX-License-Identifier: Apache-2.0

//! Instantaneous GPU power as a function of frequency, phase and load.
//!
//! Dynamic power grows as `f^(1 + alpha)` and is scaled by a saturating
//! utilization `load / (load + u_half)`. The total is clipped at TDP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FrequencyMHz, PhaseKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePower {
    pub phase_scale: f64,
    /// Load at which utilization reaches 1/2: batched tokens for prefill,
    /// running requests for decode.
    pub u_half: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerParams {
    pub p_idle: f64,
    pub tdp: f64,
    pub alpha: f64,
    pub f_ref: FrequencyMHz,
    pub prefill: PhasePower,
    pub decode: PhasePower,
}

impl Default for PowerParams {
    fn default() -> Self {
        PowerParams {
            p_idle: 60.0,
            tdp: 400.0,
            alpha: 0.5,
            f_ref: FrequencyMHz::new(1410).expect("non-zero"),
            prefill: PhasePower {
                phase_scale: 1.0,
                u_half: 1024.0,
            },
            decode: PhasePower {
                phase_scale: 0.7,
                u_half: 64.0,
            },
        }
    }
}

impl PowerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_idle > 0.0 && self.p_idle < self.tdp && self.tdp.is_finite()) {
            return Err(Error::validation("power", "need 0 < p_idle < tdp"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation("power.alpha", "must be > 0"));
        }
        for (name, p) in [("prefill", self.prefill), ("decode", self.decode)] {
            if !(p.phase_scale > 0.0 && p.phase_scale <= 1.5) {
                return Err(Error::validation(
                    format!("power.{name}.phase_scale"),
                    "must lie in (0, 1.5]",
                ));
            }
            if !(p.u_half > 0.0 && p.u_half.is_finite()) {
                return Err(Error::validation(
                    format!("power.{name}.u_half"),
                    "must be > 0",
                ));
            }
        }
        Ok(())
    }

    pub fn phase(&self, phase: PhaseKind) -> PhasePower {
        match phase {
            PhaseKind::Prefill => self.prefill,
            PhaseKind::Decode => self.decode,
        }
    }

    /// Power draw while executing a batch of `load` at frequency `f`.
    pub fn busy_power(&self, f: FrequencyMHz, phase: PhaseKind, load: u64) -> f64 {
        let p = self.phase(phase);
        let load = load as f64;
        let util = load / (load + p.u_half);
        let scale = (f.as_f64() / self.f_ref.as_f64()).powf(1.0 + self.alpha);
        let dynamic = p.phase_scale * util * (self.tdp - self.p_idle) * scale;
        (self.p_idle + dynamic).min(self.tdp)
    }
}

pub fn busy_power(params: &PowerParams, f: FrequencyMHz, phase: PhaseKind, load: u64) -> f64 {
    params.busy_power(f, phase, load)
}

/// Joules drawn at `power_w` watts over `duration_ms` milliseconds.
pub fn interval_energy(power_w: f64, duration_ms: f64) -> Result<f64> {
    if duration_ms < 0.0 || duration_ms.is_nan() {
        return Err(Error::Contract(format!(
            "interval duration must be >= 0 ms, got {duration_ms}"
        )));
    }
    Ok(power_w * duration_ms / 1000.0)
}
