// SPDX-License-Identifier: Apache-2.0

//! Per-iteration, phase-aware frequency selection.
//!
//! With a backlog the controller goes straight to the top of the ladder.
//! Otherwise it picks the lowest level whose predicted latency fits the
//! remaining SLO budget, and falls back to the top level when none does.

use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::types::{FrequencyLadder, FrequencyMHz, InstanceSnapshot, PhaseKind, SloProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub ladder: FrequencyLadder,
    pub slo: SloProfile,
    pub phase: PhaseKind,
    /// 0 decides every iteration; otherwise decisions are at least this far apart.
    pub control_interval_ms: f64,
    pub freq_set_overhead_ms: f64,
    /// When set, a frequency change stalls the iteration by the overhead.
    pub blocking_overhead: bool,
}

impl ControllerConfig {
    pub fn new(ladder: FrequencyLadder, slo: SloProfile, phase: PhaseKind) -> Self {
        ControllerConfig {
            ladder,
            slo,
            phase,
            control_interval_ms: 0.0,
            freq_set_overhead_ms: 3.0,
            blocking_overhead: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.control_interval_ms >= 0.0 && self.control_interval_ms.is_finite()) {
            return Err(Error::validation(
                "controller.control_interval_ms",
                "must be >= 0",
            ));
        }
        if !(self.freq_set_overhead_ms >= 0.0 && self.freq_set_overhead_ms.is_finite()) {
            return Err(Error::validation(
                "controller.freq_set_overhead_ms",
                "must be >= 0",
            ));
        }
        Ok(())
    }
}

/// Latency budget the next batch must fit into. Prefill subtracts the time
/// the oldest batched request has already waited; decode does not.
pub fn slo_budget(cfg: &ControllerConfig, snapshot: &InstanceSnapshot) -> Result<f64> {
    if snapshot.phase != cfg.phase {
        return Err(Error::Contract(format!(
            "{} controller given a {} snapshot",
            cfg.phase, snapshot.phase
        )));
    }
    Ok(match cfg.phase {
        PhaseKind::Prefill => (cfg.slo.ttft_ms - snapshot.max_wait_ms).max(0.0),
        PhaseKind::Decode => cfg.slo.itl_ms,
    })
}

/// Predicted latency of the snapshot's pending work at frequency `f`, or
/// `None` when there is no work to predict.
pub fn predicted_latency(
    cal: &Calibration,
    snapshot: &InstanceSnapshot,
    f: FrequencyMHz,
) -> Result<Option<f64>> {
    match snapshot.phase {
        PhaseKind::Prefill if snapshot.n_bt == 0 => Ok(None),
        PhaseKind::Prefill => cal.predict_ttft(f, snapshot.n_bt).map(Some),
        PhaseKind::Decode if snapshot.n_req == 0 => Ok(None),
        PhaseKind::Decode => cal.predict_itl(f, snapshot.n_req, snapshot.n_kv).map(Some),
    }
}

pub fn select_frequency(
    cfg: &ControllerConfig,
    snapshot: &InstanceSnapshot,
    cal: &Calibration,
) -> Result<FrequencyMHz> {
    let budget = slo_budget(cfg, snapshot)?;
    if snapshot.queue_len > 0 {
        return Ok(cfg.ladder.max());
    }
    for &f in cfg.ladder.levels() {
        match predicted_latency(cal, snapshot, f)? {
            None => return Ok(cfg.ladder.min()),
            Some(latency) if latency <= budget => return Ok(f),
            Some(_) => {}
        }
    }
    Ok(cfg.ladder.max())
}

/// Window-gated selection. Returns `None` when the control interval since
/// the last decision has not elapsed.
pub fn maybe_select(
    cfg: &ControllerConfig,
    now_ms: f64,
    last_decision_ms: Option<f64>,
    snapshot: &InstanceSnapshot,
    cal: &Calibration,
) -> Result<Option<FrequencyMHz>> {
    if let Some(last) = last_decision_ms {
        if cfg.control_interval_ms > 0.0 && now_ms - last < cfg.control_interval_ms {
            return Ok(None);
        }
    }
    select_frequency(cfg, snapshot, cal).map(Some)
}

/// How an instance chooses its clock.
#[derive(Debug, Clone, PartialEq)]
pub enum FrequencyPolicy {
    Adaptive(ControllerConfig),
    Static(FrequencyMHz),
}

impl FrequencyPolicy {
    pub fn initial(&self) -> FrequencyMHz {
        match self {
            FrequencyPolicy::Adaptive(cfg) => cfg.ladder.max(),
            FrequencyPolicy::Static(f) => *f,
        }
    }

    pub fn overhead(&self) -> (f64, bool) {
        match self {
            FrequencyPolicy::Adaptive(cfg) => (cfg.freq_set_overhead_ms, cfg.blocking_overhead),
            FrequencyPolicy::Static(_) => (0.0, false),
        }
    }
}
