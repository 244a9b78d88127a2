// SPDX-License-Identifier: Apache-2.0

//! Request routing. Prefill uses round-robin. Decode can use a what-if
//! router that asks the frequency controller what each instance would
//! select after taking the request and steers load away from frequency
//! boundaries.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::controller::{select_frequency, ControllerConfig};
use crate::error::{Error, Result};
use crate::types::{FrequencyMHz, InstanceSnapshot, PhaseKind, Request};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutePolicy {
    /// Boundary-aware what-if routing.
    StateSpace,
    RoundRobin,
}

/// Frequency-gap threshold. `Unbounded` always prefers the instance whose
/// frequency would stay unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Delta {
    Mhz(u32),
    Unbounded(UnboundedTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnboundedTag {
    Unbounded,
}

impl Delta {
    pub const UNBOUNDED: Delta = Delta::Unbounded(UnboundedTag::Unbounded);

    fn admits(self, gap: i64) -> bool {
        match self {
            Delta::Mhz(d) => gap <= i64::from(d),
            Delta::Unbounded(_) => true,
        }
    }
}

impl fmt::Display for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delta::Mhz(d) => write!(f, "{d} MHz"),
            Delta::Unbounded(_) => f.write_str("unbounded"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteConfig {
    pub delta_mhz: Delta,
    pub policy: RoutePolicy,
}

impl Default for RouteConfig {
    fn default() -> Self {
        RouteConfig {
            delta_mhz: Delta::Mhz(150),
            policy: RoutePolicy::StateSpace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RouterState {
    pub rr_cursor: usize,
}

impl RouterState {
    pub fn new() -> Self {
        Self::default()
    }

    /// First member of `candidates` (instance indices) at or after the
    /// cursor, cyclically. Advances the cursor past the pick.
    fn round_robin_among(&mut self, candidates: &[usize], n: usize) -> usize {
        let cursor = self.rr_cursor % n;
        let pick = *candidates
            .iter()
            .min_by_key(|&&i| (i + n - cursor) % n)
            .expect("non-empty candidate set");
        self.rr_cursor = (pick + 1) % n;
        pick
    }
}

/// Plain round-robin over `n_instances`.
pub fn route_prefill(state: &mut RouterState, n_instances: usize) -> Result<usize> {
    if n_instances == 0 {
        return Err(Error::Config(
            "routing requires at least one instance".into(),
        ));
    }
    let pick = state.rr_cursor % n_instances;
    state.rr_cursor = (pick + 1) % n_instances;
    Ok(pick)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhatIfResult {
    pub instance_id: usize,
    pub f_now: FrequencyMHz,
    pub f_after: FrequencyMHz,
    pub crossed: bool,
}

/// Snapshot after hypothetically admitting `request`: one more running
/// request holding its prompt plus the first generated token.
pub fn admit_hypothetically(snapshot: &InstanceSnapshot, request: &Request) -> InstanceSnapshot {
    let n_req = snapshot.n_req + 1;
    InstanceSnapshot {
        n_req,
        n_bt: n_req,
        n_kv: snapshot.n_kv + u64::from(request.input_len) + 1,
        ..*snapshot
    }
}

pub fn whatif(
    snapshot: &InstanceSnapshot,
    request: &Request,
    controller: &ControllerConfig,
    cal: &Calibration,
) -> Result<WhatIfResult> {
    if snapshot.phase != PhaseKind::Decode {
        return Err(Error::Contract(
            "what-if analysis applies to decode instances".into(),
        ));
    }
    let f_now = select_frequency(controller, snapshot, cal)?;
    let f_after = select_frequency(controller, &admit_hypothetically(snapshot, request), cal)?;
    Ok(WhatIfResult {
        instance_id: snapshot.instance_id,
        f_now,
        f_after,
        crossed: f_after > f_now,
    })
}

/// Chooses a decode instance; returns an index into `snapshots`.
pub fn route_decode(
    state: &mut RouterState,
    cfg: &RouteConfig,
    snapshots: &[InstanceSnapshot],
    request: &Request,
    controller: &ControllerConfig,
    cal: &Calibration,
) -> Result<usize> {
    if snapshots.is_empty() {
        return Err(Error::Config(
            "routing requires at least one decode instance".into(),
        ));
    }
    if let Some(s) = snapshots.iter().find(|s| s.phase != PhaseKind::Decode) {
        return Err(Error::Contract(format!(
            "decode routing given a {} snapshot (instance {})",
            s.phase, s.instance_id
        )));
    }
    if cfg.policy == RoutePolicy::RoundRobin {
        return route_prefill(state, snapshots.len());
    }
    let results = snapshots
        .iter()
        .map(|s| whatif(s, request, controller, cal))
        .collect::<Result<Vec<_>>>()?;
    Ok(choose(state, cfg.delta_mhz, &results))
}

/// Case analysis over precomputed what-if results.
pub fn choose(state: &mut RouterState, delta: Delta, results: &[WhatIfResult]) -> usize {
    let n = results.len();
    let unchanged: Vec<usize> = (0..n).filter(|&i| !results[i].crossed).collect();
    let raised: Vec<usize> = (0..n).filter(|&i| results[i].crossed).collect();

    let argmin = |set: &[usize], key: &dyn Fn(&WhatIfResult) -> FrequencyMHz| -> Vec<usize> {
        let best = set
            .iter()
            .map(|&i| key(&results[i]))
            .min()
            .expect("non-empty");
        set.iter()
            .copied()
            .filter(|&i| key(&results[i]) == best)
            .collect()
    };
    let now = |r: &WhatIfResult| r.f_now;
    let after = |r: &WhatIfResult| r.f_after;

    let candidates = if raised.is_empty() {
        argmin(&unchanged, &now)
    } else if unchanged.is_empty() {
        argmin(&raised, &after)
    } else {
        let best_unchanged = results[argmin(&unchanged, &now)[0]].f_now;
        let best_raised = results[argmin(&raised, &after)[0]].f_after;
        let gap = i64::from(best_unchanged.get()) - i64::from(best_raised.get());
        if delta.admits(gap) {
            argmin(&unchanged, &now)
        } else {
            let all: Vec<usize> = (0..n).collect();
            argmin(&all, &now)
        }
    };
    if let [only] = candidates[..] {
        only
    } else {
        state.round_robin_among(&candidates, n)
    }
}
