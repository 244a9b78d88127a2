// SPDX-License-Identifier: Apache-2.0

//! Domain types shared by the models, the controller, the router and the
//! simulator. Time is in milliseconds, energy in joules, power in watts.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One inference request: the unit of workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_ms: f64,
    pub input_len: u32,
    pub output_len: u32,
}

impl Request {
    pub fn new(id: u64, arrival_ms: f64, input_len: u32, output_len: u32) -> Result<Self> {
        let req = Request {
            id,
            arrival_ms,
            input_len,
            output_len,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_ms.is_finite() && self.arrival_ms >= 0.0) {
            return Err(Error::validation(
                format!("request {}.arrival_ms", self.id),
                format!("must be finite and >= 0, got {}", self.arrival_ms),
            ));
        }
        if self.input_len == 0 {
            return Err(Error::validation(
                format!("request {}.input_len", self.id),
                "must be >= 1",
            ));
        }
        if self.output_len == 0 {
            return Err(Error::validation(
                format!("request {}.output_len", self.id),
                "must be >= 1",
            ));
        }
        Ok(())
    }
}

/// GPU core clock in MHz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct FrequencyMHz(u32);

impl FrequencyMHz {
    pub fn new(mhz: u32) -> Result<Self> {
        if mhz == 0 {
            return Err(Error::validation("frequency", "must be > 0 MHz"));
        }
        Ok(FrequencyMHz(mhz))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0)
    }
}

impl TryFrom<u32> for FrequencyMHz {
    type Error = Error;

    fn try_from(value: u32) -> Result<Self> {
        FrequencyMHz::new(value)
    }
}

impl From<FrequencyMHz> for u32 {
    fn from(f: FrequencyMHz) -> u32 {
        f.0
    }
}

impl fmt::Display for FrequencyMHz {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Strictly increasing list of selectable frequencies, at least two long.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FrequencyMHz>", into = "Vec<FrequencyMHz>")]
pub struct FrequencyLadder(Vec<FrequencyMHz>);

pub const TWO_LEVEL_LADDER: [u32; 2] = [1005, 1410];
pub const FIVE_LEVEL_LADDER: [u32; 5] = [1005, 1095, 1200, 1305, 1410];

impl FrequencyLadder {
    pub fn from_mhz(levels: &[u32]) -> Result<Self> {
        let levels = levels
            .iter()
            .map(|&m| FrequencyMHz::new(m))
            .collect::<Result<Vec<_>>>()?;
        validate_ladder(levels)
    }

    pub fn two_level() -> Self {
        Self::from_mhz(&TWO_LEVEL_LADDER).expect("static ladder is valid")
    }

    pub fn five_level() -> Self {
        Self::from_mhz(&FIVE_LEVEL_LADDER).expect("static ladder is valid")
    }

    pub fn levels(&self) -> &[FrequencyMHz] {
        &self.0
    }

    pub fn min(&self) -> FrequencyMHz {
        self.0[0]
    }

    pub fn max(&self) -> FrequencyMHz {
        *self.0.last().expect("ladder has >= 2 levels")
    }

    pub fn contains(&self, f: FrequencyMHz) -> bool {
        self.0.binary_search(&f).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Default for FrequencyLadder {
    fn default() -> Self {
        Self::two_level()
    }
}

impl TryFrom<Vec<FrequencyMHz>> for FrequencyLadder {
    type Error = Error;

    fn try_from(levels: Vec<FrequencyMHz>) -> Result<Self> {
        validate_ladder(levels)
    }
}

impl From<FrequencyLadder> for Vec<FrequencyMHz> {
    fn from(l: FrequencyLadder) -> Self {
        l.0
    }
}

/// Accepts a ladder iff it is strictly increasing with at least two levels.
pub fn validate_ladder(levels: Vec<FrequencyMHz>) -> Result<FrequencyLadder> {
    if levels.len() < 2 {
        return Err(Error::validation(
            "ladder",
            format!("needs at least 2 levels, got {}", levels.len()),
        ));
    }
    for pair in levels.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::validation(
                "ladder",
                format!("duplicate level {} MHz", pair[0]),
            ));
        }
        if pair[0] > pair[1] {
            return Err(Error::validation(
                "ladder",
                format!(
                    "levels must be increasing: {} MHz before {} MHz",
                    pair[0], pair[1]
                ),
            ));
        }
    }
    Ok(FrequencyLadder(levels))
}

/// Latency targets for time-to-first-token and inter-token latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SloProfileRaw")]
pub struct SloProfile {
    pub ttft_ms: f64,
    pub itl_ms: f64,
}

#[derive(Deserialize)]
struct SloProfileRaw {
    ttft_ms: f64,
    itl_ms: f64,
}

impl TryFrom<SloProfileRaw> for SloProfile {
    type Error = Error;

    fn try_from(raw: SloProfileRaw) -> Result<Self> {
        SloProfile::new(raw.ttft_ms, raw.itl_ms)
    }
}

impl SloProfile {
    pub fn new(ttft_ms: f64, itl_ms: f64) -> Result<Self> {
        if !(ttft_ms > 0.0 && ttft_ms.is_finite()) {
            return Err(Error::validation("slo.ttft_ms", "must be > 0"));
        }
        if !(itl_ms > 0.0 && itl_ms.is_finite()) {
            return Err(Error::validation("slo.itl_ms", "must be > 0"));
        }
        Ok(SloProfile { ttft_ms, itl_ms })
    }

    pub const TIGHT: SloProfile = SloProfile {
        ttft_ms: 200.0,
        itl_ms: 20.0,
    };
    pub const MEDIUM: SloProfile = SloProfile {
        ttft_ms: 600.0,
        itl_ms: 60.0,
    };
    pub const LOOSE: SloProfile = SloProfile {
        ttft_ms: 1200.0,
        itl_ms: 120.0,
    };
}

impl Default for SloProfile {
    fn default() -> Self {
        SloProfile::MEDIUM
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Prefill,
    Decode,
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseKind::Prefill => f.write_str("prefill"),
            PhaseKind::Decode => f.write_str("decode"),
        }
    }
}

/// Load metrics of one instance at a decision point.
///
/// `n_bt` is the batched token count of the pending batch; for decode it
/// always equals `n_req` since each running request contributes one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceSnapshot {
    pub instance_id: usize,
    pub phase: PhaseKind,
    pub queue_len: usize,
    pub max_wait_ms: f64,
    pub n_req: u64,
    pub n_kv: u64,
    pub n_bt: u64,
    pub current_freq: FrequencyMHz,
}

impl InstanceSnapshot {
    pub fn prefill(
        instance_id: usize,
        queue_len: usize,
        max_wait_ms: f64,
        n_req: u64,
        n_bt: u64,
        current_freq: FrequencyMHz,
    ) -> Self {
        InstanceSnapshot {
            instance_id,
            phase: PhaseKind::Prefill,
            queue_len,
            max_wait_ms,
            n_req,
            n_kv: n_bt,
            n_bt,
            current_freq,
        }
    }

    pub fn decode(
        instance_id: usize,
        queue_len: usize,
        n_req: u64,
        n_kv: u64,
        current_freq: FrequencyMHz,
    ) -> Self {
        InstanceSnapshot {
            instance_id,
            phase: PhaseKind::Decode,
            queue_len,
            max_wait_ms: 0.0,
            n_req,
            n_kv,
            n_bt: n_req,
            current_freq,
        }
    }
}
