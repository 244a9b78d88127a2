// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::types::{FrequencyMHz, PhaseKind};

/// Lifecycle of one request. `token_times_ms[0]` is the first token,
/// produced at the end of prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_ms: f64,
    pub input_len: u32,
    pub output_len: u32,
    pub prefill_instance: usize,
    pub prefill_start_ms: f64,
    pub prefill_end_ms: f64,
    pub decode_instance: Option<usize>,
    pub decode_admit_ms: Option<f64>,
    pub token_times_ms: Vec<f64>,
}

impl RequestRecord {
    pub fn ttft_ms(&self) -> f64 {
        self.prefill_end_ms - self.arrival_ms
    }

    pub fn inter_token_gaps(&self) -> impl Iterator<Item = f64> + '_ {
        self.token_times_ms.windows(2).map(|w| w[1] - w[0])
    }

    pub fn is_complete(&self) -> bool {
        self.token_times_ms.len() == self.output_len as usize
    }
}

/// Constant-power stretch of one instance's timeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_ms: f64,
    pub end_ms: f64,
    pub freq: FrequencyMHz,
    pub n_req: u64,
    pub n_kv: u64,
    pub power_w: f64,
    pub busy: bool,
}

impl Segment {
    pub fn duration_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }

    pub fn energy_j(&self) -> f64 {
        self.power_w * self.duration_ms() / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrace {
    /// Index within its phase.
    pub instance: usize,
    pub phase: PhaseKind,
    pub energy_j: f64,
    pub segments: Vec<Segment>,
}

impl InstanceTrace {
    pub fn busy_ms(&self) -> f64 {
        self.segments
            .iter()
            .filter(|s| s.busy)
            .map(Segment::duration_ms)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionErrors {
    pub ttft_abs_sum_ms: f64,
    pub ttft_count: u64,
    pub itl_abs_sum_ms: f64,
    pub itl_count: u64,
}

impl PredictionErrors {
    pub fn ttft_mae_ms(&self) -> Option<f64> {
        (self.ttft_count > 0).then(|| self.ttft_abs_sum_ms / self.ttft_count as f64)
    }

    pub fn itl_mae_ms(&self) -> Option<f64> {
        (self.itl_count > 0).then(|| self.itl_abs_sum_ms / self.itl_count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub horizon_ms: f64,
    pub requests: Vec<RequestRecord>,
    pub instances: Vec<InstanceTrace>,
    pub total_energy_j: f64,
    pub generated_tokens: u64,
    pub event_count: u64,
    pub noise_sigma: f64,
    pub prediction_errors: PredictionErrors,
}

impl SimResult {
    pub fn phase_energy_j(&self, phase: PhaseKind) -> f64 {
        self.instances
            .iter()
            .filter(|i| i.phase == phase)
            .map(|i| i.energy_j)
            .sum()
    }

    pub fn instances_of(&self, phase: PhaseKind) -> impl Iterator<Item = &InstanceTrace> {
        self.instances.iter().filter(move |i| i.phase == phase)
    }
}
