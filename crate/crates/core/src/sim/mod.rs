// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event simulation of a prefill/decode-disaggregated
//! cluster.
//!
//! Prefill instances run one FCFS token-budget batch at a time. Decode
//! instances run continuous batching: requests join and leave only at
//! iteration boundaries. Each iteration asks the instance's frequency policy
//! for a clock, runs for the predicted latency (optionally perturbed by
//! lognormal noise) and draws `busy_power` for its duration. Idle stretches
//! draw idle power.

mod event;
mod result;

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

pub use event::{Event, EventKind, EventQueue};
pub use result::{InstanceTrace, PredictionErrors, RequestRecord, Segment, SimResult};

use crate::calibration::Calibration;
use crate::controller::{maybe_select, ControllerConfig, FrequencyPolicy};
use crate::error::{Error, Result};
use crate::router::{route_decode, route_prefill, RouteConfig, RouterState};
use crate::types::{FrequencyMHz, InstanceSnapshot, PhaseKind, Request};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub n_prefill: usize,
    pub n_decode: usize,
    pub max_batch_tokens: u64,
    pub kv_capacity_tokens: u64,
    pub kv_transfer_ms: f64,
    pub exec_noise_sigma: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_prefill: 2,
            n_decode: 2,
            max_batch_tokens: 8192,
            kv_capacity_tokens: 400_000,
            kv_transfer_ms: 0.0,
            exec_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prefill == 0 {
            return Err(Error::validation("cluster.n_prefill", "must be >= 1"));
        }
        if self.n_decode == 0 {
            return Err(Error::validation("cluster.n_decode", "must be >= 1"));
        }
        if self.max_batch_tokens == 0 {
            return Err(Error::validation("cluster.max_batch_tokens", "must be > 0"));
        }
        if self.kv_capacity_tokens == 0 {
            return Err(Error::validation(
                "cluster.kv_capacity_tokens",
                "must be > 0",
            ));
        }
        if !(self.kv_transfer_ms >= 0.0 && self.kv_transfer_ms.is_finite()) {
            return Err(Error::validation("cluster.kv_transfer_ms", "must be >= 0"));
        }
        if !(self.exec_noise_sigma >= 0.0 && self.exec_noise_sigma.is_finite()) {
            return Err(Error::validation(
                "cluster.exec_noise_sigma",
                "must be >= 0",
            ));
        }
        Ok(())
    }
}

/// Everything a run needs besides the workload.
#[derive(Debug, Clone)]
pub struct SimParams {
    pub cluster: ClusterConfig,
    pub prefill: FrequencyPolicy,
    pub decode: FrequencyPolicy,
    pub route: RouteConfig,
    /// Decode controller used by the router's what-if analysis. In adaptive
    /// mode this is the decode controller itself.
    pub whatif: ControllerConfig,
    pub calibration: Calibration,
    /// Minimum simulated horizon; idle power is charged up to it.
    pub horizon_ms: Option<f64>,
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.calibration.power.validate()?;
        for policy in [&self.prefill, &self.decode] {
            match policy {
                FrequencyPolicy::Adaptive(cfg) => {
                    cfg.validate()?;
                    self.calibration.covers(&cfg.ladder)?;
                }
                FrequencyPolicy::Static(f) => {
                    if self.calibration.ttft.coeffs(*f).is_none() {
                        return Err(Error::Coverage(*f));
                    }
                }
            }
        }
        if let FrequencyPolicy::Adaptive(cfg) = &self.prefill {
            if cfg.phase != PhaseKind::Prefill {
                return Err(Error::Config(
                    "prefill policy configured with a decode controller".into(),
                ));
            }
        }
        if let FrequencyPolicy::Adaptive(cfg) = &self.decode {
            if cfg.phase != PhaseKind::Decode {
                return Err(Error::Config(
                    "decode policy configured with a prefill controller".into(),
                ));
            }
        }
        if self.whatif.phase != PhaseKind::Decode {
            return Err(Error::Config(
                "what-if controller must be a decode controller".into(),
            ));
        }
        self.calibration.covers(&self.whatif.ladder)
    }
}

struct Meter {
    phase: PhaseKind,
    accounted_to: f64,
    energy_j: f64,
    segments: Vec<Segment>,
}

impl Meter {
    fn new(phase: PhaseKind) -> Self {
        Meter {
            phase,
            accounted_to: 0.0,
            energy_j: 0.0,
            segments: Vec::new(),
        }
    }

    fn push(&mut self, seg: Segment) {
        debug_assert!(seg.start_ms >= self.accounted_to - 1e-9);
        if seg.end_ms <= seg.start_ms {
            return;
        }
        self.energy_j += seg.energy_j();
        self.accounted_to = seg.end_ms;
        self.segments.push(seg);
    }

    fn idle_until(&mut self, t: f64, freq: FrequencyMHz, p_idle: f64) {
        if t > self.accounted_to {
            self.push(Segment {
                start_ms: self.accounted_to,
                end_ms: t,
                freq,
                n_req: 0,
                n_kv: 0,
                power_w: p_idle,
                busy: false,
            });
        }
    }
}

struct PrefillInstance {
    queue: VecDeque<usize>,
    batch: Vec<usize>,
    batch_tokens: u64,
    busy: bool,
    freq: FrequencyMHz,
    last_decision: Option<f64>,
    meter: Meter,
}

struct Running {
    req: usize,
    remaining: u32,
    kv: u64,
}

struct DecodeInstance {
    running: Vec<Running>,
    admission: VecDeque<usize>,
    in_transit: u64,
    in_transit_kv: u64,
    resident_kv: u64,
    reserved_kv: u64,
    kv_blocked: bool,
    busy: bool,
    freq: FrequencyMHz,
    last_decision: Option<f64>,
    meter: Meter,
}

impl DecodeInstance {
    /// Load as the router sees it: running, queued and in-flight requests.
    fn routing_snapshot(&self, id: usize, requests: &[Request]) -> InstanceSnapshot {
        let queued = self.admission.len() as u64 + self.in_transit;
        let queued_kv: u64 = self
            .admission
            .iter()
            .map(|&r| u64::from(requests[r].input_len) + 1)
            .sum::<u64>()
            + self.in_transit_kv;
        let backlog = if self.kv_blocked {
            self.admission.len()
        } else {
            0
        };
        InstanceSnapshot::decode(
            id,
            backlog,
            self.running.len() as u64 + queued,
            self.resident_kv + queued_kv,
            self.freq,
        )
    }
}

struct Engine<'a> {
    p: &'a SimParams,
    requests: &'a [Request],
    records: Vec<RequestRecord>,
    prefill: Vec<PrefillInstance>,
    decode: Vec<DecodeInstance>,
    queue: EventQueue,
    prefill_rr: RouterState,
    decode_rr: RouterState,
    rng: ChaCha8Rng,
    noise: Option<LogNormal<f64>>,
    errors: PredictionErrors,
    generated: u64,
    events: u64,
    now: f64,
}

/// Runs `workload` (sorted by arrival) to quiescence.
pub fn run(params: &SimParams, workload: &[Request]) -> Result<SimResult> {
    params.validate()?;
    for pair in workload.windows(2) {
        if pair[1].arrival_ms < pair[0].arrival_ms {
            return Err(Error::Contract(format!(
                "workload must be sorted by arrival (request {} precedes {})",
                pair[0].id, pair[1].id
            )));
        }
    }
    for r in workload {
        r.validate()?;
        let need = u64::from(r.input_len) + u64::from(r.output_len);
        if need > params.cluster.kv_capacity_tokens {
            return Err(Error::Scenario(format!(
                "request {} needs {need} KV tokens but decode capacity is {}",
                r.id, params.cluster.kv_capacity_tokens
            )));
        }
    }
    let mut engine = Engine::new(params, workload)?;
    engine.run()?;
    Ok(engine.finish())
}

impl<'a> Engine<'a> {
    fn new(p: &'a SimParams, requests: &'a [Request]) -> Result<Self> {
        let noise = if p.cluster.exec_noise_sigma > 0.0 {
            Some(
                LogNormal::new(0.0, p.cluster.exec_noise_sigma)
                    .map_err(|e| Error::validation("cluster.exec_noise_sigma", e.to_string()))?,
            )
        } else {
            None
        };
        let records = requests
            .iter()
            .map(|r| RequestRecord {
                id: r.id,
                arrival_ms: r.arrival_ms,
                input_len: r.input_len,
                output_len: r.output_len,
                prefill_instance: 0,
                prefill_start_ms: f64::NAN,
                prefill_end_ms: f64::NAN,
                decode_instance: None,
                decode_admit_ms: None,
                token_times_ms: Vec::with_capacity(r.output_len as usize),
            })
            .collect();
        let prefill = (0..p.cluster.n_prefill)
            .map(|_| PrefillInstance {
                queue: VecDeque::new(),
                batch: Vec::new(),
                batch_tokens: 0,
                busy: false,
                freq: p.prefill.initial(),
                last_decision: None,
                meter: Meter::new(PhaseKind::Prefill),
            })
            .collect();
        let decode = (0..p.cluster.n_decode)
            .map(|_| DecodeInstance {
                running: Vec::new(),
                admission: VecDeque::new(),
                in_transit: 0,
                in_transit_kv: 0,
                resident_kv: 0,
                reserved_kv: 0,
                kv_blocked: false,
                busy: false,
                freq: p.decode.initial(),
                last_decision: None,
                meter: Meter::new(PhaseKind::Decode),
            })
            .collect();
        let mut queue = EventQueue::new();
        for (i, r) in requests.iter().enumerate() {
            queue.push(r.arrival_ms, EventKind::Arrival, i, 0);
        }
        Ok(Engine {
            p,
            requests,
            records,
            prefill,
            decode,
            queue,
            prefill_rr: RouterState::new(),
            decode_rr: RouterState::new(),
            rng: ChaCha8Rng::seed_from_u64(p.cluster.seed),
            noise,
            errors: PredictionErrors::default(),
            generated: 0,
            events: 0,
            now: 0.0,
        })
    }

    fn run(&mut self) -> Result<()> {
        while let Some(ev) = self.queue.pop() {
            debug_assert!(ev.time_ms >= self.now);
            self.now = ev.time_ms;
            self.events += 1;
            match ev.kind {
                EventKind::Arrival => self.on_arrival(ev.id)?,
                EventKind::PrefillDone => self.on_prefill_done(ev.id)?,
                EventKind::KvTransferDone => self.on_kv_transfer(ev.id, ev.target)?,
                EventKind::DecodeIterDone => self.on_decode_done(ev.id)?,
                EventKind::FreqApplied => {
                    if ev.id < self.prefill.len() {
                        self.execute_prefill(ev.id)?;
                    } else {
                        self.execute_decode(ev.id - self.prefill.len())?;
                    }
                }
            }
        }
        Ok(())
    }

    fn noise_factor(&mut self) -> f64 {
        match &self.noise {
            Some(d) => d.sample(&mut self.rng),
            None => 1.0,
        }
    }

    fn on_arrival(&mut self, req: usize) -> Result<()> {
        let inst = route_prefill(&mut self.prefill_rr, self.prefill.len())?;
        self.records[req].prefill_instance = inst;
        self.prefill[inst].queue.push_back(req);
        self.try_start_prefill(inst)
    }

    /// FCFS batch under the token budget; an oversize head request runs alone.
    fn form_prefill_batch(&mut self, inst: usize) {
        let budget = self.p.cluster.max_batch_tokens;
        let pi = &mut self.prefill[inst];
        let (batch, n_bt) = form_prefill_batch(&mut pi.queue, self.requests, budget);
        pi.batch = batch;
        pi.batch_tokens = n_bt;
    }

    fn try_start_prefill(&mut self, inst: usize) -> Result<()> {
        if self.prefill[inst].busy || self.prefill[inst].queue.is_empty() {
            return Ok(());
        }
        self.form_prefill_batch(inst);
        let now = self.now;
        let pi = &self.prefill[inst];
        let oldest = pi
            .batch
            .iter()
            .map(|&r| self.requests[r].arrival_ms)
            .fold(f64::INFINITY, f64::min);
        let snapshot = InstanceSnapshot::prefill(
            inst,
            pi.queue.len(),
            now - oldest,
            pi.batch.len() as u64,
            pi.batch_tokens,
            pi.freq,
        );
        let chosen = self.decide(&self.p.prefill, snapshot, pi.last_decision)?;
        let pi = &mut self.prefill[inst];
        pi.busy = true;
        let stall = self.switch_frequency(PhaseKind::Prefill, inst, chosen);
        if stall > 0.0 {
            self.queue
                .push(now + stall, EventKind::FreqApplied, inst, 0);
            Ok(())
        } else {
            self.execute_prefill(inst)
        }
    }

    /// Applies a controller decision. Returns the stall before execution
    /// can start (non-zero only for blocking frequency changes).
    fn switch_frequency(
        &mut self,
        phase: PhaseKind,
        inst: usize,
        chosen: Option<FrequencyMHz>,
    ) -> f64 {
        let now = self.now;
        let p_idle = self.p.calibration.power.p_idle;
        let (policy, freq, last, meter, n_req, n_kv) = match phase {
            PhaseKind::Prefill => {
                let pi = &mut self.prefill[inst];
                let load = (pi.batch.len() as u64, pi.batch_tokens);
                (
                    &self.p.prefill,
                    &mut pi.freq,
                    &mut pi.last_decision,
                    &mut pi.meter,
                    load.0,
                    load.1,
                )
            }
            PhaseKind::Decode => {
                let di = &mut self.decode[inst];
                let load = (di.running.len() as u64, di.resident_kv);
                (
                    &self.p.decode,
                    &mut di.freq,
                    &mut di.last_decision,
                    &mut di.meter,
                    load.0,
                    load.1,
                )
            }
        };
        let Some(target) = chosen else {
            return 0.0;
        };
        *last = Some(now);
        meter.idle_until(now, *freq, p_idle);
        let stall = apply_frequency(freq, target, policy);
        if stall > 0.0 {
            meter.push(Segment {
                start_ms: now,
                end_ms: now + stall,
                freq: *freq,
                n_req,
                n_kv,
                power_w: p_idle,
                busy: true,
            });
        }
        stall
    }

    fn decide(
        &self,
        policy: &FrequencyPolicy,
        snapshot: InstanceSnapshot,
        last: Option<f64>,
    ) -> Result<Option<FrequencyMHz>> {
        match policy {
            FrequencyPolicy::Static(f) => Ok(Some(*f)),
            FrequencyPolicy::Adaptive(cfg) => {
                maybe_select(cfg, self.now, last, &snapshot, &self.p.calibration)
            }
        }
    }

    fn execute_prefill(&mut self, inst: usize) -> Result<()> {
        let now = self.now;
        let p_idle = self.p.calibration.power.p_idle;
        let pi = &self.prefill[inst];
        let (freq, n_bt, n_req) = (pi.freq, pi.batch_tokens, pi.batch.len() as u64);
        let predicted = self.p.calibration.predict_ttft(freq, n_bt)?;
        let actual = predicted * self.noise_factor();
        self.errors.ttft_abs_sum_ms += (actual - predicted).abs();
        self.errors.ttft_count += 1;
        let power = self
            .p
            .calibration
            .power
            .busy_power(freq, PhaseKind::Prefill, n_bt);
        let pi = &mut self.prefill[inst];
        pi.meter.idle_until(now, freq, p_idle);
        pi.meter.push(Segment {
            start_ms: now,
            end_ms: now + actual,
            freq,
            n_req,
            n_kv: n_bt,
            power_w: power,
            busy: true,
        });
        for &r in &pi.batch {
            self.records[r].prefill_start_ms = now;
        }
        self.queue
            .push(now + actual, EventKind::PrefillDone, inst, 0);
        Ok(())
    }

    fn on_prefill_done(&mut self, inst: usize) -> Result<()> {
        let now = self.now;
        let batch = std::mem::take(&mut self.prefill[inst].batch);
        self.prefill[inst].batch_tokens = 0;
        self.prefill[inst].busy = false;
        for &r in &batch {
            let rec = &mut self.records[r];
            rec.prefill_end_ms = now;
            rec.token_times_ms.push(now);
            self.generated += 1;
            if self.requests[r].output_len > 1 {
                self.dispatch_decode(r)?;
            }
        }
        self.try_start_prefill(inst)
    }

    fn dispatch_decode(&mut self, req: usize) -> Result<()> {
        let request = &self.requests[req];
        let snapshots: Vec<InstanceSnapshot> = self
            .decode
            .iter()
            .enumerate()
            .map(|(i, d)| d.routing_snapshot(i, self.requests))
            .collect();
        let target = route_decode(
            &mut self.decode_rr,
            &self.p.route,
            &snapshots,
            request,
            &self.p.whatif,
            &self.p.calibration,
        )?;
        let d = &mut self.decode[target];
        d.in_transit += 1;
        d.in_transit_kv += u64::from(request.input_len) + 1;
        self.records[req].decode_instance = Some(target);
        self.queue.push(
            self.now + self.p.cluster.kv_transfer_ms,
            EventKind::KvTransferDone,
            req,
            target,
        );
        Ok(())
    }

    fn on_kv_transfer(&mut self, req: usize, target: usize) -> Result<()> {
        let kv = u64::from(self.requests[req].input_len) + 1;
        let d = &mut self.decode[target];
        d.in_transit -= 1;
        d.in_transit_kv -= kv;
        d.admission.push_back(req);
        if !d.busy {
            self.start_decode_iteration(target)?;
        }
        Ok(())
    }

    /// Admits queued requests whose full KV footprint fits, then decides the
    /// frequency for the next iteration.
    fn start_decode_iteration(&mut self, inst: usize) -> Result<()> {
        let now = self.now;
        let capacity = self.p.cluster.kv_capacity_tokens;
        let d = &mut self.decode[inst];
        while let Some(&r) = d.admission.front() {
            let req = &self.requests[r];
            let footprint = u64::from(req.input_len) + u64::from(req.output_len);
            if d.reserved_kv + footprint > capacity {
                break;
            }
            d.admission.pop_front();
            let kv = u64::from(req.input_len) + 1;
            d.reserved_kv += footprint;
            d.resident_kv += kv;
            d.running.push(Running {
                req: r,
                remaining: req.output_len - 1,
                kv,
            });
            self.records[r].decode_admit_ms = Some(now);
        }
        d.kv_blocked = !d.admission.is_empty();
        if d.running.is_empty() {
            if let Some(&r) = d.admission.front() {
                return Err(Error::Scenario(format!(
                    "request {} cannot fit in an empty decode instance",
                    self.requests[r].id
                )));
            }
            return Ok(());
        }
        let snapshot = InstanceSnapshot::decode(
            inst,
            d.admission.len(),
            d.running.len() as u64,
            d.resident_kv,
            d.freq,
        );
        let last = d.last_decision;
        let chosen = self.decide(&self.p.decode, snapshot, last)?;
        self.decode[inst].busy = true;
        let stall = self.switch_frequency(PhaseKind::Decode, inst, chosen);
        if stall > 0.0 {
            self.queue.push(
                now + stall,
                EventKind::FreqApplied,
                self.prefill.len() + inst,
                0,
            );
            Ok(())
        } else {
            self.execute_decode(inst)
        }
    }

    fn execute_decode(&mut self, inst: usize) -> Result<()> {
        let now = self.now;
        let p_idle = self.p.calibration.power.p_idle;
        let d = &self.decode[inst];
        let (freq, n_req, n_kv) = (d.freq, d.running.len() as u64, d.resident_kv);
        let predicted = self.p.calibration.predict_itl(freq, n_req, n_kv)?;
        let actual = predicted * self.noise_factor();
        self.errors.itl_abs_sum_ms += (actual - predicted).abs();
        self.errors.itl_count += 1;
        let power = self
            .p
            .calibration
            .power
            .busy_power(freq, PhaseKind::Decode, n_req);
        let d = &mut self.decode[inst];
        d.meter.idle_until(now, freq, p_idle);
        d.meter.push(Segment {
            start_ms: now,
            end_ms: now + actual,
            freq,
            n_req,
            n_kv,
            power_w: power,
            busy: true,
        });
        self.queue
            .push(now + actual, EventKind::DecodeIterDone, inst, 0);
        Ok(())
    }

    fn on_decode_done(&mut self, inst: usize) -> Result<()> {
        let now = self.now;
        let d = &mut self.decode[inst];
        for run in &mut d.running {
            self.records[run.req].token_times_ms.push(now);
            run.kv += 1;
            run.remaining -= 1;
        }
        self.generated += d.running.len() as u64;
        d.resident_kv += d.running.len() as u64;
        let requests = self.requests;
        d.running.retain(|run| {
            if run.remaining == 0 {
                let req = &requests[run.req];
                d.resident_kv -= run.kv;
                d.reserved_kv -= u64::from(req.input_len) + u64::from(req.output_len);
                false
            } else {
                true
            }
        });
        debug_assert_eq!(d.resident_kv, d.running.iter().map(|r| r.kv).sum::<u64>());
        d.busy = false;
        self.start_decode_iteration(inst)
    }

    fn finish(mut self) -> SimResult {
        let mut horizon = self.now;
        if let Some(h) = self.p.horizon_ms {
            horizon = horizon.max(h);
        }
        let p_idle = self.p.calibration.power.p_idle;
        let mut instances = Vec::with_capacity(self.prefill.len() + self.decode.len());
        // instance ids are per phase, matching the request records
        let meters = self
            .prefill
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (i, p.freq, &mut p.meter))
            .chain(
                self.decode
                    .iter_mut()
                    .enumerate()
                    .map(|(i, d)| (i, d.freq, &mut d.meter)),
            );
        for (idx, freq, meter) in meters {
            meter.idle_until(horizon, freq, p_idle);
            instances.push(InstanceTrace {
                instance: idx,
                phase: meter.phase,
                energy_j: meter.energy_j,
                segments: std::mem::take(&mut meter.segments),
            });
        }
        let total_energy_j = instances.iter().map(|i| i.energy_j).sum();
        SimResult {
            horizon_ms: horizon,
            requests: self.records,
            instances,
            total_energy_j,
            generated_tokens: self.generated,
            event_count: self.events,
            noise_sigma: self.p.cluster.exec_noise_sigma,
            prediction_errors: self.errors,
        }
    }
}

/// Pops requests FCFS while their summed input stays within `budget`; the
/// head request is always admitted. Returns the batch and its token count.
pub fn form_prefill_batch(
    queue: &mut VecDeque<usize>,
    requests: &[Request],
    budget: u64,
) -> (Vec<usize>, u64) {
    let mut batch = Vec::new();
    let mut n_bt = 0u64;
    while let Some(&r) = queue.front() {
        let len = u64::from(requests[r].input_len);
        if !batch.is_empty() && n_bt + len > budget {
            break;
        }
        queue.pop_front();
        batch.push(r);
        n_bt += len;
    }
    (batch, n_bt)
}

/// Sets `current` to `target` and returns the stall this costs: the policy's
/// overhead when blocking and the frequency actually changes, else zero.
pub fn apply_frequency(
    current: &mut FrequencyMHz,
    target: FrequencyMHz,
    policy: &FrequencyPolicy,
) -> f64 {
    let changed = *current != target;
    *current = target;
    let (overhead, blocking) = policy.overhead();
    if changed && blocking {
        overhead
    } else {
        0.0
    }
}
