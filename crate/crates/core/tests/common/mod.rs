// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::path::PathBuf;

use pdsim::calibration::Calibration;
use pdsim::controller::ControllerConfig;
use pdsim::router::Delta;
use pdsim::sim::SimResult;
use pdsim::types::{FrequencyMHz, InstanceSnapshot, PhaseKind, Request};

pub fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

/// Every bundled scenario config (the calibration file is not a scenario).
pub fn bundled_scenarios() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(scenarios_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .filter(|p| {
            !p.file_name()
                .unwrap()
                .to_string_lossy()
                .contains("calibration")
        })
        .collect();
    out.sort();
    out
}

/// Ascending ladder scan written out longhand.
pub fn brute_force_select(
    cfg: &ControllerConfig,
    snap: &InstanceSnapshot,
    cal: &Calibration,
) -> FrequencyMHz {
    let levels = cfg.ladder.levels();
    let top = *levels.last().unwrap();
    if snap.queue_len > 0 {
        return top;
    }
    let budget = match snap.phase {
        PhaseKind::Prefill => {
            let b = cfg.slo.ttft_ms - snap.max_wait_ms;
            if b < 0.0 {
                0.0
            } else {
                b
            }
        }
        PhaseKind::Decode => cfg.slo.itl_ms,
    };
    let idle = match snap.phase {
        PhaseKind::Prefill => snap.n_bt == 0,
        PhaseKind::Decode => snap.n_req == 0,
    };
    if idle {
        return levels[0];
    }
    let mut feasible = Vec::new();
    for &f in levels {
        let t = match snap.phase {
            PhaseKind::Prefill => cal.predict_ttft(f, snap.n_bt).unwrap(),
            PhaseKind::Decode => cal.predict_itl(f, snap.n_req, snap.n_kv).unwrap(),
        };
        if t <= budget {
            feasible.push(f);
        }
    }
    feasible.into_iter().min().unwrap_or(top)
}

/// Reference router over explicit (f_now, f_after) pairs. Returns the pick
/// and the cursor afterwards; the cursor only moves when a tie is broken.
pub fn reference_choose(
    cursor: usize,
    delta: Delta,
    pairs: &[(FrequencyMHz, FrequencyMHz)],
) -> (usize, usize) {
    let n = pairs.len();
    let stays: Vec<usize> = (0..n).filter(|&i| pairs[i].1 <= pairs[i].0).collect();
    let rises: Vec<usize> = (0..n).filter(|&i| pairs[i].1 > pairs[i].0).collect();
    let min_of = |set: &[usize], after: bool| {
        set.iter()
            .map(|&i| if after { pairs[i].1 } else { pairs[i].0 })
            .min()
            .unwrap()
    };
    let filter = |set: &[usize], after: bool, v: FrequencyMHz| -> Vec<usize> {
        set.iter()
            .copied()
            .filter(|&i| (if after { pairs[i].1 } else { pairs[i].0 }) == v)
            .collect()
    };
    let all: Vec<usize> = (0..n).collect();
    let candidates = if rises.is_empty() {
        // every instance keeps its frequency
        filter(&all, false, min_of(&all, false))
    } else if stays.is_empty() {
        filter(&all, true, min_of(&all, true))
    } else {
        let g = i64::from(min_of(&stays, false).get()) - i64::from(min_of(&rises, true).get());
        let keep = match delta {
            Delta::Mhz(d) => g <= i64::from(d),
            Delta::Unbounded(_) => true,
        };
        if keep {
            filter(&stays, false, min_of(&stays, false))
        } else {
            filter(&all, false, min_of(&all, false))
        }
    };
    if candidates.len() == 1 {
        return (candidates[0], cursor);
    }
    for k in 0..n {
        let i = (cursor + k) % n;
        if candidates.contains(&i) {
            return (i, (i + 1) % n);
        }
    }
    unreachable!()
}

pub fn with_request(snap: &InstanceSnapshot, req: &Request) -> InstanceSnapshot {
    let mut s = *snap;
    s.n_req += 1;
    s.n_bt = s.n_req;
    s.n_kv += u64::from(req.input_len) + 1;
    s
}

/// Reference for the full decode routing path: brute-force controller for
/// both what-if frequencies, then [`reference_choose`].
pub fn reference_route(
    cursor: usize,
    delta: Delta,
    snaps: &[InstanceSnapshot],
    req: &Request,
    ctl: &ControllerConfig,
    cal: &Calibration,
) -> (usize, usize) {
    let pairs: Vec<_> = snaps
        .iter()
        .map(|s| {
            (
                brute_force_select(ctl, s, cal),
                brute_force_select(ctl, &with_request(s, req), cal),
            )
        })
        .collect();
    reference_choose(cursor, delta, &pairs)
}

/// Structural checks on a finished run. Returns a description of the first
/// violation.
pub fn check_invariants(
    result: &SimResult,
    requests: &[Request],
    kv_capacity: u64,
) -> Result<(), String> {
    // causality
    for rec in &result.requests {
        if !(rec.arrival_ms <= rec.prefill_start_ms && rec.prefill_start_ms < rec.prefill_end_ms) {
            return Err(format!(
                "request {}: prefill timestamps out of order",
                rec.id
            ));
        }
        match rec.token_times_ms.first() {
            Some(&t) if t == rec.prefill_end_ms => {}
            Some(_) => {
                return Err(format!(
                    "request {}: first token not at prefill end",
                    rec.id
                ))
            }
            None => return Err(format!("request {}: no first token", rec.id)),
        }
        if rec.token_times_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(format!(
                "request {}: token times not strictly increasing",
                rec.id
            ));
        }
        if let Some(admit) = rec.decode_admit_ms {
            if admit < rec.prefill_end_ms || rec.token_times_ms.get(1).is_some_and(|&t| t <= admit)
            {
                return Err(format!("request {}: decode admission out of order", rec.id));
            }
        }
    }
    // token conservation
    let completed: Vec<_> = result.requests.iter().filter(|r| r.is_complete()).collect();
    let expected: u64 = completed.iter().map(|r| u64::from(r.output_len)).sum();
    let recorded: u64 = result
        .requests
        .iter()
        .map(|r| r.token_times_ms.len() as u64)
        .sum();
    if recorded != result.generated_tokens {
        return Err(format!(
            "generated {} tokens but recorded {recorded}",
            result.generated_tokens
        ));
    }
    if completed.len() == result.requests.len() && expected != result.generated_tokens {
        return Err(format!(
            "generated {} tokens, completed requests expect {expected}",
            result.generated_tokens
        ));
    }
    if result.requests.len() != requests.len() {
        return Err("request count mismatch".into());
    }
    for (rec, req) in result.requests.iter().zip(requests) {
        if rec.id != req.id || rec.input_len != req.input_len || rec.output_len != req.output_len {
            return Err(format!("request {} does not match its input", req.id));
        }
    }
    // energy additivity and gap-free timelines
    let mut total = 0.0;
    for trace in &result.instances {
        let mut t = 0.0;
        let mut e = 0.0;
        for seg in &trace.segments {
            if (seg.start_ms - t).abs() > 1e-6 {
                return Err(format!(
                    "instance {} {}: gap or overlap at {t}",
                    trace.phase, trace.instance
                ));
            }
            if seg.end_ms <= seg.start_ms {
                return Err(format!(
                    "instance {} {}: empty segment",
                    trace.phase, trace.instance
                ));
            }
            e += seg.power_w * (seg.end_ms - seg.start_ms) / 1000.0;
            t = seg.end_ms;
        }
        if (t - result.horizon_ms).abs() > 1e-6 {
            return Err(format!(
                "instance {} {}: timeline ends at {t}, horizon {}",
                trace.phase, trace.instance, result.horizon_ms
            ));
        }
        if (e - trace.energy_j).abs() > 1e-6 * e.max(1.0) {
            return Err(format!(
                "instance {} {}: energy {} vs segments {e}",
                trace.phase, trace.instance, trace.energy_j
            ));
        }
        total += trace.energy_j;
    }
    if (total - result.total_energy_j).abs() > 1e-6 * total.max(1.0) {
        return Err(format!(
            "total energy {} vs instances {total}",
            result.total_energy_j
        ));
    }
    // KV accounting, reconstructed from request records: at the start of
    // each decode iteration a running request holds its prompt plus every
    // token produced so far.
    for trace in result
        .instances
        .iter()
        .filter(|t| t.phase == PhaseKind::Decode)
    {
        let mine: Vec<_> = result
            .requests
            .iter()
            .filter(|r| r.decode_instance == Some(trace.instance))
            .collect();
        for seg in trace.segments.iter().filter(|s| s.busy) {
            if seg.n_kv > kv_capacity {
                return Err(format!(
                    "decode {}: kv {} above capacity",
                    trace.instance, seg.n_kv
                ));
            }
            let mut n_req = 0u64;
            let mut kv = 0u64;
            for r in &mine {
                let admitted = r.decode_admit_ms.is_some_and(|a| a <= seg.start_ms);
                let last = *r.token_times_ms.last().unwrap();
                let finished_before = r.is_complete() && last <= seg.start_ms;
                if admitted && !finished_before {
                    n_req += 1;
                    let produced = r
                        .token_times_ms
                        .iter()
                        .filter(|&&t| t <= seg.start_ms)
                        .count() as u64;
                    kv += u64::from(r.input_len) + produced;
                }
            }
            if n_req != seg.n_req || kv != seg.n_kv {
                return Err(format!(
                    "decode {} at {}: segment says n_req={} kv={}, records say n_req={n_req} kv={kv}",
                    trace.instance, seg.start_ms, seg.n_req, seg.n_kv
                ));
            }
        }
    }
    Ok(())
}

/// Largest relative coefficient error between a fitted and a generating
/// calibration over every TTFT line and ITL cell of `ladder`.
pub fn max_coefficient_error(
    fitted: &Calibration,
    truth: &Calibration,
    ladder: &pdsim::FrequencyLadder,
) -> f64 {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    let mut worst: f64 = 0.0;
    for &f in ladder.levels() {
        let (a, b) = (
            fitted.ttft.coeffs(f).unwrap(),
            truth.ttft.coeffs(f).unwrap(),
        );
        worst = worst
            .max(rel(a.per_token_ms, b.per_token_ms))
            .max(rel(a.intercept_ms, b.intercept_ms));
        for tile in 0..=truth.itl.max_tile() {
            let a = fitted.itl.cell(f, tile).unwrap().coeffs;
            let b = truth.itl.cell(f, tile).unwrap().coeffs;
            worst = worst
                .max(rel(a.per_request_ms, b.per_request_ms))
                .max(rel(a.per_kv_token_ms, b.per_kv_token_ms))
                .max(rel(a.intercept_ms, b.intercept_ms));
        }
    }
    worst
}

pub struct HeldOut {
    pub ttft_mae: f64,
    pub ttft_floor: f64,
    pub itl_mae: f64,
    pub itl_floor: f64,
}

/// Held-out error of `fitted` against noisy observations of `truth` at
/// random load points. The floor is the error of the generating model
/// itself, i.e. what the noise alone induces.
pub fn held_out_error(
    fitted: &Calibration,
    truth: &Calibration,
    ladder: &pdsim::FrequencyLadder,
    sigma: f64,
    seed: u64,
) -> HeldOut {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, LogNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = LogNormal::new(0.0, sigma).unwrap();
    let (mut tm, mut tf, mut im, mut ifl, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..4000 {
        let f = ladder.levels()[rng.gen_range(0..ladder.len())];
        let n_bt = rng.gen_range(64..=8192u64);
        let y = truth.predict_ttft(f, n_bt).unwrap();
        let obs = y * noise.sample(&mut rng);
        tm += (obs - fitted.predict_ttft(f, n_bt).unwrap()).abs();
        tf += (obs - y).abs();
        let n_req = rng.gen_range(1..=1024u64);
        let n_kv = n_req * rng.gen_range(100..=1600u64);
        let y = truth.predict_itl(f, n_req, n_kv).unwrap();
        let obs = y * noise.sample(&mut rng);
        im += (obs - fitted.predict_itl(f, n_req, n_kv).unwrap()).abs();
        ifl += (obs - y).abs();
        n += 1.0;
    }
    HeldOut {
        ttft_mae: tm / n,
        ttft_floor: tf / n,
        itl_mae: im / n,
        itl_floor: ifl / n,
    }
}
