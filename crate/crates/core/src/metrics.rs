// SPDX-License-Identifier: Apache-2.0

//! SLO attainment, energy and throughput summaries of a simulation run,
//! plus JSON / CSV export.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::sim::SimResult;
use crate::types::{FrequencyMHz, PhaseKind, SloProfile};

/// How a request's inter-token gaps are reduced to one number before being
/// compared against the ITL target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItlMode {
    #[default]
    Mean,
    Max,
    P99,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Percentiles {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Percentiles {
    pub fn of(mut values: Vec<f64>) -> Self {
        if values.is_empty() {
            return Percentiles::default();
        }
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Percentiles {
            mean,
            p50: nearest_rank(&values, 0.50),
            p90: nearest_rank(&values, 0.90),
            p99: nearest_rank(&values, 0.99),
            max: *values.last().expect("non-empty"),
        }
    }
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEnergy {
    pub instance: usize,
    pub phase: PhaseKind,
    pub energy_j: f64,
    pub busy_ms: f64,
    /// Share of busy time spent above the lowest frequency the instance used.
    pub high_freq_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub total_j: f64,
    pub prefill_j: f64,
    pub decode_j: f64,
    pub per_instance: Vec<InstanceEnergy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorMae {
    pub ttft_ms: Option<f64>,
    pub itl_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePoint {
    pub time_ms: f64,
    pub instance: usize,
    pub phase: PhaseKind,
    pub freq_mhz: FrequencyMHz,
    pub n_req: u64,
    pub n_kv: u64,
    pub power_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub request_count: usize,
    pub completed_count: usize,
    pub slo: SloProfile,
    pub itl_mode: ItlMode,
    pub tsar: f64,
    pub isar: f64,
    pub horizon_ms: f64,
    pub generated_tokens: u64,
    pub throughput_tps: f64,
    pub energy: EnergySummary,
    pub ttft_percentiles: Percentiles,
    pub itl_percentiles: Percentiles,
    pub predictor_mae_ms: Option<PredictorMae>,
    pub time_series: Vec<TimePoint>,
}

fn aggregate_itl(mut gaps: Vec<f64>, mode: ItlMode) -> Option<f64> {
    if gaps.is_empty() {
        return None;
    }
    Some(match mode {
        ItlMode::Mean => gaps.iter().sum::<f64>() / gaps.len() as f64,
        ItlMode::Max => gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ItlMode::P99 => {
            gaps.sort_by(f64::total_cmp);
            nearest_rank(&gaps, 0.99)
        }
    })
}

/// Requests with a single output token have no inter-token gaps and count
/// as meeting the ITL target.
pub fn compute_report(result: &SimResult, slo: &SloProfile, itl_mode: ItlMode) -> MetricsReport {
    let n = result.requests.len();
    let mut ttft_ok = 0usize;
    let mut itl_ok = 0usize;
    let mut ttfts = Vec::with_capacity(n);
    let mut all_gaps = Vec::new();
    for rec in &result.requests {
        let ttft = rec.ttft_ms();
        ttfts.push(ttft);
        if ttft <= slo.ttft_ms {
            ttft_ok += 1;
        }
        let gaps: Vec<f64> = rec.inter_token_gaps().collect();
        all_gaps.extend_from_slice(&gaps);
        match aggregate_itl(gaps, itl_mode) {
            Some(v) if v > slo.itl_ms => {}
            _ => itl_ok += 1,
        }
    }
    let frac = |k: usize| if n == 0 { 1.0 } else { k as f64 / n as f64 };

    let per_instance = result
        .instances
        .iter()
        .map(|inst| {
            let busy: Vec<_> = inst.segments.iter().filter(|s| s.busy).collect();
            let busy_ms: f64 = busy.iter().map(|s| s.duration_ms()).sum();
            let low = busy.iter().map(|s| s.freq).min();
            let high_ms: f64 = busy
                .iter()
                .filter(|s| Some(s.freq) > low)
                .map(|s| s.duration_ms())
                .sum();
            InstanceEnergy {
                instance: inst.instance,
                phase: inst.phase,
                energy_j: inst.energy_j,
                busy_ms,
                high_freq_fraction: if busy_ms > 0.0 {
                    high_ms / busy_ms
                } else {
                    0.0
                },
            }
        })
        .collect();

    let time_series = result
        .instances
        .iter()
        .flat_map(|inst| {
            inst.segments.iter().map(move |s| TimePoint {
                time_ms: s.start_ms,
                instance: inst.instance,
                phase: inst.phase,
                freq_mhz: s.freq,
                n_req: s.n_req,
                n_kv: s.n_kv,
                power_w: s.power_w,
            })
        })
        .collect();

    let predictor_mae_ms = (result.noise_sigma > 0.0).then(|| PredictorMae {
        ttft_ms: result.prediction_errors.ttft_mae_ms(),
        itl_ms: result.prediction_errors.itl_mae_ms(),
    });

    MetricsReport {
        request_count: n,
        completed_count: result.requests.iter().filter(|r| r.is_complete()).count(),
        slo: *slo,
        itl_mode,
        tsar: frac(ttft_ok),
        isar: frac(itl_ok),
        horizon_ms: result.horizon_ms,
        generated_tokens: result.generated_tokens,
        throughput_tps: if result.horizon_ms > 0.0 {
            result.generated_tokens as f64 / (result.horizon_ms / 1000.0)
        } else {
            0.0
        },
        energy: EnergySummary {
            total_j: result.total_energy_j,
            prefill_j: result.phase_energy_j(PhaseKind::Prefill),
            decode_j: result.phase_energy_j(PhaseKind::Decode),
            per_instance,
        },
        ttft_percentiles: Percentiles::of(ttfts),
        itl_percentiles: Percentiles::of(all_gaps),
        predictor_mae_ms,
        time_series,
    }
}

/// Share of the time at least one `phase` instance is busy during which at
/// least one instance of that phase runs no more than `threshold` requests.
pub fn boundary_hold_fraction(result: &SimResult, phase: PhaseKind, threshold: u64) -> f64 {
    let traces: Vec<_> = result.instances_of(phase).collect();
    let mut cuts: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.segments.iter().flat_map(|s| [s.start_ms, s.end_ms]))
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut cursors = vec![0usize; traces.len()];
    let (mut busy_ms, mut held_ms) = (0.0, 0.0);
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut any_busy = false;
        let mut any_low = false;
        for (t, cur) in traces.iter().zip(cursors.iter_mut()) {
            while *cur < t.segments.len() && t.segments[*cur].end_ms <= a {
                *cur += 1;
            }
            let n_req = match t.segments.get(*cur) {
                Some(s) if s.start_ms <= a && s.busy => {
                    any_busy = true;
                    s.n_req
                }
                _ => 0,
            };
            if n_req <= threshold {
                any_low = true;
            }
        }
        if any_busy {
            busy_ms += b - a;
            if any_low {
                held_ms += b - a;
            }
        }
    }
    if busy_ms > 0.0 {
        held_ms / busy_ms
    } else {
        1.0
    }
}

/// Share of `phase` busy time inside `[start_ms, end_ms)` spent above `floor`.
pub fn high_freq_fraction(
    result: &SimResult,
    phase: PhaseKind,
    floor: FrequencyMHz,
    start_ms: f64,
    end_ms: f64,
) -> f64 {
    let (mut busy, mut high) = (0.0, 0.0);
    for inst in result.instances_of(phase) {
        for s in inst.segments.iter().filter(|s| s.busy) {
            let overlap = s.end_ms.min(end_ms) - s.start_ms.max(start_ms);
            if overlap > 0.0 {
                busy += overlap;
                if s.freq > floor {
                    high += overlap;
                }
            }
        }
    }
    if busy > 0.0 {
        high / busy
    } else {
        0.0
    }
}

/// TTFT attainment over requests arriving inside `[start_ms, end_ms)`.
pub fn tsar_between(result: &SimResult, slo: &SloProfile, start_ms: f64, end_ms: f64) -> f64 {
    let inside: Vec<_> = result
        .requests
        .iter()
        .filter(|r| r.arrival_ms >= start_ms && r.arrival_ms < end_ms)
        .collect();
    if inside.is_empty() {
        return 1.0;
    }
    inside.iter().filter(|r| r.ttft_ms() <= slo.ttft_ms).count() as f64 / inside.len() as f64
}

pub const TIME_SERIES_HEADER: &str = "time_ms,instance,phase,freq_mhz,n_req,n_kv,power_w";

pub fn to_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn write_time_series_csv<W: Write>(w: W, report: &MetricsReport) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TIME_SERIES_HEADER.split(','))?;
    for p in &report.time_series {
        wtr.write_record([
            p.time_ms.to_string(),
            p.instance.to_string(),
            p.phase.to_string(),
            p.freq_mhz.to_string(),
            p.n_req.to_string(),
            p.n_kv.to_string(),
            p.power_w.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub const SUMMARY_HEADER: &str =
    "arm,tsar,isar,energy_j,prefill_energy_j,decode_energy_j,throughput_tps,requests";

pub fn write_summary_csv<W: Write>(w: W, rows: &[(String, &MetricsReport)]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SUMMARY_HEADER.split(','))?;
    for (arm, r) in rows {
        wtr.write_record([
            arm.clone(),
            format!("{:.6}", r.tsar),
            format!("{:.6}", r.isar),
            format!("{:.3}", r.energy.total_j),
            format!("{:.3}", r.energy.prefill_j),
            format!("{:.3}", r.energy.decode_j),
            format!("{:.3}", r.throughput_tps),
            r.request_count.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{InstanceTrace, PredictionErrors, RequestRecord, Segment};

    fn rec(id: u64, ttft: f64, gaps: &[f64]) -> RequestRecord {
        let mut times = vec![ttft];
        for g in gaps {
            let last = *times.last().unwrap();
            times.push(last + g);
        }
        RequestRecord {
            id,
            arrival_ms: 0.0,
            input_len: 10,
            output_len: times.len() as u32,
            prefill_instance: 0,
            prefill_start_ms: 0.0,
            prefill_end_ms: ttft,
            decode_instance: Some(1),
            decode_admit_ms: Some(ttft),
            token_times_ms: times,
        }
    }

    fn result(requests: Vec<RequestRecord>) -> SimResult {
        let f = FrequencyMHz::new(1005).unwrap();
        let seg = |start: f64, end: f64, busy| Segment {
            start_ms: start,
            end_ms: end,
            freq: f,
            n_req: 1,
            n_kv: 10,
            power_w: 100.0,
            busy,
        };
        SimResult {
            horizon_ms: 1000.0,
            generated_tokens: requests.iter().map(|r| r.token_times_ms.len() as u64).sum(),
            requests,
            instances: vec![
                InstanceTrace {
                    instance: 0,
                    phase: PhaseKind::Prefill,
                    energy_j: 100.0,
                    segments: vec![seg(0.0, 1000.0, true)],
                },
                InstanceTrace {
                    instance: 1,
                    phase: PhaseKind::Decode,
                    energy_j: 100.0,
                    segments: vec![seg(0.0, 500.0, true), seg(500.0, 1000.0, false)],
                },
            ],
            total_energy_j: 200.0,
            event_count: 3,
            noise_sigma: 0.0,
            prediction_errors: PredictionErrors::default(),
        }
    }

    #[test]
    fn attainment_counts() {
        let slo = SloProfile::new(100.0, 20.0).unwrap();
        let r = result(vec![
            rec(0, 50.0, &[10.0, 10.0]),
            rec(1, 90.0, &[30.0, 10.0]),
            rec(2, 150.0, &[5.0]),
            rec(3, 100.0, &[]),
        ]);
        let rep = compute_report(&r, &slo, ItlMode::Mean);
        assert_eq!(rep.tsar, 0.75);
        assert_eq!(rep.isar, 1.0);
        let rep = compute_report(&r, &slo, ItlMode::Max);
        assert_eq!(rep.isar, 0.75);
        assert_eq!(
            rep.energy.total_j,
            rep.energy.prefill_j + rep.energy.decode_j
        );
    }

    #[test]
    fn all_met_gives_full_attainment() {
        let slo = SloProfile::new(1000.0, 1000.0).unwrap();
        let rep = compute_report(&result(vec![rec(0, 5.0, &[1.0])]), &slo, ItlMode::P99);
        assert_eq!((rep.tsar, rep.isar), (1.0, 1.0));
    }

    #[test]
    fn json_round_trip() {
        let rep = compute_report(
            &result(vec![rec(0, 5.0, &[1.0, 2.0])]),
            &SloProfile::MEDIUM,
            ItlMode::Mean,
        );
        let back: MetricsReport = serde_json::from_str(&to_json(&rep)).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn csv_has_one_row_per_segment() {
        let rep = compute_report(&result(vec![]), &SloProfile::MEDIUM, ItlMode::Mean);
        let mut buf = Vec::new();
        write_time_series_csv(&mut buf, &rep).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], TIME_SERIES_HEADER);
        assert_eq!(lines.len(), 1 + 3);
    }

    #[test]
    fn percentiles_nearest_rank() {
        let p = Percentiles::of((1..=100).map(f64::from).collect());
        assert_eq!((p.p50, p.p90, p.p99, p.max), (50.0, 90.0, 99.0, 100.0));
        assert_eq!(Percentiles::of(vec![]), Percentiles::default());
    }
}
