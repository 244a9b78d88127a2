// SPDX-License-Identifier: Apache-2.0

//! Synthetic workloads (Poisson arrivals, lognormal lengths), phased
//! scenarios with a shifting prefill/decode demand ratio, and JSONL traces.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthFamily {
    LogNormalTruncated,
    Fixed,
    Empirical,
    /// Integers drawn uniformly from `[min, max]`; `mean` is ignored.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub family: LengthFamily,
    pub mean: f64,
    #[serde(default)]
    pub std: f64,
    #[serde(default = "default_min")]
    pub min: u32,
    #[serde(default = "default_max")]
    pub max: u32,
    /// Sample pool for the empirical family.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<u32>,
}

fn default_min() -> u32 {
    1
}

fn default_max() -> u32 {
    32768
}

impl LengthDist {
    pub fn fixed(len: u32) -> Self {
        LengthDist {
            family: LengthFamily::Fixed,
            mean: f64::from(len),
            std: 0.0,
            min: default_min(),
            max: default_max(),
            values: Vec::new(),
        }
    }

    pub fn uniform(min: u32, max: u32) -> Self {
        LengthDist {
            family: LengthFamily::Uniform,
            mean: (f64::from(min) + f64::from(max)) / 2.0,
            std: 0.0,
            min,
            max,
            values: Vec::new(),
        }
    }

    pub fn lognormal(mean: f64, std: f64) -> Self {
        LengthDist {
            family: LengthFamily::LogNormalTruncated,
            mean,
            std,
            min: default_min(),
            max: default_max(),
            values: Vec::new(),
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.mean > 0.0 && self.mean.is_finite()) {
            return Err(Error::validation(format!("{field}.mean"), "must be > 0"));
        }
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::validation(format!("{field}.std"), "must be >= 0"));
        }
        if self.min == 0 || self.min > self.max {
            return Err(Error::validation(
                format!("{field}.min"),
                "need 1 <= min <= max",
            ));
        }
        if self.family == LengthFamily::Empirical {
            if self.values.is_empty() {
                return Err(Error::validation(
                    format!("{field}.values"),
                    "empirical distribution needs sample values",
                ));
            }
            if self.values.iter().any(|&v| v < self.min || v > self.max) {
                return Err(Error::validation(
                    format!("{field}.values"),
                    "values must lie within [min, max]",
                ));
            }
        }
        Ok(())
    }

    fn sampler(&self) -> Result<LengthSampler<'_>> {
        Ok(match self.family {
            LengthFamily::Fixed => LengthSampler::Fixed(self.mean.round().max(1.0) as u32),
            LengthFamily::Empirical => LengthSampler::Empirical(&self.values),
            LengthFamily::Uniform => LengthSampler::Uniform(self.min, self.max),
            LengthFamily::LogNormalTruncated => {
                let (mu, sigma) = if self.std > 0.0 {
                    lognormal_params(self.mean, self.std)?
                } else {
                    (self.mean.ln(), 0.0)
                };
                let dist = LogNormal::new(mu, sigma)
                    .map_err(|e| Error::validation("length", e.to_string()))?;
                LengthSampler::LogNormal {
                    dist,
                    min: self.min,
                    max: self.max,
                }
            }
        })
    }
}

enum LengthSampler<'a> {
    Fixed(u32),
    Empirical(&'a [u32]),
    Uniform(u32, u32),
    LogNormal {
        dist: LogNormal<f64>,
        min: u32,
        max: u32,
    },
}

impl LengthSampler<'_> {
    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match self {
            LengthSampler::Fixed(v) => *v,
            LengthSampler::Empirical(values) => values[rng.gen_range(0..values.len())],
            LengthSampler::Uniform(lo, hi) => rng.gen_range(*lo..=*hi),
            LengthSampler::LogNormal { dist, min, max } => {
                // rejection keeps the shape inside [min, max]; the clamp only
                // guards pathological parameterizations
                for _ in 0..10_000 {
                    let x = dist.sample(rng).round();
                    if x >= f64::from(*min) && x <= f64::from(*max) {
                        return x as u32;
                    }
                }
                (dist.sample(rng).round() as u32).clamp(*min, *max)
            }
        }
    }
}

/// Moment-matched lognormal parameters `(mu, sigma)` for a target mean and
/// standard deviation.
pub fn lognormal_params(mean: f64, std: f64) -> Result<(f64, f64)> {
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::Contract(format!(
            "lognormal mean must be > 0, got {mean}"
        )));
    }
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::Contract(format!(
            "lognormal std must be >= 0, got {std}"
        )));
    }
    let sigma2 = (1.0 + (std * std) / (mean * mean)).ln();
    Ok((mean.ln() - sigma2 / 2.0, sigma2.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    /// Evenly spaced arrivals at `1/rps`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSegment {
    pub rps: f64,
    pub duration_s: f64,
    pub input: LengthDist,
    pub output: LengthDist,
    #[serde(default)]
    pub arrival: ArrivalProcess,
}

impl PoissonSegment {
    fn validate(&self, field: &str) -> Result<()> {
        if !(self.rps > 0.0 && self.rps.is_finite()) {
            return Err(Error::validation(format!("{field}.rps"), "must be > 0"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::validation(
                format!("{field}.duration_s"),
                "must be > 0",
            ));
        }
        self.input.validate(&format!("{field}.input"))?;
        self.output.validate(&format!("{field}.output"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadKind {
    Poisson(PoissonSegment),
    Trace { path: PathBuf },
    Phased { segments: Vec<PoissonSegment> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(flatten)]
    pub kind: WorkloadKind,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn poisson(
        rps: f64,
        duration_s: f64,
        input: LengthDist,
        output: LengthDist,
        seed: u64,
    ) -> Self {
        WorkloadSpec {
            kind: WorkloadKind::Poisson(PoissonSegment {
                rps,
                duration_s,
                input,
                output,
                arrival: ArrivalProcess::Poisson,
            }),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            WorkloadKind::Poisson(seg) => seg.validate("workload"),
            WorkloadKind::Trace { .. } => Ok(()),
            WorkloadKind::Phased { segments } => {
                if segments.is_empty() {
                    return Err(Error::validation("workload.segments", "must not be empty"));
                }
                segments
                    .iter()
                    .enumerate()
                    .try_for_each(|(i, s)| s.validate(&format!("workload.segments[{i}]")))
            }
        }
    }

    /// Nominal length of the generated arrival window, when known.
    pub fn horizon_ms(&self) -> Option<f64> {
        match &self.kind {
            WorkloadKind::Poisson(seg) => Some(seg.duration_s * 1000.0),
            WorkloadKind::Phased { segments } => {
                Some(segments.iter().map(|s| s.duration_s).sum::<f64>() * 1000.0)
            }
            WorkloadKind::Trace { .. } => None,
        }
    }

    /// Segment boundaries `[start_ms, end_ms)` for phased specs.
    pub fn segment_bounds_ms(&self) -> Vec<(f64, f64)> {
        let segments: &[PoissonSegment] = match &self.kind {
            WorkloadKind::Poisson(seg) => std::slice::from_ref(seg),
            WorkloadKind::Phased { segments } => segments,
            WorkloadKind::Trace { .. } => &[],
        };
        let mut start = 0.0;
        segments
            .iter()
            .map(|s| {
                let end = start + s.duration_s * 1000.0;
                let bounds = (start, end);
                start = end;
                bounds
            })
            .collect()
    }
}

/// Generates the request list for `spec`. Trace paths are used as given.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    generate_in(spec, Path::new("."))
}

/// Like [`generate`], resolving relative trace paths against `base`.
pub fn generate_in(spec: &WorkloadSpec, base: &Path) -> Result<Vec<Request>> {
    spec.validate()?;
    let segments = match &spec.kind {
        WorkloadKind::Trace { path } => return load_trace(&base.join(path)),
        WorkloadKind::Poisson(seg) => std::slice::from_ref(seg),
        WorkloadKind::Phased { segments } => segments.as_slice(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let mut start_ms = 0.0;
    for seg in segments {
        let end_ms = start_ms + seg.duration_s * 1000.0;
        let input = seg.input.sampler()?;
        let output = seg.output.sampler()?;
        let gap =
            Exp::new(seg.rps / 1000.0).map_err(|e| Error::validation("rps", e.to_string()))?;
        let mut t = start_ms;
        loop {
            t += match seg.arrival {
                ArrivalProcess::Poisson => gap.sample(&mut rng),
                ArrivalProcess::Uniform => 1000.0 / seg.rps,
            };
            if t >= end_ms {
                break;
            }
            let input_len = input.sample(&mut rng);
            let output_len = output.sample(&mut rng);
            out.push(Request {
                id: out.len() as u64,
                arrival_ms: t,
                input_len,
                output_len,
            });
        }
        start_ms = end_ms;
    }
    Ok(out)
}

#[derive(Deserialize)]
struct TraceLine {
    arrival_ms: f64,
    input_len: i64,
    output_len: i64,
    #[serde(default)]
    id: Option<u64>,
}

#[derive(Serialize)]
struct TraceLineOut {
    id: u64,
    arrival_ms: f64,
    input_len: u32,
    output_len: u32,
}

pub fn load_trace(path: &Path) -> Result<Vec<Request>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text, path)
}

pub fn parse_trace(text: &str, path: &Path) -> Result<Vec<Request>> {
    let ingest = |line: usize, message: String| Error::Ingest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: TraceLine =
            serde_json::from_str(line).map_err(|e| ingest(lineno, e.to_string()))?;
        if !(row.arrival_ms >= 0.0 && row.arrival_ms.is_finite()) {
            return Err(ingest(
                lineno,
                format!("arrival_ms must be >= 0, got {}", row.arrival_ms),
            ));
        }
        for (name, v) in [("input_len", row.input_len), ("output_len", row.output_len)] {
            if v < 1 || v > i64::from(u32::MAX) {
                return Err(ingest(lineno, format!("{name} must be >= 1, got {v}")));
            }
        }
        rows.push((lineno, row));
    }
    rows.sort_by(|a, b| a.1.arrival_ms.total_cmp(&b.1.arrival_ms));
    let explicit = rows.iter().any(|(_, r)| r.id.is_some());
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (i, (lineno, row)) in rows.into_iter().enumerate() {
        let id = if explicit {
            row.id
                .ok_or_else(|| ingest(lineno, "id missing while other lines carry one".into()))?
        } else {
            i as u64
        };
        if !seen.insert(id) {
            return Err(ingest(lineno, format!("duplicate id {id}")));
        }
        out.push(Request {
            id,
            arrival_ms: row.arrival_ms,
            input_len: row.input_len as u32,
            output_len: row.output_len as u32,
        });
    }
    Ok(out)
}

pub fn write_trace<W: Write>(mut w: W, requests: &[Request]) -> std::io::Result<()> {
    for r in requests {
        let line = TraceLineOut {
            id: r.id,
            arrival_ms: r.arrival_ms,
            input_len: r.input_len,
            output_len: r.output_len,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorkloadSummary {
    pub count: usize,
    pub input_mean: f64,
    pub input_std: f64,
    pub output_mean: f64,
    pub output_std: f64,
}

pub fn summarize(requests: &[Request]) -> WorkloadSummary {
    let stats = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        if v.is_empty() {
            return (0.0, 0.0);
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (input_mean, input_std) = stats(&mut requests.iter().map(|r| f64::from(r.input_len)));
    let (output_mean, output_std) = stats(&mut requests.iter().map(|r| f64::from(r.output_len)));
    WorkloadSummary {
        count: requests.len(),
        input_mean,
        input_std,
        output_mean,
        output_std,
    }
}

/// Length statistics of the two public chat datasets used for evaluation:
/// (prefill mean, prefill std, decode mean, decode std).
pub const SHAREGPT_LENGTHS: (f64, f64, f64, f64) = (280.27, 375.58, 190.90, 209.15);
pub const LMSYS_LENGTHS: (f64, f64, f64, f64) = (78.40, 133.29, 174.57, 166.13);

pub fn sharegpt_like(rps: f64, duration_s: f64, seed: u64) -> WorkloadSpec {
    let (im, is, om, os) = SHAREGPT_LENGTHS;
    WorkloadSpec::poisson(
        rps,
        duration_s,
        LengthDist::lognormal(im, is),
        LengthDist::lognormal(om, os),
        seed,
    )
}

pub fn lmsys_like(rps: f64, duration_s: f64, seed: u64) -> WorkloadSpec {
    let (im, is, om, os) = LMSYS_LENGTHS;
    WorkloadSpec::poisson(
        rps,
        duration_s,
        LengthDist::lognormal(im, is),
        LengthDist::lognormal(om, os),
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lognormal_closed_form() {
        let (mu, sigma) = lognormal_params(280.27, 375.58).unwrap();
        let s2 = (1.0f64 + (375.58f64 / 280.27).powi(2)).ln();
        assert!((sigma - s2.sqrt()).abs() < 1e-12);
        assert!((mu - (280.27f64.ln() - s2 / 2.0)).abs() < 1e-12);
        let (mu0, sigma0) = lognormal_params(100.0, 0.0).unwrap();
        assert_eq!(sigma0, 0.0);
        assert!((mu0 - 100.0f64.ln()).abs() < 1e-12);
        assert!(lognormal_params(0.0, 1.0).is_err());
    }

    #[test]
    fn fixed_lengths_are_constant() {
        let spec =
            WorkloadSpec::poisson(5.0, 20.0, LengthDist::fixed(512), LengthDist::fixed(128), 3);
        let reqs = generate(&spec).unwrap();
        assert!(!reqs.is_empty());
        assert!(reqs
            .iter()
            .all(|r| r.input_len == 512 && r.output_len == 128));
    }

    #[test]
    fn uniform_lengths_stay_in_range() {
        let spec = WorkloadSpec::poisson(
            50.0,
            20.0,
            LengthDist::uniform(3, 9),
            LengthDist::fixed(1),
            3,
        );
        let reqs = generate(&spec).unwrap();
        assert!(reqs.iter().all(|r| (3..=9).contains(&r.input_len)));
        assert!(reqs.iter().any(|r| r.input_len == 3) && reqs.iter().any(|r| r.input_len == 9));
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&sharegpt_like(10.0, 30.0, 7)).unwrap();
        let b = generate(&sharegpt_like(10.0, 30.0, 7)).unwrap();
        let c = generate(&sharegpt_like(10.0, 30.0, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn truncation_respects_bounds() {
        let mut d = LengthDist::lognormal(280.27, 375.58);
        d.min = 16;
        d.max = 600;
        let spec = WorkloadSpec::poisson(50.0, 60.0, d.clone(), d, 1);
        for r in generate(&spec).unwrap() {
            assert!((16..=600).contains(&r.input_len));
        }
    }

    #[test]
    fn uniform_arrivals_are_evenly_spaced() {
        let spec = WorkloadSpec {
            kind: WorkloadKind::Poisson(PoissonSegment {
                rps: 4.0,
                duration_s: 2.0,
                input: LengthDist::fixed(10),
                output: LengthDist::fixed(10),
                arrival: ArrivalProcess::Uniform,
            }),
            seed: 0,
        };
        let reqs = generate(&spec).unwrap();
        let times: Vec<_> = reqs.iter().map(|r| r.arrival_ms).collect();
        assert_eq!(times, [250.0, 500.0, 750.0, 1000.0, 1250.0, 1500.0, 1750.0]);
    }

    #[test]
    fn trace_parsing() {
        let p = Path::new("t.jsonl");
        let text = r#"{"arrival_ms": 20.0, "input_len": 5, "output_len": 3}
{"arrival_ms": 10.0, "input_len": 7, "output_len": 2}

{"arrival_ms": 30.0, "input_len": 1, "output_len": 1}
"#;
        let reqs = parse_trace(text, p).unwrap();
        assert_eq!(reqs.len(), 3);
        assert_eq!(reqs[0].input_len, 7);
        assert!(reqs.windows(2).all(|w| w[0].arrival_ms <= w[1].arrival_ms));

        let bad = "{\"arrival_ms\": 1, \"input_len\": 5, \"output_len\": 0}\n";
        let err = parse_trace(bad, p).unwrap_err().to_string();
        assert!(err.starts_with("t.jsonl:1"), "{err}");
        let neg = "{\"arrival_ms\": 1, \"input_len\": 5, \"output_len\": 2}\n{\"arrival_ms\": 1, \"input_len\": -5, \"output_len\": 2}\n";
        let err = parse_trace(neg, p).unwrap_err().to_string();
        assert!(err.starts_with("t.jsonl:2"), "{err}");
        let junk = "not json\n";
        assert!(parse_trace(junk, p).is_err());
    }

    #[test]
    fn trace_write_then_read() {
        let reqs = generate(&lmsys_like(3.0, 10.0, 1)).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &reqs).unwrap();
        let back = parse_trace(std::str::from_utf8(&buf).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, reqs);
    }

    #[test]
    fn phased_segments_are_contiguous() {
        let seg = |rps| PoissonSegment {
            rps,
            duration_s: 10.0,
            input: LengthDist::fixed(100),
            output: LengthDist::fixed(10),
            arrival: ArrivalProcess::Poisson,
        };
        let spec = WorkloadSpec {
            kind: WorkloadKind::Phased {
                segments: vec![seg(5.0), seg(20.0)],
            },
            seed: 2,
        };
        assert_eq!(
            spec.segment_bounds_ms(),
            [(0.0, 10_000.0), (10_000.0, 20_000.0)]
        );
        let reqs = generate(&spec).unwrap();
        assert!(reqs.windows(2).all(|w| w[0].arrival_ms <= w[1].arrival_ms));
        assert!(reqs.iter().all(|r| r.arrival_ms < 20_000.0));
        assert!(reqs.iter().any(|r| r.arrival_ms >= 10_000.0));
    }

    #[test]
    fn spec_json_shape() {
        let text = r#"{"kind":"poisson","rps":2,"duration_s":5,"seed":9,
            "input":{"family":"fixed","mean":10},"output":{"family":"log_normal_truncated","mean":20,"std":5}}"#;
        let spec: WorkloadSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.seed, 9);
        assert!(matches!(spec.kind, WorkloadKind::Poisson(_)));
    }
}
