// SPDX-License-Identifier: Apache-2.0

//! Calibration bundle: latency predictors plus power parameters, with the
//! on-disk JSON document and the profile CSV format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{
    fit_itl, fit_ttft_tiled, ItlCell, ItlCoeffs, ItlModel, PrefillTiling, ProfileSample,
    TileConfig, TtftCoeffs, TtftModel,
};
use crate::power::{PhasePower, PowerParams};
use crate::types::{FrequencyLadder, FrequencyMHz, PhaseKind};

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;
pub const PROFILE_CSV_HEADER: &str = "phase,freq_mhz,n_bt,n_req,n_kv,latency_ms";

/// Levels covered by the shipped calibration: the five-level control ladder
/// plus two lower levels so frequency sweeps can see both sides of 1005 MHz.
pub const DEFAULT_CALIBRATION_LEVELS: [u32; 7] = [810, 905, 1005, 1095, 1200, 1305, 1410];
pub const DEFAULT_MAX_TILE: u32 = 7;

/// Reference generator behind the shipped coefficients.
///
/// Prefill cost scales as `1/f`. Decode splits into a compute part
/// (per-request cost plus the per-tile staircase step) that scales as `1/f`
/// and a memory part (KV traffic plus fixed overhead) that scales as
/// `(1/f)^memory_exponent`. Below `f_base` every coefficient is further
/// multiplied by `(f_base/f)^knee_exponent`: clocks that low also starve the
/// memory side, so latency grows faster than the core clock drops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceShape {
    pub f_base: FrequencyMHz,
    pub prefill_per_token_ms: f64,
    pub prefill_intercept_ms: f64,
    pub decode_per_request_ms: f64,
    pub decode_per_kv_token_ms: f64,
    pub decode_intercept_ms: f64,
    pub decode_tile_step_ms: f64,
    pub memory_exponent: f64,
    pub knee_exponent: f64,
}

impl Default for ReferenceShape {
    fn default() -> Self {
        ReferenceShape {
            f_base: FrequencyMHz::new(1005).expect("non-zero"),
            prefill_per_token_ms: 0.24,
            prefill_intercept_ms: 12.0,
            decode_per_request_ms: 0.07,
            decode_per_kv_token_ms: 0.0002,
            decode_intercept_ms: 24.0,
            decode_tile_step_ms: 10.0,
            memory_exponent: 0.1,
            knee_exponent: 2.0,
        }
    }
}

impl ReferenceShape {
    fn ratio(&self, f: FrequencyMHz) -> f64 {
        self.f_base.as_f64() / f.as_f64()
    }

    fn knee(&self, f: FrequencyMHz) -> f64 {
        let r = self.ratio(f);
        if r > 1.0 {
            r.powf(self.knee_exponent)
        } else {
            1.0
        }
    }

    pub fn ttft(&self, f: FrequencyMHz) -> TtftCoeffs {
        let r = self.ratio(f) * self.knee(f);
        TtftCoeffs {
            per_token_ms: self.prefill_per_token_ms * r,
            intercept_ms: self.prefill_intercept_ms * r,
        }
    }

    pub fn itl(&self, f: FrequencyMHz, tile: u32) -> ItlCoeffs {
        let k = self.knee(f);
        let r = self.ratio(f);
        let rm = r.powf(self.memory_exponent) * k;
        let r = r * k;
        ItlCoeffs {
            per_request_ms: self.decode_per_request_ms * r,
            per_kv_token_ms: self.decode_per_kv_token_ms * rm,
            intercept_ms: self.decode_intercept_ms * rm
                + self.decode_tile_step_ms * f64::from(tile) * r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub ladder: FrequencyLadder,
    pub tile: TileConfig,
    pub ttft: TtftModel,
    pub itl: ItlModel,
    pub power: PowerParams,
    pub notes: Vec<String>,
}

impl Calibration {
    pub fn from_reference(levels: &FrequencyLadder, shape: &ReferenceShape, max_tile: u32) -> Self {
        let mut ttft = TtftModel::new();
        let mut itl = ItlModel::new();
        for &f in levels.levels() {
            ttft.insert(f, shape.ttft(f));
            for tile in 0..=max_tile {
                itl.insert(
                    f,
                    tile,
                    ItlCell {
                        coeffs: shape.itl(f, tile),
                        mae_ms: None,
                        inherited: false,
                    },
                );
            }
        }
        Calibration {
            ladder: levels.clone(),
            tile: TileConfig {
                tile_step_ms: shape.decode_tile_step_ms,
                ..TileConfig::default()
            },
            ttft,
            itl,
            power: default_power(),
            notes: default_notes(),
        }
    }

    /// Verifies that every level of `ladder` has TTFT and ITL coefficients.
    pub fn covers(&self, ladder: &FrequencyLadder) -> Result<()> {
        self.ttft.covers(ladder)?;
        self.itl.covers(ladder)
    }

    pub fn predict_ttft(&self, f: FrequencyMHz, n_bt: u64) -> Result<f64> {
        self.ttft.predict(f, n_bt)
    }

    pub fn predict_itl(&self, f: FrequencyMHz, n_req: u64, n_kv: u64) -> Result<f64> {
        self.itl.predict(f, n_req, n_kv, &self.tile)
    }

    pub fn to_document(&self) -> CalibrationDocument {
        CalibrationDocument {
            schema_version: CALIBRATION_SCHEMA_VERSION,
            ladder: self.ladder.clone(),
            tile: self.tile,
            ttft: self
                .ttft
                .base()
                .map(|(f, c)| TtftEntry {
                    freq_mhz: f,
                    per_token_ms: c.per_token_ms,
                    intercept_ms: c.intercept_ms,
                    mae_ms: self.ttft.mae(f),
                })
                .collect(),
            ttft_tiles: self
                .ttft
                .tile_cells()
                .map(|(f, tile, c)| TtftTileEntry {
                    freq_mhz: f,
                    tile,
                    per_token_ms: c.per_token_ms,
                    intercept_ms: c.intercept_ms,
                })
                .collect(),
            itl: self
                .itl
                .cells()
                .map(|(f, tile, cell)| ItlEntry {
                    freq_mhz: f,
                    tile,
                    per_request_ms: cell.coeffs.per_request_ms,
                    per_kv_token_ms: cell.coeffs.per_kv_token_ms,
                    intercept_ms: cell.coeffs.intercept_ms,
                    mae_ms: cell.mae_ms,
                    inherited: cell.inherited,
                })
                .collect(),
            power: self.power,
            notes: self.notes.clone(),
        }
    }

    pub fn from_document(doc: CalibrationDocument) -> Result<Self> {
        if doc.schema_version != CALIBRATION_SCHEMA_VERSION {
            return Err(Error::Calibration(format!(
                "unsupported calibration schema_version {} (expected {CALIBRATION_SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        doc.tile.validate()?;
        doc.power.validate()?;
        let mut ttft = TtftModel::new();
        for e in &doc.ttft {
            ttft.insert(
                e.freq_mhz,
                TtftCoeffs {
                    per_token_ms: e.per_token_ms,
                    intercept_ms: e.intercept_ms,
                },
            );
            if let Some(mae) = e.mae_ms {
                ttft.set_mae(e.freq_mhz, mae);
            }
        }
        if doc.tile.prefill_tiling_enabled {
            ttft.set_tiling(Some(PrefillTiling {
                tile_width: doc.tile.tile_width,
                cutoff: doc.tile.prefill_tile_cutoff,
            }));
            for e in &doc.ttft_tiles {
                ttft.insert_tile(
                    e.freq_mhz,
                    e.tile,
                    TtftCoeffs {
                        per_token_ms: e.per_token_ms,
                        intercept_ms: e.intercept_ms,
                    },
                );
            }
        }
        let mut itl = ItlModel::new();
        for e in &doc.itl {
            itl.insert(
                e.freq_mhz,
                e.tile,
                ItlCell {
                    coeffs: ItlCoeffs {
                        per_request_ms: e.per_request_ms,
                        per_kv_token_ms: e.per_kv_token_ms,
                        intercept_ms: e.intercept_ms,
                    },
                    mae_ms: e.mae_ms,
                    inherited: e.inherited,
                },
            );
        }
        let cal = Calibration {
            ladder: doc.ladder,
            tile: doc.tile,
            ttft,
            itl,
            power: doc.power,
            notes: doc.notes,
        };
        cal.covers(&cal.ladder)?;
        Ok(cal)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("calibration serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CalibrationDocument =
            serde_json::from_str(text).map_err(|e| Error::json("calibration", e))?;
        Self::from_document(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: CalibrationDocument =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        Self::from_document(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Fits TTFT and ITL models from profile samples; power parameters are
    /// carried over unchanged.
    pub fn fit(
        samples: &[ProfileSample],
        ladder: &FrequencyLadder,
        tile: &TileConfig,
        power: PowerParams,
    ) -> Result<(Self, Vec<String>)> {
        let ttft = fit_ttft_tiled(samples, ladder, tile)?;
        let itl = fit_itl(samples, ladder, tile)?;
        let mut warnings = ttft.warnings;
        warnings.extend(itl.warnings);
        let cal = Calibration {
            ladder: ladder.clone(),
            tile: *tile,
            ttft: ttft.model,
            itl: itl.model,
            power,
            notes: vec![format!("fitted from {} profile samples", samples.len())],
        };
        Ok((cal, warnings))
    }
}

impl Default for Calibration {
    fn default() -> Self {
        let levels = FrequencyLadder::from_mhz(&DEFAULT_CALIBRATION_LEVELS)
            .expect("static levels are valid");
        Calibration::from_reference(&levels, &ReferenceShape::default(), DEFAULT_MAX_TILE)
    }
}

fn default_power() -> PowerParams {
    PowerParams {
        prefill: PhasePower {
            phase_scale: 1.15,
            u_half: 1024.0,
        },
        decode: PhasePower {
            phase_scale: 0.7,
            u_half: 16.0,
        },
        ..PowerParams::default()
    }
}

fn default_notes() -> Vec<String> {
    vec![
        "latency: prefill cost scales as 1/f; decode compute part (0.07 ms per request and a 10 ms step per 128-request tile at 1005 MHz) scales as 1/f, memory part (0.0002 ms per KV token, 24 ms intercept) as (1/f)^0.1".into(),
        "latency: below 1005 MHz all coefficients pick up an extra factor (1005/f)^2".into(),
        "power: prefill phase_scale 1.15 so saturated prefill reaches the 400 W TDP by 1305 MHz: 60 + 1.15*340*(1305/1410)^1.5 = 408 W (363 W at phase_scale 1.0); at 1200 MHz it stays below TDP (367 W)".into(),
        "power: decode u_half 16 instead of 64 so an instance running a few dozen requests draws most of its dynamic power; at 64 idle power dominates and no clock setting changes decode energy much".into(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDocument {
    pub schema_version: u32,
    pub ladder: FrequencyLadder,
    pub tile: TileConfig,
    pub ttft: Vec<TtftEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ttft_tiles: Vec<TtftTileEntry>,
    pub itl: Vec<ItlEntry>,
    pub power: PowerParams,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtftEntry {
    pub freq_mhz: FrequencyMHz,
    pub per_token_ms: f64,
    pub intercept_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtftTileEntry {
    pub freq_mhz: FrequencyMHz,
    pub tile: u32,
    pub per_token_ms: f64,
    pub intercept_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItlEntry {
    pub freq_mhz: FrequencyMHz,
    pub tile: u32,
    pub per_request_ms: f64,
    pub per_kv_token_ms: f64,
    pub intercept_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae_ms: Option<f64>,
    #[serde(default)]
    pub inherited: bool,
}

pub fn read_profile_csv(path: &Path) -> Result<Vec<ProfileSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_profile_csv(file, path)
}

pub fn parse_profile_csv<R: std::io::Read>(reader: R, path: &Path) -> Result<Vec<ProfileSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let ingest = |line: usize, message: String| Error::Ingest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = rdr
        .headers()
        .map_err(|e| ingest(1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != PROFILE_CSV_HEADER {
        return Err(ingest(
            1,
            format!("expected header `{PROFILE_CSV_HEADER}`, found `{header}`"),
        ));
    }
    let mut out = Vec::new();
    for record in rdr.deserialize::<ProfileSample>() {
        let line_of = |e: &csv::Error| e.position().map(|p| p.line() as usize).unwrap_or(0);
        let sample = record.map_err(|e| ingest(line_of(&e), e.to_string()))?;
        if !(sample.observed_latency_ms > 0.0 && sample.observed_latency_ms.is_finite()) {
            return Err(ingest(
                out.len() + 2,
                format!("latency_ms must be > 0, got {}", sample.observed_latency_ms),
            ));
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_profile_csv(path: &Path, samples: &[ProfileSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for s in samples {
        w.serialize(s).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Synthetic profile drawn from `cal` over a load grid, with optional
/// multiplicative lognormal noise. Decode points vary KV per request so the
/// design matrix of every tile is full rank.
pub fn synthesize_profile(
    cal: &Calibration,
    ladder: &FrequencyLadder,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<ProfileSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = LogNormal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::validation("noise_sigma", e.to_string()))?;
    let mut draw = |v: f64| {
        if noise_sigma > 0.0 {
            v * noise.sample(&mut rng)
        } else {
            v
        }
    };
    let width = u64::from(cal.tile.tile_width);
    let mut out = Vec::new();
    for &f in ladder.levels() {
        for n_bt in (64..=8192u64).step_by(64) {
            let latency = draw(cal.predict_ttft(f, n_bt)?);
            out.push(ProfileSample {
                phase: PhaseKind::Prefill,
                freq: f,
                n_bt,
                n_req: n_bt.div_ceil(512),
                n_kv: n_bt,
                observed_latency_ms: latency,
            });
        }
        for tile in 0..=u64::from(cal.itl.max_tile()) {
            for step in 0..8u64 {
                let n_req = tile * width + 1 + step * (width - 1) / 7;
                for kv_per_req in [120u64, 300, 700, 1500] {
                    let n_kv = n_req * kv_per_req + step * 37;
                    let latency = draw(cal.predict_itl(f, n_req, n_kv)?);
                    out.push(ProfileSample {
                        phase: PhaseKind::Decode,
                        freq: f,
                        n_bt: n_req,
                        n_req,
                        n_kv,
                        observed_latency_ms: latency,
                    });
                }
            }
        }
    }
    Ok(out)
}
