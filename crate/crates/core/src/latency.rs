// SPDX-License-Identifier: Apache-2.0

//! Linear latency predictors.
//!
//! Prefill execution time is affine in the batched token count. Decode
//! iteration time is affine in the running request count and the resident KV
//! token count, with a separate coefficient triple per batch-size tile so the
//! wave-quantization staircase is captured. Both are keyed by frequency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FrequencyLadder, FrequencyMHz, PhaseKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileConfig {
    pub tile_width: u32,
    pub prefill_tiling_enabled: bool,
    /// Above this many batched tokens prefill is treated as a single tile.
    pub prefill_tile_cutoff: u64,
    /// Step added per tile when a decode tile has no profile data and
    /// inherits from the nearest lower tile.
    pub tile_step_ms: f64,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            tile_width: 128,
            prefill_tiling_enabled: false,
            prefill_tile_cutoff: 2000,
            tile_step_ms: 15.0,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_width == 0 {
            return Err(Error::validation("tile.tile_width", "must be > 0"));
        }
        if self.prefill_tile_cutoff < u64::from(self.tile_width) {
            return Err(Error::validation(
                "tile.prefill_tile_cutoff",
                "must be >= tile_width",
            ));
        }
        if !(self.tile_step_ms >= 0.0 && self.tile_step_ms.is_finite()) {
            return Err(Error::validation("tile.tile_step_ms", "must be >= 0"));
        }
        Ok(())
    }
}

/// `floor((n - 1) / width)`; a load of zero has no tile.
pub fn tile_index(n: u64, cfg: &TileConfig) -> Result<u32> {
    if n == 0 {
        return Err(Error::Contract("tile_index requires a load >= 1".into()));
    }
    Ok(((n - 1) / u64::from(cfg.tile_width)) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtftCoeffs {
    pub per_token_ms: f64,
    pub intercept_ms: f64,
}

impl TtftCoeffs {
    pub fn eval(&self, n_bt: u64) -> f64 {
        self.per_token_ms * n_bt as f64 + self.intercept_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItlCoeffs {
    pub per_request_ms: f64,
    pub per_kv_token_ms: f64,
    pub intercept_ms: f64,
}

impl ItlCoeffs {
    pub fn eval(&self, n_req: u64, n_kv: u64) -> f64 {
        self.per_request_ms * n_req as f64 + self.per_kv_token_ms * n_kv as f64 + self.intercept_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillTiling {
    pub tile_width: u32,
    pub cutoff: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TtftModel {
    base: BTreeMap<FrequencyMHz, TtftCoeffs>,
    tiles: BTreeMap<(FrequencyMHz, u32), TtftCoeffs>,
    tiling: Option<PrefillTiling>,
    mae_ms: BTreeMap<FrequencyMHz, f64>,
}

impl TtftModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, f: FrequencyMHz, coeffs: TtftCoeffs) {
        self.base.insert(f, coeffs);
    }

    pub fn insert_tile(&mut self, f: FrequencyMHz, tile: u32, coeffs: TtftCoeffs) {
        self.tiles.insert((f, tile), coeffs);
    }

    pub fn set_tiling(&mut self, tiling: Option<PrefillTiling>) {
        self.tiling = tiling;
    }

    pub fn tiling(&self) -> Option<PrefillTiling> {
        self.tiling
    }

    pub fn set_mae(&mut self, f: FrequencyMHz, mae: f64) {
        self.mae_ms.insert(f, mae);
    }

    pub fn coeffs(&self, f: FrequencyMHz) -> Option<TtftCoeffs> {
        self.base.get(&f).copied()
    }

    pub fn base(&self) -> impl Iterator<Item = (FrequencyMHz, TtftCoeffs)> + '_ {
        self.base.iter().map(|(f, c)| (*f, *c))
    }

    pub fn tile_cells(&self) -> impl Iterator<Item = (FrequencyMHz, u32, TtftCoeffs)> + '_ {
        self.tiles.iter().map(|((f, t), c)| (*f, *t, *c))
    }

    pub fn mae(&self, f: FrequencyMHz) -> Option<f64> {
        self.mae_ms.get(&f).copied()
    }

    pub fn frequencies(&self) -> impl Iterator<Item = FrequencyMHz> + '_ {
        self.base.keys().copied()
    }

    pub fn covers(&self, ladder: &FrequencyLadder) -> Result<()> {
        match ladder.levels().iter().find(|f| !self.base.contains_key(f)) {
            Some(f) => Err(Error::Coverage(*f)),
            None => Ok(()),
        }
    }

    /// Predicted prefill execution time for a batch of `n_bt` tokens.
    pub fn predict(&self, f: FrequencyMHz, n_bt: u64) -> Result<f64> {
        if n_bt == 0 {
            return Err(Error::Contract("predict_ttft requires n_bt >= 1".into()));
        }
        let base = self.base.get(&f).ok_or(Error::Coverage(f))?;
        if let Some(tiling) = self.tiling {
            if n_bt <= tiling.cutoff {
                let tile = ((n_bt - 1) / u64::from(tiling.tile_width)) as u32;
                if let Some(c) = self.tiles.get(&(f, tile)) {
                    return Ok(c.eval(n_bt));
                }
            }
        }
        Ok(base.eval(n_bt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItlCell {
    pub coeffs: ItlCoeffs,
    /// Residual MAE of the fit; `None` for inherited cells.
    pub mae_ms: Option<f64>,
    pub inherited: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ItlModel {
    cells: BTreeMap<(FrequencyMHz, u32), ItlCell>,
    max_tile: u32,
}

impl ItlModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, f: FrequencyMHz, tile: u32, cell: ItlCell) {
        self.max_tile = self.max_tile.max(tile);
        self.cells.insert((f, tile), cell);
    }

    pub fn max_tile(&self) -> u32 {
        self.max_tile
    }

    pub fn cell(&self, f: FrequencyMHz, tile: u32) -> Option<&ItlCell> {
        self.cells.get(&(f, tile))
    }

    pub fn cells(&self) -> impl Iterator<Item = (FrequencyMHz, u32, &ItlCell)> + '_ {
        self.cells.iter().map(|((f, t), c)| (*f, *t, c))
    }

    pub fn frequencies(&self) -> Vec<FrequencyMHz> {
        let mut fs: Vec<_> = self.cells.keys().map(|(f, _)| *f).collect();
        fs.dedup();
        fs
    }

    pub fn covers(&self, ladder: &FrequencyLadder) -> Result<()> {
        for &f in ladder.levels() {
            for tile in 0..=self.max_tile {
                if !self.cells.contains_key(&(f, tile)) {
                    return Err(Error::Coverage(f));
                }
            }
        }
        Ok(())
    }

    /// Predicted decode iteration time. Tiles past `max_tile` reuse the
    /// highest calibrated tile.
    pub fn predict(&self, f: FrequencyMHz, n_req: u64, n_kv: u64, cfg: &TileConfig) -> Result<f64> {
        if n_kv < n_req {
            return Err(Error::Contract(format!(
                "predict_itl requires n_kv >= n_req (n_req={n_req}, n_kv={n_kv})"
            )));
        }
        let tile = tile_index(n_req, cfg)?.min(self.max_tile);
        let cell = self.cells.get(&(f, tile)).ok_or(Error::Coverage(f))?;
        Ok(cell.coeffs.eval(n_req, n_kv))
    }
}

pub fn predict_ttft(model: &TtftModel, f: FrequencyMHz, n_bt: u64) -> Result<f64> {
    model.predict(f, n_bt)
}

pub fn predict_itl(
    model: &ItlModel,
    f: FrequencyMHz,
    n_req: u64,
    n_kv: u64,
    cfg: &TileConfig,
) -> Result<f64> {
    model.predict(f, n_req, n_kv, cfg)
}

/// One profiled engine iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub phase: PhaseKind,
    #[serde(rename = "freq_mhz")]
    pub freq: FrequencyMHz,
    pub n_bt: u64,
    pub n_req: u64,
    pub n_kv: u64,
    #[serde(rename = "latency_ms")]
    pub observed_latency_ms: f64,
}

/// A fitted model plus any sanity warnings raised while fitting.
#[derive(Debug, Clone)]
pub struct Fitted<M> {
    pub model: M,
    pub warnings: Vec<String>,
}

fn fit_line(points: &[(f64, f64)]) -> Option<TtftCoeffs> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(TtftCoeffs {
        per_token_ms: slope,
        intercept_ms: my - slope * mx,
    })
}

/// (n_req, n_kv, latency)
type PlanePoint = (f64, f64, f64);

fn fit_plane(points: &[PlanePoint]) -> Option<ItlCoeffs> {
    let n = points.len() as f64;
    let m1 = points.iter().map(|p| p.0).sum::<f64>() / n;
    let m2 = points.iter().map(|p| p.1).sum::<f64>() / n;
    let my = points.iter().map(|p| p.2).sum::<f64>() / n;
    let (mut s11, mut s12, mut s22, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x1, x2, y) in points {
        let (d1, d2, dy) = (x1 - m1, x2 - m2, y - my);
        s11 += d1 * d1;
        s12 += d1 * d2;
        s22 += d2 * d2;
        s1y += d1 * dy;
        s2y += d2 * dy;
    }
    let det = s11 * s22 - s12 * s12;
    if s11 <= 0.0 || s22 <= 0.0 || det <= 1e-10 * s11 * s22 {
        return None;
    }
    let a = (s1y * s22 - s2y * s12) / det;
    let b = (s2y * s11 - s1y * s12) / det;
    Some(ItlCoeffs {
        per_request_ms: a,
        per_kv_token_ms: b,
        intercept_ms: my - a * m1 - b * m2,
    })
}

fn mean_abs(iter: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = iter.fold((0.0, 0usize), |(s, n), e| (s + e.abs(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Single-tile least-squares TTFT fit, one line per ladder frequency.
pub fn fit_ttft(samples: &[ProfileSample], ladder: &FrequencyLadder) -> Result<Fitted<TtftModel>> {
    fit_ttft_tiled(samples, ladder, &TileConfig::default())
}

/// TTFT fit; with prefill tiling enabled, batches at or below the cutoff
/// also get per-tile lines where the profile has enough distinct points.
pub fn fit_ttft_tiled(
    samples: &[ProfileSample],
    ladder: &FrequencyLadder,
    cfg: &TileConfig,
) -> Result<Fitted<TtftModel>> {
    cfg.validate()?;
    let mut by_freq: BTreeMap<FrequencyMHz, Vec<(f64, f64)>> = BTreeMap::new();
    let mut by_tile: BTreeMap<(FrequencyMHz, u32), Vec<(f64, f64)>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.phase == PhaseKind::Prefill) {
        if s.n_bt == 0 {
            continue;
        }
        let point = (s.n_bt as f64, s.observed_latency_ms);
        by_freq.entry(s.freq).or_default().push(point);
        if cfg.prefill_tiling_enabled && s.n_bt <= cfg.prefill_tile_cutoff {
            let tile = tile_index(s.n_bt, cfg)?;
            by_tile.entry((s.freq, tile)).or_default().push(point);
        }
    }

    let mut model = TtftModel::new();
    for &f in ladder.levels() {
        let points = by_freq.get(&f).map(Vec::as_slice).unwrap_or_default();
        if points.len() < 2 {
            return Err(Error::Calibration(format!(
                "prefill profile at {f} MHz has {} samples, need >= 2 with distinct n_bt",
                points.len()
            )));
        }
        let coeffs = fit_line(points).ok_or_else(|| {
            Error::Calibration(format!("prefill profile at {f} MHz has constant n_bt"))
        })?;
        model.set_mae(
            f,
            mean_abs(
                points
                    .iter()
                    .map(|&(x, y)| y - (coeffs.per_token_ms * x + coeffs.intercept_ms)),
            ),
        );
        model.insert(f, coeffs);
    }

    if cfg.prefill_tiling_enabled {
        model.set_tiling(Some(PrefillTiling {
            tile_width: cfg.tile_width,
            cutoff: cfg.prefill_tile_cutoff,
        }));
        for (&(f, tile), points) in &by_tile {
            if !ladder.contains(f) {
                continue;
            }
            // Sparse tiles fall back to the frequency's base line.
            if let Some(c) = fit_line(points) {
                model.insert_tile(f, tile, c);
            }
        }
    }

    let mut warnings = Vec::new();
    for pair in ladder.levels().windows(2) {
        let (lo, hi) = (model.base[&pair[0]], model.base[&pair[1]]);
        if hi.per_token_ms > lo.per_token_ms {
            warnings.push(format!(
                "prefill per-token cost rises from {} MHz ({:.5} ms) to {} MHz ({:.5} ms)",
                pair[0], lo.per_token_ms, pair[1], hi.per_token_ms
            ));
        }
        if hi.per_token_ms <= 0.0 || lo.per_token_ms <= 0.0 {
            warnings.push(format!(
                "non-positive prefill per-token cost near {} MHz",
                pair[0]
            ));
        }
        if hi.intercept_ms > lo.intercept_ms && hi.per_token_ms >= lo.per_token_ms {
            warnings.push(format!(
                "prefill prediction at {} MHz exceeds {} MHz everywhere",
                pair[1], pair[0]
            ));
        }
    }
    Ok(Fitted { model, warnings })
}

/// Per-(frequency, tile) least-squares ITL fit. Tiles with no samples
/// inherit the nearest lower tile plus `cfg.tile_step_ms` per missing step.
pub fn fit_itl(
    samples: &[ProfileSample],
    ladder: &FrequencyLadder,
    cfg: &TileConfig,
) -> Result<Fitted<ItlModel>> {
    cfg.validate()?;
    let mut cells: BTreeMap<(FrequencyMHz, u32), Vec<PlanePoint>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.phase == PhaseKind::Decode) {
        let tile = tile_index(s.n_req, cfg).map_err(|_| {
            Error::Calibration(format!("decode sample at {} MHz has n_req = 0", s.freq))
        })?;
        cells.entry((s.freq, tile)).or_default().push((
            s.n_req as f64,
            s.n_kv as f64,
            s.observed_latency_ms,
        ));
    }

    let max_tile = cells
        .keys()
        .filter(|(f, _)| ladder.contains(*f))
        .map(|(_, t)| *t)
        .max()
        .ok_or_else(|| Error::Calibration("no decode samples for any ladder frequency".into()))?;

    let mut model = ItlModel::new();
    for &f in ladder.levels() {
        let mut last: Option<ItlCoeffs> = None;
        for tile in 0..=max_tile {
            let cell = match cells.get(&(f, tile)) {
                Some(points) => {
                    if points.len() < 3 {
                        return Err(Error::Calibration(format!(
                            "decode cell ({f} MHz, tile {tile}) has {} samples, need >= 3",
                            points.len()
                        )));
                    }
                    let c = fit_plane(points).ok_or_else(|| {
                        Error::Calibration(format!(
                            "decode cell ({f} MHz, tile {tile}) has collinear (n_req, n_kv) samples"
                        ))
                    })?;
                    let mae = mean_abs(points.iter().map(|&(x1, x2, y)| {
                        y - (c.per_request_ms * x1 + c.per_kv_token_ms * x2 + c.intercept_ms)
                    }));
                    ItlCell {
                        coeffs: c,
                        mae_ms: Some(mae),
                        inherited: false,
                    }
                }
                None => {
                    let below = last.ok_or_else(|| {
                        Error::Calibration(format!(
                            "decode profile has no samples at {f} MHz, tile 0"
                        ))
                    })?;
                    ItlCell {
                        coeffs: ItlCoeffs {
                            intercept_ms: below.intercept_ms + cfg.tile_step_ms,
                            ..below
                        },
                        mae_ms: None,
                        inherited: true,
                    }
                }
            };
            last = Some(cell.coeffs);
            model.insert(f, tile, cell);
        }
    }

    let mut warnings = Vec::new();
    for pair in ladder.levels().windows(2) {
        for tile in 0..=max_tile {
            let lo = model.cells[&(pair[0], tile)].coeffs;
            let hi = model.cells[&(pair[1], tile)].coeffs;
            let Some(points) = cells
                .get(&(pair[1], tile))
                .or_else(|| cells.get(&(pair[0], tile)))
            else {
                continue;
            };
            let violated = points.iter().any(|&(x1, x2, _)| {
                let at =
                    |c: ItlCoeffs| c.per_request_ms * x1 + c.per_kv_token_ms * x2 + c.intercept_ms;
                at(hi) > at(lo) + 1e-9
            });
            if violated {
                warnings.push(format!(
                    "decode tile {tile}: prediction at {} MHz exceeds {} MHz on profiled loads",
                    pair[1], pair[0]
                ));
            }
        }
    }
    for (&(f, tile), cell) in &model.cells {
        if cell.coeffs.per_request_ms <= 0.0 || cell.coeffs.per_kv_token_ms < 0.0 {
            warnings.push(format!(
                "decode cell ({f} MHz, tile {tile}) has a non-positive load coefficient"
            ));
        }
    }
    Ok(Fitted { model, warnings })
}
