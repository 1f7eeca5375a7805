//! Tropical-cyclone eye tracking on lat-lon field sequences, and track
//! position error scoring.
//!
//! The tracker iterates from an initial position: at each step it searches a
//! continuation disc around the previous fix for mean-sea-level-pressure
//! local minima, accepts the lowest one passing the criteria (signed 850 hPa
//! vorticity, thickness when extratropical, 10 m wind when over land), and
//! terminates when nothing acceptable remains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldio::{FieldSeries, FieldTensor, GridSpec};
use crate::meshgraph::geo::{great_circle_km, LatLon};

/// Earth radius in meters for the vorticity stencil.
const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Signed 850 hPa relative vorticity threshold, s⁻¹.
    pub vorticity_threshold: f64,
    /// Criteria disc radius around a candidate fix, km.
    pub search_radius_km: f64,
    /// Continuation disc radius around the previous fix, km.
    pub continuation_radius_km: f64,
    /// 10 m wind threshold over land, m/s.
    pub wind_threshold: f64,
    /// Forecast step interval, hours.
    pub step_hours: f64,
    /// |lat| beyond which the cyclone counts as extratropical.
    pub extratropical_lat: f64,
    /// Optional minimum on the thickness local maximum; `None` accepts any
    /// local maximum inside the disc.
    pub thickness_threshold: Option<f64>,
    /// Row-major `[H·W]` land mask; `None` means all ocean (wind criterion
    /// disabled).
    pub land_mask: Option<Vec<bool>>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            vorticity_threshold: 5e-5,
            search_radius_km: 278.0,
            continuation_radius_km: 445.0,
            wind_threshold: 8.0,
            step_hours: 6.0,
            extratropical_lat: 30.0,
            thickness_threshold: None,
            land_mask: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    EndOfData,
    CriteriaFailed,
    NoMinimum,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Fix {
    pub step: usize,
    pub lat: f64,
    pub lon: f64,
    pub mslp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycloneTrack {
    pub fixes: Vec<Fix>,
    pub termination: Termination,
}

/// Relative vorticity ζ = (1/(R cosφ))·(∂v/∂λ − ∂(u cosφ)/∂φ) on the grid,
/// centered differences with longitude wrap and one-sided stencils at the
/// polar rows. Returns row-major `[H·W]` in s⁻¹.
pub fn relative_vorticity(u: &[f64], v: &[f64], h: usize, w: usize, grid: GridSpec) -> Vec<f64> {
    assert_eq!(u.len(), h * w);
    assert_eq!(v.len(), h * w);
    let dlon = grid.dlon.to_radians();
    let dlat = grid.dlat.to_radians();
    let cos_lat: Vec<f64> = (0..h).map(|i| grid.lat(i).to_radians().cos()).collect();
    let mut zeta = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let jp = (j + 1) % w;
            let jm = (j + w - 1) % w;
            let dv_dlon = (v[i * w + jp] - v[i * w + jm]) / (2.0 * dlon);
            let ucos = |row: usize| u[row * w + j] * cos_lat[row];
            let ducos_dlat = if i == 0 {
                (ucos(1) - ucos(0)) / dlat
            } else if i == h - 1 {
                (ucos(h - 1) - ucos(h - 2)) / dlat
            } else {
                (ucos(i + 1) - ucos(i - 1)) / (2.0 * dlat)
            };
            zeta[i * w + j] = (dv_dlon - ducos_dlat) / (EARTH_RADIUS_M * cos_lat[i]);
        }
    }
    zeta
}

fn cell_latlon(grid: GridSpec, i: usize, j: usize) -> LatLon {
    LatLon::new(grid.lat(i).clamp(-90.0, 90.0), grid.lon(j))
}

/// Grid cells within `radius_km` of `center`.
fn cells_in_disc(
    h: usize,
    w: usize,
    grid: GridSpec,
    center: LatLon,
    radius_km: f64,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if great_circle_km(cell_latlon(grid, i, j), center) <= radius_km {
                out.push((i, j));
            }
        }
    }
    out
}

/// Is `(i, j)` an 8-neighbor local minimum? Polar rows are excluded (all
/// eight neighbors must exist; longitude wraps).
fn is_local_min(values: &[f64], h: usize, w: usize, i: usize, j: usize) -> bool {
    if i == 0 || i == h - 1 {
        return false;
    }
    let v = values[i * w + j];
    for di in [-1i64, 0, 1] {
        for dj in [-1i64, 0, 1] {
            if di == 0 && dj == 0 {
                continue;
            }
            let ni = (i as i64 + di) as usize;
            let nj = ((j as i64 + dj).rem_euclid(w as i64)) as usize;
            if values[ni * w + nj] < v {
                return false;
            }
        }
    }
    true
}

fn is_local_max(values: &[f64], h: usize, w: usize, i: usize, j: usize) -> bool {
    if i == 0 || i == h - 1 {
        return false;
    }
    let v = values[i * w + j];
    for di in [-1i64, 0, 1] {
        for dj in [-1i64, 0, 1] {
            if di == 0 && dj == 0 {
                continue;
            }
            let ni = (i as i64 + di) as usize;
            let nj = ((j as i64 + dj).rem_euclid(w as i64)) as usize;
            if values[ni * w + nj] > v {
                return false;
            }
        }
    }
    true
}

/// All MSLP local minima inside the disc, sorted by value then row-major
/// index (the deterministic tie-break).
pub fn local_minima_in_disc(
    mslp: &[f64],
    h: usize,
    w: usize,
    grid: GridSpec,
    center: LatLon,
    radius_km: f64,
) -> Vec<(usize, usize, f64)> {
    let mut mins: Vec<(usize, usize, f64)> = cells_in_disc(h, w, grid, center, radius_km)
        .into_iter()
        .filter(|&(i, j)| is_local_min(mslp, h, w, i, j))
        .map(|(i, j)| (i, j, mslp[i * w + j]))
        .collect();
    mins.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    mins
}

/// Lowest MSLP local minimum within the disc, if any.
pub fn local_min_mslp(
    mslp: &[f64],
    h: usize,
    w: usize,
    grid: GridSpec,
    center: LatLon,
    radius_km: f64,
) -> Option<(LatLon, f64)> {
    local_minima_in_disc(mslp, h, w, grid, center, radius_km)
        .first()
        .map(|&(i, j, v)| (cell_latlon(grid, i, j), v))
}

/// Channel indices the tracker needs, resolved by name once per series.
struct TrackerChannels {
    mslp: usize,
    u850: usize,
    v850: usize,
    u10: usize,
    v10: usize,
    z850: usize,
    z200: usize,
}

impl TrackerChannels {
    fn resolve(series: &FieldSeries) -> Result<Self> {
        let find = |name: &str| {
            series.channel_index(name).ok_or_else(|| {
                Error::InvalidArgument(format!("tracker input is missing channel `{name}`"))
            })
        };
        Ok(TrackerChannels {
            mslp: find("mslp")?,
            u850: find("u850")?,
            v850: find("v850")?,
            u10: find("u10")?,
            v10: find("v10")?,
            z850: find("z850")?,
            z200: find("z200")?,
        })
    }
}

/// Criteria evaluation for one candidate fix.
fn passes_criteria(
    field: &FieldTensor,
    ch: &TrackerChannels,
    zeta: &[f64],
    candidate: LatLon,
    cfg: &TrackerConfig,
) -> bool {
    let (h, w, grid) = (field.h, field.w, field.grid);
    let disc = cells_in_disc(h, w, grid, candidate, cfg.search_radius_km);

    // Hemisphere-signed vorticity: cyclonic is positive north, negative
    // south of the equator.
    let vort_ok = if candidate.lat >= 0.0 {
        disc.iter()
            .map(|&(i, j)| zeta[i * w + j])
            .fold(f64::NEG_INFINITY, f64::max)
            > cfg.vorticity_threshold
    } else {
        disc.iter()
            .map(|&(i, j)| zeta[i * w + j])
            .fold(f64::INFINITY, f64::min)
            < -cfg.vorticity_threshold
    };
    if !vort_ok {
        return false;
    }

    if candidate.lat.abs() > cfg.extratropical_lat {
        let thickness: Vec<f64> = (0..h * w)
            .map(|k| field.channel(ch.z850)[k] - field.channel(ch.z200)[k])
            .collect();
        let has_max = disc.iter().any(|&(i, j)| {
            is_local_max(&thickness, h, w, i, j)
                && cfg
                    .thickness_threshold
                    .is_none_or(|t| thickness[i * w + j] >= t)
        });
        if !has_max {
            return false;
        }
    }

    if let Some(mask) = &cfg.land_mask {
        let nearest_i = ((candidate.lat - grid.lat0) / grid.dlat).round() as usize;
        let nearest_j = ((candidate.lon - grid.lon0) / grid.dlon).rem_euclid(w as f64) as usize;
        if mask[nearest_i.min(h - 1) * w + nearest_j] {
            let max_wind = disc
                .iter()
                .map(|&(i, j)| {
                    let u = field.channel(ch.u10)[i * w + j];
                    let v = field.channel(ch.v10)[i * w + j];
                    (u * u + v * v).sqrt()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if max_wind <= cfg.wind_threshold {
                return false;
            }
        }
    }
    true
}

/// Track a cyclone through `series` starting from `init` at `start_step`.
pub fn track_cyclone(
    series: &FieldSeries,
    init: LatLon,
    start_step: usize,
    cfg: &TrackerConfig,
) -> Result<CycloneTrack> {
    if series.is_empty() || start_step >= series.len() {
        return Err(Error::InvalidArgument(format!(
            "start step {start_step} outside the {}-step sequence",
            series.len()
        )));
    }
    let ch = TrackerChannels::resolve(series)?;
    let first = &series.steps[start_step];
    if init.lat.abs() > 90.0 - first.grid.dlat {
        return Err(Error::InvalidArgument(
            "initial position is off the trackable grid interior".into(),
        ));
    }
    if let Some(mask) = &cfg.land_mask {
        if mask.len() != first.h * first.w {
            return Err(Error::InvalidArgument("land mask shape mismatch".into()));
        }
    }

    let mut fixes = Vec::new();
    let mut termination = Termination::EndOfData;
    let mut previous = init;
    for step in start_step..series.len() {
        let field = &series.steps[step];
        let (h, w, grid) = (field.h, field.w, field.grid);
        let zeta = relative_vorticity(field.channel(ch.u850), field.channel(ch.v850), h, w, grid);
        let candidates =
            local_minima_in_disc(field.channel(ch.mslp), h, w, grid, previous, cfg.continuation_radius_km);
        if candidates.is_empty() {
            termination = Termination::NoMinimum;
            break;
        }
        let mut accepted = None;
        for &(i, j, value) in &candidates {
            let pos = cell_latlon(grid, i, j);
            if passes_criteria(field, &ch, &zeta, pos, cfg) {
                accepted = Some(Fix {
                    step,
                    lat: pos.lat,
                    lon: pos.lon,
                    mslp: value,
                });
                break;
            }
        }
        match accepted {
            Some(fix) => {
                previous = LatLon::new(fix.lat, fix.lon);
                fixes.push(fix);
            }
            None => {
                termination = Termination::CriteriaFailed;
                break;
            }
        }
    }
    Ok(CycloneTrack { fixes, termination })
}

/// Mean great-circle distance over steps present in both tracks; `None`
/// when they share no step.
pub fn track_position_error(a: &CycloneTrack, b: &CycloneTrack) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for fa in &a.fixes {
        if let Some(fb) = b.fixes.iter().find(|f| f.step == fa.step) {
            total += great_circle_km(
                LatLon::new(fa.lat, fa.lon),
                LatLon::new(fb.lat, fb.lon),
            );
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some(total / count as f64)
    }
}
