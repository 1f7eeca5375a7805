//! Synthetic spherical dynamics for training and verification.
//!
//! Two generators:
//!
//! * [`AdvectionSystem`] — smooth random multi-harmonic fields advected by a
//!   rotating zonal flow with scale-selective diffusion and a stationary
//!   stochastic innovation, evolved in closed form on spectral coefficients.
//!   Because the state lives in coefficients, the same trajectory can be
//!   evaluated on any grid resolution consistently.
//! * [`VortexScenario`] — a translating Rankine-style cyclone with the full
//!   tracker channel set (mslp, 850 hPa winds, 10 m winds, geopotentials).

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::fieldio::{FieldSeries, FieldTensor, GridSpec};
use crate::meshgraph::geo::{great_circle_km, LatLon};
use crate::rng::substream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvectParams {
    pub channels: usize,
    /// Zonal wavenumbers 1..=max_zonal_mode.
    pub max_zonal_mode: usize,
    /// Latitudinal structure functions per zonal mode.
    pub lat_modes: usize,
    /// Solid-body rotation, radians of longitude per step.
    pub rotation: f64,
    /// Diffusion strength: mode (m, p) is damped by exp(−ν·(m² + p²)) each
    /// step.
    pub diffusion: f64,
    /// Innovation scale: 1 keeps each mode variance stationary, 0 makes the
    /// dynamics deterministic.
    pub innovation: f64,
    /// Overall field amplitude.
    pub amplitude: f64,
}

impl Default for AdvectParams {
    fn default() -> Self {
        AdvectParams {
            channels: 4,
            max_zonal_mode: 5,
            lat_modes: 3,
            rotation: 0.15,
            diffusion: 0.01,
            innovation: 1.0,
            amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Mode {
    channel: usize,
    m: usize,
    p: usize,
    /// cos/sin coefficients of the zonal harmonic.
    a: f64,
    b: f64,
    /// Phase of the latitudinal structure function.
    theta: f64,
    /// Stationary standard deviation of each coefficient.
    sigma: f64,
}

impl Mode {
    fn damping(&self, nu: f64) -> f64 {
        (-nu * (self.m * self.m + self.p * self.p) as f64).exp()
    }

    /// Latitudinal structure: smooth, vanishing at the poles.
    fn lat_basis(&self, lat_rad: f64) -> f64 {
        lat_rad.cos() * (self.p as f64 * lat_rad + self.theta).cos()
    }
}

/// Closed-form spectral state of the advection–diffusion dynamics.
#[derive(Debug, Clone)]
pub struct AdvectionSystem {
    pub params: AdvectParams,
    modes: Vec<Mode>,
    rng: ChaCha12Rng,
}

impl AdvectionSystem {
    pub fn new(params: AdvectParams, seed: u64) -> Self {
        let mut init_rng = substream(seed, "data/init");
        let rng = substream(seed, "data/innovation");
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut modes = Vec::new();
        for channel in 0..params.channels {
            for m in 1..=params.max_zonal_mode {
                for p in 1..=params.lat_modes {
                    let sigma = params.amplitude
                        / (1.0 + (m * m + p * p) as f64).powf(0.75);
                    modes.push(Mode {
                        channel,
                        m,
                        p,
                        a: sigma * normal.sample(&mut init_rng),
                        b: sigma * normal.sample(&mut init_rng),
                        theta: init_rng.gen_range(0.0..std::f64::consts::TAU),
                        sigma,
                    });
                }
            }
        }
        AdvectionSystem { params, modes, rng }
    }

    /// Advance one step: rotate each zonal harmonic, damp by scale, and
    /// inject the stationary innovation.
    pub fn step(&mut self) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let omega = self.params.rotation;
        let nu = self.params.diffusion;
        let inn = self.params.innovation;
        for mode in &mut self.modes {
            let angle = mode.m as f64 * omega;
            let (sin, cos) = angle.sin_cos();
            let (a, b) = (mode.a, mode.b);
            let d = mode.damping(nu);
            mode.a = d * (a * cos - b * sin);
            mode.b = d * (a * sin + b * cos);
            if inn > 0.0 {
                let eps = mode.sigma * (1.0 - d * d).max(0.0).sqrt() * inn;
                mode.a += eps * normal.sample(&mut self.rng);
                mode.b += eps * normal.sample(&mut self.rng);
            }
        }
    }

    /// Evaluate the current state on an arbitrary grid registration.
    pub fn eval_on(&self, h: usize, w: usize, grid: GridSpec) -> FieldTensor {
        let mut field = FieldTensor::zeros(self.params.channels, h, w, grid);
        let lats: Vec<f64> = (0..h).map(|i| grid.lat(i).to_radians()).collect();
        let lons: Vec<f64> = (0..w).map(|j| grid.lon(j).to_radians()).collect();
        for mode in &self.modes {
            let lat_vals: Vec<f64> = lats.iter().map(|&l| mode.lat_basis(l)).collect();
            for (i, &lv) in lat_vals.iter().enumerate() {
                if lv == 0.0 {
                    continue;
                }
                for (j, &lon) in lons.iter().enumerate() {
                    let ml = mode.m as f64 * lon;
                    let v = lv * (mode.a * ml.cos() + mode.b * ml.sin());
                    let cur = field.get(mode.channel, i, j);
                    field.set(mode.channel, i, j, cur + v);
                }
            }
        }
        field
    }

    /// Evaluate on the global `h × w` equiangular grid.
    pub fn eval(&self, h: usize, w: usize) -> FieldTensor {
        self.eval_on(h, w, GridSpec::global(h, w))
    }
}

fn advect_channel_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("ch{i}")).collect()
}

/// Generate a `[T, C, H, W]` advection series on the global grid.
pub fn generate_advection(
    params: AdvectParams,
    seed: u64,
    h: usize,
    w: usize,
    steps: usize,
) -> FieldSeries {
    let channels = advect_channel_names(params.channels);
    let mut system = AdvectionSystem::new(params, seed);
    let mut fields = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            system.step();
        }
        fields.push(system.eval(h, w));
    }
    FieldSeries::new(channels, fields)
}

/// Generate the same trajectory at two resolutions (coarse global and fine
/// global); used by the nested-grid experiments.
pub fn generate_advection_two_res(
    params: AdvectParams,
    seed: u64,
    h: usize,
    w: usize,
    refine: usize,
    steps: usize,
) -> (FieldSeries, FieldSeries) {
    let channels = advect_channel_names(params.channels);
    let mut system = AdvectionSystem::new(params, seed);
    let mut coarse = Vec::with_capacity(steps);
    let mut fine = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            system.step();
        }
        coarse.push(system.eval(h, w));
        fine.push(system.eval(h * refine, w * refine));
    }
    (
        FieldSeries::new(channels.clone(), coarse),
        FieldSeries::new(channels, fine),
    )
}

/// Channel order of the tracker scenario.
pub const VORTEX_CHANNELS: [&str; 7] = ["mslp", "u850", "v850", "u10", "v10", "z850", "z200"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VortexParams {
    pub start: LatLon,
    /// Longitude cells travelled per step (exactly cell-aligned when 1).
    pub cells_per_step: f64,
    /// Central pressure depression, hPa.
    pub depth: f64,
    /// Pressure/thermal signature radius, km.
    pub sigma_km: f64,
    /// Peak tangential wind, m/s.
    pub vmax: f64,
    /// Radius of maximum wind, km.
    pub rmax_km: f64,
    /// After this step the cyclone collapses to a weak stationary dimple
    /// with no circulation (used to exercise tracker termination).
    pub remove_after: Option<usize>,
}

impl Default for VortexParams {
    fn default() -> Self {
        VortexParams {
            start: LatLon::new(16.5, -150.0),
            cells_per_step: 1.0,
            depth: 35.0,
            sigma_km: 500.0,
            vmax: 30.0,
            rmax_km: 350.0,
            remove_after: None,
        }
    }
}

/// Deterministic translating-vortex scenario.
#[derive(Debug, Clone)]
pub struct VortexScenario {
    pub params: VortexParams,
    pub h: usize,
    pub w: usize,
}

impl VortexScenario {
    pub fn new(params: VortexParams, h: usize, w: usize) -> Self {
        VortexScenario { params, h, w }
    }

    /// Analytic cyclone center at a step.
    pub fn center(&self, step: usize) -> LatLon {
        let grid = GridSpec::global(self.h, self.w);
        let stopped = self.params.remove_after.map_or(step, |r| step.min(r));
        let lon = self.params.start.lon + stopped as f64 * self.params.cells_per_step * grid.dlon;
        LatLon::new(self.params.start.lat, lon)
    }

    fn active(&self, step: usize) -> bool {
        self.params.remove_after.is_none_or(|r| step <= r)
    }

    pub fn eval(&self, step: usize) -> FieldTensor {
        let grid = GridSpec::global(self.h, self.w);
        let mut f = FieldTensor::zeros(7, self.h, self.w, grid);
        let center = self.center(step);
        let active = self.active(step);
        let p = &self.params;
        let (depth, vmax) = if active { (p.depth, p.vmax) } else { (0.4, 0.0) };
        for i in 0..self.h {
            let lat = grid.lat(i);
            for j in 0..self.w {
                let lon = grid.lon(j);
                let here = LatLon::new(lat, lon);
                let d = great_circle_km(here, center);
                let gauss = (-d * d / (2.0 * p.sigma_km * p.sigma_km)).exp();
                // Rankine profile: solid-body core, 1/r decay outside.
                let vt = if d <= p.rmax_km {
                    vmax * d / p.rmax_km
                } else {
                    vmax * p.rmax_km / d
                };
                // Local tangent direction for a counterclockwise circulation.
                let mut dlon_deg = lon - center.lon;
                if dlon_deg > 180.0 {
                    dlon_deg -= 360.0;
                }
                if dlon_deg < -180.0 {
                    dlon_deg += 360.0;
                }
                let dx = dlon_deg.to_radians() * center.lat.to_radians().cos();
                let dy = (lat - center.lat).to_radians();
                let norm = (dx * dx + dy * dy).sqrt().max(1e-12);
                let (u, v) = (-vt * dy / norm, vt * dx / norm);
                f.set(0, i, j, 1013.0 - depth * gauss);
                f.set(1, i, j, u);
                f.set(2, i, j, v);
                f.set(3, i, j, 0.8 * u);
                f.set(4, i, j, 0.8 * v);
                // Warm core: thickness z850 − z200 peaks at the center.
                f.set(5, i, j, 1500.0 - 40.0 * gauss);
                f.set(6, i, j, 11800.0 - 150.0 * gauss);
            }
        }
        f
    }

    pub fn generate(&self, steps: usize) -> FieldSeries {
        let fields = (0..steps).map(|t| self.eval(t)).collect();
        FieldSeries::new(
            VORTEX_CHANNELS.iter().map(|s| s.to_string()).collect(),
            fields,
        )
    }
}
