//! Nested-grid regional coupling: extract global forecasts over a window,
//! upsample them to the regional resolution, and feed them alongside the
//! regional state into a regional model. Three coupling modes: full nesting
//! (interior + boundary-inclusive forcing), boundary forcing only, and no
//! forcing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldio::{FieldTensor, GridSpec};
use crate::meshgraph::{build_graph_from_nodes, EarthGraph, GraphConfig, LatLon, RegionBox};
use crate::network::{forward, GraphTensors, Model};
use crate::tensorcore::{ParamStore, Real, Tensor2};

/// Row/column window into a global grid, with a boundary width (grid
/// points) and a per-axis refinement factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionWindow {
    /// Inclusive row range (south to north).
    pub row0: usize,
    pub row1: usize,
    /// Inclusive column range; `col0 > col1` wraps across the antimeridian.
    pub col0: usize,
    pub col1: usize,
    pub boundary_width: usize,
    pub refine: usize,
}

impl RegionWindow {
    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self, w_global: usize) -> usize {
        if self.col0 <= self.col1 {
            self.col1 - self.col0 + 1
        } else {
            w_global - self.col0 + self.col1 + 1
        }
    }

    pub fn validate(&self, h_global: usize, w_global: usize) -> Result<()> {
        if self.row1 < self.row0 || self.row1 >= h_global {
            return Err(Error::InvalidArgument(format!(
                "window rows {}..={} do not fit a {h_global}-row grid",
                self.row0, self.row1
            )));
        }
        if self.col0 >= w_global || self.col1 >= w_global {
            return Err(Error::InvalidArgument("window columns out of range".into()));
        }
        if self.refine == 0 {
            return Err(Error::InvalidArgument("refine factor must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Does the boundary-expanded window get clamped at a pole?
    pub fn clamps_poles(&self, h_global: usize) -> bool {
        self.row0 < self.boundary_width || self.row1 + self.boundary_width >= h_global
    }

    /// Fine cell-center coordinates of the window on the `refine`-times
    /// finer global grid, row-major.
    pub fn fine_latlons(&self, h_global: usize, w_global: usize) -> Vec<LatLon> {
        let fine = GridSpec::global(h_global * self.refine, w_global * self.refine);
        let mut out = Vec::new();
        for i in self.row0 * self.refine..(self.row1 + 1) * self.refine {
            let mut cols: Vec<usize> = Vec::new();
            if self.col0 <= self.col1 {
                cols.extend(self.col0 * self.refine..(self.col1 + 1) * self.refine);
            } else {
                cols.extend(self.col0 * self.refine..w_global * self.refine);
                cols.extend(0..(self.col1 + 1) * self.refine);
            }
            for j in cols {
                out.push(LatLon::new(fine.lat(i), fine.lon(j)));
            }
        }
        out
    }

    /// Registration of the fine regional grid (longitude taken from the
    /// window start, monotone even across the seam).
    pub fn fine_grid_spec(&self, h_global: usize, w_global: usize) -> GridSpec {
        let fine = GridSpec::global(h_global * self.refine, w_global * self.refine);
        GridSpec {
            lat0: fine.lat(self.row0 * self.refine),
            dlat: fine.dlat,
            lon0: fine.lon(self.col0 * self.refine),
            dlon: fine.dlon,
        }
    }
}

/// Coupling mode of the regional model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NestMode {
    Nng,
    BoundaryForcing,
    NoForcing,
}

impl NestMode {
    /// Input channels of the regional model as a multiple of the physical
    /// channel count.
    pub fn input_channel_factor(&self) -> usize {
        match self {
            NestMode::Nng => 3,
            NestMode::BoundaryForcing => 2,
            NestMode::NoForcing => 1,
        }
    }
}

/// Slice a window out of a global field. With `include_boundary` the window
/// grows by `boundary_width` on every side: columns wrap in longitude, rows
/// clamp at the poles (clamping duplicates the polar row; check
/// [`RegionWindow::clamps_poles`]).
pub fn extract_region(
    field: &FieldTensor,
    window: &RegionWindow,
    include_boundary: bool,
) -> Result<FieldTensor> {
    window.validate(field.h, field.w)?;
    let b = if include_boundary {
        window.boundary_width as i64
    } else {
        0
    };
    let rows: Vec<usize> = (window.row0 as i64 - b..=window.row1 as i64 + b)
        .map(|r| r.clamp(0, field.h as i64 - 1) as usize)
        .collect();
    let mut cols: Vec<usize> = Vec::new();
    let width = window.width(field.w) as i64;
    for k in -b..width + b {
        cols.push((window.col0 as i64 + k).rem_euclid(field.w as i64) as usize);
    }
    let grid = GridSpec {
        lat0: field.grid.lat(window.row0) - b as f64 * field.grid.dlat,
        dlat: field.grid.dlat,
        lon0: field.grid.lon(window.col0) - b as f64 * field.grid.dlon,
        dlon: field.grid.dlon,
    };
    let mut out = FieldTensor::zeros(field.c, rows.len(), cols.len(), grid);
    for c in 0..field.c {
        for (oi, &i) in rows.iter().enumerate() {
            for (oj, &j) in cols.iter().enumerate() {
                out.set(c, oi, oj, field.get(c, i, j));
            }
        }
    }
    Ok(out)
}

/// Bilinear upsampling by an integer factor in lat-lon index space, with
/// linear extrapolation at the edges so affine fields stay exactly affine.
pub fn upsample_bilinear(coarse: &FieldTensor, refine: usize) -> FieldTensor {
    assert!(refine >= 1);
    if refine == 1 {
        return coarse.clone();
    }
    let (h, w) = (coarse.h, coarse.w);
    let (hf, wf) = (h * refine, w * refine);
    let grid = GridSpec {
        lat0: coarse.grid.lat0 - coarse.grid.dlat / 2.0 + coarse.grid.dlat / (2.0 * refine as f64),
        dlat: coarse.grid.dlat / refine as f64,
        lon0: coarse.grid.lon0 - coarse.grid.dlon / 2.0 + coarse.grid.dlon / (2.0 * refine as f64),
        dlon: coarse.grid.dlon / refine as f64,
    };
    let stencil = |x: f64, n: usize| -> (usize, f64) {
        if n == 1 {
            return (0, 0.0);
        }
        let i0 = (x.floor() as i64).clamp(0, n as i64 - 2) as usize;
        (i0, x - i0 as f64)
    };
    let mut out = FieldTensor::zeros(coarse.c, hf, wf, grid);
    for c in 0..coarse.c {
        for fi in 0..hf {
            let x = (fi as f64 + 0.5) / refine as f64 - 0.5;
            let (i0, tx) = stencil(x, h);
            let i1 = (i0 + 1).min(h - 1);
            for fj in 0..wf {
                let y = (fj as f64 + 0.5) / refine as f64 - 0.5;
                let (j0, ty) = stencil(y, w);
                let j1 = (j0 + 1).min(w - 1);
                let v00 = coarse.get(c, i0, j0);
                let v01 = coarse.get(c, i0, j1);
                let v10 = coarse.get(c, i1, j0);
                let v11 = coarse.get(c, i1, j1);
                let v0 = v00 + (v01 - v00) * ty;
                let v1 = v10 + (v11 - v10) * ty;
                out.set(c, fi, fj, v0 + (v1 - v0) * tx);
            }
        }
    }
    out
}

fn crop_margin(field: &FieldTensor, margin: usize) -> FieldTensor {
    assert!(field.h > 2 * margin && field.w > 2 * margin);
    let grid = GridSpec {
        lat0: field.grid.lat(margin),
        dlat: field.grid.dlat,
        lon0: field.grid.lon(margin),
        dlon: field.grid.dlon,
    };
    let mut out = FieldTensor::zeros(field.c, field.h - 2 * margin, field.w - 2 * margin, grid);
    for c in 0..field.c {
        for i in 0..out.h {
            for j in 0..out.w {
                out.set(c, i, j, field.get(c, i + margin, j + margin));
            }
        }
    }
    out
}

/// Stack fields channel-wise (shapes must match; grid taken from the last).
pub fn concat_channels(parts: &[&FieldTensor]) -> FieldTensor {
    assert!(!parts.is_empty());
    let (h, w) = (parts[0].h, parts[0].w);
    let c_total: usize = parts.iter().map(|p| p.c).sum();
    let mut out = FieldTensor::zeros(c_total, h, w, parts[parts.len() - 1].grid);
    let mut offset = 0;
    for p in parts {
        assert_eq!((p.h, p.w), (h, w), "channel concat needs equal shapes");
        out.data[offset * h * w..(offset + p.c) * h * w].copy_from_slice(&p.data);
        offset += p.c;
    }
    out
}

/// The two forcing channel groups derived from a global forecast at t+1:
/// the upsampled interior window, and the upsampled boundary-inclusive
/// window cropped back to the region frame.
pub fn forcing_channels(
    global_next: &FieldTensor,
    window: &RegionWindow,
) -> Result<(FieldTensor, FieldTensor)> {
    let interior = extract_region(global_next, window, false)?;
    let up_interior = upsample_bilinear(&interior, window.refine);
    let with_boundary = extract_region(global_next, window, true)?;
    let up_boundary = upsample_bilinear(&with_boundary, window.refine);
    let cropped = crop_margin(&up_boundary, window.boundary_width * window.refine);
    assert_eq!((cropped.h, cropped.w), (up_interior.h, up_interior.w));
    Ok((up_interior, cropped))
}

/// Zero out everything but a rim of `rim` cells around the field edge.
pub fn mask_to_rim(field: &FieldTensor, rim: usize) -> FieldTensor {
    let mut out = field.clone();
    for c in 0..out.c {
        for i in rim..out.h.saturating_sub(rim) {
            for j in rim..out.w.saturating_sub(rim) {
                out.set(c, i, j, 0.0);
            }
        }
    }
    out
}

/// Assemble the regional model input for a mode: forcing channel groups
/// first (interior, then boundary-inclusive), regional state last.
///
/// Boundary-forcing mode keeps only the rim of the boundary-derived group
/// (width `boundary_width · refine` fine cells); the interior is masked so
/// the mode genuinely sees lateral boundary information and nothing more.
pub fn regional_input(
    mode: NestMode,
    forcing: Option<(&FieldTensor, &FieldTensor)>,
    z_region: &FieldTensor,
    window: &RegionWindow,
) -> FieldTensor {
    match mode {
        NestMode::NoForcing => z_region.clone(),
        NestMode::BoundaryForcing => {
            let (_, boundary) = forcing.expect("boundary forcing needs a global forecast");
            let rim = window.boundary_width * window.refine;
            concat_channels(&[&mask_to_rim(boundary, rim), z_region])
        }
        NestMode::Nng => {
            let (interior, boundary) = forcing.expect("nesting needs a global forecast");
            concat_channels(&[interior, boundary, z_region])
        }
    }
}

/// One regional step driven by an already-computed global forecast at t+1.
/// All fields are in normalized units; the output is the regional state at
/// t+1 on the window's fine grid.
pub fn nng_step<T: Real>(
    regional: (&Model, &ParamStore<T>, &GraphTensors<T>),
    global_next: Option<&FieldTensor>,
    z_region: &FieldTensor,
    window: &RegionWindow,
    mode: NestMode,
) -> Result<FieldTensor> {
    let (model, store, gt) = regional;
    let forcing = match (mode, global_next) {
        (NestMode::NoForcing, _) => None,
        (_, Some(g)) => Some(forcing_channels(g, window)?),
        (_, None) => {
            return Err(Error::InvalidArgument(
                "this coupling mode needs a global forecast".into(),
            ))
        }
    };
    let input = regional_input(mode, forcing.as_ref().map(|(a, b)| (a, b)), z_region, window);
    let expected_c = model.config.n_channels;
    if input.c != expected_c {
        return Err(Error::shape(
            "nng_step",
            format!(
                "regional model expects {expected_c} input channels, assembled input has {}",
                input.c
            ),
        ));
    }
    if z_region.c != model.config.resolved_out_channels() {
        return Err(Error::shape(
            "nng_step",
            format!(
                "regional state has {} channels, model outputs {}",
                z_region.c,
                model.config.resolved_out_channels()
            ),
        ));
    }
    let input_nodes: Tensor2<T> = input.to_node_matrix();
    let out = forward(model, store, gt, &input_nodes)?;
    Ok(FieldTensor::from_node_matrix(
        &out,
        z_region.h,
        z_region.w,
        z_region.grid,
    ))
}

/// Where the per-step global forecasts come from during a nested rollout.
pub enum GlobalDrive<'a, T: Real> {
    /// Roll the global model forward from an initial normalized state.
    Model {
        global: (&'a Model, &'a ParamStore<T>, &'a GraphTensors<T>),
        z0: FieldTensor,
        h: usize,
        w: usize,
    },
    /// Use a precomputed normalized coarse sequence; entry `t` is the
    /// global state at step t+1.
    Sequence(&'a [FieldTensor]),
}

/// Autoregressive nested rollout: the regional state feeds back on itself
/// while the global side advances by its own rollout (or a supplied
/// sequence).
pub fn nng_rollout<T: Real>(
    regional: (&Model, &ParamStore<T>, &GraphTensors<T>),
    drive: GlobalDrive<'_, T>,
    z_region0: &FieldTensor,
    window: &RegionWindow,
    mode: NestMode,
    steps: usize,
) -> Result<Vec<FieldTensor>> {
    let mut region = z_region0.clone();
    let mut out = Vec::with_capacity(steps);
    match drive {
        GlobalDrive::Sequence(seq) => {
            if matches!(mode, NestMode::Nng | NestMode::BoundaryForcing) && seq.len() < steps {
                return Err(Error::InvalidArgument(format!(
                    "global sequence has {} entries, rollout needs {steps}",
                    seq.len()
                )));
            }
            for t in 0..steps {
                let global_next = seq.get(t);
                region = nng_step(regional, global_next, &region, window, mode)?;
                out.push(region.clone());
            }
        }
        GlobalDrive::Model { global, z0, h, w } => {
            let (gm, gs, ggt) = global;
            let mut gstate: Tensor2<T> = z0.to_node_matrix();
            for _ in 0..steps {
                gstate = forward(gm, gs, ggt, &gstate)?;
                let gfield = FieldTensor::from_node_matrix(&gstate, h, w, z0.grid);
                region = nng_step(regional, Some(&gfield), &region, window, mode)?;
                out.push(region.clone());
            }
        }
    }
    Ok(out)
}

/// Build the regional graph: grid nodes are the window's fine cell centers,
/// the mesh is a global icosphere at `mesh_level`.
pub fn build_regional_graph(
    h_global: usize,
    w_global: usize,
    window: &RegionWindow,
    mesh_level: u32,
) -> Result<EarthGraph> {
    window.validate(h_global, w_global)?;
    let nodes = window.fine_latlons(h_global, w_global);
    let config = GraphConfig::new(
        window.height() * window.refine,
        window.width(w_global) * window.refine,
        mesh_level,
        Vec::<RegionBox>::new(),
    );
    build_graph_from_nodes(config, nodes)
}

/// Training pairs for a regional model: inputs assembled per mode with the
/// coarse truth at t+1 standing in for the global forecast, targets the
/// fine window truth at t+1. All fields normalized by the caller.
pub fn regional_training_pairs<T: Real>(
    coarse_norm: &[FieldTensor],
    fine_window_norm: &[FieldTensor],
    window: &RegionWindow,
    mode: NestMode,
    range: std::ops::Range<usize>,
) -> Result<Vec<(Tensor2<T>, Tensor2<T>)>> {
    assert_eq!(coarse_norm.len(), fine_window_norm.len());
    assert!(range.end < coarse_norm.len());
    let mut pairs = Vec::new();
    for t in range {
        let forcing = if matches!(mode, NestMode::NoForcing) {
            None
        } else {
            Some(forcing_channels(&coarse_norm[t + 1], window)?)
        };
        let input = regional_input(
            mode,
            forcing.as_ref().map(|(a, b)| (a, b)),
            &fine_window_norm[t],
            window,
        );
        pairs.push((
            input.to_node_matrix::<T>(),
            fine_window_norm[t + 1].to_node_matrix::<T>(),
        ));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Messaging, NetworkConfig};
    use crate::rng::substream;
    use crate::tensorcore::ParamStore;

    fn labeled_field(c: usize, h: usize, w: usize) -> FieldTensor {
        let mut f = FieldTensor::zeros(c, h, w, GridSpec::global(h, w));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    f.set(ch, i, j, (ch * 1_000_000 + i * 1000 + j) as f64);
                }
            }
        }
        f
    }

    fn window(row0: usize, row1: usize, col0: usize, col1: usize) -> RegionWindow {
        RegionWindow {
            row0,
            row1,
            col0,
            col1,
            boundary_width: 2,
            refine: 2,
        }
    }

    #[test]
    fn extract_without_boundary_is_plain_slice() {
        let f = labeled_field(2, 10, 20);
        let w = window(3, 6, 5, 8);
        let got = extract_region(&f, &w, false).unwrap();
        assert_eq!((got.h, got.w), (4, 4));
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(got.get(c, i, j), f.get(c, 3 + i, 5 + j));
                }
            }
        }
    }

    #[test]
    fn boundary_expansion_shapes_and_values() {
        let f = labeled_field(1, 10, 20);
        let w = window(3, 6, 5, 8);
        let got = extract_region(&f, &w, true).unwrap();
        assert_eq!((got.h, got.w), (8, 8), "4×4 window + width 2 → 8×8");
        assert_eq!(got.get(0, 0, 0), f.get(0, 1, 3));
        assert_eq!(got.get(0, 7, 7), f.get(0, 8, 10));
    }

    #[test]
    fn longitude_seam_wraps() {
        let f = labeled_field(1, 10, 20);
        // Window hugging the seam: columns 18..=1 (wraps).
        let w = RegionWindow {
            row0: 4,
            row1: 6,
            col0: 18,
            col1: 1,
            boundary_width: 1,
            refine: 1,
        };
        let got = extract_region(&f, &w, true).unwrap();
        assert_eq!((got.h, got.w), (5, 6));
        // Index-arithmetic oracle on the labeled ramp.
        let expect_cols = [17usize, 18, 19, 0, 1, 2];
        for (oj, &j) in expect_cols.iter().enumerate() {
            assert_eq!(got.get(0, 0, oj), f.get(0, 3, j));
        }
    }

    #[test]
    fn window_taller_than_grid_is_rejected() {
        let f = labeled_field(1, 6, 12);
        let w = window(2, 9, 0, 3);
        assert!(extract_region(&f, &w, false).is_err());
    }

    #[test]
    fn pole_clamping_flags_and_duplicates() {
        let f = labeled_field(1, 6, 12);
        let w = RegionWindow {
            row0: 0,
            row1: 2,
            col0: 3,
            col1: 6,
            boundary_width: 2,
            refine: 1,
        };
        assert!(w.clamps_poles(6));
        let got = extract_region(&f, &w, true).unwrap();
        // Rows below the south pole clamp to row 0.
        assert_eq!(got.get(0, 0, 2), f.get(0, 0, 3));
        assert_eq!(got.get(0, 1, 2), f.get(0, 0, 3));
        assert_eq!(got.get(0, 2, 2), f.get(0, 0, 3));
    }

    #[test]
    fn upsample_identities() {
        let f = labeled_field(1, 4, 6);
        assert_eq!(upsample_bilinear(&f, 1), f);

        let mut constant = FieldTensor::zeros(2, 3, 5, GridSpec::global(3, 5));
        for v in &mut constant.data {
            *v = 2.5;
        }
        let up = upsample_bilinear(&constant, 3);
        assert_eq!((up.h, up.w), (9, 15));
        assert!(up.data.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn upsample_preserves_affine_ramps_exactly() {
        let (h, w) = (4, 6);
        let mut f = FieldTensor::zeros(1, h, w, GridSpec::global(h, w));
        for i in 0..h {
            for j in 0..w {
                f.set(0, i, j, 3.0 * j as f64 - 1.5 * i as f64 + 0.25);
            }
        }
        let r = 2;
        let up = upsample_bilinear(&f, r);
        for fi in 0..h * r {
            let x = (fi as f64 + 0.5) / r as f64 - 0.5;
            for fj in 0..w * r {
                let y = (fj as f64 + 0.5) / r as f64 - 0.5;
                let expect = 3.0 * y - 1.5 * x + 0.25;
                assert!(
                    (up.get(0, fi, fj) - expect).abs() < 1e-12,
                    "({fi},{fj}): {} vs {expect}",
                    up.get(0, fi, fj)
                );
            }
        }
    }

    #[test]
    fn upsample_reproduces_aligned_coarse_points() {
        let f = labeled_field(1, 3, 4);
        let up = upsample_bilinear(&f, 3);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(up.get(0, 3 * i + 1, 3 * j + 1), f.get(0, i, j));
            }
        }
    }

    fn regional_setup(
        mode: NestMode,
    ) -> (
        Model,
        ParamStore<f64>,
        GraphTensors<f64>,
        RegionWindow,
        FieldTensor,
        FieldTensor,
    ) {
        let (hg, wg) = (8, 16);
        let w = RegionWindow {
            row0: 3,
            row1: 4,
            col0: 5,
            col1: 7,
            boundary_width: 2,
            refine: 2,
        };
        let graph = build_regional_graph(hg, wg, &w, 1).unwrap();
        let gt = GraphTensors::new(&graph);
        let c = 2;
        let cfg = NetworkConfig {
            latent_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            gate_dim: 0,
            gate_hidden: 8,
            attn_hidden: 8,
            n_channels: c * mode.input_channel_factor(),
            out_channels: c,
            messaging: Messaging::Gated,
        };
        let mut store = ParamStore::new();
        let mut rng = substream(5, "init");
        let model = Model::build(cfg, &mut store, &mut rng).unwrap();

        let mut global = FieldTensor::zeros(c, hg, wg, GridSpec::global(hg, wg));
        let mut rng2 = substream(6, "field");
        for v in &mut global.data {
            *v = rand::Rng::gen_range(&mut rng2, -1.0..1.0);
        }
        let region_grid = w.fine_grid_spec(hg, wg);
        let mut region = FieldTensor::zeros(c, w.height() * 2, w.width(wg) * 2, region_grid);
        for v in &mut region.data {
            *v = rand::Rng::gen_range(&mut rng2, -1.0..1.0);
        }
        (model, store, gt, w, global, region)
    }

    #[test]
    fn sentinel_constant_rides_the_forcing_channels() {
        let (_, _, _, w, mut global, region) = regional_setup(NestMode::Nng);
        for v in &mut global.data {
            *v = 7.25;
        }
        let (f1, f2) = forcing_channels(&global, &w).unwrap();
        let input = regional_input(NestMode::Nng, Some((&f1, &f2)), &region, &w);
        assert_eq!(input.c, 3 * region.c);
        // The first 2C channels are exactly the upsampled global constant.
        for ch in 0..2 * region.c {
            assert!(input.channel(ch).iter().all(|&v| v == 7.25));
        }
        // The last C channels are the regional state, untouched.
        for ch in 0..region.c {
            assert_eq!(input.channel(2 * region.c + ch), region.channel(ch));
        }
    }

    #[test]
    fn no_forcing_output_ignores_the_global_field() {
        let (model, store, gt, w, global, region) = regional_setup(NestMode::NoForcing);
        let a = nng_step(
            (&model, &store, &gt),
            Some(&global),
            &region,
            &w,
            NestMode::NoForcing,
        )
        .unwrap();
        let mut perturbed = global.clone();
        for v in &mut perturbed.data {
            *v += 123.0;
        }
        let b = nng_step(
            (&model, &store, &gt),
            Some(&perturbed),
            &region,
            &w,
            NestMode::NoForcing,
        )
        .unwrap();
        assert_eq!(a.data, b.data, "no-forcing output must be bitwise equal");
    }

    #[test]
    fn channel_mismatch_is_a_hard_error() {
        let (model, store, gt, w, global, region) = regional_setup(NestMode::Nng);
        // Feeding boundary-forcing input into the 3C-channel model must fail.
        let err = nng_step(
            (&model, &store, &gt),
            Some(&global),
            &region,
            &w,
            NestMode::BoundaryForcing,
        );
        assert!(err.is_err());
    }

    #[test]
    fn nng_rollout_one_step_reduces_to_nng_step() {
        let (model, store, gt, w, global, region) = regional_setup(NestMode::Nng);
        let seq = vec![global.clone()];
        let rolled = nng_rollout(
            (&model, &store, &gt),
            GlobalDrive::Sequence(&seq),
            &region,
            &w,
            NestMode::Nng,
            1,
        )
        .unwrap();
        let stepped = nng_step(
            (&model, &store, &gt),
            Some(&global),
            &region,
            &w,
            NestMode::Nng,
        )
        .unwrap();
        assert_eq!(rolled.len(), 1);
        assert_eq!(rolled[0].data, stepped.data);
    }

    #[test]
    fn model_drive_matches_global_rollout_fed_as_sequence() {
        let (model, store, gt, w, global, region) = regional_setup(NestMode::Nng);
        // A tiny global model on the coarse grid drives the nest.
        let ggraph = crate::meshgraph::build_earth_graph(
            crate::meshgraph::GraphConfig::new(8, 16, 0, vec![]),
        )
        .unwrap();
        let ggt = GraphTensors::<f64>::new(&ggraph);
        let gcfg = NetworkConfig {
            latent_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            gate_dim: 0,
            gate_hidden: 8,
            attn_hidden: 8,
            n_channels: 2,
            out_channels: 0,
            messaging: Messaging::Gated,
        };
        let mut gstore = ParamStore::new();
        let mut rng = substream(17, "init");
        let gmodel = Model::build(gcfg, &mut gstore, &mut rng).unwrap();

        let steps = 3;
        let by_model = nng_rollout(
            (&model, &store, &gt),
            GlobalDrive::Model {
                global: (&gmodel, &gstore, &ggt),
                z0: global.clone(),
                h: 8,
                w: 16,
            },
            &region,
            &w,
            NestMode::Nng,
            steps,
        )
        .unwrap();

        // Same thing with the global rollout precomputed into a sequence.
        let mut gstate = global.to_node_matrix::<f64>();
        let mut seq = Vec::new();
        for _ in 0..steps {
            gstate = forward(&gmodel, &gstore, &ggt, &gstate).unwrap();
            seq.push(FieldTensor::from_node_matrix(&gstate, 8, 16, global.grid));
        }
        let by_seq = nng_rollout(
            (&model, &store, &gt),
            GlobalDrive::Sequence(&seq),
            &region,
            &w,
            NestMode::Nng,
            steps,
        )
        .unwrap();
        for (a, b) in by_model.iter().zip(&by_seq) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn extract_then_unit_upsample_is_identity_on_window() {
        let f = labeled_field(1, 10, 20);
        let w = RegionWindow {
            row0: 2,
            row1: 5,
            col0: 4,
            col1: 9,
            boundary_width: 0,
            refine: 1,
        };
        let got = upsample_bilinear(&extract_region(&f, &w, false).unwrap(), 1);
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(got.get(0, i, j), f.get(0, 2 + i, 4 + j));
            }
        }
    }
}
