//! Assembly of the multi-scale earth graph: equiangular grid nodes, the
//! icosphere hierarchy with optional region refinement, and the grid2mesh /
//! mesh2grid bipartite edge sets with their features.

use serde::{Deserialize, Serialize};

use super::geo::{LatLon, RegionBox, UnitVec3};
use super::icosphere::{locate_face, refine_region, Icosphere, RefinedMesh, TriMesh};
use crate::error::{Error, Result};

pub const NODE_FEATURE_DIM: usize = 3;
pub const EDGE_FEATURE_DIM: usize = 4;

/// Parameters the graph is built from. Echoed into serialized output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphConfig {
    pub h: usize,
    pub w: usize,
    pub levels: u32,
    pub regions: Vec<RegionBox>,
    /// Grid2mesh cutoff as a multiple of the finest level's mean edge arc.
    pub g2m_factor: f64,
}

impl GraphConfig {
    pub fn new(h: usize, w: usize, levels: u32, regions: Vec<RegionBox>) -> Self {
        GraphConfig {
            h,
            w,
            levels,
            regions,
            g2m_factor: 0.6,
        }
    }
}

/// A directed edge list with per-edge features `(arc, dx, dy, dz)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeSet {
    pub senders: Vec<u32>,
    pub receivers: Vec<u32>,
    /// Row-major `[n_edges × EDGE_FEATURE_DIM]`.
    pub features: Vec<f64>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.senders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senders.is_empty()
    }

    fn push(&mut self, sender: usize, receiver: usize, from: &UnitVec3, to: &UnitVec3) {
        self.senders.push(sender as u32);
        self.receivers.push(receiver as u32);
        self.features.push(from.arc_to(to));
        self.features.push(from.x - to.x);
        self.features.push(from.y - to.y);
        self.features.push(from.z - to.z);
    }
}

/// The earth graph: grid nodes, multi-scale mesh, and the bipartite maps
/// between them.
#[derive(Debug, Clone)]
pub struct EarthGraph {
    pub config: GraphConfig,
    pub grid_latlon: Vec<LatLon>,
    pub mesh_nodes: Vec<UnitVec3>,
    /// Bidirectional mesh edges per subdivision level `0..=levels`.
    pub mesh_edges_by_level: Vec<EdgeSet>,
    /// Bidirectional child edges of region-refined faces.
    pub region_edges: EdgeSet,
    /// Grid → mesh edges (senders index grid nodes, receivers mesh nodes).
    pub g2m: EdgeSet,
    /// Mesh → grid edges (senders index mesh nodes, receivers grid nodes).
    pub m2g: EdgeSet,
    /// `[n_grid × 3]`: (cos lat, sin lon, cos lon).
    pub grid_node_feats: Vec<f64>,
    /// `[n_mesh × 3]`: (cos lat, sin lon, cos lon).
    pub mesh_node_feats: Vec<f64>,
    /// Mean edge arc of the finest pre-refinement level (radians); the g2m
    /// cutoff is `g2m_factor` times this.
    pub finest_mean_edge_arc: f64,
}

impl EarthGraph {
    pub fn n_grid(&self) -> usize {
        self.grid_latlon.len()
    }

    pub fn n_mesh(&self) -> usize {
        self.mesh_nodes.len()
    }

    /// Total directed mesh edges over all levels plus the refined region.
    pub fn n_mesh_edges(&self) -> usize {
        self.mesh_edges_by_level.iter().map(EdgeSet::len).sum::<usize>() + self.region_edges.len()
    }
}

/// Cell-center latitudes of an `h`-row equiangular grid, south to north.
pub fn grid_latitudes(h: usize) -> Vec<f64> {
    (0..h)
        .map(|i| -90.0 + (i as f64 + 0.5) * 180.0 / h as f64)
        .collect()
}

/// Cell-center longitudes of a `w`-column grid, from the antimeridian east.
pub fn grid_longitudes(w: usize) -> Vec<f64> {
    (0..w)
        .map(|j| -180.0 + (j as f64 + 0.5) * 360.0 / w as f64)
        .collect()
}

fn node_features(p: LatLon) -> [f64; 3] {
    [
        p.lat.to_radians().cos(),
        p.lon.to_radians().sin(),
        p.lon.to_radians().cos(),
    ]
}

fn level_edge_set(level_mesh: &TriMesh, fine_vertices: &[UnitVec3]) -> EdgeSet {
    let mut set = EdgeSet::default();
    for (a, b) in level_mesh.undirected_edges() {
        set.push(a, b, &fine_vertices[a], &fine_vertices[b]);
        set.push(b, a, &fine_vertices[b], &fine_vertices[a]);
    }
    set
}

/// Build the multi-scale graph for an `h × w` global grid over levels
/// `0..=levels` with optional region refinement on the finest level.
pub fn build_earth_graph(config: GraphConfig) -> Result<EarthGraph> {
    if config.h == 0 || config.w == 0 {
        return Err(Error::Config("grid must be non-empty".into()));
    }
    // Grid nodes at cell centers, row-major south to north, west to east.
    let lats = grid_latitudes(config.h);
    let lons = grid_longitudes(config.w);
    let mut grid_latlon = Vec::with_capacity(config.h * config.w);
    for &lat in &lats {
        for &lon in &lons {
            grid_latlon.push(LatLon::new(lat, lon));
        }
    }
    build_graph_from_nodes(config, grid_latlon)
}

/// Build the graph for an explicit set of grid nodes (regional windows use
/// this with the window's fine cell centers). The mesh still covers the
/// whole sphere.
pub fn build_graph_from_nodes(config: GraphConfig, grid_latlon: Vec<LatLon>) -> Result<EarthGraph> {
    if grid_latlon.is_empty() {
        return Err(Error::Config("grid must be non-empty".into()));
    }
    if config.g2m_factor <= 0.0 {
        return Err(Error::Config("g2m_factor must be positive".into()));
    }

    let hier = Icosphere::build(config.levels);
    let finest_mean_edge_arc = hier.finest().mean_edge_arc();
    let refined = if config.regions.is_empty() {
        RefinedMesh::unrefined(hier.finest().clone())
    } else {
        refine_region(hier.finest(), &config.regions)
    };
    let mesh_nodes = refined.mesh.vertices.clone();

    let grid_units: Vec<UnitVec3> = grid_latlon.iter().map(LatLon::to_unit).collect();

    let mut grid_node_feats = Vec::with_capacity(grid_latlon.len() * NODE_FEATURE_DIM);
    for p in &grid_latlon {
        grid_node_feats.extend_from_slice(&node_features(*p));
    }
    let mut mesh_node_feats = Vec::with_capacity(mesh_nodes.len() * NODE_FEATURE_DIM);
    for v in &mesh_nodes {
        mesh_node_feats.extend_from_slice(&node_features(v.to_latlon()));
    }

    // Mesh edges per level; coarse vertex indices are valid on the finest
    // vertex list by the prefix property.
    let mesh_edges_by_level: Vec<EdgeSet> = hier
        .levels
        .iter()
        .map(|m| level_edge_set(m, &mesh_nodes))
        .collect();
    let mut region_edges = EdgeSet::default();
    for &(a, b) in &refined.region_edges {
        region_edges.push(a, b, &mesh_nodes[a], &mesh_nodes[b]);
        region_edges.push(b, a, &mesh_nodes[b], &mesh_nodes[a]);
    }

    // Grid2mesh: connect a grid node to every mesh node within the cutoff
    // arc. Mesh nodes are bucketed by latitude to keep this near-linear.
    let cutoff = config.g2m_factor * finest_mean_edge_arc;
    let mut by_lat: Vec<(f64, usize)> = mesh_nodes
        .iter()
        .enumerate()
        .map(|(i, v)| (v.to_latlon().lat, i))
        .collect();
    by_lat.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let lat_margin = cutoff.to_degrees() + 1e-9;

    let mut g2m = EdgeSet::default();
    for (g, gp) in grid_units.iter().enumerate() {
        let lat = grid_latlon[g].lat;
        let lo = by_lat.partition_point(|&(l, _)| l < lat - lat_margin);
        let hi = by_lat.partition_point(|&(l, _)| l <= lat + lat_margin);
        let mut hits: Vec<usize> = by_lat[lo..hi]
            .iter()
            .filter(|&&(_, m)| gp.arc_to(&mesh_nodes[m]) <= cutoff)
            .map(|&(_, m)| m)
            .collect();
        hits.sort_unstable();
        if hits.is_empty() {
            return Err(Error::Config(format!(
                "grid node {g} has no mesh node within the g2m cutoff; \
                 raise g2m_factor or the mesh level"
            )));
        }
        for m in hits {
            g2m.push(g, m, gp, &mesh_nodes[m]);
        }
    }

    // Mesh2grid: each grid node connects to the three corners of the finest
    // (refined) triangle containing it.
    let mut m2g = EdgeSet::default();
    for (g, gp) in grid_units.iter().enumerate() {
        let face = locate_face(&hier, &refined, gp);
        for &v in &refined.mesh.faces[face] {
            m2g.push(v, g, &mesh_nodes[v], gp);
        }
    }

    Ok(EarthGraph {
        config,
        grid_latlon,
        mesh_nodes,
        mesh_edges_by_level,
        region_edges,
        g2m,
        m2g,
        grid_node_feats,
        mesh_node_feats,
        finest_mean_edge_arc,
    })
}
