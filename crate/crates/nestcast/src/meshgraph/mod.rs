//! Region-refined multi-scale spherical graphs.
//!
//! Grid nodes live on an equiangular lat-lon grid; mesh nodes on an
//! icosphere subdivided `levels` times, optionally densified inside lat-lon
//! boxes. Grid2mesh edges connect each grid node to all mesh nodes within
//! 0.6 of the finest mean edge arc; mesh2grid edges connect it to the three
//! corners of the finest triangle containing it.

pub mod builder;
pub mod geo;
pub mod icosphere;
pub mod io;

pub use builder::{build_earth_graph, build_graph_from_nodes, EarthGraph, EdgeSet, GraphConfig};
pub use geo::{great_circle_km, LatLon, RegionBox, UnitVec3, EARTH_RADIUS_KM};
pub use icosphere::{icosahedron, refine_region, subdivide, Icosphere, RefinedMesh, TriMesh};
pub use io::{load_graph, save_graph, GraphManifest};
