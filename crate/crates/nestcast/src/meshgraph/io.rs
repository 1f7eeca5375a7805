//! Graph directory serialization: `graph.json` with counts and config echo,
//! plus flat little-endian `.f32`/`.u32` arrays, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::builder::{EarthGraph, EdgeSet, GraphConfig, EDGE_FEATURE_DIM, NODE_FEATURE_DIM};
use super::geo::{LatLon, UnitVec3};
use crate::error::{Error, FormatError, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct GraphManifest {
    pub config: GraphConfig,
    pub grid_nodes: usize,
    pub mesh_nodes: usize,
    pub mesh_edges_by_level: Vec<usize>,
    pub region_edges: usize,
    pub g2m_edges: usize,
    pub m2g_edges: usize,
    pub node_feature_dim: usize,
    pub edge_feature_dim: usize,
    pub finest_mean_edge_arc: f64,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn u32_bytes(values: impl Iterator<Item = u32>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_f32s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(FormatError::TruncatedPayload {
            path: path.to_path_buf(),
            expected: bytes.len() / 4 * 4 + 4,
            actual: bytes.len(),
        }
        .into());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn read_u32s(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(FormatError::TruncatedPayload {
            path: path.to_path_buf(),
            expected: bytes.len() / 4 * 4 + 4,
            actual: bytes.len(),
        }
        .into());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn edge_bytes(set: &EdgeSet) -> (Vec<u8>, Vec<u8>) {
    let pairs = set
        .senders
        .iter()
        .zip(&set.receivers)
        .flat_map(|(&s, &r)| [s, r]);
    (u32_bytes(pairs), f32_bytes(set.features.iter().copied()))
}

fn read_edge_set(dir: &Path, stem: &str) -> Result<EdgeSet> {
    let idx = read_u32s(&dir.join(format!("{stem}.u32")))?;
    let features = read_f32s(&dir.join(format!("{stem}_feats.f32")))?;
    let n = idx.len() / 2;
    if idx.len() % 2 != 0 || features.len() != n * EDGE_FEATURE_DIM {
        return Err(FormatError::MalformedHeader {
            path: dir.join(format!("{stem}.u32")),
            detail: "edge index/feature lengths inconsistent".into(),
        }
        .into());
    }
    let mut senders = Vec::with_capacity(n);
    let mut receivers = Vec::with_capacity(n);
    for pair in idx.chunks_exact(2) {
        senders.push(pair[0]);
        receivers.push(pair[1]);
    }
    Ok(EdgeSet {
        senders,
        receivers,
        features,
    })
}

/// Write a graph into `dir` (created if missing).
pub fn save_graph(graph: &EarthGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = GraphManifest {
        config: graph.config.clone(),
        grid_nodes: graph.n_grid(),
        mesh_nodes: graph.n_mesh(),
        mesh_edges_by_level: graph.mesh_edges_by_level.iter().map(EdgeSet::len).collect(),
        region_edges: graph.region_edges.len(),
        g2m_edges: graph.g2m.len(),
        m2g_edges: graph.m2g.len(),
        node_feature_dim: NODE_FEATURE_DIM,
        edge_feature_dim: EDGE_FEATURE_DIM,
        finest_mean_edge_arc: graph.finest_mean_edge_arc,
    };
    write_file(
        &dir.join("graph.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;

    write_file(
        &dir.join("grid_nodes.f32"),
        &f32_bytes(graph.grid_latlon.iter().flat_map(|p| [p.lat, p.lon])),
    )?;
    write_file(
        &dir.join("mesh_nodes.f32"),
        &f32_bytes(graph.mesh_nodes.iter().flat_map(|v| [v.x, v.y, v.z])),
    )?;
    write_file(
        &dir.join("grid_feats.f32"),
        &f32_bytes(graph.grid_node_feats.iter().copied()),
    )?;
    write_file(
        &dir.join("mesh_feats.f32"),
        &f32_bytes(graph.mesh_node_feats.iter().copied()),
    )?;
    for (l, set) in graph.mesh_edges_by_level.iter().enumerate() {
        let (idx, feats) = edge_bytes(set);
        write_file(&dir.join(format!("edges_l{l}.u32")), &idx)?;
        write_file(&dir.join(format!("edges_l{l}_feats.f32")), &feats)?;
    }
    for (stem, set) in [
        ("edges_region", &graph.region_edges),
        ("g2m", &graph.g2m),
        ("m2g", &graph.m2g),
    ] {
        let (idx, feats) = edge_bytes(set);
        write_file(&dir.join(format!("{stem}.u32")), &idx)?;
        write_file(&dir.join(format!("{stem}_feats.f32")), &feats)?;
    }
    Ok(())
}

/// Load a graph directory written by [`save_graph`].
///
/// Coordinates and features come back at f32 precision, which is what the
/// on-disk format stores.
pub fn load_graph(dir: &Path) -> Result<EarthGraph> {
    let manifest_path = dir.join("graph.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: GraphManifest = serde_json::from_str(&text)?;

    let grid_raw = read_f32s(&dir.join("grid_nodes.f32"))?;
    let grid_latlon: Vec<LatLon> = grid_raw
        .chunks_exact(2)
        .map(|c| LatLon::new(c[0].clamp(-90.0, 90.0), c[1]))
        .collect();
    let mesh_raw = read_f32s(&dir.join("mesh_nodes.f32"))?;
    let mesh_nodes: Vec<UnitVec3> = mesh_raw
        .chunks_exact(3)
        .map(|c| UnitVec3::normalize(c[0], c[1], c[2]))
        .collect();
    if grid_latlon.len() != manifest.grid_nodes || mesh_nodes.len() != manifest.mesh_nodes {
        return Err(FormatError::MalformedHeader {
            path: manifest_path,
            detail: "node counts disagree with binary arrays".into(),
        }
        .into());
    }

    let mut mesh_edges_by_level = Vec::new();
    for l in 0..manifest.mesh_edges_by_level.len() {
        mesh_edges_by_level.push(read_edge_set(dir, &format!("edges_l{l}"))?);
    }
    let region_edges = read_edge_set(dir, "edges_region")?;
    let g2m = read_edge_set(dir, "g2m")?;
    let m2g = read_edge_set(dir, "m2g")?;

    let grid_node_feats = read_f32s(&dir.join("grid_feats.f32"))?;
    let mesh_node_feats = read_f32s(&dir.join("mesh_feats.f32"))?;

    Ok(EarthGraph {
        config: manifest.config,
        grid_latlon,
        mesh_nodes,
        mesh_edges_by_level,
        region_edges,
        g2m,
        m2g,
        grid_node_feats,
        mesh_node_feats,
        finest_mean_edge_arc: manifest.finest_mean_edge_arc,
    })
}
