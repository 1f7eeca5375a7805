//! Icosahedral sphere meshes: seed icosahedron, 1-to-4 subdivision with
//! midpoint projection, and localized region refinement.

use std::collections::HashMap;

use super::geo::{RegionBox, UnitVec3};

/// A triangulation of the unit sphere.
///
/// Faces are oriented counterclockwise seen from outside; vertices of a
/// subdivided mesh start with the parent mesh's vertices (prefix property).
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<UnitVec3>,
    pub faces: Vec<[usize; 3]>,
    pub level: u32,
}

impl TriMesh {
    /// Deduplicated undirected edges, each as `(lo, hi)`, sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| {
                [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
                    .into_iter()
                    .map(|(a, b)| (a.min(b), a.max(b)))
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Mean arc length (radians) over undirected edges.
    pub fn mean_edge_arc(&self) -> f64 {
        let edges = self.undirected_edges();
        let total: f64 = edges
            .iter()
            .map(|&(a, b)| self.vertices[a].arc_to(&self.vertices[b]))
            .sum();
        total / edges.len() as f64
    }

    /// Face centroid projected to the sphere.
    pub fn face_centroid(&self, face: usize) -> UnitVec3 {
        let [a, b, c] = self.faces[face];
        let (va, vb, vc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        UnitVec3::normalize(va.x + vb.x + vc.x, va.y + vb.y + vc.y, va.z + vb.z + vc.z)
    }

    /// Check structural invariants; panics with a description on violation.
    pub fn validate(&self) {
        for (i, f) in self.faces.iter().enumerate() {
            assert!(
                f[0] != f[1] && f[1] != f[2] && f[0] != f[2],
                "face {i} has repeated vertices"
            );
            assert!(
                triple(
                    &self.vertices[f[0]],
                    &self.vertices[f[1]],
                    &self.vertices[f[2]]
                ) > 0.0,
                "face {i} is not counterclockwise"
            );
        }
        for (i, v) in self.vertices.iter().enumerate() {
            assert!((v.norm() - 1.0).abs() < 1e-12, "vertex {i} off the sphere");
        }
        let v = self.vertices.len() as i64;
        let e = self.undirected_edges().len() as i64;
        let f = self.faces.len() as i64;
        assert_eq!(v - e + f, 2, "Euler characteristic violated");
    }
}

/// Signed scalar triple product `a · (b × c)`.
pub fn triple(a: &UnitVec3, b: &UnitVec3, c: &UnitVec3) -> f64 {
    let (cx, cy, cz) = b.cross(c);
    a.x * cx + a.y * cy + a.z * cz
}

/// The seed icosahedron: 12 vertices, 20 faces, one vertex at the north pole.
pub fn icosahedron() -> TriMesh {
    // One vertex at each pole, two staggered rings of five at lat = ±atan(1/2).
    let z = 1.0 / 5f64.sqrt();
    let r = 2.0 / 5f64.sqrt();
    let mut vertices = Vec::with_capacity(12);
    vertices.push(UnitVec3 { x: 0.0, y: 0.0, z: 1.0 });
    for i in 0..5 {
        let lon = (72.0 * i as f64).to_radians();
        vertices.push(UnitVec3::normalize(r * lon.cos(), r * lon.sin(), z));
    }
    for i in 0..5 {
        let lon = (36.0 + 72.0 * i as f64).to_radians();
        vertices.push(UnitVec3::normalize(r * lon.cos(), r * lon.sin(), -z));
    }
    vertices.push(UnitVec3 { x: 0.0, y: 0.0, z: -1.0 });

    let upper = |i: usize| 1 + i % 5;
    let lower = |i: usize| 6 + i % 5;
    let mut faces = Vec::with_capacity(20);
    for i in 0..5 {
        faces.push([0, upper(i), upper(i + 1)]);
        faces.push([upper(i), lower(i), upper(i + 1)]);
        faces.push([lower(i), lower(i + 1), upper(i + 1)]);
        faces.push([11, lower(i + 1), lower(i)]);
    }
    // Canonicalize winding so every face is counterclockwise from outside.
    for f in &mut faces {
        if triple(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]) < 0.0 {
            f.swap(1, 2);
        }
    }
    TriMesh {
        vertices,
        faces,
        level: 0,
    }
}

fn midpoint_index(
    vertices: &mut Vec<UnitVec3>,
    cache: &mut HashMap<(usize, usize), usize>,
    a: usize,
    b: usize,
) -> usize {
    let key = (a.min(b), a.max(b));
    *cache.entry(key).or_insert_with(|| {
        let m = vertices[a].midpoint(&vertices[b]);
        vertices.push(m);
        vertices.len() - 1
    })
}

/// Split every face into four, projecting new midpoints onto the sphere.
///
/// Child faces of parent face `f` occupy indices `4f..4f+4` in the result.
pub fn subdivide(mesh: &TriMesh) -> TriMesh {
    let mut vertices = mesh.vertices.clone();
    let mut cache = HashMap::new();
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let mab = midpoint_index(&mut vertices, &mut cache, a, b);
        let mbc = midpoint_index(&mut vertices, &mut cache, b, c);
        let mca = midpoint_index(&mut vertices, &mut cache, c, a);
        faces.push([a, mab, mca]);
        faces.push([b, mbc, mab]);
        faces.push([c, mca, mbc]);
        faces.push([mab, mbc, mca]);
    }
    TriMesh {
        vertices,
        faces,
        level: mesh.level + 1,
    }
}

/// What became of a face of the pre-refinement mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceFate {
    /// Untouched; index into the refined mesh's face list.
    Kept(usize),
    /// Split 1-to-4; indices of the children in the refined mesh.
    Split([usize; 4]),
}

/// A mesh after localized refinement, with bookkeeping for point location
/// and for the refined-region edge set.
#[derive(Debug, Clone)]
pub struct RefinedMesh {
    pub mesh: TriMesh,
    /// Per pre-refinement face: kept or split.
    pub face_map: Vec<FaceFate>,
    /// Undirected child edges of refined faces, deduplicated, sorted.
    pub region_edges: Vec<(usize, usize)>,
    /// Number of faces that were refined.
    pub refined_face_count: usize,
}

impl RefinedMesh {
    /// Identity wrapper for a mesh with no refinement applied.
    pub fn unrefined(mesh: TriMesh) -> Self {
        let face_map = (0..mesh.faces.len()).map(FaceFate::Kept).collect();
        RefinedMesh {
            mesh,
            face_map,
            region_edges: Vec::new(),
            refined_face_count: 0,
        }
    }
}

/// Subdivide once every face whose centroid lies inside any of `regions`.
///
/// Hanging midpoint vertices on the refinement boundary are kept as mesh
/// nodes; neighboring faces outside the boxes are not split. With no face
/// selected the mesh is returned unchanged (level included).
pub fn refine_region(mesh: &TriMesh, regions: &[RegionBox]) -> RefinedMesh {
    let selected: Vec<bool> = (0..mesh.faces.len())
        .map(|f| {
            let c = mesh.face_centroid(f).to_latlon();
            regions.iter().any(|r| r.contains(c))
        })
        .collect();
    let refined_face_count = selected.iter().filter(|&&s| s).count();
    if refined_face_count == 0 {
        return RefinedMesh::unrefined(mesh.clone());
    }

    let mut vertices = mesh.vertices.clone();
    let mut cache = HashMap::new();
    let mut faces = Vec::new();
    let mut face_map = Vec::with_capacity(mesh.faces.len());
    let mut region_edges = Vec::new();
    for (idx, &[a, b, c]) in mesh.faces.iter().enumerate() {
        if !selected[idx] {
            faces.push([a, b, c]);
            face_map.push(FaceFate::Kept(faces.len() - 1));
            continue;
        }
        let mab = midpoint_index(&mut vertices, &mut cache, a, b);
        let mbc = midpoint_index(&mut vertices, &mut cache, b, c);
        let mca = midpoint_index(&mut vertices, &mut cache, c, a);
        let children = [
            [a, mab, mca],
            [b, mbc, mab],
            [c, mca, mbc],
            [mab, mbc, mca],
        ];
        let base = faces.len();
        faces.extend_from_slice(&children);
        face_map.push(FaceFate::Split([base, base + 1, base + 2, base + 3]));
        for child in &children {
            for (u, v) in [(child[0], child[1]), (child[1], child[2]), (child[2], child[0])] {
                region_edges.push((u.min(v), u.max(v)));
            }
        }
    }
    region_edges.sort_unstable();
    region_edges.dedup();
    RefinedMesh {
        mesh: TriMesh {
            vertices,
            faces,
            level: mesh.level + 1,
        },
        face_map,
        region_edges,
        refined_face_count,
    }
}

/// The full subdivision hierarchy from the icosahedron to level `max_level`.
pub struct Icosphere {
    pub levels: Vec<TriMesh>,
}

impl Icosphere {
    pub fn build(max_level: u32) -> Self {
        let mut levels = vec![icosahedron()];
        for _ in 0..max_level {
            let next = subdivide(levels.last().unwrap());
            levels.push(next);
        }
        Icosphere { levels }
    }

    pub fn finest(&self) -> &TriMesh {
        self.levels.last().unwrap()
    }
}

/// Containment of `p` in the spherical triangle spanned by face `f`:
/// all three signed triple products nonnegative within `tol`.
pub fn face_contains(mesh: &TriMesh, f: usize, p: &UnitVec3, tol: f64) -> bool {
    let [a, b, c] = mesh.faces[f];
    let (va, vb, vc) = (&mesh.vertices[a], &mesh.vertices[b], &mesh.vertices[c]);
    triple(va, vb, p) >= -tol && triple(vb, vc, p) >= -tol && triple(vc, va, p) >= -tol
}

fn min_signed(mesh: &TriMesh, f: usize, p: &UnitVec3) -> f64 {
    let [a, b, c] = mesh.faces[f];
    let (va, vb, vc) = (&mesh.vertices[a], &mesh.vertices[b], &mesh.vertices[c]);
    triple(va, vb, p)
        .min(triple(vb, vc, p))
        .min(triple(vc, va, p))
}

/// Pick the containing face among `candidates`, visiting them in
/// lexicographic order of their sorted vertex triples (deterministic
/// tie-break for points on shared edges). Falls back to the most interior
/// candidate when roundoff leaves no strict winner.
pub fn pick_containing(mesh: &TriMesh, candidates: &[usize], p: &UnitVec3, tol: f64) -> usize {
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by_key(|&f| {
        let mut key = mesh.faces[f];
        key.sort_unstable();
        key
    });
    for &f in &order {
        if face_contains(mesh, f, p, tol) {
            return f;
        }
    }
    *order
        .iter()
        .max_by(|&&x, &&y| {
            min_signed(mesh, x, p)
                .partial_cmp(&min_signed(mesh, y, p))
                .unwrap()
        })
        .unwrap()
}

/// Locate the finest face containing `p` by descending the hierarchy and,
/// where applicable, the region refinement. Returns an index into
/// `refined.mesh.faces`.
pub fn locate_face(hier: &Icosphere, refined: &RefinedMesh, p: &UnitVec3) -> usize {
    const TOL: f64 = 1e-12;
    let base: Vec<usize> = (0..hier.levels[0].faces.len()).collect();
    let mut face = pick_containing(&hier.levels[0], &base, p, TOL);
    for level in 1..hier.levels.len() {
        let children = [4 * face, 4 * face + 1, 4 * face + 2, 4 * face + 3];
        face = pick_containing(&hier.levels[level], &children, p, TOL);
    }
    match refined.face_map[face] {
        FaceFate::Kept(idx) => idx,
        FaceFate::Split(children) => pick_containing(&refined.mesh, &children, p, TOL),
    }
}
