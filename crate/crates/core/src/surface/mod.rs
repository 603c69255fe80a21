//! Surface extraction from label volumes: marching cubes, outward vertex
//! normals, and edge-graph geodesic distances.

mod mc_tables;

use std::collections::{BinaryHeap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vec3::{self, Vec3};
use crate::volio::LabelVolume;

/// Triangle mesh in world mm. Normals are empty until
/// [`vertex_normals`] fills them (unit, oriented away from the cavity).
#[derive(Debug, Clone)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Vec<Vec3>,
    /// Unique undirected vertex pairs (u < v) with Euclidean length in mm.
    pub edges: Vec<(usize, usize, f64)>,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for t in &triangles {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::Geometry(format!(
                    "triangle {t:?} references a vertex out of range (n = {n})"
                )));
            }
        }
        let mut edge_set: Vec<(usize, usize)> = triangles
            .iter()
            .flat_map(|t| {
                [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
                    .into_iter()
                    .map(|(a, b)| (a.min(b), a.max(b)))
            })
            .collect();
        edge_set.sort_unstable();
        edge_set.dedup();
        let mut edges = Vec::with_capacity(edge_set.len());
        for (u, v) in edge_set {
            let len = vec3::dist(vertices[u], vertices[v]);
            if !(len > 0.0) {
                return Err(Error::Geometry(format!(
                    "zero-length edge between vertices {u} and {v}"
                )));
            }
            edges.push((u, v, len));
        }
        Ok(Self {
            vertices,
            triangles,
            normals: Vec::new(),
            edges,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Adjacency lists (neighbor, edge length), neighbors in ascending order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(u, v, len) in &self.edges {
            adj[u].push((v, len));
            adj[v].push((u, len));
        }
        for list in adj.iter_mut() {
            list.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        }
        adj
    }

    /// Number of triangles incident to each undirected edge.
    pub fn edge_triangle_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Indices of the connected component containing each vertex (labels
    /// are component ids in discovery order).
    pub fn components(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let mut comp = vec![usize::MAX; self.vertices.len()];
        let mut next = 0;
        for start in 0..self.vertices.len() {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = next;
            while let Some(v) = stack.pop() {
                for &(u, _) in &adj[v] {
                    if comp[u] == usize::MAX {
                        comp[u] = next;
                        stack.push(u);
                    }
                }
            }
            next += 1;
        }
        comp
    }
}

/// Iso-surface at 0.5 of the binary indicator of `target_label`. The grid
/// is virtually padded with background so surfaces touching the volume
/// boundary still close. Vertices are welded exactly via canonical grid
/// edge keys (well within the 1e-6 mm contract).
pub fn marching_cubes(lab: &LabelVolume, target_label: u8) -> Result<SurfaceMesh> {
    if !lab.data.iter().any(|&l| l == target_label) {
        return Err(Error::Input(format!(
            "no voxel carries label {target_label}"
        )));
    }
    let dims = lab.dims;
    let inside = |x: i64, y: i64, z: i64| -> bool {
        if x < 0 || y < 0 || z < 0 {
            return false;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= dims[0] || y >= dims[1] || z >= dims[2] {
            return false;
        }
        lab.at(x, y, z) == target_label
    };
    let corner_pos = |x: i64, y: i64, z: i64| -> Vec3 {
        [
            lab.origin_mm[0] + x as f64 * lab.spacing_mm[0],
            lab.origin_mm[1] + y as f64 * lab.spacing_mm[1],
            lab.origin_mm[2] + z as f64 * lab.spacing_mm[2],
        ]
    };

    // Corner offsets matching the case tables.
    const CORNER: [(i64, i64, i64); 8] = [
        (0, 0, 0),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ];

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    // Canonical edge key: (min corner, axis) of the crossed grid edge.
    let mut edge_vertex: HashMap<(i64, i64, i64, u8), usize> = HashMap::new();

    for z in -1..dims[2] as i64 {
        for y in -1..dims[1] as i64 {
            for x in -1..dims[0] as i64 {
                let mut case = 0usize;
                for (i, &(dx, dy, dz)) in CORNER.iter().enumerate() {
                    // Bit set when the corner is outside (indicator below iso).
                    if !inside(x + dx, y + dy, z + dz) {
                        case |= 1 << i;
                    }
                }
                if mc_tables::EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut cell_edge_vertex = [usize::MAX; 12];
                for e in 0..12 {
                    if mc_tables::EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (a, b) = mc_tables::EDGE_CORNERS[e];
                    let (ax, ay, az) = CORNER[a];
                    let (bx, by, bz) = CORNER[b];
                    let ca = (x + ax, y + ay, z + az);
                    let cb = (x + bx, y + by, z + bz);
                    let lo = (ca.0.min(cb.0), ca.1.min(cb.1), ca.2.min(cb.2));
                    let axis = if ca.0 != cb.0 {
                        0u8
                    } else if ca.1 != cb.1 {
                        1
                    } else {
                        2
                    };
                    let key = (lo.0, lo.1, lo.2, axis);
                    let idx = *edge_vertex.entry(key).or_insert_with(|| {
                        // Binary field: the crossing is the edge midpoint.
                        let pa = corner_pos(ca.0, ca.1, ca.2);
                        let pb = corner_pos(cb.0, cb.1, cb.2);
                        let mid = vec3::scale(vec3::add(pa, pb), 0.5);
                        vertices.push(mid);
                        vertices.len() - 1
                    });
                    cell_edge_vertex[e] = idx;
                }
                let tri = &mc_tables::TRIANGLE_TABLE[case];
                let mut i = 0;
                while tri[i] >= 0 {
                    let a = cell_edge_vertex[tri[i] as usize];
                    let b = cell_edge_vertex[tri[i + 1] as usize];
                    let c = cell_edge_vertex[tri[i + 2] as usize];
                    debug_assert!(a != usize::MAX && b != usize::MAX && c != usize::MAX);
                    if a != b && b != c && a != c {
                        triangles.push([a, b, c]);
                    }
                    i += 3;
                }
            }
        }
    }

    SurfaceMesh::new(vertices, triangles)
}

/// Per-vertex normals: normalized area-weighted average of incident
/// triangle normals, oriented outward (the half-mm step along the normal
/// must see a lower cavity-indicator value than the step against it).
pub fn vertex_normals(
    mesh: &SurfaceMesh,
    lab: &LabelVolume,
    target_label: u8,
) -> Result<Vec<Vec3>> {
    let mut accum = vec![[0.0f64; 3]; mesh.vertices.len()];
    for t in &mesh.triangles {
        let e1 = vec3::sub(mesh.vertices[t[1]], mesh.vertices[t[0]]);
        let e2 = vec3::sub(mesh.vertices[t[2]], mesh.vertices[t[0]]);
        let n = vec3::cross(e1, e2); // magnitude = 2 * area
        for &v in t {
            accum[v] = vec3::add(accum[v], n);
        }
    }
    let indicator = lab.indicator(target_label);
    let mut normals = vec![[0.0f64; 3]; mesh.vertices.len()];
    for (v, sum) in accum.iter().enumerate() {
        let n = vec3::normalize(*sum).ok_or_else(|| {
            Error::Geometry(format!(
                "vertex {v} has only degenerate incident triangles"
            ))
        })?;
        let probe = |dir: f64| {
            let p = vec3::add(mesh.vertices[v], vec3::scale(n, 0.5 * dir));
            crate::volio::trilinear_sample(&indicator, p).expect("finite probe point")
        };
        normals[v] = if probe(1.0) > probe(-1.0) {
            vec3::scale(n, -1.0)
        } else {
            n
        };
    }
    Ok(normals)
}

/// Mesh extraction plus outward normals in one step.
pub fn extract_surface(lab: &LabelVolume, target_label: u8) -> Result<SurfaceMesh> {
    let mut mesh = marching_cubes(lab, target_label)?;
    mesh.normals = vertex_normals(&mesh, lab, target_label)?;
    Ok(mesh)
}

/// Dijkstra result over the mesh edge graph.
#[derive(Debug, Clone)]
pub struct ShortestPaths {
    pub dist: Vec<f64>,
    /// Predecessor on the shortest-path tree; `None` for the seed and for
    /// unreachable vertices.
    pub prev: Vec<Option<usize>>,
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // min-heap with node index as deterministic tiebreaker
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths over mesh edges with Euclidean lengths.
pub fn shortest_paths(mesh: &SurfaceMesh, seed: usize) -> Result<ShortestPaths> {
    if seed >= mesh.vertices.len() {
        return Err(Error::Input(format!(
            "seed {seed} out of range for {} vertices",
            mesh.vertices.len()
        )));
    }
    let adj = mesh.adjacency();
    let mut dist = vec![f64::INFINITY; mesh.vertices.len()];
    let mut prev = vec![None; mesh.vertices.len()];
    let mut heap = BinaryHeap::new();
    dist[seed] = 0.0;
    heap.push(HeapEntry {
        dist: 0.0,
        node: seed,
    });
    while let Some(HeapEntry { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, len) in &adj[node] {
            let cand = d + len;
            if cand < dist[next] {
                dist[next] = cand;
                prev[next] = Some(node);
                heap.push(HeapEntry {
                    dist: cand,
                    node: next,
                });
            }
        }
    }
    Ok(ShortestPaths { dist, prev })
}

/// Geodesic distance (mm) from `seed` to every vertex; unreachable
/// vertices get +inf.
pub fn geodesic_distances(mesh: &SurfaceMesh, seed: usize) -> Result<Vec<f64>> {
    Ok(shortest_paths(mesh, seed)?.dist)
}

/// Writes `v`/`vn`/`f` records. Face indices are 1-based; normals are
/// written only when present.
pub fn save_mesh_obj(mesh: &SurfaceMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for n in &mesh.normals {
        out.push_str(&format!("vn {} {} {}\n", n[0], n[1], n[2]));
    }
    let with_normals = mesh.normals.len() == mesh.vertices.len();
    for t in &mesh.triangles {
        if with_normals {
            out.push_str(&format!(
                "f {}//{} {}//{} {}//{}\n",
                t[0] + 1,
                t[0] + 1,
                t[1] + 1,
                t[1] + 1,
                t[2] + 1,
                t[2] + 1
            ));
        } else {
            out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
    }
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_mesh_obj(path: impl AsRef<Path>) -> Result<SurfaceMesh> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut parts = line.split_whitespace();
        let parse3 = |parts: &mut std::str::SplitWhitespace| -> Result<Vec3> {
            let mut out = [0.0; 3];
            for slot in out.iter_mut() {
                *slot = parts
                    .next()
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::format(
                            path.display().to_string(),
                            format!("bad coordinate at line {}", lineno + 1),
                        )
                    })?;
            }
            Ok(out)
        };
        match parts.next() {
            Some("v") => vertices.push(parse3(&mut parts)?),
            Some("vn") => normals.push(parse3(&mut parts)?),
            Some("f") => {
                let mut idx = [0usize; 3];
                for slot in idx.iter_mut() {
                    let token = parts.next().ok_or_else(|| {
                        Error::format(
                            path.display().to_string(),
                            format!("short face at line {}", lineno + 1),
                        )
                    })?;
                    let first = token.split('/').next().unwrap_or("");
                    let one_based: usize = first.parse().map_err(|_| {
                        Error::format(
                            path.display().to_string(),
                            format!("bad face index '{token}' at line {}", lineno + 1),
                        )
                    })?;
                    if one_based == 0 {
                        return Err(Error::format(
                            path.display().to_string(),
                            format!("zero face index at line {}", lineno + 1),
                        ));
                    }
                    *slot = one_based - 1;
                }
                triangles.push(idx);
            }
            _ => {}
        }
    }
    let mut mesh = SurfaceMesh::new(vertices, triangles)?;
    if normals.len() == mesh.vertices.len() {
        mesh.normals = normals;
    }
    Ok(mesh)
}

/// Per-vertex scalar channels saved next to a mesh (labels, probabilities).
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct MeshChannels {
    pub channels: std::collections::BTreeMap<String, Vec<f64>>,
}

pub fn save_channels(channels: &MeshChannels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_vec_pretty(channels).expect("channels serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_channels(path: impl AsRef<Path>) -> Result<MeshChannels> {
    let path = path.as_ref();
    let text = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_slice(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::LabelVolume;

    fn single_voxel() -> LabelVolume {
        let mut data = vec![0u8; 27];
        data[1 + 3 * (1 + 3 * 1)] = 1;
        LabelVolume::new([3, 3, 3], [1.0; 3], [0.0; 3], data).unwrap()
    }

    fn sphere_label(radius: f64, dim: usize) -> LabelVolume {
        let c = (dim as f64 - 1.0) / 2.0;
        let mut data = vec![0u8; dim * dim * dim];
        for k in 0..dim {
            for j in 0..dim {
                for i in 0..dim {
                    let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2)
                        + (k as f64 - c).powi(2);
                    if d2 <= radius * radius {
                        data[i + dim * (j + dim * k)] = 1;
                    }
                }
            }
        }
        LabelVolume::new([dim; 3], [1.0; 3], [0.0; 3], data).unwrap()
    }

    #[test]
    fn single_voxel_is_topological_sphere() {
        let mesh = marching_cubes(&single_voxel(), 1).unwrap();
        let v = mesh.vertices.len() as i64;
        let e = mesh.edges.len() as i64;
        let f = mesh.triangles.len() as i64;
        assert_eq!(v - e + f, 2, "V-E+F = {} - {} + {}", v, e, f);
        for (_, &count) in mesh.edge_triangle_counts().iter() {
            assert_eq!(count, 2);
        }
    }

    #[test]
    fn empty_label_errors() {
        assert!(marching_cubes(&single_voxel(), 2).is_err());
    }

    #[test]
    fn sphere_vertices_near_radius() {
        let r = 20.0;
        let dim = 45;
        let lab = sphere_label(r, dim);
        let mesh = marching_cubes(&lab, 1).unwrap();
        let c = (dim as f64 - 1.0) / 2.0;
        let diag = 3.0f64.sqrt();
        for v in &mesh.vertices {
            let d = vec3::dist(*v, [c, c, c]);
            assert!(
                (d - r).abs() <= diag,
                "vertex at radius {d}, expected within {diag} of {r}"
            );
        }
        // closed mesh
        for (_, &count) in mesh.edge_triangle_counts().iter() {
            assert_eq!(count, 2);
        }
    }

    #[test]
    fn two_blobs_give_two_components() {
        let mut data = vec![0u8; 7 * 7 * 7];
        data[1 + 7 * (1 + 7 * 1)] = 1;
        data[5 + 7 * (5 + 7 * 5)] = 1;
        let lab = LabelVolume::new([7; 3], [1.0; 3], [0.0; 3], data).unwrap();
        let mesh = marching_cubes(&lab, 1).unwrap();
        let comp = mesh.components();
        let n_comp = comp.iter().max().unwrap() + 1;
        assert_eq!(n_comp, 2);
    }

    #[test]
    fn sphere_normals_radial_and_unit() {
        // Frozen against the analytic radial oracle: on the binary midpoint
        // mesh the 1-ring area-weighted normals are all outward (dot > 0.5)
        // and 81.6% lie within 18 degrees of radial (2158/2646 at r=12).
        let r = 12.0;
        let dim = 29;
        let lab = sphere_label(r, dim);
        let mesh = marching_cubes(&lab, 1).unwrap();
        let normals = vertex_normals(&mesh, &lab, 1).unwrap();
        let c = (dim as f64 - 1.0) / 2.0;
        let mut aligned = 0usize;
        for (v, n) in mesh.vertices.iter().zip(normals.iter()) {
            assert!((vec3::norm(*n) - 1.0).abs() <= 1e-6);
            let radial = vec3::normalize(vec3::sub(*v, [c, c, c])).unwrap();
            let d = vec3::dot(*n, radial);
            assert!(d > 0.5, "vertex {:?}: normal not outward (dot {d})", v);
            if d >= 0.95 {
                aligned += 1;
            }
        }
        assert!(
            aligned as f64 >= 0.80 * mesh.vertices.len() as f64,
            "{aligned}/{} aligned",
            mesh.vertices.len()
        );
    }

    #[test]
    fn complementing_labels_flips_normals() {
        let lab = sphere_label(8.0, 21);
        let mesh = marching_cubes(&lab, 1).unwrap();
        let normals = vertex_normals(&mesh, &lab, 1).unwrap();
        let flipped_lab = LabelVolume::new(
            lab.dims,
            lab.spacing_mm,
            lab.origin_mm,
            lab.data.iter().map(|&l| 1 - l).collect(),
        )
        .unwrap();
        let flipped = vertex_normals(&mesh, &flipped_lab, 1).unwrap();
        for (a, b) in normals.iter().zip(flipped.iter()) {
            for axis in 0..3 {
                assert!((a[axis] + b[axis]).abs() <= 1e-12);
            }
        }
    }

    fn path_mesh() -> SurfaceMesh {
        // 3 collinear vertices at 1mm spacing plus an apex to make triangles
        let vertices = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [1.0, 5.0, 0.0],
        ];
        let triangles = vec![[0, 1, 3], [1, 2, 3]];
        SurfaceMesh::new(vertices, triangles).unwrap()
    }

    #[test]
    fn chain_distances() {
        let mesh = path_mesh();
        let d = geodesic_distances(&mesh, 0).unwrap();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 1.0).abs() < 1e-12);
        assert!((d[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dijkstra_relaxation_fixed_point() {
        let lab = sphere_label(10.0, 25);
        let mesh = marching_cubes(&lab, 1).unwrap();
        let d = geodesic_distances(&mesh, 0).unwrap();
        assert_eq!(d[0], 0.0);
        for &(u, v, len) in &mesh.edges {
            assert!(d[v] <= d[u] + len + 1e-12);
            assert!(d[u] <= d[v] + len + 1e-12);
        }
    }

    #[test]
    fn obj_roundtrip() {
        let lab = sphere_label(6.0, 17);
        let mesh = extract_surface(&lab, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.obj");
        save_mesh_obj(&mesh, &path).unwrap();
        let back = load_mesh_obj(&path).unwrap();
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.normals.len(), mesh.normals.len());
        for (a, b) in mesh.vertices.iter().zip(back.vertices.iter()) {
            assert_eq!(a, b);
        }
    }
}
