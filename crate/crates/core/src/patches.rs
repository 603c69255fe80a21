//! Tangent-aligned intensity patch extraction and training-library
//! construction.
//!
//! Each graph node carries an intensity profile sampled on a grid aligned
//! with the local tangent frame of the surface, extended inward and
//! outward along the normal. Training samples take seeded random shifts
//! along the normal so the learned potentials tolerate surface
//! misalignment; labels always come from the unshifted vertex.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::surface::SurfaceMesh;
use crate::vec3::{self, Vec3};
use crate::volio::{trilinear_sample, LabelVolume, Volume3D};

/// Orthonormal frame at a vertex: two tangent vectors and the normal.
#[derive(Debug, Clone)]
pub struct LocalFrame {
    pub origin: Vec3,
    pub e_x: Vec3,
    pub e_y: Vec3,
    pub e_n: Vec3,
}

/// Sample counts per axis (x, y, normal); all odd.
pub type PatchSize = [usize; 3];

#[derive(Debug, Clone)]
pub struct Patch {
    pub size: PatchSize,
    pub step_mm: [f64; 3],
    /// Samples with x fastest, then y, then the normal axis.
    pub values: Vec<f64>,
    pub vertex: usize,
    pub normal_shift_mm: f64,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Labeled unary samples plus paired samples for pairwise training.
#[derive(Debug, Clone, Default)]
pub struct PatchLibrary {
    pub unary: Vec<(Patch, u8)>,
    /// (patch_u, patch_v, 3D edge length mm, similarity target in [0,1]).
    pub pairwise: Vec<(Patch, Patch, f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LibraryConfig {
    pub size: PatchSize,
    pub step_mm: [f64; 3],
    pub shift_range_mm: f64,
    pub pairs_per_edge: usize,
    pub balance: bool,
    /// Cap on the number of edges drawn for pairwise samples (seeded
    /// subsample); `None` uses every mesh edge.
    #[serde(default)]
    pub max_pairs: Option<usize>,
    pub rng_seed: u64,
}

impl LibraryConfig {
    /// Patch geometry defaults: 9x9x13 samples, tangent steps equal to the
    /// volume spacing, normal step equal to the smallest spacing.
    pub fn default_for(vol: &Volume3D, rng_seed: u64) -> Self {
        let min_spacing = vol
            .spacing_mm
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        LibraryConfig {
            size: [9, 9, 13],
            step_mm: [vol.spacing_mm[0], vol.spacing_mm[1], min_spacing],
            shift_range_mm: 2.0,
            pairs_per_edge: 1,
            balance: true,
            max_pairs: None,
            rng_seed,
        }
    }
}

/// Tangent frame at vertex `v`: e_x is the projection of the global axis
/// least parallel to the normal (ties break toward x, then y), e_y
/// completes the right-handed frame.
pub fn local_frame(mesh: &SurfaceMesh, v: usize) -> Result<LocalFrame> {
    let normal = *mesh
        .normals
        .get(v)
        .ok_or_else(|| Error::Input(format!("vertex {v} has no normal")))?;
    let e_n = vec3::normalize(normal)
        .ok_or_else(|| Error::Geometry(format!("vertex {v} has a zero normal")))?;
    let mut best_axis = 0;
    let mut best_dot = f64::INFINITY;
    for axis in 0..3 {
        let d = e_n[axis].abs();
        if d < best_dot - 1e-15 {
            best_dot = d;
            best_axis = axis;
        }
    }
    let mut axis_vec = [0.0; 3];
    axis_vec[best_axis] = 1.0;
    let tangent = vec3::sub(axis_vec, vec3::scale(e_n, vec3::dot(axis_vec, e_n)));
    let e_x = vec3::normalize(tangent)
        .ok_or_else(|| Error::Geometry(format!("degenerate tangent at vertex {v}")))?;
    let e_y = vec3::cross(e_n, e_x);
    Ok(LocalFrame {
        origin: mesh.vertices[v],
        e_x,
        e_y,
        e_n,
    })
}

/// Samples a grid centered at `origin + normal_shift_mm * e_n` with axes
/// (e_x, e_y, e_n). Sampling clamps at the volume boundary, so patches may
/// poke outside thin phantoms without error.
pub fn extract_patch(
    vol: &Volume3D,
    frame: &LocalFrame,
    size: PatchSize,
    step_mm: [f64; 3],
    normal_shift_mm: f64,
    vertex: usize,
) -> Result<Patch> {
    if size.iter().any(|&s| s == 0 || s % 2 == 0) {
        return Err(Error::Input(format!(
            "patch size {size:?} must be odd positive integers"
        )));
    }
    let center = vec3::add(frame.origin, vec3::scale(frame.e_n, normal_shift_mm));
    let half = [
        (size[0] as isize - 1) / 2,
        (size[1] as isize - 1) / 2,
        (size[2] as isize - 1) / 2,
    ];
    let mut values = Vec::with_capacity(size[0] * size[1] * size[2]);
    for in_ in -half[2]..=half[2] {
        for iy in -half[1]..=half[1] {
            for ix in -half[0]..=half[0] {
                let p = vec3::add(
                    center,
                    vec3::add(
                        vec3::scale(frame.e_x, ix as f64 * step_mm[0]),
                        vec3::add(
                            vec3::scale(frame.e_y, iy as f64 * step_mm[1]),
                            vec3::scale(frame.e_n, in_ as f64 * step_mm[2]),
                        ),
                    ),
                );
                values.push(trilinear_sample(vol, p)?);
            }
        }
    }
    Ok(Patch {
        size,
        step_mm,
        values,
        vertex,
        normal_shift_mm,
    })
}

/// Ground-truth vertex labels from a scar label volume: a vertex is scar
/// iff any probe within +-`wall_thickness_mm` along its normal lands in a
/// label-2 voxel. Probes step at half the smallest voxel spacing.
pub fn vertex_labels_from_scar(
    lab: &LabelVolume,
    mesh: &SurfaceMesh,
    wall_thickness_mm: f64,
) -> Result<Vec<u8>> {
    if mesh.normals.len() != mesh.vertices.len() {
        return Err(Error::Input("mesh normals missing".into()));
    }
    let min_spacing = lab
        .spacing_mm
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let step = (0.5 * min_spacing).max(1e-6);
    let n_steps = (wall_thickness_mm / step).ceil() as i64;
    let labels = crate::par::map_indexed(mesh.n_vertices(), |v| {
        for s in -n_steps..=n_steps {
            let t = (s as f64 * step).clamp(-wall_thickness_mm, wall_thickness_mm);
            let p = vec3::add(mesh.vertices[v], vec3::scale(mesh.normals[v], t));
            if lab.label_at_mm(p) == Some(2) {
                return 1u8;
            }
        }
        0u8
    });
    Ok(labels)
}

fn uniform_shift(seed: u64, range: f64) -> f64 {
    use rand::Rng;
    if range == 0.0 {
        return 0.0;
    }
    let mut r = rng::rng_from(seed);
    r.gen_range(-range..=range)
}

/// Builds the training library. Unary: one randomly shifted patch per
/// selected vertex (majority class subsampled to the minority count when
/// `balance` is set). Pairwise: `pairs_per_edge` independently shifted
/// patch pairs per mesh edge, with the 3D edge length and a hard 0/1
/// similarity target from the vertex labels. Per-item seeds make the
/// result independent of thread count.
pub fn build_library(
    vol: &Volume3D,
    mesh: &SurfaceMesh,
    gt_vertex_labels: &[u8],
    cfg: &LibraryConfig,
) -> Result<PatchLibrary> {
    if gt_vertex_labels.len() != mesh.n_vertices() {
        return Err(Error::Dimension(format!(
            "{} vertex labels for {} vertices",
            gt_vertex_labels.len(),
            mesh.n_vertices()
        )));
    }
    if let Some(&bad) = gt_vertex_labels.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("vertex label {bad} outside {{0,1}}")));
    }

    let selected: Vec<usize> = if cfg.balance {
        let scar: Vec<usize> = (0..gt_vertex_labels.len())
            .filter(|&v| gt_vertex_labels[v] == 1)
            .collect();
        let bg: Vec<usize> = (0..gt_vertex_labels.len())
            .filter(|&v| gt_vertex_labels[v] == 0)
            .collect();
        if scar.is_empty() || bg.is_empty() {
            return Err(Error::Input(
                "class balancing requires both classes in the ground truth".into(),
            ));
        }
        let target = scar.len().min(bg.len());
        let subsample = |class: &[usize], stream: &str| -> Vec<usize> {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = class.to_vec();
            let mut r = rng::rng_from(rng::derive_seed(cfg.rng_seed, stream));
            idx.shuffle(&mut r);
            let mut chosen: Vec<usize> = idx.into_iter().take(target).collect();
            chosen.sort_unstable();
            chosen
        };
        let mut sel = subsample(&scar, "balance-scar");
        sel.extend(subsample(&bg, "balance-bg"));
        sel.sort_unstable();
        sel
    } else {
        (0..mesh.n_vertices()).collect()
    };

    let unary: Vec<(Patch, u8)> = crate::par::map_indexed(selected.len(), |i| {
        let v = selected[i];
        let frame = local_frame(mesh, v).expect("frame for labeled vertex");
        let shift = uniform_shift(
            rng::derive_item_seed(cfg.rng_seed, "unary-shift", v as u64),
            cfg.shift_range_mm,
        );
        let patch = extract_patch(vol, &frame, cfg.size, cfg.step_mm, shift, v)
            .expect("validated patch geometry");
        (patch, gt_vertex_labels[v])
    });

    let chosen_edges: Vec<usize> = match cfg.max_pairs {
        Some(cap) if cap < mesh.edges.len() => {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..mesh.edges.len()).collect();
            let mut r = rng::rng_from(rng::derive_seed(cfg.rng_seed, "edge-subsample"));
            idx.shuffle(&mut r);
            let mut chosen: Vec<usize> = idx.into_iter().take(cap).collect();
            chosen.sort_unstable();
            chosen
        }
        _ => (0..mesh.edges.len()).collect(),
    };
    let n_edges = chosen_edges.len();
    let pairwise: Vec<(Patch, Patch, f64, f64)> =
        crate::par::map_indexed(n_edges * cfg.pairs_per_edge, |i| {
            let e = chosen_edges[i / cfg.pairs_per_edge];
            let rep = (i % cfg.pairs_per_edge) as u64;
            let (u, v, len) = mesh.edges[e];
            let item = (e as u64) * 1024 + rep;
            let shift_u = uniform_shift(
                rng::derive_item_seed(cfg.rng_seed, "pair-shift-u", item),
                cfg.shift_range_mm,
            );
            let shift_v = uniform_shift(
                rng::derive_item_seed(cfg.rng_seed, "pair-shift-v", item),
                cfg.shift_range_mm,
            );
            let frame_u = local_frame(mesh, u).expect("frame");
            let frame_v = local_frame(mesh, v).expect("frame");
            let patch_u = extract_patch(vol, &frame_u, cfg.size, cfg.step_mm, shift_u, u)
                .expect("validated patch geometry");
            let patch_v = extract_patch(vol, &frame_v, cfg.size, cfg.step_mm, shift_v, v)
                .expect("validated patch geometry");
            let similarity = if gt_vertex_labels[u] == gt_vertex_labels[v] {
                1.0
            } else {
                0.0
            };
            (patch_u, patch_v, len, similarity)
        });

    Ok(PatchLibrary { unary, pairwise })
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryHeader {
    size: PatchSize,
    step_mm: [f64; 3],
    unary_labels: Vec<u8>,
    unary_vertices: Vec<usize>,
    unary_shifts: Vec<f64>,
    pair_vertices: Vec<(usize, usize)>,
    pair_shifts: Vec<(f64, f64)>,
    pair_distances: Vec<f64>,
    pair_similarities: Vec<f64>,
}

/// Single-file format: one JSON header line, then all patch values as
/// f32le (unary patches first, then pairwise pairs in order).
pub fn save_library(lib: &PatchLibrary, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let (size, step_mm) = match (lib.unary.first(), lib.pairwise.first()) {
        (Some((p, _)), _) => (p.size, p.step_mm),
        (None, Some((p, _, _, _))) => (p.size, p.step_mm),
        (None, None) => return Err(Error::Input("refusing to save an empty library".into())),
    };
    let header = LibraryHeader {
        size,
        step_mm,
        unary_labels: lib.unary.iter().map(|(_, l)| *l).collect(),
        unary_vertices: lib.unary.iter().map(|(p, _)| p.vertex).collect(),
        unary_shifts: lib.unary.iter().map(|(p, _)| p.normal_shift_mm).collect(),
        pair_vertices: lib
            .pairwise
            .iter()
            .map(|(a, b, _, _)| (a.vertex, b.vertex))
            .collect(),
        pair_shifts: lib
            .pairwise
            .iter()
            .map(|(a, b, _, _)| (a.normal_shift_mm, b.normal_shift_mm))
            .collect(),
        pair_distances: lib.pairwise.iter().map(|(_, _, d, _)| *d).collect(),
        pair_similarities: lib.pairwise.iter().map(|(_, _, _, s)| *s).collect(),
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    let mut push_patch = |p: &Patch| {
        for &v in &p.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for (p, _) in &lib.unary {
        push_patch(p);
    }
    for (a, b, _, _) in &lib.pairwise {
        push_patch(a);
        push_patch(b);
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_library(path: impl AsRef<std::path::Path>) -> Result<PatchLibrary> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path.display().to_string(), "missing header line"))?;
    let header: LibraryHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let payload = &bytes[nl + 1..];
    let patch_len = header.size[0] * header.size[1] * header.size[2];
    let n_patches = header.unary_labels.len() + 2 * header.pair_distances.len();
    if payload.len() != n_patches * patch_len * 4 {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                n_patches * patch_len * 4
            ),
        ));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut next_patch = |vertex: usize, shift: f64| -> Patch {
        Patch {
            size: header.size,
            step_mm: header.step_mm,
            values: floats.by_ref().take(patch_len).collect(),
            vertex,
            normal_shift_mm: shift,
        }
    };
    let mut unary = Vec::with_capacity(header.unary_labels.len());
    for i in 0..header.unary_labels.len() {
        let p = next_patch(header.unary_vertices[i], header.unary_shifts[i]);
        unary.push((p, header.unary_labels[i]));
    }
    let mut pairwise = Vec::with_capacity(header.pair_distances.len());
    for i in 0..header.pair_distances.len() {
        let (u, v) = header.pair_vertices[i];
        let (su, sv) = header.pair_shifts[i];
        let a = next_patch(u, su);
        let b = next_patch(v, sv);
        pairwise.push((a, b, header.pair_distances[i], header.pair_similarities[i]));
    }
    Ok(PatchLibrary { unary, pairwise })
}
