//! Volume containers, trilinear sampling, intensity normalization, file I/O.
//!
//! World coordinates are millimeters throughout: `point_mm = origin +
//! index * spacing`, with voxel centers at integer indices. Payloads are
//! stored row-major with x fastest.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::Vec3;

/// 3D scalar grid with physical spacing. Intensities are computed in f64
/// in memory and stored as f32 on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub data: Vec<f64>,
}

/// 3D grid of small integer labels. 0 = background, 1 = cavity/blood pool,
/// 2 = scar ground truth where present.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub data: Vec<u8>,
}

pub const MAX_LABEL: u8 = 2;

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Geometry(format!("non-positive dims {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Geometry(format!("non-positive spacing {spacing:?}")));
    }
    let expect = dims[0] * dims[1] * dims[2];
    if len != expect {
        return Err(Error::Dimension(format!(
            "data length {len} does not match dims {dims:?} (expected {expect})"
        )));
    }
    Ok(())
}

impl Volume3D {
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        data: Vec<f64>,
    ) -> Result<Self> {
        check_geometry(dims, spacing_mm, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite intensity in volume".into()));
        }
        Ok(Self {
            dims,
            spacing_mm,
            origin_mm,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3], value: f64) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            dims,
            spacing_mm,
            origin_mm,
            data: vec![value; n],
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    /// World position of the voxel center at integer index (i, j, k).
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin_mm[0] + i as f64 * self.spacing_mm[0],
            self.origin_mm[1] + j as f64 * self.spacing_mm[1],
            self.origin_mm[2] + k as f64 * self.spacing_mm[2],
        ]
    }
}

impl LabelVolume {
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        data: Vec<u8>,
    ) -> Result<Self> {
        check_geometry(dims, spacing_mm, data.len())?;
        if let Some(&bad) = data.iter().find(|&&l| l > MAX_LABEL) {
            return Err(Error::Input(format!("label {bad} out of range 0..=2")));
        }
        Ok(Self {
            dims,
            spacing_mm,
            origin_mm,
            data,
        })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin_mm[0] + i as f64 * self.spacing_mm[0],
            self.origin_mm[1] + j as f64 * self.spacing_mm[1],
            self.origin_mm[2] + k as f64 * self.spacing_mm[2],
        ]
    }

    pub fn same_geometry(&self, vol: &Volume3D) -> bool {
        self.dims == vol.dims && self.spacing_mm == vol.spacing_mm && self.origin_mm == vol.origin_mm
    }

    /// Label of the voxel whose center is nearest to the mm point, or
    /// `None` outside the grid.
    pub fn label_at_mm(&self, p: Vec3) -> Option<u8> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = (p[a] - self.origin_mm[a]) / self.spacing_mm[a];
            let r = u.round();
            if r < 0.0 || r > (self.dims[a] - 1) as f64 {
                return None;
            }
            idx[a] = r as usize;
        }
        Some(self.at(idx[0], idx[1], idx[2]))
    }

    /// 1.0 inside `target_label`, 0.0 elsewhere, same geometry.
    pub fn indicator(&self, target_label: u8) -> Volume3D {
        Volume3D {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            origin_mm: self.origin_mm,
            data: self
                .data
                .iter()
                .map(|&l| if l == target_label { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// Trilinear interpolation of the 8 surrounding voxels at a world-mm point.
/// Points outside the volume clamp to the boundary, which also handles
/// patch samples poking outside thin phantoms.
pub fn trilinear_sample(vol: &Volume3D, p: Vec3) -> Result<f64> {
    if !crate::vec3::is_finite(p) {
        return Err(Error::Input(format!("non-finite sample point {p:?}")));
    }
    let mut u = [0.0f64; 3];
    for a in 0..3 {
        let v = (p[a] - vol.origin_mm[a]) / vol.spacing_mm[a];
        u[a] = v.clamp(0.0, (vol.dims[a] - 1) as f64);
    }
    let i0 = [
        u[0].floor() as usize,
        u[1].floor() as usize,
        u[2].floor() as usize,
    ];
    let i1 = [
        (i0[0] + 1).min(vol.dims[0] - 1),
        (i0[1] + 1).min(vol.dims[1] - 1),
        (i0[2] + 1).min(vol.dims[2] - 1),
    ];
    let d = [u[0] - i0[0] as f64, u[1] - i0[1] as f64, u[2] - i0[2] as f64];

    let c000 = vol.at(i0[0], i0[1], i0[2]);
    let c100 = vol.at(i1[0], i0[1], i0[2]);
    let c010 = vol.at(i0[0], i1[1], i0[2]);
    let c110 = vol.at(i1[0], i1[1], i0[2]);
    let c001 = vol.at(i0[0], i0[1], i1[2]);
    let c101 = vol.at(i1[0], i0[1], i1[2]);
    let c011 = vol.at(i0[0], i1[1], i1[2]);
    let c111 = vol.at(i1[0], i1[1], i1[2]);

    let c00 = c000 * (1.0 - d[0]) + c100 * d[0];
    let c10 = c010 * (1.0 - d[0]) + c110 * d[0];
    let c01 = c001 * (1.0 - d[0]) + c101 * d[0];
    let c11 = c011 * (1.0 - d[0]) + c111 * d[0];
    let c0 = c00 * (1.0 - d[1]) + c10 * d[1];
    let c1 = c01 * (1.0 - d[1]) + c11 * d[1];
    Ok(c0 * (1.0 - d[2]) + c1 * d[2])
}

/// Z-score normalization by the mean/std of the voxels carrying
/// `band_label` in `mask`. Std is population std, guarded below by 1e-12.
pub fn zscore_normalize(vol: &Volume3D, mask: &LabelVolume, band_label: u8) -> Result<Volume3D> {
    if !mask.same_geometry(vol) {
        return Err(Error::Dimension(
            "mask geometry does not match volume".into(),
        ));
    }
    let band: Vec<f64> = vol
        .data
        .iter()
        .zip(mask.data.iter())
        .filter(|(_, &l)| l == band_label)
        .map(|(&v, _)| v)
        .collect();
    if band.len() < 2 {
        return Err(Error::Input(format!(
            "normalization band (label {band_label}) has {} voxels, need at least 2",
            band.len()
        )));
    }
    let n = band.len() as f64;
    let mean = band.iter().sum::<f64>() / n;
    let var = band.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    Ok(Volume3D {
        dims: vol.dims,
        spacing_mm: vol.spacing_mm,
        origin_mm: vol.origin_mm,
        data: vol.data.iter().map(|v| (v - mean) / std).collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    order: String,
}

const ORDER: &str = "xyz-fastest-x";

fn header_path(prefix: &Path) -> std::path::PathBuf {
    prefix.with_extension("json")
}

fn raw_path(prefix: &Path) -> std::path::PathBuf {
    prefix.with_extension("raw")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

fn load_header(prefix: &Path) -> Result<VolumeHeader> {
    let hp = header_path(prefix);
    let text = read_file(&hp)?;
    let header: VolumeHeader = serde_json::from_slice(&text)
        .map_err(|e| Error::format(hp.display().to_string(), e.to_string()))?;
    if header.order != ORDER {
        return Err(Error::format(
            hp.display().to_string(),
            format!("unsupported order '{}'", header.order),
        ));
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::format(hp.display().to_string(), "zero dim"));
    }
    if header.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::format(
            hp.display().to_string(),
            "non-positive spacing",
        ));
    }
    Ok(header)
}

/// Writes `<prefix>.json` (header) and `<prefix>.raw` (f32le payload).
pub fn save_volume(vol: &Volume3D, prefix: impl AsRef<Path>) -> Result<()> {
    let prefix = prefix.as_ref();
    let header = VolumeHeader {
        dims: vol.dims,
        spacing_mm: vol.spacing_mm,
        origin_mm: vol.origin_mm,
        dtype: "f32le".into(),
        order: ORDER.into(),
    };
    let text = serde_json::to_vec_pretty(&header).expect("header serializes");
    write_file(&header_path(prefix), &text)?;
    let mut payload = Vec::with_capacity(vol.data.len() * 4);
    for &v in &vol.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(&raw_path(prefix), &payload)
}

pub fn load_volume(prefix: impl AsRef<Path>) -> Result<Volume3D> {
    let prefix = prefix.as_ref();
    let header = load_header(prefix)?;
    let rp = raw_path(prefix);
    if header.dtype != "f32le" {
        return Err(Error::format(
            header_path(prefix).display().to_string(),
            format!("expected dtype f32le, found '{}'", header.dtype),
        ));
    }
    let payload = read_file(&rp)?;
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    if payload.len() != n * 4 {
        return Err(Error::format(
            rp.display().to_string(),
            format!("payload is {} bytes, header implies {}", payload.len(), n * 4),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume3D::new(header.dims, header.spacing_mm, header.origin_mm, data)
}

/// Writes `<prefix>.json` and `<prefix>.raw` (u8 payload).
pub fn save_labels(lab: &LabelVolume, prefix: impl AsRef<Path>) -> Result<()> {
    let prefix = prefix.as_ref();
    let header = VolumeHeader {
        dims: lab.dims,
        spacing_mm: lab.spacing_mm,
        origin_mm: lab.origin_mm,
        dtype: "u8".into(),
        order: ORDER.into(),
    };
    let text = serde_json::to_vec_pretty(&header).expect("header serializes");
    write_file(&header_path(prefix), &text)?;
    write_file(&raw_path(prefix), &lab.data)
}

pub fn load_labels(prefix: impl AsRef<Path>) -> Result<LabelVolume> {
    let prefix = prefix.as_ref();
    let header = load_header(prefix)?;
    if header.dtype != "u8" {
        return Err(Error::format(
            header_path(prefix).display().to_string(),
            format!("expected dtype u8, found '{}'", header.dtype),
        ));
    }
    let rp = raw_path(prefix);
    let payload = read_file(&rp)?;
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    if payload.len() != n {
        return Err(Error::format(
            rp.display().to_string(),
            format!("payload is {} bytes, header implies {}", payload.len(), n),
        ));
    }
    LabelVolume::new(header.dims, header.spacing_mm, header.origin_mm, payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_volume() -> Volume3D {
        // f(x, y, z) = x in mm
        let dims = [5, 4, 3];
        let spacing = [1.0, 1.0, 1.0];
        let origin = [0.0, 0.0, 0.0];
        let mut data = vec![0.0; 60];
        for k in 0..3 {
            for j in 0..4 {
                for i in 0..5 {
                    data[i + 5 * (j + 4 * k)] = i as f64;
                }
            }
        }
        Volume3D::new(dims, spacing, origin, data).unwrap()
    }

    #[test]
    fn constant_volume_samples_constant() {
        let vol = Volume3D::filled([4, 4, 4], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 5.0);
        assert_eq!(trilinear_sample(&vol, [1.3, 2.7, 0.4]).unwrap(), 5.0);
    }

    #[test]
    fn linear_field_is_exact() {
        let vol = ramp_volume();
        let v = trilinear_sample(&vol, [2.5, 1.0, 1.0]).unwrap();
        assert!((v - 2.5).abs() <= 1e-6);
    }

    #[test]
    fn voxel_center_is_identity() {
        let vol = ramp_volume();
        let p = vol.voxel_center(3, 2, 1);
        assert_eq!(trilinear_sample(&vol, p).unwrap(), vol.at(3, 2, 1));
    }

    #[test]
    fn out_of_bounds_clamps() {
        let vol = ramp_volume();
        assert_eq!(trilinear_sample(&vol, [-10.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(trilinear_sample(&vol, [100.0, 1.0, 1.0]).unwrap(), 4.0);
    }

    #[test]
    fn non_finite_point_errors() {
        let vol = ramp_volume();
        assert!(trilinear_sample(&vol, [f64::NAN, 0.0, 0.0]).is_err());
    }

    proptest! {
        // Trilinear interpolation reproduces any globally trilinear field.
        #[test]
        fn reproduces_trilinear_fields(
            c in proptest::array::uniform8(-5.0f64..5.0),
            pts in proptest::collection::vec(proptest::array::uniform3(0.0f64..1.0), 50),
        ) {
            let f = |x: f64, y: f64, z: f64| {
                c[0] + c[1]*x + c[2]*y + c[3]*z + c[4]*x*y + c[5]*x*z + c[6]*y*z + c[7]*x*y*z
            };
            let dims = [6, 5, 4];
            let spacing = [2.0, 1.5, 1.0];
            let origin = [-1.0, 0.5, 3.0];
            let mut data = vec![0.0; dims[0]*dims[1]*dims[2]];
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let x = origin[0] + i as f64 * spacing[0];
                        let y = origin[1] + j as f64 * spacing[1];
                        let z = origin[2] + k as f64 * spacing[2];
                        data[i + dims[0]*(j + dims[1]*k)] = f(x, y, z);
                    }
                }
            }
            let vol = Volume3D::new(dims, spacing, origin, data).unwrap();
            for t in &pts {
                let p = [
                    origin[0] + t[0] * (dims[0]-1) as f64 * spacing[0],
                    origin[1] + t[1] * (dims[1]-1) as f64 * spacing[1],
                    origin[2] + t[2] * (dims[2]-1) as f64 * spacing[2],
                ];
                let got = trilinear_sample(&vol, p).unwrap();
                prop_assert!((got - f(p[0], p[1], p[2])).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zscore_two_point_band() {
        let mut data = vec![0.0; 8];
        data[0] = 1.0;
        data[1] = 3.0;
        let vol = Volume3D::new([2, 2, 2], [1.0; 3], [0.0; 3], data).unwrap();
        let mut labels = vec![0u8; 8];
        labels[0] = 1;
        labels[1] = 1;
        let mask = LabelVolume::new([2, 2, 2], [1.0; 3], [0.0; 3], labels).unwrap();
        let out = zscore_normalize(&vol, &mask, 1).unwrap();
        assert!((out.data[0] + 1.0).abs() < 1e-12);
        assert!((out.data[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zscore_hand_computed() {
        let data = vec![10.0, 10.0, 10.0, 14.0, 0.0, 0.0, 0.0, 0.0];
        let vol = Volume3D::new([2, 2, 2], [1.0; 3], [0.0; 3], data).unwrap();
        let labels = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let mask = LabelVolume::new([2, 2, 2], [1.0; 3], [0.0; 3], labels).unwrap();
        let out = zscore_normalize(&vol, &mask, 1).unwrap();
        let s3 = 3.0f64.sqrt();
        for i in 0..3 {
            assert!((out.data[i] + 1.0 / s3).abs() < 1e-12);
        }
        assert!((out.data[3] - s3).abs() < 1e-12);
    }

    #[test]
    fn zscore_idempotent_band_stats() {
        // Band already zero-mean unit-std.
        let band = vec![-1.0, 1.0, -1.0, 1.0];
        let mut data = vec![0.0; 8];
        data[..4].copy_from_slice(&band);
        let vol = Volume3D::new([2, 2, 2], [1.0; 3], [0.0; 3], data).unwrap();
        let labels = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let mask = LabelVolume::new([2, 2, 2], [1.0; 3], [0.0; 3], labels).unwrap();
        let out = zscore_normalize(&vol, &mask, 1).unwrap();
        let vals: Vec<f64> = out.data[..4].to_vec();
        let mean = vals.iter().sum::<f64>() / 4.0;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() <= 1e-9);
        assert!((std - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn zscore_needs_two_band_voxels() {
        let vol = Volume3D::filled([2, 2, 2], [1.0; 3], [0.0; 3], 1.0);
        let mut labels = vec![0u8; 8];
        labels[0] = 1;
        let mask = LabelVolume::new([2, 2, 2], [1.0; 3], [0.0; 3], labels).unwrap();
        assert!(zscore_normalize(&vol, &mask, 1).is_err());
    }

    #[test]
    fn volume_roundtrip_identity() {
        let dir = tempfile::tempdir().unwrap();
        // f32-representable data so load reproduces memory exactly
        let data: Vec<f64> = (0..24).map(|i| (i as f32 * 0.25f32) as f64).collect();
        let vol = Volume3D::new([4, 3, 2], [0.5, 1.0, 2.0], [1.0, -2.0, 3.0], data).unwrap();
        let prefix = dir.path().join("vol");
        save_volume(&vol, &prefix).unwrap();
        let back = load_volume(&prefix).unwrap();
        assert_eq!(vol, back);

        // Re-saving the loaded volume must reproduce the payload bytes.
        let prefix2 = dir.path().join("vol2");
        save_volume(&back, &prefix2).unwrap();
        let a = std::fs::read(prefix.with_extension("raw")).unwrap();
        let b = std::fs::read(prefix2.with_extension("raw")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_roundtrip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let lab = LabelVolume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![0, 1, 2, 0, 1, 2, 0, 1])
            .unwrap();
        let prefix = dir.path().join("lab");
        save_labels(&lab, &prefix).unwrap();
        assert_eq!(load_labels(&prefix).unwrap(), lab);
    }

    #[test]
    fn payload_size_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume3D::filled([2, 2, 2], [1.0; 3], [0.0; 3], 1.0);
        let prefix = dir.path().join("vol");
        save_volume(&vol, &prefix).unwrap();
        // Truncate the payload behind the header's back.
        std::fs::write(prefix.with_extension("raw"), [0u8; 7]).unwrap();
        assert!(load_volume(&prefix).is_err());
    }

    #[test]
    fn bad_header_spacing_errors() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("vol");
        std::fs::write(
            prefix.with_extension("json"),
            r#"{"dims":[2,2,2],"spacing_mm":[0.0,1.0,1.0],"origin_mm":[0,0,0],"dtype":"f32le","order":"xyz-fastest-x"}"#,
        )
        .unwrap();
        std::fs::write(prefix.with_extension("raw"), vec![0u8; 32]).unwrap();
        assert!(load_volume(&prefix).is_err());
    }
}
