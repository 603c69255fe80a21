//! Synthetic atrium-like phantoms: an ellipsoidal blood-pool cavity inside
//! a thin wall shell, with spherical-cap scar blobs on the wall and an
//! optional bright confounder structure just outside it.
//!
//! Intensity model (before noise): background 0, cavity blood 1.0, healthy
//! wall 0.4, scar wall 0.4 + enhancement, confounder 0.4 + enhancement.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vec3;
use crate::volio::{LabelVolume, Volume3D};

pub const BLOOD_INTENSITY: f64 = 1.0;
pub const WALL_INTENSITY: f64 = 0.4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScarBlob {
    /// Unit direction from the cavity center to the blob center on the wall.
    pub direction: [f64; 3],
    /// Angular radius of the spherical cap, in (0, pi].
    pub angular_radius_rad: f64,
    /// Intensity added to the wall value inside the blob; must be > 0.
    pub enhancement: f64,
}

/// Bright structure outside the wall, within 2x wall thickness of it.
/// Mimics enhancement bleeding in from a neighboring chamber.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Confounder {
    pub direction: [f64; 3],
    pub angular_radius_rad: f64,
    pub enhancement: f64,
}

fn default_wall_thickness() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub cavity_center_mm: [f64; 3],
    pub cavity_semi_axes_mm: [f64; 3],
    #[serde(default = "default_wall_thickness")]
    pub wall_thickness_mm: f64,
    #[serde(default)]
    pub scar_blobs: Vec<ScarBlob>,
    #[serde(default)]
    pub confounder: Option<Confounder>,
    #[serde(default)]
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if !(self.wall_thickness_mm > 0.0) {
            return Err(Error::Input("wall thickness must be > 0".into()));
        }
        if self
            .cavity_semi_axes_mm
            .iter()
            .any(|&a| !(a > self.wall_thickness_mm))
        {
            return Err(Error::Input(
                "cavity semi-axes must exceed the wall thickness".into(),
            ));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Input("noise sigma must be finite and >= 0".into()));
        }
        for blob in &self.scar_blobs {
            if !(blob.enhancement > 0.0) {
                return Err(Error::Input("scar blob enhancement must be > 0".into()));
            }
            if !(blob.angular_radius_rad > 0.0 && blob.angular_radius_rad <= std::f64::consts::PI)
            {
                return Err(Error::Input("blob angular radius must be in (0, pi]".into()));
            }
            if vec3::normalize(blob.direction).is_none() {
                return Err(Error::Input("blob direction must be nonzero".into()));
            }
        }
        if let Some(c) = &self.confounder {
            if !(c.enhancement > 0.0) {
                return Err(Error::Input("confounder enhancement must be > 0".into()));
            }
            if vec3::normalize(c.direction).is_none() {
                return Err(Error::Input("confounder direction must be nonzero".into()));
            }
        }
        Ok(())
    }

    /// Replaces the scar blobs with `n_blobs` seeded random caps (directions
    /// uniform on the sphere, radii uniform in `radius_range`) and sets the
    /// noise seed. Used to build train/test phantom suites from one template.
    pub fn with_randomized_blobs(
        &self,
        n_blobs: usize,
        radius_range: (f64, f64),
        enhancement: f64,
        seed: u64,
    ) -> PhantomSpec {
        use rand::Rng;
        let mut rng = rng::rng_from(rng::derive_seed(seed, "phantom-blobs"));
        let mut blobs = Vec::with_capacity(n_blobs);
        for _ in 0..n_blobs {
            // Uniform direction via normalized Gaussian triple.
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            let dir = loop {
                let v = [
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                ];
                if let Some(u) = vec3::normalize(v) {
                    break u;
                }
            };
            let radius = rng.gen_range(radius_range.0..=radius_range.1);
            blobs.push(ScarBlob {
                direction: dir,
                angular_radius_rad: radius,
                enhancement,
            });
        }
        PhantomSpec {
            scar_blobs: blobs,
            rng_seed: seed,
            ..self.clone()
        }
    }
}

/// Signed radial distance (mm) from the ellipsoid surface, measured along
/// the ray from the center: negative inside the cavity.
fn radial_distance(p: vec3::Vec3, center: vec3::Vec3, semi: vec3::Vec3) -> f64 {
    let d = vec3::sub(p, center);
    let r = vec3::norm(d);
    if r == 0.0 {
        return -semi.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    let u = vec3::scale(d, 1.0 / r);
    let q = (u[0] / semi[0]).powi(2) + (u[1] / semi[1]).powi(2) + (u[2] / semi[2]).powi(2);
    let surface_r = 1.0 / q.sqrt();
    r - surface_r
}

fn in_cap(u: vec3::Vec3, direction: vec3::Vec3, angular_radius: f64) -> bool {
    let d = vec3::normalize(direction).expect("validated direction");
    vec3::dot(u, d).clamp(-1.0, 1.0).acos() <= angular_radius
}

/// Generates the phantom image and label volumes. Deterministic given the
/// spec; the noise pass is a single sequential stream so the output does
/// not depend on thread count.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume3D, LabelVolume)> {
    spec.validate()?;
    let dims = spec.dims;
    let n = dims[0] * dims[1] * dims[2];
    let origin = [0.0, 0.0, 0.0];
    let center = spec.cavity_center_mm;
    let semi = spec.cavity_semi_axes_mm;
    let wt = spec.wall_thickness_mm;

    let cells = crate::par::map_indexed(n, |idx| {
        let i = idx % dims[0];
        let j = (idx / dims[0]) % dims[1];
        let k = idx / (dims[0] * dims[1]);
        let p = [
            origin[0] + i as f64 * spec.spacing_mm[0],
            origin[1] + j as f64 * spec.spacing_mm[1],
            origin[2] + k as f64 * spec.spacing_mm[2],
        ];
        let radial = radial_distance(p, center, semi);
        if radial <= 0.0 {
            return (BLOOD_INTENSITY, 1u8);
        }
        let u = vec3::normalize(vec3::sub(p, center)).expect("outside center");
        if radial <= wt {
            for blob in &spec.scar_blobs {
                if in_cap(u, blob.direction, blob.angular_radius_rad) {
                    return (WALL_INTENSITY + blob.enhancement, 2u8);
                }
            }
            return (WALL_INTENSITY, 0u8);
        }
        if let Some(c) = &spec.confounder {
            if radial <= 3.0 * wt && in_cap(u, c.direction, c.angular_radius_rad) {
                return (WALL_INTENSITY + c.enhancement, 0u8);
            }
        }
        (0.0, 0u8)
    });

    let mut intensities: Vec<f64> = cells.iter().map(|&(v, _)| v).collect();
    let labels: Vec<u8> = cells.iter().map(|&(_, l)| l).collect();

    let wall_voxels = labels
        .iter()
        .zip(intensities.iter())
        .filter(|(&l, &v)| l != 1 && v >= WALL_INTENSITY)
        .count();
    if wall_voxels == 0 {
        return Err(Error::Geometry(
            "phantom geometry produced no wall voxels".into(),
        ));
    }

    if spec.noise_sigma > 0.0 {
        let mut r = rng::rng_from(spec.rng_seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for v in intensities.iter_mut() {
            *v += normal.sample(&mut r);
        }
    }

    let vol = Volume3D::new(dims, spec.spacing_mm, origin, intensities)?;
    let lab = LabelVolume::new(dims, spec.spacing_mm, origin, labels)?;
    Ok((vol, lab))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn base_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [40, 40, 40],
            spacing_mm: [1.0, 1.0, 1.0],
            cavity_center_mm: [19.5, 19.5, 19.5],
            cavity_semi_axes_mm: [12.0, 10.0, 11.0],
            wall_thickness_mm: 2.0,
            scar_blobs: vec![],
            confounder: None,
            noise_sigma: 0.0,
            rng_seed: 11,
        }
    }

    fn wall_indices(vol: &Volume3D, lab: &LabelVolume) -> Vec<usize> {
        (0..vol.data.len())
            .filter(|&i| lab.data[i] != 1 && vol.data[i] >= WALL_INTENSITY - 1e-12)
            .collect()
    }

    #[test]
    fn noiseless_wall_is_constant() {
        let (vol, lab) = make_phantom(&base_spec()).unwrap();
        let wall = wall_indices(&vol, &lab);
        assert!(!wall.is_empty());
        for i in wall {
            assert_eq!(vol.data[i], WALL_INTENSITY);
        }
    }

    #[test]
    fn deterministic_given_spec() {
        let mut spec = base_spec();
        spec.noise_sigma = 0.15;
        let (v1, l1) = make_phantom(&spec).unwrap();
        let (v2, l2) = make_phantom(&spec).unwrap();
        assert_eq!(v1.data, v2.data);
        assert_eq!(l1.data, l2.data);
    }

    #[test]
    fn full_cap_covers_all_wall() {
        let mut spec = base_spec();
        spec.scar_blobs = vec![ScarBlob {
            direction: [0.0, 0.0, 1.0],
            angular_radius_rad: std::f64::consts::PI,
            enhancement: 0.8,
        }];
        let (vol, lab) = make_phantom(&spec).unwrap();
        for i in 0..vol.data.len() {
            if lab.data[i] != 1 && vol.data[i] > 0.1 {
                // every non-cavity tissue voxel is wall; all must be scar
                assert_eq!(lab.data[i], 2, "wall voxel {i} not marked scar");
            }
        }
    }

    #[test]
    fn non_positive_enhancement_rejected() {
        let mut spec = base_spec();
        spec.scar_blobs = vec![ScarBlob {
            direction: [1.0, 0.0, 0.0],
            angular_radius_rad: 0.5,
            enhancement: 0.0,
        }];
        assert!(make_phantom(&spec).is_err());
    }

    #[test]
    fn degenerate_geometry_rejected() {
        let mut spec = base_spec();
        spec.cavity_semi_axes_mm = [1.0, 1.0, 1.0]; // below wall thickness
        assert!(make_phantom(&spec).is_err());
    }

    #[test]
    fn scar_subset_of_wall_and_cavity_connected() {
        let mut spec = base_spec();
        spec.scar_blobs = vec![ScarBlob {
            direction: [1.0, 0.0, 0.0],
            angular_radius_rad: 0.7,
            enhancement: 0.8,
        }];
        let (vol, lab) = make_phantom(&spec).unwrap();

        // scar voxels lie in the wall shell (intensity model check)
        for i in 0..lab.data.len() {
            if lab.data[i] == 2 {
                assert!((vol.data[i] - 1.2).abs() < 1e-12);
            }
        }

        // cavity voxels form one 6-connected component
        let dims = lab.dims;
        let cavity: Vec<usize> = (0..lab.data.len()).filter(|&i| lab.data[i] == 1).collect();
        assert!(!cavity.is_empty());
        let mut seen = vec![false; lab.data.len()];
        let mut queue = std::collections::VecDeque::new();
        seen[cavity[0]] = true;
        queue.push_back(cavity[0]);
        let mut count = 1usize;
        while let Some(idx) = queue.pop_front() {
            let i = idx % dims[0];
            let j = (idx / dims[0]) % dims[1];
            let k = idx / (dims[0] * dims[1]);
            let mut push = |ni: isize, nj: isize, nk: isize| {
                if ni < 0 || nj < 0 || nk < 0 {
                    return;
                }
                let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                if ni >= dims[0] || nj >= dims[1] || nk >= dims[2] {
                    return;
                }
                let nidx = ni + dims[0] * (nj + dims[1] * nk);
                if lab.data[nidx] == 1 && !seen[nidx] {
                    seen[nidx] = true;
                    count += 1;
                    queue.push_back(nidx);
                }
            };
            let (i, j, k) = (i as isize, j as isize, k as isize);
            push(i - 1, j, k);
            push(i + 1, j, k);
            push(i, j - 1, k);
            push(i, j + 1, k);
            push(i, j, k - 1);
            push(i, j, k + 1);
        }
        assert_eq!(count, cavity.len(), "cavity not 6-connected");
    }

    #[test]
    fn scar_fraction_monotone_in_radius() {
        let radii = [0.2, 0.5, 0.9, 1.6, std::f64::consts::PI];
        let mut last = 0.0;
        for &r in &radii {
            let mut spec = base_spec();
            spec.scar_blobs = vec![ScarBlob {
                direction: [0.3, -0.5, 0.8],
                angular_radius_rad: r,
                enhancement: 0.8,
            }];
            let (vol, lab) = make_phantom(&spec).unwrap();
            let wall = wall_indices(&vol, &lab).len();
            let scar = lab.data.iter().filter(|&&l| l == 2).count();
            let frac = scar as f64 / wall as f64;
            assert!(
                frac >= last - 1e-12,
                "scar fraction not monotone: {frac} after {last}"
            );
            last = frac;
        }
    }

    #[test]
    fn confounder_sits_outside_wall() {
        let mut spec = base_spec();
        spec.confounder = Some(Confounder {
            direction: [1.0, 0.0, 0.0],
            angular_radius_rad: 0.6,
            enhancement: 0.8,
        });
        let (vol, lab) = make_phantom(&spec).unwrap();
        let bright_outside: Vec<usize> = (0..vol.data.len())
            .filter(|&i| lab.data[i] == 0 && (vol.data[i] - 1.2).abs() < 1e-12)
            .collect();
        assert!(!bright_outside.is_empty());
        // none of them belong to the wall shell
        for idx in bright_outside {
            let i = idx % 40;
            let j = (idx / 40) % 40;
            let k = idx / 1600;
            let p = [i as f64, j as f64, k as f64];
            let d = radial_distance(p, spec.cavity_center_mm, spec.cavity_semi_axes_mm);
            assert!(d > spec.wall_thickness_mm);
            assert!(d <= 3.0 * spec.wall_thickness_mm + 1e-9);
        }
    }
}
