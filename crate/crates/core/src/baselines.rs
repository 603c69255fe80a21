//! Otsu-threshold and GMM-EM scar classifiers on per-vertex intensity
//! features. Both consume the same maximum-intensity projection through
//! the wall as the evaluation harness, so method comparisons stay
//! apples-to-apples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::surface::SurfaceMesh;
use crate::vec3;
use crate::volio::{trilinear_sample, Volume3D};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeFeatureConfig {
    /// Half-extent of the sampling band along the normal (mm).
    pub wall_thickness_mm: f64,
    /// Probe step along the normal (mm).
    pub step_mm: f64,
}

impl NodeFeatureConfig {
    pub fn default_for(vol: &Volume3D, wall_thickness_mm: f64) -> Self {
        let min_spacing = vol
            .spacing_mm
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        Self {
            wall_thickness_mm,
            step_mm: 0.5 * min_spacing,
        }
    }
}

/// Maximum of trilinear samples along the vertex normal within
/// +-wall_thickness (maximum-intensity projection through the wall).
pub fn node_intensity(
    vol: &Volume3D,
    mesh: &SurfaceMesh,
    v: usize,
    cfg: &NodeFeatureConfig,
) -> Result<f64> {
    let normal = *mesh
        .normals
        .get(v)
        .ok_or_else(|| Error::Input(format!("vertex {v} has no normal")))?;
    let n_steps = (cfg.wall_thickness_mm / cfg.step_mm).ceil() as i64;
    let mut best = f64::NEG_INFINITY;
    for s in -n_steps..=n_steps {
        let t = (s as f64 * cfg.step_mm).clamp(-cfg.wall_thickness_mm, cfg.wall_thickness_mm);
        let p = vec3::add(mesh.vertices[v], vec3::scale(normal, t));
        best = best.max(trilinear_sample(vol, p)?);
    }
    Ok(best)
}

/// MIP feature for every vertex.
pub fn node_intensities(
    vol: &Volume3D,
    mesh: &SurfaceMesh,
    cfg: &NodeFeatureConfig,
) -> Result<Vec<f64>> {
    if mesh.normals.len() != mesh.n_vertices() {
        return Err(Error::Input("mesh normals missing".into()));
    }
    Ok(crate::par::map_indexed(mesh.n_vertices(), |v| {
        node_intensity(vol, mesh, v, cfg).expect("normals checked")
    }))
}

/// Otsu threshold: histogram over [min, max], maximizing the between-class
/// variance over all bin-edge splits; ties take the lowest edge. The
/// per-bin mean uses the actual value sums (not bin centers), so the
/// result matches an exhaustive split-by-bin evaluation exactly.
pub fn otsu_threshold(values: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Input(format!("need at least 2 bins, got {bins}")));
    }
    if values.len() < 2 {
        return Err(Error::Input("need at least 2 values".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Input("all values identical".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut count = vec![0usize; bins];
    let mut sum = vec![0.0f64; bins];
    for &v in values {
        let b = bin_of(v, lo, hi, bins);
        count[b] += 1;
        sum[b] += v;
    }
    let total_n = values.len() as f64;
    let total_sum: f64 = sum.iter().sum();

    let mut best_k = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut n0 = 0.0;
    let mut s0 = 0.0;
    // split k puts bins [0,k) in the low class; k in 1..bins keeps both
    // classes potentially non-empty
    for k in 1..bins {
        n0 += count[k - 1] as f64;
        s0 += sum[k - 1];
        let n1 = total_n - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let m0 = s0 / n0;
        let m1 = (total_sum - s0) / n1;
        let var = (n0 / total_n) * (n1 / total_n) * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    Ok(lo + best_k as f64 * width)
}

/// Bin assignment shared by the estimator and the exhaustive oracle.
pub fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = (v - lo) / (hi - lo) * bins as f64;
    (t.floor() as usize).min(bins - 1)
}

/// Labels from an Otsu split: value in a bin at or above the threshold
/// edge is scar.
pub fn otsu_classify(values: &[f64], threshold: f64) -> Vec<u8> {
    values
        .iter()
        .map(|&v| if v >= threshold { 1 } else { 0 })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.weights.len() != k || self.variances.len() != k || k == 0 {
            return Err(Error::Dimension("inconsistent mixture sizes".into()));
        }
        let wsum: f64 = self.weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::Input(format!("weights {:?} must sum to 1", self.weights)));
        }
        if self.variances.iter().any(|&v| v < 1e-12) {
            return Err(Error::Input("variance below floor".into()));
        }
        Ok(())
    }

    /// Per-component responsibilities at x.
    fn posterior(&self, x: f64) -> Vec<f64> {
        let k = self.k();
        let mut logp = vec![0.0; k];
        for i in 0..k {
            let d = x - self.means[i];
            logp[i] = self.weights[i].max(1e-300).ln()
                - 0.5 * (2.0 * std::f64::consts::PI * self.variances[i]).ln()
                - 0.5 * d * d / self.variances[i];
        }
        let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logp.iter().map(|&lp| (lp - m).exp()).collect();
        let s: f64 = p.iter().sum();
        for v in p.iter_mut() {
            *v /= s;
        }
        p
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub rng_seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            rng_seed: 0,
        }
    }
}

/// EM fit from quantile initialization: means at the K evenly spaced
/// sample quantiles ((k+0.5)/K), equal weights, pooled variance. Returns
/// the model and the per-iteration log-likelihoods (non-decreasing).
pub fn gmm_em_fit(values: &[f64], k: usize, cfg: &EmConfig) -> Result<(GmmModel, Vec<f64>)> {
    if k < 2 {
        return Err(Error::Input("need K >= 2 components".into()));
    }
    if values.len() < k {
        return Err(Error::Input(format!(
            "{} values cannot support {k} components",
            values.len()
        )));
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Input(format!(
            "only {} distinct values for {k} components",
            distinct.len()
        )));
    }

    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean_all = values.iter().sum::<f64>() / n as f64;
    let pooled_var = (values
        .iter()
        .map(|v| (v - mean_all) * (v - mean_all))
        .sum::<f64>()
        / n as f64)
        .max(1e-12);

    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: (0..k)
            .map(|i| {
                let q = (i as f64 + 0.5) / k as f64;
                sorted[((q * n as f64) as usize).min(n - 1)]
            })
            .collect(),
        variances: vec![pooled_var; k],
    };

    let log_likelihood = |m: &GmmModel| -> f64 {
        values
            .iter()
            .map(|&x| {
                let mut logs: Vec<f64> = (0..k)
                    .map(|i| {
                        let d = x - m.means[i];
                        m.weights[i].max(1e-300).ln()
                            - 0.5 * (2.0 * std::f64::consts::PI * m.variances[i]).ln()
                            - 0.5 * d * d / m.variances[i]
                    })
                    .collect();
                let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for l in logs.iter_mut() {
                    *l = (*l - mx).exp();
                }
                mx + logs.iter().sum::<f64>().ln()
            })
            .sum()
    };

    let mut lls = vec![log_likelihood(&model)];
    for _ in 0..cfg.max_iter {
        // E-step
        let resp: Vec<Vec<f64>> = values.iter().map(|&x| model.posterior(x)).collect();
        // M-step
        for i in 0..k {
            let nk: f64 = resp.iter().map(|r| r[i]).sum();
            if nk <= 1e-300 {
                continue; // starved component keeps its parameters
            }
            let mean = resp
                .iter()
                .zip(values.iter())
                .map(|(r, &x)| r[i] * x)
                .sum::<f64>()
                / nk;
            let var = resp
                .iter()
                .zip(values.iter())
                .map(|(r, &x)| r[i] * (x - mean) * (x - mean))
                .sum::<f64>()
                / nk;
            model.weights[i] = nk / n as f64;
            model.means[i] = mean;
            model.variances[i] = var.max(1e-12);
        }
        let ll = log_likelihood(&model);
        let prev = *lls.last().unwrap();
        lls.push(ll);
        if ll - prev < cfg.tol {
            break;
        }
    }
    model.validate()?;
    Ok((model, lls))
}

/// MAP assignment: scar iff the posterior of the largest-mean component
/// strictly dominates every other component (ties break to background).
pub fn gmm_classify(model: &GmmModel, values: &[f64]) -> Result<Vec<u8>> {
    model.validate()?;
    let scar_comp = model
        .means
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("validated nonempty");
    Ok(values
        .iter()
        .map(|&x| {
            let post = model.posterior(x);
            let dominant = (0..model.k())
                .all(|j| j == scar_comp || post[scar_comp] > post[j]);
            if dominant {
                1
            } else {
                0
            }
        })
        .collect())
}

/// Seeded helper for tests and experiments: draws from a 2-component
/// mixture and returns (values, component labels).
pub fn sample_two_gaussians(
    n: usize,
    mu: (f64, f64),
    sigma: (f64, f64),
    seed: u64,
) -> (Vec<f64>, Vec<u8>) {
    use rand_distr::{Distribution, Normal};
    let mut r = rng::rng_from(seed);
    let n0 = Normal::new(mu.0, sigma.0).expect("valid sigma");
    let n1 = Normal::new(mu.1, sigma.1).expect("valid sigma");
    let mut values = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        if i % 2 == 0 {
            values.push(n0.sample(&mut r));
            labels.push(0);
        } else {
            values.push(n1.sample(&mut r));
            labels.push(1);
        }
    }
    (values, labels)
}
