//! Confusion metrics, method comparison on phantom suites, and the lambda
//! and patch-size sweeps.
//!
//! An [`ExperimentSetup`] describes a family of phantoms (one geometry
//! template, per-member randomized scar caps and noise), a train/test
//! split and the training recipe. Networks are trained once on the
//! training members and evaluated on every test member, mirroring the
//! usual train/test protocol at desk scale.

use serde::{Deserialize, Serialize};

use crate::baselines::{
    gmm_classify, gmm_em_fit, node_intensities, otsu_classify, otsu_threshold, EmConfig,
    NodeFeatureConfig,
};
use crate::error::{Error, Result};
use crate::flatmap;
use crate::graphcut::{cut_stats, min_cut, GraphConfig, SegGraph};
use crate::neural::{
    train_tlink, train_nlink, NlinkArch, NlinkNet, TlinkArch, TlinkNet, TrainConfig, TrainReport,
};
use crate::patches::{build_library, vertex_labels_from_scar, LibraryConfig, PatchLibrary, PatchSize};
use crate::phantom::{make_phantom, PhantomSpec};
use crate::rng;
use crate::surface::{extract_surface, SurfaceMesh};
use crate::volio::{LabelVolume, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub dice: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// Confusion metrics with the vacuous-denominator convention: a ratio
/// whose denominator is empty scores 1 (perfect agreement on nothing).
pub fn compute_metrics(pred: &[u8], gt: &[u8]) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} entries, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(Metrics {
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        tp,
        fp,
        tn,
        fn_,
    })
}

/// One result row of a sweep or comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub seed: u64,
    pub metrics: Metrics,
}

/// `param,accuracy,sensitivity,specificity,dice,seed`, one row per
/// (point, seed), input order preserved.
pub fn metrics_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("param,accuracy,sensitivity,specificity,dice,seed\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.param,
            row.metrics.accuracy,
            row.metrics.sensitivity,
            row.metrics.specificity,
            row.metrics.dice,
            row.seed
        ));
    }
    out
}

pub fn save_metrics_csv(rows: &[SweepRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn mean_dice(rows: &[SweepRow], param: &str) -> f64 {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.param == param)
        .map(|r| r.metrics.dice)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Phantom family + training recipe for the comparison studies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSetup {
    /// Geometry template; each member gets seeded random scar caps and its
    /// own noise stream.
    pub base: PhantomSpec,
    pub n_blobs: usize,
    pub blob_radius_range: (f64, f64),
    pub blob_enhancement: f64,
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
    pub patch_size: PatchSize,
    pub shift_range_mm: f64,
    pub pairs_per_edge: usize,
    pub max_pairs: Option<usize>,
    pub tlink_arch: TlinkArch,
    pub nlink_arch: NlinkArch,
    pub tlink_cfg: TrainConfig,
    pub nlink_cfg: TrainConfig,
    pub lambda: f64,
}

impl ExperimentSetup {
    /// Phantom member for one seed of the suite.
    pub fn member_spec(&self, seed: u64) -> PhantomSpec {
        self.base.with_randomized_blobs(
            self.n_blobs,
            self.blob_radius_range,
            self.blob_enhancement,
            seed,
        )
    }

    fn library_config(&self, vol: &Volume3D, seed: u64) -> LibraryConfig {
        let mut cfg = LibraryConfig::default_for(vol, seed);
        cfg.size = self.patch_size;
        cfg.shift_range_mm = self.shift_range_mm;
        cfg.pairs_per_edge = self.pairs_per_edge;
        cfg.max_pairs = self.max_pairs;
        cfg
    }

    fn wall_thickness(&self) -> f64 {
        self.base.wall_thickness_mm
    }
}

/// One evaluated phantom: surface, ground truth and per-node features.
pub struct PreparedCase {
    pub seed: u64,
    pub vol: Volume3D,
    pub lab: LabelVolume,
    pub mesh: SurfaceMesh,
    pub gt: Vec<u8>,
    pub features: Vec<f64>,
}

pub fn prepare_case(setup: &ExperimentSetup, seed: u64) -> Result<PreparedCase> {
    let spec = setup.member_spec(seed);
    let (vol, lab) = make_phantom(&spec)?;
    let mesh = extract_surface(&lab, 1)?;
    let gt = vertex_labels_from_scar(&lab, &mesh, setup.wall_thickness())?;
    let feature_cfg = NodeFeatureConfig::default_for(&vol, setup.wall_thickness());
    let features = node_intensities(&vol, &mesh, &feature_cfg)?;
    Ok(PreparedCase {
        seed,
        vol,
        lab,
        mesh,
        gt,
        features,
    })
}

/// Builds the pooled training library over all training members.
pub fn build_training_library(setup: &ExperimentSetup) -> Result<PatchLibrary> {
    let mut pooled = PatchLibrary::default();
    for (i, &seed) in setup.train_seeds.iter().enumerate() {
        let case = prepare_case(setup, seed)?;
        let lib_seed = rng::derive_item_seed(seed, "library", i as u64);
        let cfg = setup.library_config(&case.vol, lib_seed);
        let lib = build_library(&case.vol, &case.mesh, &case.gt, &cfg)?;
        pooled.unary.extend(lib.unary);
        pooled.pairwise.extend(lib.pairwise);
    }
    Ok(pooled)
}

pub struct TrainedNets {
    pub tlink: TlinkNet,
    pub nlink: NlinkNet,
    pub tlink_report: TrainReport,
    pub nlink_report: TrainReport,
}

pub fn train_nets(setup: &ExperimentSetup) -> Result<TrainedNets> {
    let library = build_training_library(setup)?;
    let (tlink, tlink_report) = train_tlink(&library.unary, &setup.tlink_arch, &setup.tlink_cfg)?;
    let (nlink, nlink_report) = train_nlink(&library.pairwise, &setup.nlink_arch, &setup.nlink_cfg)?;
    Ok(TrainedNets {
        tlink,
        nlink,
        tlink_report,
        nlink_report,
    })
}

/// Learned-potential graph for a prepared case, with lambda left at the
/// setup default (rescale via `with_lambda`).
pub fn case_graph(
    setup: &ExperimentSetup,
    case: &PreparedCase,
    nets: &TrainedNets,
) -> Result<SegGraph> {
    let map_seed = rng::derive_seed(case.seed, "flatmap");
    let seed_vertex = flatmap::default_seed(&case.mesh, map_seed)?;
    let map = flatmap::equidistant_project(&case.mesh, seed_vertex)?;
    let mut graph_cfg = GraphConfig::default_for(&case.vol);
    graph_cfg.lambda = setup.lambda;
    graph_cfg.size = setup.patch_size;
    crate::graphcut::build_seg_graph(
        &case.mesh,
        &map,
        &case.vol,
        &nets.tlink,
        &nets.nlink,
        &graph_cfg,
    )
}

/// Per-seed comparison of the learned graph cut against both baselines.
/// Emits rows with params `learngc`, `gmm`, `otsu`.
pub fn evaluate_methods(
    setup: &ExperimentSetup,
    nets: &TrainedNets,
    extra_specs: &[(String, PhantomSpec)],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut run_case = |tag: Option<&str>, case: &PreparedCase| -> Result<()> {
        let graph = case_graph(setup, case, nets)?;
        let (labels, _) = min_cut(&graph)?;
        let suffix = tag.map(|t| format!("-{t}")).unwrap_or_default();
        rows.push(SweepRow {
            param: format!("learngc{suffix}"),
            seed: case.seed,
            metrics: compute_metrics(&labels, &case.gt)?,
        });

        let (model, _) = gmm_em_fit(&case.features, 2, &EmConfig::default())?;
        let gmm_labels = gmm_classify(&model, &case.features)?;
        rows.push(SweepRow {
            param: format!("gmm{suffix}"),
            seed: case.seed,
            metrics: compute_metrics(&gmm_labels, &case.gt)?,
        });

        let threshold = otsu_threshold(&case.features, 256)?;
        let otsu_labels = otsu_classify(&case.features, threshold);
        rows.push(SweepRow {
            param: format!("otsu{suffix}"),
            seed: case.seed,
            metrics: compute_metrics(&otsu_labels, &case.gt)?,
        });
        Ok(())
    };

    for &seed in &setup.test_seeds {
        let case = prepare_case(setup, seed)?;
        run_case(None, &case)?;
    }
    for (tag, spec) in extra_specs {
        let (vol, lab) = make_phantom(spec)?;
        let mesh = extract_surface(&lab, 1)?;
        let gt = vertex_labels_from_scar(&lab, &mesh, setup.wall_thickness())?;
        let feature_cfg = NodeFeatureConfig::default_for(&vol, setup.wall_thickness());
        let features = node_intensities(&vol, &mesh, &feature_cfg)?;
        let case = PreparedCase {
            seed: spec.rng_seed,
            vol,
            lab,
            mesh,
            gt,
            features,
        };
        run_case(Some(tag), &case)?;
    }
    Ok(rows)
}

/// One segment run per lambda per test seed, identical phantoms and nets
/// across the lambda list. Node potentials do not depend on lambda, so the
/// prepared graph is reused and only the cut is re-solved — results match
/// running the full pipeline per lambda.
pub fn sweep_lambda(
    setup: &ExperimentSetup,
    nets: &TrainedNets,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &seed in &setup.test_seeds {
        let case = prepare_case(setup, seed)?;
        let graph = case_graph(setup, &case, nets)?;
        for &lambda in lambdas {
            let g = graph.with_lambda(lambda)?;
            let (labels, _) = min_cut(&g)?;
            let _ = cut_stats(&g, &labels);
            rows.push(SweepRow {
                param: format!("{lambda}"),
                seed,
                metrics: compute_metrics(&labels, &case.gt)?,
            });
        }
    }
    // fixed output ordering: by lambda position, then seed position
    let mut ordered = Vec::with_capacity(rows.len());
    for &lambda in lambdas {
        let key = format!("{lambda}");
        for &seed in &setup.test_seeds {
            let row = rows
                .iter()
                .find(|r| r.param == key && r.seed == seed)
                .expect("row exists");
            ordered.push(row.clone());
        }
    }
    Ok(ordered)
}

/// Retrains both networks per patch size (fixed seeds) and evaluates the
/// graph cut on every test member. Params are `SXxSYxSN` strings.
pub fn sweep_patch_size(setup: &ExperimentSetup, sizes: &[PatchSize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &size in sizes {
        let sized = ExperimentSetup {
            patch_size: size,
            ..setup.clone()
        };
        let nets = train_nets(&sized)?;
        let param = format!("{}x{}x{}", size[0], size[1], size[2]);
        for &seed in &sized.test_seeds {
            let case = prepare_case(&sized, seed)?;
            let graph = case_graph(&sized, &case, &nets)?;
            let (labels, _) = min_cut(&graph)?;
            rows.push(SweepRow {
                param: param.clone(),
                seed,
                metrics: compute_metrics(&labels, &case.gt)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_prediction_scores_one() {
        let gt = vec![0, 1, 1, 0, 1];
        let m = compute_metrics(&gt, &gt).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.sensitivity, 1.0);
        assert_eq!(m.specificity, 1.0);
        assert_eq!(m.dice, 1.0);
    }

    #[test]
    fn complement_prediction_scores_zero() {
        let gt = vec![0, 1, 1, 0];
        let pred = vec![1, 0, 0, 1];
        let m = compute_metrics(&pred, &gt).unwrap();
        assert_eq!(m.accuracy, 0.0);
        assert_eq!(m.dice, 0.0);
    }

    #[test]
    fn dice_hand_case() {
        // TP=3, FP=3, FN=1 -> dice 6/10
        let gt = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let pred = vec![1, 1, 1, 0, 1, 1, 1, 0];
        let m = compute_metrics(&pred, &gt).unwrap();
        assert_eq!(m.tp, 3);
        assert_eq!(m.fp, 3);
        assert_eq!(m.fn_, 1);
        assert!((m.dice - 0.6).abs() < 1e-12);
    }

    #[test]
    fn vacuous_denominators_score_one() {
        let m = compute_metrics(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(m.sensitivity, 1.0);
        assert_eq!(m.dice, 1.0);
        let m = compute_metrics(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(m.specificity, 1.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(compute_metrics(&[0, 1], &[0]).is_err());
    }

    proptest! {
        // metric identities against a direct confusion recount
        #[test]
        fn metric_identities(pred in proptest::collection::vec(0u8..2, 1..200),
                             gt_bits in proptest::collection::vec(0u8..2, 1..200)) {
            let n = pred.len().min(gt_bits.len());
            let pred = &pred[..n];
            let gt = &gt_bits[..n];
            let m = compute_metrics(pred, gt).unwrap();
            let tp = pred.iter().zip(gt).filter(|(&p, &g)| p == 1 && g == 1).count() as u64;
            let fp = pred.iter().zip(gt).filter(|(&p, &g)| p == 1 && g == 0).count() as u64;
            let tn = pred.iter().zip(gt).filter(|(&p, &g)| p == 0 && g == 0).count() as u64;
            let fn_ = pred.iter().zip(gt).filter(|(&p, &g)| p == 0 && g == 1).count() as u64;
            prop_assert_eq!(m.tp, tp);
            prop_assert_eq!(m.fp, fp);
            prop_assert_eq!(m.tn, tn);
            prop_assert_eq!(m.fn_, fn_);
            if tp + tn + fp + fn_ > 0 {
                prop_assert!((m.accuracy - (tp + tn) as f64 / n as f64).abs() <= 1e-12);
            }
            if 2 * tp + fp + fn_ > 0 {
                prop_assert!((m.dice - 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64).abs() <= 1e-12);
            }
            // dice is symmetric in (pred, gt)
            let m2 = compute_metrics(gt, pred).unwrap();
            prop_assert!((m.dice - m2.dice).abs() <= 1e-12);
        }
    }

    #[test]
    fn csv_shape_and_echo() {
        let rows = vec![
            SweepRow {
                param: "0.6".into(),
                seed: 3,
                metrics: compute_metrics(&[1, 0], &[1, 0]).unwrap(),
            },
            SweepRow {
                param: "0".into(),
                seed: 4,
                metrics: compute_metrics(&[1, 0], &[0, 1]).unwrap(),
            },
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "param,accuracy,sensitivity,specificity,dice,seed");
        assert!(lines[1].starts_with("0.6,"));
        assert!(lines[1].ends_with(",3"));
        assert!(lines[2].starts_with("0,"));
    }
}
