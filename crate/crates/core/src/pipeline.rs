//! Reproducible end-to-end runs: one JSON config, a staged
//! phantom -> surface -> project -> patches -> train -> segment -> eval
//! pipeline, and a manifest recording the config hash, the root seed and
//! every per-stage artifact. All randomness derives from the root seed by
//! stage name, so a rerun from the same config reproduces every artifact
//! byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{compute_metrics, metrics_csv, SweepRow};
use crate::graphcut::{segment, SegReport, SegmentConfig};
use crate::neural::{
    load_nlink, load_tlink, save_nlink, save_tlink, train_nlink, train_tlink, NlinkArch,
    NlinkNet, TlinkArch, TlinkNet, TrainConfig,
};
use crate::patches::{
    build_library, load_library, save_library, vertex_labels_from_scar, LibraryConfig,
    PatchLibrary, PatchSize,
};
use crate::phantom::{make_phantom, PhantomSpec, ScarBlob};
use crate::rng::derive_seed;
use crate::surface::{extract_surface, save_channels, save_mesh_obj, MeshChannels, SurfaceMesh};
use crate::volio::{load_labels, load_volume, save_labels, save_volume, LabelVolume, Volume3D};

fn default_n_train() -> usize {
    2
}

fn default_lambda() -> f64 {
    0.6
}

fn default_patch_size() -> PatchSize {
    [9, 9, 13]
}

fn default_shift() -> f64 {
    2.0
}

fn default_pairs() -> usize {
    1
}

fn default_blobs() -> usize {
    3
}

fn default_radius_range() -> (f64, f64) {
    (0.45, 0.95)
}

fn default_enhancement() -> f64 {
    0.8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its own stream from it.
    pub rng_seed: u64,
    /// Test phantom template. Its blobs are kept as given; only the noise
    /// seed is derived per run.
    pub phantom: PhantomSpec,
    #[serde(default = "default_n_train")]
    pub n_train_phantoms: usize,
    /// Scar-cap randomization for the training members.
    #[serde(default = "default_blobs")]
    pub n_blobs: usize,
    #[serde(default = "default_radius_range")]
    pub blob_radius_range: (f64, f64),
    #[serde(default = "default_enhancement")]
    pub blob_enhancement: f64,
    #[serde(default = "default_patch_size")]
    pub patch_size: PatchSize,
    #[serde(default = "default_shift")]
    pub shift_range_mm: f64,
    #[serde(default = "default_pairs")]
    pub pairs_per_edge: usize,
    #[serde(default)]
    pub max_pairs: Option<usize>,
    #[serde(default)]
    pub tlink_arch: TlinkArch,
    #[serde(default)]
    pub nlink_arch: NlinkArch,
    #[serde(default)]
    pub tlink_cfg: TrainConfig,
    #[serde(default)]
    pub nlink_cfg: TrainConfig,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl PipelineConfig {
    /// Small self-contained demo configuration.
    pub fn demo(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            phantom: PhantomSpec {
                dims: [40, 40, 40],
                spacing_mm: [1.0, 1.0, 1.0],
                cavity_center_mm: [19.5, 19.5, 19.5],
                cavity_semi_axes_mm: [12.0, 10.5, 11.0],
                wall_thickness_mm: 2.0,
                scar_blobs: vec![
                    ScarBlob {
                        direction: [1.0, 0.3, 0.2],
                        angular_radius_rad: 0.8,
                        enhancement: 0.8,
                    },
                    ScarBlob {
                        direction: [-0.5, -0.8, 0.4],
                        angular_radius_rad: 0.6,
                        enhancement: 0.8,
                    },
                ],
                confounder: None,
                noise_sigma: 0.12,
                rng_seed,
            },
            n_train_phantoms: 2,
            n_blobs: default_blobs(),
            blob_radius_range: default_radius_range(),
            blob_enhancement: default_enhancement(),
            patch_size: default_patch_size(),
            shift_range_mm: default_shift(),
            pairs_per_edge: 1,
            max_pairs: Some(3000),
            tlink_arch: TlinkArch::default(),
            nlink_arch: NlinkArch::default(),
            tlink_cfg: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            nlink_cfg: TrainConfig {
                epochs: 12,
                ..TrainConfig::default()
            },
            lambda: default_lambda(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Input("lambda must be >= 0".into()));
        }
        if self.n_train_phantoms == 0 {
            return Err(Error::Input("need at least one training phantom".into()));
        }
        Ok(())
    }

    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: PipelineConfig = serde_json::from_slice(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &PipelineConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_vec_pretty(cfg).expect("config serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Artifact paths relative to the output directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub rng_seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_slice(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// The test phantom spec for a run: template blobs, derived noise seed.
pub fn test_phantom_spec(cfg: &PipelineConfig) -> PhantomSpec {
    PhantomSpec {
        rng_seed: derive_seed(cfg.rng_seed, "phantom-test"),
        ..cfg.phantom.clone()
    }
}

/// The i-th training phantom spec: randomized scar caps, derived seed.
pub fn train_phantom_spec(cfg: &PipelineConfig, i: usize) -> PhantomSpec {
    cfg.phantom.with_randomized_blobs(
        cfg.n_blobs,
        cfg.blob_radius_range,
        cfg.blob_enhancement,
        derive_seed(cfg.rng_seed, &format!("phantom-train-{i}")),
    )
}

struct StageCtx<'a> {
    out_dir: &'a Path,
    resume: bool,
    stages: Vec<StageRecord>,
}

impl<'a> StageCtx<'a> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn all_exist(&self, rels: &[String]) -> bool {
        rels.iter().all(|r| self.path(r).exists())
    }

    /// Runs or skips one stage: `outputs` lists the artifacts (relative),
    /// `compute` materializes them, `load` restores the in-memory value
    /// from existing artifacts on resume.
    fn stage<T>(
        &mut self,
        name: &str,
        outputs: Vec<String>,
        compute: impl FnOnce(&Self) -> Result<T>,
        load: impl FnOnce(&Self) -> Result<T>,
    ) -> Result<T> {
        let value = if self.resume && self.all_exist(&outputs) {
            load(self).map_err(|e| Error::stage(name, e))?
        } else {
            compute(self).map_err(|e| Error::stage(name, e))?
        };
        self.stages.push(StageRecord {
            name: name.into(),
            outputs,
        });
        Ok(value)
    }
}

/// Artifact names inside the output directory.
mod artifact {
    pub fn test_img() -> String {
        "test_img".into()
    }
    pub fn test_lab() -> String {
        "test_lab".into()
    }
    pub fn train_img(i: usize) -> String {
        format!("train{i}_img")
    }
    pub fn train_lab(i: usize) -> String {
        format!("train{i}_lab")
    }
    pub const MESH: &str = "mesh.obj";
    pub const CHANNELS: &str = "mesh.channels.json";
    pub const MAP: &str = "map.json";
    pub const LIBRARY: &str = "library.bin";
    pub const TLINK: &str = "tlink.bin";
    pub const NLINK: &str = "nlink.bin";
    pub const SEG: &str = "seg.json";
    pub const METRICS: &str = "metrics.csv";
    pub const MANIFEST: &str = "manifest.json";
}

fn volume_files(stem: &str) -> [String; 2] {
    [format!("{stem}.json"), format!("{stem}.raw")]
}

/// Runs the full pipeline into `out_dir`, returning the manifest. With
/// `resume`, stages whose artifacts already exist are loaded, not rerun.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: impl AsRef<Path>, resume: bool) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut ctx = StageCtx {
        out_dir,
        resume,
        stages: Vec::new(),
    };

    // phantom
    type PhantomSet = (Volume3D, LabelVolume, Vec<(Volume3D, LabelVolume)>);
    let mut phantom_outputs: Vec<String> = Vec::new();
    phantom_outputs.extend(volume_files(&artifact::test_img()));
    phantom_outputs.extend(volume_files(&artifact::test_lab()));
    for i in 0..cfg.n_train_phantoms {
        phantom_outputs.extend(volume_files(&artifact::train_img(i)));
        phantom_outputs.extend(volume_files(&artifact::train_lab(i)));
    }
    let (test_vol, test_lab, train_sets): PhantomSet = ctx.stage(
        "phantom",
        phantom_outputs,
        |ctx| {
            // write-through: later stages must see the artifacts exactly as
            // a resumed run would load them (f32 on disk), so reload after
            // saving.
            let (tv, tl) = make_phantom(&test_phantom_spec(cfg))?;
            save_volume(&tv, ctx.path(&artifact::test_img()))?;
            save_labels(&tl, ctx.path(&artifact::test_lab()))?;
            let tv = load_volume(ctx.path(&artifact::test_img()))?;
            let tl = load_labels(ctx.path(&artifact::test_lab()))?;
            let mut train = Vec::new();
            for i in 0..cfg.n_train_phantoms {
                let (v, l) = make_phantom(&train_phantom_spec(cfg, i))?;
                save_volume(&v, ctx.path(&artifact::train_img(i)))?;
                save_labels(&l, ctx.path(&artifact::train_lab(i)))?;
                train.push((
                    load_volume(ctx.path(&artifact::train_img(i)))?,
                    load_labels(ctx.path(&artifact::train_lab(i)))?,
                ));
            }
            Ok((tv, tl, train))
        },
        |ctx| {
            let tv = load_volume(ctx.path(&artifact::test_img()))?;
            let tl = load_labels(ctx.path(&artifact::test_lab()))?;
            let mut train = Vec::new();
            for i in 0..cfg.n_train_phantoms {
                train.push((
                    load_volume(ctx.path(&artifact::train_img(i)))?,
                    load_labels(ctx.path(&artifact::train_lab(i)))?,
                ));
            }
            Ok((tv, tl, train))
        },
    )?;

    // surface
    let wall = cfg.phantom.wall_thickness_mm;
    let mesh: SurfaceMesh = ctx.stage(
        "surface",
        vec![artifact::MESH.into(), artifact::CHANNELS.into()],
        |ctx| {
            let mesh = extract_surface(&test_lab, 1)?;
            save_mesh_obj(&mesh, ctx.path(artifact::MESH))?;
            let gt = vertex_labels_from_scar(&test_lab, &mesh, wall)?;
            let mut channels = MeshChannels::default();
            channels
                .channels
                .insert("gt_scar".into(), gt.iter().map(|&l| l as f64).collect());
            save_channels(&channels, ctx.path(artifact::CHANNELS))?;
            Ok(mesh)
        },
        |ctx| {
            let mut mesh = crate::surface::load_mesh_obj(ctx.path(artifact::MESH))?;
            if mesh.normals.is_empty() {
                mesh.normals = crate::surface::vertex_normals(&mesh, &test_lab, 1)?;
            }
            Ok(mesh)
        },
    )?;

    // project
    ctx.stage(
        "project",
        vec![artifact::MAP.into()],
        |ctx| {
            let seed = crate::flatmap::default_seed(&mesh, derive_seed(cfg.rng_seed, "flatmap"))?;
            let map = crate::flatmap::equidistant_project(&mesh, seed)?;
            crate::flatmap::save_flatmap(&map, ctx.path(artifact::MAP))?;
            Ok(())
        },
        |_| Ok(()),
    )?;

    // patches
    let library: PatchLibrary = ctx.stage(
        "patches",
        vec![artifact::LIBRARY.into()],
        |ctx| {
            let mut pooled = PatchLibrary::default();
            for (i, (vol, lab)) in train_sets.iter().enumerate() {
                let train_mesh = extract_surface(lab, 1)?;
                let gt = vertex_labels_from_scar(lab, &train_mesh, wall)?;
                let mut lib_cfg =
                    LibraryConfig::default_for(vol, derive_seed(cfg.rng_seed, &format!("library-{i}")));
                lib_cfg.size = cfg.patch_size;
                lib_cfg.shift_range_mm = cfg.shift_range_mm;
                lib_cfg.pairs_per_edge = cfg.pairs_per_edge;
                lib_cfg.max_pairs = cfg.max_pairs;
                let lib = build_library(vol, &train_mesh, &gt, &lib_cfg)?;
                pooled.unary.extend(lib.unary);
                pooled.pairwise.extend(lib.pairwise);
            }
            save_library(&pooled, ctx.path(artifact::LIBRARY))?;
            load_library(ctx.path(artifact::LIBRARY))
        },
        |ctx| load_library(ctx.path(artifact::LIBRARY)),
    )?;

    // train
    let (tnet, nnet): (TlinkNet, NlinkNet) = ctx.stage(
        "train",
        vec![artifact::TLINK.into(), artifact::NLINK.into()],
        |ctx| {
            let mut tcfg = cfg.tlink_cfg.clone();
            tcfg.rng_seed = derive_seed(cfg.rng_seed, "train-tlink");
            let (tnet, _) = train_tlink(&library.unary, &cfg.tlink_arch, &tcfg)?;
            save_tlink(&tnet, ctx.path(artifact::TLINK))?;
            let mut ncfg = cfg.nlink_cfg.clone();
            ncfg.rng_seed = derive_seed(cfg.rng_seed, "train-nlink");
            let (nnet, _) = train_nlink(&library.pairwise, &cfg.nlink_arch, &ncfg)?;
            save_nlink(&nnet, ctx.path(artifact::NLINK))?;
            Ok((
                load_tlink(ctx.path(artifact::TLINK))?,
                load_nlink(ctx.path(artifact::NLINK))?,
            ))
        },
        |ctx| {
            Ok((
                load_tlink(ctx.path(artifact::TLINK))?,
                load_nlink(ctx.path(artifact::NLINK))?,
            ))
        },
    )?;

    // segment
    let seg_report: SegReport = ctx.stage(
        "segment",
        vec![artifact::SEG.into()],
        |ctx| {
            let mut seg_cfg = SegmentConfig::default_for(&test_vol, derive_seed(cfg.rng_seed, "flatmap"));
            seg_cfg.graph.lambda = cfg.lambda;
            seg_cfg.graph.size = cfg.patch_size;
            let out = segment(&test_vol, &test_lab, &tnet, &nnet, &seg_cfg)?;
            let report = SegReport::from_output(&out);
            crate::graphcut::save_seg_report(&report, ctx.path(artifact::SEG))?;
            Ok(report)
        },
        |ctx| crate::graphcut::load_seg_report(ctx.path(artifact::SEG)),
    )?;

    // eval
    ctx.stage(
        "eval",
        vec![artifact::METRICS.into()],
        |ctx| {
            let gt = vertex_labels_from_scar(&test_lab, &mesh, wall)?;
            let mut rows = vec![SweepRow {
                param: "learngc".into(),
                seed: cfg.rng_seed,
                metrics: compute_metrics(&seg_report.labels, &gt)?,
            }];
            let feature_cfg =
                crate::baselines::NodeFeatureConfig::default_for(&test_vol, wall);
            let features = crate::baselines::node_intensities(&test_vol, &mesh, &feature_cfg)?;
            let (model, _) =
                crate::baselines::gmm_em_fit(&features, 2, &crate::baselines::EmConfig::default())?;
            rows.push(SweepRow {
                param: "gmm".into(),
                seed: cfg.rng_seed,
                metrics: compute_metrics(&crate::baselines::gmm_classify(&model, &features)?, &gt)?,
            });
            let threshold = crate::baselines::otsu_threshold(&features, 256)?;
            rows.push(SweepRow {
                param: "otsu".into(),
                seed: cfg.rng_seed,
                metrics: compute_metrics(
                    &crate::baselines::otsu_classify(&features, threshold),
                    &gt,
                )?,
            });
            std::fs::write(ctx.path(artifact::METRICS), metrics_csv(&rows))
                .map_err(|e| Error::io(artifact::METRICS, e))?;
            Ok(())
        },
        |_| Ok(()),
    )?;

    let manifest = Manifest {
        config_sha256: cfg.sha256(),
        rng_seed: cfg.rng_seed,
        config: cfg.clone(),
        stages: ctx.stages,
    };
    let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join(artifact::MANIFEST), text)
        .map_err(|e| Error::io(artifact::MANIFEST, e))?;
    Ok(manifest)
}

/// Replays a recorded run into a fresh directory from its manifest.
pub fn run_from_manifest(manifest_path: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let manifest = load_manifest(manifest_path)?;
    run_pipeline(&manifest.config, out_dir, false)
}
