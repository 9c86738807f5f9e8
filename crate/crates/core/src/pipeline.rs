//! One-call orchestration of the full multi-view pipeline.
//!
//! [`run_once`] takes a validated [`RunConfig`] and executes: input volume
//! (synthesized phantom or files) → optional isotropic resampling → view
//! geometry → per-view simulated detection (oracle positions rendered into a
//! heatmap, then re-extracted with sub-pixel refinement) → per-view
//! probability aggregation from a simulated classifier field → cross-view
//! fusion → evaluation against ground truth.
//!
//! Determinism: the config's master seed derives one independent stream per
//! randomized stage and view, so results are bit-identical across reruns and
//! thread counts; nested oracle `seed` fields are ignored here.
//!
//! The simulators stand in for trained networks and read ground truth, so a
//! file input must bring an annotation; rendering projection images is
//! optional because nothing downstream consumes their pixels.

use crate::config::{InputConfig, RunConfig};
use crate::detect2d::{find_peaks, oracle_detect, synth_heatmap, Detection2D};
use crate::drr::{render_drr, DrrImage};
use crate::error::{Error, Result};
use crate::fusion::{fuse_all, FusionResult, ViewInput};
use crate::geometry::make_views;
use crate::ident2d::{aggregate_probmap, label_image_from_projections, oracle_field};
use crate::labels::Annotation3;
use crate::metrics::{evaluate, EvalResult};
use crate::phantom::make_phantom;
use crate::seeding::derive;
use crate::volume::Volume3;

// Stage salts for deriving independent random streams from the master seed.
const PHANTOM_SALT: u64 = 1;
const DETECTOR_SALT_BASE: u64 = 0x10000;
const CLASSIFIER_SALT_BASE: u64 = 0x20000;

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub views: Vec<ViewInput>,
    /// Rendered projection images, present when the config asked for them.
    pub drrs: Option<Vec<DrrImage>>,
    pub fusion: FusionResult,
    pub eval: EvalResult,
    pub gt: Annotation3,
}

/// Realize the configured input: synthesize the phantom (with its jitter
/// stream derived from the master seed) or load the files. The annotation is
/// `None` only for file inputs that name no annotation.
pub fn load_run_input(cfg: &RunConfig) -> Result<(Volume3, Option<Annotation3>)> {
    match &cfg.input {
        InputConfig::Phantom(spec) => {
            let mut spec = spec.clone();
            spec.seed = derive(cfg.seed, PHANTOM_SALT);
            let (vol, ann) = make_phantom(&spec)?;
            Ok((vol, Some(ann)))
        }
        InputConfig::Files { volume, annotation } => {
            let vol = Volume3::load(volume)?;
            let ann = annotation.as_ref().map(|p| Annotation3::load(p)).transpose()?;
            Ok((vol, ann))
        }
    }
}

/// Execute the full pipeline for one configuration.
pub fn run_once(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (volume, gt) = load_run_input(cfg)?;
    let gt = gt.ok_or_else(|| {
        Error::Config(
            "the simulated detectors need ground truth: provide input.files.annotation \
             or use a phantom input"
                .into(),
        )
    })?;
    let volume = match cfg.resample_mm {
        Some(target) => volume.resample_isotropic(target)?,
        None => volume,
    };

    let iso = volume.center();
    let geoms = make_views(cfg.n_views, cfg.sad_mm, cfg.sdd_mm, cfg.detector, iso)?;

    let mut views = Vec::with_capacity(geoms.len());
    let mut drrs = if cfg.render_drrs { Some(Vec::with_capacity(geoms.len())) } else { None };
    for (k, geometry) in geoms.iter().enumerate() {
        let mut gt_uv = Vec::with_capacity(gt.len());
        let mut gt_classes = Vec::with_capacity(gt.len());
        for e in gt.entries() {
            let (u, v) = geometry.project_point(&e.center())?;
            gt_uv.push([u, v]);
            gt_classes.push((e.label.index() - 1, [u, v]));
        }

        let mut det_spec = cfg.detector_oracle.clone();
        det_spec.seed = derive(cfg.seed, DETECTOR_SALT_BASE + k as u64);
        let seeded = oracle_detect(&gt_uv, &det_spec, &cfg.detector, k);
        let centers: Vec<[f64; 2]> = seeded.iter().map(|d| d.uv_mm).collect();
        let heat = synth_heatmap(&centers, &cfg.detector, cfg.heatmap_sigma_px);
        let dets = find_peaks(&heat, cfg.rho_min, cfg.delta_min_px, k);

        let (dets, probmap) = if dets.is_empty() {
            (dets, None)
        } else {
            let label_img = label_image_from_projections(
                &gt_classes,
                &cfg.detector,
                cfg.labels_c,
                cfg.square_mm,
            )?;
            let cls_spec =
                cfg.classifier_spec(derive(cfg.seed, CLASSIFIER_SALT_BASE + k as u64))?;
            let field = oracle_field(label_img, cls_spec)?;
            let agg = aggregate_probmap(&field, &dets, cfg.square_mm)?;
            // drop detections whose pooling square missed the image so the
            // map rows stay aligned one-to-one with the detections
            let kept: Vec<Detection2D> =
                agg.row_sources.iter().map(|&i| dets[i].clone()).collect();
            (kept, Some(agg.probmap))
        };

        if let Some(list) = drrs.as_mut() {
            list.push(render_drr(&volume, geometry, cfg.step_mm));
        }
        views.push(ViewInput { geometry: geometry.clone(), dets, probmap });
    }

    let fusion = fuse_all(&views, &cfg.dp)?;
    let eval = evaluate(&fusion.vertebrae, &gt, cfg.match_radius_mm)?;
    Ok(RunOutput { views, drrs, fusion, eval, gt })
}
