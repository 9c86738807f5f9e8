//! Declarative run configuration: one JSON document drives the pipeline.
//!
//! Every field has a sensible default, so `{}` is a valid config (synthetic
//! phantom, 10 views, noiseless oracles). Unknown top-level keys are
//! rejected to catch typos early. [`RunConfig::validate`] checks every
//! stage's preconditions up front so a bad value fails before any work
//! starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect2d::DetectorOracleSpec;
use crate::error::{Error, Result};
use crate::geometry::Detector;
use crate::ident2d::ClassifierOracleSpec;
use crate::labels::DEFAULT_CATEGORIES;
use crate::phantom::PhantomSpec;
use crate::sequence_dp::DpParams;

/// Where the volume (and optional ground truth) comes from.
///
/// JSON forms: `{"phantom": {...}}` to synthesize, or
/// `{"files": {"volume": "vol.json", "annotation": "ann.json"}}` to load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputConfig {
    Phantom(PhantomSpec),
    Files {
        volume: PathBuf,
        #[serde(default)]
        annotation: Option<PathBuf>,
    },
}

impl Default for InputConfig {
    fn default() -> Self {
        Self::Phantom(PhantomSpec::default())
    }
}

/// Which confusion matrix the classifier simulator uses.
///
/// JSON forms: `"identity"`, `{"off_by_one": {"eps": 0.05}}`, or
/// `{"matrix": [[...], ...]}` (row-stochastic, sized to `labels_c`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionKind {
    Identity,
    OffByOne { eps: f64 },
    Matrix(Vec<Vec<f64>>),
}

/// Classifier-simulator settings; noiseless identity by default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub confusion: ConfusionKind,
    /// Dirichlet concentration for per-pixel probability noise; `null`
    /// disables the noise.
    pub pixel_noise: Option<f64>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { confusion: ConfusionKind::Identity, pixel_noise: None }
    }
}

/// Complete pipeline configuration.
///
/// `seed` is the master seed: every stage's random stream (phantom jitter,
/// per-view detector noise, per-view classifier noise) is derived from it,
/// so the `seed` fields inside nested specs are ignored when a full run is
/// driven through the pipeline — they matter only when an oracle is invoked
/// directly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    /// Number of equally spaced views around the vertical axis.
    pub n_views: usize,
    pub sad_mm: f64,
    pub sdd_mm: f64,
    pub detector: Detector,
    /// Ray-marching step for projection rendering, mm.
    pub step_mm: f64,
    /// Isotropic resampling target for loaded/synthesized volumes, mm;
    /// `null` keeps the native grid.
    pub resample_mm: Option<f64>,
    /// Gaussian footprint of synthesized detector heatmaps, px.
    pub heatmap_sigma_px: f64,
    /// Peak-intensity floor for detection.
    pub rho_min: f64,
    /// Minimum separation (px) to a stronger pixel for detection.
    pub delta_min_px: f64,
    /// Side of the per-detection probability pooling square, mm.
    pub square_mm: f64,
    pub dp: DpParams,
    /// Number of label categories c (2..=26).
    pub labels_c: usize,
    pub detector_oracle: DetectorOracleSpec,
    pub classifier: ClassifierConfig,
    pub match_radius_mm: f64,
    /// Render projection images during a run (the simulated detector does
    /// not read them, so runs skip rendering by default).
    pub render_drrs: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: InputConfig::default(),
            n_views: 10,
            sad_mm: 1000.0,
            sdd_mm: 1500.0,
            detector: Detector::default(),
            step_mm: 0.5,
            resample_mm: Some(1.0),
            heatmap_sigma_px: 4.0,
            rho_min: 0.3,
            delta_min_px: 10.0,
            square_mm: 22.0,
            dp: DpParams::default(),
            labels_c: DEFAULT_CATEGORIES,
            detector_oracle: DetectorOracleSpec::default(),
            classifier: ClassifierConfig::default(),
            match_radius_mm: 20.0,
            render_drrs: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    /// Check every stage's preconditions before any work runs.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_views < 1 {
            return bad("n_views must be at least 1".into());
        }
        if !(self.sad_mm > 0.0 && self.sdd_mm > self.sad_mm) {
            return bad(format!(
                "need 0 < sad_mm < sdd_mm, got sad_mm={} sdd_mm={}",
                self.sad_mm, self.sdd_mm
            ));
        }
        if self.detector.nu < 1 || self.detector.nv < 1 {
            return bad(format!(
                "detector must have pixels, got {}x{}",
                self.detector.nu, self.detector.nv
            ));
        }
        if !(self.detector.pitch_u_mm > 0.0 && self.detector.pitch_v_mm > 0.0) {
            return bad("detector pitches must be positive".into());
        }
        if !(self.step_mm > 0.0) {
            return bad(format!("step_mm must be positive, got {}", self.step_mm));
        }
        if let Some(r) = self.resample_mm {
            if !(r > 0.0) {
                return bad(format!("resample_mm must be positive, got {r}"));
            }
        }
        if !(self.heatmap_sigma_px > 0.0) {
            return bad(format!("heatmap_sigma_px must be positive, got {}", self.heatmap_sigma_px));
        }
        if !(self.rho_min > 0.0 && self.rho_min.is_finite()) {
            return bad(format!("rho_min must be positive, got {}", self.rho_min));
        }
        if !(self.delta_min_px >= 0.0 && self.delta_min_px.is_finite()) {
            return bad(format!("delta_min_px must be non-negative, got {}", self.delta_min_px));
        }
        if !(self.square_mm > 0.0) {
            return bad(format!("square_mm must be positive, got {}", self.square_mm));
        }
        self.dp.validate()?;
        if !(2..=DEFAULT_CATEGORIES).contains(&self.labels_c) {
            return bad(format!(
                "labels_c must be in 2..={DEFAULT_CATEGORIES}, got {}",
                self.labels_c
            ));
        }
        let d = &self.detector_oracle;
        if !(d.noise_sigma_px >= 0.0 && d.noise_sigma_px.is_finite()) {
            return bad(format!("detector_oracle.noise_sigma_px must be >= 0, got {}", d.noise_sigma_px));
        }
        if !(0.0..1.0).contains(&d.p_miss) {
            return bad(format!("detector_oracle.p_miss must be in [0, 1), got {}", d.p_miss));
        }
        if !(d.p_spurious >= 0.0 && d.p_spurious.is_finite()) {
            return bad(format!("detector_oracle.p_spurious must be >= 0, got {}", d.p_spurious));
        }
        if let Some(conc) = self.classifier.pixel_noise {
            if !(conc > 0.0 && conc.is_finite()) {
                return bad(format!("classifier.pixel_noise must be positive, got {conc}"));
            }
        }
        self.classifier_spec(0)?;
        if !(self.match_radius_mm > 0.0) {
            return bad(format!("match_radius_mm must be positive, got {}", self.match_radius_mm));
        }
        if let InputConfig::Phantom(p) = &self.input {
            if p.n_vertebrae == 0 {
                return bad("phantom needs at least one vertebra".into());
            }
            let last = p.start_label_index + p.n_vertebrae - 1;
            if p.start_label_index < 1 || last > self.labels_c {
                return bad(format!(
                    "phantom labels {}..={last} fall outside 1..={}",
                    p.start_label_index, self.labels_c
                ));
            }
        }
        Ok(())
    }

    /// Materialize the classifier simulator for `labels_c` with a given seed.
    pub fn classifier_spec(&self, seed: u64) -> Result<ClassifierOracleSpec> {
        let mut spec = match &self.classifier.confusion {
            ConfusionKind::Identity => ClassifierOracleSpec::identity(self.labels_c)?,
            ConfusionKind::OffByOne { eps } => {
                ClassifierOracleSpec::off_by_one(self.labels_c, *eps)?
            }
            ConfusionKind::Matrix(m) => {
                if m.len() != self.labels_c {
                    return Err(Error::Config(format!(
                        "confusion matrix has {} rows but labels_c is {}",
                        m.len(),
                        self.labels_c
                    )));
                }
                ClassifierOracleSpec {
                    confusion: m.clone(),
                    pixel_noise: None,
                    seed: 0,
                }
            }
        };
        spec.pixel_noise = self.classifier.pixel_noise;
        spec.seed = seed;
        spec.validate()?;
        Ok(spec)
    }
}
