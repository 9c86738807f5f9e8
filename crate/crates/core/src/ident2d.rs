//! Per-view identification: class probability rows for each detection.
//!
//! A pixel probability field assigns every detector pixel a length-`c`
//! probability vector over vertebra categories. For each detection, the
//! rows of its view's probability map average that field over a fixed-size
//! square centered on the detection (the patch a segmentation head would
//! pool), renormalized to sum one. Row order follows the detections, which
//! are sorted by ascending detector `v`, so walking rows walks the spine.
//!
//! The classifier oracle stands in for a trained network: each pixel's
//! vector is the confusion-matrix row of its true class (uniform off the
//! spine), optionally perturbed by per-pixel Dirichlet noise whose mean
//! preserves the row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::detect2d::Detection2D;
use crate::error::{Error, Result};
use crate::geometry::Detector;
use crate::labels::{VertebraLabel, DEFAULT_CATEGORIES};
use crate::seeding;

/// Tolerance for "rows sum to one".
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// An `n x c` matrix of per-detection class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    /// Source view index; `None` for maps synthesized across views.
    pub view: Option<usize>,
    rows: Vec<Vec<f64>>,
    c: usize,
}

#[derive(Serialize, Deserialize)]
struct ProbMapJson {
    view: Option<usize>,
    labels_c: usize,
    rows: Vec<Vec<f64>>,
}

impl ProbMap {
    /// Validating constructor: at least one row, `2 <= c <= 26`, entries in
    /// `[0, 1]`, every row summing to one within [`ROW_SUM_TOLERANCE`].
    pub fn new(view: Option<usize>, rows: Vec<Vec<f64>>, c: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("probability map needs at least one row".into()));
        }
        if !(2..=DEFAULT_CATEGORIES).contains(&c) {
            return Err(Error::Config(format!(
                "category count {c} outside 2..={DEFAULT_CATEGORIES}"
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Data(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(Error::Data(format!("row {i} has entries outside [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Data(format!("row {i} sums to {sum}, expected 1")));
            }
        }
        Ok(ProbMap { view, rows, c })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn c(&self) -> usize {
        self.c
    }

    /// Which view this map describes; `None` for fused maps.
    pub fn view(&self) -> Option<usize> {
        self.view
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn to_json(&self) -> String {
        let doc = ProbMapJson {
            view: self.view,
            labels_c: self.c,
            rows: self.rows.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("probmap serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ProbMapJson =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("probmap json: {e}")))?;
        ProbMap::new(doc.view, doc.rows, doc.labels_c)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }
}

/// Per-row argmax labels; ties break toward the smaller index.
pub fn single_view_labels(pm: &ProbMap) -> Vec<VertebraLabel> {
    pm.rows()
        .iter()
        .map(|row| {
            let mut best = 0usize;
            for (j, p) in row.iter().enumerate() {
                if *p > row[best] {
                    best = j;
                }
            }
            VertebraLabel::new(best + 1).expect("c <= 26 keeps indices valid")
        })
        .collect()
}

/// Ground-truth class image on the detector grid: `classes[iv*nu+iu]` is a
/// 0-based category, or -1 off the spine.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub detector: Detector,
    pub n_classes: usize,
    pub classes: Vec<i32>,
}

/// Paint each ground-truth projection's square (side `square_mm`, centered
/// on the projected centroid) with its 0-based class; where squares overlap
/// the nearest centroid wins. Pixels outside every square stay background.
pub fn label_image_from_projections(
    gt: &[(usize, [f64; 2])],
    det: &Detector,
    n_classes: usize,
    square_mm: f64,
) -> Result<LabelImage> {
    if !(2..=DEFAULT_CATEGORIES).contains(&n_classes) {
        return Err(Error::Config(format!(
            "category count {n_classes} outside 2..={DEFAULT_CATEGORIES}"
        )));
    }
    if !(square_mm > 0.0) {
        return Err(Error::Config(format!("non-positive square size {square_mm}")));
    }
    let mut classes = vec![-1i32; det.nu * det.nv];
    let mut dist_sq = vec![f64::INFINITY; det.nu * det.nv];
    for (class, uv) in gt {
        if *class >= n_classes {
            return Err(Error::Config(format!(
                "class {class} outside 0..{n_classes}"
            )));
        }
        for (iu, iv) in square_pixels(det, uv, square_mm) {
            let (pu, pv) = det.pixel_center_mm(iu, iv);
            let d2 = (pu - uv[0]).powi(2) + (pv - uv[1]).powi(2);
            let idx = iv * det.nu + iu;
            if d2 < dist_sq[idx] {
                dist_sq[idx] = d2;
                classes[idx] = *class as i32;
            }
        }
    }
    Ok(LabelImage {
        detector: *det,
        n_classes,
        classes,
    })
}

/// Pixels whose centers fall in the closed square of side `square_mm` around
/// a detector-mm position, clipped to the image; empty if the square misses
/// the image entirely.
fn square_pixels(det: &Detector, uv: &[f64; 2], square_mm: f64) -> Vec<(usize, usize)> {
    let half = square_mm / 2.0;
    let (u_lo, v_lo) = det.mm_to_px(uv[0] - half, uv[1] - half);
    let (u_hi, v_hi) = det.mm_to_px(uv[0] + half, uv[1] + half);
    let clip = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        let lo_i = lo.ceil().max(0.0) as i64;
        let hi_i = (hi.floor() as i64).min(n as i64 - 1);
        (lo_i <= hi_i).then_some((lo_i as usize, hi_i as usize))
    };
    let (Some((u0, u1)), Some((v0, v1))) = (clip(u_lo, u_hi, det.nu), clip(v_lo, v_hi, det.nv))
    else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity((u1 - u0 + 1) * (v1 - v0 + 1));
    for iv in v0..=v1 {
        for iu in u0..=u1 {
            out.push((iu, iv));
        }
    }
    out
}

/// Classifier simulator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOracleSpec {
    /// Row-stochastic `c x c` confusion matrix: row `j` is the probability
    /// vector the simulated network emits on a pixel of true class `j`.
    pub confusion: Vec<Vec<f64>>,
    /// Optional Dirichlet concentration for per-pixel noise; the perturbed
    /// vector's mean is the confusion row itself.
    pub pixel_noise: Option<f64>,
    pub seed: u64,
}

impl Default for ClassifierOracleSpec {
    fn default() -> Self {
        ClassifierOracleSpec::off_by_one(DEFAULT_CATEGORIES, 0.05)
            .expect("default confusion is valid")
    }
}

impl ClassifierOracleSpec {
    /// Perfect classifier: identity confusion.
    pub fn identity(c: usize) -> Result<Self> {
        let confusion = (0..c)
            .map(|j| {
                let mut row = vec![0.0; c];
                row[j] = 1.0;
                row
            })
            .collect();
        let spec = ClassifierOracleSpec {
            confusion,
            pixel_noise: None,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Confusion that leaks mass `eps` to each existing neighbor label —
    /// the canonical adjacent-level mistake.
    pub fn off_by_one(c: usize, eps: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&eps) {
            return Err(Error::Config(format!("off-by-one eps {eps} outside [0, 0.5)")));
        }
        let confusion = (0..c)
            .map(|j| {
                let mut row = vec![0.0; c];
                let mut kept = 1.0;
                if j > 0 {
                    row[j - 1] = eps;
                    kept -= eps;
                }
                if j + 1 < c {
                    row[j + 1] = eps;
                    kept -= eps;
                }
                row[j] = kept;
                row
            })
            .collect();
        let spec = ClassifierOracleSpec {
            confusion,
            pixel_noise: None,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn c(&self) -> usize {
        self.confusion.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.confusion.len();
        if !(2..=DEFAULT_CATEGORIES).contains(&c) {
            return Err(Error::Config(format!(
                "confusion is {c}x?, need 2..={DEFAULT_CATEGORIES} rows"
            )));
        }
        for (j, row) in self.confusion.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Config(format!("confusion row {j} is not length {c}")));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(Error::Config(format!("confusion row {j} outside [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("confusion row {j} sums to {sum}")));
            }
        }
        if let Some(conc) = self.pixel_noise {
            if !(conc > 0.0) || !conc.is_finite() {
                return Err(Error::Config(format!("pixel noise concentration {conc}")));
            }
        }
        Ok(())
    }
}

/// A lazily evaluated per-pixel probability field. Pixel vectors are pure
/// functions of (label image, spec, pixel index): per-pixel noise draws use
/// a seed derived from the spec seed and the pixel's linear index, so any
/// evaluation order — or partial evaluation — produces identical values.
#[derive(Debug, Clone)]
pub struct PixelProbField {
    labels: LabelImage,
    spec: ClassifierOracleSpec,
}

/// Build the classifier-simulator field over a ground-truth label image.
pub fn oracle_field(labels: LabelImage, spec: ClassifierOracleSpec) -> Result<PixelProbField> {
    spec.validate()?;
    if labels.n_classes != spec.c() {
        return Err(Error::Config(format!(
            "label image has {} classes, confusion is {}x{}",
            labels.n_classes,
            spec.c(),
            spec.c()
        )));
    }
    Ok(PixelProbField { labels, spec })
}

impl PixelProbField {
    pub fn detector(&self) -> &Detector {
        &self.labels.detector
    }

    pub fn c(&self) -> usize {
        self.spec.c()
    }

    /// Probability vector at pixel `(iu, iv)`; always sums to one.
    pub fn prob_at(&self, iu: usize, iv: usize) -> Vec<f64> {
        let det = self.labels.detector;
        let idx = iv * det.nu + iu;
        let c = self.spec.c();
        let class = self.labels.classes[idx];
        let base: Vec<f64> = if class >= 0 {
            self.spec.confusion[class as usize].clone()
        } else {
            vec![1.0 / c as f64; c]
        };
        let Some(conc) = self.spec.pixel_noise else {
            return base;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(self.spec.seed, idx as u64));
        let mut draw = vec![0.0f64; c];
        let mut total = 0.0;
        for (g, p) in draw.iter_mut().zip(&base) {
            if *p > 0.0 {
                let gamma = Gamma::new(conc * p, 1.0).expect("positive shape");
                *g = gamma.sample(&mut rng);
                total += *g;
            }
        }
        if total > 0.0 && total.is_finite() {
            for g in draw.iter_mut() {
                *g /= total;
            }
            draw
        } else {
            base // all-zero draw is possible for tiny shapes; keep the mean
        }
    }
}

/// Result of pooling a probability field over detection squares.
#[derive(Debug, Clone)]
pub struct Aggregation {
    pub probmap: ProbMap,
    /// For each probmap row, the index of its source detection in the input.
    pub row_sources: Vec<usize>,
    /// Detections whose square covered no pixel centers (off the image).
    pub excluded: Vec<usize>,
}

/// Average the field over the closed square of side `square_mm` centered on
/// each detection; rows are renormalized to sum one. Detections whose
/// square misses the image entirely are excluded and reported.
pub fn aggregate_probmap(
    field: &PixelProbField,
    dets: &[Detection2D],
    square_mm: f64,
) -> Result<Aggregation> {
    if dets.is_empty() {
        return Err(Error::Data("no detections to aggregate".into()));
    }
    if !(square_mm > 0.0) {
        return Err(Error::Config(format!("non-positive square size {square_mm}")));
    }
    let det = *field.detector();
    let c = field.c();
    let view = dets[0].view;
    let mut rows = Vec::with_capacity(dets.len());
    let mut row_sources = Vec::new();
    let mut excluded = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        let mut acc = vec![0.0f64; c];
        let mut count = 0usize;
        for (iu, iv) in square_pixels(&det, &d.uv_mm, square_mm) {
            let p = field.prob_at(iu, iv);
            for (a, v) in acc.iter_mut().zip(&p) {
                *a += v;
            }
            count += 1;
        }
        if count == 0 {
            excluded.push(i);
            continue;
        }
        let sum: f64 = acc.iter().sum();
        for a in acc.iter_mut() {
            *a /= sum;
        }
        rows.push(acc);
        row_sources.push(i);
    }
    if rows.is_empty() {
        return Err(Error::Data(
            "every detection square missed the image".into(),
        ));
    }
    Ok(Aggregation {
        probmap: ProbMap::new(Some(view), rows, c)?,
        row_sources,
        excluded,
    })
}
