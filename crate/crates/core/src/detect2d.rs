//! Per-view 2D centroid detection.
//!
//! Two routes produce detections: synthesizing a Gaussian heatmap from
//! candidate centroids and extracting its peaks (the route a trained
//! localization network would feed), or the detector oracle, which perturbs
//! ground-truth projections with seeded jitter, misses, and spurious hits.
//!
//! Peak extraction is density-peaks style: every pixel's density is its
//! intensity `rho`, and `delta` is the distance to the nearest pixel of
//! strictly higher density (the global maximum takes the image diagonal).
//! Pixels with `rho >= rho_min` and `delta >= delta_min_px` are peaks.
//! Equal intensities are ordered by ascending linear index, so an exact
//! plateau yields exactly one peak and the result never depends on
//! traversal order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::geometry::Detector;

/// Gaussian tails below this value are not written into the heatmap; the
/// density-peaks candidate floor sits three orders of magnitude higher, so
/// truncation cannot change any detection.
const GAUSSIAN_TRUNCATION: f64 = 1e-6;

/// Candidate floor for peak extraction: pixels below
/// `min(rho_min, PEAK_CANDIDATE_FLOOR)` can neither be peaks nor decide any
/// peak's `delta`, so they are skipped wholesale.
const PEAK_CANDIDATE_FLOOR: f64 = 0.05;

/// One detected centroid on a view's detector, in detector-plane mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub view: usize,
    pub uv_mm: [f64; 2],
    pub score: f64,
}

/// Save detections as a JSON array.
pub fn detections_to_json(dets: &[Detection2D]) -> String {
    serde_json::to_string_pretty(dets).expect("detections serialize")
}

pub fn detections_from_json(text: &str) -> crate::Result<Vec<Detection2D>> {
    serde_json::from_str(text).map_err(|e| crate::Error::Data(format!("detections json: {e}")))
}

/// A per-view response map in `[0, 1]`, on the same grid as the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap2D {
    pub detector: Detector,
    /// Row-major, `iv * nu + iu`.
    pub values: Vec<f32>,
}

impl Heatmap2D {
    #[inline]
    pub fn at(&self, iu: usize, iv: usize) -> f32 {
        self.values[iv * self.detector.nu + iu]
    }
}

/// Render unit-height Gaussians (std `sigma_px` in pixel units) at the given
/// detector-mm centroids, combined per pixel by maximum.
pub fn synth_heatmap(centroids_uv_mm: &[[f64; 2]], det: &Detector, sigma_px: f64) -> Heatmap2D {
    assert!(sigma_px > 0.0, "sigma must be positive, got {sigma_px}");
    let mut values = vec![0f32; det.nu * det.nv];
    // exp(-r^2 / 2 sigma^2) >= eps  <=>  r <= sigma * sqrt(-2 ln eps)
    let reach = sigma_px * (-2.0 * GAUSSIAN_TRUNCATION.ln()).sqrt();
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma_px * sigma_px);
    for c in centroids_uv_mm {
        let (cu, cv) = det.mm_to_px(c[0], c[1]);
        let iu0 = (cu - reach).floor().max(0.0) as usize;
        let iu1 = ((cu + reach).ceil().max(0.0) as usize).min(det.nu.saturating_sub(1));
        let iv0 = (cv - reach).floor().max(0.0) as usize;
        let iv1 = ((cv + reach).ceil().max(0.0) as usize).min(det.nv.saturating_sub(1));
        if cu + reach < 0.0 || cv + reach < 0.0 {
            continue;
        }
        for iv in iv0..=iv1 {
            let dv = iv as f64 - cv;
            for iu in iu0..=iu1 {
                let du = iu as f64 - cu;
                let g = (-(du * du + dv * dv) * inv_two_sigma_sq).exp();
                if g >= GAUSSIAN_TRUNCATION {
                    let cell = &mut values[iv * det.nu + iu];
                    *cell = cell.max(g as f32);
                }
            }
        }
    }
    Heatmap2D {
        detector: *det,
        values,
    }
}

/// Extract peaks from a heatmap; results are in detector mm, sorted by
/// ascending `v` then `u`, scored by the peak pixel intensity. Peak
/// positions are refined to sub-pixel accuracy with an intensity-weighted
/// centroid over the surrounding 5x5 window (clipped at borders).
pub fn find_peaks(
    h: &Heatmap2D,
    rho_min: f64,
    delta_min_px: f64,
    view: usize,
) -> Vec<Detection2D> {
    let det = h.detector;
    let floor = PEAK_CANDIDATE_FLOOR.min(rho_min);
    // (value, linear index); ties in value break toward the smaller index,
    // making "strictly higher" a total order.
    let mut candidates: Vec<(f32, u32)> = h
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| (v as f64) >= floor)
        .map(|(i, &v)| (v, i as u32))
        .collect();
    candidates.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let diag = ((det.nu * det.nu + det.nv * det.nv) as f64).sqrt();
    let mut peaks = Vec::new();
    for (i, &(val, idx)) in candidates.iter().enumerate() {
        if (val as f64) < rho_min {
            break; // sorted descending: nothing below can be a peak
        }
        let (pu, pv) = ((idx as usize) % det.nu, (idx as usize) / det.nu);
        let mut delta_sq = f64::INFINITY;
        for &(_, jdx) in &candidates[..i] {
            let (qu, qv) = ((jdx as usize) % det.nu, (jdx as usize) / det.nu);
            let du = pu as f64 - qu as f64;
            let dv = pv as f64 - qv as f64;
            delta_sq = delta_sq.min(du * du + dv * dv);
        }
        let delta = if i == 0 { diag } else { delta_sq.sqrt() };
        if delta >= delta_min_px {
            let (ru, rv) = refine_subpixel(h, pu, pv);
            let (u_mm, v_mm) = det.px_to_mm(ru, rv);
            peaks.push(Detection2D {
                view,
                uv_mm: [u_mm, v_mm],
                score: val as f64,
            });
        }
    }
    peaks.sort_by(|a, b| {
        (a.uv_mm[1], a.uv_mm[0])
            .partial_cmp(&(b.uv_mm[1], b.uv_mm[0]))
            .unwrap()
    });
    peaks
}

/// Intensity-weighted centroid over the 5x5 window around a peak pixel.
fn refine_subpixel(h: &Heatmap2D, pu: usize, pv: usize) -> (f64, f64) {
    let det = h.detector;
    let u0 = pu.saturating_sub(2);
    let u1 = (pu + 2).min(det.nu - 1);
    let v0 = pv.saturating_sub(2);
    let v1 = (pv + 2).min(det.nv - 1);
    let (mut su, mut sv, mut sw) = (0.0f64, 0.0f64, 0.0f64);
    for iv in v0..=v1 {
        for iu in u0..=u1 {
            let w = h.at(iu, iv) as f64;
            su += w * iu as f64;
            sv += w * iv as f64;
            sw += w;
        }
    }
    if sw > 0.0 {
        (su / sw, sv / sw)
    } else {
        (pu as f64, pv as f64)
    }
}

/// Detector simulator parameters. A simulated detector is a pure function of
/// the ground-truth projections and this spec (seed included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorOracleSpec {
    /// Per-axis Gaussian jitter applied to each kept detection, pixels.
    pub noise_sigma_px: f64,
    /// Probability of dropping each true centroid.
    pub p_miss: f64,
    /// Expected number of spurious detections per view (Poisson), placed
    /// uniformly over the detector.
    pub p_spurious: f64,
    pub seed: u64,
}

impl Default for DetectorOracleSpec {
    fn default() -> Self {
        DetectorOracleSpec {
            noise_sigma_px: 0.0,
            p_miss: 0.0,
            p_spurious: 0.0,
            seed: 0,
        }
    }
}

/// Simulate a detector on ground-truth projected centroids: drop each with
/// probability `p_miss`, jitter survivors by `noise_sigma_px` (converted to
/// mm by the pixel pitch), then add Poisson-many uniform spurious hits.
/// Output is sorted by ascending `v` then `u`.
pub fn oracle_detect(
    gt_uv_mm: &[[f64; 2]],
    spec: &DetectorOracleSpec,
    det: &Detector,
    view: usize,
) -> Vec<Detection2D> {
    assert!((0.0..=1.0).contains(&spec.p_miss), "p_miss in [0,1]");
    assert!(spec.noise_sigma_px >= 0.0 && spec.p_spurious >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise_sigma_px.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = Vec::with_capacity(gt_uv_mm.len());
    for gt in gt_uv_mm {
        let miss = rng.gen_bool(spec.p_miss);
        // Draw jitter unconditionally so the stream position per centroid is
        // fixed and misses do not reshuffle later noise.
        let (ju, jv) = (normal.sample(&mut rng), normal.sample(&mut rng));
        if miss {
            continue;
        }
        let (ju, jv) = if spec.noise_sigma_px > 0.0 {
            (ju, jv)
        } else {
            (0.0, 0.0)
        };
        out.push(Detection2D {
            view,
            uv_mm: [gt[0] + ju * det.pitch_u_mm, gt[1] + jv * det.pitch_v_mm],
            score: 1.0,
        });
    }
    if spec.p_spurious > 0.0 {
        let n_spur = Poisson::new(spec.p_spurious).unwrap().sample(&mut rng) as usize;
        let (hu, hv) = det.half_extent_mm();
        for _ in 0..n_spur {
            out.push(Detection2D {
                view,
                uv_mm: [rng.gen_range(-hu..hu), rng.gen_range(-hv..hv)],
                score: 1.0,
            });
        }
    }
    out.sort_by(|a, b| {
        (a.uv_mm[1], a.uv_mm[0])
            .partial_cmp(&(b.uv_mm[1], b.uv_mm[0]))
            .unwrap()
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn det(nu: usize, nv: usize) -> Detector {
        Detector {
            nu,
            nv,
            pitch_u_mm: 1.0,
            pitch_v_mm: 1.0,
        }
    }

    #[test]
    fn centroid_on_pixel_center_reaches_one() {
        let d = det(201, 201);
        let (u, v) = d.pixel_center_mm(100, 100);
        let h = synth_heatmap(&[[u, v]], &d, 4.0);
        assert_relative_eq!(h.at(100, 100) as f64, 1.0, epsilon = 1e-9);
        assert!(h.at(100, 104) < h.at(100, 100));
    }

    #[test]
    fn single_gaussian_yields_one_peak_near_center() {
        let d = det(128, 128);
        let (u, v) = d.px_to_mm(60.3, 41.7);
        let h = synth_heatmap(&[[u, v]], &d, 4.0);
        let peaks = find_peaks(&h, 0.3, 10.0, 2);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].view, 2);
        let (pu, pv) = d.mm_to_px(peaks[0].uv_mm[0], peaks[0].uv_mm[1]);
        assert!((pu - 60.3).hypot(pv - 41.7) < 0.5, "refined to ({pu}, {pv})");
    }

    #[test]
    fn well_separated_gaussians_are_all_recovered() {
        let d = det(256, 256);
        let sigma = 3.0;
        let truth: Vec<[f64; 2]> = (0..6)
            .map(|i| {
                let (u, v) = d.px_to_mm(40.0 + 30.0 * i as f64, 200.0 - 25.0 * i as f64);
                [u, v]
            })
            .collect();
        let h = synth_heatmap(&truth, &d, sigma);
        let peaks = find_peaks(&h, 0.3, 10.0, 0);
        assert_eq!(peaks.len(), truth.len());
        for t in &truth {
            let best = peaks
                .iter()
                .map(|p| (p.uv_mm[0] - t[0]).hypot(p.uv_mm[1] - t[1]))
                .fold(f64::INFINITY, f64::min);
            assert!(best <= 1.0, "peak {best} px away from truth");
        }
    }

    #[test]
    fn peaks_come_out_sorted_by_v() {
        let d = det(128, 128);
        let pts: Vec<[f64; 2]> = [(90.0, 100.0), (30.0, 20.0), (60.0, 64.0)]
            .iter()
            .map(|&(pu, pv)| {
                let (u, v) = d.px_to_mm(pu, pv);
                [u, v]
            })
            .collect();
        let h = synth_heatmap(&pts, &d, 3.0);
        let peaks = find_peaks(&h, 0.3, 8.0, 0);
        assert_eq!(peaks.len(), 3);
        assert!(peaks.windows(2).all(|w| w[0].uv_mm[1] <= w[1].uv_mm[1]));
    }

    #[test]
    fn exact_plateau_yields_a_single_peak() {
        // A Gaussian centered exactly between two pixels makes both carry
        // the same value; index order must break the tie to one peak.
        let d = det(64, 64);
        let (u, v) = d.px_to_mm(31.5, 20.0);
        let h = synth_heatmap(&[[u, v]], &d, 4.0);
        assert_eq!(h.at(31, 20), h.at(32, 20), "constructed plateau");
        let peaks = find_peaks(&h, 0.3, 5.0, 0);
        assert_eq!(peaks.len(), 1);
    }

    #[test]
    fn raising_rho_min_never_adds_peaks() {
        let d = det(96, 96);
        let pts: Vec<[f64; 2]> = [(20.0, 30.0), (70.0, 30.0), (45.0, 70.0)]
            .iter()
            .map(|&(pu, pv)| {
                let (u, v) = d.px_to_mm(pu, pv);
                [u, v]
            })
            .collect();
        let mut h = synth_heatmap(&pts, &d, 3.0);
        // Damp one blob so thresholds separate the set.
        for val in h.values.iter_mut() {
            *val *= 0.9;
        }
        let low = find_peaks(&h, 0.2, 5.0, 0);
        let high = find_peaks(&h, 0.8, 5.0, 0);
        assert!(high.len() <= low.len());
        for p in &high {
            assert!(low.iter().any(|q| q.uv_mm == p.uv_mm));
        }
    }

    /// Brute-force density-peaks over every pixel (no candidate floor), as
    /// an independent check that the floor optimization changes nothing.
    fn peaks_bruteforce(h: &Heatmap2D, rho_min: f64, delta_min_px: f64) -> Vec<(usize, usize)> {
        let det = h.detector;
        let n = det.nu * det.nv;
        let higher = |i: usize, j: usize| {
            h.values[j] > h.values[i] || (h.values[j] == h.values[i] && j < i)
        };
        let mut out = Vec::new();
        for i in 0..n {
            if (h.values[i] as f64) < rho_min {
                continue;
            }
            let (pu, pv) = (i % det.nu, i / det.nu);
            let mut best = f64::INFINITY;
            let mut any_higher = false;
            for j in 0..n {
                if j != i && higher(i, j) {
                    any_higher = true;
                    let (qu, qv) = (j % det.nu, j / det.nu);
                    let d2 = (pu as f64 - qu as f64).powi(2) + (pv as f64 - qv as f64).powi(2);
                    best = best.min(d2);
                }
            }
            let delta = if any_higher {
                best.sqrt()
            } else {
                ((det.nu * det.nu + det.nv * det.nv) as f64).sqrt()
            };
            if delta >= delta_min_px {
                out.push((pu, pv));
            }
        }
        out
    }

    #[test]
    fn candidate_floor_matches_bruteforce_definition() {
        use rand::{Rng, SeedableRng};
        let d = det(24, 20);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let values: Vec<f32> = (0..d.nu * d.nv).map(|_| rng.gen_range(0.0..1.0)).collect();
            let h = Heatmap2D {
                detector: d,
                values,
            };
            for &(rho, delta) in &[(0.5, 2.0), (0.9, 3.0), (0.3, 1.5)] {
                let fast = find_peaks(&h, rho, delta, 0);
                let slow = peaks_bruteforce(&h, rho, delta);
                assert_eq!(fast.len(), slow.len());
            }
        }
    }

    #[test]
    fn oracle_is_deterministic_in_its_spec() {
        let d = det(512, 512);
        let gt = vec![[0.0, -40.0], [4.0, 0.0], [-2.0, 40.0]];
        let spec = DetectorOracleSpec {
            noise_sigma_px: 2.0,
            p_miss: 0.2,
            p_spurious: 1.0,
            seed: 31,
        };
        let a = oracle_detect(&gt, &spec, &d, 0);
        let b = oracle_detect(&gt, &spec, &d, 0);
        assert_eq!(a, b);
        let c = oracle_detect(&gt, &spec, &d, 0u32 as usize);
        assert_eq!(a, c);
        let other = oracle_detect(
            &gt,
            &DetectorOracleSpec {
                seed: 32,
                ..spec
            },
            &d,
            0,
        );
        assert_ne!(a, other);
    }

    #[test]
    fn zero_noise_oracle_is_identity() {
        let d = det(512, 512);
        let gt = vec![[1.0, -50.0], [2.0, -10.0], [3.0, 35.0]];
        let dets = oracle_detect(&gt, &DetectorOracleSpec::default(), &d, 7);
        assert_eq!(dets.len(), 3);
        for (det2, gt) in dets.iter().zip(&gt) {
            assert_eq!(det2.uv_mm, *gt);
            assert_eq!(det2.view, 7);
        }
    }

    #[test]
    fn jitter_statistics_match_spec() {
        let d = det(512, 512);
        let gt = vec![[0.0, 0.0]; 10_000];
        let spec = DetectorOracleSpec {
            noise_sigma_px: 2.0,
            ..DetectorOracleSpec::default()
        };
        let dets = oracle_detect(&gt, &spec, &d, 0);
        assert_eq!(dets.len(), 10_000);
        let mean: f64 = dets.iter().map(|p| p.uv_mm[0]).sum::<f64>() / dets.len() as f64;
        let var: f64 = dets
            .iter()
            .map(|p| (p.uv_mm[0] - mean).powi(2))
            .sum::<f64>()
            / (dets.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((sd - 2.0).abs() / 2.0 < 0.05, "sample sd {sd} vs sigma 2");
    }

    #[test]
    fn miss_and_spurious_rates_match_spec() {
        let d = det(512, 512);
        let gt = vec![[0.0, 0.0]; 10_000];
        let spec = DetectorOracleSpec {
            p_miss: 0.3,
            seed: 5,
            ..DetectorOracleSpec::default()
        };
        let kept = oracle_detect(&gt, &spec, &d, 0).len() as f64;
        assert!((kept / 10_000.0 - 0.7).abs() < 0.02);

        // Spurious counts across many seeds should average near lambda.
        let lambda = 3.0;
        let mut total = 0usize;
        for seed in 0..2_000u64 {
            let spec = DetectorOracleSpec {
                p_spurious: lambda,
                seed,
                ..DetectorOracleSpec::default()
            };
            total += oracle_detect(&[], &spec, &d, 0).len();
        }
        let mean = total as f64 / 2_000.0;
        assert!((mean - lambda).abs() / lambda < 0.05, "mean spurious {mean}");
    }
}
