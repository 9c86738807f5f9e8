//! Cross-view fusion: correspondence, triangulation, and probability voting.
//!
//! Detections from the individual views are first grouped into per-vertebra
//! correspondence sets by vertical rank — rotation about the vertical axis
//! preserves each vertebra's v-order on every detector, so rank is a reliable
//! key, and views whose detection count disagrees with the consensus are
//! repaired against a reference view by a monotone alignment. Each group with
//! two or more supporting views is then localized in 3D by least-squares
//! intersection of the backprojected rays, and the per-view probability maps
//! are blended into a single voted map, each view weighted by how
//! anatomically plausible its own label sequence looked. Final labels come
//! from the consecutive-run correction on the voted map.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::Serialize;

use crate::detect2d::Detection2D;
use crate::error::{Error, Result};
use crate::geometry::{Line3, Point3, ProjectionGeometry, Vec3};
use crate::ident2d::{single_view_labels, ProbMap};
use crate::labels::VertebraLabel;
use crate::sequence_dp::{correct_labels, dp_table, sequence_loss, DpParams, DpResult};

/// Everything fusion needs from one view. `probmap` must be present exactly
/// when `dets` is non-empty, with one row per detection in the same order.
#[derive(Debug, Clone)]
pub struct ViewInput {
    pub geometry: ProjectionGeometry,
    pub dets: Vec<Detection2D>,
    pub probmap: Option<ProbMap>,
}

/// Per-vertebra groups of `(view_index, detection_index)` pairs, one group
/// per consensus vertebra, ordered bottom-of-image upward (ascending v on the
/// reference view). Detection indices refer to the per-view input lists.
#[derive(Debug, Clone, Serialize)]
pub struct CorrespondenceSet {
    pub n_groups: usize,
    pub groups: Vec<Vec<(usize, usize)>>,
    pub reference_view: usize,
}

/// A fused, labeled 3D vertebra estimate.
#[derive(Debug, Clone, Serialize)]
pub struct LabeledCentroid3 {
    pub label: VertebraLabel,
    pub center_mm: [f64; 3],
    pub support: usize,
    pub residual: f64,
}

impl LabeledCentroid3 {
    pub fn center(&self) -> Point3 {
        Point3::new(self.center_mm[0], self.center_mm[1], self.center_mm[2])
    }
}

/// Full fusion output. `labels` / `anchored` come from the consecutive-run
/// correction on `voted`; `argmax_labels` are the uncorrected per-row winners
/// kept for diagnostics. `view_losses` and `view_weights` are indexed by
/// input view; an empty view has no loss and weight 0.
#[derive(Debug, Clone)]
pub struct FusionResult {
    pub vertebrae: Vec<LabeledCentroid3>,
    pub labels: Vec<VertebraLabel>,
    pub anchored: bool,
    pub argmax_labels: Vec<VertebraLabel>,
    pub view_losses: Vec<Option<f64>>,
    pub view_weights: Vec<f64>,
    pub unlocalized: Vec<usize>,
    pub correspondences: CorrespondenceSet,
    pub voted: ProbMap,
    pub dp: DpResult,
}

/// Monotone minimal-cost assignment of every `short` value to a distinct
/// `long` value, order-preserving, cost = Σ|short − long| over the chosen
/// pairs. Returns `(short_idx, long_idx)` pairs in ascending order; cost ties
/// between skipping and matching resolve toward matching.
fn align_monotone(short: &[f64], long: &[f64]) -> Vec<(usize, usize)> {
    let (s, l) = (short.len(), long.len());
    debug_assert!(s <= l, "short side must not exceed long side");
    if s == 0 {
        return Vec::new();
    }
    let mut cost = vec![vec![f64::INFINITY; l + 1]; s + 1];
    cost[0].fill(0.0);
    for i in 1..=s {
        for j in i..=l {
            let matched = cost[i - 1][j - 1] + (short[i - 1] - long[j - 1]).abs();
            cost[i][j] = matched.min(cost[i][j - 1]);
        }
    }
    let mut pairs = Vec::with_capacity(s);
    let (mut i, mut j) = (s, l);
    while i > 0 {
        let matched = cost[i - 1][j - 1] + (short[i - 1] - long[j - 1]).abs();
        if matched <= cost[i][j - 1] {
            pairs.push((i - 1, j - 1));
            i -= 1;
        }
        j -= 1;
    }
    pairs.reverse();
    pairs
}

/// Group detections across views into per-vertebra correspondence sets.
///
/// The consensus vertebra count is the modal detection count over non-empty
/// views (ties toward the larger count; all counts distinct → the lower
/// median). The reference view is the lowest-indexed view realizing it.
/// Views at the consensus count are matched to groups by v-rank; others are
/// aligned to the reference view's v-coordinates by [`align_monotone`],
/// dropping whatever the alignment skips. Empty views simply contribute
/// nothing; only a totally empty input is an error.
pub fn match_views(dets_per_view: &[Vec<Detection2D>]) -> Result<CorrespondenceSet> {
    let k = dets_per_view.len();
    if k < 2 {
        return Err(Error::Config(format!(
            "correspondence needs at least 2 views, got {k}"
        )));
    }
    let counts: Vec<usize> = dets_per_view.iter().map(Vec::len).collect();
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Data("no detections in any view".into()));
    }

    // v-ascending detection order per view (ties by u, then input position)
    let order: Vec<Vec<usize>> = dets_per_view
        .iter()
        .map(|dets| {
            let mut idx: Vec<usize> = (0..dets.len()).collect();
            idx.sort_by(|&a, &b| {
                dets[a].uv_mm[1]
                    .total_cmp(&dets[b].uv_mm[1])
                    .then(dets[a].uv_mm[0].total_cmp(&dets[b].uv_mm[0]))
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let mut mult: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in counts.iter().filter(|&&c| c > 0) {
        *mult.entry(c).or_insert(0) += 1;
    }
    let max_mult = *mult.values().max().expect("some view is non-empty");
    let n_star = if max_mult == 1 {
        let mut cs: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
        cs.sort_unstable();
        cs[(cs.len() - 1) / 2]
    } else {
        mult.iter()
            .rev()
            .find(|&(_, &m)| m == max_mult)
            .map(|(&c, _)| c)
            .expect("a modal count exists")
    };
    let reference_view = counts
        .iter()
        .position(|&c| c == n_star)
        .expect("the consensus count is realized by some view");

    let ref_vs: Vec<f64> = order[reference_view]
        .iter()
        .map(|&i| dets_per_view[reference_view][i].uv_mm[1])
        .collect();

    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_star];
    for v in 0..k {
        let m = counts[v];
        if m == 0 {
            continue;
        }
        if m == n_star {
            for g in 0..n_star {
                groups[g].push((v, order[v][g]));
            }
            continue;
        }
        let view_vs: Vec<f64> = order[v].iter().map(|&i| dets_per_view[v][i].uv_mm[1]).collect();
        if m < n_star {
            for (si, li) in align_monotone(&view_vs, &ref_vs) {
                groups[li].push((v, order[v][si]));
            }
        } else {
            for (si, li) in align_monotone(&ref_vs, &view_vs) {
                groups[si].push((v, order[v][li]));
            }
        }
    }
    Ok(CorrespondenceSet { n_groups: n_star, groups, reference_view })
}

const CONDITION_LIMIT: f64 = 1e8;

/// Least-squares intersection of a ray bundle.
///
/// Minimizes the sum over lines of the squared perpendicular distance, a
/// quadratic whose normal equations `S p = q` use `S = Σ (I − n nᵀ)` and
/// `q = Σ (I − n nᵀ) a`. Solved by symmetric eigendecomposition; a bundle
/// whose matrix is singular or has condition number above 1e8 (near-parallel
/// rays) is rejected with the indices of the lines aligned to the flat
/// direction. Returns the point and the residual sum of squared distances.
pub fn triangulate(lines: &[Line3]) -> Result<(Point3, f64)> {
    if lines.len() < 2 {
        return Err(Error::Config(format!(
            "triangulation needs at least 2 lines, got {}",
            lines.len()
        )));
    }
    let mut s = Matrix3::zeros();
    let mut q = Vec3::zeros();
    for line in lines {
        let proj = Matrix3::identity() - line.n * line.n.transpose();
        s += proj;
        q += proj * line.a.coords;
    }

    let eig = SymmetricEigen::new(s);
    let (mut lo, mut hi) = (0, 0);
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[lo] {
            lo = i;
        }
        if eig.eigenvalues[i] > eig.eigenvalues[hi] {
            hi = i;
        }
    }
    let (l_min, l_max) = (eig.eigenvalues[lo], eig.eigenvalues[hi]);
    if l_min <= 0.0 || l_max / l_min > CONDITION_LIMIT {
        let cond = if l_min <= 0.0 { f64::INFINITY } else { l_max / l_min };
        let flat = eig.eigenvectors.column(lo);
        let mut offenders: Vec<usize> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.n.dot(&flat).abs() >= 0.999)
            .map(|(i, _)| i)
            .collect();
        if offenders.is_empty() {
            offenders = (0..lines.len()).collect();
        }
        return Err(Error::DegenerateGeometry { cond, lines: offenders });
    }

    let mut p = Vec3::zeros();
    for i in 0..3 {
        let v = eig.eigenvectors.column(i);
        p += v * (v.dot(&q) / eig.eigenvalues[i]);
    }
    let p = Point3::from(p);
    let residual = lines.iter().map(|l| l.distance_to(&p).powi(2)).sum();
    Ok((p, residual))
}

/// Per-view voting weights `(1 − loss) / Σ (1 − loss)`.
pub fn vote_weights(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::Config("no views to weight".into()));
    }
    let raw: Vec<f64> = losses.iter().map(|l| 1.0 - l).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric(format!(
            "voting weight normalizer {total} is not positive"
        )));
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// Weighted entrywise blend of same-shape probability maps, weights from
/// [`vote_weights`]. Rows stay normalized because the blend is convex.
pub fn vote_probmaps(pms: &[&ProbMap], losses: &[f64]) -> Result<ProbMap> {
    if pms.is_empty() {
        return Err(Error::Config("no probability maps to vote".into()));
    }
    if pms.len() != losses.len() {
        return Err(Error::Data(format!(
            "{} probability maps but {} losses",
            pms.len(),
            losses.len()
        )));
    }
    let (n, c) = (pms[0].n(), pms[0].c());
    for pm in &pms[1..] {
        if pm.n() != n || pm.c() != c {
            return Err(Error::Data(format!(
                "probability map shapes disagree: {}x{} vs {n}x{c}",
                pm.n(),
                pm.c()
            )));
        }
    }
    let weights = vote_weights(losses)?;
    let mut rows = vec![vec![0.0f64; c]; n];
    for (pm, &w) in pms.iter().zip(&weights) {
        for (acc, row) in rows.iter_mut().zip(pm.rows()) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += w * v;
            }
        }
    }
    ProbMap::new(None, rows, c)
}

/// Run the whole fusion stage over per-view inputs.
///
/// Correspondence comes from [`match_views`]; each view's sequence loss is
/// computed on its own probability map; voting happens on per-group aligned
/// maps where a view missing a group contributes a uniform row. Groups with
/// at least two supporting views are triangulated (a degenerate bundle error
/// reports view indices); the rest are listed in `unlocalized`.
pub fn fuse_all(views: &[ViewInput], dp: &DpParams) -> Result<FusionResult> {
    if views.len() < 2 {
        return Err(Error::Config(format!(
            "fusion needs at least 2 views, got {}",
            views.len()
        )));
    }
    for (k, view) in views.iter().enumerate() {
        match &view.probmap {
            Some(pm) if view.dets.is_empty() => {
                return Err(Error::Data(format!(
                    "view {k}: probability map with {} rows but no detections",
                    pm.n()
                )))
            }
            Some(pm) if pm.n() != view.dets.len() => {
                return Err(Error::Data(format!(
                    "view {k}: probability map has {} rows for {} detections",
                    pm.n(),
                    view.dets.len()
                )))
            }
            None if !view.dets.is_empty() => {
                return Err(Error::Data(format!(
                    "view {k}: {} detections without a probability map",
                    view.dets.len()
                )))
            }
            _ => {}
        }
    }
    let c = views
        .iter()
        .filter_map(|v| v.probmap.as_ref())
        .map(ProbMap::c)
        .next()
        .ok_or_else(|| Error::Data("no detections in any view".into()))?;
    if let Some(bad) = views
        .iter()
        .filter_map(|v| v.probmap.as_ref())
        .find(|pm| pm.c() != c)
    {
        return Err(Error::Data(format!(
            "probability maps disagree on category count: {} vs {c}",
            bad.c()
        )));
    }

    let dets_per_view: Vec<Vec<Detection2D>> = views.iter().map(|v| v.dets.clone()).collect();
    let corr = match_views(&dets_per_view)?;

    let mut view_losses: Vec<Option<f64>> = vec![None; views.len()];
    let mut aligned: Vec<ProbMap> = Vec::new();
    let mut voting_views: Vec<usize> = Vec::new();
    for (k, view) in views.iter().enumerate() {
        let Some(pm) = &view.probmap else { continue };
        view_losses[k] = Some(sequence_loss(pm.rows(), dp)?);
        let mut rows = vec![vec![1.0 / c as f64; c]; corr.n_groups];
        for (g, group) in corr.groups.iter().enumerate() {
            for &(vi, di) in group {
                if vi == k {
                    rows[g] = pm.row(di).to_vec();
                }
            }
        }
        aligned.push(ProbMap::new(Some(k), rows, c)?);
        voting_views.push(k);
    }

    let losses: Vec<f64> = voting_views
        .iter()
        .map(|&k| view_losses[k].expect("voting views have losses"))
        .collect();
    let weights = vote_weights(&losses)?;
    let mut view_weights = vec![0.0; views.len()];
    for (i, &k) in voting_views.iter().enumerate() {
        view_weights[k] = weights[i];
    }
    let voted = vote_probmaps(&aligned.iter().collect::<Vec<_>>(), &losses)?;

    let dp_res = dp_table(voted.rows(), dp)?;
    let corrected = correct_labels(voted.rows(), dp)?;
    let argmax_labels = single_view_labels(&voted);

    let mut vertebrae = Vec::new();
    let mut unlocalized = Vec::new();
    for (g, group) in corr.groups.iter().enumerate() {
        if group.len() < 2 {
            unlocalized.push(g);
            continue;
        }
        let lines: Vec<Line3> = group
            .iter()
            .map(|&(vi, di)| {
                let d = &views[vi].dets[di];
                views[vi].geometry.backproject(d.uv_mm[0], d.uv_mm[1])
            })
            .collect();
        let (p, residual) = triangulate(&lines).map_err(|e| match e {
            // line positions within the bundle → the views they came from
            Error::DegenerateGeometry { cond, lines: idx } => Error::DegenerateGeometry {
                cond,
                lines: idx.into_iter().map(|i| group[i].0).collect(),
            },
            other => other,
        })?;
        vertebrae.push(LabeledCentroid3 {
            label: corrected.labels[g],
            center_mm: [p.x, p.y, p.z],
            support: group.len(),
            residual,
        });
    }

    Ok(FusionResult {
        vertebrae,
        labels: corrected.labels,
        anchored: corrected.anchored,
        argmax_labels,
        view_losses,
        view_weights,
        unlocalized,
        correspondences: corr,
        voted,
        dp: dp_res,
    })
}
