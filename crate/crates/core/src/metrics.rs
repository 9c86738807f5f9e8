//! Scoring fused outputs against ground truth, and the view-count sweep.
//!
//! [`evaluate`] matches predictions to annotated centers greedily by
//! distance (one-to-one, within a radius) and reports the identification
//! rate over all ground-truth vertebrae alongside the mean localization
//! error over the matched pairs — the two live on different bases on
//! purpose, so a missed vertebra hurts the rate but never the error.
//! [`sweep_k`] repeats the whole pipeline over a grid of view counts and
//! seeds and aggregates per-K statistics for ablation plots.

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::LabeledCentroid3;
use crate::labels::{Annotation3, VertebraLabel};

/// One matched ground-truth/prediction pair.
#[derive(Debug, Clone, Serialize)]
pub struct PairReport {
    pub label_gt: VertebraLabel,
    pub label_pred: VertebraLabel,
    pub error_mm: f64,
}

/// Evaluation scores. `id_rate` counts correct-label matches over all
/// ground-truth vertebrae; `l_error_mm` averages distance over matched pairs
/// only (NaN when nothing matched). `matched + missed` equals the
/// ground-truth count; `spurious` counts unmatched predictions.
#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub id_rate: f64,
    pub l_error_mm: f64,
    pub total: usize,
    pub matched: usize,
    pub missed: usize,
    pub spurious: usize,
    pub per_vertebra: Vec<PairReport>,
}

/// Greedy nearest-first one-to-one matching within `match_radius_mm`.
///
/// Candidate pairs are taken in ascending distance order with
/// permutation-invariant tie-breaking (ground-truth index, then predicted
/// center coordinates, then predicted label), so shuffling the prediction
/// list never changes the result.
pub fn evaluate(
    pred: &[LabeledCentroid3],
    gt: &Annotation3,
    match_radius_mm: f64,
) -> Result<EvalResult> {
    if !(match_radius_mm > 0.0) {
        return Err(Error::Config(format!(
            "match radius must be positive, got {match_radius_mm}"
        )));
    }
    let total = gt.len();
    if total == 0 {
        return Err(Error::Data("ground truth has no vertebrae".into()));
    }

    struct Candidate {
        dist: f64,
        gi: usize,
        pi: usize,
        key: ([u64; 3], usize),
    }
    let coord_key = |p: &LabeledCentroid3| {
        [
            p.center_mm[0].to_bits(),
            p.center_mm[1].to_bits(),
            p.center_mm[2].to_bits(),
        ]
    };
    let mut cands: Vec<Candidate> = Vec::new();
    for (gi, entry) in gt.entries().iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            let dist = (p.center() - entry.center()).norm();
            if dist <= match_radius_mm {
                cands.push(Candidate { dist, gi, pi, key: (coord_key(p), p.label.index()) });
            }
        }
    }
    cands.sort_by(|a, b| {
        a.dist
            .total_cmp(&b.dist)
            .then(a.gi.cmp(&b.gi))
            .then(a.key.cmp(&b.key))
    });

    let mut gt_taken = vec![false; total];
    let mut pred_taken = vec![false; pred.len()];
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for c in &cands {
        if !gt_taken[c.gi] && !pred_taken[c.pi] {
            gt_taken[c.gi] = true;
            pred_taken[c.pi] = true;
            pairs.push((c.gi, c.pi, c.dist));
        }
    }

    pairs.sort_by_key(|&(gi, _, _)| gi);
    let matched = pairs.len();
    let correct = pairs
        .iter()
        .filter(|&&(gi, pi, _)| gt.entries()[gi].label == pred[pi].label)
        .count();
    let l_error_mm = if matched > 0 {
        pairs.iter().map(|&(_, _, d)| d).sum::<f64>() / matched as f64
    } else {
        f64::NAN
    };
    let per_vertebra = pairs
        .iter()
        .map(|&(gi, pi, d)| PairReport {
            label_gt: gt.entries()[gi].label,
            label_pred: pred[pi].label,
            error_mm: d,
        })
        .collect();

    Ok(EvalResult {
        id_rate: correct as f64 / total as f64,
        l_error_mm,
        total,
        matched,
        missed: total - matched,
        spurious: pred.len() - matched,
        per_vertebra,
    })
}

/// One pipeline run's scores within a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub id_rate: f64,
    pub l_error_mm: f64,
    pub matched: usize,
    pub missed: usize,
    pub spurious: usize,
}

/// Per-K aggregate of sweep rows; the deviation is the sample standard
/// deviation (n−1) of the localization error over runs with matches.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub k: usize,
    pub runs: usize,
    pub mean_id_rate: f64,
    pub mean_l_error_mm: f64,
    pub sd_l_error_mm: f64,
}

/// Run the full pipeline for every `(k, seed)` combination.
///
/// Projection images are skipped — nothing downstream of the simulated
/// detector consumes pixels, so the sweep only pays for geometry, oracles,
/// and fusion. Runs execute in parallel; row order is the deterministic
/// `ks × seeds` grid order regardless of thread count.
pub fn sweep_k(base: &RunConfig, ks: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;

    if ks.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one view count and one seed".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k < 2) {
        return Err(Error::Config(format!("sweep view counts must be at least 2, got {k}")));
    }
    let grid: Vec<(usize, u64)> = ks
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    grid.par_iter()
        .map(|&(k, seed)| {
            let mut cfg = base.clone();
            cfg.n_views = k;
            cfg.seed = seed;
            cfg.render_drrs = false;
            let eval = crate::pipeline::run_once(&cfg)?.eval;
            Ok(SweepRow {
                k,
                seed,
                id_rate: eval.id_rate,
                l_error_mm: eval.l_error_mm,
                matched: eval.matched,
                missed: eval.missed,
                spurious: eval.spurious,
            })
        })
        .collect()
}

/// Group sweep rows by K (ascending) and aggregate.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter()
        .map(|k| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.k == k).collect();
            let runs = group.len();
            let mean_id = group.iter().map(|r| r.id_rate).sum::<f64>() / runs as f64;
            let errs: Vec<f64> = group
                .iter()
                .map(|r| r.l_error_mm)
                .filter(|e| e.is_finite())
                .collect();
            let (mean_err, sd_err) = if errs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let mean = errs.iter().sum::<f64>() / errs.len() as f64;
                let sd = if errs.len() > 1 {
                    (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
                        / (errs.len() - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                (mean, sd)
            };
            SweepSummary {
                k,
                runs,
                mean_id_rate: mean_id,
                mean_l_error_mm: mean_err,
                sd_l_error_mm: sd_err,
            }
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "K,seed,id_rate,l_error_mm,matched,missed,spurious";

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{},{}\n",
            r.k, r.seed, r.id_rate, r.l_error_mm, r.matched, r.missed, r.spurious
        ));
    }
    out
}

/// Parse [`rows_to_csv`] output back; round-trips everything but float
/// precision beyond six decimals.
pub fn rows_from_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == SWEEP_CSV_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "bad sweep CSV header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Data(format!("sweep CSV row {i} has {} fields", f.len())));
        }
        let bad = |what: &str| Error::Data(format!("sweep CSV row {i}: bad {what}"));
        rows.push(SweepRow {
            k: f[0].trim().parse().map_err(|_| bad("K"))?,
            seed: f[1].trim().parse().map_err(|_| bad("seed"))?,
            id_rate: f[2].trim().parse().map_err(|_| bad("id_rate"))?,
            l_error_mm: f[3].trim().parse().map_err(|_| bad("l_error_mm"))?,
            matched: f[4].trim().parse().map_err(|_| bad("matched"))?,
            missed: f[5].trim().parse().map_err(|_| bad("missed"))?,
            spurious: f[6].trim().parse().map_err(|_| bad("spurious"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::AnnotatedCenter;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt_chain(start: usize, n: usize, spacing: f64) -> Annotation3 {
        let entries = (0..n)
            .map(|i| AnnotatedCenter {
                label: VertebraLabel::new(start + i).unwrap(),
                center_mm: [0.0, 0.0, i as f64 * spacing],
            })
            .collect();
        Annotation3::new(entries).unwrap()
    }

    fn pred(label: usize, center: [f64; 3]) -> LabeledCentroid3 {
        LabeledCentroid3 {
            label: VertebraLabel::new(label).unwrap(),
            center_mm: center,
            support: 2,
            residual: 0.0,
        }
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let gt = gt_chain(5, 4, 30.0);
        let preds: Vec<_> = gt
            .entries()
            .iter()
            .map(|e| pred(e.label.index(), e.center_mm))
            .collect();
        let r = evaluate(&preds, &gt, 20.0).unwrap();
        assert_eq!(r.id_rate, 1.0);
        assert_eq!(r.l_error_mm, 0.0);
        assert_eq!((r.total, r.matched, r.missed, r.spurious), (4, 4, 0, 0));
        assert_eq!(r.per_vertebra.len(), 4);
    }

    #[test]
    fn one_wrong_label_out_of_24() {
        let gt = gt_chain(1, 24, 30.0);
        let mut preds: Vec<_> = gt
            .entries()
            .iter()
            .map(|e| pred(e.label.index(), e.center_mm))
            .collect();
        preds[7].label = VertebraLabel::new(20).unwrap();
        let r = evaluate(&preds, &gt, 20.0).unwrap();
        assert!((r.id_rate - 23.0 / 24.0).abs() <= 1e-12, "got {}", r.id_rate);
        assert_eq!(r.matched, 24, "a wrong label still matches geometrically");
    }

    #[test]
    fn offsets_contribute_their_euclidean_distance() {
        let gt = gt_chain(10, 2, 40.0);
        let preds = vec![
            pred(10, [1.0, 2.0, 2.0]), // 3 mm off the first center
            pred(11, [0.0, 0.0, 40.0]),
        ];
        let r = evaluate(&preds, &gt, 20.0).unwrap();
        assert!((r.l_error_mm - 1.5).abs() <= 1e-12, "mean of 3 and 0, got {}", r.l_error_mm);
        assert!((r.per_vertebra[0].error_mm - 3.0).abs() <= 1e-12);
    }

    #[test]
    fn misses_and_spurious_are_counted_not_averaged() {
        let gt = gt_chain(1, 3, 40.0);
        let preds = vec![
            pred(1, [0.0, 0.0, 0.0]),
            pred(2, [0.0, 0.0, 40.0]),
            pred(7, [300.0, 0.0, 0.0]), // far from everything
        ];
        let r = evaluate(&preds, &gt, 20.0).unwrap();
        assert_eq!((r.matched, r.missed, r.spurious), (2, 1, 1));
        assert_eq!(r.l_error_mm, 0.0, "the spurious point must not pollute the mean");
        assert!((r.id_rate - 2.0 / 3.0).abs() <= 1e-12);

        let none = evaluate(&[], &gt, 20.0).unwrap();
        assert_eq!((none.matched, none.missed, none.spurious), (0, 3, 0));
        assert!(none.l_error_mm.is_nan(), "no matches, no error basis");
        assert_eq!(none.id_rate, 0.0);
    }

    #[test]
    fn matching_is_one_to_one_nearest_first() {
        // one prediction between two gt centers, closer to the second
        let gt = gt_chain(1, 2, 10.0);
        let preds = vec![pred(2, [0.0, 0.0, 6.0])];
        let r = evaluate(&preds, &gt, 20.0).unwrap();
        assert_eq!(r.matched, 1);
        assert_eq!(r.per_vertebra[0].label_gt.index(), 2, "the closer center wins");
        assert!((r.per_vertebra[0].error_mm - 4.0).abs() <= 1e-12);
    }

    #[test]
    fn prediction_order_never_changes_the_result() {
        let gt = gt_chain(3, 6, 25.0);
        let mut preds: Vec<_> = gt
            .entries()
            .iter()
            .map(|e| {
                pred(
                    e.label.index(),
                    [e.center_mm[0] + 1.0, e.center_mm[1], e.center_mm[2] + 2.0],
                )
            })
            .collect();
        preds.push(pred(26, [500.0, 0.0, 0.0]));
        let base = evaluate(&preds, &gt, 20.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            preds.shuffle(&mut rng);
            let r = evaluate(&preds, &gt, 20.0).unwrap();
            assert_eq!(r.matched, base.matched);
            assert!((r.id_rate - base.id_rate).abs() <= 1e-15);
            assert!((r.l_error_mm - base.l_error_mm).abs() <= 1e-12);
        }
    }

    #[test]
    fn evaluate_rejects_bad_inputs() {
        let gt = gt_chain(1, 2, 10.0);
        assert!(evaluate(&[], &gt, 0.0).is_err(), "zero radius");
        assert!(evaluate(&[], &gt, -1.0).is_err());
        let empty = Annotation3::new(Vec::new()).unwrap();
        assert!(evaluate(&[], &empty, 20.0).is_err(), "empty ground truth");
    }

    #[test]
    fn csv_roundtrip_and_summary() {
        let rows = vec![
            SweepRow { k: 5, seed: 0, id_rate: 1.0, l_error_mm: 0.5, matched: 5, missed: 0, spurious: 0 },
            SweepRow { k: 5, seed: 1, id_rate: 0.8, l_error_mm: 0.7, matched: 4, missed: 1, spurious: 1 },
            SweepRow { k: 10, seed: 0, id_rate: 1.0, l_error_mm: 0.3, matched: 5, missed: 0, spurious: 0 },
        ];
        let csv = rows_to_csv(&rows);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        let back = rows_from_csv(&csv).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!((back[1].k, back[1].seed, back[1].matched), (5, 1, 4));
        assert!((back[1].l_error_mm - 0.7).abs() <= 1e-6);

        let sums = summarize(&rows);
        assert_eq!(sums.len(), 2);
        assert_eq!(sums[0].k, 5);
        assert_eq!(sums[0].runs, 2);
        assert!((sums[0].mean_l_error_mm - 0.6).abs() <= 1e-12);
        let sd = ((0.1f64.powi(2) + 0.1f64.powi(2)) / 1.0).sqrt();
        assert!((sums[0].sd_l_error_mm - sd).abs() <= 1e-12);
        assert_eq!(sums[1].runs, 1);
        assert_eq!(sums[1].sd_l_error_mm, 0.0);

        assert!(rows_from_csv("nope\n1,2,3").is_err(), "bad header");
    }
}
