//! Anatomy-aware scoring and correction of label sequences.
//!
//! Input is an `n × c` score matrix whose rows follow detections down the
//! spine and whose columns are vertebra categories in anatomical order.
//! Because vertebrae are consecutive, a correct labeling traces a `+1/+1`
//! diagonal chain through the matrix; [`dp_table`] accumulates the best such
//! chain ending at every cell, paying the full `beta` reward for reading the
//! on-chain cell and a reduced `alpha` reward for reading a horizontal
//! neighbor instead (a one-column wobble). Chains may start at any cell of
//! the first row or first column, so a spine truncated by the field of view
//! can enter the category axis anywhere.
//!
//! [`sequence_loss`] turns the best final-row score into a quality loss in
//! `(-inf, 1]`: 0-ish for confident consecutive sequences (slightly negative
//! is possible, since the chain's first cell is rewarded unscaled), 1 for
//! hopeless ones. [`correct_labels`] anchors a consecutive label run on the
//! best final-row column, overriding per-row opinions that break the run; if
//! the run would extend below the first category it falls back to independent
//! per-row argmax and says so.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{VertebraLabel, DEFAULT_CATEGORIES};

/// Chain step rewards: `beta` for the on-diagonal cell, `alpha` for a
/// one-column horizontal wobble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DpParams {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.8 }
    }
}

impl DpParams {
    /// Requires `0 <= alpha <= beta <= 1` and `beta > 0`.
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.alpha && self.alpha <= self.beta && self.beta <= 1.0 && self.beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "chain rewards must satisfy 0 <= alpha <= beta <= 1 with beta > 0, got alpha={} beta={}",
                self.alpha, self.beta
            )))
        }
    }
}

/// Accumulated chain-score table plus the winning final-row entry.
///
/// `best_last_col` is a 0-based column index into the category axis; the
/// 1-based label index of that category is `best_last_col + 1`.
#[derive(Debug, Clone, Serialize)]
pub struct DpResult {
    pub opt: Vec<Vec<f64>>,
    pub best_score: f64,
    pub best_last_col: usize,
    pub seq_loss: f64,
}

fn check_matrix(rows: &[Vec<f64>]) -> Result<usize> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Data("score matrix has no rows".into()));
    }
    let c = rows[0].len();
    if c == 0 {
        return Err(Error::Data("score matrix has no columns".into()));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(Error::Data(format!(
                "score matrix is ragged: row {i} has {} entries, row 0 has {c}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite score {v} in row {i}")));
        }
    }
    Ok(c)
}

/// Index of the largest entry, ties toward the smaller index.
fn argmax_low(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Best-chain accumulation over a score matrix.
///
/// `opt[i][j]` is the score of the unique diagonal chain ending at `(i, j)`:
/// the raw score at the chain start (first row or first column), plus, for
/// every later cell, the best of `alpha`·left, `beta`·center, `alpha`·right
/// — a column past the right edge contributes 0. The final row's maximum
/// (ties toward the smaller column) gives `best_score`, `best_last_col`, and
/// `seq_loss = 1 - best_score / (beta * n)`, which is deliberately unclamped.
pub fn dp_table(rows: &[Vec<f64>], params: &DpParams) -> Result<DpResult> {
    params.validate()?;
    let c = check_matrix(rows)?;
    let n = rows.len();

    let mut opt = vec![vec![0.0f64; c]; n];
    opt[0].copy_from_slice(&rows[0]);
    for i in 1..n {
        let row = &rows[i];
        opt[i][0] = row[0];
        for j in 1..c {
            let left = params.alpha * row[j - 1];
            let center = params.beta * row[j];
            let right = if j + 1 < c { params.alpha * row[j + 1] } else { 0.0 };
            opt[i][j] = opt[i - 1][j - 1] + left.max(center).max(right);
        }
    }

    let best_last_col = argmax_low(&opt[n - 1]);
    let best_score = opt[n - 1][best_last_col];
    let seq_loss = 1.0 - best_score / (params.beta * n as f64);
    Ok(DpResult { opt, best_score, best_last_col, seq_loss })
}

/// Sequence quality loss `1 - best_score / (beta * n)`, unclamped.
pub fn sequence_loss(rows: &[Vec<f64>], params: &DpParams) -> Result<f64> {
    Ok(dp_table(rows, params)?.seq_loss)
}

/// Outcome of [`correct_labels`]: one label per matrix row.
///
/// `anchored` is true when the labels are the consecutive run ending at the
/// table's best final-row column; false when that run would fall below the
/// first category and the labels are instead independent per-row argmaxes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorrectedLabels {
    pub labels: Vec<VertebraLabel>,
    pub anchored: bool,
}

/// Consecutive-run label assignment anchored on the best final-row column.
///
/// Row `i` (0-based) gets label index `best_last_col - n + 2 + i` (1-based),
/// so the final row gets the anchor itself and every earlier row follows by
/// walking the run backwards — single-row outliers in the input are thereby
/// overridden. If the run would start below label 1 the anchor is infeasible:
/// the fallback labels each row by its own argmax and reports `anchored:
/// false`.
pub fn correct_labels(rows: &[Vec<f64>], params: &DpParams) -> Result<CorrectedLabels> {
    let res = dp_table(rows, params)?;
    let n = rows.len();
    let c = rows[0].len();
    if c > DEFAULT_CATEGORIES {
        return Err(Error::Config(format!(
            "{c} label columns exceed the {DEFAULT_CATEGORIES} known vertebra categories"
        )));
    }

    if res.best_last_col + 1 >= n {
        let first = res.best_last_col + 1 - n; // 0-based column of the run start
        let labels = (0..n)
            .map(|i| VertebraLabel::new(first + i + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(CorrectedLabels { labels, anchored: true })
    } else {
        let labels = rows
            .iter()
            .map(|row| VertebraLabel::new(argmax_low(row) + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(CorrectedLabels { labels, anchored: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn defaults() -> DpParams {
        DpParams::default()
    }

    /// Chain-walk evaluation of a single cell, written without the
    /// incremental table: back the chain up to its start on the first row or
    /// first column, then add the step rewards forward one by one.
    fn chain_walk_cell(rows: &[Vec<f64>], i: usize, j: usize, dp: &DpParams) -> f64 {
        let k = i.min(j);
        let (i0, j0) = (i - k, j - k);
        let c = rows[0].len();
        let mut score = rows[i0][j0];
        for s in 1..=k {
            let (r, t) = (i0 + s, j0 + s);
            let left = dp.alpha * rows[r][t - 1];
            let center = dp.beta * rows[r][t];
            let right = if t + 1 < c { dp.alpha * rows[r][t + 1] } else { 0.0 };
            score += left.max(center).max(right);
        }
        score
    }

    #[test]
    fn random_tables_match_the_chain_walk_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..300 {
            let n = rng.gen_range(1..=6);
            let c = rng.gen_range(1..=8);
            let rows: Vec<Vec<f64>> =
                (0..n).map(|_| (0..c).map(|_| rng.gen::<f64>()).collect()).collect();
            let res = dp_table(&rows, &defaults()).expect("valid matrix");
            for i in 0..n {
                for j in 0..c {
                    let want = chain_walk_cell(&rows, i, j, &defaults());
                    assert!(
                        (res.opt[i][j] - want).abs() <= 1e-12,
                        "case {case}: cell ({i},{j}) = {} but chain walk gives {want}",
                        res.opt[i][j]
                    );
                }
            }
            let mut best_j = 0;
            for j in 1..c {
                if chain_walk_cell(&rows, n - 1, j, &defaults())
                    > chain_walk_cell(&rows, n - 1, best_j, &defaults())
                {
                    best_j = j;
                }
            }
            assert_eq!(res.best_last_col, best_j, "case {case}: winning column disagrees");
        }
    }

    #[test]
    fn two_row_hand_case() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let res = dp_table(&rows, &defaults()).unwrap();
        let want_last = [0.0, 1.8, 0.1];
        for (j, want) in want_last.iter().enumerate() {
            assert!(
                (res.opt[1][j] - want).abs() <= 1e-12,
                "final row col {j}: {} != {want}",
                res.opt[1][j]
            );
        }
        assert!((res.best_score - 1.8).abs() <= 1e-12);
        assert_eq!(res.best_last_col, 1);
        assert!((res.seq_loss - (-0.125)).abs() <= 1e-12, "loss {}", res.seq_loss);

        let corr = correct_labels(&rows, &defaults()).unwrap();
        assert!(corr.anchored);
        assert_eq!(corr.labels[0].name(), "C1");
        assert_eq!(corr.labels[1].name(), "C2");
    }

    #[test]
    fn uniform_matrix_loss_matches_closed_form() {
        let rows = vec![vec![1.0 / 26.0; 26]; 3];
        let res = dp_table(&rows, &defaults()).unwrap();
        // On a constant matrix every step's best reward is beta * p, so the
        // winning chain is the base cell plus two scaled steps.
        let p = 1.0 / 26.0;
        let best = p + 0.8 * p + 0.8 * p;
        assert!((res.best_score - best).abs() <= 1e-12);
        assert_eq!(res.best_last_col, 2, "earliest of the tied full-length chains");
        let want_loss = 1.0 - best / (0.8 * 3.0);
        assert!((res.seq_loss - want_loss).abs() <= 1e-12, "loss {}", res.seq_loss);

        let corr = correct_labels(&rows, &defaults()).unwrap();
        assert!(corr.anchored);
        let names: Vec<_> = corr.labels.iter().map(|l| l.name()).collect();
        assert_eq!(names, ["C1", "C2", "C3"]);
    }

    #[test]
    fn degenerate_shapes() {
        let rows = vec![vec![0.0; 5]; 4];
        let res = dp_table(&rows, &defaults()).unwrap();
        assert!(res.opt.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(res.best_score, 0.0);
        assert_eq!(res.best_last_col, 0);
        assert_eq!(res.seq_loss, 1.0);

        let one = vec![vec![0.3, 0.9, 0.1]];
        let res = dp_table(&one, &defaults()).unwrap();
        assert_eq!(res.opt, one, "single row is the base case verbatim");
        let corr = correct_labels(&one, &defaults()).unwrap();
        assert!(corr.anchored);
        assert_eq!(corr.labels[0].name(), "C2");

        assert!(dp_table(&[], &defaults()).is_err(), "no rows");
        assert!(dp_table(&[vec![]], &defaults()).is_err(), "no columns");
        assert!(
            dp_table(&[vec![1.0], vec![1.0, 2.0]], &defaults()).is_err(),
            "ragged rows"
        );
        assert!(dp_table(&[vec![f64::NAN]], &defaults()).is_err(), "non-finite");
    }

    #[test]
    fn one_hot_diagonal_scores_one_plus_steps() {
        let n = 5;
        let mut rows = vec![vec![0.0; 26]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            row[10 + i] = 1.0;
        }
        let res = dp_table(&rows, &defaults()).unwrap();
        let want = 1.0 + 0.8 + 0.8 + 0.8 + 0.8;
        assert!((res.best_score - want).abs() <= 1e-12);
        assert_eq!(res.best_last_col, 14);

        let corr = correct_labels(&rows, &defaults()).unwrap();
        assert!(corr.anchored);
        let names: Vec<_> = corr.labels.iter().map(|l| l.name()).collect();
        assert_eq!(names, ["T4", "T5", "T6", "T7", "T8"]);
    }

    #[test]
    fn single_row_outlier_is_corrected_by_the_anchor() {
        // One-hot diagonal at columns 10..=13, except row 2's vote jumps to
        // column 20. The diagonal chain still dominates (2.6 vs at most 1.0
        // for chains through the outlier), so the anchor and hence every
        // label is unchanged, relabeling the outlier row.
        let mut rows = vec![vec![0.0; 26]; 4];
        rows[0][10] = 1.0;
        rows[1][11] = 1.0;
        rows[2][20] = 1.0;
        rows[3][13] = 1.0;
        let res = dp_table(&rows, &defaults()).unwrap();
        assert_eq!(res.best_last_col, 13);
        let corr = correct_labels(&rows, &defaults()).unwrap();
        assert!(corr.anchored);
        let names: Vec<_> = corr.labels.iter().map(|l| l.name()).collect();
        assert_eq!(names, ["T4", "T5", "T6", "T7"]);
    }

    #[test]
    fn infeasible_anchor_falls_back_to_row_argmax() {
        // Every row votes for the first category, so the winning final-row
        // column (1, after ties break low) cannot seed a 3-long run.
        let mut rows = vec![vec![0.0; 5]; 3];
        for row in &mut rows {
            row[0] = 1.0;
        }
        let res = dp_table(&rows, &defaults()).unwrap();
        let want_last = [1.0, 1.1, 1.1, 0.0, 0.0];
        for (j, want) in want_last.iter().enumerate() {
            assert!(
                (res.opt[2][j] - want).abs() <= 1e-12,
                "final row col {j}: {} != {want}",
                res.opt[2][j]
            );
        }
        assert_eq!(res.best_last_col, 1);

        let corr = correct_labels(&rows, &defaults()).unwrap();
        assert!(!corr.anchored, "chain from column 1 cannot cover 3 rows");
        let names: Vec<_> = corr.labels.iter().map(|l| l.name()).collect();
        assert_eq!(names, ["C1", "C1", "C1"]);
    }

    #[test]
    fn params_validation() {
        assert!(defaults().validate().is_ok());
        assert!(DpParams { alpha: 0.0, beta: 1.0 }.validate().is_ok());
        assert!(DpParams { alpha: -0.1, beta: 0.8 }.validate().is_err());
        assert!(DpParams { alpha: 0.9, beta: 0.8 }.validate().is_err(), "alpha above beta");
        assert!(DpParams { alpha: 0.1, beta: 1.2 }.validate().is_err());
        assert!(DpParams { alpha: 0.0, beta: 0.0 }.validate().is_err(), "beta must be positive");
        assert!(DpParams { alpha: f64::NAN, beta: 0.8 }.validate().is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=5, 1usize..=7).prop_flat_map(|(n, c)| {
            proptest::collection::vec(proptest::collection::vec(0.0..1.0f64, c), n)
        })
    }

    proptest! {
        #[test]
        fn raising_one_entry_never_lowers_the_best_score(
            mut rows in matrix_strategy(),
            pick in (0usize..100, 0usize..100),
            delta in 0.0..1.0f64,
        ) {
            let before = dp_table(&rows, &defaults()).unwrap().best_score;
            let i = pick.0 % rows.len();
            let j = pick.1 % rows[0].len();
            rows[i][j] += delta;
            let after = dp_table(&rows, &defaults()).unwrap().best_score;
            prop_assert!(after >= before - 1e-12, "raising ({i},{j}) dropped {before} to {after}");
        }

        #[test]
        fn scaling_scales_the_table_and_loss_stays_below_one(
            rows in matrix_strategy(),
            t in 0.0..2.5f64,
        ) {
            let base = dp_table(&rows, &defaults()).unwrap();
            prop_assert!(base.seq_loss <= 1.0 + 1e-12, "non-negative scores keep loss <= 1");

            let scaled: Vec<Vec<f64>> =
                rows.iter().map(|r| r.iter().map(|v| v * t).collect()).collect();
            let res = dp_table(&scaled, &defaults()).unwrap();
            for (ra, rb) in res.opt.iter().zip(&base.opt) {
                for (&a, &b) in ra.iter().zip(rb) {
                    prop_assert!((a - t * b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {}", t * b);
                }
            }

            let corr = correct_labels(&rows, &defaults()).unwrap();
            if corr.anchored {
                for w in corr.labels.windows(2) {
                    prop_assert_eq!(w[1].index(), w[0].index() + 1, "anchored run must be consecutive");
                }
            }
        }
    }
}
