//! Combining an original head's scores with a retrained head's scores.
//!
//! All strategies here operate column-wise on row-aligned score matrices;
//! rows must come from the same proposals in the same order. The combined
//! matrix is consumed directly by detection decoding, without re-normalizing
//! rows, so strategies that splice or scale columns deliberately leave rows
//! that no longer sum to 1.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::scores::ScoreMatrix;
use crate::twostage::Detection;
use crate::world::{BinId, Category};
use crate::{Error, Result};

/// Default zeroing threshold for [`Strategy::CatThr`].
pub const DEFAULT_CAT_THR: f64 = 0.05;

/// How the retrained head's scores replace or merge with the original's.
///
/// `Det` is detection-level (see [`combine_detections_det`]); everything
/// else is matrix-level and handled by [`combine`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Use the retrained head's matrix wholesale.
    Only,
    /// Entry-wise mean of the two matrices.
    Avg,
    /// Keep original detections for many-shot classes, retrained detections
    /// for tail classes.
    Det,
    /// Tail columns from the retrained head, many-shot and background
    /// columns from the original.
    Cat,
    /// `Cat`, with retrained scores at or below a threshold zeroed first.
    CatThr,
    /// `Cat`, with retrained tail scores scaled by the ratio of mean
    /// background scores first.
    CatScale,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Only,
        Strategy::Avg,
        Strategy::Det,
        Strategy::Cat,
        Strategy::CatThr,
        Strategy::CatScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Only => "only",
            Strategy::Avg => "avg",
            Strategy::Det => "det",
            Strategy::Cat => "cat",
            Strategy::CatThr => "cat-thr",
            Strategy::CatScale => "cat-scale",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown strategy {s:?}; expected one of only|avg|det|cat|cat-thr|cat-scale"
                ))
            })
    }
}

/// Tunables for the parameterized strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombineParams {
    /// `CatThr`: retrained scores at or below this are zeroed.
    pub cat_threshold: f64,
    /// `CatScale`: flip the scale to mean(new bg) / mean(orig bg).
    pub invert_scale: bool,
}

impl Default for CombineParams {
    fn default() -> Self {
        CombineParams {
            cat_threshold: DEFAULT_CAT_THR,
            invert_scale: false,
        }
    }
}

/// Partition of the category ids into tail and many-shot classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinSplit {
    pub tail: BTreeSet<u32>,
    pub manyshot: BTreeSet<u32>,
}

impl BinSplit {
    /// Tail = categories whose bin is in `tail_bins`, many-shot = the rest.
    pub fn from_categories(categories: &[Category], tail_bins: &[BinId]) -> BinSplit {
        let mut tail = BTreeSet::new();
        let mut manyshot = BTreeSet::new();
        for cat in categories {
            if tail_bins.contains(&cat.bin) {
                tail.insert(cat.id);
            } else {
                manyshot.insert(cat.id);
            }
        }
        BinSplit { tail, manyshot }
    }

    /// Checks that the split covers `class_order` exactly, with no overlap
    /// and no stray ids.
    pub fn validate_for(&self, class_order: &[u32]) -> Result<()> {
        if let Some(id) = self.tail.intersection(&self.manyshot).next() {
            return Err(Error::config(format!(
                "category {id} is in both the tail and many-shot sets"
            )));
        }
        for &id in class_order {
            if !self.tail.contains(&id) && !self.manyshot.contains(&id) {
                return Err(Error::config(format!(
                    "category {id} is in neither the tail nor the many-shot set"
                )));
            }
        }
        let known: BTreeSet<u32> = class_order.iter().copied().collect();
        for &id in self.tail.iter().chain(&self.manyshot) {
            if !known.contains(&id) {
                return Err(Error::config(format!(
                    "split names category {id} which the score matrix does not have"
                )));
            }
        }
        Ok(())
    }

    pub fn is_tail(&self, category_id: u32) -> bool {
        self.tail.contains(&category_id)
    }
}

fn check_layout(orig: &ScoreMatrix, new: &ScoreMatrix) -> Result<()> {
    if !orig.same_layout(new) {
        return Err(Error::shape(format!(
            "score matrices differ in layout: {}x{} vs {}x{} or class order mismatch",
            orig.num_rows(),
            orig.num_cols(),
            new.num_rows(),
            new.num_cols()
        )));
    }
    Ok(())
}

/// Combines two row-aligned score matrices. `split` decides which columns
/// count as tail for the `Cat*` strategies; `Only` and `Avg` ignore it.
pub fn combine(
    strategy: Strategy,
    orig: &ScoreMatrix,
    new: &ScoreMatrix,
    split: &BinSplit,
    params: &CombineParams,
) -> Result<ScoreMatrix> {
    check_layout(orig, new)?;
    if !params.cat_threshold.is_finite() || params.cat_threshold < 0.0 {
        return Err(Error::config("cat_threshold must be finite and non-negative"));
    }
    match strategy {
        Strategy::Only => Ok(new.clone()),
        Strategy::Avg => {
            let mut out = orig.clone();
            for r in 0..out.num_rows() {
                let n = new.row(r);
                for (c, slot) in out.row_mut(r).iter_mut().enumerate() {
                    *slot = 0.5 * (*slot + n[c]);
                }
            }
            Ok(out)
        }
        Strategy::Det => Err(Error::config(
            "strategy `det` combines decoded detections, not score matrices; \
             use combine_detections_det",
        )),
        Strategy::Cat => {
            split.validate_for(orig.class_order())?;
            Ok(splice_tail_columns(orig, new, split, |s| s))
        }
        Strategy::CatThr => {
            split.validate_for(orig.class_order())?;
            let thr = params.cat_threshold;
            Ok(splice_tail_columns(orig, new, split, |s| {
                if s <= thr {
                    0.0
                } else {
                    s
                }
            }))
        }
        Strategy::CatScale => {
            split.validate_for(orig.class_order())?;
            let orig_bg = orig.column_mean(orig.background_col());
            let new_bg = new.column_mean(new.background_col());
            let (num, den) = if params.invert_scale {
                (new_bg, orig_bg)
            } else {
                (orig_bg, new_bg)
            };
            if den == 0.0 || !(num / den).is_finite() {
                return Err(Error::config(format!(
                    "background scale {num}/{den} is not a finite ratio"
                )));
            }
            let k = num / den;
            Ok(splice_tail_columns(orig, new, split, move |s| k * s))
        }
    }
}

/// Tail columns from `new` (through `map`), everything else from `orig`.
fn splice_tail_columns(
    orig: &ScoreMatrix,
    new: &ScoreMatrix,
    split: &BinSplit,
    map: impl Fn(f64) -> f64,
) -> ScoreMatrix {
    let tail_cols: Vec<usize> = orig
        .class_order()
        .iter()
        .enumerate()
        .filter(|(_, &id)| split.is_tail(id))
        .map(|(c, _)| c)
        .collect();
    let mut out = orig.clone();
    for r in 0..out.num_rows() {
        let n = new.row(r);
        let row = out.row_mut(r);
        for &c in &tail_cols {
            row[c] = map(n[c]);
        }
    }
    out
}

/// Detection-level combination: original detections for many-shot classes,
/// retrained-head detections for tail classes, with the per-image cap
/// re-applied by score (ties: lower category id, then source order).
pub fn combine_detections_det(
    orig: &[Detection],
    new: &[Detection],
    split: &BinSplit,
    max_per_image: usize,
) -> Result<Vec<Detection>> {
    if max_per_image == 0 {
        return Err(Error::config("max_per_image must be at least 1"));
    }
    let mut merged: Vec<&Detection> = Vec::new();
    for det in orig {
        if !split.is_tail(det.category_id) {
            if !split.manyshot.contains(&det.category_id) {
                return Err(Error::config(format!(
                    "detection category {} is not covered by the split",
                    det.category_id
                )));
            }
            merged.push(det);
        }
    }
    for det in new {
        if split.is_tail(det.category_id) {
            merged.push(det);
        } else if !split.manyshot.contains(&det.category_id) {
            return Err(Error::config(format!(
                "detection category {} is not covered by the split",
                det.category_id
            )));
        }
    }

    let mut by_image: std::collections::BTreeMap<u64, Vec<(usize, &Detection)>> =
        std::collections::BTreeMap::new();
    for (i, det) in merged.iter().enumerate() {
        by_image.entry(det.image_id).or_default().push((i, det));
    }
    let mut out = Vec::new();
    for (_, mut dets) in by_image {
        dets.sort_by(|a, b| {
            b.1.score
                .total_cmp(&a.1.score)
                .then(a.1.category_id.cmp(&b.1.category_id))
                .then(a.0.cmp(&b.0))
        });
        dets.truncate(max_per_image);
        out.extend(dets.into_iter().map(|(_, d)| d.clone()));
    }
    Ok(out)
}

/// Entry-wise mean of several row-aligned score matrices. Used both for
/// averaging multiple retrained heads and for ensembling calibrated models.
pub fn mean_scores(matrices: &[&ScoreMatrix]) -> Result<ScoreMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::config("need at least one score matrix"))?;
    for m in &matrices[1..] {
        check_layout(first, m)?;
    }
    let mut out = (*first).clone();
    let inv = 1.0 / matrices.len() as f64;
    for r in 0..out.num_rows() {
        let row = out.row_mut(r);
        for (c, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for m in matrices {
                acc += m.get(r, c);
            }
            *slot = acc * inv;
        }
    }
    Ok(out)
}

/// Averages the score matrices of several retrained heads.
pub fn average_heads(matrices: &[&ScoreMatrix]) -> Result<ScoreMatrix> {
    mean_scores(matrices)
}

/// Averages the score matrices of several calibrated models.
pub fn ensemble_models(matrices: &[&ScoreMatrix]) -> Result<ScoreMatrix> {
    mean_scores(matrices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rect;

    fn matrix(rows: Vec<Vec<f64>>) -> ScoreMatrix {
        ScoreMatrix::from_rows(vec![0, 1], rows).unwrap()
    }

    fn split_tail0() -> BinSplit {
        BinSplit {
            tail: [0].into(),
            manyshot: [1].into(),
        }
    }

    fn close(a: &ScoreMatrix, b: &[Vec<f64>]) {
        for (r, row) in b.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert!(
                    (a.get(r, c) - v).abs() < 1e-15,
                    "entry ({r},{c}): {} vs {v}",
                    a.get(r, c)
                );
            }
        }
    }

    #[test]
    fn only_returns_the_new_matrix() {
        let orig = matrix(vec![vec![0.2, 0.2, 0.6]]);
        let new = matrix(vec![vec![0.5, 0.3, 0.2]]);
        let out = combine(Strategy::Only, &orig, &new, &split_tail0(), &CombineParams::default())
            .unwrap();
        assert_eq!(out, new);
    }

    #[test]
    fn avg_is_the_entrywise_mean() {
        let orig = matrix(vec![vec![0.2, 0.2, 0.6], vec![0.4, 0.4, 0.2]]);
        let new = matrix(vec![vec![0.4, 0.0, 0.6], vec![0.0, 0.8, 0.2]]);
        let out = combine(Strategy::Avg, &orig, &new, &split_tail0(), &CombineParams::default())
            .unwrap();
        close(&out, &[vec![0.3, 0.1, 0.6], vec![0.2, 0.6, 0.2]]);
    }

    #[test]
    fn cat_splices_tail_columns_and_keeps_background() {
        let orig = matrix(vec![vec![0.2, 0.3, 0.5], vec![0.1, 0.6, 0.3]]);
        let new = matrix(vec![vec![0.8, 0.1, 0.1], vec![0.45, 0.45, 0.1]]);
        let out = combine(Strategy::Cat, &orig, &new, &split_tail0(), &CombineParams::default())
            .unwrap();
        // Column 0 (tail) from new, column 1 and background from orig.
        close(&out, &[vec![0.8, 0.3, 0.5], vec![0.45, 0.6, 0.3]]);
        // Bitwise: spliced columns are copies, not recomputations.
        assert_eq!(out.get(0, 0), new.get(0, 0));
        assert_eq!(out.get(0, 1), orig.get(0, 1));
        assert_eq!(out.get(0, 2), orig.get(0, 2));
    }

    #[test]
    fn cat_thr_zeroes_small_new_scores_only() {
        let orig = matrix(vec![vec![0.01, 0.02, 0.97]]);
        let new = matrix(vec![vec![0.05, 0.9, 0.05]]);
        let out = combine(
            Strategy::CatThr,
            &orig,
            &new,
            &split_tail0(),
            &CombineParams::default(),
        )
        .unwrap();
        // New tail score 0.05 <= 0.05 is zeroed; orig columns keep their
        // small values untouched.
        close(&out, &[vec![0.0, 0.02, 0.97]]);

        let above = matrix(vec![vec![0.0501, 0.9, 0.05]]);
        let out = combine(
            Strategy::CatThr,
            &orig,
            &above,
            &split_tail0(),
            &CombineParams::default(),
        )
        .unwrap();
        close(&out, &[vec![0.0501, 0.02, 0.97]]);
    }

    #[test]
    fn cat_scale_doubles_when_background_halves() {
        // Orig bg mean 0.6, new bg mean 0.3: k = 2, new tail scores double.
        let orig = matrix(vec![vec![0.2, 0.2, 0.6], vec![0.2, 0.2, 0.6]]);
        let new = matrix(vec![vec![0.35, 0.35, 0.3], vec![0.35, 0.35, 0.3]]);
        let out = combine(
            Strategy::CatScale,
            &orig,
            &new,
            &split_tail0(),
            &CombineParams::default(),
        )
        .unwrap();
        close(&out, &[vec![0.7, 0.2, 0.6], vec![0.7, 0.2, 0.6]]);

        let inverted = combine(
            Strategy::CatScale,
            &orig,
            &new,
            &split_tail0(),
            &CombineParams {
                invert_scale: true,
                ..CombineParams::default()
            },
        )
        .unwrap();
        close(&inverted, &[vec![0.175, 0.2, 0.6], vec![0.175, 0.2, 0.6]]);
    }

    #[test]
    fn cat_scale_rejects_zero_background() {
        let orig = matrix(vec![vec![0.2, 0.2, 0.6]]);
        let new = matrix(vec![vec![0.5, 0.5, 0.0]]);
        let err = combine(
            Strategy::CatScale,
            &orig,
            &new,
            &split_tail0(),
            &CombineParams::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("background"), "{err}");
    }

    #[test]
    fn combine_validates_layout_and_split() {
        let orig = matrix(vec![vec![0.2, 0.2, 0.6]]);
        let wrong_rows = matrix(vec![vec![0.2, 0.2, 0.6], vec![0.2, 0.2, 0.6]]);
        assert!(combine(
            Strategy::Cat,
            &orig,
            &wrong_rows,
            &split_tail0(),
            &CombineParams::default()
        )
        .is_err());

        let wrong_order =
            ScoreMatrix::from_rows(vec![1, 0], vec![vec![0.2, 0.2, 0.6]]).unwrap();
        assert!(combine(
            Strategy::Cat,
            &orig,
            &wrong_order,
            &split_tail0(),
            &CombineParams::default()
        )
        .is_err());

        let hole = BinSplit {
            tail: [0].into(),
            manyshot: [].into(),
        };
        let new = matrix(vec![vec![0.5, 0.3, 0.2]]);
        let err = combine(Strategy::Cat, &orig, &new, &hole, &CombineParams::default())
            .unwrap_err();
        assert!(err.to_string().contains("neither"), "{err}");

        let overlap = BinSplit {
            tail: [0, 1].into(),
            manyshot: [1].into(),
        };
        assert!(combine(Strategy::Cat, &orig, &new, &overlap, &CombineParams::default()).is_err());

        assert!(combine(Strategy::Det, &orig, &new, &split_tail0(), &CombineParams::default())
            .is_err());
    }

    fn det(image_id: u64, category_id: u32, score: f64) -> Detection {
        Detection {
            image_id,
            category_id,
            bbox: Rect::new(0.1, 0.1, 0.2, 0.2).unwrap(),
            score,
        }
    }

    #[test]
    fn det_combination_merges_and_recaps() {
        let split = split_tail0();
        let orig = vec![det(0, 1, 0.9), det(0, 0, 0.8), det(1, 1, 0.4)];
        let new = vec![det(0, 0, 0.85), det(0, 1, 0.95)];
        // Keep orig many-shot (cat 1) and new tail (cat 0).
        let out = combine_detections_det(&orig, &new, &split, 10).unwrap();
        let summary: Vec<(u64, u32, f64)> =
            out.iter().map(|d| (d.image_id, d.category_id, d.score)).collect();
        assert_eq!(summary, vec![(0, 1, 0.9), (0, 0, 0.85), (1, 1, 0.4)]);

        let capped = combine_detections_det(&orig, &new, &split, 1).unwrap();
        let summary: Vec<(u64, u32, f64)> =
            capped.iter().map(|d| (d.image_id, d.category_id, d.score)).collect();
        assert_eq!(summary, vec![(0, 1, 0.9), (1, 1, 0.4)]);

        let stray = vec![det(0, 7, 0.5)];
        assert!(combine_detections_det(&stray, &new, &split, 10).is_err());
    }

    #[test]
    fn mean_scores_averages_and_validates() {
        let a = matrix(vec![vec![0.2, 0.2, 0.6]]);
        let b = matrix(vec![vec![0.4, 0.0, 0.6]]);
        let c = matrix(vec![vec![0.6, 0.1, 0.3]]);
        let out = mean_scores(&[&a, &b, &c]).unwrap();
        close(&out, &[vec![0.4, 0.1, 0.5]]);
        assert_eq!(average_heads(&[&a, &b]).unwrap(), ensemble_models(&[&a, &b]).unwrap());
        assert!(mean_scores(&[]).is_err());
        let short = matrix(vec![]);
        assert!(mean_scores(&[&a, &short]).is_err());
    }

    mod props {
        use super::*;
        use crate::calib::Strategy as Combine;
        // No prelude glob: it would re-import a second `Strategy` and make
        // trait method calls like `prop_map` ambiguous.
        use proptest::strategy::Strategy;
        use proptest::{prop_assert, prop_assert_eq, proptest};

        fn arb_matrix(rows: usize) -> impl Strategy<Value = ScoreMatrix> {
            proptest::collection::vec(
                proptest::collection::vec(0.0f64..1.0, 3),
                rows..=rows,
            )
            .prop_map(matrix)
        }

        proptest! {
            // Cat splicing copies columns bitwise from its sources.
            #[test]
            fn cat_columns_come_from_their_sources(
                orig in arb_matrix(4),
                new in arb_matrix(4),
            ) {
                let out = combine(
                    Combine::Cat,
                    &orig,
                    &new,
                    &split_tail0(),
                    &CombineParams::default(),
                ).unwrap();
                for r in 0..4 {
                    prop_assert_eq!(out.get(r, 0), new.get(r, 0));
                    prop_assert_eq!(out.get(r, 1), orig.get(r, 1));
                    prop_assert_eq!(out.get(r, 2), orig.get(r, 2));
                }
            }

            // Averaging a matrix with itself is the identity.
            #[test]
            fn avg_with_self_is_identity(m in arb_matrix(3)) {
                let out = combine(
                    Combine::Avg,
                    &m,
                    &m,
                    &split_tail0(),
                    &CombineParams::default(),
                ).unwrap();
                for r in 0..3 {
                    for c in 0..3 {
                        prop_assert!((out.get(r, c) - m.get(r, c)).abs() < 1e-15);
                    }
                }
            }
        }
    }
}
