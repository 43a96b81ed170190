//! Second-stage plumbing: proposal-to-GT matching, NMS, and decoding score
//! matrices into detections.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::{iou, Rect};
use crate::scores::ScoreMatrix;
use crate::world::{GtObject, Proposal};
use crate::{Error, Result};

/// IoU threshold used to assign training labels to proposals.
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Assignment of one proposal: the index of its best-IoU ground-truth object
/// if that IoU clears the threshold, otherwise background. `iou` is the best
/// IoU either way (0 when the image has no ground truth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchAssignment {
    pub gt_index: Option<usize>,
    pub iou: f64,
}

impl MatchAssignment {
    pub fn is_foreground(&self) -> bool {
        self.gt_index.is_some()
    }
}

/// Matches each proposal independently to its best ground-truth object.
/// Several proposals may match the same object; ties on IoU go to the lower
/// ground-truth index.
pub fn match_proposals(
    proposals: &[Proposal],
    gts: &[GtObject],
    iou_threshold: f64,
) -> Vec<MatchAssignment> {
    proposals
        .iter()
        .map(|p| {
            let mut best = 0.0;
            let mut best_idx = None;
            for (j, gt) in gts.iter().enumerate() {
                let v = iou(&p.bbox, &gt.bbox);
                if v > best {
                    best = v;
                    best_idx = Some(j);
                }
            }
            MatchAssignment {
                gt_index: if best >= iou_threshold && best > 0.0 {
                    best_idx
                } else {
                    None
                },
                iou: best,
            }
        })
        .collect()
}

/// Greedy non-maximum suppression. Boxes are visited by score descending
/// (ties: lower `x1`, then lower `y1`, then input order); a box is dropped
/// when it overlaps an already kept box with IoU >= `iou_threshold`.
/// Returns indices of kept boxes in visit order.
pub fn nms(boxes: &[Rect], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(boxes[a].x1.total_cmp(&boxes[b].x1))
            .then(boxes[a].y1.total_cmp(&boxes[b].y1))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) < iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Candidates must score strictly above this to enter NMS.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_per_image: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_per_image: 300,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.score_threshold.is_finite() || self.score_threshold < 0.0 {
            return Err(Error::config("score_threshold must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::config("nms_iou must lie in [0, 1]"));
        }
        if self.max_per_image == 0 {
            return Err(Error::config("max_per_image must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: Rect,
    pub score: f64,
}

/// Decodes a score matrix into detections. Rows of `scores` correspond 1:1
/// to `proposals`. Per image and foreground class: proposals scoring above
/// the threshold enter class-wise NMS; survivors from all classes are then
/// ranked by score (ties: lower category id, then row order) and capped at
/// `max_per_image`.
///
/// Lowering the score threshold can only add detections: new candidates
/// score no higher than the old ones, so they rank behind them and cannot
/// evict anything through the cap.
pub fn decode_detections(
    scores: &ScoreMatrix,
    proposals: &[Proposal],
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if scores.num_rows() != proposals.len() {
        return Err(Error::shape(format!(
            "score matrix has {} rows for {} proposals",
            scores.num_rows(),
            proposals.len()
        )));
    }

    let mut rows_by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (row, p) in proposals.iter().enumerate() {
        rows_by_image.entry(p.image_id).or_default().push(row);
    }

    let mut out = Vec::new();
    for (&image_id, rows) in &rows_by_image {
        // (score, category column, row) per surviving candidate.
        let mut survivors: Vec<(f64, usize, usize)> = Vec::new();
        let mut boxes: Vec<Rect> = Vec::with_capacity(rows.len());
        let mut class_scores: Vec<f64> = Vec::with_capacity(rows.len());
        let mut class_rows: Vec<usize> = Vec::with_capacity(rows.len());
        for col in 0..scores.num_foreground() {
            boxes.clear();
            class_scores.clear();
            class_rows.clear();
            for &row in rows {
                let s = scores.get(row, col);
                if s > cfg.score_threshold {
                    boxes.push(proposals[row].bbox);
                    class_scores.push(s);
                    class_rows.push(row);
                }
            }
            for k in nms(&boxes, &class_scores, cfg.nms_iou) {
                survivors.push((class_scores[k], col, class_rows[k]));
            }
        }
        survivors.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        survivors.truncate(cfg.max_per_image);
        for (score, col, row) in survivors {
            out.push(Detection {
                image_id,
                category_id: scores.class_order()[col],
                bbox: proposals[row].bbox,
                score,
            });
        }
    }
    Ok(out)
}

/// Writes detections as a JSON array of
/// `{image_id, category_id, bbox: [x1, y1, x2, y2], score}` records.
/// Scores round-trip exactly: values are printed with enough digits to
/// reconstruct the same f64.
pub fn export_detections(detections: &[Detection], path: &Path) -> Result<()> {
    let mut text = String::from("[\n");
    for (i, det) in detections.iter().enumerate() {
        text.push_str("  ");
        text.push_str(&serde_json::to_string(det)?);
        if i + 1 < detections.len() {
            text.push(',');
        }
        text.push('\n');
    }
    text.push(']');
    text.push('\n');
    crate::write_file(path, text)
}

/// Reads detections written by [`export_detections`] or produced by an
/// external detector. Malformed records are rejected with the line and
/// column of the offending value.
pub fn import_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = crate::read_to_string(path)?;
    let dets: Vec<Detection> = serde_json::from_str(&text).map_err(|e| Error::FileFormat {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    for (i, det) in dets.iter().enumerate() {
        if !det.score.is_finite() {
            return Err(Error::FileFormat {
                path: path.to_path_buf(),
                msg: format!("record {i}: non-finite score"),
            });
        }
    }
    Ok(dets)
}
