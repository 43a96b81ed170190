//! COCO-style evaluation: per-category 101-point interpolated AP averaged
//! over a sweep of IoU thresholds, aggregated into category count bins, plus
//! average recall of raw proposals and a GT-label oracle evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::iou;
use crate::twostage::{match_proposals, Detection, DEFAULT_MATCH_IOU};
use crate::world::{BinId, Category, GtObject, Proposal, SceneImage, World};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU thresholds the AP is averaged over.
    pub iou_thresholds: Vec<f64>,
    /// Recall grid resolution: AP is the mean interpolated precision at
    /// `recall_points` evenly spaced recalls from 0 to 1.
    pub recall_points: usize,
    /// Detections kept per image (by score) before matching.
    pub max_detections: usize,
    /// Default top-k for average recall of raw proposals.
    pub proposal_k: usize,
}

/// The standard sweep 0.50, 0.55, ..., 0.95.
pub fn default_iou_thresholds() -> Vec<f64> {
    (50..=95).step_by(5).map(|t| t as f64 / 100.0).collect()
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: default_iou_thresholds(),
            recall_points: 101,
            max_detections: 300,
            proposal_k: 1000,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::config("iou_thresholds must not be empty"));
        }
        if self.iou_thresholds.iter().any(|t| !(0.0 < *t && *t <= 1.0)) {
            return Err(Error::config("iou_thresholds must lie in (0, 1]"));
        }
        if self.recall_points < 2 {
            return Err(Error::config("recall_points must be at least 2"));
        }
        if self.max_detections == 0 {
            return Err(Error::config("max_detections must be at least 1"));
        }
        if self.proposal_k == 0 {
            return Err(Error::config("proposal_k must be at least 1"));
        }
        Ok(())
    }
}

/// Ground truth grouped by image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtSet {
    pub by_image: BTreeMap<u64, Vec<GtObject>>,
}

impl GtSet {
    pub fn from_images(images: &[SceneImage]) -> GtSet {
        GtSet {
            by_image: images
                .iter()
                .map(|img| (img.id, img.objects.clone()))
                .collect(),
        }
    }

    /// Object count per category, categories with no objects absent.
    pub fn category_counts(&self) -> BTreeMap<u32, u64> {
        let mut counts = BTreeMap::new();
        for objects in self.by_image.values() {
            for obj in objects {
                *counts.entry(obj.category_id).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn total(&self) -> u64 {
        self.by_image.values().map(|v| v.len() as u64).sum()
    }
}

/// Per-category AP over the threshold sweep. Categories with at least one
/// ground-truth object get an entry (0.0 if nothing was detected);
/// detections for categories with no ground truth are ignored entirely.
pub fn ap_per_category(
    detections: &[Detection],
    gt: &GtSet,
    cfg: &EvalConfig,
) -> Result<BTreeMap<u32, f64>> {
    cfg.validate()?;
    for (i, det) in detections.iter().enumerate() {
        if !det.score.is_finite() {
            return Err(Error::NonFinite(format!("score of detection {i}")));
        }
    }

    // Per-image cap by score (ties: input order), before anything else.
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, det) in detections.iter().enumerate() {
        by_image.entry(det.image_id).or_default().push(i);
    }
    let mut by_category: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for indices in by_image.values_mut() {
        indices.sort_by(|&a, &b| {
            detections[b]
                .score
                .total_cmp(&detections[a].score)
                .then(a.cmp(&b))
        });
        indices.truncate(cfg.max_detections);
        for &i in indices.iter() {
            by_category
                .entry(detections[i].category_id)
                .or_default()
                .push(i);
        }
    }

    let empty: Vec<usize> = Vec::new();
    let mut result = BTreeMap::new();
    for (&category, &total_gt) in &gt.category_counts() {
        let det_indices = by_category.get(&category).unwrap_or(&empty);
        result.insert(
            category,
            category_ap(category, det_indices, detections, gt, total_gt, cfg),
        );
    }
    Ok(result)
}

fn category_ap(
    category: u32,
    det_indices: &[usize],
    detections: &[Detection],
    gt: &GtSet,
    total_gt: u64,
    cfg: &EvalConfig,
) -> f64 {
    let mut order = det_indices.to_vec();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });

    // IoUs of each detection against its image's ground truth of this
    // category, computed once and reused across thresholds.
    let gt_boxes: BTreeMap<u64, Vec<&GtObject>> = gt
        .by_image
        .iter()
        .map(|(&id, objs)| {
            (
                id,
                objs.iter().filter(|o| o.category_id == category).collect(),
            )
        })
        .collect();
    let ious: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            gt_boxes
                .get(&detections[i].image_id)
                .map(|objs| {
                    objs.iter()
                        .map(|o| iou(&detections[i].bbox, &o.bbox))
                        .collect()
                })
                .unwrap_or_default()
        })
        .collect();

    let mut ap_sum = 0.0;
    let mut matched: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
    let mut tp_flags = Vec::with_capacity(order.len());
    for &threshold in &cfg.iou_thresholds {
        matched.clear();
        tp_flags.clear();
        for (k, &i) in order.iter().enumerate() {
            let image = detections[i].image_id;
            let flags = matched
                .entry(image)
                .or_insert_with(|| vec![false; ious[k].len()]);
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in ious[k].iter().enumerate() {
                if !flags[j] && v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    flags[j] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }
        ap_sum += interpolated_ap(&tp_flags, total_gt, cfg.recall_points);
    }
    ap_sum / cfg.iou_thresholds.len() as f64
}

/// Mean interpolated precision over the evenly spaced recall grid, with the
/// precision envelope taken from the right.
fn interpolated_ap(tp_flags: &[bool], total_gt: u64, recall_points: usize) -> f64 {
    if total_gt == 0 || tp_flags.is_empty() {
        return 0.0;
    }
    let n = tp_flags.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0u64;
    for (k, &flag) in tp_flags.iter().enumerate() {
        if flag {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for k in (0..n - 1).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for j in 0..recall_points {
        let r = j as f64 / (recall_points - 1) as f64;
        while k < n && recall[k] < r {
            k += 1;
        }
        if k < n {
            sum += precision[k];
        }
    }
    sum / recall_points as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category_id: u32,
    pub bin: BinId,
    pub train_count: u64,
    pub gt_count: u64,
    /// Absent for categories with no ground truth in the evaluated split.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: BinId,
    pub label: String,
    pub class_count: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean AP over categories with ground truth; absent if there are none.
    pub overall_ap: Option<f64>,
    /// Bins holding at least one evaluated category. Empty bins are absent,
    /// not zero.
    pub bins: Vec<BinRow>,
    pub categories: Vec<CategoryRow>,
    /// Average recall of raw proposals, when the run computed it.
    #[serde(default)]
    pub ar_at_k: Option<f64>,
}

impl EvalReport {
    pub fn bin_ap(&self, bin: BinId) -> Option<f64> {
        self.bins.iter().find(|b| b.bin == bin).map(|b| b.ap)
    }

    pub fn category_ap(&self, category_id: u32) -> Option<f64> {
        self.categories
            .iter()
            .find(|c| c.category_id == category_id)
            .and_then(|c| c.ap)
    }
}

/// Aggregates per-category APs into the count-bin report. Bin membership
/// comes from the category table (training counts); `gt_counts` is the
/// evaluated split's object census.
pub fn binned_report(
    per_category_ap: &BTreeMap<u32, f64>,
    categories: &[Category],
    gt_counts: &BTreeMap<u32, u64>,
) -> EvalReport {
    let mut rows: Vec<CategoryRow> = categories
        .iter()
        .map(|cat| CategoryRow {
            category_id: cat.id,
            bin: cat.bin,
            train_count: cat.train_count,
            gt_count: gt_counts.get(&cat.id).copied().unwrap_or(0),
            ap: per_category_ap.get(&cat.id).copied(),
        })
        .collect();
    rows.sort_by_key(|r| r.category_id);

    let mut bins = Vec::new();
    for bin in BinId::ALL {
        let aps: Vec<f64> = rows
            .iter()
            .filter(|r| r.bin == bin)
            .filter_map(|r| r.ap)
            .collect();
        if !aps.is_empty() {
            bins.push(BinRow {
                bin,
                label: bin.label().to_string(),
                class_count: aps.len(),
                ap: aps.iter().sum::<f64>() / aps.len() as f64,
            });
        }
    }
    let evaluated: Vec<f64> = rows.iter().filter_map(|r| r.ap).collect();
    EvalReport {
        overall_ap: if evaluated.is_empty() {
            None
        } else {
            Some(evaluated.iter().sum::<f64>() / evaluated.len() as f64)
        },
        bins,
        categories: rows,
        ar_at_k: None,
    }
}

/// Full evaluation: per-category AP then the binned report.
pub fn evaluate_detections(
    detections: &[Detection],
    gt: &GtSet,
    categories: &[Category],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let per_category = ap_per_category(detections, gt, cfg)?;
    Ok(binned_report(&per_category, categories, &gt.category_counts()))
}

/// Average recall of the top-`k` proposals per image (by objectness), over
/// the same IoU threshold sweep as AP. Matching is greedy by IoU with each
/// proposal and each object used at most once.
pub fn proposal_recall(proposals: &[Proposal], gt: &GtSet, k: usize, cfg: &EvalConfig) -> Result<f64> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let total_gt = gt.total();
    if total_gt == 0 {
        return Err(Error::config("ground truth is empty"));
    }

    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, p) in proposals.iter().enumerate() {
        by_image.entry(p.image_id).or_default().push(i);
    }

    let mut matched_total = 0u64;
    for (image_id, objects) in &gt.by_image {
        let Some(indices) = by_image.get(image_id) else {
            continue;
        };
        let mut top = indices.clone();
        top.sort_by(|&a, &b| {
            proposals[b]
                .objectness
                .total_cmp(&proposals[a].objectness)
                .then(a.cmp(&b))
        });
        top.truncate(k);

        // (iou, proposal rank, gt index), best overlaps first.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (rank, &i) in top.iter().enumerate() {
            for (j, obj) in objects.iter().enumerate() {
                let v = iou(&proposals[i].bbox, &obj.bbox);
                if v > 0.0 {
                    pairs.push((v, rank, j));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut prop_used = vec![false; top.len()];
        let mut gt_used = vec![false; objects.len()];
        for &threshold in &cfg.iou_thresholds {
            prop_used.iter_mut().for_each(|u| *u = false);
            gt_used.iter_mut().for_each(|u| *u = false);
            for &(v, rank, j) in &pairs {
                if v < threshold {
                    break;
                }
                if !prop_used[rank] && !gt_used[j] {
                    prop_used[rank] = true;
                    gt_used[j] = true;
                    matched_total += 1;
                }
            }
        }
    }
    Ok(matched_total as f64 / (cfg.iou_thresholds.len() as f64 * total_gt as f64))
}

/// Upper-bound evaluation with ground-truth labels: every proposal matched
/// to an object (IoU >= 0.5) becomes a detection carrying the object's true
/// category and its match IoU as score; unmatched proposals are dropped.
pub fn oracle_gt_label_eval(
    world: &World,
    images: &[SceneImage],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut detections = Vec::new();
    for image in images {
        let proposals = world.frozen_proposals(image);
        let matches = match_proposals(&proposals, &image.objects, DEFAULT_MATCH_IOU);
        for (p, m) in proposals.iter().zip(&matches) {
            if let Some(j) = m.gt_index {
                detections.push(Detection {
                    image_id: image.id,
                    category_id: image.objects[j].category_id,
                    bbox: p.bbox,
                    score: m.iou,
                });
            }
        }
    }
    let gt = GtSet::from_images(images);
    evaluate_detections(&detections, &gt, &world.categories, cfg)
}

/// One CSV row per category: id, bin token, training count, evaluated-split
/// object count, and AP (blank when the category has no ground truth).
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text = String::from("category_id,bin,train_count,gt_count,ap\n");
    for row in &report.categories {
        let ap = row.ap.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.category_id,
            row.bin.token(),
            row.train_count,
            row.gt_count,
            ap
        ));
    }
    crate::write_file(path, text)
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    crate::write_file(path, text)
}
