//! Instance matching and COCO-style average precision, semantic boundary
//! IoU, and a wall-clock latency harness.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{DetectionSet, FieldInstance};
use crate::error::{Error, Result};
use crate::mask::{boundary_band, mask_iou, mask_union, InstanceMask};

/// Number of recall sample points (0.00, 0.01, ..., 1.00).
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub boundary_thickness_px: u32,
    pub max_detections_per_image: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: coco_thresholds(),
            boundary_thickness_px: 2,
            max_detections_per_image: 300,
        }
    }
}

/// 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::InvalidConfig("no IoU thresholds".into()));
        }
        for w in self.iou_thresholds.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidConfig(
                    "IoU thresholds must be strictly increasing".into(),
                ));
            }
        }
        if let Some(t) = self.iou_thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::InvalidConfig(format!("IoU threshold {t} outside (0, 1]")));
        }
        if self.boundary_thickness_px < 1 {
            return Err(Error::InvalidConfig("boundary_thickness_px must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Indices refer to positions in the input detection sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Prediction order: score desc, area desc, id asc.
fn pred_order(preds: &[FieldInstance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pb.rank_score()
            .total_cmp(&pa.rank_score())
            .then(pb.mask.area().cmp(&pa.mask.area()))
            .then(pa.id.cmp(&pb.id))
    });
    order
}

fn check_dims(gt: &DetectionSet, pred: &DetectionSet) -> Result<()> {
    if (gt.width, gt.height) != (pred.width, pred.height) {
        return Err(Error::Shape(format!(
            "ground truth is {}x{}, prediction is {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    for inst in gt.instances.iter().chain(&pred.instances) {
        if inst.mask.dims() != (gt.width, gt.height) {
            return Err(Error::Shape(format!(
                "instance {} is {}x{}, image is {}x{}",
                inst.id,
                inst.mask.width(),
                inst.mask.height(),
                gt.width,
                gt.height
            )));
        }
    }
    Ok(())
}

/// `ious[p][g]` over predictions and ground truths.
fn iou_matrix(gt: &[FieldInstance], pred: &[FieldInstance]) -> Result<Vec<Vec<f64>>> {
    let gt_boxes: Vec<_> = gt.iter().map(|g| g.mask.bbox()).collect();
    pred.iter()
        .map(|p| {
            let pb = p.mask.bbox();
            gt.iter()
                .zip(&gt_boxes)
                .map(|(g, gb)| match (pb, gb) {
                    (Some(a), Some(b)) if a.intersection(b).is_some() => mask_iou(&p.mask, &g.mask),
                    _ => Ok(0.0),
                })
                .collect()
        })
        .collect()
}

/// Greedy matching of predictions (taken in `order`) against a precomputed IoU matrix.
fn greedy_match(order: &[usize], ious: &[Vec<f64>], n_gt: usize, thr: f64) -> MatchResult {
    let mut gt_taken = vec![false; n_gt];
    let mut result = MatchResult::default();
    for &p in order {
        let mut best: Option<(usize, f64)> = None;
        for g in 0..n_gt {
            if gt_taken[g] {
                continue;
            }
            let iou = ious[p][g];
            // strict > keeps the lowest gt index on ties
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) => {
                gt_taken[g] = true;
                result.matches.push(Match { pred: p, gt: g, iou });
            }
            None => result.unmatched_preds.push(p),
        }
    }
    result.unmatched_gts = (0..n_gt).filter(|&g| !gt_taken[g]).collect();
    result
}

/// One-to-one greedy matching at IoU threshold `thr`.
///
/// Ground-truth ties resolve to the lower ground-truth id.
pub fn match_instances(gt: &DetectionSet, pred: &DetectionSet, thr: f64) -> Result<MatchResult> {
    check_dims(gt, pred)?;
    // position order = id order for ties
    let mut gt_pos: Vec<usize> = (0..gt.instances.len()).collect();
    gt_pos.sort_by_key(|&g| gt.instances[g].id);
    let sorted_gt: Vec<FieldInstance> = gt_pos.iter().map(|&g| gt.instances[g].clone()).collect();
    let ious = iou_matrix(&sorted_gt, &pred.instances)?;
    let mut r = greedy_match(&pred_order(&pred.instances), &ious, sorted_gt.len(), thr);
    for m in &mut r.matches {
        m.gt = gt_pos[m.gt];
    }
    for g in &mut r.unmatched_gts {
        *g = gt_pos[*g];
    }
    r.unmatched_gts.sort_unstable();
    Ok(r)
}

/// A scored prediction labelled at one threshold; `image`/`rank` break score ties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedOutcome {
    pub score: f64,
    pub image: usize,
    pub rank: usize,
    pub is_tp: bool,
}

/// 101-point interpolated average precision over pooled outcomes.
pub fn average_precision(outcomes: &[RankedOutcome], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut sorted = outcomes.to_vec();
    sorted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.rank.cmp(&b.rank))
    });
    let mut tp_cum = Vec::with_capacity(sorted.len());
    let mut precision = Vec::with_capacity(sorted.len());
    let mut tp = 0u64;
    for (k, o) in sorted.iter().enumerate() {
        if o.is_tp {
            tp += 1;
        }
        tp_cum.push(tp);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope: max precision at any later point
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let n = num_gt as u64;
    let mut total = 0.0;
    for i in 0..RECALL_POINTS as u64 {
        // first point whose recall tp/n reaches i/100, compared exactly
        let k = tp_cum.partition_point(|&t| t * 100 < i * n);
        if k < precision.len() {
            total += precision[k];
        }
    }
    Ok(total / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApAtThreshold {
    pub thr: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    #[serde(rename = "ap")]
    pub ap_per_threshold: Vec<ApAtThreshold>,
    pub map50: f64,
    pub map50_95: f64,
    pub counts: MatchCounts,
    pub mean_matched_iou: f64,
    pub boundary_iou: Option<f64>,
    pub latency_ms: Option<LatencyStats>,
}

struct ImageEval {
    order: Vec<usize>,
    scores: Vec<f64>,
    ious: Vec<Vec<f64>>,
    n_gt: usize,
}

fn prepare_image(gt: &DetectionSet, pred: &DetectionSet, max_dets: usize) -> Result<ImageEval> {
    check_dims(gt, pred)?;
    let mut order = pred_order(&pred.instances);
    if order.len() > max_dets {
        log::warn!(
            "{} detections exceed max_detections_per_image = {max_dets}; lowest-ranked dropped",
            order.len()
        );
        order.truncate(max_dets);
    }
    let kept: Vec<FieldInstance> = order.iter().map(|&i| pred.instances[i].clone()).collect();
    let mut gt_sorted: Vec<FieldInstance> = gt.instances.clone();
    gt_sorted.sort_by_key(|g| g.id);
    let ious = iou_matrix(&gt_sorted, &kept)?;
    Ok(ImageEval {
        order: (0..kept.len()).collect(),
        scores: kept.iter().map(|p| p.rank_score()).collect(),
        ious,
        n_gt: gt_sorted.len(),
    })
}

fn collect_per_image<T: Send>(
    gt_sets: &[DetectionSet],
    pred_sets: &[DetectionSet],
    f: impl Fn(&DetectionSet, &DetectionSet) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if gt_sets.len() != pred_sets.len() {
        return Err(Error::Shape(format!(
            "{} ground-truth images vs {} prediction images",
            gt_sets.len(),
            pred_sets.len()
        )));
    }
    let results: Vec<Result<T>> = gt_sets
        .par_iter()
        .zip(pred_sets.par_iter())
        .map(|(g, p)| f(g, p))
        .collect();
    let mut ok = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => errors.push((i, e)),
        }
    }
    if errors.is_empty() {
        Ok(ok)
    } else {
        Err(Error::PerImage(errors))
    }
}

/// Scores predictions against ground truth over a list of images.
pub fn evaluate(
    gt_sets: &[DetectionSet],
    pred_sets: &[DetectionSet],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let images = collect_per_image(gt_sets, pred_sets, |g, p| {
        prepare_image(g, p, cfg.max_detections_per_image)
    })?;
    let num_gt: usize = images.iter().map(|im| im.n_gt).sum();

    let run = |thr: f64| -> (Vec<RankedOutcome>, MatchCounts, Vec<f64>) {
        let mut outcomes = Vec::new();
        let mut counts = MatchCounts::default();
        let mut ious = Vec::new();
        for (image, im) in images.iter().enumerate() {
            let r = greedy_match(&im.order, &im.ious, im.n_gt, thr);
            for m in &r.matches {
                outcomes.push(RankedOutcome {
                    score: im.scores[m.pred],
                    image,
                    rank: m.pred,
                    is_tp: true,
                });
                ious.push(m.iou);
            }
            for &p in &r.unmatched_preds {
                outcomes.push(RankedOutcome {
                    score: im.scores[p],
                    image,
                    rank: p,
                    is_tp: false,
                });
            }
            counts.tp += r.matches.len();
            counts.fp += r.unmatched_preds.len();
            counts.fn_ += r.unmatched_gts.len();
        }
        (outcomes, counts, ious)
    };

    let mut ap_per_threshold = Vec::with_capacity(cfg.iou_thresholds.len());
    for &thr in &cfg.iou_thresholds {
        let (outcomes, _, _) = run(thr);
        ap_per_threshold.push(ApAtThreshold {
            thr,
            ap: average_precision(&outcomes, num_gt)?,
        });
    }
    let (outcomes50, counts, ious50) = run(0.5);
    let map50 = match ap_per_threshold.iter().find(|a| a.thr == 0.5) {
        Some(a) => a.ap,
        None => average_precision(&outcomes50, num_gt)?,
    };
    let map50_95 =
        ap_per_threshold.iter().map(|a| a.ap).sum::<f64>() / ap_per_threshold.len() as f64;
    let mean_matched_iou = if ious50.is_empty() {
        0.0
    } else {
        ious50.iter().sum::<f64>() / ious50.len() as f64
    };
    let boundary = boundary_semantic_iou(gt_sets, pred_sets, cfg.boundary_thickness_px)?;
    Ok(EvalReport {
        config: cfg.clone(),
        ap_per_threshold,
        map50,
        map50_95,
        counts,
        mean_matched_iou,
        boundary_iou: Some(boundary.mean),
        latency_ms: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryIouReport {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

fn union_of_bands(set: &DetectionSet, thickness: u32) -> Result<InstanceMask> {
    let bands = set
        .instances
        .iter()
        .map(|i| boundary_band(&i.mask, thickness))
        .collect::<Result<Vec<_>>>()?;
    if bands.is_empty() {
        return Ok(InstanceMask::empty(set.width, set.height));
    }
    mask_union(&bands)
}

/// Semantic boundary IoU: per image, IoU of the union of ground-truth bands
/// with the union of predicted bands.
pub fn boundary_semantic_iou(
    gt_sets: &[DetectionSet],
    pred_sets: &[DetectionSet],
    thickness: u32,
) -> Result<BoundaryIouReport> {
    if thickness < 1 {
        return Err(Error::InvalidConfig("boundary thickness must be >= 1".into()));
    }
    let per_image = collect_per_image(gt_sets, pred_sets, |g, p| {
        check_dims(g, p)?;
        mask_iou(&union_of_bands(g, thickness)?, &union_of_bands(p, thickness)?)
    })?;
    let mean = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    };
    Ok(BoundaryIouReport { per_image, mean })
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn latency_stats(samples_ms: &[f64]) -> Result<LatencyStats> {
    if samples_ms.is_empty() {
        return Err(Error::EmptyBenchmark);
    }
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p50: percentile(&sorted, 0.5),
        p95: percentile(&sorted, 0.95),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        samples: sorted.len(),
    })
}

/// Times `run` on each image in turn; the first `warmup` runs are discarded.
pub fn bench<F>(images: &[PathBuf], warmup: usize, mut run: F) -> Result<LatencyStats>
where
    F: FnMut(&Path) -> Result<()>,
{
    if images.len() <= warmup {
        return Err(Error::EmptyBenchmark);
    }
    let mut samples = Vec::with_capacity(images.len() - warmup);
    for (i, path) in images.iter().enumerate() {
        let start = Instant::now();
        run(path).map_err(|e| Error::Pipeline {
            path: path.clone(),
            source: Box::new(e),
        })?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if i >= warmup {
            samples.push(ms);
        }
    }
    latency_stats(&samples)
}
