//! VOC-style rotated-box average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, rotated_nms, OrientedBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub bbox: OrientedBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    pub class: usize,
    pub bbox: OrientedBox,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApMethod {
    /// Area under the monotone precision envelope (VOC 2010+).
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, …, 1 (VOC 2007).
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    /// Per-image, per-class NMS threshold; `None` skips suppression.
    pub nms_threshold: Option<f64>,
    pub method: ApMethod,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            nms_threshold: Some(0.5),
            method: ApMethod::AllPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
    pub true_positives: usize,
    /// Precision and recall after each ranked detection.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    /// Mean AP over the foreground classes that have ground truth.
    pub map: f64,
    pub iou_threshold: f64,
    pub num_detections: usize,
    pub num_gt: usize,
}

/// Area under the precision envelope for the given PR points.
pub fn average_precision(recall: &[f64], precision: &[f64], method: ApMethod) -> f64 {
    debug_assert_eq!(recall.len(), precision.len());
    match method {
        ApMethod::AllPoint => {
            let mut mrec = Vec::with_capacity(recall.len() + 2);
            let mut mpre = Vec::with_capacity(recall.len() + 2);
            mrec.push(0.0);
            mpre.push(0.0);
            mrec.extend_from_slice(recall);
            mpre.extend_from_slice(precision);
            mrec.push(1.0);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    recall
                        .iter()
                        .zip(precision)
                        .filter(|(r, _)| **r >= t - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

fn suppress(dets: &[Detection], thr: f64) -> Result<Vec<Detection>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry((d.image, d.class)).or_default().push(i);
    }
    let mut keep = Vec::new();
    for idx in groups.values() {
        let boxes: Vec<OrientedBox> = idx.iter().map(|&i| dets[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        keep.extend(
            rotated_nms(&boxes, &scores, thr)?
                .into_iter()
                .map(|k| idx[k]),
        );
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| dets[i]).collect())
}

pub fn evaluate_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    num_classes: usize,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if !(opts.iou_threshold > 0.0 && opts.iou_threshold <= 1.0) {
        return Err(Error::Config(format!(
            "iou threshold {} outside (0, 1]",
            opts.iou_threshold
        )));
    }
    for d in detections {
        if d.class >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: d.class,
                classes: num_classes,
            });
        }
        if !d.score.is_finite() {
            return Err(Error::NonFinite(format!("detection score {}", d.score)));
        }
    }
    for g in ground_truth {
        if g.class >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: g.class,
                classes: num_classes,
            });
        }
    }
    let dets = match opts.nms_threshold {
        Some(t) => suppress(detections, t)?,
        None => detections.to_vec(),
    };

    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut gts: BTreeMap<usize, Vec<(OrientedBox, bool)>> = BTreeMap::new();
        let mut num_gt = 0;
        for g in ground_truth.iter().filter(|g| g.class == class) {
            gts.entry(g.image).or_default().push((g.bbox, false));
            num_gt += 1;
        }
        let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        // stable sort keeps input order among equal scores
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));

        let (mut tp, mut fp) = (0usize, 0usize);
        let mut precision = Vec::with_capacity(ranked.len());
        let mut recall = Vec::with_capacity(ranked.len());
        for d in &ranked {
            let mut hit = false;
            if let Some(list) = gts.get_mut(&d.image) {
                let mut best = (-1.0, usize::MAX);
                for (j, (g, _)) in list.iter().enumerate() {
                    let iou = rotated_iou(&d.bbox, g);
                    if iou > best.0 {
                        best = (iou, j);
                    }
                }
                if best.0 >= opts.iou_threshold && !list[best.1].1 {
                    list[best.1].1 = true;
                    hit = true;
                }
            }
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(if num_gt > 0 {
                tp as f64 / num_gt as f64
            } else {
                0.0
            });
        }
        let ap = if num_gt > 0 && !ranked.is_empty() {
            average_precision(&recall, &precision, opts.method)
        } else {
            0.0
        };
        per_class.push(ClassReport {
            ap,
            num_gt,
            num_detections: ranked.len(),
            true_positives: tp,
            precision,
            recall,
        });
    }
    let with_gt: Vec<f64> = per_class
        .iter()
        .filter(|c| c.num_gt > 0)
        .map(|c| c.ap)
        .collect();
    let map = if with_gt.is_empty() {
        0.0
    } else {
        with_gt.iter().sum::<f64>() / with_gt.len() as f64
    };
    Ok(EvalReport {
        per_class,
        map,
        iou_threshold: opts.iou_threshold,
        num_detections: dets.len(),
        num_gt: ground_truth.len(),
    })
}
