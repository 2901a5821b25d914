use std::cmp::Ordering;

use crate::error::{Error, Result};

use super::boxes::OrientedBox;
use super::iou::rotated_iou;

/// Greedy rotated non-maximum suppression.
///
/// Boxes are visited by descending score (ties by lower index); a box is kept
/// unless it overlaps an already-kept box with IoU above `iou_threshold`.
/// Returns kept indices in visiting order.
pub fn rotated_nms(
    boxes: &[OrientedBox],
    scores: &[f64],
    iou_threshold: f64,
) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::LengthMismatch(boxes.len(), scores.len()));
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::Config(format!(
            "iou threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| rotated_iou(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    Ok(kept)
}
