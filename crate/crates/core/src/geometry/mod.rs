//! Rotated-box algebra: delta codec, affine maps, activation masks, IoU and NMS.

mod affine;
mod boxes;
mod iou;
mod mask;
mod nms;

pub use affine::{affine_five_step, affine_from_delta, AffineTransform2D};
pub use boxes::{
    decode_delta, encode_delta, normalize_angle, BoxDelta, HorizontalBox, OrientedBox, Point,
};
pub use iou::{
    clip_convex, convex_intersection_area, intersection_area, mc_iou_oracle, rotated_iou,
    signed_area, MIN_INTERSECTION,
};
pub use mask::{
    cell_center, mask_from_delta, rasterize_mask, soft_mask_with_jacobian, ActivationMask,
};
pub use nms::rotated_nms;
