//! Activation masks: the unit square pushed through a delta's affine map,
//! sampled at token-cell centres.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::affine::{affine_from_delta, AffineTransform2D};
use super::boxes::{BoxDelta, HorizontalBox, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMask {
    pub height: usize,
    pub width: usize,
    /// Row-major, one value per cell.
    pub values: Vec<f64>,
}

impl ActivationMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn active_fraction(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }

    /// Plain-text PGM (P2, maxval 255).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }
}

/// Centre of cell `(row, col)` in normalised coordinates.
pub fn cell_center(row: usize, col: usize, height: usize, width: usize) -> Point {
    Point::new(
        (2 * col + 1) as f64 / width as f64 - 1.0,
        (2 * row + 1) as f64 / height as f64 - 1.0,
    )
}

/// Binary mask: a cell is 1 iff its centre lies in `tf([-1,1]²)`.
pub fn rasterize_mask(
    tf: &AffineTransform2D,
    height: usize,
    width: usize,
) -> Result<ActivationMask> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("mask grid {height}x{width}")));
    }
    let inv = tf.inverse()?;
    let mut values = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let u = inv.apply(cell_center(row, col, height, width));
            values.push(if u.x.abs() <= 1.0 && u.y.abs() <= 1.0 {
                1.0
            } else {
                0.0
            });
        }
    }
    Ok(ActivationMask {
        height,
        width,
        values,
    })
}

pub fn mask_from_delta(
    d: &BoxDelta,
    p: &HorizontalBox,
    height: usize,
    width: usize,
) -> Result<ActivationMask> {
    if !d.is_finite() {
        return Err(Error::NonFinite(format!("{d:?}")));
    }
    rasterize_mask(&affine_from_delta(d, p), height, width)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Sigmoid-edged relaxation of [`mask_from_delta`] and its Jacobian.
///
/// Each cell gets `σ(k(1-|u|))·σ(k(1-|v|))` where `(u, v)` is the cell centre
/// pulled back into the unit square. Returns the soft values and the
/// row-major `cells × 5` Jacobian with respect to `[dx, dy, dw, dh, dalpha]`.
/// Thresholding the pulled-back point at 1 recovers the binary mask exactly.
pub fn soft_mask_with_jacobian(
    d: &BoxDelta,
    p: &HorizontalBox,
    height: usize,
    width: usize,
    sharpness: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = height * width;
    let mut values = Vec::with_capacity(n);
    let mut jac = Vec::with_capacity(n * 5);
    let (s, c) = d.dalpha.sin_cos();
    let a = 2.0 / p.w * (-d.dw).exp();
    let b = 2.0 / p.h * (-d.dh).exp();
    for row in 0..height {
        for col in 0..width {
            let q = cell_center(row, col, height, width);
            // pixel-scaled offset from the box centre, then undo the rotation
            let vx = p.w / 2.0 * (q.x - 2.0 * d.dx);
            let vy = p.h / 2.0 * (q.y - 2.0 * d.dy);
            let rx = c * vx + s * vy;
            let ry = -s * vx + c * vy;
            let (u, v) = (a * rx, b * ry);

            let su = sigmoid(sharpness * (1.0 - u.abs()));
            let sv = sigmoid(sharpness * (1.0 - v.abs()));
            values.push(su * sv);
            let dsu = -sharpness * u.signum() * su * (1.0 - su) * sv;
            let dsv = -sharpness * v.signum() * sv * (1.0 - sv) * su;

            let du = [-c * p.w * a, -s * p.h * a, -u, 0.0, a * ry];
            let dv = [s * p.w * b, -c * p.h * b, 0.0, -v, -b * rx];
            for k in 0..5 {
                jac.push(dsu * du[k] + dsv * dv[k]);
            }
        }
    }
    (values, jac)
}
