//! Affine maps in normalised proposal coordinates.
//!
//! The proposal occupies `[-1, 1]²`; a delta maps that square onto the
//! predicted box expressed in the same frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::boxes::{BoxDelta, HorizontalBox, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D {
    /// Row-major 2×2 linear part.
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

type Mat2 = [[f64; 2]; 2];

fn mat_mul(a: Mat2, b: Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

impl AffineTransform2D {
    pub const IDENTITY: AffineTransform2D = AffineTransform2D {
        m: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply(&self, p: Point) -> Point {
        Point::new(
            self.m[0][0] * p.x + self.m[0][1] * p.y + self.t[0],
            self.m[1][0] * p.x + self.m[1][1] * p.y + self.t[1],
        )
    }

    pub fn inverse(&self) -> Result<AffineTransform2D> {
        let det = self.det();
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(Error::SingularTransform(det));
        }
        let m = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        let t = [
            -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
            -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
        ];
        Ok(AffineTransform2D { m, t })
    }

    /// Images of the square's corners `(-1,-1), (1,-1), (1,1), (-1,1)`.
    pub fn square_image(&self) -> [Point; 4] {
        [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
            .map(|(x, y)| self.apply(Point::new(x, y)))
    }

    pub fn max_abs_diff(&self, other: &AffineTransform2D) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                d = d.max((self.m[i][j] - other.m[i][j]).abs());
            }
            d = d.max((self.t[i] - other.t[i]).abs());
        }
        d
    }
}

/// Closed-form transform of a delta relative to its proposal.
pub fn affine_from_delta(d: &BoxDelta, p: &HorizontalBox) -> AffineTransform2D {
    let (s, c) = d.dalpha.sin_cos();
    let (ew, eh) = (d.dw.exp(), d.dh.exp());
    AffineTransform2D {
        m: [[c * ew, -s * eh * p.h / p.w], [s * ew * p.w / p.h, c * eh]],
        t: [2.0 * d.dx, 2.0 * d.dy],
    }
}

/// The same transform built as square→proposal, scale, rotate,
/// proposal→square, then translate.
pub fn affine_five_step(d: &BoxDelta, p: &HorizontalBox) -> AffineTransform2D {
    let square_to_proposal = [[p.w / 2.0, 0.0], [0.0, p.h / 2.0]];
    let scale = [[d.dw.exp(), 0.0], [0.0, d.dh.exp()]];
    let (s, c) = d.dalpha.sin_cos();
    let rotate = [[c, -s], [s, c]];
    let proposal_to_square = [[2.0 / p.w, 0.0], [0.0, 2.0 / p.h]];
    let m = mat_mul(
        proposal_to_square,
        mat_mul(rotate, mat_mul(scale, square_to_proposal)),
    );
    AffineTransform2D {
        m,
        t: [2.0 * d.dx, 2.0 * d.dy],
    }
}
