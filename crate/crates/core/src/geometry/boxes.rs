//! Box types and the delta codec.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned proposal, centre/size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizontalBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl HorizontalBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_oriented(&self) -> OrientedBox {
        OrientedBox {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
            alpha: 0.0,
        }
    }
}

/// Rotated rectangle: centre, extents (pixels) and rotation in `[-π/2, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub alpha: f64,
}

impl OrientedBox {
    /// Builds a box, folding `alpha` into `[-π/2, π/2)`.
    pub fn new(x: f64, y: f64, w: f64, h: f64, alpha: f64) -> Result<Self> {
        let b = Self {
            x,
            y,
            w,
            h,
            alpha: normalize_angle(alpha),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h, self.alpha]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in counter-clockwise order (positive shoelace area in x/y).
    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.alpha.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(u, v)| Point::new(self.x + c * u - s * v, self.y + s * u + c * v))
    }

    pub fn contains(&self, p: Point) -> bool {
        let (s, c) = self.alpha.sin_cos();
        let (dx, dy) = (p.x - self.x, p.y - self.y);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Smallest axis-aligned rectangle containing the box.
    pub fn hull(&self) -> HorizontalBox {
        let (s, c) = self.alpha.sin_cos();
        HorizontalBox {
            x: self.x,
            y: self.y,
            w: self.w * c.abs() + self.h * s.abs(),
            h: self.w * s.abs() + self.h * c.abs(),
        }
    }
}

/// Regression offsets: centre shifts in proposal units, log-scale factors, angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
    pub dalpha: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
        dalpha: 0.0,
    };

    /// Component order used throughout: `[dx, dy, dw, dh, dalpha]`.
    pub fn to_array(self) -> [f64; 5] {
        [self.dx, self.dy, self.dw, self.dh, self.dalpha]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
            dalpha: v[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Folds an angle into `[-π/2, π/2)`; a rectangle is invariant under a half turn.
pub fn normalize_angle(alpha: f64) -> f64 {
    let a = alpha - PI * ((alpha + FRAC_PI_2) / PI).floor();
    // guard the open upper end against rounding
    if a >= FRAC_PI_2 {
        a - PI
    } else {
        a
    }
}

pub fn decode_delta(p: &HorizontalBox, d: &BoxDelta) -> Result<OrientedBox> {
    p.validate()?;
    if !d.is_finite() {
        return Err(Error::NonFinite(format!("{d:?}")));
    }
    OrientedBox::new(
        p.x + p.w * d.dx,
        p.y + p.h * d.dy,
        p.w * d.dw.exp(),
        p.h * d.dh.exp(),
        d.dalpha,
    )
}

pub fn encode_delta(p: &HorizontalBox, b: &OrientedBox) -> Result<BoxDelta> {
    p.validate()?;
    b.validate()?;
    Ok(BoxDelta {
        dx: (b.x - p.x) / p.w,
        dy: (b.y - p.y) / p.h,
        dw: (b.w / p.w).ln(),
        dh: (b.h / p.h).ln(),
        dalpha: b.alpha,
    })
}
