//! Normalized rectangles shared by regions, detections and crops.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BBoxError {
    #[error("bounding box ({x_min}, {y_min}, {x_max}, {y_max}) is not a well-formed normalized rectangle")]
    Malformed {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
}

/// Axis-aligned rectangle in normalized image coordinates.
///
/// Well-formed boxes satisfy `0 <= x_min < x_max <= 1` and `0 <= y_min < y_max <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Pixel-space rectangle, half-open on the max side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BBoxError> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub const FULL: BBox = BBox { x_min: 0.0, y_min: 0.0, x_max: 1.0, y_max: 1.0 };

    pub fn is_well_formed(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x_min)
            && in_unit(self.y_min)
            && in_unit(self.x_max)
            && in_unit(self.y_max)
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn validate(&self) -> Result<(), BBoxError> {
        if self.is_well_formed() {
            Ok(())
        } else {
            Err(BBoxError::Malformed {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
            })
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Fraction of the image covered by the box, in `[0, 1]`.
    pub fn area_fraction(&self) -> f64 {
        self.width() * self.height()
    }

    /// Grows the box by `fraction` of the image side on every edge, clamped to the unit square.
    pub fn padded(&self, fraction: f64) -> BBox {
        BBox {
            x_min: (self.x_min - fraction).max(0.0),
            y_min: (self.y_min - fraction).max(0.0),
            x_max: (self.x_max + fraction).min(1.0),
            y_max: (self.y_max + fraction).min(1.0),
        }
    }

    /// Converts to pixel coordinates. Edges are floored/ceiled outward so the
    /// pixel rectangle covers the normalized box.
    pub fn to_pixels(&self, width: u32, height: u32) -> PixelRect {
        let w = width as f64;
        let h = height as f64;
        let x0 = ((self.x_min * w).floor() as u32).min(width);
        let y0 = ((self.y_min * h).floor() as u32).min(height);
        let x1 = ((self.x_max * w).ceil() as u32).clamp(x0, width);
        let y1 = ((self.y_max * h).ceil() as u32).clamp(y0, height);
        PixelRect { x: x0, y: y0, width: x1 - x0, height: y1 - y0 }
    }

    /// Normalized box covering a pixel rectangle.
    pub fn from_pixels(rect: PixelRect, width: u32, height: u32) -> Result<BBox, BBoxError> {
        BBox::new(
            rect.x as f64 / width as f64,
            rect.y as f64 / height as f64,
            (rect.x + rect.width) as f64 / width as f64,
            (rect.y + rect.height) as f64 / height as f64,
        )
    }
}

impl PixelRect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}
