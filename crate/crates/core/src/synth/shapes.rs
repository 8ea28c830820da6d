use serde::{Deserialize, Serialize};

use crate::detector::BoundingBox;

/// Pixels this far past the antialiased edge are still counted as part of a
/// grain's box, so blur spill stays inside its label.
pub const BOX_PAD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub angle: f64,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disc {
        radius: f64,
    },
    /// Equilateral triangle with rounded corners.
    Triangle {
        circumradius: f64,
        rotation: f64,
    },
    Spiky {
        core: f64,
        spikes: Vec<Spike>,
    },
    Ring {
        radius: f64,
        thickness: f64,
    },
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

fn sd_equilateral(mut px: f64, mut py: f64, half_side: f64) -> f64 {
    px = px.abs() - half_side;
    py += half_side / SQRT3;
    if px + SQRT3 * py > 0.0 {
        let (nx, ny) = ((px - SQRT3 * py) / 2.0, (-SQRT3 * px - py) / 2.0);
        px = nx;
        py = ny;
    }
    px -= px.clamp(-2.0 * half_side, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

fn sd_tapered_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64), r0: f64, r1: f64) -> f64 {
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let (qx, qy) = (px - a.0, py - a.1);
    let t = ((qx * bx + qy * by) / (bx * bx + by * by)).clamp(0.0, 1.0);
    let (dx, dy) = (qx - t * bx, qy - t * by);
    (dx * dx + dy * dy).sqrt() - (r0 + (r1 - r0) * t)
}

pub(crate) const SPIKE_BASE_HALF_WIDTH: f64 = 3.0;
pub(crate) const SPIKE_TIP_HALF_WIDTH: f64 = 0.6;

impl Shape {
    /// Signed distance in pixels from the outline, negative inside, for a
    /// point relative to the shape center.
    pub fn sdf(&self, x: f64, y: f64) -> f64 {
        match self {
            Shape::Disc { radius } => (x * x + y * y).sqrt() - radius,
            Shape::Triangle {
                circumradius,
                rotation,
            } => {
                let rounding = 0.25 * circumradius;
                let inner = circumradius - rounding;
                let (s, c) = rotation.sin_cos();
                let (rx, ry) = (c * x + s * y, -s * x + c * y);
                sd_equilateral(rx, ry, inner * SQRT3 / 2.0) - rounding
            }
            Shape::Spiky { core, spikes } => {
                let mut d = (x * x + y * y).sqrt() - core;
                for s in spikes {
                    let (sn, cs) = s.angle.sin_cos();
                    let a = (cs * core * 0.8, sn * core * 0.8);
                    let b = (cs * (core + s.length), sn * (core + s.length));
                    d = d.min(sd_tapered_segment(
                        x,
                        y,
                        a,
                        b,
                        SPIKE_BASE_HALF_WIDTH,
                        SPIKE_TIP_HALF_WIDTH,
                    ));
                }
                d
            }
            Shape::Ring { radius, thickness } => {
                ((x * x + y * y).sqrt() - radius).abs() - 0.5 * thickness
            }
        }
    }

    /// Radius of a circle around the center that contains the shape.
    pub fn reach(&self) -> f64 {
        match self {
            Shape::Disc { radius } => *radius,
            Shape::Triangle { circumradius, .. } => *circumradius,
            Shape::Spiky { core, spikes } => {
                core + spikes.iter().map(|s| s.length).fold(0.0, f64::max) + SPIKE_TIP_HALF_WIDTH
            }
            Shape::Ring { radius, thickness } => radius + 0.5 * thickness,
        }
    }

    /// Interior distance covered by the darker rim.
    pub fn rim_width(&self) -> f64 {
        match self {
            Shape::Disc { radius } => (0.12 * radius).max(2.0),
            Shape::Triangle { circumradius, .. } => (0.1 * circumradius).max(2.0),
            Shape::Spiky { core, .. } => (0.1 * core).max(2.0),
            Shape::Ring { .. } => 0.0,
        }
    }
}

/// Antialiased coverage of a pixel whose center is `d` pixels from the edge.
pub fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

/// Pixel-aligned bounds of every pixel the shape covers, grown by
/// [`BOX_PAD`], for a shape centered at `(cx, cy)`.
pub fn covered_box(shape: &Shape, cx: f64, cy: f64) -> Option<BoundingBox> {
    let reach = shape.reach() + 2.0;
    let x_lo = (cx - reach).floor() as i64;
    let x_hi = (cx + reach).ceil() as i64;
    let y_lo = (cy - reach).floor() as i64;
    let y_hi = (cy + reach).ceil() as i64;
    let mut bounds: Option<(i64, i64, i64, i64)> = None;
    for py in y_lo..=y_hi {
        for px in x_lo..=x_hi {
            let d = shape.sdf(px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
            if coverage(d) > 0.0 {
                bounds = Some(match bounds {
                    None => (px, py, px, py),
                    Some((a, b, c, e)) => (a.min(px), b.min(py), c.max(px), e.max(py)),
                });
            }
        }
    }
    bounds.map(|(x0, y0, x1, y1)| {
        BoundingBox::from_corners(
            x0 as f64 - BOX_PAD,
            y0 as f64 - BOX_PAD,
            (x1 + 1) as f64 + BOX_PAD,
            (y1 + 1) as f64 + BOX_PAD,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_vertices_reach_circumradius() {
        let t = Shape::Triangle {
            circumradius: 40.0,
            rotation: 0.0,
        };
        assert!(t.sdf(0.0, 0.0) < -15.0);
        // rounded corners sit on the circumscribed circle
        let far = (0..360)
            .map(|k| {
                let a = (k as f64).to_radians();
                let mut r = 0.0;
                while t.sdf(r * a.cos(), r * a.sin()) < 0.0 {
                    r += 0.01;
                }
                r
            })
            .fold(0.0, f64::max);
        assert!((far - 40.0).abs() < 0.05, "{far}");
    }

    #[test]
    fn disc_box_is_diameter_plus_padding() {
        let b = covered_box(&Shape::Disc { radius: 40.0 }, 540.0, 300.0).unwrap();
        assert_eq!((b.w, b.h), (80.0 + 2.0 * BOX_PAD, 80.0 + 2.0 * BOX_PAD));
        assert_eq!((b.cx, b.cy), (540.0, 300.0));
    }
}
