//! Non-learned machinery of the human-centric branch: gaze cones, head
//! masks, ground-truth heatmaps and 2-D gaze vectors.
//!
//! All coordinates are normalized to `[0, 1]²` with `x` to the right and `y`
//! down. Pixel `(i, j)` (row, column) has its center at
//! `((j + 0.5) / w, (i + 0.5) / h)`.

use gazecast_tensor::{CustomOp, Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};

pub type Point = [f64; 2];

/// Center of pixel `(row, col)` in normalized coordinates.
#[inline]
pub fn pixel_center(row: usize, col: usize, h: usize, w: usize) -> Point {
    [(col as f64 + 0.5) / w as f64, (row as f64 + 0.5) / h as f64]
}

/// Pixel `(row, col)` containing a normalized point, clamped to the grid.
#[inline]
pub fn containing_pixel(p: Point, h: usize, w: usize) -> (usize, usize) {
    let col = ((p[0] * w as f64).floor().max(0.0) as usize).min(w - 1);
    let row = ((p[1] * h as f64).floor().max(0.0) as usize).min(h - 1);
    (row, col)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl HeadBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| (0.0..=1.0).contains(v));
        if !in_unit || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(GazeError::Domain(format!("invalid head box {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn center(&self) -> Point {
        [(self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EyeSource {
    Annotated,
    PoseMidpoint,
    Prototypal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyePoint {
    pub x: f64,
    pub y: f64,
    pub source: EyeSource,
}

impl EyePoint {
    pub fn point(&self) -> Point {
        [self.x, self.y]
    }
}

/// Eye location used when no pose keypoints are available: horizontally
/// centered, one third of the way down the head box.
pub fn prototypal_eye(b: &HeadBox) -> EyePoint {
    EyePoint {
        x: (b.x_min + b.x_max) / 2.0,
        y: b.y_min + (b.y_max - b.y_min) / 3.0,
        source: EyeSource::Prototypal,
    }
}

/// Unit-norm 2-D gaze direction in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeVector2D(pub [f64; 2]);

impl GazeVector2D {
    pub fn normalized(v: [f64; 2]) -> Result<Self> {
        let n = v[0].hypot(v[1]);
        if !(n > 1e-12) || !n.is_finite() {
            return Err(GazeError::Domain("zero-length gaze vector".into()));
        }
        Ok(Self([v[0] / n, v[1] / n]))
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn angle_to(&self, other: &GazeVector2D) -> f64 {
        let c = (self.0[0] * other.0[0] + self.0[1] * other.0[1]).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Unit direction from the eye to an annotated gaze point.
pub fn gt_gaze_direction(eye: &EyePoint, gaze_point: Point) -> Result<GazeVector2D> {
    let v = [gaze_point[0] - eye.x, gaze_point[1] - eye.y];
    GazeVector2D::normalized(v)
        .map_err(|_| GazeError::Domain("gaze point coincides with the eye".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeCone {
    /// `[1, h, w]`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub aperture: f64,
}

#[derive(Debug, Clone, Copy)]
struct ConeGrid {
    h: usize,
    w: usize,
    aperture: f64,
}

impl ConeGrid {
    /// Cosine threshold below which a pixel is outside the aperture.
    fn min_cos(&self) -> f64 {
        if self.aperture >= 2.0 * std::f64::consts::PI {
            -1.0
        } else {
            (self.aperture / 2.0).cos()
        }
    }

    /// Writes cone values for one gaze vector into `out` (length h·w).
    fn render<T: Element>(&self, g: [T; 2], eye: Point, out: &mut [T]) {
        let min_cos = T::lit(self.min_cos());
        let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
        let (er, ec) = containing_pixel(eye, self.h, self.w);
        let (ex, ey) = (T::lit(eye[0]), T::lit(eye[1]));
        let (fw, fh) = (T::lit(self.w as f64), T::lit(self.h as f64));
        let half = T::lit(0.5);
        for i in 0..self.h {
            let vy = (T::lit(i as f64) + half) / fh - ey;
            for j in 0..self.w {
                let idx = i * self.w + j;
                if i == er && j == ec {
                    out[idx] = T::one();
                    continue;
                }
                let vx = (T::lit(j as f64) + half) / fw - ex;
                let vn = (vx * vx + vy * vy).sqrt();
                let c = (g[0] * vx + g[1] * vy) / (gn * vn);
                out[idx] = if c > T::zero() && c >= min_cos { c } else { T::zero() };
            }
        }
    }

    /// Accumulates `Σ_p grad[p] · ∂I(p)/∂g` for one sample.
    fn backward<T: Element>(&self, g: [T; 2], eye: Point, values: &[T], grad: &[T]) -> [T; 2] {
        let gn2 = g[0] * g[0] + g[1] * g[1];
        let gn = gn2.sqrt();
        let (er, ec) = containing_pixel(eye, self.h, self.w);
        let (ex, ey) = (T::lit(eye[0]), T::lit(eye[1]));
        let (fw, fh) = (T::lit(self.w as f64), T::lit(self.h as f64));
        let half = T::lit(0.5);
        let mut acc = [T::zero(); 2];
        for i in 0..self.h {
            let vy = (T::lit(i as f64) + half) / fh - ey;
            for j in 0..self.w {
                let idx = i * self.w + j;
                let c = values[idx];
                if c <= T::zero() || (i == er && j == ec) || grad[idx] == T::zero() {
                    continue;
                }
                let vx = (T::lit(j as f64) + half) / fw - ex;
                let vn = (vx * vx + vy * vy).sqrt();
                // ∂cos/∂g = v / (|g||v|) − cos · g / |g|²
                let gp = grad[idx];
                acc[0] += gp * (vx / (gn * vn) - c * g[0] / gn2);
                acc[1] += gp * (vy / (gn * vn) - c * g[1] / gn2);
            }
        }
        acc
    }
}

/// Renders a single gaze cone from a unit gaze vector.
pub fn generate_cone(
    g: &GazeVector2D,
    eye: &EyePoint,
    h: usize,
    w: usize,
    aperture: f64,
) -> Result<GazeCone> {
    if h < 2 || w < 2 {
        return Err(GazeError::Domain(format!("cone grid {h}x{w} too small")));
    }
    if !(g.0[0].hypot(g.0[1]) > 0.0) {
        return Err(GazeError::Domain("zero gaze vector".into()));
    }
    let grid = ConeGrid { h, w, aperture };
    let mut out = vec![0.0; h * w];
    grid.render(g.0, eye.point(), &mut out);
    Ok(GazeCone {
        image: Tensor::new([1, h, w], out)?,
        aperture,
    })
}

struct ConeOp {
    grid: ConeGrid,
    eyes: Vec<Point>,
}

impl<T: Element> CustomOp<T> for ConeOp {
    fn name(&self) -> &'static str {
        "gaze_cone"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = inputs[0].data();
        let plane = self.grid.h * self.grid.w;
        let mut dg = vec![T::zero(); g.len()];
        for (n, eye) in self.eyes.iter().enumerate() {
            let d = self.grid.backward(
                [g[2 * n], g[2 * n + 1]],
                *eye,
                &output.data()[n * plane..(n + 1) * plane],
                &grad[n * plane..(n + 1) * plane],
            );
            dg[2 * n] = d[0];
            dg[2 * n + 1] = d[1];
        }
        vec![Some(dg)]
    }
}

/// Differentiable batched cone: `gaze: [N, 2]` → `[N, 1, h, w]`.
pub fn cone_on_tape<T: Element>(
    tape: &mut Tape<T>,
    gaze: Var,
    eyes: &[Point],
    h: usize,
    w: usize,
    aperture: f64,
) -> Result<Var> {
    let shape = tape.shape(gaze).to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != eyes.len() {
        return Err(GazeError::Domain(format!(
            "gaze tensor {shape:?} does not match {} eye points",
            eyes.len()
        )));
    }
    if h < 2 || w < 2 {
        return Err(GazeError::Domain(format!("cone grid {h}x{w} too small")));
    }
    let grid = ConeGrid { h, w, aperture };
    let g = tape.value(gaze).data();
    let plane = h * w;
    let mut out = vec![T::zero(); eyes.len() * plane];
    for (n, eye) in eyes.iter().enumerate() {
        let gv = [g[2 * n], g[2 * n + 1]];
        if gv[0] == T::zero() && gv[1] == T::zero() {
            return Err(GazeError::Domain("zero gaze vector".into()));
        }
        grid.render(gv, *eye, &mut out[n * plane..(n + 1) * plane]);
    }
    let value = Tensor::new([eyes.len(), 1, h, w], out)?;
    Ok(tape.custom(
        &[gaze],
        value,
        Box::new(ConeOp {
            grid,
            eyes: eyes.to_vec(),
        }),
    ))
}

/// Binary `[1, h, w]` mask: 1 where the pixel center lies inside the box.
pub fn render_head_mask(b: &HeadBox, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([1, h, w], |idx| {
        let (i, j) = (idx / w, idx % w);
        if b.contains(pixel_center(i, j, h, w)) {
            1.0
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthHeatmap {
    /// `[1, h, w]`, peak exactly 1.
    pub map: Tensor<f64>,
    pub gaze_points: Vec<Point>,
    pub sigma: f64,
}

/// Per-pixel maximum of unit-peak Gaussians, each centered on the pixel that
/// contains its gaze point. `sigma` is in pixels.
pub fn make_gt_heatmap(points: &[Point], h: usize, w: usize, sigma: f64) -> Result<GroundTruthHeatmap> {
    if points.is_empty() {
        return Err(GazeError::Domain("ground-truth heatmap needs at least one point".into()));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
    {
        return Err(GazeError::Domain(format!("gaze point {p:?} outside the unit square")));
    }
    let centers: Vec<(usize, usize)> = points.iter().map(|&p| containing_pixel(p, h, w)).collect();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let map = Tensor::from_fn([1, h, w], |idx| {
        let (i, j) = ((idx / w) as f64, (idx % w) as f64);
        centers
            .iter()
            .map(|&(ci, cj)| {
                let d2 = (i - ci as f64).powi(2) + (j - cj as f64).powi(2);
                (-d2 * inv).exp()
            })
            .fold(0.0, f64::max)
    });
    Ok(GroundTruthHeatmap {
        map,
        gaze_points: points.to_vec(),
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn eye(x: f64, y: f64) -> EyePoint {
        EyePoint {
            x,
            y,
            source: EyeSource::Annotated,
        }
    }

    #[test]
    fn cone_left_right_of_eye() {
        // eye at the left edge, vertically centered on a row of pixel centers
        let (h, w) = (9, 9);
        let e = eye(0.5 / 9.0, 4.5 / 9.0);
        let g = GazeVector2D::normalized([1.0, 0.0]).unwrap();
        let c = generate_cone(&g, &e, h, w, PI).unwrap();
        assert_eq!(c.image.get(&[0, 4, 5]), 1.0);
        let e2 = eye(4.5 / 9.0, 4.5 / 9.0);
        let c2 = generate_cone(&g, &e2, h, w, PI).unwrap();
        assert_eq!(c2.image.get(&[0, 4, 8]), 1.0);
        assert_eq!(c2.image.get(&[0, 4, 0]), 0.0);
        // eye pixel itself
        assert_eq!(c2.image.get(&[0, 4, 4]), 1.0);
    }

    #[test]
    fn cone_diagonal_pixel() {
        let (h, w) = (9, 9);
        let e = eye(4.5 / 9.0, 4.5 / 9.0);
        let g = GazeVector2D::normalized([1.0, 0.0]).unwrap();
        let c = generate_cone(&g, &e, h, w, PI).unwrap();
        assert!((c.image.get(&[0, 6, 6]) - 0.70710678).abs() < 1e-8);
    }

    #[test]
    fn narrow_aperture_zeroes_outside() {
        let (h, w) = (9, 9);
        let e = eye(4.5 / 9.0, 4.5 / 9.0);
        let g = GazeVector2D::normalized([1.0, 0.0]).unwrap();
        let c = generate_cone(&g, &e, h, w, PI / 3.0).unwrap();
        assert_eq!(c.image.get(&[0, 6, 6]), 0.0); // 45° > 30°
        assert_eq!(c.image.get(&[0, 4, 7]), 1.0);
    }

    #[test]
    fn zero_gaze_is_rejected() {
        assert!(GazeVector2D::normalized([0.0, 0.0]).is_err());
        let g = GazeVector2D([0.0, 0.0]);
        assert!(generate_cone(&g, &eye(0.5, 0.5), 8, 8, PI).is_err());
    }

    #[test]
    fn head_mask_examples() {
        let full = HeadBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(render_head_mask(&full, 5, 7).data().iter().all(|&v| v == 1.0));
        let left = HeadBox::new(0.0, 0.0, 0.5, 1.0).unwrap();
        let m = render_head_mask(&left, 4, 4);
        for i in 0..4 {
            assert_eq!(
                [m.get(&[0, i, 0]), m.get(&[0, i, 1]), m.get(&[0, i, 2]), m.get(&[0, i, 3])],
                [1.0, 1.0, 0.0, 0.0]
            );
        }
    }

    #[test]
    fn gt_heatmap_examples() {
        let hm = make_gt_heatmap(&[[0.5, 0.5]], 64, 64, 3.0).unwrap();
        assert_eq!(hm.map.get(&[0, 32, 32]), 1.0);
        assert!((hm.map.get(&[0, 32, 35]) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((hm.map.get(&[0, 32, 35]) - 0.60653).abs() < 1e-5);
        assert_eq!(hm.map.max_value(), 1.0);
        let twice = make_gt_heatmap(&[[0.5, 0.5], [0.5, 0.5]], 64, 64, 3.0).unwrap();
        assert_eq!(twice.map, hm.map);
        assert!(make_gt_heatmap(&[], 64, 64, 3.0).is_err());
        assert!(make_gt_heatmap(&[[1.5, 0.5]], 64, 64, 3.0).is_err());
    }

    #[test]
    fn gt_direction_examples() {
        let d = gt_gaze_direction(&eye(0.5, 0.5), [1.0, 0.5]).unwrap();
        assert_eq!(d.0, [1.0, 0.0]);
        let d = gt_gaze_direction(&eye(0.0, 0.0), [1.0, 1.0]).unwrap();
        assert!((d.0[0] - 0.5f64.sqrt()).abs() < 1e-15 && (d.0[1] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(gt_gaze_direction(&eye(0.3, 0.3), [0.3, 0.3]).is_err());
    }

    #[test]
    fn prototypal_eye_examples() {
        let e = prototypal_eye(&HeadBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
        assert_eq!((e.x, e.y), (0.5, 1.0 / 3.0));
        assert_eq!(e.source, EyeSource::Prototypal);
        let b = HeadBox::new(0.2, 0.2, 0.4, 0.5).unwrap();
        let e = prototypal_eye(&b);
        assert!((e.x - 0.3).abs() < 1e-15 && (e.y - 0.3).abs() < 1e-15);
        let thin = HeadBox::new(0.4, 0.1, 0.4000001, 0.9).unwrap();
        let e = prototypal_eye(&thin);
        assert!(thin.contains(e.point()));
    }

    #[test]
    fn invalid_boxes() {
        assert!(HeadBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(HeadBox::new(0.0, 0.0, 1.2, 1.0).is_err());
    }
}
