//! Tiny rasterizer for the synthetic modalities.

use gazecast_tensor::Tensor;

use crate::geometry::Point;

pub(crate) type Rgb = [f32; 3];

pub(crate) struct Canvas {
    res: usize,
    data: Vec<f32>,
}

impl Canvas {
    pub fn new(res: usize, fill: Rgb) -> Self {
        let mut data = vec![0.0; 3 * res * res];
        for (c, &v) in fill.iter().enumerate() {
            data[c * res * res..(c + 1) * res * res].fill(v);
        }
        Self { res, data }
    }

    /// `f` receives the row-major pixel index and the pixel center.
    pub fn from_fn(res: usize, mut f: impl FnMut(usize, Point) -> Rgb) -> Self {
        let mut canvas = Self::new(res, [0.0; 3]);
        let plane = res * res;
        for i in 0..res {
            for j in 0..res {
                let p = [(j as f64 + 0.5) / res as f64, (i as f64 + 0.5) / res as f64];
                let rgb = f(i * res + j, p);
                for (c, v) in rgb.iter().enumerate() {
                    canvas.data[c * plane + i * res + j] = v.clamp(0.0, 1.0);
                }
            }
        }
        canvas
    }

    fn blend(&mut self, i: usize, j: usize, color: Rgb, alpha: f32) {
        let plane = self.res * self.res;
        for (c, &v) in color.iter().enumerate() {
            let px = &mut self.data[c * plane + i * self.res + j];
            *px = *px * (1.0 - alpha) + v * alpha;
        }
    }

    /// Paints the region where `inside` holds, inside the normalized bounding
    /// box `[x0, x1] × [y0, y1]`, with `ss × ss` supersampled coverage
    /// (`ss = 1` samples pixel centers only).
    pub fn fill(&mut self, bbox: [f64; 4], ss: usize, color: Rgb, inside: impl Fn(Point) -> bool) {
        let r = self.res as f64;
        let j0 = ((bbox[0] * r).floor().max(0.0) as usize).min(self.res);
        let i0 = ((bbox[1] * r).floor().max(0.0) as usize).min(self.res);
        let j1 = ((bbox[2] * r).ceil().max(0.0) as usize).min(self.res);
        let i1 = ((bbox[3] * r).ceil().max(0.0) as usize).min(self.res);
        let n = (ss * ss) as f32;
        for i in i0..i1 {
            for j in j0..j1 {
                let mut hits = 0;
                for a in 0..ss {
                    for b in 0..ss {
                        let p = [
                            (j as f64 + (b as f64 + 0.5) / ss as f64) / r,
                            (i as f64 + (a as f64 + 0.5) / ss as f64) / r,
                        ];
                        if inside(p) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    self.blend(i, j, color, hits as f32 / n);
                }
            }
        }
    }

    pub fn disc(&mut self, c: Point, radius: f64, ss: usize, color: Rgb) {
        let bbox = [c[0] - radius, c[1] - radius, c[0] + radius, c[1] + radius];
        let r2 = radius * radius;
        self.fill(bbox, ss, color, |p| {
            (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= r2
        });
    }

    pub fn ring(&mut self, c: Point, radius: f64, thickness: f64, ss: usize, color: Rgb) {
        let outer = radius + thickness / 2.0;
        let inner = (radius - thickness / 2.0).max(0.0);
        let bbox = [c[0] - outer, c[1] - outer, c[0] + outer, c[1] + outer];
        self.fill(bbox, ss, color, |p| {
            let d = (p[0] - c[0]).hypot(p[1] - c[1]);
            d <= outer && d >= inner
        });
    }

    pub fn rect(&mut self, bbox: [f64; 4], ss: usize, color: Rgb) {
        self.fill(bbox, ss, color, |p| {
            p[0] >= bbox[0] && p[0] <= bbox[2] && p[1] >= bbox[1] && p[1] <= bbox[3]
        });
    }

    pub fn segment(&mut self, a: Point, b: Point, thickness: f64, ss: usize, color: Rgb) {
        let h = thickness / 2.0;
        let bbox = [
            a[0].min(b[0]) - h,
            a[1].min(b[1]) - h,
            a[0].max(b[0]) + h,
            a[1].max(b[1]) + h,
        ];
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = (d[0] * d[0] + d[1] * d[1]).max(1e-18);
        self.fill(bbox, ss, color, |p| {
            let t = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
            let q = [a[0] + t * d[0], a[1] + t * d[1]];
            (p[0] - q[0]).hypot(p[1] - q[1]) <= h
        });
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        Tensor::new([3, self.res, self.res], self.data).expect("canvas size")
    }
}

/// HSV with all components in `[0, 1]`.
pub(crate) fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}
