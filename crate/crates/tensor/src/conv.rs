//! Convolution, pooling and resampling on `[N, C, H, W]` tensors.

use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::tape::{fault, ConvGeom, Op, Tape, Var};
use crate::tensor::Tensor;

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(op, format!("expected [N, C, H, W], got {shape:?}"))),
    }
}

/// Unfolds input patches into a `[C·kh·kw, N·oh·ow]` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.n * g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * ncols];
    let (s, p) = (g.stride as isize, g.pad as isize);
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let plane = &x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = oy as isize * s + ki as isize - p;
                        let d = &mut dst[(b * g.oh + oy) * g.ow..(b * g.oh + oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.n * g.oh * g.ow;
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    let (s, p) = (g.stride as isize, g.pad as isize);
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let base = (b * g.c + c) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[(b * g.oh + oy) * g.ow..(b * g.oh + oy + 1) * g.ow];
                        let drow = base + iy as usize * g.w;
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                dx[drow + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl<T: Element> Tape<T> {
    /// 2-D cross-correlation. `x: [N, C, H, W]`, `w: [K, C, kh, kw]`, `b: [K]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = nchw("conv2d", self.shape(x))?;
        let (k, wc, kh, kw) = match *self.shape(w) {
            [k, wc, kh, kw] => (k, wc, kh, kw),
            ref s => {
                return Err(shape_err("conv2d", format!("weight must be [K, C, kh, kw], got {s:?}")))
            }
        };
        if wc != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {k} output channels", self.shape(b)),
                ));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let ckk = c * kh * kw;
        let ncols = n * oh * ow;
        let mut mat = vec![T::zero(); k * ncols];
        T::gemm(k, ckk, ncols, self.value(w).data(), false, &cols, false, T::zero(), &mut mat);

        // [K, N, oh·ow] -> [N, K, oh·ow]
        let plane = oh * ow;
        let mut out = vec![T::zero(); n * k * plane];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for kk in 0..k {
            let bv = bias.as_ref().map_or(T::zero(), |b| b[kk]);
            for bb in 0..n {
                let src = &mat[kk * ncols + bb * plane..kk * ncols + (bb + 1) * plane];
                let dst = &mut out[(bb * k + kk) * plane..(bb * k + kk + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let v = Tensor::new(vec![n, k, oh, ow], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, geom, cols }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("upsample_nearest", self.shape(x))?;
        if factor == 0 {
            return Err(shape_err("upsample_nearest", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for xx in 0..ow {
                    out.push(row[xx / factor]);
                }
            }
        }
        let v = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(v, Op::UpsampleNearest { x, factor }))
    }

    /// Bilinear upsampling with half-pixel centers and edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("upsample_bilinear", self.shape(x))?;
        if factor == 0 {
            return Err(shape_err("upsample_bilinear", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let ty = bilinear_taps::<T>(h, factor);
        let tx = bilinear_taps::<T>(w, factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (T::one() - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (T::one() - wx) + plane[y1 * w + x1] * wx;
                    dst[y * ow + xx] = top * (T::one() - wy) + bot * wy;
                }
            }
        }
        let v = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(v, Op::UpsampleBilinear { x, factor }))
    }

    /// Non-overlapping `k×k` average pooling; `k` must divide H and W.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("avg_pool", self.shape(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err(
                "avg_pool",
                format!("window {k} does not tile {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let scale = T::lit(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / k) * ow + xx / k] += plane[y * w + xx];
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
        let v = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(v, Op::AvgPool { x, k }))
    }

    /// Spatial max per channel, `[N, C, H, W] -> [N, C]`. Gradient goes to
    /// the first maximum in row-major order.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("global_max_pool", self.shape(x))?;
        if h == 0 || w == 0 {
            return Err(shape_err("global_max_pool", "empty spatial extent"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(best);
        }
        let v = Tensor::new(vec![n, c], out)?;
        Ok(self.push(v, Op::GlobalMaxPool { x, argmax }))
    }
}

fn bilinear_taps<T: Element>(len: usize, factor: usize) -> Vec<(usize, usize, T)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

pub(crate) fn vjp<T: Element>(tape: &Tape<T>, op: &Op<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    match op {
        Op::Conv2d { x, w, b, geom, cols } => {
            let gm = geom;
            let plane = gm.oh * gm.ow;
            let ncols = gm.n * plane;
            let ckk = gm.c * gm.kh * gm.kw;
            // [N, K, oh·ow] -> [K, N·oh·ow]
            let mut dmat = vec![T::zero(); gm.k * ncols];
            for bb in 0..gm.n {
                for kk in 0..gm.k {
                    let src = &g[(bb * gm.k + kk) * plane..(bb * gm.k + kk + 1) * plane];
                    dmat[kk * ncols + bb * plane..kk * ncols + (bb + 1) * plane]
                        .copy_from_slice(src);
                }
            }
            let mut res = Vec::with_capacity(3);
            let mut dw = vec![T::zero(); gm.k * ckk];
            T::gemm(gm.k, ncols, ckk, &dmat, false, cols, true, T::zero(), &mut dw);
            if fault::conv_corrupted() {
                for v in dw.iter_mut() {
                    *v *= T::lit(1.01);
                }
            }
            res.push((*w, dw));
            if let Some(b) = b {
                let db = dmat.chunks(ncols).map(|r| r.iter().copied().sum()).collect();
                res.push((*b, db));
            }
            if tape.needs_grad(*x) {
                let mut dcols = vec![T::zero(); ckk * ncols];
                T::gemm(ckk, gm.k, ncols, tape.value(*w).data(), true, &dmat, false, T::zero(), &mut dcols);
                res.push((*x, col2im(&dcols, gm)));
            }
            res
        }
        Op::UpsampleNearest { x, factor } => {
            let (n, c, h, w) = nchw("upsample_nearest", tape.shape(*x)).expect("recorded shape");
            let f = *factor;
            let ow = w * f;
            let mut dx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let src = &g[p * h * f * ow..(p + 1) * h * f * ow];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for y in 0..h * f {
                    for xx in 0..ow {
                        dst[(y / f) * w + xx / f] += src[y * ow + xx];
                    }
                }
            }
            vec![(*x, dx)]
        }
        Op::UpsampleBilinear { x, factor } => {
            let (n, c, h, w) = nchw("upsample_bilinear", tape.shape(*x)).expect("recorded shape");
            let (oh, ow) = (h * factor, w * factor);
            let ty = bilinear_taps::<T>(h, *factor);
            let tx = bilinear_taps::<T>(w, *factor);
            let mut dx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let src = &g[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (xx, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let gv = src[y * ow + xx];
                        let (ay, by) = (T::one() - wy, wy);
                        let (ax, bx) = (T::one() - wx, wx);
                        dst[y0 * w + x0] += gv * ay * ax;
                        dst[y0 * w + x1] += gv * ay * bx;
                        dst[y1 * w + x0] += gv * by * ax;
                        dst[y1 * w + x1] += gv * by * bx;
                    }
                }
            }
            vec![(*x, dx)]
        }
        Op::AvgPool { x, k } => {
            let (n, c, h, w) = nchw("avg_pool", tape.shape(*x)).expect("recorded shape");
            let (oh, ow) = (h / k, w / k);
            let scale = T::lit(1.0 / (k * k) as f64);
            let mut dx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let src = &g[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = src[(y / k) * ow + xx / k] * scale;
                    }
                }
            }
            vec![(*x, dx)]
        }
        Op::GlobalMaxPool { x, argmax } => {
            let xs = tape.shape(*x);
            let hw = xs[2] * xs[3];
            let mut dx = vec![T::zero(); tape.value(*x).numel()];
            for (p, (&am, &gv)) in argmax.iter().zip(g).enumerate() {
                dx[p * hw + am] += gv;
            }
            vec![(*x, dx)]
        }
        _ => unreachable!("not a spatial op"),
    }
}
