//! Elementwise, reduction and dense-layer operations.

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

fn same_shape<T: Element>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn map<T: Element>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

fn zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

#[inline]
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-major `[outer, axis, inner]` view of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| shape_err("add_n", "no operands"))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let v = map(self.value(x), |a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let v = map(self.value(x), |a| a + s);
        self.push(v, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = map(self.value(x), |a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = map(self.value(x), sigmoid_scalar);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(shape_err("softmax", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, d, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * d + k) * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..d {
                    m = m.max(src[at(k)]);
                }
                let mut s = T::zero();
                for k in 0..d {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..d {
                    out[at(k)] /= s;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::new(t.shape().to_vec(), t.data().to_vec())?.reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        self.push(v, Op::Mean(x))
    }

    /// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(
                "linear",
                format!("input {xs:?} against weight {ws:?} (need [N, in] and [out, in])"),
            ));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {fout} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        T::gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let v = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    /// Multiplies sample `n` of `x: [N, ...]` by `s[n]` (`s` has N values).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.value(x), self.value(s));
        let n = xs.shape().first().copied().unwrap_or(0);
        if ss.numel() != n {
            return Err(shape_err(
                "scale_rows",
                format!("{} scales for leading dim {n} of {:?}", ss.numel(), xs.shape()),
            ));
        }
        let inner = if n == 0 { 0 } else { xs.numel() / n };
        let mut out = xs.data().to_vec();
        for (row, &sv) in out.chunks_mut(inner.max(1)).zip(ss.data()) {
            for v in row {
                *v *= sv;
            }
        }
        let v = Tensor::new(xs.shape().to_vec(), out)?;
        Ok(self.push(v, Op::ScaleRows { x, s }))
    }

    /// Row-wise cosine similarity of `[N, D]` inputs, giving `[N]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "cosine_similarity", a, b)?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(shape_err("cosine_similarity", format!("need [N, D], got {sa:?}")));
        }
        let d = sa[1];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa[0]);
        for (ra, rb) in av.chunks(d.max(1)).zip(bv.chunks(d.max(1))) {
            let na = ra.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = rb.iter().map(|&v| v * v).sum::<T>().sqrt();
            if na == T::zero() || nb == T::zero() {
                return Err(TensorError::Domain {
                    op: "cosine_similarity",
                    detail: "zero-norm vector".into(),
                });
            }
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            out.push(dot / (na * nb));
        }
        let v = Tensor::new(vec![sa[0]], out)?;
        Ok(self.push(v, Op::Cosine { a, b }))
    }

    /// Scales each row of `[N, D]` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.normalize_rows_eps(x, 0.0)
    }

    /// `x / sqrt(|x|² + eps)` per row; `eps > 0` makes zero rows legal.
    pub fn normalize_rows_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        let eps = T::lit(eps);
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("normalize_rows", format!("need [N, D], got {s:?}")));
        }
        let d = s[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let norm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            if norm == T::zero() {
                return Err(TensorError::Domain {
                    op: "normalize_rows",
                    detail: "zero-norm row".into(),
                });
            }
            for v in row {
                *v /= norm;
            }
        }
        let v = Tensor::new(s, out)?;
        Ok(self.push(v, Op::NormalizeRows { x, eps }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.shape(a).first().copied().unwrap_or(1);
        let ones = vec![1.0; n];
        self.weighted_mse(a, b, &ones)
    }

    /// `Σ_n w_n Σ_i (a − b)² / (Σ_n w_n · per-sample size)`; samples are the
    /// leading axis. Zero total weight gives a zero loss.
    pub fn weighted_mse(&mut self, a: Var, b: Var, sample_weights: &[f64]) -> Result<Var> {
        same_shape(self, "mse", a, b)?;
        let shape = self.shape(a).to_vec();
        let n = shape.first().copied().unwrap_or(1);
        if sample_weights.len() != n {
            return Err(shape_err(
                "mse",
                format!("{} weights for {n} samples", sample_weights.len()),
            ));
        }
        let total: usize = shape.iter().product();
        let inner = if n == 0 { 0 } else { total / n };
        let wsum: f64 = sample_weights.iter().sum();
        let denom = T::lit(if wsum > 0.0 { wsum * inner as f64 } else { 1.0 });
        let weights: Vec<T> = sample_weights.iter().map(|&w| T::lit(w)).collect();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut s = T::zero();
        for (k, w) in weights.iter().enumerate() {
            if *w == T::zero() {
                continue;
            }
            let mut part = T::zero();
            for i in k * inner..(k + 1) * inner {
                let d = av[i] - bv[i];
                part += d * d;
            }
            s += *w * part;
        }
        let v = Tensor::scalar(s / denom);
        Ok(self.push(
            v,
            Op::WeightedMse {
                a,
                b,
                weights,
                denom,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets,
    /// with `p` clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, p: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != targets.len() {
            return Err(shape_err(
                "bce",
                format!("{} probabilities vs {} targets", pv.numel(), targets.len()),
            ));
        }
        let eps_t = T::lit(eps);
        let target: Vec<T> = targets.iter().map(|&t| T::lit(t)).collect();
        let one = T::one();
        let mut s = T::zero();
        for (&pp, &t) in pv.data().iter().zip(&target) {
            let q = pp.max(eps_t).min(one - eps_t);
            s -= t * q.ln() + (one - t) * (one - q).ln();
        }
        let n = T::lit(targets.len().max(1) as f64);
        let v = Tensor::scalar(s / n);
        Ok(self.push(
            v,
            Op::Bce {
                p,
                target,
                eps: eps_t,
            },
        ))
    }
}

pub(crate) fn vjp<T: Element>(
    tape: &Tape<T>,
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    match op {
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(&g, &y)| g * y).collect()),
                (*b, g.iter().zip(av).map(|(&g, &x)| g * x).collect()),
            ]
        }
        Op::Scale(x, s) => vec![(*x, g.iter().map(|&v| v * *s).collect())],
        Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Relu(x) => {
            let xv = tape.value(*x).data();
            vec![(
                *x,
                g.iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        }
        Op::Sigmoid(x) => vec![(
            *x,
            g.iter()
                .zip(out.data())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect(),
        )],
        Op::Softmax { x, axis } => {
            let (outer, d, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * d + k) * inner + i;
                    let dot: T = (0..d).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..d {
                        dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![(*x, dx)]
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut res = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for &p in parts {
                let d = tape.shape(p)[*axis];
                let mut gp = Vec::with_capacity(outer * d * inner);
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    gp.extend_from_slice(&g[base..base + d * inner]);
                }
                offset += d;
                res.push((p, gp));
            }
            res
        }
        Op::Slice { x, axis, start } => {
            let xs = tape.shape(*x);
            let (outer, d, inner) = split_axis(xs, *axis);
            let len = out.shape()[*axis];
            let mut dx = vec![T::zero(); outer * d * inner];
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let base = (o * d + start) * inner;
                dx[base..base + len * inner].copy_from_slice(src);
            }
            vec![(*x, dx)]
        }
        Op::Sum(x) => vec![(*x, vec![g[0]; tape.value(*x).numel()])],
        Op::Mean(x) => {
            let n = tape.value(*x).numel();
            vec![(*x, vec![g[0] / T::lit(n as f64); n])]
        }
        Op::Linear { x, w, b } => {
            let xs = tape.shape(*x);
            let (n, fin) = (xs[0], xs[1]);
            let fout = tape.shape(*w)[0];
            let mut res = Vec::with_capacity(3);
            if tape.needs_grad(*x) {
                let mut dx = vec![T::zero(); n * fin];
                T::gemm(n, fout, fin, g, false, tape.value(*w).data(), false, T::zero(), &mut dx);
                res.push((*x, dx));
            }
            let mut dw = vec![T::zero(); fout * fin];
            T::gemm(fout, n, fin, g, true, tape.value(*x).data(), false, T::zero(), &mut dw);
            res.push((*w, dw));
            if let Some(b) = b {
                let mut db = vec![T::zero(); fout];
                for row in g.chunks(fout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                res.push((*b, db));
            }
            res
        }
        Op::ScaleRows { x, s } => {
            let (xv, sv) = (tape.value(*x), tape.value(*s));
            let n = sv.numel();
            let inner = if n == 0 { 0 } else { xv.numel() / n };
            let mut dx = g.to_vec();
            let mut ds = vec![T::zero(); n];
            for k in 0..n {
                let range = k * inner..(k + 1) * inner;
                let sk = sv.data()[k];
                let mut acc = T::zero();
                for (d, &x) in dx[range.clone()].iter_mut().zip(&xv.data()[range]) {
                    acc += *d * x;
                    *d *= sk;
                }
                ds[k] = acc;
            }
            vec![(*x, dx), (*s, ds)]
        }
        Op::Cosine { a, b } => {
            let d = tape.shape(*a)[1].max(1);
            let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
            let mut da = vec![T::zero(); av.len()];
            let mut db = vec![T::zero(); bv.len()];
            for (row, ((ra, rb), &c)) in av.chunks(d).zip(bv.chunks(d)).zip(out.data()).enumerate() {
                let na = ra.iter().map(|&v| v * v).sum::<T>().sqrt();
                let nb = rb.iter().map(|&v| v * v).sum::<T>().sqrt();
                let gr = g[row];
                for k in 0..d {
                    let i = row * d + k;
                    da[i] = gr * (rb[k] / (na * nb) - c * ra[k] / (na * na));
                    db[i] = gr * (ra[k] / (na * nb) - c * rb[k] / (nb * nb));
                }
            }
            vec![(*a, da), (*b, db)]
        }
        Op::NormalizeRows { x, eps } => {
            let d = tape.shape(*x)[1].max(1);
            let xv = tape.value(*x).data();
            let y = out.data();
            let mut dx = vec![T::zero(); xv.len()];
            for ((rx, ry), (rg, rd)) in xv
                .chunks(d)
                .zip(y.chunks(d))
                .zip(g.chunks(d).zip(dx.chunks_mut(d)))
            {
                let norm = (rx.iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                let dot: T = ry.iter().zip(rg).map(|(&a, &b)| a * b).sum();
                for k in 0..d {
                    rd[k] = (rg[k] - ry[k] * dot) / norm;
                }
            }
            vec![(*x, dx)]
        }
        Op::WeightedMse {
            a,
            b,
            weights,
            denom,
        } => {
            let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
            let n = weights.len().max(1);
            let inner = av.len() / n;
            let two = T::lit(2.0);
            let mut da = vec![T::zero(); av.len()];
            for (k, &w) in weights.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                let c = g[0] * two * w / *denom;
                for i in k * inner..(k + 1) * inner {
                    da[i] = c * (av[i] - bv[i]);
                }
            }
            let db = da.iter().map(|&v| -v).collect();
            vec![(*a, da), (*b, db)]
        }
        Op::Bce { p, target, eps } => {
            let pv = tape.value(*p).data();
            let one = T::one();
            let n = T::lit(target.len().max(1) as f64);
            let dp = pv
                .iter()
                .zip(target)
                .map(|(&pp, &t)| {
                    if pp < *eps || pp > one - *eps {
                        T::zero()
                    } else {
                        g[0] * (-(t / pp) + (one - t) / (one - pp)) / n
                    }
                })
                .collect();
            vec![(*p, dp)]
        }
        _ => unreachable!("handled by another module"),
    }
}
