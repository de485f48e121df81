use super::{advance, Mask, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Denominator floor for every division by a norm or variance.
pub const EPS: f64 = 1e-12;

/// Numpy-style broadcast of two shapes aligned at their trailing axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` seen through an output of shape `out` (0 on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let lead = out.len() - shape.len();
    let mut natural = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        natural[ax] = acc;
        acc *= shape[ax];
    }
    (0..out.len())
        .map(|ax| {
            if ax < lead || shape[ax - lead] == 1 {
                0
            } else {
                natural[ax - lead]
            }
        })
        .collect()
}

/// Sums `grad` (shaped like a broadcast output) back down to `shape`.
pub fn sum_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let strides = broadcast_strides(shape, grad.shape());
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    let mut idx = vec![0usize; grad.rank()];
    for &g in grad.data() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[off] = out[off] + g;
        advance(&mut idx, grad.shape());
    }
    Tensor::raw(shape.to_vec(), out)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn zip_broadcast(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() == other.shape() {
            let data = self
                .data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor::raw(self.shape().to_vec(), data));
        }
        let out = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| Error::DimMismatch {
            op,
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })?;
        let sa = broadcast_strides(self.shape(), &out);
        let sb = broadcast_strides(other.shape(), &out);
        let n: usize = out.iter().product();
        let mut idx = vec![0usize; out.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut oa = 0;
            let mut ob = 0;
            for ax in 0..out.len() {
                oa += idx[ax] * sa[ax];
                ob += idx[ax] * sb[ax];
            }
            data.push(f(self.data()[oa], other.data()[ob]));
            advance(&mut idx, &out);
        }
        Ok(Tensor::raw(out, data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|x| x * factor)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(stable_sigmoid)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::raw(shape, self.data().to_vec()))
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(shape_err("transpose2d", format!("expected rank 2, got {:?}", self.shape())));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(Tensor::raw(vec![n, m], data))
    }

    /// `[M×K] · [K×N]`. Rows of `self` skip zero entries, so exact zeros in
    /// `self` contribute nothing to the sums.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::DimMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        Ok(Tensor::raw(vec![m, n], matmul_raw(self.data(), other.data(), m, k, n)))
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        check_axis("concat", first.shape(), axis)?;
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let compatible = same_rank
                && p
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::DimMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            out_shape[axis] += p.shape()[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::raw(out_shape, data))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        check_axis("slice", self.shape(), axis)?;
        if len == 0 || start + len > self.shape()[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} outside axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::raw(shape, data))
    }

    /// Sum over `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        check_axis("sum", self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &self.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + x;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::raw(shape, data))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let n = T::lit(self.shape().get(axis).copied().unwrap_or(1) as f64);
        Ok(self.sum_axis(axis)?.map(|x| x / n))
    }

    /// Compensated sum of every entry.
    pub fn sum_all(&self) -> T {
        neumaier_sum(self.data().iter().copied())
    }

    /// Softmax along `axis`, max-subtracted per slice. Masked entries are
    /// exactly zero; a slice with every entry masked is an error.
    pub fn softmax(&self, axis: usize, mask: Option<&Mask>) -> Result<Self> {
        check_axis("softmax", self.shape(), axis)?;
        let bits = mask.map(|m| m.expand(self.shape())).transpose()?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let live = |j: usize| bits.as_ref().is_none_or(|b| b[at(j)]);
                let mut max = None::<T>;
                for j in 0..n {
                    if live(j) {
                        let v = x[at(j)];
                        max = Some(max.map_or(v, |m| m.max(v)));
                    }
                }
                let max = max.ok_or(Error::DegenerateSlice { op: "softmax" })?;
                let mut total = T::zero();
                for j in 0..n {
                    if live(j) {
                        let e = (x[at(j)] - max).exp();
                        out[at(j)] = e;
                        total = total + e;
                    }
                }
                for j in 0..n {
                    if live(j) {
                        out[at(j)] = out[at(j)] / total;
                    }
                }
            }
        }
        Ok(Tensor::raw(self.shape().to_vec(), out))
    }

    /// Scales every axis-0 vector (one per remaining position) to unit
    /// Euclidean norm; the norm is floored at [`EPS`].
    pub fn l2_normalize(&self) -> Self {
        self.l2_normalize_with_norms().0
    }

    pub(crate) fn l2_normalize_with_norms(&self) -> (Self, Vec<T>) {
        let c = self.shape()[0];
        let positions = self.numel() / c;
        let x = self.data();
        let eps = T::lit(EPS);
        let mut norms = vec![T::zero(); positions];
        for ch in 0..c {
            for (p, n) in norms.iter_mut().enumerate() {
                let v = x[ch * positions + p];
                *n = *n + v * v;
            }
        }
        for n in &mut norms {
            *n = n.sqrt().max(eps);
        }
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            for p in 0..positions {
                out[ch * positions + p] = x[ch * positions + p] / norms[p];
            }
        }
        (Tensor::raw(self.shape().to_vec(), out), norms)
    }

    /// Zero-mean unit-variance normalization of every axis-0 vector (no gain
    /// or bias). Returns the inverse standard deviations alongside.
    pub fn layer_norm(&self) -> Self {
        self.layer_norm_with_stats().0
    }

    pub(crate) fn layer_norm_with_stats(&self) -> (Self, Vec<T>) {
        let d = self.shape()[0];
        let cols = self.numel() / d;
        let x = self.data();
        let n = T::lit(d as f64);
        let mut mean = vec![T::zero(); cols];
        for r in 0..d {
            for (c, m) in mean.iter_mut().enumerate() {
                *m = *m + x[r * cols + c];
            }
        }
        for m in &mut mean {
            *m = *m / n;
        }
        let mut var = vec![T::zero(); cols];
        for r in 0..d {
            for c in 0..cols {
                let dv = x[r * cols + c] - mean[c];
                var[c] = var[c] + dv * dv;
            }
        }
        let inv: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v / n + T::lit(EPS)).sqrt())
            .collect();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..d {
            for c in 0..cols {
                out[r * cols + c] = (x[r * cols + c] - mean[c]) * inv[c];
            }
        }
        (Tensor::raw(self.shape().to_vec(), out), inv)
    }

    /// Zero-padded cross-correlation of `[Cin×H×W]` with `[Cout×Cin×kh×kw]`.
    pub fn conv2d(&self, weight: &Self, bias: Option<&Self>, stride: usize, pad: usize) -> Result<Self> {
        let geo = ConvGeometry::new(self.shape(), weight.shape(), stride, pad)?;
        if let Some(b) = bias {
            if b.shape() != [geo.cout] {
                return Err(Error::DimMismatch {
                    op: "conv2d bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![geo.cout],
                });
            }
        }
        let x = self.data();
        let w = weight.data();
        let plane = geo.oh * geo.ow;
        let mut out = vec![T::zero(); geo.cout * plane];
        for co in 0..geo.cout {
            let dst = &mut out[co * plane..(co + 1) * plane];
            if let Some(b) = bias {
                let bv = b.data()[co];
                dst.iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..geo.cin {
                let src = &x[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let wv = w[((co * geo.cin + ci) * geo.kh + ky) * geo.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        geo.for_each_tap(ky, kx, |o, i| dst[o] = dst[o] + wv * src[i]);
                    }
                }
            }
        }
        Ok(Tensor::raw(vec![geo.cout, geo.oh, geo.ow], out))
    }

    /// Per-position depthwise 3×3 filtering at dilation `d`:
    /// `out(c,i,j) = Σ_{k,l∈{-1,0,1}} K(k,l,c,i,j) · x(c, i+k·d, j+l·d)` with
    /// zero reads outside the map. `kernels` is laid out `[3×3×C×H×W]`.
    pub fn dynamic_filter(&self, kernels: &Self, dilation: usize) -> Result<Self> {
        let (c, h, w) = dynamic_filter_dims(self, kernels, dilation)?;
        let x = self.data();
        let k = kernels.data();
        let plane = h * w;
        let vol = c * plane;
        let mut out = vec![T::zero(); vol];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = T::zero();
                    for (tap, (dy, dx)) in TAPS.iter().enumerate() {
                        let y = i as isize + dy * dilation as isize;
                        let xx = j as isize + dx * dilation as isize;
                        if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let kv = k[tap * vol + ch * plane + i * w + j];
                        acc = acc + kv * x[ch * plane + y as usize * w + xx as usize];
                    }
                    out[ch * plane + i * w + j] = acc;
                }
            }
        }
        Ok(Tensor::raw(vec![c, h, w], out))
    }

    /// Bilinear ×2 upsampling of a `[C×H×W]` map (half-pixel centers, edge clamp).
    pub fn upsample2x(&self) -> Result<Self> {
        if self.rank() != 3 {
            return Err(shape_err("upsample2x", format!("expected [C,H,W], got {:?}", self.shape())));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let ry = upsample_taps(h);
        let rx = upsample_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![T::zero(); c * oh * ow];
        let q = T::lit(0.25);
        let tq = T::lit(0.75);
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1)) in ry.iter().enumerate() {
                for (ox, &(x0, x1)) in rx.iter().enumerate() {
                    let top = tq * src[y0 * w + x0] + q * src[y0 * w + x1];
                    let bot = tq * src[y1 * w + x0] + q * src[y1 * w + x1];
                    out[ch * oh * ow + oy * ow + ox] = tq * top + q * bot;
                }
            }
        }
        Ok(Tensor::raw(vec![c, oh, ow], out))
    }

    /// Rows `ids` of a `[V×D]` table, stacked as `[len×D]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(shape_err("gather_rows", format!("expected a table, got {:?}", self.shape())));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("token id {id} outside vocabulary of {v}")));
            }
            data.extend_from_slice(&self.data()[id * d..(id + 1) * d]);
        }
        Ok(Tensor::raw(vec![ids.len(), d], data))
    }

    /// Mean binary cross-entropy of logits against a `{0,1}` target of the
    /// same shape, in the stable `max(z,0) − z·y + ln(1+e^{−|z|})` form.
    pub fn bce_with_logits(&self, target: &Self) -> Result<T> {
        if self.shape() != target.shape() {
            return Err(Error::DimMismatch {
                op: "bce_with_logits",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let terms = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p());
        Ok(neumaier_sum(terms) / T::lit(self.numel() as f64))
    }
}

/// Neumaier-compensated summation.
pub(crate) fn neumaier_sum<T: Scalar>(values: impl Iterator<Item = T>) -> T {
    let mut sum = T::zero();
    let mut carry = T::zero();
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            carry = carry + ((sum - t) + x);
        } else {
            carry = carry + ((x - t) + sum);
        }
        sum = t;
    }
    sum + carry
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// The nine `(k, l)` offsets in accumulation order.
pub(crate) const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn dynamic_filter_dims<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, d: usize) -> Result<(usize, usize, usize)> {
    if d == 0 {
        return Err(shape_err("dynamic_filter", "dilation must be at least 1"));
    }
    if x.rank() != 3 {
        return Err(shape_err("dynamic_filter", format!("expected [C,H,W], got {:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if k.shape() != [3, 3, c, h, w] {
        return Err(Error::DimMismatch {
            op: "dynamic_filter kernels",
            lhs: k.shape().to_vec(),
            rhs: vec![3, 3, c, h, w],
        });
    }
    Ok((c, h, w))
}

/// Source rows `(near, far)` for each output row of a ×2 bilinear upsample;
/// output value is `0.75·near + 0.25·far`.
fn upsample_taps(n: usize) -> Vec<(usize, usize)> {
    (0..2 * n)
        .map(|o| {
            let m = o / 2;
            if o % 2 == 0 {
                (m, m.saturating_sub(1))
            } else {
                (m, (m + 1).min(n - 1))
            }
        })
        .collect()
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 4 || x[0] != w[1] {
            return Err(Error::DimMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be at least 1"));
        }
        let (h, wd, kh, kw) = (x[1], x[2], w[2], w[3]);
        let out_extent = |n: usize, k: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < k {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel extent {k} exceeds padded input {n} + 2·{pad}"),
                ));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(Self {
            cin: x[0],
            h,
            w: wd,
            cout: w[0],
            kh,
            kw,
            stride,
            pad,
            oh: out_extent(h, kh)?,
            ow: out_extent(wd, kw)?,
        })
    }

    /// Calls `f(out_offset, in_offset)` for every in-bounds pairing of tap `(ky,kx)`.
    #[inline]
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let (lo_x, hi_x) = self.valid_range(kx as isize, self.w, self.ow);
        for oy in 0..self.oh {
            let iy = oy as isize * s + ky as isize - p;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            let in_row = iy as usize * self.w;
            let out_row = oy * self.ow;
            for ox in lo_x..hi_x {
                let ix = (ox as isize * s + kx as isize - p) as usize;
                f(out_row + ox, in_row + ix);
            }
        }
    }

    /// Output coordinates `[lo, hi)` whose tap `k` reads inside `0..n`.
    fn valid_range(&self, k: isize, n: usize, on: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let mut lo = 0usize;
        while lo < on && (lo as isize * s + k - p) < 0 {
            lo += 1;
        }
        let mut hi = on;
        while hi > lo && ((hi - 1) as isize * s + k - p) >= n as isize {
            hi -= 1;
        }
        (lo, hi)
    }
}

// ---- backward helpers -------------------------------------------------------

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot = dot + gd[at(j)] * yd[at(j)];
            }
            for j in 0..n {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::raw(y.shape().to_vec(), out)
}

pub(crate) fn l2_normalize_backward<T: Scalar>(y: &Tensor<T>, norms: &[T], g: &Tensor<T>) -> Tensor<T> {
    let c = y.shape()[0];
    let positions = norms.len();
    let (yd, gd) = (y.data(), g.data());
    let eps = T::lit(EPS);
    let mut dot = vec![T::zero(); positions];
    for ch in 0..c {
        for (p, d) in dot.iter_mut().enumerate() {
            *d = *d + yd[ch * positions + p] * gd[ch * positions + p];
        }
    }
    let mut out = vec![T::zero(); yd.len()];
    for ch in 0..c {
        for p in 0..positions {
            let o = ch * positions + p;
            out[o] = if norms[p] > eps {
                (gd[o] - yd[o] * dot[p]) / norms[p]
            } else {
                gd[o] / eps
            };
        }
    }
    Tensor::raw(y.shape().to_vec(), out)
}

pub(crate) fn layer_norm_backward<T: Scalar>(y: &Tensor<T>, inv: &[T], g: &Tensor<T>) -> Tensor<T> {
    let d = y.shape()[0];
    let cols = inv.len();
    let (yd, gd) = (y.data(), g.data());
    let n = T::lit(d as f64);
    let mut mean_g = vec![T::zero(); cols];
    let mut mean_gy = vec![T::zero(); cols];
    for r in 0..d {
        for c in 0..cols {
            let o = r * cols + c;
            mean_g[c] = mean_g[c] + gd[o];
            mean_gy[c] = mean_gy[c] + gd[o] * yd[o];
        }
    }
    let mut out = vec![T::zero(); yd.len()];
    for r in 0..d {
        for c in 0..cols {
            let o = r * cols + c;
            out[o] = inv[c] * (gd[o] - mean_g[c] / n - yd[o] * mean_gy[c] / n);
        }
    }
    Tensor::raw(y.shape().to_vec(), out)
}

/// Gradients of `conv2d` with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let geo = ConvGeometry::new(x.shape(), weight.shape(), stride, pad).expect("forward validated geometry");
    let (xd, wd, gd) = (x.data(), weight.data(), g.data());
    let plane = geo.oh * geo.ow;
    let in_plane = geo.h * geo.w;
    let mut gx = vec![T::zero(); xd.len()];
    let mut gw = vec![T::zero(); wd.len()];
    let mut gb = vec![T::zero(); geo.cout];
    for co in 0..geo.cout {
        let gout = &gd[co * plane..(co + 1) * plane];
        gb[co] = gout.iter().fold(T::zero(), |a, &v| a + v);
        for ci in 0..geo.cin {
            let src = &xd[ci * in_plane..(ci + 1) * in_plane];
            let gsrc = &mut gx[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let wi = ((co * geo.cin + ci) * geo.kh + ky) * geo.kw + kx;
                    let wv = wd[wi];
                    let mut acc = T::zero();
                    geo.for_each_tap(ky, kx, |o, i| {
                        acc = acc + gout[o] * src[i];
                        gsrc[i] = gsrc[i] + wv * gout[o];
                    });
                    gw[wi] = acc;
                }
            }
        }
    }
    (
        Tensor::raw(x.shape().to_vec(), gx),
        Tensor::raw(weight.shape().to_vec(), gw),
        Tensor::raw(vec![geo.cout], gb),
    )
}

/// Gradients of `dynamic_filter` with respect to the input map and kernels.
pub(crate) fn dynamic_filter_backward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    g: &Tensor<T>,
    dilation: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = dynamic_filter_dims(x, kernels, dilation).expect("forward validated shapes");
    let (xd, kd, gd) = (x.data(), kernels.data(), g.data());
    let plane = h * w;
    let vol = c * plane;
    let mut gx = vec![T::zero(); xd.len()];
    let mut gk = vec![T::zero(); kd.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let go = gd[ch * plane + i * w + j];
                for (tap, (dy, dx)) in TAPS.iter().enumerate() {
                    let y = i as isize + dy * dilation as isize;
                    let xx = j as isize + dx * dilation as isize;
                    if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let src = ch * plane + y as usize * w + xx as usize;
                    let ki = tap * vol + ch * plane + i * w + j;
                    gk[ki] = go * xd[src];
                    gx[src] = gx[src] + kd[ki] * go;
                }
            }
        }
    }
    (
        Tensor::raw(x.shape().to_vec(), gx),
        Tensor::raw(kernels.shape().to_vec(), gk),
    )
}

pub(crate) fn upsample2x_backward<T: Scalar>(in_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let ry = upsample_taps(h);
    let rx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let gd = g.data();
    let mut out = vec![T::zero(); c * h * w];
    let q = T::lit(0.25);
    let tq = T::lit(0.75);
    for ch in 0..c {
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1)) in ry.iter().enumerate() {
            for (ox, &(x0, x1)) in rx.iter().enumerate() {
                let gv = gd[ch * oh * ow + oy * ow + ox];
                let top = tq * gv;
                let bot = q * gv;
                dst[y0 * w + x0] = dst[y0 * w + x0] + tq * top;
                dst[y0 * w + x1] = dst[y0 * w + x1] + q * top;
                dst[y1 * w + x0] = dst[y1 * w + x0] + tq * bot;
                dst[y1 * w + x1] = dst[y1 * w + x1] + q * bot;
            }
        }
    }
    Tensor::raw(in_shape.to_vec(), out)
}

/// Per-row maximum of a `[D×T]` matrix over the columns where `valid` holds,
/// with the winning column index per row.
pub(crate) fn masked_max<T: Scalar>(x: &Tensor<T>, valid: &[bool]) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 2 || x.shape()[1] != valid.len() {
        return Err(Error::DimMismatch {
            op: "masked_max",
            lhs: x.shape().to_vec(),
            rhs: vec![valid.len()],
        });
    }
    let (d, t) = (x.shape()[0], x.shape()[1]);
    let mut vals = Vec::with_capacity(d);
    let mut arg = Vec::with_capacity(d);
    for r in 0..d {
        let mut best: Option<(usize, T)> = None;
        for c in (0..t).filter(|&c| valid[c]) {
            let v = x.data()[r * t + c];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        let (c, v) = best.ok_or(Error::DegenerateSlice { op: "masked_max" })?;
        vals.push(v);
        arg.push(c);
    }
    Ok((Tensor::raw(vec![d], vals), arg))
}

pub(crate) fn bce_backward<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, g: T) -> Tensor<T> {
    let n = T::lit(logits.numel() as f64);
    let data = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| g * (stable_sigmoid(z) - y) / n)
        .collect();
    Tensor::raw(logits.shape().to_vec(), data)
}
