//! Reverse-mode tape. Every operation appends a node holding its output;
//! [`Graph::backward`] walks the tape once in reverse.

use super::conv::{self, ConvGeom};
use super::{Dims, Element, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Relu { x: Var },
    Sigmoid { x: Var },
    SoftmaxChannels { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    BceWithLogits { logits: Var, target: Vec<T> },
    Dice { probs: Var, target: Vec<T>, smooth: f64, stats: Vec<(f64, f64)> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::SoftmaxChannels { .. } => "softmax_channels",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Dice { .. } => "dice",
        }
    }
}

struct Node<T> {
    dims: Dims,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean and `1 / sqrt(var + eps)` with f64 accumulation.
fn moments<T: Element>(s: &[T], eps: f64) -> (f64, f64) {
    let m = s.len() as f64;
    let mut acc = [0.0f64; 4];
    let mut chunks = s.chunks_exact(4);
    for c in &mut chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v.as_f64();
        }
    }
    let mean = (acc.iter().sum::<f64>() + chunks.remainder().iter().map(|v| v.as_f64()).sum::<f64>()) / m;
    let mut acc = [0.0f64; 4];
    let mut chunks = s.chunks_exact(4);
    for c in &mut chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            let d = v.as_f64() - mean;
            *a += d * d;
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|v| (v.as_f64() - mean).powi(2)).sum();
    let var = (acc.iter().sum::<f64>() + tail) / m;
    (mean, 1.0 / (var + eps).sqrt())
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(contrib),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].dims
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.dims, n.value.clone()).expect("node dims match value")
    }

    fn push(&mut self, dims: Dims, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(dims.len(), value.len());
        if cfg!(debug_assertions) && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(op.name().to_string()));
        }
        self.nodes.push(Node { dims, value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, dims: Dims, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if dims.len() != value.len() {
            return Err(Error::Shape(format!("{} values for leaf {dims}", value.len())));
        }
        self.push(dims, value, requires_grad, Op::Leaf)
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.leaf(t.dims(), t.data().to_vec(), t.requires_grad())
    }

    /// Adds every parameter as a leaf; `trainable` decides which ones
    /// receive gradients. The result is indexed by [`super::ParamId::index`].
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Result<Vec<Var>> {
        store.iter().map(|(name, t)| self.leaf(t.dims(), t.data().to_vec(), trainable(name))).collect()
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<Dims> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::Shape(format!("{what}: {da} vs {db}")));
        }
        Ok(da)
    }

    /// Cross-correlation with isotropic stride and zero padding.
    /// `w` is `[out, in, kd, kh, kw]`, `b` holds `out` values.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xd = self.dims(x);
        let wd = self.dims(w);
        if xd.c != wd.c {
            return Err(Error::Shape(format!("conv3d: input has {} channels, weights expect {}", xd.c, wd.c)));
        }
        if self.dims(b).len() != wd.n {
            return Err(Error::Shape(format!("conv3d: bias length {} for {} outputs", self.dims(b).len(), wd.n)));
        }
        let kernel = [wd.d, wd.h, wd.w];
        let input = xd.spatial_shape();
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv::out_dim(input[a], kernel[a], stride, padding).ok_or_else(|| {
                Error::Shape(format!(
                    "conv3d: input {xd} too small for kernel {kernel:?} (stride {stride}, padding {padding})"
                ))
            })?;
        }
        let geom = ConvGeom { cin: xd.c, cout: wd.n, kernel, stride, pad: padding, input, output };
        let od = Dims::new(xd.n, wd.n, output[0], output[1], output[2]);
        let mut out = vec![T::zero(); od.len()];
        let (xs, os) = (xd.len() / xd.n.max(1), od.len() / od.n.max(1));
        for s in 0..xd.n {
            conv::forward(
                &geom,
                &self.value(x)[s * xs..(s + 1) * xs],
                self.value(w),
                self.value(b),
                &mut out[s * os..(s + 1) * os],
            );
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        self.push(od, out, rg, Op::Conv3d { x, w, b, geom })
    }

    /// 2x2x2 max pooling with stride 2; ties resolve to the lowest index.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x);
        if xd.d % 2 != 0 || xd.h % 2 != 0 || xd.w % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2: odd spatial dims {xd}")));
        }
        let od = Dims::new(xd.n, xd.c, xd.d / 2, xd.h / 2, xd.w / 2);
        let src = self.value(x);
        let mut out = Vec::with_capacity(od.len());
        let mut argmax = Vec::with_capacity(od.len());
        for nc in 0..xd.n * xd.c {
            let base = nc * xd.spatial();
            for z in 0..od.d {
                for y in 0..od.h {
                    for x0 in 0..od.w {
                        let mut best = base + ((2 * z) * xd.h + 2 * y) * xd.w + 2 * x0;
                        for a in 0..2 {
                            for b in 0..2 {
                                for c in 0..2 {
                                    let i = base + ((2 * z + a) * xd.h + 2 * y + b) * xd.w + 2 * x0 + c;
                                    if src[i] > src[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        out.push(src[best]);
                        argmax.push(best as u32);
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(od, out, rg, Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x);
        let od = Dims::new(xd.n, xd.c, xd.d * 2, xd.h * 2, xd.w * 2);
        let src = self.value(x);
        let mut out = Vec::with_capacity(od.len());
        for nc in 0..xd.n * xd.c {
            let base = nc * xd.spatial();
            for z in 0..od.d {
                for y in 0..od.h {
                    let row = base + ((z / 2) * xd.h + y / 2) * xd.w;
                    for x0 in 0..od.w {
                        out.push(src[row + x0 / 2]);
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(od, out, rg, Op::Upsample2 { x })
    }

    /// Per-sample, per-channel standardisation over space followed by a
    /// per-channel affine map. `gamma` and `beta` hold `C` values each.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xd = self.dims(x);
        if self.dims(gamma).len() != xd.c || self.dims(beta).len() != xd.c {
            return Err(Error::Shape(format!("instance_norm: affine params must have {} values", xd.c)));
        }
        if xd.spatial() < 2 {
            return Err(Error::Shape(format!("instance_norm: spatial size of {xd} below 2")));
        }
        let m = xd.spatial();
        let src = self.value(x);
        let (g, bta) = (self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(xd.len());
        let mut stats = Vec::with_capacity(xd.n * xd.c);
        for (nc, s) in src.chunks_exact(m).enumerate() {
            let c = nc % xd.c;
            let (mean, istd) = moments(s, eps);
            stats.push((mean, istd));
            let (scale, shift) = (g[c].as_f64() * istd, bta[c].as_f64() - g[c].as_f64() * istd * mean);
            out.extend(s.iter().map(|v| T::from_f64(v.as_f64() * scale + shift)));
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(xd, out, rg, Op::InstanceNorm { x, gamma, beta, stats })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let (d, rg) = (self.dims(x), self.requires_grad(x));
        self.push(d, out, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| T::from_f64(stable_sigmoid(v.as_f64()))).collect();
        let (d, rg) = (self.dims(x), self.requires_grad(x));
        self.push(d, out, rg, Op::Sigmoid { x })
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x);
        let m = d.spatial();
        let src = self.value(x);
        let mut out = vec![T::zero(); d.len()];
        for n in 0..d.n {
            let base = n * d.c * m;
            for i in 0..m {
                let at = |c: usize| base + c * m + i;
                let max = (0..d.c).map(|c| src[at(c)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..d.c).map(|c| (src[at(c)].as_f64() - max).exp()).sum();
                for c in 0..d.c {
                    out[at(c)] = T::from_f64((src[at(c)].as_f64() - max).exp() / z);
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(d, out, rg, Op::SoftmaxChannels { x })
    }

    /// Stacks `b`'s channels after `a`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.n != db.n || da.spatial_shape() != db.spatial_shape() {
            return Err(Error::Shape(format!("concat_channels: {da} vs {db}")));
        }
        let od = Dims::new(da.n, da.c + db.c, da.d, da.h, da.w);
        let (sa, sb) = (da.c * da.spatial(), db.c * db.spatial());
        let mut out = Vec::with_capacity(od.len());
        for n in 0..da.n {
            out.extend_from_slice(&self.value(a)[n * sa..(n + 1) * sa]);
            out.extend_from_slice(&self.value(b)[n * sb..(n + 1) * sb]);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(od, out, rg, Op::Concat { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.same_dims(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(d, out, rg, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.same_dims(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(d, out, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let (d, rg) = (self.dims(x), self.requires_grad(x));
        self.push(d, out, rg, Op::Scale { x, factor })
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        let rg = self.requires_grad(x);
        self.push(Dims::scalar(), vec![T::from_f64(s)], rg, Op::Sum { x })
    }

    fn check_target(&self, v: Var, target: &[T], what: &str) -> Result<()> {
        if target.len() != self.dims(v).len() {
            return Err(Error::Shape(format!("{what}: target has {} values, input {}", target.len(), self.dims(v))));
        }
        Ok(())
    }

    /// Mean binary cross-entropy evaluated from logits in the overflow-free
    /// form `max(x, 0) - x t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        self.check_target(logits, target, "bce_with_logits")?;
        let m = target.len() as f64;
        let total: f64 = self
            .value(logits)
            .iter()
            .zip(target)
            .map(|(x, t)| {
                let (x, t) = (x.as_f64(), t.as_f64());
                x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let rg = self.requires_grad(logits);
        self.push(
            Dims::scalar(),
            vec![T::from_f64(total / m)],
            rg,
            Op::BceWithLogits { logits, target: target.to_vec() },
        )
    }

    /// `1 - (2 Σ p t + s) / (Σ p + Σ t + s)` per (sample, channel), averaged.
    pub fn dice_loss(&mut self, probs: Var, target: &[T], smooth: f64) -> Result<Var> {
        self.check_target(probs, target, "dice_loss")?;
        let d = self.dims(probs);
        let m = d.spatial();
        let p = self.value(probs);
        let mut stats = Vec::with_capacity(d.n * d.c);
        let mut loss = 0.0;
        for nc in 0..d.n * d.c {
            let (mut inter, mut denom) = (0.0, smooth);
            for i in nc * m..(nc + 1) * m {
                let (pv, tv) = (p[i].as_f64(), target[i].as_f64());
                inter += pv * tv;
                denom += pv + tv;
            }
            loss += 1.0 - (2.0 * inter + smooth) / denom;
            stats.push((inter, denom));
        }
        let count = (d.n * d.c) as f64;
        let rg = self.requires_grad(probs);
        self.push(
            Dims::scalar(),
            vec![T::from_f64(loss / count)],
            rg,
            Op::Dice { probs, target: target.to_vec(), smooth, stats },
        )
    }

    /// Back-propagates from the scalar `loss`. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.dims(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
        }
        if cfg!(debug_assertions) {
            for g in grads.iter().flatten() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteValue("backward".to_string()));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.requires_grad(v);
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let xd = self.dims(*x);
                let (xs, os) = (xd.len() / xd.n, node.dims.len() / node.dims.n);
                let mut dx = rg(*x).then(|| vec![T::zero(); xd.len()]);
                let mut dw = rg(*w).then(|| vec![T::zero(); self.dims(*w).len()]);
                let mut db = rg(*b).then(|| vec![0.0f64; geom.cout]);
                for s in 0..xd.n {
                    conv::backward(
                        geom,
                        &self.value(*x)[s * xs..(s + 1) * xs],
                        self.value(*w),
                        &gout[s * os..(s + 1) * os],
                        dx.as_mut().map(|v| &mut v[s * xs..(s + 1) * xs]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(db) = db {
                    accumulate(grads, *b, db.into_iter().map(T::from_f64).collect());
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.dims(*x).len()];
                for (&i, &g) in argmax.iter().zip(gout) {
                    dx[i as usize] = dx[i as usize] + g;
                }
                accumulate(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let xd = self.dims(*x);
                let od = node.dims;
                let mut dx = vec![T::zero(); xd.len()];
                for nc in 0..xd.n * xd.c {
                    let (ib, ob) = (nc * xd.spatial(), nc * od.spatial());
                    for z in 0..od.d {
                        for y in 0..od.h {
                            let row = ib + ((z / 2) * xd.h + y / 2) * xd.w;
                            let orow = ob + (z * od.h + y) * od.w;
                            for x0 in 0..od.w {
                                dx[row + x0 / 2] = dx[row + x0 / 2] + gout[orow + x0];
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::InstanceNorm { x, gamma, beta, stats } => {
                let xd = self.dims(*x);
                let m = xd.spatial();
                let (g, xv) = (self.value(*gamma), self.value(*x));
                let mut dx = rg(*x).then(|| Vec::with_capacity(xd.len()));
                let mut dg = vec![0.0f64; xd.c];
                let mut dbeta = vec![0.0f64; xd.c];
                for (nc, &(mean, istd)) in stats.iter().enumerate() {
                    let c = nc % xd.c;
                    let (gs, xs) = (&gout[nc * m..(nc + 1) * m], &xv[nc * m..(nc + 1) * m]);
                    let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
                    for (dy, xi) in gs.iter().zip(xs) {
                        let dy = dy.as_f64();
                        sum_dy += dy;
                        sum_dy_xh += dy * (xi.as_f64() - mean) * istd;
                    }
                    dg[c] += sum_dy_xh;
                    dbeta[c] += sum_dy;
                    if let Some(dx) = dx.as_mut() {
                        let gc = g[c].as_f64();
                        let (mean_dy, mean_dy_xh) = (sum_dy / m as f64, sum_dy_xh / m as f64);
                        dx.extend(gs.iter().zip(xs).map(|(dy, xi)| {
                            let xh = (xi.as_f64() - mean) * istd;
                            T::from_f64(gc * istd * (dy.as_f64() - mean_dy - xh * mean_dy_xh))
                        }));
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, dg.into_iter().map(T::from_f64).collect());
                }
                if rg(*beta) {
                    accumulate(grads, *beta, dbeta.into_iter().map(T::from_f64).collect());
                }
            }
            Op::Relu { x } => {
                let dx =
                    node.value.iter().zip(gout).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = node.value.iter().zip(gout).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxChannels { x } => {
                let d = node.dims;
                let m = d.spatial();
                let s = &node.value;
                let mut dx = vec![T::zero(); d.len()];
                for n in 0..d.n {
                    let base = n * d.c * m;
                    for i in 0..m {
                        let dot: f64 =
                            (0..d.c).map(|c| gout[base + c * m + i].as_f64() * s[base + c * m + i].as_f64()).sum();
                        for c in 0..d.c {
                            let j = base + c * m + i;
                            dx[j] = T::from_f64(s[j].as_f64() * (gout[j].as_f64() - dot));
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let (da, db) = (self.dims(*a), self.dims(*b));
                let (sa, sb) = (da.c * da.spatial(), db.c * db.spatial());
                let mut ga = Vec::with_capacity(da.len());
                let mut gb = Vec::with_capacity(db.len());
                for n in 0..da.n {
                    let base = n * (sa + sb);
                    ga.extend_from_slice(&gout[base..base + sa]);
                    gb.extend_from_slice(&gout[base + sa..base + sa + sb]);
                }
                if rg(*a) {
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        accumulate(grads, v, gout.to_vec());
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    accumulate(grads, *a, gout.iter().zip(self.value(*b)).map(|(&g, &y)| g * y).collect());
                }
                if rg(*b) {
                    accumulate(grads, *b, gout.iter().zip(self.value(*a)).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, gout.iter().map(|&g| g * *factor).collect());
            }
            Op::Sum { x } => {
                accumulate(grads, *x, vec![gout[0]; self.dims(*x).len()]);
            }
            Op::BceWithLogits { logits, target } => {
                let scale = gout[0].as_f64() / target.len() as f64;
                let dx = self
                    .value(*logits)
                    .iter()
                    .zip(target)
                    .map(|(x, t)| T::from_f64(scale * (stable_sigmoid(x.as_f64()) - t.as_f64())))
                    .collect();
                accumulate(grads, *logits, dx);
            }
            Op::Dice { probs, target, smooth, stats } => {
                let d = self.dims(*probs);
                let m = d.spatial();
                let scale = gout[0].as_f64() / (d.n * d.c) as f64;
                let mut dx = vec![T::zero(); d.len()];
                for (nc, &(inter, denom)) in stats.iter().enumerate() {
                    let num = 2.0 * inter + smooth;
                    for i in nc * m..(nc + 1) * m {
                        // d/dp of -(2I + s)/U
                        let t = target[i].as_f64();
                        dx[i] = T::from_f64(-scale * (2.0 * t * denom - num) / (denom * denom));
                    }
                }
                accumulate(grads, *probs, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, dims: Dims, data: Vec<f64>) -> Var {
        g.leaf(dims, data, true).unwrap()
    }

    #[test]
    fn pointwise_identity_conv() {
        let mut g = Graph::<f32>::new();
        let d = Dims::cube(1, 1, 3);
        let data: Vec<f32> = (0..27).map(|i| i as f32 - 4.0).collect();
        let x = g.leaf(d, data.clone(), false).unwrap();
        let w = g.leaf(Dims::new(1, 1, 1, 1, 1), vec![1.0], false).unwrap();
        let b = g.leaf(Dims::new(1, 1, 1, 1, 1), vec![0.0], false).unwrap();
        let y = g.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let mut g = Graph::<f64>::new();
        let c = 1.75;
        let x = leaf(&mut g, Dims::cube(1, 1, 5), vec![c; 125]);
        let w = leaf(&mut g, Dims::new(1, 1, 3, 3, 3), vec![1.0; 27]);
        let b = leaf(&mut g, Dims::scalar(), vec![0.0]);
        let y = g.conv3d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.dims(y), Dims::cube(1, 1, 5));
        // interior voxel (2,2,2) sees all 27 taps
        assert_eq!(g.value(y)[(2 * 5 + 2) * 5 + 2], 27.0 * c);
        // corner voxel sees 8
        assert_eq!(g.value(y)[0], 8.0 * c);
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Dims::cube(1, 2, 4), vec![0.0; 128], false).unwrap();
        let w = g.leaf(Dims::new(3, 1, 3, 3, 3), vec![0.0; 81], false).unwrap();
        let b = g.leaf(Dims::new(1, 3, 1, 1, 1), vec![0.0; 3], false).unwrap();
        assert!(matches!(g.conv3d(x, w, b, 1, 1), Err(Error::Shape(_))));
        let w5 = g.leaf(Dims::new(3, 2, 5, 5, 5), vec![0.0; 750], false).unwrap();
        assert!(matches!(g.conv3d(x, w5, b, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_picks_max_and_roundtrips_constants() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Dims::cube(1, 1, 2), (1..=8).map(|v| v as f32).collect(), false).unwrap();
        let p = g.max_pool2(x).unwrap();
        assert_eq!(g.value(p), &[8.0]);

        let c = g.leaf(Dims::cube(1, 2, 4), vec![3.5; 128], false).unwrap();
        let down = g.max_pool2(c).unwrap();
        let up = g.upsample2(down).unwrap();
        assert!(g.value(up).iter().all(|&v| v == 3.5));
        assert_eq!(g.dims(up), Dims::cube(1, 2, 4));

        let odd = g.leaf(Dims::new(1, 1, 3, 2, 2), vec![0.0; 12], false).unwrap();
        assert!(g.max_pool2(odd).is_err());
    }

    #[test]
    fn pooling_ties_go_to_lowest_index() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, Dims::cube(1, 1, 2), vec![1.0; 8]);
        let p = g.max_pool2(x).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        let dx = grads.get(x).unwrap();
        assert_eq!(dx[0], 1.0);
        assert!(dx[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_moments() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 27).map(|i| ((i * 7919) % 97) as f64 * 0.3 - 5.0).collect();
        let x = leaf(&mut g, Dims::cube(2, 3, 3), data);
        let gamma = leaf(&mut g, Dims::new(1, 3, 1, 1, 1), vec![1.0; 3]);
        let beta = leaf(&mut g, Dims::new(1, 3, 1, 1, 1), vec![0.0; 3]);
        let y = g.instance_norm(x, gamma, beta, 1e-5).unwrap();
        for chunk in g.value(y).chunks(27) {
            let mean = chunk.iter().sum::<f64>() / 27.0;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 27.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn instance_norm_constant_channel_gives_beta() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Dims::cube(1, 1, 2), vec![4.0; 8], false).unwrap();
        let gamma = g.leaf(Dims::scalar(), vec![2.0], false).unwrap();
        let beta = g.leaf(Dims::scalar(), vec![0.25], false).unwrap();
        let y = g.instance_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn instance_norm_on_standardised_input_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Dims::new(1, 1, 1, 1, 2), vec![-1.0, 1.0], false).unwrap();
        let gamma = g.leaf(Dims::scalar(), vec![1.0], false).unwrap();
        let beta = g.leaf(Dims::scalar(), vec![0.0], false).unwrap();
        let y = g.instance_norm(x, gamma, beta, 1e-10).unwrap();
        assert!((g.value(y)[0] + 1.0).abs() < 1e-5 && (g.value(y)[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn activations_basic_values() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Dims::new(1, 4, 1, 1, 1), vec![0.0; 4], false).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert!(g.value(s).iter().all(|&v| v == 0.5));
        let sm = g.softmax_channels(x).unwrap();
        assert!(g.value(sm).iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let big = g.leaf(Dims::new(1, 1, 1, 1, 2), vec![-100.0, 100.0], false).unwrap();
        let s = g.sigmoid(big).unwrap();
        assert!(g.value(s)[0] > 0.0 && g.value(s)[1] <= 1.0);
    }

    #[test]
    fn concat_preserves_slices() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Dims::new(2, 3, 1, 1, 2), (0..12).map(|v| v as f32).collect(), false).unwrap();
        let b = g.leaf(Dims::new(2, 5, 1, 1, 2), (100..120).map(|v| v as f32).collect(), false).unwrap();
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.dims(c).c, 8);
        let v = g.value(c);
        assert_eq!(&v[0..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(&v[6..16], &(100..110).map(|v| v as f32).collect::<Vec<_>>()[..]);
        assert_eq!(&v[16..22], &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        let bad = g.leaf(Dims::new(2, 1, 1, 2, 1), vec![0.0; 4], false).unwrap();
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Dims::scalar(), vec![0.0], false).unwrap();
        let l = g.bce_with_logits(x, &[1.0]).unwrap();
        assert!((g.value(l)[0] - std::f32::consts::LN_2).abs() < 1e-6);
        let x = g.leaf(Dims::new(1, 1, 1, 1, 2), vec![40.0, -88.0], false).unwrap();
        let l = g.bce_with_logits(x, &[1.0, 0.0]).unwrap();
        assert!(g.value(l)[0].abs() < 1e-12);
    }

    #[test]
    fn dice_perfect_and_total_miss() {
        let mut g = Graph::<f64>::new();
        let t = vec![1.0, 0.0, 1.0, 0.0];
        let p = leaf(&mut g, Dims::new(1, 1, 1, 2, 2), t.clone());
        let l = g.dice_loss(p, &t, 1e-5).unwrap();
        assert!(g.value(l)[0].abs() < 1e-9);
        let miss: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        let q = leaf(&mut g, Dims::new(1, 1, 1, 2, 2), miss);
        let l = g.dice_loss(q, &t, 1e-9).unwrap();
        assert!((g.value(l)[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Dims::scalar(), vec![2.0], false).unwrap();
        let b = leaf(&mut g, Dims::scalar(), vec![3.0]);
        let c = g.mul(a, b).unwrap();
        let grads = g.backward(c).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &[2.0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Dims::cube(1, 2, 4), (0..128).map(|i| (i as f32 * 0.7).sin()).collect(), false).unwrap();
            let w =
                g.leaf(Dims::new(3, 2, 3, 3, 3), (0..162).map(|i| (i as f32 * 0.3).cos()).collect(), false).unwrap();
            let b = g.leaf(Dims::new(1, 3, 1, 1, 1), vec![0.1, 0.2, 0.3], false).unwrap();
            let y = g.conv3d(x, w, b, 1, 1).unwrap();
            g.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
