//! 3D cross-correlation kernels: im2col slabs multiplied with GEMM.

use std::any::TypeId;

use super::{direct, Element};

/// Upper bound on im2col buffer elements. Slabs of output rows are sized to
/// stay cache-resident between the copy and the multiply.
const COL_BUDGET: usize = 1 << 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

pub(crate) fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeom {
    fn k_rows(&self) -> usize {
        self.cin * self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    /// Number of output rows, one per `(depth, height)` pair.
    fn out_rows(&self) -> usize {
        self.output[0] * self.output[1]
    }

    fn out_len(&self) -> usize {
        self.out_rows() * self.output[2]
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }

    /// Output rows per slab.
    fn slab_rows(&self) -> usize {
        (COL_BUDGET / (self.k_rows() * self.output[2]).max(1)).clamp(1, self.out_rows())
    }

    /// Input index along one axis for output position `o` and tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&i| i < n)
    }

    /// Output range along W whose tap `c` lands inside the input (stride 1).
    #[inline]
    fn valid_w(&self, c: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(c).min(self.output[2]);
        let hi = (self.input[2] + self.pad).saturating_sub(c).min(self.output[2]);
        (lo, hi.max(lo))
    }

    /// Calls `f(tap_row, slab_row, input_row_start)` for every im2col row
    /// segment of output rows `r0..r0+rows` whose source row exists.
    /// Segments whose source row lies in the padding are reported with `None`.
    #[inline]
    fn for_each_segment(&self, r0: usize, rows: usize, mut f: impl FnMut(usize, usize, usize, Option<usize>)) {
        let [_, ih, _] = self.input;
        let oh = self.output[1];
        let [kd, kh, kw] = self.kernel;
        let mut row = 0;
        for ci in 0..self.cin {
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        for r in 0..rows {
                            let (z, y) = ((r0 + r) / oh, (r0 + r) % oh);
                            let base = match (self.src(z, a, self.input[0]), self.src(y, b, ih)) {
                                (Some(id), Some(ihh)) => Some(ci * self.in_len() + (id * ih + ihh) * self.input[2]),
                                _ => None,
                            };
                            f(row, c, r, base);
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Fills `col` (`k_rows x (rows * OW)`) for output rows `r0..r0+rows`.
    fn im2col<T: Element>(&self, x: &[T], r0: usize, rows: usize, col: &mut [T]) {
        let (ow, iw) = (self.output[2], self.input[2]);
        let cols = rows * ow;
        self.for_each_segment(r0, rows, |row, c, r, base| {
            let out = &mut col[row * cols + r * ow..row * cols + (r + 1) * ow];
            let Some(base) = base else {
                out.fill(T::zero());
                return;
            };
            if self.stride == 1 {
                let (lo, hi) = self.valid_w(c);
                out[..lo].fill(T::zero());
                out[hi..].fill(T::zero());
                if lo < hi {
                    let s0 = base + lo + c - self.pad;
                    out[lo..hi].copy_from_slice(&x[s0..s0 + hi - lo]);
                }
                return;
            }
            for (xo, o) in out.iter_mut().enumerate() {
                *o = match self.src(xo, c, iw) {
                    Some(iww) => x[base + iww],
                    None => T::zero(),
                };
            }
        });
    }

    /// Scatter-adds `col` back into `dx`; adjoint of [`Self::im2col`].
    fn col2im<T: Element>(&self, col: &[T], r0: usize, rows: usize, dx: &mut [T]) {
        let (ow, iw) = (self.output[2], self.input[2]);
        let cols = rows * ow;
        self.for_each_segment(r0, rows, |row, c, r, base| {
            let Some(base) = base else {
                return;
            };
            let vals = &col[row * cols + r * ow..row * cols + (r + 1) * ow];
            if self.stride == 1 {
                let (lo, hi) = self.valid_w(c);
                if lo < hi {
                    let s0 = base + lo + c - self.pad;
                    for (d, &v) in dx[s0..s0 + hi - lo].iter_mut().zip(&vals[lo..hi]) {
                        *d = *d + v;
                    }
                }
                return;
            }
            for (xo, &v) in vals.iter().enumerate() {
                if let Some(iww) = self.src(xo, c, iw) {
                    dx[base + iww] = dx[base + iww] + v;
                }
            }
        });
    }
}

/// Row-major matrix view with explicit strides.
#[derive(Clone, Copy)]
struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<T> MatRef<'_, T> {
    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `C = A * B + beta * C`, with `C` stored at `c` using strides `(rsc, csc)`.
fn gemm<T: Element>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T], rsc: usize, csc: usize) {
    assert_eq!(a.cols, b.rows);
    assert!(a.fits() && b.fits());
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

fn as_f32<T: Element>(s: &[T]) -> Option<&[f32]> {
    // SAFETY: the type ids match, so the cast is the identity.
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { &*(s as *const [T] as *const [f32]) })
}

fn as_f32_mut<T: Element>(s: &mut [T]) -> Option<&mut [f32]> {
    // SAFETY: as in `as_f32`.
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { &mut *(s as *mut [T] as *mut [f32]) })
}

/// One sample: `x` is `[cin, D, H, W]`, `out` is `[cout, OD, OH, OW]`.
pub(crate) fn forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    if direct::supports(g) {
        if let (Some(x), Some(w), Some(b)) = (as_f32(x), as_f32(w), as_f32(bias)) {
            direct::forward(g, x, w, b, as_f32_mut(out).expect("same element type"));
            return;
        }
    }
    let k = g.k_rows();
    let ow = g.output[2];
    let ov = g.out_len();
    let wm = MatRef { data: w, rows: g.cout, cols: k, rs: k, cs: 1 };
    if g.is_pointwise() {
        let xm = MatRef { data: x, rows: k, cols: ov, rs: ov, cs: 1 };
        gemm(wm, xm, T::zero(), out, ov, 1);
    } else {
        let slab = g.slab_rows();
        T::with_scratch(k * slab * ow, |col| {
            let mut r0 = 0;
            while r0 < g.out_rows() {
                let rows = slab.min(g.out_rows() - r0);
                let cols = rows * ow;
                g.im2col(x, r0, rows, &mut col[..k * cols]);
                let cm = MatRef { data: &col[..k * cols], rows: k, cols, rs: cols, cs: 1 };
                gemm(wm, cm, T::zero(), &mut out[r0 * ow..], ov, 1);
                r0 += rows;
            }
        });
    }
    for (co, chunk) in out.chunks_exact_mut(ov).enumerate() {
        let b = bias[co];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

/// Accumulates gradients for one sample into whichever outputs are present.
pub(crate) fn backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [f64]>,
) {
    let k = g.k_rows();
    let ow = g.output[2];
    let ov = g.out_len();
    if let Some(db) = db {
        for (co, chunk) in gout.chunks_exact(ov).enumerate() {
            db[co] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    if direct::supports(g) {
        if let (Some(x), Some(w), Some(gout)) = (as_f32(x), as_f32(w), as_f32(gout)) {
            let dx = dx.map(|d| as_f32_mut(d).expect("same element type"));
            let dw = dw.map(|d| as_f32_mut(d).expect("same element type"));
            direct::backward(g, x, w, gout, dx, dw);
            return;
        }
    }
    // W^T viewed as k x cout
    let wt = MatRef { data: w, rows: k, cols: g.cout, rs: 1, cs: k };
    if g.is_pointwise() {
        if let Some(dw) = dw.as_deref_mut() {
            // dW^T = X * G^T
            let xm = MatRef { data: x, rows: k, cols: ov, rs: ov, cs: 1 };
            let gt = MatRef { data: gout, rows: ov, cols: g.cout, rs: 1, cs: ov };
            gemm(xm, gt, T::one(), dw, 1, k);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let gm = MatRef { data: gout, rows: g.cout, cols: ov, rs: ov, cs: 1 };
            gemm(wt, gm, T::one(), dx, ov, 1);
        }
        return;
    }
    let slab = g.slab_rows();
    T::with_scratch(k * slab * ow, |col| {
        let mut r0 = 0;
        while r0 < g.out_rows() {
            let rows = slab.min(g.out_rows() - r0);
            let cols = rows * ow;
            let gslab = &gout[r0 * ow..];
            let gm = MatRef { data: gslab, rows: g.cout, cols, rs: ov, cs: 1 };
            if let Some(dw) = dw.as_deref_mut() {
                g.im2col(x, r0, rows, &mut col[..k * cols]);
                let cm = MatRef { data: &col[..k * cols], rows: k, cols, rs: cols, cs: 1 };
                let gt = MatRef { data: gslab, rows: cols, cols: g.cout, rs: 1, cs: ov };
                gemm(cm, gt, T::one(), dw, 1, k);
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(wt, gm, T::zero(), &mut col[..k * cols], cols, 1);
                g.col2im(&col[..k * cols], r0, rows, dx);
            }
            r0 += rows;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation in f64.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [od, oh, ow] = g.output;
        let [kd, kh, kw] = g.kernel;
        let [id, ih, iw] = g.input;
        let mut out = vec![0.0; g.cout * od * oh * ow];
        for co in 0..g.cout {
            for z in 0..od {
                for y in 0..oh {
                    for x0 in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let (Some(sz), Some(sy), Some(sx)) =
                                            (g.src(z, a, id), g.src(y, bb, ih), g.src(x0, c, iw))
                                        else {
                                            continue;
                                        };
                                        acc += w[(((co * g.cin + ci) * kd + a) * kh + bb) * kw + c]
                                            * x[((ci * id + sz) * ih + sy) * iw + sx];
                                    }
                                }
                            }
                        }
                        out[((co * od + z) * oh + y) * ow + x0] = acc;
                    }
                }
            }
        }
        out
    }

    fn geom(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, input: [usize; 3]) -> ConvGeom {
        let output = input.map(|n| out_dim(n, k, stride, pad).unwrap());
        ConvGeom { cin, cout, kernel: [k; 3], stride, pad, input, output }
    }

    #[test]
    fn matches_naive_for_several_geometries() {
        let mut state = 1u64;
        let mut rnd = || {
            state = crate::seed::splitmix(state);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for g in [
            geom(2, 3, 3, 1, 1, [4, 5, 6]),
            geom(1, 2, 3, 2, 1, [5, 5, 4]),
            geom(3, 2, 1, 1, 0, [3, 3, 3]),
            geom(2, 2, 3, 1, 0, [4, 4, 4]),
            // several slabs
            geom(4, 3, 3, 1, 1, [6, 40, 40]),
        ] {
            let x: Vec<f64> = (0..g.cin * g.in_len()).map(|_| rnd()).collect();
            let w: Vec<f64> = (0..g.cout * g.k_rows()).map(|_| rnd()).collect();
            let b: Vec<f64> = (0..g.cout).map(|_| rnd()).collect();
            let mut out = vec![0.0; g.cout * g.out_len()];
            forward(&g, &x, &w, &b, &mut out);
            let expect = naive(&g, &x, &w, &b);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for g in [geom(2, 1, 3, 2, 1, [5, 4, 3]), geom(2, 1, 3, 1, 1, [3, 4, 5])] {
            let cols = g.out_len();
            let x: Vec<f64> = (0..g.cin * g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
            let y: Vec<f64> = (0..g.k_rows() * cols).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut col = vec![0.0; g.k_rows() * cols];
            g.im2col(&x, 0, g.out_rows(), &mut col);
            let mut back = vec![0.0; x.len()];
            g.col2im(&y, 0, g.out_rows(), &mut back);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    /// Gradients of `sum(gout * conv(x))` by direct loops.
    fn naive_backward(g: &ConvGeom, x: &[f64], w: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let [od, oh, ow] = g.output;
        let [kd, kh, kw] = g.kernel;
        let [id, ih, iw] = g.input;
        let (mut dx, mut dw, mut db) = (vec![0.0; x.len()], vec![0.0; w.len()], vec![0.0; g.cout]);
        for co in 0..g.cout {
            for z in 0..od {
                for y in 0..oh {
                    for x0 in 0..ow {
                        let go = gout[((co * od + z) * oh + y) * ow + x0];
                        db[co] += go;
                        for ci in 0..g.cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let (Some(sz), Some(sy), Some(sx)) =
                                            (g.src(z, a, id), g.src(y, bb, ih), g.src(x0, c, iw))
                                        else {
                                            continue;
                                        };
                                        let wi = (((co * g.cin + ci) * kd + a) * kh + bb) * kw + c;
                                        let xi = ((ci * id + sz) * ih + sy) * iw + sx;
                                        dw[wi] += go * x[xi];
                                        dx[xi] += go * w[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }

    fn values(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = crate::seed::splitmix(state);
                // f32-representable, so both precisions see the same inputs
                ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) as f32 as f64
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * scale, "element {i}: {x} vs {y}");
        }
    }

    const GEOMS: [(usize, usize, usize, usize, usize, [usize; 3]); 7] = [
        (2, 3, 3, 1, 1, [4, 5, 6]),
        (1, 2, 3, 2, 1, [5, 5, 4]),
        (3, 2, 1, 1, 0, [3, 3, 3]),
        (2, 2, 3, 1, 0, [4, 4, 4]),
        (5, 6, 3, 1, 1, [6, 7, 9]),
        (9, 1, 1, 1, 0, [2, 3, 4]),
        (3, 5, 3, 1, 1, [1, 2, 1]),
    ];

    #[test]
    fn backward_matches_naive() {
        for (i, &(cin, cout, k, stride, pad, input)) in GEOMS.iter().enumerate() {
            let g = geom(cin, cout, k, stride, pad, input);
            let x = values(cin * g.in_len(), 10 + i as u64);
            let w = values(cout * g.k_rows(), 20 + i as u64);
            let gout = values(cout * g.out_len(), 30 + i as u64);
            let (ex, ew, eb) = naive_backward(&g, &x, &w, &gout);

            let (mut dx, mut dw, mut db) = (vec![0.0; x.len()], vec![0.0; w.len()], vec![0.0; cout]);
            backward(&g, &x, &w, &gout, Some(&mut dx), Some(&mut dw), Some(&mut db));
            close(&dx, &ex, 1e-12);
            close(&dw, &ew, 1e-12);
            close(&db, &eb, 1e-12);

            // f32 storage takes the vectorised path where it applies
            let f = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
            let back = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<f64>>();
            let (mut dx32, mut dw32) = (vec![0.0f32; x.len()], vec![0.0f32; w.len()]);
            backward(&g, &f(&x), &f(&w), &f(&gout), Some(&mut dx32), Some(&mut dw32), None);
            close(&back(&dx32), &ex, 1e-5);
            close(&back(&dw32), &ew, 1e-5);

            let b = values(cout, 40);
            let mut out32 = vec![0.0f32; cout * g.out_len()];
            forward(&g, &f(&x), &f(&w), &f(&b), &mut out32);
            close(&back(&out32), &naive(&g, &x, &w, &b), 1e-5);
        }
    }

    #[test]
    fn out_dim_rejects_too_small() {
        assert_eq!(out_dim(2, 5, 1, 1), None);
        assert_eq!(out_dim(8, 3, 1, 1), Some(8));
        assert_eq!(out_dim(8, 3, 2, 1), Some(4));
    }
}
