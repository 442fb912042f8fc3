//! Direct stride-1 convolution for `f32` on x86-64 with AVX2 and FMA.
//!
//! Inputs are copied into a zero-padded grid. Output positions are then
//! indexed in the padded grid's flat coordinates, which makes every kernel
//! tap a constant offset and every row segment contiguous; positions that
//! fall in the padding are computed and discarded.

#![allow(unsafe_op_in_unsafe_fn)]

use std::cell::RefCell;

use super::conv::ConvGeom;

const CO_BLOCK: usize = 4;
const Q_BLOCK: usize = 16;
/// Flat positions per weight-gradient pass, sized for L1/L2 residency.
const Q_CHUNK: usize = 2048;

thread_local! {
    static BUFS: RefCell<[Vec<f32>; 3]> = const { RefCell::new([Vec::new(), Vec::new(), Vec::new()]) };
}

pub(crate) fn available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Whether [`forward`] and [`backward`] accept `g`.
pub(crate) fn supports(g: &ConvGeom) -> bool {
    let k = g.kernel[0];
    g.stride == 1 && g.kernel == [k; 3] && g.pad < k && k <= 3 && available()
}

/// Padded-grid geometry for an input of extent `input`.
#[derive(Clone, Copy, Debug)]
struct Grid {
    kernel: [usize; 3],
    input: [usize; 3],
    pad: usize,
    output: [usize; 3],
    wp: usize,
    plane: usize,
    /// Flat output positions, rounded up to a whole block.
    q_len: usize,
    /// Elements per channel in the padded buffer.
    cstride: usize,
}

impl Grid {
    fn new(kernel: [usize; 3], input: [usize; 3], pad: usize) -> Self {
        let [dp, hp, wp] = input.map(|n| n + 2 * pad);
        let output = [dp + 1 - kernel[0], hp + 1 - kernel[1], wp + 1 - kernel[2]];
        let plane = hp * wp;
        let q_len = (output[0] * plane).div_ceil(Q_BLOCK) * Q_BLOCK;
        let max_off = (kernel[0] - 1) * plane + (kernel[1] - 1) * wp + kernel[2] - 1;
        let cstride = (q_len + max_off).max(dp * plane);
        Self { kernel, input, pad, output, wp, plane, q_len, cstride }
    }

    fn offsets(&self) -> Vec<usize> {
        let [kd, kh, kw] = self.kernel;
        let mut v = Vec::with_capacity(kd * kh * kw);
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    v.push(a * self.plane + b * self.wp + c);
                }
            }
        }
        v
    }

    /// Copies `c` channels of `src` into the padded layout.
    fn pad_into(&self, src: &[f32], c: usize, dst: &mut Vec<f32>) {
        let [d, h, w] = self.input;
        dst.clear();
        dst.resize(c * self.cstride, 0.0);
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let s = ((ch * d + z) * h + y) * w;
                    let o = ch * self.cstride + (z + self.pad) * self.plane + (y + self.pad) * self.wp + self.pad;
                    dst[o..o + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
    }

    /// Scatters `c` channels of an output-shaped tensor into flat output
    /// coordinates, zero elsewhere; rows are `q_len` long.
    fn scatter_output(&self, src: &[f32], c: usize, rows: usize, dst: &mut Vec<f32>) {
        let [od, oh, ow] = self.output;
        dst.clear();
        dst.resize(rows * self.q_len, 0.0);
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let s = ((ch * od + z) * oh + y) * ow;
                    let o = ch * self.q_len + z * self.plane + y * self.wp;
                    dst[o..o + ow].copy_from_slice(&src[s..s + ow]);
                }
            }
        }
    }

    /// Reads valid positions of flat rows into an output-shaped tensor.
    fn gather_output(&self, flat: &[f32], c: usize, mut f: impl FnMut(usize, usize, &[f32])) {
        let [od, oh, ow] = self.output;
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let s = ch * self.q_len + z * self.plane + y * self.wp;
                    f(ch, ((ch * od + z) * oh + y) * ow, &flat[s..s + ow]);
                }
            }
        }
    }
}

/// Weights `[cout, cin, taps]` packed as `[cout/4][cin][taps][4]`.
fn pack_weights(w: &[f32], cout: usize, cin: usize, taps: usize, flip_transpose: bool) -> Vec<f32> {
    // flip_transpose reads w as [cin', cout', taps] with reversed taps
    let ncb = cout.div_ceil(CO_BLOCK);
    let mut out = vec![0.0; ncb * cin * taps * CO_BLOCK];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                let v = if flip_transpose {
                    w[(ci * cout + co) * taps + (taps - 1 - t)]
                } else {
                    w[(co * cin + ci) * taps + t]
                };
                out[(((co / CO_BLOCK) * cin + ci) * taps + t) * CO_BLOCK + co % CO_BLOCK] = v;
            }
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn conv_kernel(xp: &[f32], grid: &Grid, cin: usize, packed: &[f32], ncb: usize, out: &mut [f32]) {
    use std::arch::x86_64::*;
    let offs = grid.offsets();
    let taps = offs.len();
    assert!(xp.len() >= cin * grid.cstride);
    assert!(packed.len() >= ncb * cin * taps * CO_BLOCK);
    assert!(out.len() >= ncb * CO_BLOCK * grid.q_len);
    assert!(offs.iter().all(|&o| o + grid.q_len <= grid.cstride));
    let xptr = xp.as_ptr();
    for cb in 0..ncb {
        for qb in (0..grid.q_len).step_by(Q_BLOCK) {
            let mut acc = [_mm256_setzero_ps(); 2 * CO_BLOCK];
            for ci in 0..cin {
                let base = xptr.add(ci * grid.cstride + qb);
                let wb = packed.as_ptr().add((cb * cin + ci) * taps * CO_BLOCK);
                for (t, &off) in offs.iter().enumerate() {
                    let s0 = _mm256_loadu_ps(base.add(off));
                    let s1 = _mm256_loadu_ps(base.add(off + 8));
                    let wt = wb.add(t * CO_BLOCK);
                    for j in 0..CO_BLOCK {
                        let wv = _mm256_broadcast_ss(&*wt.add(j));
                        acc[2 * j] = _mm256_fmadd_ps(wv, s0, acc[2 * j]);
                        acc[2 * j + 1] = _mm256_fmadd_ps(wv, s1, acc[2 * j + 1]);
                    }
                }
            }
            for j in 0..CO_BLOCK {
                let o = out.as_mut_ptr().add((cb * CO_BLOCK + j) * grid.q_len + qb);
                _mm256_storeu_ps(o, acc[2 * j]);
                _mm256_storeu_ps(o.add(8), acc[2 * j + 1]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn hsum(v: std::arch::x86_64::__m256) -> f32 {
    use std::arch::x86_64::*;
    let lo = _mm256_castps256_ps128(v);
    let hi = _mm256_extractf128_ps(v, 1);
    let s = _mm_add_ps(lo, hi);
    let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
    _mm_cvtss_f32(s)
}

/// `dw[co, ci, t] += Σ_q g[co, q] · x[ci, q + off(t)]`.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_grad_kernel(xp: &[f32], grid: &Grid, cin: usize, gp: &[f32], cout: usize, dw: &mut [f32]) {
    use std::arch::x86_64::*;
    let [kd, kh, kw] = grid.kernel;
    let taps = kd * kh * kw;
    let ncb = cout.div_ceil(CO_BLOCK);
    assert!(kw <= 3);
    assert!(xp.len() >= cin * grid.cstride);
    assert!(gp.len() >= ncb * CO_BLOCK * grid.q_len);
    assert!(dw.len() >= cout * cin * taps);
    assert!(grid.q_len % 8 == 0);
    let (xptr, gptr) = (xp.as_ptr(), gp.as_ptr());
    let mut q0 = 0;
    while q0 < grid.q_len {
        let q1 = (q0 + Q_CHUNK).min(grid.q_len);
        for ci in 0..cin {
            for cb in 0..ncb {
                for a in 0..kd {
                    for b in 0..kh {
                        let row = xptr.add(ci * grid.cstride + a * grid.plane + b * grid.wp);
                        let mut acc = [[_mm256_setzero_ps(); 3]; CO_BLOCK];
                        let mut q = q0;
                        while q < q1 {
                            let mut s = [_mm256_setzero_ps(); 3];
                            for (c, sv) in s.iter_mut().enumerate().take(kw) {
                                *sv = _mm256_loadu_ps(row.add(q + c));
                            }
                            for (j, aj) in acc.iter_mut().enumerate() {
                                let gv = _mm256_loadu_ps(gptr.add((cb * CO_BLOCK + j) * grid.q_len + q));
                                for c in 0..kw {
                                    aj[c] = _mm256_fmadd_ps(gv, s[c], aj[c]);
                                }
                            }
                            q += 8;
                        }
                        for (j, aj) in acc.iter().enumerate() {
                            let co = cb * CO_BLOCK + j;
                            if co >= cout {
                                break;
                            }
                            for c in 0..kw {
                                dw[(co * cin + ci) * taps + (a * kh + b) * kw + c] += hsum(aj[c]);
                            }
                        }
                    }
                }
            }
        }
        q0 = q1;
    }
}

/// One sample; same contract as the im2col path. Caller checks [`supports`].
pub(crate) fn forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: &[f32], out: &mut [f32]) {
    let grid = Grid::new(g.kernel, g.input, g.pad);
    debug_assert_eq!(grid.output, g.output);
    let taps = g.kernel.iter().product();
    let packed = pack_weights(w, g.cout, g.cin, taps, false);
    let ncb = g.cout.div_ceil(CO_BLOCK);
    BUFS.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let [xp, flat, _] = &mut *bufs;
        grid.pad_into(x, g.cin, xp);
        flat.clear();
        flat.resize(ncb * CO_BLOCK * grid.q_len, 0.0);
        #[cfg(target_arch = "x86_64")]
        // SAFETY: `supports` verified AVX2 and FMA; buffer sizes are asserted inside.
        unsafe {
            conv_kernel(xp, &grid, g.cin, &packed, ncb, flat)
        };
        grid.gather_output(flat, g.cout, |co, at, row| {
            for (o, &v) in out[at..at + row.len()].iter_mut().zip(row) {
                *o = v + bias[co];
            }
        });
    });
}

/// Accumulates input and weight gradients for one sample.
pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    gout: &[f32],
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
) {
    let taps: usize = g.kernel.iter().product();
    BUFS.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let [xp, flat, gp] = &mut *bufs;
        if let Some(dw) = dw {
            let grid = Grid::new(g.kernel, g.input, g.pad);
            grid.pad_into(x, g.cin, xp);
            let ncb = g.cout.div_ceil(CO_BLOCK);
            grid.scatter_output(gout, g.cout, ncb * CO_BLOCK, gp);
            #[cfg(target_arch = "x86_64")]
            // SAFETY: as in `forward`.
            unsafe {
                weight_grad_kernel(xp, &grid, g.cin, gp, g.cout, dw)
            };
        }
        if let Some(dx) = dx {
            // transposed convolution: flipped kernel, complementary padding
            let tpad = g.kernel[0] - 1 - g.pad;
            let grid = Grid::new(g.kernel, g.output, tpad);
            debug_assert_eq!(grid.output, g.input);
            let packed = pack_weights(w, g.cin, g.cout, taps, true);
            let ncb = g.cin.div_ceil(CO_BLOCK);
            grid.pad_into(gout, g.cout, xp);
            flat.clear();
            flat.resize(ncb * CO_BLOCK * grid.q_len, 0.0);
            #[cfg(target_arch = "x86_64")]
            // SAFETY: as in `forward`.
            unsafe {
                conv_kernel(xp, &grid, g.cout, &packed, ncb, flat)
            };
            grid.gather_output(flat, g.cin, |_, at, row| {
                for (d, &v) in dx[at..at + row.len()].iter_mut().zip(row) {
                    *d += v;
                }
            });
        }
    });
}
