//! Raw slice kernels behind the graph ops.
//!
//! Dense convolutions (one group) lower to matrix products over an unfolded
//! input; grouped and depthwise convolutions use row-wise axpy/dot passes
//! over NCHW planes so the inner loops stay contiguous for stride 1.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn in_per_group(&self) -> usize {
        self.c / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.k / self.groups
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `[lo, hi)` whose tap `kj` lands inside the input row.
    #[inline]
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let p = self.padding as isize;
        let s = self.stride as isize;
        let kj = kj as isize;
        let lo_num = p - kj;
        let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
        let hi_num = self.w as isize - 1 + p - kj;
        let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(self.ow as isize) };
        (lo as usize, hi.max(lo) as usize)
    }

    #[inline]
    fn in_row(&self, oh: usize, ki: usize) -> Option<usize> {
        let ih = (oh * self.stride + ki) as isize - self.padding as isize;
        (ih >= 0 && (ih as usize) < self.h).then_some(ih as usize)
    }

    #[inline]
    fn in_col(&self, ow: usize, kj: usize) -> usize {
        ow * self.stride + kj - self.padding
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], x: &[T], a: T) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent lanes; the summation order is fixed,
/// so results are reproducible bit for bit.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn conv_forward_direct<T: Real>(input: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let (cg, kg) = (g.in_per_group(), g.out_per_group());
    let mut out = vec![T::zero(); g.n * g.k * ohw];
    for n in 0..g.n {
        for k in 0..g.k {
            let grp = k / kg;
            let out_plane = &mut out[(n * g.k + k) * ohw..][..ohw];
            for ci in 0..cg {
                let c = grp * cg + ci;
                let in_plane = &input[(n * g.c + c) * hw..][..hw];
                let wbase = (k * cg + ci) * g.kh * g.kw;
                if g.pointwise() {
                    axpy(out_plane, in_plane, kernel[wbase]);
                    continue;
                }
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let w = kernel[wbase + ki * g.kw + kj];
                        let (lo, hi) = g.col_range(kj);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..g.oh {
                            let Some(ih) = g.in_row(oh, ki) else { continue };
                            let in_row = &in_plane[ih * g.w..][..g.w];
                            let out_row = &mut out_plane[oh * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let off = g.in_col(lo, kj);
                                axpy(&mut out_row[lo..hi], &in_row[off..off + hi - lo], w);
                            } else {
                                for ow in lo..hi {
                                    out_row[ow] += w * in_row[g.in_col(ow, kj)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input_direct<T: Real>(grad_out: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let (cg, kg) = (g.in_per_group(), g.out_per_group());
    let mut gin = vec![T::zero(); g.n * g.c * hw];
    for n in 0..g.n {
        for k in 0..g.k {
            let grp = k / kg;
            let go_plane = &grad_out[(n * g.k + k) * ohw..][..ohw];
            for ci in 0..cg {
                let c = grp * cg + ci;
                let gin_plane = &mut gin[(n * g.c + c) * hw..][..hw];
                let wbase = (k * cg + ci) * g.kh * g.kw;
                if g.pointwise() {
                    axpy(gin_plane, go_plane, kernel[wbase]);
                    continue;
                }
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let w = kernel[wbase + ki * g.kw + kj];
                        let (lo, hi) = g.col_range(kj);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..g.oh {
                            let Some(ih) = g.in_row(oh, ki) else { continue };
                            let gin_row = &mut gin_plane[ih * g.w..][..g.w];
                            let go_row = &go_plane[oh * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let off = g.in_col(lo, kj);
                                axpy(&mut gin_row[off..off + hi - lo], &go_row[lo..hi], w);
                            } else {
                                for ow in lo..hi {
                                    gin_row[g.in_col(ow, kj)] += w * go_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

fn conv_backward_kernel_direct<T: Real>(grad_out: &[T], input: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let (cg, kg) = (g.in_per_group(), g.out_per_group());
    let mut gk = vec![T::zero(); g.k * cg * g.kh * g.kw];
    for n in 0..g.n {
        for k in 0..g.k {
            let grp = k / kg;
            let go_plane = &grad_out[(n * g.k + k) * ohw..][..ohw];
            for ci in 0..cg {
                let c = grp * cg + ci;
                let in_plane = &input[(n * g.c + c) * hw..][..hw];
                let wbase = (k * cg + ci) * g.kh * g.kw;
                if g.pointwise() {
                    gk[wbase] += dot(go_plane, in_plane);
                    continue;
                }
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let (lo, hi) = g.col_range(kj);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oh in 0..g.oh {
                            let Some(ih) = g.in_row(oh, ki) else { continue };
                            let in_row = &in_plane[ih * g.w..][..g.w];
                            let go_row = &go_plane[oh * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let off = g.in_col(lo, kj);
                                acc += dot(&go_row[lo..hi], &in_row[off..off + hi - lo]);
                            } else {
                                for ow in lo..hi {
                                    acc += go_row[ow] * in_row[g.in_col(ow, kj)];
                                }
                            }
                        }
                        gk[wbase + ki * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    gk
}

fn ckk(g: &ConvGeom) -> usize {
    g.c * g.kh * g.kw
}

/// Unfolds one `[C, H, W]` sample into `[C·kh·kw, OH·OW]` rows.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let ohw = g.oh * g.ow;
    col.fill(T::zero());
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut col[((c * g.kh + ki) * g.kw + kj) * ohw..][..ohw];
                let (lo, hi) = g.col_range(kj);
                for oh in 0..g.oh {
                    let Some(ih) = g.in_row(oh, ki) else { continue };
                    let src = &plane[ih * g.w..][..g.w];
                    let dst = &mut row[oh * g.ow..][..g.ow];
                    for ow in lo..hi {
                        dst[ow] = src[g.in_col(ow, kj)];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[C·kh·kw, OH·OW]` rows back, adding.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &col[((c * g.kh + ki) * g.kw + kj) * ohw..][..ohw];
                let (lo, hi) = g.col_range(kj);
                for oh in 0..g.oh {
                    let Some(ih) = g.in_row(oh, ki) else { continue };
                    let dst = &mut plane[ih * g.w..][..g.w];
                    let src = &row[oh * g.ow..][..g.ow];
                    for ow in lo..hi {
                        dst[g.in_col(ow, kj)] += src[ow];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(input: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    if depthwise(g) {
        return depthwise_forward(input, kernel, g);
    }
    if g.groups != 1 {
        return conv_forward_direct(input, kernel, g);
    }
    let (chw, ohw, ckk) = (g.c * g.h * g.w, g.oh * g.ow, ckk(g));
    let mut out = vec![T::zero(); g.n * g.k * ohw];
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { ckk * ohw }];
    for n in 0..g.n {
        let x = &input[n * chw..][..chw];
        let b = if g.pointwise() {
            x
        } else {
            im2col(x, g, &mut col);
            &col
        };
        T::gemm(g.k, ckk, ohw, kernel, [ckk, 1], b, [ohw, 1], T::zero(), &mut out[n * g.k * ohw..][..g.k * ohw], ohw);
    }
    out
}

pub(crate) fn conv_backward_input<T: Real>(grad_out: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    if depthwise(g) {
        return depthwise_backward_input(grad_out, kernel, g);
    }
    if g.groups != 1 {
        return conv_backward_input_direct(grad_out, kernel, g);
    }
    let (chw, ohw, ckk) = (g.c * g.h * g.w, g.oh * g.ow, ckk(g));
    let mut gin = vec![T::zero(); g.n * chw];
    let mut dcol = vec![T::zero(); if g.pointwise() { 0 } else { ckk * ohw }];
    for n in 0..g.n {
        let go = &grad_out[n * g.k * ohw..][..g.k * ohw];
        let dst = &mut gin[n * chw..][..chw];
        if g.pointwise() {
            T::gemm(ckk, g.k, ohw, kernel, [1, ckk], go, [ohw, 1], T::zero(), dst, ohw);
        } else {
            T::gemm(ckk, g.k, ohw, kernel, [1, ckk], go, [ohw, 1], T::zero(), &mut dcol, ohw);
            col2im(&dcol, g, dst);
        }
    }
    gin
}

pub(crate) fn conv_backward_kernel<T: Real>(grad_out: &[T], input: &[T], g: &ConvGeom) -> Vec<T> {
    if depthwise(g) {
        return depthwise_backward_kernel(grad_out, input, g);
    }
    if g.groups != 1 {
        return conv_backward_kernel_direct(grad_out, input, g);
    }
    let (chw, ohw, ckk) = (g.c * g.h * g.w, g.oh * g.ow, ckk(g));
    let mut gk = vec![T::zero(); g.k * ckk];
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { ckk * ohw }];
    for n in 0..g.n {
        let x = &input[n * chw..][..chw];
        let b = if g.pointwise() {
            x
        } else {
            im2col(x, g, &mut col);
            &col
        };
        let go = &grad_out[n * g.k * ohw..][..g.k * ohw];
        T::gemm(g.k, ohw, ckk, go, [ohw, 1], b, [1, ohw], T::one(), &mut gk, ckk);
    }
    gk
}

fn depthwise(g: &ConvGeom) -> bool {
    g.groups == g.c && g.k == g.c
}

/// Copies one plane into a zero-bordered buffer of `(H+2p) × (W+2p)`.
fn pad_plane<T: Real>(src: &[T], g: &ConvGeom, buf: &mut [T]) {
    let pw = g.w + 2 * g.padding;
    buf.fill(T::zero());
    for ih in 0..g.h {
        buf[(ih + g.padding) * pw + g.padding..][..g.w].copy_from_slice(&src[ih * g.w..][..g.w]);
    }
}

fn padded_len(g: &ConvGeom) -> usize {
    (g.h + 2 * g.padding) * (g.w + 2 * g.padding)
}

fn depthwise_forward<T: Real>(input: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, ohw, kk, pw, s) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw, g.w + 2 * g.padding, g.stride);
    let mut out = vec![T::zero(); g.n * g.c * ohw];
    let mut buf = vec![T::zero(); padded_len(g)];
    for (p, out_plane) in out.chunks_exact_mut(ohw).enumerate() {
        let c = p % g.c;
        pad_plane(&input[p * hw..][..hw], g, &mut buf);
        let wk = &kernel[c * kk..][..kk];
        for (oh, out_row) in out_plane.chunks_exact_mut(g.ow).enumerate() {
            for ki in 0..g.kh {
                let row = &buf[(oh * s + ki) * pw..][..pw];
                for kj in 0..g.kw {
                    let w = wk[ki * g.kw + kj];
                    if s == 1 {
                        axpy(out_row, &row[kj..kj + g.ow], w);
                    } else {
                        for (ow, o) in out_row.iter_mut().enumerate() {
                            *o += w * row[ow * s + kj];
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward_input<T: Real>(grad_out: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, ohw, kk, pw, s) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw, g.w + 2 * g.padding, g.stride);
    let mut gin = vec![T::zero(); g.n * g.c * hw];
    let mut buf = vec![T::zero(); padded_len(g)];
    for (p, gin_plane) in gin.chunks_exact_mut(hw).enumerate() {
        let c = p % g.c;
        buf.fill(T::zero());
        let wk = &kernel[c * kk..][..kk];
        for (oh, go_row) in grad_out[p * ohw..][..ohw].chunks_exact(g.ow).enumerate() {
            for ki in 0..g.kh {
                let row = &mut buf[(oh * s + ki) * pw..][..pw];
                for kj in 0..g.kw {
                    let w = wk[ki * g.kw + kj];
                    if s == 1 {
                        axpy(&mut row[kj..kj + g.ow], go_row, w);
                    } else {
                        for (ow, &go) in go_row.iter().enumerate() {
                            row[ow * s + kj] += w * go;
                        }
                    }
                }
            }
        }
        for ih in 0..g.h {
            gin_plane[ih * g.w..][..g.w].copy_from_slice(&buf[(ih + g.padding) * pw + g.padding..][..g.w]);
        }
    }
    gin
}

fn depthwise_backward_kernel<T: Real>(grad_out: &[T], input: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, ohw, kk, pw, s) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw, g.w + 2 * g.padding, g.stride);
    let mut gk = vec![T::zero(); g.c * kk];
    let mut buf = vec![T::zero(); padded_len(g)];
    for p in 0..g.n * g.c {
        let c = p % g.c;
        pad_plane(&input[p * hw..][..hw], g, &mut buf);
        let acc = &mut gk[c * kk..][..kk];
        for (oh, go_row) in grad_out[p * ohw..][..ohw].chunks_exact(g.ow).enumerate() {
            for ki in 0..g.kh {
                let row = &buf[(oh * s + ki) * pw..][..pw];
                for kj in 0..g.kw {
                    acc[ki * g.kw + kj] += if s == 1 {
                        dot(go_row, &row[kj..kj + g.ow])
                    } else {
                        go_row.iter().enumerate().map(|(ow, &go)| go * row[ow * s + kj]).sum()
                    };
                }
            }
        }
    }
    gk
}

/// 2×2/2 max pooling; returns values and flat argmax indices into the input.
pub(crate) fn max_pool2x2<T: Real>(input: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
