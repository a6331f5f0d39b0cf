//! Raw numeric kernels behind the graph operations. They work on flat
//! row-major slices and know nothing about gradients bookkeeping.

use super::Real;

/// Zero padding around the spatial dimensions of a convolution input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Padding that keeps the spatial size for a `k x k` kernel at stride 1.
    ///
    /// Even kernels cannot be centred, so the extra row and column go to the
    /// bottom and right: a 4x4 kernel pads 1 before and 2 after.
    pub fn same(k: usize) -> Self {
        let before = (k - 1) / 2;
        let after = k - 1 - before;
        Self {
            top: before,
            bottom: after,
            left: before,
            right: after,
        }
    }
}

/// Geometry of a stride-1 "same" convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: Padding,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one sample into a `(cin*k*k) x (h*w)` column matrix.
fn im2col<T: Real>(g: &ConvGeom, input: &[T], col: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let src = &input[ci * plane..(ci + 1) * plane];
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for i in 0..h {
                    let out_row = &mut dst[i * w..(i + 1) * w];
                    let ii = i as isize + u as isize - g.pad.top as isize;
                    if ii < 0 || ii >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[ii as usize * w..(ii as usize + 1) * w];
                    // Output column j reads input column j + v - left.
                    let shift = v as isize - g.pad.left as isize;
                    let j0 = (-shift).max(0) as usize;
                    let j1 = ((w as isize - shift).min(w as isize)).max(0) as usize;
                    out_row[..j0.min(w)].fill(T::zero());
                    if j1 > j0 {
                        let s0 = (j0 as isize + shift) as usize;
                        out_row[j0..j1].copy_from_slice(&src_row[s0..s0 + (j1 - j0)]);
                    }
                    out_row[j1.max(j0).min(w)..].fill(T::zero());
                }
            }
        }
    }
}

/// Folds a column matrix back onto one sample, accumulating.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], grad_input: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let dst = &mut grad_input[ci * plane..(ci + 1) * plane];
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let src = &col[row * plane..(row + 1) * plane];
                for i in 0..h {
                    let ii = i as isize + u as isize - g.pad.top as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let shift = v as isize - g.pad.left as isize;
                    let j0 = (-shift).max(0) as usize;
                    let j1 = ((w as isize - shift).min(w as isize)).max(0) as usize;
                    if j1 <= j0 {
                        continue;
                    }
                    let s0 = (j0 as isize + shift) as usize;
                    let dst_row = &mut dst[ii as usize * w + s0..ii as usize * w + s0 + (j1 - j0)];
                    let src_row = &src[i * w + j0..i * w + j1];
                    for (d, &s) in dst_row.iter_mut().zip(src_row) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Cross-correlation, `out[n,co,i,j] = bias[co] + sum in_pad[n,ci,i+u,j+v] * kernel[co,ci,u,v]`.
pub fn conv2d_forward<T: Real>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.plane();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let mut col = vec![T::zero(); g.patch_len() * plane];
    let in_stride = g.in_channels * plane;
    let out_stride = g.out_channels * plane;
    for n in 0..g.batch {
        im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut col);
        let dst = &mut out[n * out_stride..(n + 1) * out_stride];
        for (co, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        T::gemm(
            g.out_channels,
            g.patch_len(),
            plane,
            kernel,
            (g.patch_len() as isize, 1),
            &col,
            (plane as isize, 1),
            T::one(),
            dst,
            (plane as isize, 1),
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_input, need_kernel, need_bias) = need;
    let plane = g.plane();
    let pl = g.patch_len();
    let in_stride = g.in_channels * plane;
    let out_stride = g.out_channels * plane;

    let mut grad_input = need_input.then(|| vec![T::zero(); input.len()]);
    let mut grad_kernel = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut grad_bias = need_bias.then(|| vec![T::zero(); g.out_channels]);
    let mut col = vec![T::zero(); pl * plane];

    for n in 0..g.batch {
        let go = &grad_out[n * out_stride..(n + 1) * out_stride];
        if let Some(gb) = grad_bias.as_mut() {
            for (co, chunk) in go.chunks(plane).enumerate() {
                gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(gk) = grad_kernel.as_mut() {
            im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut col);
            // dK (cout x pl) += dOut (cout x plane) * col^T (plane x pl)
            T::gemm(
                g.out_channels,
                plane,
                pl,
                go,
                (plane as isize, 1),
                &col,
                (1, plane as isize),
                T::one(),
                gk,
                (pl as isize, 1),
            );
        }
        if let Some(gi) = grad_input.as_mut() {
            // dcol (pl x plane) = K^T (pl x cout) * dOut (cout x plane)
            T::gemm(
                pl,
                g.out_channels,
                plane,
                kernel,
                (1, pl as isize),
                go,
                (plane as isize, 1),
                T::zero(),
                &mut col,
                (plane as isize, 1),
            );
            col2im(g, &col, &mut gi[n * in_stride..(n + 1) * in_stride]);
        }
    }
    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled values and, for each,
/// the flat input index of the winning element (first maximum in row-major
/// window order).
pub fn maxpool2_forward<T: Real>(input: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> (Vec<T>, Vec<u32>) {
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
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(grad_out: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut gi = vec![T::zero(); input_len];
    for (&g, &a) in grad_out.iter().zip(argmax) {
        gi[a as usize] = gi[a as usize] + g;
    }
    gi
}

/// Nearest-neighbour 2x upsampling by pixel repetition.
pub fn upsample2_forward<T: Real>(input: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            let src_row = &src[(i / 2) * w..(i / 2 + 1) * w];
            let dst_row = &mut dst[i * ow..(i + 1) * ow];
            for (j, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[j / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gi = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gi[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let d = &mut dst[(i / 2) * w + j / 2];
                *d = *d + src[i * ow + j];
            }
        }
    }
    gi
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
