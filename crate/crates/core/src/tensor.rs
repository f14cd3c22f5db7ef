//! Channel-major feature maps and the handful of kernels the networks need
//! (3×3 convolution through im2col + GEMM, bilinear resampling, pooling,
//! leaky ReLU), each with its adjoint.

pub const LRELU_SLOPE: f64 = 0.2;

/// A `c × h × w` array stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn filled(c: usize, h: usize, w: usize, v: f64) -> Self {
        Tensor3 {
            c,
            h,
            w,
            data: vec![v; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor3 { c, h, w, data }
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.hw();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.hw();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interleaved `h × w × 3` view used by image I/O.
    pub fn to_hwc(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..self.c {
                    out.push(self.at(c, y, x));
                }
            }
        }
        out
    }

    pub fn from_hwc(c: usize, h: usize, w: usize, hwc: &[f64]) -> Self {
        let mut t = Tensor3::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    *t.at_mut(ch, y, x) = hwc[(y * w + x) * c + ch];
                }
            }
        }
        t
    }
}

/// `c = alpha · op(a) · op(b) + beta · c` on row-major buffers, where
/// `op(a)` is `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above and the strides describe
    // exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold 3×3 zero-padded neighbourhoods into a `(c·9) × (h·w)` matrix.
pub fn im2col3x3(x: &Tensor3) -> Vec<f64> {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let src = x.channel(ch);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[y * w + xx] = src[sy * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`].
pub fn col2im3x3(cols: &[f64], c: usize, h: usize, w: usize) -> Tensor3 {
    let hw = h * w;
    let mut out = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        let dst = out.channel_mut(ch);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[sy * w + sx as usize] += row[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Plain 3×3 same-padded convolution. `weight` is `c_out × (c_in·9)`.
/// Returns the output and the im2col buffer needed by the backward pass.
pub fn conv3x3(x: &Tensor3, weight: &[f64], bias: &[f64]) -> (Tensor3, Vec<f64>) {
    let c_out = bias.len();
    let cols = im2col3x3(x);
    let hw = x.hw();
    let mut out = Tensor3::zeros(c_out, x.h, x.w);
    for o in 0..c_out {
        out.channel_mut(o).fill(bias[o]);
    }
    gemm(c_out, x.c * 9, hw, weight, false, &cols, false, &mut out.data, 1.0);
    (out, cols)
}

/// Backward of [`conv3x3`]. Accumulates into `d_weight`/`d_bias` when given
/// and returns the input gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    grad_out: &Tensor3,
    cols: &[f64],
    weight: &[f64],
    c_in: usize,
    d_weight: Option<&mut [f64]>,
    d_bias: Option<&mut [f64]>,
    need_input: bool,
) -> Option<Tensor3> {
    let c_out = grad_out.c;
    let hw = grad_out.hw();
    if let Some(dw) = d_weight {
        gemm(c_out, hw, c_in * 9, &grad_out.data, false, cols, true, dw, 1.0);
    }
    if let Some(db) = d_bias {
        for o in 0..c_out {
            db[o] += grad_out.channel(o).iter().sum::<f64>();
        }
    }
    if need_input {
        let mut dcols = vec![0.0; c_in * 9 * hw];
        gemm(
            c_in * 9,
            c_out,
            hw,
            weight,
            true,
            &grad_out.data,
            false,
            &mut dcols,
            0.0,
        );
        Some(col2im3x3(&dcols, c_in, grad_out.h, grad_out.w))
    } else {
        None
    }
}

/// Source taps for one output coordinate of a half-pixel-centred bilinear
/// resize (`align_corners = false`).
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize of every channel to `out_h × out_w`.
pub fn resize_bilinear(x: &Tensor3, out_h: usize, out_w: usize) -> Tensor3 {
    let ty = taps(x.h, out_h);
    let tx = taps(x.w, out_w);
    let mut out = Tensor3::zeros(x.c, out_h, out_w);
    for ch in 0..x.c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for (oy, ay) in ty.iter().enumerate() {
            let r0 = &src[ay.lo * x.w..][..x.w];
            let r1 = &src[ay.hi * x.w..][..x.w];
            for (ox, ax) in tx.iter().enumerate() {
                let top = r0[ax.lo] * (1.0 - ax.frac) + r0[ax.hi] * ax.frac;
                let bot = r1[ax.lo] * (1.0 - ax.frac) + r1[ax.hi] * ax.frac;
                dst[oy * out_w + ox] = top * (1.0 - ay.frac) + bot * ay.frac;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`] back onto an `in_h × in_w` grid.
pub fn resize_bilinear_backward(grad: &Tensor3, in_h: usize, in_w: usize) -> Tensor3 {
    let ty = taps(in_h, grad.h);
    let tx = taps(in_w, grad.w);
    let mut out = Tensor3::zeros(grad.c, in_h, in_w);
    for ch in 0..grad.c {
        let g = grad.channel(ch);
        let dst = out.channel_mut(ch);
        for (oy, ay) in ty.iter().enumerate() {
            for (ox, ax) in tx.iter().enumerate() {
                let v = g[oy * grad.w + ox];
                let top = v * (1.0 - ay.frac);
                let bot = v * ay.frac;
                dst[ay.lo * in_w + ax.lo] += top * (1.0 - ax.frac);
                dst[ay.lo * in_w + ax.hi] += top * ax.frac;
                dst[ay.hi * in_w + ax.lo] += bot * (1.0 - ax.frac);
                dst[ay.hi * in_w + ax.hi] += bot * ax.frac;
            }
        }
    }
    out
}

pub fn avg_pool2(x: &Tensor3) -> Tensor3 {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor3::zeros(x.c, oh, ow);
    for ch in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                let s = x.at(ch, 2 * y, 2 * xx)
                    + x.at(ch, 2 * y, 2 * xx + 1)
                    + x.at(ch, 2 * y + 1, 2 * xx)
                    + x.at(ch, 2 * y + 1, 2 * xx + 1);
                *out.at_mut(ch, y, xx) = 0.25 * s;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &Tensor3) -> Tensor3 {
    let mut out = Tensor3::zeros(grad.c, grad.h * 2, grad.w * 2);
    for ch in 0..grad.c {
        for y in 0..grad.h {
            for xx in 0..grad.w {
                let g = 0.25 * grad.at(ch, y, xx);
                *out.at_mut(ch, 2 * y, 2 * xx) = g;
                *out.at_mut(ch, 2 * y, 2 * xx + 1) = g;
                *out.at_mut(ch, 2 * y + 1, 2 * xx) = g;
                *out.at_mut(ch, 2 * y + 1, 2 * xx + 1) = g;
            }
        }
    }
    out
}

#[inline]
pub fn lrelu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LRELU_SLOPE * v
    }
}

pub fn lrelu_inplace(x: &mut Tensor3) {
    for v in &mut x.data {
        *v = lrelu(*v);
    }
}

/// Multiplies `grad` by the leaky ReLU derivative evaluated at `pre`.
pub fn lrelu_backward_inplace(grad: &mut Tensor3, pre: &Tensor3) {
    for (g, p) in grad.data.iter_mut().zip(&pre.data) {
        if *p <= 0.0 {
            *g *= LRELU_SLOPE;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor3, weight: &[f64], bias: &[f64]) -> Tensor3 {
        let c_out = bias.len();
        let mut out = Tensor3::zeros(c_out, x.h, x.w);
        for o in 0..c_out {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut s = bias[o];
                    for i in 0..x.c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wv = weight[o * x.c * 9 + i * 9 + (ky * 3 + kx) as usize];
                                s += wv * x.at(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    *out.at_mut(o, y as usize, xx as usize) = s;
                }
            }
        }
        out
    }

    fn ramp(c: usize, h: usize, w: usize, k: f64) -> Tensor3 {
        let data = (0..c * h * w).map(|i| ((i as f64) * k).sin()).collect();
        Tensor3::from_vec(c, h, w, data)
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = ramp(3, 5, 4, 0.37);
        let weight: Vec<f64> = (0..2 * 27).map(|i| ((i as f64) * 0.11).cos()).collect();
        let bias = [0.1, -0.2];
        let (fast, _) = conv3x3(&x, &weight, &bias);
        let slow = naive_conv(&x, &weight, &bias);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = ramp(2, 4, 3, 0.7);
        let cols = im2col3x3(&x);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i as f64) * 0.3).sin()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im3x3(&y, 2, 4, 3);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = ramp(2, 4, 4, 0.9);
        let up = resize_bilinear(&x, 8, 8);
        let g = ramp(2, 8, 8, 0.41);
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = resize_bilinear_backward(&g, 4, 4);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let x = Tensor3::filled(3, 4, 4, 0.625);
        let up = resize_bilinear(&x, 32, 32);
        assert!(up.data.iter().all(|&v| v == 0.625));
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let x = ramp(2, 4, 6, 0.5);
        let p = avg_pool2(&x);
        let g = ramp(2, 2, 3, 0.8);
        let lhs: f64 = p.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = avg_pool2_backward(&g);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposes() {
        // a: 2×3, b: 3×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ stored as 3×2, bᵀ stored as 2×3
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c2, c);
    }
}
