//! Convolution kernels built on im2col and a blocked dgemm.

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel > 0 && stride > 0, "kernel and stride must be positive");
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of a forward convolution, `None` when the input is too small.
    pub fn conv_out(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the matching transposed convolution.
    pub fn transpose_out(&self, input: usize) -> usize {
        ((input - 1) * self.stride + self.kernel)
            .checked_sub(2 * self.padding)
            .expect("transposed convolution output would be empty")
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the declared matrix sizes
    // and the strides describe in-bounds row-major layouts of those slices.
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

/// Unfolds one `[channels, h, w]` plane into `[channels * k * k, out_h * out_w]`.
pub fn im2col(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    geom: ConvGeometry,
    out_h: usize,
    out_w: usize,
    cols: &mut [f64],
) {
    let k = geom.kernel;
    let p = out_h * out_w;
    debug_assert_eq!(cols.len(), channels * k * k * p);
    let pad = geom.padding as isize;
    let stride = geom.stride as isize;
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..out_h {
                    let iy = oy as isize * stride + ky as isize - pad;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * stride + kx as isize - pad;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
pub fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    geom: ConvGeometry,
    out_h: usize,
    out_w: usize,
    out: &mut [f64],
) {
    let k = geom.kernel;
    let p = out_h * out_w;
    let pad = geom.padding as isize;
    let stride = geom.stride as isize;
    for c in 0..channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..out_h {
                    let iy = oy as isize * stride + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..out_w {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(geom: ConvGeometry) -> bool {
    geom.kernel == 1 && geom.stride == 1 && geom.padding == 0
}

/// Shapes shared by the forward and backward convolution routines.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeometry,
}

/// Forward convolution. `weight` is `[out_c, in_c, k, k]`.
pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, s: ConvShape) -> Vec<f64> {
    let k = s.geom.kernel;
    let ckk = s.in_channels * k * k;
    let p = s.out_h * s.out_w;
    let in_plane = s.in_channels * s.in_h * s.in_w;
    let mut out = vec![0.0; s.batch * s.out_channels * p];
    let mut cols = if is_pointwise(s.geom) { Vec::new() } else { vec![0.0; ckk * p] };
    for b in 0..s.batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let yb = &mut out[b * s.out_channels * p..(b + 1) * s.out_channels * p];
        if let Some(bias) = bias {
            for (oc, chunk) in yb.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[oc]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let src: &[f64] = if is_pointwise(s.geom) {
            xb
        } else {
            im2col(xb, s.in_channels, s.in_h, s.in_w, s.geom, s.out_h, s.out_w, &mut cols);
            &cols
        };
        gemm(s.out_channels, ckk, p, weight, false, src, false, beta, yb);
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
///
/// Each requested gradient buffer is accumulated into, not overwritten.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    s: ConvShape,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let k = s.geom.kernel;
    let ckk = s.in_channels * k * k;
    let p = s.out_h * s.out_w;
    let in_plane = s.in_channels * s.in_h * s.in_w;
    let pointwise = is_pointwise(s.geom);
    let mut cols = vec![0.0; ckk * p];
    for b in 0..s.batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let dyb = &dy[b * s.out_channels * p..(b + 1) * s.out_channels * p];
        if let Some(db) = db.as_deref_mut() {
            for (oc, chunk) in dyb.chunks(p).enumerate() {
                db[oc] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[f64] = if pointwise {
                xb
            } else {
                im2col(xb, s.in_channels, s.in_h, s.in_w, s.geom, s.out_h, s.out_w, &mut cols);
                &cols
            };
            gemm(s.out_channels, p, ckk, dyb, false, src, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
            if pointwise {
                gemm(ckk, s.out_channels, p, weight, true, dyb, false, 1.0, dxb);
            } else {
                gemm(ckk, s.out_channels, p, weight, true, dyb, false, 0.0, &mut cols);
                col2im(&cols, s.in_channels, s.in_h, s.in_w, s.geom, s.out_h, s.out_w, dxb);
            }
        }
    }
}

/// Transposed convolution. `weight` is `[in_c, out_c, k, k]`; `s.geom`
/// describes the forward convolution that maps the output back to the input.
pub fn conv_transpose2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    s: ConvShape,
) -> Vec<f64> {
    let k = s.geom.kernel;
    let okk = s.out_channels * k * k;
    let pin = s.in_h * s.in_w;
    let out_plane = s.out_channels * s.out_h * s.out_w;
    let mut out = vec![0.0; s.batch * out_plane];
    let mut cols = vec![0.0; okk * pin];
    for b in 0..s.batch {
        let xb = &x[b * s.in_channels * pin..(b + 1) * s.in_channels * pin];
        gemm(okk, s.in_channels, pin, weight, true, xb, false, 0.0, &mut cols);
        let yb = &mut out[b * out_plane..(b + 1) * out_plane];
        col2im(&cols, s.out_channels, s.out_h, s.out_w, s.geom, s.in_h, s.in_w, yb);
        if let Some(bias) = bias {
            let hw = s.out_h * s.out_w;
            for (oc, chunk) in yb.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
    }
    out
}

/// Gradients of [`conv_transpose2d_forward`], accumulated into the given buffers.
pub fn conv_transpose2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    s: ConvShape,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let k = s.geom.kernel;
    let okk = s.out_channels * k * k;
    let pin = s.in_h * s.in_w;
    let out_hw = s.out_h * s.out_w;
    let out_plane = s.out_channels * out_hw;
    let mut cols = vec![0.0; okk * pin];
    for b in 0..s.batch {
        let dyb = &dy[b * out_plane..(b + 1) * out_plane];
        if let Some(db) = db.as_deref_mut() {
            for (oc, chunk) in dyb.chunks(out_hw).enumerate() {
                db[oc] += chunk.iter().sum::<f64>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(dyb, s.out_channels, s.out_h, s.out_w, s.geom, s.in_h, s.in_w, &mut cols);
        let xb = &x[b * s.in_channels * pin..(b + 1) * s.in_channels * pin];
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * s.in_channels * pin..(b + 1) * s.in_channels * pin];
            gemm(s.in_channels, okk, pin, weight, false, &cols, false, 1.0, dxb);
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm(s.in_channels, pin, okk, xb, false, &cols, true, 1.0, dw);
        }
    }
}
